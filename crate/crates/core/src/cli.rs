//! Command-line front end.
//!
//! Exit codes: 0 success, 1 any per-item failure, 2 usage error.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::eval::{evaluate, format_table, EvalSummary};
use crate::geometry::{horizon_line, CameraIntrinsics, GeometryError, HorizonLine};
use crate::gradcheck;
use crate::io::{self, GroundTruthRecord, ResultRecord};
use crate::solver::{accumulate_strided, solve, FrameMap};
use crate::synth::{corrupt, render, CorruptionSpec, OutlierMode, Scene};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "UPRIGHT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "upright", version, about = "Camera pitch/roll from surface-frame maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the up vector of each UFM1 frame map.
    Solve(SolveArgs),
    /// Render synthetic frame maps and ground truth.
    Synth(SynthArgs),
    /// Summarize result records against ground truth.
    Eval(EvalArgs),
    /// Compare solver gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Horizon line for a result record.
    Horizon(HorizonArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Input UFM1 files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Use the weight channels (default).
    #[arg(long, conflicts_with = "unweighted")]
    pub weighted: bool,
    /// Treat every weight as 1.
    #[arg(long)]
    pub unweighted: bool,
    /// Divide each weight channel by its mean before solving.
    #[arg(long)]
    pub normalize_weights: bool,
    /// Use every k-th row and column.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub stride: u32,
    /// Write records here instead of standard output.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Record zero timing so output is reproducible byte for byte.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene config file (key = value).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of maps; above 1 the pose is randomized per map.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Normal noise standard deviation in degrees.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Fraction of pixels replaced by outliers.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    #[arg(long, default_value = "random_frame")]
    pub outlier_mode: OutlierMode,
    /// Store oracle inlier weights in the weight channels.
    #[arg(long)]
    pub oracle_weights: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth records.
    #[arg(long)]
    pub gt: PathBuf,
    /// Result record files; each is one method, named by file stem.
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
    /// Also write summaries as JSON lines.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Append a degenerate instance, which must be skipped.
    #[arg(long)]
    pub inject_degenerate: bool,
}

#[derive(Debug, Args)]
pub struct HorizonArgs {
    /// Result records file.
    #[arg(long)]
    pub record: PathBuf,
    /// Record id; defaults to the first record.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    /// Vertical field of view in degrees.
    #[arg(long)]
    pub fov: f64,
    /// Write a plain PGM with the line drawn in.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

/// Parses arguments and runs the command. Writes to the given streams.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Solve(a) => cmd_solve(&a, out, err),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Horizon(a) => cmd_horizon(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_FAILURE
        }
    }
}

type CmdResult = Result<i32, String>;

fn solve_file(path: &Path, args: &SolveArgs) -> Result<ResultRecord, String> {
    let start = Instant::now();
    let mut map: FrameMap = io::read_frame_map(path).map_err(|e| e.to_string())?;
    if args.unweighted {
        map = map.with_unit_weights();
    } else if args.normalize_weights {
        map = map.normalized_weights().map_err(|e| e.to_string())?;
    }
    let sys = accumulate_strided(&map, args.stride as usize).map_err(|e| e.to_string())?;
    let res = solve(&sys).map_err(|e| e.to_string())?;
    let ms = if args.no_timing { 0.0 } else { start.elapsed().as_secs_f64() * 1e3 };
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(ResultRecord::from_result(id, &res, ms))
}

pub fn cmd_solve(args: &SolveArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let outcomes: Vec<Result<ResultRecord, String>> =
        args.inputs.par_iter().map(|p| solve_file(p, args)).collect();
    let mut sink: Box<dyn Write + '_> = match &args.output {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).map_err(|e| format!("{}: {e}", p.display()))?,
        )),
        None => Box::new(&mut *out),
    };
    let mut failed = 0;
    for (path, outcome) in args.inputs.iter().zip(outcomes) {
        match outcome {
            Ok(rec) => io::write_result(&mut sink, &rec).map_err(|e| e.to_string())?,
            Err(e) => {
                failed += 1;
                let _ = writeln!(err, "{}: {e}", path.display());
            }
        }
    }
    sink.flush().map_err(|e| e.to_string())?;
    Ok(if failed > 0 { EXIT_FAILURE } else { EXIT_OK })
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> CmdResult {
    let mut base = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Scene::from_config(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => Scene::default(),
    };
    if let Some(s) = args.seed {
        base.seed = s;
    }
    let scenes: Vec<Scene> = if args.count <= 1 {
        vec![base]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
        (0..args.count).map(|_| Scene::random(&mut rng, &base, 45.0, 30.0)).collect()
    };
    fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let mut truth = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let id = format!("scene_{i:05}");
        let rendered = render(scene).map_err(|e| e.to_string())?;
        let spec = CorruptionSpec {
            normal_noise_sigma: args.noise,
            outlier_fraction: args.outliers,
            outlier_mode: args.outlier_mode,
            seed: scene.seed,
        };
        let corrupted = corrupt(&rendered.map, &spec).map_err(|e| e.to_string())?;
        let map = if args.oracle_weights {
            corrupted.map.with_weights(corrupted.oracle_weights).map_err(|e| e.to_string())?
        } else {
            corrupted.map
        };
        let path = args.out.join(format!("{id}.ufm"));
        io::save_frame_map(&path, &map).map_err(|e| format!("{}: {e}", path.display()))?;
        truth.push(GroundTruthRecord {
            id,
            u: [rendered.up.x, rendered.up.y, rendered.up.z],
            pitch: scene.angles.pitch,
            roll: scene.angles.roll,
            yaw: scene.yaw,
        });
    }
    let gt_path = args.out.join("ground_truth.jsonl");
    let mut w = BufWriter::new(fs::File::create(&gt_path).map_err(|e| format!("{}: {e}", gt_path.display()))?);
    for t in &truth {
        io::write_record(&mut w, t).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())?;
    let _ = writeln!(out, "wrote {} map(s) and {} to {}", truth.len(), gt_path.display(), args.out.display());
    Ok(EXIT_OK)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let truth: Vec<GroundTruthRecord> =
        io::read_records_file(&args.gt).map_err(|e| format!("{}: {e}", args.gt.display()))?;
    let mut summaries: Vec<EvalSummary> = Vec::new();
    for p in &args.results {
        let results: Vec<ResultRecord> = io::read_records_file(p).map_err(|e| format!("{}: {e}", p.display()))?;
        let method = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        summaries.push(evaluate(&method, &results, &truth).map_err(|e| format!("{}: {e}", p.display()))?);
    }
    write!(out, "{}", format_table(&summaries)).map_err(|e| e.to_string())?;
    if let Some(path) = &args.json {
        let mut w = BufWriter::new(fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?);
        for s in &summaries {
            io::write_record(&mut w, s).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    let extra = if args.inject_degenerate { vec![gradcheck::degenerate_system()] } else { vec![] };
    let report = gradcheck::run(args.trials, args.seed, &extra).map_err(|e| e.to_string())?;
    let status = if report.passed() { "pass" } else { "FAIL" };
    writeln!(
        out,
        "gradcheck: trials={} checked={} skipped={} failures={} max_rel_err={:.3e} tolerance={:.0e} {status}",
        report.trials,
        report.checked,
        report.skipped,
        report.failures,
        report.max_rel_err,
        gradcheck::TOLERANCE
    )
    .map_err(|e| e.to_string())?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE })
}

pub fn cmd_horizon(args: &HorizonArgs, out: &mut dyn Write) -> CmdResult {
    let records: Vec<ResultRecord> =
        io::read_records_file(&args.record).map_err(|e| format!("{}: {e}", args.record.display()))?;
    let rec = match &args.id {
        Some(id) => records.iter().find(|r| &r.id == id).ok_or_else(|| format!("no record with id `{id}`"))?,
        None => records.first().ok_or_else(|| format!("{}: no records", args.record.display()))?,
    };
    let k = CameraIntrinsics::new(args.width, args.height, args.fov).map_err(|e| e.to_string())?;
    let line = match horizon_line(&rec.up(), &k) {
        Ok(l) => Some(l),
        Err(GeometryError::NoVisibleHorizon) => None,
        Err(e) => return Err(e.to_string()),
    };
    match &line {
        Some(l) => writeln!(
            out,
            "id {}\nstart {:.6} {:.6}\nend {:.6} {:.6}\nslope_deg {:.6}",
            rec.id,
            l.start.0,
            l.start.1,
            l.end.0,
            l.end.1,
            l.slope_deg()
        ),
        None => writeln!(out, "id {}\nno visible horizon", rec.id),
    }
    .map_err(|e| e.to_string())?;
    if let Some(path) = &args.overlay {
        fs::write(path, overlay_pgm(args.width, args.height, line.as_ref()))
            .map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(EXIT_OK)
}

/// Plain (P2) grayscale image: background 64, horizon 255.
pub fn overlay_pgm(width: u32, height: u32, line: Option<&HorizonLine>) -> String {
    let (w, h) = (width as usize, height as usize);
    let mut px = vec![64u8; w * h];
    if let Some(l) = line {
        let (dx, dy) = (l.end.0 - l.start.0, l.end.1 - l.start.1);
        let steps = (2.0 * dx.abs().max(dy.abs())).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let c = ((l.start.0 + t * dx).floor() as isize).clamp(0, w as isize - 1) as usize;
            let v = ((l.start.1 + t * dy).floor() as isize).clamp(0, h as isize - 1) as usize;
            px[v * w + c] = 255;
        }
    }
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in px.chunks(w) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        s += &line.join(" ");
        s.push('\n');
    }
    s
}

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|n: &usize| *n > 0)
}
