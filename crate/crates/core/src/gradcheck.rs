//! Analytic solver gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::solver::{
    accumulate, solve, solve_gradients, ConditionFlag, FrameMap, SolveError, SolveSystem,
};
use crate::synth::random_rotation;
use crate::{Mat3, Vec3};

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Instances with `cond(H − λI)` above this are regenerated.
pub const MAX_TRIAL_CONDITION: f64 = 1e3;

/// `‖J_analytic − J_fd‖_F / ‖J_fd‖_F`.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn solve_u(sys: &SolveSystem) -> Result<(Vec3, f64), SolveError> {
    let r = solve(sys)?;
    Ok((r.u, r.lambda))
}

/// Checks `∂(u, λ)/∂(H, g)` on all 12 inputs.
pub fn check_system(sys: &SolveSystem) -> Result<f64, SolveError> {
    let res = solve(sys)?;
    let grads = solve_gradients(sys, &res)?;
    let mut analytic = Vec::with_capacity(48);
    let mut numeric = Vec::with_capacity(48);
    let central = |f: &dyn Fn(f64) -> SolveSystem| -> Result<(Vec3, f64), SolveError> {
        let (up, lp) = solve_u(&f(FD_STEP))?;
        let (um, lm) = solve_u(&f(-FD_STEP))?;
        Ok(((up - um) / (2.0 * FD_STEP), (lp - lm) / (2.0 * FD_STEP)))
    };
    for j in 0..3 {
        for k in 0..3 {
            let (du, dl) = central(&|h| {
                let mut s = *sys;
                s.h[(j, k)] += h;
                s
            })?;
            for i in 0..3 {
                analytic.push(grads.du_dh[i][(j, k)]);
                numeric.push(du[i]);
            }
            analytic.push(grads.dlambda_dh[(j, k)]);
            numeric.push(dl);
        }
    }
    for j in 0..3 {
        let (du, dl) = central(&|h| {
            let mut s = *sys;
            s.g[j] += h;
            s
        })?;
        for i in 0..3 {
            analytic.push(grads.du_dg[(i, j)]);
            numeric.push(du[i]);
        }
        analytic.push(grads.dlambda_dg[j]);
        numeric.push(dl);
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Checks `∂u` with respect to every frame entry, layout entry and weight of
/// every valid pixel.
pub fn check_map(map: &FrameMap) -> Result<f64, SolveError> {
    let sys = accumulate(map)?;
    let res = solve(&sys)?;
    let grads = solve_gradients(&sys, &res)?;
    let u_of = |m: &FrameMap| -> Result<Vec3, SolveError> { Ok(solve(&accumulate(m)?)?.u) };
    let central = |edit: &dyn Fn(&mut FrameMap, f64)| -> Result<Vec3, SolveError> {
        let mut p = map.clone();
        edit(&mut p, FD_STEP);
        let mut m = map.clone();
        edit(&mut m, -FD_STEP);
        Ok((u_of(&p)? - u_of(&m)?) / (2.0 * FD_STEP))
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for idx in (0..map.len()).filter(|&i| map.mask()[i]) {
        let pg = grads.pixel(map, idx);
        for a in 0..3 {
            for m in 0..3 {
                let d = central(&|mm, h| mm.frames_mut()[idx][(a, m)] += h)?;
                for i in 0..3 {
                    analytic.push(pg.du_dframe[i][(a, m)]);
                    numeric.push(d[i]);
                }
            }
        }
        for m in 0..3 {
            let d = central(&|mm, h| mm.layout_mut()[idx][m] += h)?;
            for i in 0..3 {
                analytic.push(pg.du_dlayout[(i, m)]);
                numeric.push(d[i]);
            }
            let d = central(&|mm, h| {
                let mut w = mm.weights()[idx];
                w[m] += h;
                mm.set_weight(idx, w).expect("weights stay positive");
            })?;
            for i in 0..3 {
                analytic.push(pg.du_dweights[(i, m)]);
                numeric.push(d[i]);
            }
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn condition_ok(sys: &SolveSystem) -> bool {
    let Ok(r) = solve(sys) else { return false };
    if r.condition_flag != ConditionFlag::Ok {
        return false;
    }
    let h = (sys.h + sys.h.transpose()) * 0.5;
    let d = h.symmetric_eigenvalues().map(|e| (e - r.lambda).abs());
    d.min() > 0.0 && d.max() / d.min() <= MAX_TRIAL_CONDITION
}

/// `H = Q diag(e) Qᵀ` with `e ∈ [1, 4]`, `‖g‖ ∈ [0.5, 3]`, redrawn until
/// `cond(H − λI) ≤ 1e3`.
pub fn random_system<R: Rng>(rng: &mut R) -> SolveSystem {
    loop {
        let q = random_rotation(rng);
        let e = Vec3::from_fn(|_, _| rng.random_range(1.0..4.0));
        let h = q * Mat3::from_diagonal(&e) * q.transpose();
        let dir = (random_rotation(rng) * Vec3::z()).normalize();
        let g = dir * rng.random_range(0.5..3.0);
        let sys = SolveSystem::new(h, g);
        if condition_ok(&sys) {
            return sys;
        }
    }
}

/// `n` pixels with random rotations as frames, layout vectors near `uᵀF`
/// for a random `u`, and weights in `[0.2, 1.5]`.
pub fn random_map<R: Rng>(rng: &mut R, n: usize) -> FrameMap {
    loop {
        let u = random_rotation(rng) * Vec3::z();
        let frames: Vec<Mat3> = (0..n).map(|_| random_rotation(rng)).collect();
        let layout: Vec<Vec3> = frames
            .iter()
            .map(|f| {
                let noise = Vec3::from_fn(|_, _| rng.random_range(-0.3..0.3));
                (f.transpose() * u + noise).normalize()
            })
            .collect();
        let weights: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(0.2..1.5))).collect();
        let map = FrameMap::new(n, 1, frames, layout, weights, vec![true; n]).expect("valid random map");
        if accumulate(&map).map(|s| condition_ok(&s)).unwrap_or(false) {
            return map;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    pub checked: usize,
    /// Instances where gradients were unavailable.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.max_rel_err <= TOLERANCE
    }

    fn record(&mut self, outcome: Result<f64, SolveError>) -> Result<(), SolveError> {
        match outcome {
            Ok(err) => {
                self.checked += 1;
                self.max_rel_err = self.max_rel_err.max(err);
                if !(err <= TOLERANCE) {
                    self.failures += 1;
                }
                Ok(())
            }
            Err(SolveError::GradientUnavailable(_)) => {
                self.skipped += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// Each trial checks one random `(H, g)` system and one random 6-pixel map.
/// Extra systems (e.g. deliberately degenerate ones) are appended as-is.
pub fn run(trials: usize, seed: u64, extra: &[SolveSystem]) -> Result<GradcheckReport, SolveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport { trials, checked: 0, skipped: 0, max_rel_err: 0.0, failures: 0 };
    for _ in 0..trials {
        let sys = random_system(&mut rng);
        report.record(check_system(&sys))?;
        let map = random_map(&mut rng, 6);
        report.record(check_map(&map))?;
    }
    for sys in extra {
        report.record(check_system(sys))?;
    }
    Ok(report)
}

/// A system whose homogeneous fallback makes gradients unavailable.
pub fn degenerate_system() -> SolveSystem {
    SolveSystem::new(Mat3::from_diagonal(&Vec3::new(1.0, 2.0, 3.0)), Vec3::zeros())
}
