//! Synthetic ground truth from an axis-aligned box room, plus corruption
//! models for noisy and outlier-laden frame maps.
//!
//! # Random numbers
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)` (the
//! `rand_chacha` counter-based stream cipher generator). Uniform floats use
//! `rand`'s 53-bit conversion and normal deviates use `rand_distr`'s
//! `StandardNormal`. [`corrupt`] draws, in order: for every pixel in
//! row-major order (only when `σ > 0`) three normals for the rotation axis and
//! one normal for the angle; then the outlier index set via
//! `rand::seq::index::sample`; then, for every outlier in ascending pixel
//! order, four normals forming a random unit quaternion (random-frame mode
//! only).

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    build_frame_with_axis, up_from_rotation, CameraIntrinsics, CoordinateSystem, GeometryError,
    OrientationAngles, Rotation,
};
use crate::solver::{FrameMap, SolveError};
use crate::{Mat3, Vec3};

pub const MAX_PITCH: f64 = 60.0;
pub const MAX_ROLL: f64 = 45.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config key `{key}`: {message}")]
    InvalidKey { key: String, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("invalid corruption parameters: {0}")]
    InvalidCorruption(String),
}

/// Box room `[0, w] × [0, d] × [0, h]` in meters, z up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Room {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
}

impl Room {
    fn extent(&self) -> Vec3 {
        Vec3::new(self.width, self.depth, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub room: Room,
    pub camera: Vec3,
    pub angles: OrientationAngles,
    /// Degrees.
    pub yaw: f64,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl Default for Scene {
    fn default() -> Self {
        Scene {
            room: Room { width: 6.0, depth: 5.0, height: 3.0 },
            camera: Vec3::new(3.0, 2.5, 1.5),
            angles: OrientationAngles { pitch: 0.0, roll: 0.0 },
            yaw: 0.0,
            intrinsics: CameraIntrinsics::new(192, 144, 40.0).expect("valid default intrinsics"),
            seed: 0,
        }
    }
}

const CONFIG_KEYS: [&str; 13] = [
    "room_w", "room_d", "room_h", "cam_x", "cam_y", "cam_z", "pitch", "roll", "yaw", "fov_v",
    "width", "height", "seed",
];

fn key_error(key: &str, message: impl Into<String>) -> SynthError {
    SynthError::InvalidKey { key: key.to_string(), message: message.into() }
}

impl Scene {
    pub fn validate(&self) -> Result<(), SynthError> {
        let e = self.room.extent();
        for (k, v) in [("room_w", e.x), ("room_d", e.y), ("room_h", e.z)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(key_error(k, format!("{v} must be positive")));
            }
        }
        for (k, p, m) in [("cam_x", self.camera.x, e.x), ("cam_y", self.camera.y, e.y), ("cam_z", self.camera.z, e.z)] {
            if !(p > 0.0 && p < m) {
                return Err(key_error(k, format!("{p} is not strictly inside (0, {m})")));
            }
        }
        if !(self.angles.pitch.abs() <= MAX_PITCH) {
            return Err(key_error("pitch", format!("{} outside [-{MAX_PITCH}, {MAX_PITCH}]", self.angles.pitch)));
        }
        if !(self.angles.roll.abs() <= MAX_ROLL) {
            return Err(key_error("roll", format!("{} outside [-{MAX_ROLL}, {MAX_ROLL}]", self.angles.roll)));
        }
        if !self.yaw.is_finite() {
            return Err(key_error("yaw", "not finite"));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep
    /// their [`Scene::default`] values.
    pub fn from_config(text: &str) -> Result<Self, SynthError> {
        let mut values: BTreeMap<&str, &str> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(SynthError::Syntax { line: idx + 1, message: format!("expected key=value, got `{line}`") });
            };
            let k = k.trim();
            let Some(&key) = CONFIG_KEYS.iter().find(|c| **c == k) else {
                return Err(key_error(k, "unknown key"));
            };
            values.insert(key, v.trim());
        }
        fn get<T: FromStr>(values: &BTreeMap<&str, &str>, key: &str, default: T) -> Result<T, SynthError> {
            match values.get(key) {
                None => Ok(default),
                Some(s) => s.parse().map_err(|_| key_error(key, format!("cannot parse `{s}`"))),
            }
        }
        let d = Scene::default();
        let room = Room {
            width: get(&values, "room_w", d.room.width)?,
            depth: get(&values, "room_d", d.room.depth)?,
            height: get(&values, "room_h", d.room.height)?,
        };
        let camera = Vec3::new(
            get(&values, "cam_x", room.width / 2.0)?,
            get(&values, "cam_y", room.depth / 2.0)?,
            get(&values, "cam_z", room.height / 2.0)?,
        );
        let angles = OrientationAngles {
            pitch: get(&values, "pitch", 0.0)?,
            roll: get(&values, "roll", 0.0)?,
        };
        let yaw = get(&values, "yaw", 0.0)?;
        let fov: f64 = get(&values, "fov_v", d.intrinsics.vertical_fov)?;
        let width: u32 = get(&values, "width", d.intrinsics.width)?;
        let height: u32 = get(&values, "height", d.intrinsics.height)?;
        let intrinsics = CameraIntrinsics::new(width, height, fov).map_err(|e| key_error("fov_v", e.to_string()))?;
        let seed = get(&values, "seed", 0u64)?;
        let scene = Scene { room, camera, angles, yaw, intrinsics, seed };
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_config(&self) -> String {
        format!(
            "room_w = {}\nroom_d = {}\nroom_h = {}\ncam_x = {}\ncam_y = {}\ncam_z = {}\npitch = {}\nroll = {}\nyaw = {}\nfov_v = {}\nwidth = {}\nheight = {}\nseed = {}\n",
            self.room.width,
            self.room.depth,
            self.room.height,
            self.camera.x,
            self.camera.y,
            self.camera.z,
            self.angles.pitch,
            self.angles.roll,
            self.yaw,
            self.intrinsics.vertical_fov,
            self.intrinsics.width,
            self.intrinsics.height,
            self.seed
        )
    }

    /// Camera-to-upright rotation.
    pub fn rotation(&self) -> Rotation {
        Rotation::from_angles(self.angles, self.yaw)
    }

    /// Random pose inside `base.room` with `|pitch| ≤ max_pitch`,
    /// `|roll| ≤ max_roll`, any yaw, and a vertical FoV in [35°, 45°].
    pub fn random<R: Rng>(rng: &mut R, base: &Scene, max_pitch: f64, max_roll: f64) -> Scene {
        let e = base.room.extent();
        let margin = 0.25;
        let camera = Vec3::new(
            rng.random_range(margin..e.x - margin),
            rng.random_range(margin..e.y - margin),
            rng.random_range(margin..e.z - margin),
        );
        let angles = OrientationAngles {
            pitch: rng.random_range(-max_pitch..=max_pitch),
            roll: rng.random_range(-max_roll..=max_roll),
        };
        let yaw = rng.random_range(-180.0..180.0);
        let fov = rng.random_range(35.0..=45.0);
        let intrinsics = CameraIntrinsics::new(base.intrinsics.width, base.intrinsics.height, fov)
            .expect("fov within range");
        Scene { room: base.room, camera, angles, yaw, intrinsics, seed: rng.random() }
    }
}

/// A rendered frame map with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub map: FrameMap,
    pub up: Vec3,
    pub rotation: Rotation,
    /// Upright-frame normals, one per pixel.
    pub global_normals: Vec<Vec3>,
}

/// Raycasts every pixel center into the room.
///
/// The upright frame at a hit uses the exact inward axis normal and the
/// camera right axis expressed in upright coordinates, so floors, walls and
/// ceilings have `n_z` of exactly 1, 0 and −1. The camera frame is `Rᵀ` times
/// the upright frame.
pub fn render(scene: &Scene) -> Result<Rendered, SynthError> {
    scene.validate()?;
    let rot = scene.rotation();
    let r = *rot.matrix();
    let right: Vec3 = r.column(1).into_owned();
    let k = scene.intrinsics;
    let (w, h) = (k.width as usize, k.height as usize);
    let extent = scene.room.extent();
    type Pixel = (Mat3, Vec3, Vec3);
    let rows: Vec<Result<Vec<Pixel>, GeometryError>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let dir = r * k.ray(col as f64 + 0.5, row as f64 + 0.5);
                    let n_g = hit_normal(&scene.camera, &dir, &extent);
                    let fg = build_frame_with_axis(&n_g, &right, &Vec3::z(), CoordinateSystem::Global)?;
                    let fg = fg.matrix();
                    let fc = r.transpose() * fg;
                    let layout = Vec3::new(fg[(2, 0)], fg[(2, 1)], fg[(2, 2)]);
                    Ok((fc, layout, n_g))
                })
                .collect()
        })
        .collect();
    let mut frames = Vec::with_capacity(w * h);
    let mut layout = Vec::with_capacity(w * h);
    let mut normals = Vec::with_capacity(w * h);
    for row in rows {
        for (f, l, n) in row? {
            frames.push(f);
            layout.push(l);
            normals.push(n);
        }
    }
    let map = FrameMap::uniform(w, h, frames, layout)?;
    Ok(Rendered { map, up: up_from_rotation(&rot).into_inner(), rotation: rot, global_normals: normals })
}

/// Inward normal of the first wall hit from inside the box.
fn hit_normal(origin: &Vec3, dir: &Vec3, extent: &Vec3) -> Vec3 {
    let mut best_t = f64::INFINITY;
    let mut normal = Vec3::z();
    for a in 0..3 {
        let (t, n) = if dir[a] > 0.0 {
            ((extent[a] - origin[a]) / dir[a], -1.0)
        } else if dir[a] < 0.0 {
            (-origin[a] / dir[a], 1.0)
        } else {
            continue;
        };
        if t < best_t {
            best_t = t;
            normal = Vec3::zeros();
            normal[a] = n;
        }
    }
    normal
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierMode {
    /// Uniformly random rotation as the camera frame.
    RandomFrame,
    /// `[n t b] → [−n t −b]`.
    FlippedNormal,
}

impl FromStr for OutlierMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random_frame" => Ok(OutlierMode::RandomFrame),
            "flipped_normal" => Ok(OutlierMode::FlippedNormal),
            other => Err(format!("unknown outlier mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    /// Degrees.
    pub normal_noise_sigma: f64,
    pub outlier_fraction: f64,
    pub outlier_mode: OutlierMode,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        CorruptionSpec { normal_noise_sigma: 0.0, outlier_fraction: 0.0, outlier_mode: OutlierMode::RandomFrame, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.normal_noise_sigma >= 0.0 && self.normal_noise_sigma.is_finite()) {
            return Err(SynthError::InvalidCorruption(format!("sigma {}", self.normal_noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(SynthError::InvalidCorruption(format!("outlier fraction {}", self.outlier_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub map: FrameMap,
    /// 0 on outliers, 1 elsewhere, replicated over the three columns.
    pub oracle_weights: Vec<Vec3>,
    pub outliers: Vec<usize>,
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Uniformly distributed rotation matrix.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Mat3 {
    loop {
        let q = nalgebra::Quaternion::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if q.norm() > 1e-12 {
            return *nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix();
        }
    }
}

/// Perturbs normals and injects outliers. Layout vectors and weights are left
/// untouched; the oracle weights are returned separately.
pub fn corrupt(map: &FrameMap, spec: &CorruptionSpec) -> Result<Corrupted, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = map.clone();
    let sigma = spec.normal_noise_sigma.to_radians();
    if sigma > 0.0 {
        for f in out.frames_mut().iter_mut() {
            let axis = random_unit(&mut rng);
            let z: f64 = rng.sample(StandardNormal);
            let angle = (z * sigma).abs();
            let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), angle);
            let n: Vec3 = rot * f.column(0).into_owned();
            let t0: Vec3 = f.column(1).into_owned();
            let t = (t0 - n * n.dot(&t0)).normalize();
            let b = n.cross(&t);
            *f = Mat3::from_columns(&[n, t, b]);
        }
    }

    let valid: Vec<usize> = (0..map.len()).filter(|&i| map.mask()[i]).collect();
    let count = ((spec.outlier_fraction * valid.len() as f64).round() as usize).min(valid.len());
    let mut outliers: Vec<usize> =
        rand::seq::index::sample(&mut rng, valid.len(), count).into_iter().map(|k| valid[k]).collect();
    outliers.sort_unstable();
    for &i in &outliers {
        let f = &mut out.frames_mut()[i];
        *f = match spec.outlier_mode {
            OutlierMode::RandomFrame => random_rotation(&mut rng),
            OutlierMode::FlippedNormal => {
                let mut g = *f;
                g.set_column(0, &(-f.column(0)));
                g.set_column(2, &(-f.column(2)));
                g
            }
        };
    }
    let mut oracle_weights = vec![Vec3::repeat(1.0); map.len()];
    for &i in &outliers {
        oracle_weights[i] = Vec3::zeros();
    }
    Ok(Corrupted { map: out, oracle_weights, outliers })
}

/// Per-pixel `exp(−10·|uᵀf^c − f_z|)` for the `n`, `t` and `b` columns.
pub fn alignment_scores(map: &FrameMap, u: &Vec3) -> Vec<Vec3> {
    map.frames()
        .iter()
        .zip(map.layout())
        .map(|(f, l)| {
            let proj = f.transpose() * u;
            (proj - l).map(|d| (-10.0 * d.abs()).exp())
        })
        .collect()
}
