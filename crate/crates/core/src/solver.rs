//! Unit-norm constrained weighted least squares for the up vector.
//!
//! Minimises `Σ_i ‖W(i) (F^c(i)ᵀ u − f_z^g(i))‖²` subject to `‖u‖ = 1`.
//! With `H = Σ F W² Fᵀ` and `g = Σ F W² f`, the stationarity conditions are
//! `(H − λI) u = g`, `uᵀu = 1`. Eliminating `u` gives the quadratic
//! eigenvalue problem `det(λ²I − 2Hλ + H² − ggᵀ) = 0`, linearised as the
//! 6×6 block matrix `[[H, −I], [−ggᵀ, H]]`. Its smallest real eigenvalue is
//! the multiplier of the global minimiser.

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::eigen::{eigenvalues6, is_real, Mat6};
use crate::geometry::{LayoutVector, SurfaceFrame};
use crate::{Mat3, Vec3};

/// `‖g‖ < NEAR_HOMOGENEOUS · trace(H)` selects the homogeneous fallback.
pub const NEAR_HOMOGENEOUS: f64 = 1e-9;
/// Condition number of `H − λI` above which the pseudo-inverse is used.
pub const MAX_CONDITION: f64 = 1e12;
/// Imaginary-part tolerance for accepting an eigenvalue as real.
pub const REAL_TOL: f64 = 1e-8;
/// Minimum separation of the selected eigenvalue for gradients to exist.
pub const MIN_EIGEN_GAP: f64 = 1e-8;

const TILE_ROWS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("frame map has no valid pixels")]
    EmptyMap,
    #[error("all weights are zero")]
    AllZeroWeights,
    #[error("frame map shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid weight at pixel {index}: {value}")]
    InvalidWeight { index: usize, value: f64 },
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("eigenvalue iteration did not converge")]
    EigenFailure,
    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),
}

/// Per-pixel camera frames, layout vectors, per-column weights and validity.
///
/// Frames are stored as raw 3×3 matrices with columns `[n t b]`; the solver
/// does not require them to be orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMap {
    width: usize,
    height: usize,
    frames: Vec<Mat3>,
    layout: Vec<Vec3>,
    weights: Vec<Vec3>,
    mask: Vec<bool>,
}

impl FrameMap {
    pub fn new(
        width: usize,
        height: usize,
        frames: Vec<Mat3>,
        layout: Vec<Vec3>,
        weights: Vec<Vec3>,
        mask: Vec<bool>,
    ) -> Result<Self, SolveError> {
        let n = width * height;
        for (name, len) in [
            ("frames", frames.len()),
            ("layout", layout.len()),
            ("weights", weights.len()),
            ("mask", mask.len()),
        ] {
            if len != n {
                return Err(SolveError::ShapeMismatch(format!(
                    "{name} has {len} entries, expected {width}x{height}={n}"
                )));
            }
        }
        for (index, w) in weights.iter().enumerate() {
            if let Some(&value) = w.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(SolveError::InvalidWeight { index, value });
            }
        }
        Ok(FrameMap { width, height, frames, layout, weights, mask })
    }

    /// Unit weights, every pixel valid.
    pub fn uniform(
        width: usize,
        height: usize,
        frames: Vec<Mat3>,
        layout: Vec<Vec3>,
    ) -> Result<Self, SolveError> {
        let n = width * height;
        Self::new(width, height, frames, layout, vec![Vec3::repeat(1.0); n], vec![true; n])
    }

    pub fn from_frames(
        width: usize,
        height: usize,
        frames: &[SurfaceFrame],
        layout: &[LayoutVector],
    ) -> Result<Self, SolveError> {
        Self::uniform(
            width,
            height,
            frames.iter().map(SurfaceFrame::matrix).collect(),
            layout.iter().map(|l| l.0).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
    pub fn frames(&self) -> &[Mat3] {
        &self.frames
    }
    pub fn layout(&self) -> &[Vec3] {
        &self.layout
    }
    pub fn weights(&self) -> &[Vec3] {
        &self.weights
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn with_weights(mut self, weights: Vec<Vec3>) -> Result<Self, SolveError> {
        let mask = std::mem::take(&mut self.mask);
        Self::new(self.width, self.height, self.frames, self.layout, weights, mask)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self, SolveError> {
        let weights = std::mem::take(&mut self.weights);
        Self::new(self.width, self.height, self.frames, self.layout, weights, mask)
    }

    pub fn with_unit_weights(self) -> Self {
        let n = self.len();
        self.with_weights(vec![Vec3::repeat(1.0); n]).expect("unit weights are valid")
    }

    /// Mutable access for corruption and finite-difference tests.
    pub fn frames_mut(&mut self) -> &mut [Mat3] {
        &mut self.frames
    }
    pub fn layout_mut(&mut self) -> &mut [Vec3] {
        &mut self.layout
    }

    pub fn set_weight(&mut self, index: usize, w: Vec3) -> Result<(), SolveError> {
        if let Some(&value) = w.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(SolveError::InvalidWeight { index, value });
        }
        self.weights[index] = w;
        Ok(())
    }

    /// Each weight channel divided by its mean over valid pixels.
    pub fn normalized_weights(&self) -> Result<Self, SolveError> {
        let mut out = self.weights.clone();
        for ch in 0..3 {
            let raw: Vec<f64> = self
                .weights
                .iter()
                .zip(&self.mask)
                .filter(|(_, m)| **m)
                .map(|(w, _)| w[ch])
                .collect();
            let mean = channel_mean(&raw)?;
            for w in out.iter_mut() {
                w[ch] /= mean;
            }
        }
        self.clone().with_weights(out)
    }
}

fn channel_mean(raw: &[f64]) -> Result<f64, SolveError> {
    if raw.is_empty() {
        return Err(SolveError::EmptyMap);
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if !(mean >= 1e-12) {
        return Err(SolveError::AllZeroWeights);
    }
    Ok(mean)
}

/// Divides by the mean. Inputs must lie in `[0, 1]`.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>, SolveError> {
    for (index, &value) in raw.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(SolveError::InvalidWeight { index, value });
        }
    }
    let mean = channel_mean(raw)?;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// Accumulated normal equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveSystem {
    pub h: Mat3,
    pub g: Vec3,
    /// `‖Wb‖²`, the constant term of the objective.
    pub b_norm_sq: f64,
    pub n_valid: usize,
}

impl SolveSystem {
    /// A bare system, e.g. for testing the solver on synthetic `(H, g)`.
    pub fn new(h: Mat3, g: Vec3) -> Self {
        SolveSystem { h, g, b_norm_sq: 0.0, n_valid: 0 }
    }

    pub fn gnorm(&self) -> f64 {
        self.g.norm()
    }

    /// `uᵀHu − 2gᵀu + ‖Wb‖²`.
    pub fn objective(&self, u: &Vec3) -> f64 {
        u.dot(&(self.h * u)) - 2.0 * self.g.dot(u) + self.b_norm_sq
    }

    fn zero() -> Self {
        SolveSystem { h: Mat3::zeros(), g: Vec3::zeros(), b_norm_sq: 0.0, n_valid: 0 }
    }

    fn merge(a: Self, b: Self) -> Self {
        SolveSystem {
            h: a.h + b.h,
            g: a.g + b.g,
            b_norm_sq: a.b_norm_sq + b.b_norm_sq,
            n_valid: a.n_valid + b.n_valid,
        }
    }

    fn add_pixel(&mut self, frame: &Mat3, layout: &Vec3, w: &Vec3) {
        for m in 0..3 {
            let w2 = w[m] * w[m];
            if w2 == 0.0 {
                continue;
            }
            let col = frame.column(m);
            self.h += w2 * col * col.transpose();
            self.g += (w2 * layout[m]) * col;
            self.b_norm_sq += w2 * layout[m] * layout[m];
        }
        self.n_valid += 1;
    }
}

pub fn accumulate(map: &FrameMap) -> Result<SolveSystem, SolveError> {
    accumulate_strided(map, 1)
}

/// Uses pixels whose row and column are both multiples of `stride`.
///
/// Rows are summed in fixed tiles that are then reduced pairwise, so the
/// result is bit-identical to [`accumulate_par`].
pub fn accumulate_strided(map: &FrameMap, stride: usize) -> Result<SolveSystem, SolveError> {
    let tiles = tile_starts(map, stride)?;
    let partials: Vec<SolveSystem> = tiles.iter().map(|&r| accumulate_tile(map, r, stride)).collect();
    finish(pairwise(partials))
}

/// Tile-parallel [`accumulate_strided`] with the same reduction tree.
pub fn accumulate_par(map: &FrameMap, stride: usize) -> Result<SolveSystem, SolveError> {
    let tiles = tile_starts(map, stride)?;
    let partials: Vec<SolveSystem> =
        tiles.par_iter().map(|&r| accumulate_tile(map, r, stride)).collect();
    finish(pairwise(partials))
}

fn tile_starts(map: &FrameMap, stride: usize) -> Result<Vec<usize>, SolveError> {
    if stride == 0 {
        return Err(SolveError::InvalidStride);
    }
    Ok((0..map.height).step_by(TILE_ROWS).collect())
}

fn accumulate_tile(map: &FrameMap, row0: usize, stride: usize) -> SolveSystem {
    let mut acc = SolveSystem::zero();
    for row in row0..(row0 + TILE_ROWS).min(map.height) {
        if row % stride != 0 {
            continue;
        }
        for col in (0..map.width).step_by(stride) {
            let i = row * map.width + col;
            if map.mask[i] {
                acc.add_pixel(&map.frames[i], &map.layout[i], &map.weights[i]);
            }
        }
    }
    acc
}

fn pairwise(mut level: Vec<SolveSystem>) -> SolveSystem {
    if level.is_empty() {
        return SolveSystem::zero();
    }
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|c| if c.len() == 2 { SolveSystem::merge(c[0], c[1]) } else { c[0] })
            .collect();
    }
    level[0]
}

fn finish(sys: SolveSystem) -> Result<SolveSystem, SolveError> {
    if sys.n_valid == 0 {
        return Err(SolveError::EmptyMap);
    }
    Ok(sys)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionFlag {
    Ok,
    NearHomogeneous,
    IllConditioned,
}

impl std::fmt::Display for ConditionFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConditionFlag::Ok => "ok",
            ConditionFlag::NearHomogeneous => "near_homogeneous",
            ConditionFlag::IllConditioned => "ill_conditioned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveResult {
    pub u: Vec3,
    pub lambda: f64,
    /// Weighted objective at `u`.
    pub residual: f64,
    /// `‖(H − λI)u − g‖`.
    pub kkt_residual: f64,
    pub condition_flag: ConditionFlag,
    /// Distance from `λ` to the nearest other real eigenvalue of the block
    /// matrix (infinite if there is none).
    pub eigen_gap: f64,
}

fn symmetrize(h: &Mat3) -> Mat3 {
    (h + h.transpose()) * 0.5
}

/// Solves the constrained problem for an accumulated system.
///
/// `H` is symmetrized before use.
pub fn solve(sys: &SolveSystem) -> Result<SolveResult, SolveError> {
    let h = symmetrize(&sys.h);
    let g = sys.g;
    let trace = h.trace();
    if !(trace > 0.0) {
        return Err(SolveError::AllZeroWeights);
    }
    let (evals, evecs) = sorted_eigen(&h);
    let gnorm = g.norm();

    if gnorm < NEAR_HOMOGENEOUS * trace {
        let mut u: Vec3 = evecs.column(0).into_owned().normalize();
        if u.z < 0.0 {
            u = -u;
        }
        let lambda = evals[0];
        return Ok(finalize(sys, &h, u, lambda, ConditionFlag::NearHomogeneous, 0.0));
    }

    // Eigenvalues are computed for (H, g)/s and scaled back.
    let scale = trace.max(gnorm);
    let block = block_matrix(&(h / scale), &(g / scale));
    let spectrum = eigenvalues6(&block).ok_or(SolveError::EigenFailure)?.map(|z| z * scale);
    let mut reals: Vec<f64> =
        spectrum.iter().filter(|z| is_real(z, REAL_TOL)).map(|z| z.re).collect();
    reals.sort_by(f64::total_cmp);

    let h_min = evals[0];
    // The minimiser's multiplier never exceeds λ_min(H). A clustered
    // eigenvalue can be perturbed off the real axis; fall back to the
    // smallest real part in that case.
    let (lambda0, eigen_gap) = match reals.first() {
        Some(&r) if r <= h_min + 1e-8 * scale => {
            let gap = reals[1..].iter().map(|o| (o - r).abs()).fold(f64::INFINITY, f64::min);
            (r, gap)
        }
        _ => (spectrum.iter().map(|z| z.re).fold(f64::INFINITY, f64::min), 0.0),
    };

    let c = evecs.transpose() * g;
    let lambda = refine_multiplier(&evals, &c, lambda0, gnorm, scale);

    let d = evals.map(|e| e - lambda);
    let dmax = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let dmin = d.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let ill = !(dmin > 0.0) || dmax / dmin > MAX_CONDITION;

    let (u, flag) = if ill {
        (pseudo_inverse_solution(&evals, &evecs, &c, lambda, dmax), ConditionFlag::IllConditioned)
    } else {
        let a = h - Mat3::identity() * lambda;
        let x = a.lu().solve(&g).ok_or(SolveError::EigenFailure)?;
        (x.normalize(), ConditionFlag::Ok)
    };
    Ok(finalize(sys, &h, u, lambda, flag, eigen_gap))
}

/// `solve(accumulate(map))`.
pub fn solve_weighted(map: &FrameMap) -> Result<SolveResult, SolveError> {
    solve(&accumulate(map)?)
}

/// Ignores the per-pixel weights (all treated as 1).
pub fn solve_unweighted(map: &FrameMap) -> Result<SolveResult, SolveError> {
    solve_weighted(&map.clone().with_unit_weights())
}

fn finalize(
    sys: &SolveSystem,
    h: &Mat3,
    u: Vec3,
    lambda: f64,
    condition_flag: ConditionFlag,
    eigen_gap: f64,
) -> SolveResult {
    let kkt = (h * u - u * lambda - sys.g).norm();
    SolveResult {
        u,
        lambda,
        residual: sys.objective(&u),
        kkt_residual: kkt,
        condition_flag,
        eigen_gap,
    }
}

pub(crate) fn block_matrix(h: &Mat3, g: &Vec3) -> Mat6 {
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(h);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Mat3::identity()));
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(g * g.transpose())));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(h);
    m
}

/// Ascending eigenvalues and matching eigenvector columns.
fn sorted_eigen(h: &Mat3) -> (Vec3, Mat3) {
    let se = SymmetricEigen::new(*h);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
    let evals = Vec3::new(se.eigenvalues[idx[0]], se.eigenvalues[idx[1]], se.eigenvalues[idx[2]]);
    let evecs = Mat3::from_columns(&[
        se.eigenvectors.column(idx[0]).into_owned(),
        se.eigenvectors.column(idx[1]).into_owned(),
        se.eigenvectors.column(idx[2]).into_owned(),
    ]);
    (evals, evecs)
}

/// Newton iterations on `1/‖(H − λI)⁻¹g‖ − 1 = 0` over `[λ_min − ‖g‖, λ_min)`,
/// started from the block-matrix eigenvalue. Bisection guards each step.
fn refine_multiplier(evals: &Vec3, c: &Vec3, lambda0: f64, gnorm: f64, scale: f64) -> f64 {
    let h_min = evals[0];
    let mut lo = h_min - gnorm;
    let mut hi = h_min;
    let phi = |lambda: f64| -> Option<(f64, f64)> {
        let mut s2 = 0.0;
        let mut s3 = 0.0;
        for i in 0..3 {
            let d = evals[i] - lambda;
            if d <= 0.0 {
                return None;
            }
            s2 += c[i] * c[i] / (d * d);
            s3 += c[i] * c[i] / (d * d * d);
        }
        let nx = s2.sqrt();
        if nx == 0.0 {
            return None;
        }
        Some((1.0 / nx - 1.0, -s3 / (nx * nx * nx)))
    };
    let mut lambda = if lambda0 > lo && lambda0 < hi { lambda0 } else { 0.5 * (lo + hi) };
    let tol = 4.0 * f64::EPSILON * scale;
    for _ in 0..200 {
        let Some((f, df)) = phi(lambda) else {
            // On or past λ_min: treat as the right end of the bracket.
            hi = lambda.min(hi);
            lambda = 0.5 * (lo + hi);
            continue;
        };
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        let newton = lambda - f / df;
        let next = if df < 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        let step = (next - lambda).abs();
        lambda = next;
        if step <= tol || hi - lo <= tol {
            break;
        }
    }
    lambda
}

/// Least-norm solution of `(H − λI)x = g`, completed along the most singular
/// direction to unit length when it falls short.
fn pseudo_inverse_solution(evals: &Vec3, evecs: &Mat3, c: &Vec3, lambda: f64, dmax: f64) -> Vec3 {
    let cutoff = 1e-12 * dmax.max(f64::MIN_POSITIVE);
    let mut x = Vec3::zeros();
    let mut null_dir = 0;
    let mut smallest = f64::INFINITY;
    for i in 0..3 {
        let d = evals[i] - lambda;
        if d.abs() < smallest {
            smallest = d.abs();
            null_dir = i;
        }
        if d.abs() > cutoff {
            x[i] = c[i] / d;
        }
    }
    let mut u = evecs * x;
    let n2 = u.norm_squared();
    if n2 < 1.0 {
        let mut v: Vec3 = evecs.column(null_dir).into_owned();
        if v.z < 0.0 {
            v = -v;
        }
        u += v * (1.0 - n2).sqrt();
    }
    u.normalize()
}

/// Jacobians of `u` and `λ` with respect to the system entries.
///
/// `H` entries are treated as independent inputs passed through the
/// symmetrization inside [`solve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveGradients {
    pub u: Vec3,
    /// `du_dh[i][(j, k)] = ∂u_i/∂H_jk`.
    pub du_dh: [Mat3; 3],
    /// `du_dg[(i, j)] = ∂u_i/∂g_j`.
    pub du_dg: Mat3,
    pub dlambda_dh: Mat3,
    pub dlambda_dg: Vec3,
}

/// Gradients of `u` with respect to one pixel's inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelGradients {
    /// `du_dframe[i][(a, m)] = ∂u_i/∂F_am`.
    pub du_dframe: [Mat3; 3],
    /// `(i, m)` entry is `∂u_i/∂f_m`.
    pub du_dlayout: Mat3,
    /// `(i, m)` entry is `∂u_i/∂w_m`.
    pub du_dweights: Mat3,
}

/// Implicit differentiation of `(H − λI)u = g`, `uᵀu = 1`.
pub fn solve_gradients(sys: &SolveSystem, result: &SolveResult) -> Result<SolveGradients, SolveError> {
    if result.condition_flag != ConditionFlag::Ok {
        return Err(SolveError::GradientUnavailable(format!(
            "condition flag is {}",
            result.condition_flag
        )));
    }
    if result.eigen_gap <= MIN_EIGEN_GAP * result.lambda.abs().max(1.0) {
        return Err(SolveError::GradientUnavailable(format!(
            "selected eigenvalue is within {:.3e} of another",
            result.eigen_gap
        )));
    }
    let h = symmetrize(&sys.h);
    let u = result.u;
    let lambda = result.lambda;
    let a = h - Mat3::identity() * lambda;
    let mut j = Matrix4::<f64>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
    j.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-u));
    j.fixed_view_mut::<1, 3>(3, 0).copy_from(&(2.0 * u.transpose()));
    let jinv = j
        .try_inverse()
        .ok_or_else(|| SolveError::GradientUnavailable("singular KKT Jacobian".into()))?;
    let p: Mat3 = jinv.fixed_view::<3, 3>(0, 0).into_owned();
    let q: Vec3 = jinv.fixed_view::<1, 3>(3, 0).transpose();

    let mut du_dh = [Mat3::zeros(); 3];
    for (i, d) in du_dh.iter_mut().enumerate() {
        let pi: Vec3 = p.row(i).transpose();
        *d = -0.5 * (pi * u.transpose() + u * pi.transpose());
    }
    let dlambda_dh = -0.5 * (q * u.transpose() + u * q.transpose());
    Ok(SolveGradients { u, du_dh, du_dg: p, dlambda_dh, dlambda_dg: q })
}

/// Convenience wrapper that accumulates, solves and differentiates.
pub fn solve_with_gradients(
    map: &FrameMap,
) -> Result<(SolveSystem, SolveResult, SolveGradients), SolveError> {
    let sys = accumulate(map)?;
    let res = solve(&sys)?;
    let grads = solve_gradients(&sys, &res)?;
    Ok((sys, res, grads))
}

impl SolveGradients {
    /// Directional derivative of `u` for perturbations `(dH, dg)`.
    pub fn directional(&self, dh: &Mat3, dg: &Vec3) -> Vec3 {
        let mut out = self.du_dg * dg;
        for i in 0..3 {
            out[i] += self.du_dh[i].component_mul(dh).sum();
        }
        out
    }

    /// Chains through `H = Σ F W² Fᵀ`, `g = Σ F W² f` for pixel `index`.
    /// Masked-out pixels have zero gradient.
    pub fn pixel(&self, map: &FrameMap, index: usize) -> PixelGradients {
        let mut out = PixelGradients {
            du_dframe: [Mat3::zeros(); 3],
            du_dlayout: Mat3::zeros(),
            du_dweights: Mat3::zeros(),
        };
        if !map.mask[index] {
            return out;
        }
        let frame = &map.frames[index];
        let f = &map.layout[index];
        let w = &map.weights[index];
        for i in 0..3 {
            // ∂u_i/∂H is symmetric, so dH = w²(dF Fᵀ + F dFᵀ) contributes 2w² D F.
            let d = &self.du_dh[i];
            let pi: Vec3 = self.du_dg.row(i).transpose();
            for m in 0..3 {
                let w2 = w[m] * w[m];
                let col: Vec3 = frame.column(m).into_owned();
                let dcol = 2.0 * w2 * (d * col) + pi * (w2 * f[m]);
                out.du_dframe[i].set_column(m, &dcol);
                out.du_dlayout[(i, m)] = w2 * pi.dot(&col);
                out.du_dweights[(i, m)] = 2.0 * w[m] * (col.dot(&(d * col)) + pi.dot(&col) * f[m]);
            }
        }
        out
    }
}

/// `(H − λI)u − g` stacked with `uᵀu − 1`.
pub fn kkt_vector(sys: &SolveSystem, res: &SolveResult) -> Vector4<f64> {
    let h = symmetrize(&sys.h);
    let r = h * res.u - res.u * res.lambda - sys.g;
    Vector4::new(r.x, r.y, r.z, res.u.norm_squared() - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single_pixel(frame: Mat3, layout: Vec3) -> FrameMap {
        FrameMap::uniform(1, 1, vec![frame], vec![layout]).unwrap()
    }

    #[test]
    fn accumulate_single_identity_pixel() {
        let sys = accumulate(&single_pixel(Mat3::identity(), Vec3::z())).unwrap();
        assert_eq!(sys.h, Mat3::identity());
        assert_eq!(sys.g, Vec3::z());
        assert_eq!(sys.n_valid, 1);
    }

    #[test]
    fn accumulate_doubles_for_repeated_pixel() {
        let r = *crate::geometry::Rotation::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7).matrix();
        let f = Vec3::new(0.2, -0.3, 0.5).normalize();
        let one = accumulate(&single_pixel(r, f)).unwrap();
        let two = accumulate(&FrameMap::uniform(2, 1, vec![r, r], vec![f, f]).unwrap()).unwrap();
        assert_abs_diff_eq!(two.h, one.h * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(two.g, one.g * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn masked_pixels_are_ignored() {
        let map = FrameMap::uniform(2, 1, vec![Mat3::identity(), Mat3::identity() * 3.0], vec![Vec3::z(); 2])
            .unwrap()
            .with_mask(vec![true, false])
            .unwrap();
        let sys = accumulate(&map).unwrap();
        assert_eq!(sys.h, Mat3::identity());
        assert_eq!(sys.n_valid, 1);

        let empty = map.with_mask(vec![false, false]).unwrap();
        assert_eq!(accumulate(&empty), Err(SolveError::EmptyMap));
    }

    #[test]
    fn stride_selects_grid_pixels() {
        let frames: Vec<Mat3> = (0..12).map(|i| Mat3::identity() * (i as f64 + 1.0)).collect();
        let map = FrameMap::uniform(4, 3, frames, vec![Vec3::zeros(); 12]).unwrap();
        let sys = accumulate_strided(&map, 2).unwrap();
        // Pixels (0,0), (0,2), (2,0), (2,2) -> scales 1, 3, 9, 11.
        let expected: f64 = [1.0f64, 3.0, 9.0, 11.0].iter().map(|s| s * s).sum();
        assert_eq!(sys.n_valid, 4);
        assert_abs_diff_eq!(sys.h[(0, 0)], expected, epsilon = 1e-12);
        assert_eq!(accumulate_strided(&map, 0), Err(SolveError::InvalidStride));
    }

    #[test]
    fn invalid_weights_rejected() {
        let e = FrameMap::new(1, 1, vec![Mat3::identity()], vec![Vec3::z()], vec![Vec3::new(1.0, -0.1, 1.0)], vec![true]);
        assert!(matches!(e, Err(SolveError::InvalidWeight { index: 0, .. })));
        let e = FrameMap::new(2, 1, vec![Mat3::identity()], vec![Vec3::z()], vec![Vec3::zeros()], vec![true]);
        assert!(matches!(e, Err(SolveError::ShapeMismatch(_))));
    }

    #[test]
    fn solve_identity_examples() {
        let r = solve(&SolveSystem::new(Mat3::identity(), Vec3::z())).unwrap();
        assert_abs_diff_eq!(r.u, Vec3::z(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.lambda, 0.0, epsilon = 1e-12);
        assert_eq!(r.condition_flag, ConditionFlag::Ok);

        let r = solve(&SolveSystem::new(Mat3::identity(), Vec3::new(0.0, 0.0, 2.0))).unwrap();
        assert_abs_diff_eq!(r.u, Vec3::z(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.lambda, -1.0, epsilon = 1e-12);
        assert!(r.kkt_residual < 1e-12);
    }

    #[test]
    fn homogeneous_system_uses_smallest_eigenvector() {
        let h = Mat3::from_diagonal(&Vec3::new(3.0, 2.0, 0.5));
        let r = solve(&SolveSystem::new(h, Vec3::zeros())).unwrap();
        assert_eq!(r.condition_flag, ConditionFlag::NearHomogeneous);
        assert_abs_diff_eq!(r.u, Vec3::z(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.lambda, 0.5, epsilon = 1e-12);

        // Sign points along camera z.
        let h = Mat3::from_diagonal(&Vec3::new(3.0, 0.1, 2.0));
        let q = *crate::geometry::Rotation::from_axis_angle(&Vec3::x(), 0.4).matrix();
        let r = solve(&SolveSystem::new(q * h * q.transpose(), Vec3::zeros())).unwrap();
        assert!(r.u.z >= 0.0);
        assert_abs_diff_eq!(r.u.dot(&(q * Vec3::y())).abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_system_is_an_error() {
        assert_eq!(solve(&SolveSystem::new(Mat3::zeros(), Vec3::zeros())), Err(SolveError::AllZeroWeights));
    }

    #[test]
    fn rank_one_system_flags_ill_conditioned() {
        // Only normal weights on floor pixels: H = N zzᵀ, g = N z.
        let h = Mat3::from_diagonal(&Vec3::new(0.0, 0.0, 5.0));
        let r = solve(&SolveSystem::new(h, Vec3::new(0.0, 0.0, 5.0))).unwrap();
        assert_eq!(r.condition_flag, ConditionFlag::IllConditioned);
        assert_abs_diff_eq!(r.u, Vec3::z(), epsilon = 1e-9);
    }

    #[test]
    fn hard_case_completes_to_unit_norm() {
        // g has no component on the smallest eigenvector.
        let h = Mat3::from_diagonal(&Vec3::new(1.0, 2.0, 3.0));
        let g = Vec3::new(0.0, 0.5, 0.0);
        let r = solve(&SolveSystem::new(h, g)).unwrap();
        assert_abs_diff_eq!(r.u.norm(), 1.0, epsilon = 1e-12);
        // Minimiser: λ = 1, u_y = 0.5, u_x = ±sqrt(0.75).
        assert_abs_diff_eq!(r.u.y, 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(r.u.x.abs(), 0.75f64.sqrt(), epsilon = 1e-6);
        assert_ne!(r.condition_flag, ConditionFlag::Ok);
    }

    #[test]
    fn normalize_weights_examples() {
        assert_eq!(normalize_weights(&[0.5, 0.5, 0.5]).unwrap(), vec![1.0, 1.0, 1.0]);
        let w = normalize_weights(&[0.2, 0.6]).unwrap();
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.5, epsilon = 1e-15);
        assert_eq!(normalize_weights(&[0.0, 0.0]), Err(SolveError::AllZeroWeights));
        assert!(matches!(normalize_weights(&[1.5]), Err(SolveError::InvalidWeight { .. })));
    }

    #[test]
    fn gradient_of_target_rotation() {
        let sys = SolveSystem::new(Mat3::identity(), Vec3::z());
        let res = solve(&sys).unwrap();
        let grads = solve_gradients(&sys, &res).unwrap();
        assert_abs_diff_eq!(grads.du_dg[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grads.du_dg[(1, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grads.du_dg[(2, 2)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gradients_unavailable_when_flagged() {
        let sys = SolveSystem::new(Mat3::identity(), Vec3::zeros());
        let res = solve(&sys).unwrap();
        assert!(matches!(solve_gradients(&sys, &res), Err(SolveError::GradientUnavailable(_))));
    }
}
