//! Training objectives: orientation, surface-frame and multi-scale gradient
//! consistency losses.

use thiserror::Error;

use crate::{Mat3, Vec3};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_SCALES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("map of {width}x{height} is too small for a gradient (need at least 2x2)")]
    DegenerateScale { width: usize, height: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no pixels")]
    Empty,
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_frames: f64,
    pub alpha_grad: f64,
    pub epsilon: f64,
    pub scales: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_frames: 1.0, alpha_grad: 1.0, epsilon: DEFAULT_EPSILON, scales: DEFAULT_SCALES }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha_frames >= 0.0 && self.alpha_grad >= 0.0) {
            return Err(LossError::InvalidWeights("alphas must be nonnegative".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(LossError::InvalidWeights(format!("epsilon {} not in (0, 1e-3)", self.epsilon)));
        }
        if self.scales == 0 {
            return Err(LossError::InvalidWeights("scales must be at least 1".into()));
        }
        Ok(())
    }
}

/// Angular distance between unit vectors, switching to `1 − ûᵀu` once
/// `û·u > 1 − ε`. Returns the value and its gradient with respect to `û`.
///
/// The two branches disagree at the switch point by `arccos(1 − ε) − ε`,
/// which is below `2√(2ε)`. Near `û·u = −1` the arccos derivative is clamped
/// to the magnitude it has at the switch point so the gradient stays finite.
pub fn orientation_loss(u_hat: &Vec3, u_gt: &Vec3, epsilon: f64) -> (f64, Vec3) {
    let x = u_hat.dot(u_gt);
    if x > 1.0 - epsilon {
        return (1.0 - x, -u_gt);
    }
    let xc = x.clamp(-1.0, 1.0);
    let floor = 1.0 - (1.0 - epsilon) * (1.0 - epsilon);
    let denom = (1.0 - xc * xc).max(floor).sqrt();
    (xc.acos(), -u_gt / denom)
}

/// Cosine-similarity frame loss over `N` pixels, in `[0, 4]` for unit
/// inputs.
pub fn frames_loss(
    pred_frames: &[Mat3],
    pred_layout: &[Vec3],
    gt_frames: &[Mat3],
    gt_layout: &[Vec3],
) -> Result<f64, LossError> {
    let n = pred_frames.len();
    if n == 0 {
        return Err(LossError::Empty);
    }
    if gt_frames.len() != n || pred_layout.len() != n || gt_layout.len() != n {
        return Err(LossError::ShapeMismatch("frames_loss inputs differ in length".into()));
    }
    let cam: f64 = pred_frames.iter().zip(gt_frames).map(|(p, g)| p.component_mul(g).sum()).sum();
    let lay: f64 = pred_layout.iter().zip(gt_layout).map(|(p, g)| p.dot(g)).sum();
    let n = n as f64;
    Ok(2.0 - cam / (3.0 * n) - lay / n)
}

/// An `H × W` field of camera frames and layout vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryMaps {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Mat3>,
    pub layout: Vec<Vec3>,
}

impl GeometryMaps {
    pub fn new(width: usize, height: usize, frames: Vec<Mat3>, layout: Vec<Vec3>) -> Result<Self, LossError> {
        if frames.len() != width * height || layout.len() != width * height {
            return Err(LossError::ShapeMismatch(format!(
                "expected {} pixels, got {} frames and {} layout vectors",
                width * height,
                frames.len(),
                layout.len()
            )));
        }
        Ok(GeometryMaps { width, height, frames, layout })
    }

    /// Nearest-neighbour halving: keeps the top-left sample of each 2×2 block.
    pub fn downsample(&self) -> GeometryMaps {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut frames = Vec::with_capacity(w * h);
        let mut layout = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let i = (2 * r) * self.width + 2 * c;
                frames.push(self.frames[i]);
                layout.push(self.layout[i]);
            }
        }
        GeometryMaps { width: w, height: h, frames, layout }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientLoss {
    pub value: f64,
    /// Pyramid levels actually used; fewer than requested when a level would
    /// drop below 2×2.
    pub levels: usize,
}

/// ℓ1 distance between forward differences of prediction and ground truth,
/// summed over a nearest-neighbour pyramid.
///
/// At each level the camera-frame term is divided by `3·N_s` and the layout
/// term by `N_s`, where `N_s` is the level's pixel count. Differences that
/// would step off the image are dropped.
pub fn gradient_consistency_loss(
    pred: &GeometryMaps,
    gt: &GeometryMaps,
    scales: usize,
) -> Result<GradientLoss, LossError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(LossError::ShapeMismatch("prediction and ground truth sizes differ".into()));
    }
    if pred.width < 2 || pred.height < 2 {
        return Err(LossError::DegenerateScale { width: pred.width, height: pred.height });
    }
    let mut p = pred.clone();
    let mut g = gt.clone();
    let mut total = 0.0;
    let mut levels = 0;
    for s in 0..scales {
        if s > 0 {
            p = p.downsample();
            g = g.downsample();
            if p.width < 2 || p.height < 2 {
                break;
            }
        }
        total += level_loss(&p, &g);
        levels += 1;
    }
    Ok(GradientLoss { value: total, levels })
}

fn level_loss(p: &GeometryMaps, g: &GeometryMaps) -> f64 {
    let (w, h) = (p.width, p.height);
    let mut cam = 0.0;
    let mut lay = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut neighbours = [None, None];
            if c + 1 < w {
                neighbours[0] = Some(i + 1);
            }
            if r + 1 < h {
                neighbours[1] = Some(i + w);
            }
            for j in neighbours.into_iter().flatten() {
                let dp = p.frames[j] - p.frames[i];
                let dg = g.frames[j] - g.frames[i];
                cam += (dp - dg).abs().sum();
                let lp = p.layout[j] - p.layout[i];
                let lg = g.layout[j] - g.layout[i];
                lay += (lp - lg).abs().sum();
            }
        }
    }
    let n = (w * h) as f64;
    cam / (3.0 * n) + lay / n
}

/// Individual terms of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub orientation: f64,
    pub frames: f64,
    pub gradient: f64,
}

impl LossTerms {
    pub fn total(&self, weights: &LossWeights) -> f64 {
        self.orientation + weights.alpha_frames * self.frames + weights.alpha_grad * self.gradient
    }
}

/// `L_o + α_F L_F + α_∇ L_∇` evaluated on full maps.
pub fn total_loss(
    u_hat: &Vec3,
    u_gt: &Vec3,
    pred: &GeometryMaps,
    gt: &GeometryMaps,
    weights: &LossWeights,
) -> Result<(f64, LossTerms), LossError> {
    weights.validate()?;
    let terms = LossTerms {
        orientation: orientation_loss(u_hat, u_gt, weights.epsilon).0,
        frames: frames_loss(&pred.frames, &pred.layout, &gt.frames, &gt.layout)?,
        gradient: gradient_consistency_loss(pred, gt, weights.scales)?.value,
    };
    Ok((terms.total(weights), terms))
}
