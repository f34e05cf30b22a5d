//! Angular, pitch and roll error summaries.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::up_to_angles_lossy;
use crate::io::{GroundTruthRecord, ResultRecord};
use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("record ids do not match: {0}")]
    MismatchedIds(String),
    #[error("no records to evaluate")]
    Empty,
}

/// Errors for one prediction, in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairErrors {
    pub angular: f64,
    pub pitch: f64,
    pub roll: f64,
}

/// Angle between the two vectors, and absolute differences of their
/// pitch/roll decompositions (roll wrapped to `[0, 180]`).
pub fn pair_errors(pred: &Vec3, gt: &Vec3) -> PairErrors {
    let p = pred.normalize();
    let g = gt.normalize();
    let angular = p.dot(&g).clamp(-1.0, 1.0).acos().to_degrees();
    let ap = up_to_angles_lossy(&p);
    let ag = up_to_angles_lossy(&g);
    let mut roll = (ap.roll - ag.roll).abs() % 360.0;
    if roll > 180.0 {
        roll = 360.0 - roll;
    }
    PairErrors { angular, pitch: (ap.pitch - ag.pitch).abs(), roll }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat { mean: f64::NAN, median: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Stat { mean, median: median(values) }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub count: usize,
    pub angular: Stat,
    pub pitch: Stat,
    pub roll: Stat,
}

/// Pairs results with ground truth by id. Both sides must contain exactly the
/// same ids, each once.
pub fn evaluate(
    method: &str,
    results: &[ResultRecord],
    truth: &[GroundTruthRecord],
) -> Result<EvalSummary, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut gt: HashMap<&str, &GroundTruthRecord> = HashMap::with_capacity(truth.len());
    for t in truth {
        if gt.insert(t.id.as_str(), t).is_some() {
            return Err(EvalError::MismatchedIds(format!("duplicate ground-truth id `{}`", t.id)));
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut errs = Vec::with_capacity(results.len());
    for r in results {
        if !seen.insert(r.id.as_str()) {
            return Err(EvalError::MismatchedIds(format!("duplicate result id `{}`", r.id)));
        }
        let t = gt
            .get(r.id.as_str())
            .ok_or_else(|| EvalError::MismatchedIds(format!("no ground truth for `{}`", r.id)))?;
        errs.push(pair_errors(&r.up(), &t.up()));
    }
    if let Some(missing) = truth.iter().find(|t| !seen.contains(t.id.as_str())) {
        return Err(EvalError::MismatchedIds(format!("no result for `{}`", missing.id)));
    }
    let pick = |f: fn(&PairErrors) -> f64| errs.iter().map(f).collect::<Vec<_>>();
    Ok(EvalSummary {
        method: method.to_string(),
        count: errs.len(),
        angular: Stat::of(&pick(|e| e.angular)),
        pitch: Stat::of(&pick(|e| e.pitch)),
        roll: Stat::of(&pick(|e| e.roll)),
    })
}

/// Plain-text table with avg./med. columns per metric, in degrees.
pub fn format_table(summaries: &[EvalSummary]) -> String {
    let width = summaries.iter().map(|s| s.method.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>9} {:>9}  {:>9} {:>9}  {:>9} {:>9}\n",
        "method", "count", "ang.avg", "ang.med", "pitch.avg", "pitch.med", "roll.avg", "roll.med"
    );
    for s in summaries {
        out += &format!(
            "{:<width$}  {:>6}  {:>9.4} {:>9.4}  {:>9.4} {:>9.4}  {:>9.4} {:>9.4}\n",
            s.method, s.count, s.angular.mean, s.angular.median, s.pitch.mean, s.pitch.median, s.roll.mean, s.roll.median
        );
    }
    out
}
