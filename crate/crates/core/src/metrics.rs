//! Accuracy, group-fairness gaps and dependence measures over categorical
//! predictions and labels.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no samples")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{what} must be binary, found value {value}")]
    NonBinary { what: &'static str, value: usize },
    #[error("sensitive group {group} is empty")]
    EmptyGroup { group: usize },
    #[error("no samples with s = {group} and y = {class}")]
    EmptyCell { group: usize, class: usize },
    #[error("{what} has fewer than two observed levels")]
    TooFewLevels { what: &'static str },
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MetricError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn binary(what: &'static str, values: &[usize]) -> Result<()> {
    match values.iter().find(|&&v| v > 1) {
        Some(&value) => Err(MetricError::NonBinary { what, value }),
        None => Ok(()),
    }
}

pub fn accuracy(preds: &[usize], y: &[usize]) -> Result<f64> {
    same_len(preds.len(), y.len())?;
    let correct = preds.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Rate of `preds == 1` among the samples selected by `keep`.
fn positive_rate(preds: &[usize], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, &p) in preds.iter().enumerate() {
        if keep(i) {
            total += 1;
            hits += p;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// `|P(pred = 1 | s = 0) - P(pred = 1 | s = 1)|`.
pub fn dp_diff(preds: &[usize], s: &[usize]) -> Result<f64> {
    same_len(preds.len(), s.len())?;
    binary("prediction", preds)?;
    binary("s", s)?;
    let rate = |g| positive_rate(preds, |i| s[i] == g).ok_or(MetricError::EmptyGroup { group: g });
    Ok((rate(0)? - rate(1)?).abs())
}

fn conditional_rate_diff(preds: &[usize], y: &[usize], s: &[usize], class: usize) -> Result<f64> {
    same_len(preds.len(), y.len())?;
    same_len(preds.len(), s.len())?;
    binary("prediction", preds)?;
    binary("y", y)?;
    binary("s", s)?;
    let rate = |group| {
        positive_rate(preds, |i| s[i] == group && y[i] == class).ok_or(MetricError::EmptyCell { group, class })
    };
    Ok((rate(0)? - rate(1)?).abs())
}

/// Absolute gap in true-positive rate between the two sensitive groups.
pub fn tpr_diff(preds: &[usize], y: &[usize], s: &[usize]) -> Result<f64> {
    conditional_rate_diff(preds, y, s, 1)
}

/// Absolute gap in true-negative rate between the two sensitive groups.
pub fn tnr_diff(preds: &[usize], y: &[usize], s: &[usize]) -> Result<f64> {
    // TNR = 1 - P(pred = 1 | y = 0), so the gap equals the false-positive gap.
    conditional_rate_diff(preds, y, s, 0)
}

/// Empirical joint distribution of two categorical samples.
pub fn joint_distribution(a: &[usize], b: &[usize]) -> Result<Array2<f64>> {
    same_len(a.len(), b.len())?;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = Array2::zeros((ka, kb));
    for (&i, &j) in a.iter().zip(b) {
        joint[[i, j]] += 1.0;
    }
    joint /= a.len() as f64;
    Ok(joint)
}

/// Plug-in mutual information in nats.
pub fn empirical_mi(a: &[usize], b: &[usize]) -> Result<f64> {
    Ok(mutual_information(&joint_distribution(a, b)?))
}

/// Mutual information of a joint probability table, in nats.
pub fn mutual_information(joint: &Array2<f64>) -> f64 {
    let pa = joint.sum_axis(ndarray::Axis(1));
    let pb = joint.sum_axis(ndarray::Axis(0));
    let mut mi = 0.0;
    for ((i, j), &p) in joint.indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (pa[i] * pb[j])).ln();
        }
    }
    mi.max(0.0)
}

/// Hirschfeld-Gebelein-Renyi maximal correlation of two categorical samples.
pub fn hgr(a: &[usize], b: &[usize]) -> Result<f64> {
    hgr_from_joint(&joint_distribution(a, b)?)
}

/// Maximal correlation of a joint probability table: the second-largest
/// singular value of `p(i, j) / sqrt(p(i) p(j))`. Levels with zero marginal
/// mass are dropped.
pub fn hgr_from_joint(joint: &Array2<f64>) -> Result<f64> {
    let pa = joint.sum_axis(ndarray::Axis(1));
    let pb = joint.sum_axis(ndarray::Axis(0));
    let rows: Vec<usize> = (0..pa.len()).filter(|&i| pa[i] > 0.0).collect();
    let cols: Vec<usize> = (0..pb.len()).filter(|&j| pb[j] > 0.0).collect();
    let dropped = pa.len() + pb.len() - rows.len() - cols.len();
    if dropped > 0 {
        log::warn!("hgr: dropped {dropped} level(s) with zero marginal");
    }
    if rows.len() < 2 {
        return Err(MetricError::TooFewLevels { what: "first variable" });
    }
    if cols.len() < 2 {
        return Err(MetricError::TooFewLevels { what: "second variable" });
    }
    let q = DMatrix::from_fn(rows.len(), cols.len(), |r, c| {
        let (i, j) = (rows[r], cols[c]);
        joint[[i, j]] / (pa[i] * pb[j]).sqrt()
    });
    let mut sv: Vec<f64> = q.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv[1].clamp(0.0, 1.0))
}

/// Evaluation summary of one run. Gaps are `None` where `s` or `y` is not
/// binary or a conditioning cell is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub dp_diff: Option<f64>,
    pub tpr_diff: Option<f64>,
    pub tnr_diff: Option<f64>,
    /// Maximal correlation between `s` and the predictions.
    pub hgr: f64,
    /// Mutual information between `s` and the predictions, in nats.
    pub mi_sy: f64,
    /// Sample count for each value of `s`.
    pub n_per_group: Vec<usize>,
}

impl FairnessReport {
    pub fn evaluate(preds: &[usize], y: &[usize], s: &[usize]) -> Result<Self> {
        same_len(preds.len(), y.len())?;
        same_len(preds.len(), s.len())?;
        let groups = s.iter().max().map_or(0, |m| m + 1);
        let mut n_per_group = vec![0; groups];
        for &g in s {
            n_per_group[g] += 1;
        }
        let hgr = match hgr(s, preds) {
            // A constant prediction (or a single group) is independent of s.
            Err(MetricError::TooFewLevels { .. }) => 0.0,
            other => other?,
        };
        Ok(Self {
            accuracy: accuracy(preds, y)?,
            dp_diff: dp_diff(preds, s).ok(),
            tpr_diff: tpr_diff(preds, y, s).ok(),
            tnr_diff: tnr_diff(preds, y, s).ok(),
            hgr,
            mi_sy: empirical_mi(s, preds)?,
            n_per_group,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serialises")
    }
}
