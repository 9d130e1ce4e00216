//! Probability grids, their validation, and log-domain helpers.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied before taking logs of probabilities.
pub const PROB_FLOOR: f64 = 1e-30;

/// Row-sum tolerance for probability grids.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// `ln(sum(exp(xs)))`, returning `-inf` when every term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Row-wise softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|p| p / sum);
    }
    out
}

/// Softmax of a single vector.
pub fn softmax(logits: ArrayView1<f64>) -> ndarray::Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|p| p / sum);
    out
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits, row by row.
pub fn softmax_backward(probs: ArrayView2<f64>, grad_probs: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs.rows().into_iter().zip(grad_probs.rows()).zip(out.rows_mut()) {
        let dot = p.dot(&g);
        for ((o, &p), &g) in o.iter_mut().zip(p).zip(g) {
            *o = p * (g - dot);
        }
    }
    out
}

/// Pulls a gradient w.r.t. log-softmax outputs back to the logits.
pub fn log_softmax_backward(probs: ArrayView2<f64>, grad_log_probs: ArrayView2<f64>) -> Array2<f64> {
    let mut out = grad_log_probs.to_owned();
    for (p, mut o) in probs.rows().into_iter().zip(out.rows_mut()) {
        let total = o.sum();
        for (o, &p) in o.iter_mut().zip(p) {
            *o -= p * total;
        }
    }
    out
}

/// Maps each entry `p` to `ln(max(p, floor))`.
pub fn to_log_domain(probs: ArrayView2<f64>, floor: f64) -> Result<Array2<f64>> {
    if floor.is_nan() || floor <= 0.0 {
        return Err(Error::InvalidArgument(format!("log floor must be positive, got {floor}")));
    }
    Ok(probs.mapv(|p| p.max(floor).ln()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowViolation {
    pub row: usize,
    pub sum: f64,
    /// Smallest entry in the row, reported when negative.
    pub min_entry: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<RowViolation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that every row is a probability distribution.
pub fn validate_grid(probs: ArrayView2<f64>) -> ValidationReport {
    let mut violations = Vec::new();
    for (row, values) in probs.rows().into_iter().enumerate() {
        let sum = values.sum();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let bad_entry = values.iter().any(|p| !(0.0..=1.0).contains(p));
        if bad_entry || sum.is_nan() || (sum - 1.0).abs() > ROW_SUM_TOL {
            violations.push(RowViolation {
                row,
                sum,
                min_entry: (min < 0.0).then_some(min),
            });
        }
    }
    ValidationReport { violations }
}

/// Anything exposing a `T x C` probability matrix.
pub trait ProbabilityGrid {
    fn probs(&self) -> ArrayView2<'_, f64>;

    fn frames(&self) -> usize {
        self.probs().nrows()
    }

    fn validate(&self) -> ValidationReport {
        validate_grid(self.probs())
    }
}

fn checked(probs: Array2<f64>, what: &str) -> Result<Array2<f64>> {
    if probs.nrows() == 0 || probs.ncols() == 0 {
        return Err(Error::Shape(format!("{what} must have at least one row and column")));
    }
    let report = validate_grid(probs.view());
    if let Some(v) = report.violations.first() {
        return Err(Error::InvalidGrid(format!(
            "{what} row {} sums to {} ({} bad rows)",
            v.row,
            v.sum,
            report.violations.len()
        )));
    }
    Ok(probs)
}

/// Per-frame token posteriors over `V ∪ {<b>}`; the blank is the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPosteriorGrid {
    probs: Array2<f64>,
    log_probs: Array2<f64>,
}

impl TokenPosteriorGrid {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let probs = checked(probs, "token posterior grid")?;
        let log_probs = to_log_domain(probs.view(), PROB_FLOOR)?;
        Ok(Self { probs, log_probs })
    }

    pub fn from_logits(logits: ArrayView2<f64>) -> Result<Self> {
        Self::new(softmax_rows(logits))
    }

    pub fn log_probs(&self) -> ArrayView2<'_, f64> {
        self.log_probs.view()
    }

    pub fn classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn blank(&self) -> usize {
        self.probs.ncols() - 1
    }
}

impl ProbabilityGrid for TokenPosteriorGrid {
    fn probs(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }
}

/// Per-frame speaker posteriors over the ordered inventory `s_1..s_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerPosteriorGrid {
    probs: Array2<f64>,
}

impl SpeakerPosteriorGrid {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        Ok(Self { probs: checked(probs, "speaker posterior grid")? })
    }

    pub fn from_logits(logits: ArrayView2<f64>) -> Result<Self> {
        Self::new(softmax_rows(logits))
    }

    /// All mass on `s_1` at every frame.
    pub fn degenerate(frames: usize, speakers: usize) -> Result<Self> {
        let mut probs = Array2::zeros((frames, speakers));
        probs.column_mut(0).fill(1.0);
        Self::new(probs)
    }

    pub fn speakers(&self) -> usize {
        self.probs.ncols()
    }
}

impl ProbabilityGrid for SpeakerPosteriorGrid {
    fn probs(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }
}

/// A `T x D` matrix of acoustic feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    frames: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::Shape("feature sequence needs T >= 1 and D >= 1".into()));
        }
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("feature sequence contains non-finite values".into()));
        }
        Ok(Self { frames })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let frames = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(frames)
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.frames.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
    }
}

/// Per-speaker CTC losses and their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Indexed by speaker slot (`per_speaker[0]` is `s_1`).
    pub per_speaker: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_per_speaker(per_speaker: Vec<f64>) -> Self {
        let total = per_speaker.iter().sum();
        Self { per_speaker, total }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}
