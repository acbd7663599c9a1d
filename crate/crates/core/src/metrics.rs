//! Multi-label evaluation: per-class precision/recall, their macro
//! averages, and sample-slot overall scores.
//!
//! Overall recall ships in two modes. The `Literal` numerator counts
//! every matching slot — including true negatives — so OR can exceed 1;
//! the default `Tp` mode counts only true positives, which keeps all
//! scores in [0, 1]. Both are reported rather than silently correcting
//! either.

use crate::error::{Error, Result};

/// N×K matrix of 0/1 labels; rows are samples, columns classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("label_matrix", "needs rows and cols >= 1"));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "label_matrix",
                format!("{rows}x{cols} wants {} entries, got {}", rows * cols, data.len()),
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("label_matrix", "entries must be 0 or 1"));
        }
        Ok(LabelMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("label_matrix", "ragged rows".to_string()));
        }
        Self::new(n, k, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, n: usize, k: usize) -> u8 {
        self.data[n * self.cols + k]
    }
}

/// Overall-score numerator convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OrMode {
    /// Count only slots where truth = prediction = 1.
    #[default]
    Tp,
    /// Count every matching slot, true negatives included.
    Literal,
}

impl OrMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tp" => Ok(OrMode::Tp),
            "literal" => Ok(OrMode::Literal),
            other => Err(Error::Config(format!("unknown OR mode '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OrMode::Tp => "tp",
            OrMode::Literal => "literal",
        }
    }
}

/// Full evaluation report mirroring the per-class + macro + overall
/// column layout.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub per_class: Vec<(f64, f64)>,
    pub ap: f64,
    pub ar: f64,
    pub af1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub or_mode: OrMode,
}

fn check_shapes(truth: &LabelMatrix, pred: &LabelMatrix) -> Result<()> {
    if truth.rows != pred.rows || truth.cols != pred.cols {
        return Err(Error::shape(
            "metrics",
            format!(
                "truth {}x{} vs pred {}x{}",
                truth.rows, truth.cols, pred.rows, pred.cols
            ),
        ));
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0 // 0/0 convention: degenerate classes score zero
    } else {
        num / den
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class (precision, recall); 0/0 is defined as 0.
pub fn per_class_pr(truth: &LabelMatrix, pred: &LabelMatrix) -> Result<Vec<(f64, f64)>> {
    check_shapes(truth, pred)?;
    let mut out = Vec::with_capacity(truth.cols);
    for k in 0..truth.cols {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for n in 0..truth.rows {
            match (truth.get(n, k), pred.get(n, k)) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (1, 0) => fneg += 1,
                _ => {}
            }
        }
        out.push((
            ratio(tp as f64, (tp + fp) as f64),
            ratio(tp as f64, (tp + fneg) as f64),
        ));
    }
    Ok(out)
}

/// Macro scores: AP and AR are plain means of the per-class values,
/// AF1 their harmonic mean.
pub fn macro_scores(per_class: &[(f64, f64)]) -> (f64, f64, f64) {
    assert!(!per_class.is_empty(), "macro_scores over zero classes");
    let k = per_class.len() as f64;
    let ap = per_class.iter().map(|&(p, _)| p).sum::<f64>() / k;
    let ar = per_class.iter().map(|&(_, r)| r).sum::<f64>() / k;
    (ap, ar, harmonic(ap, ar))
}

/// Sample-slot overall scores (OP, OR, OF1) in the requested mode.
pub fn overall_scores(
    truth: &LabelMatrix,
    pred: &LabelMatrix,
    mode: OrMode,
) -> Result<(f64, f64, f64)> {
    check_shapes(truth, pred)?;
    let slots = (truth.rows * truth.cols) as f64;
    let mut matches = 0u64; // slots with truth == pred
    let mut tp = 0u64;
    let mut pred_pos = 0u64;
    let mut true_pos_total = 0u64;
    for i in 0..truth.data.len() {
        let (t, p) = (truth.data[i], pred.data[i]);
        if t == p {
            matches += 1;
        }
        if t == 1 && p == 1 {
            tp += 1;
        }
        if p == 1 {
            pred_pos += 1;
        }
        if t == 1 {
            true_pos_total += 1;
        }
    }
    let (op, or) = match mode {
        OrMode::Literal => {
            if true_pos_total == 0 && matches > 0 {
                return Err(Error::invalid(
                    "overall_scores",
                    "literal OR undefined: no positive truth slots",
                ));
            }
            (
                matches as f64 / slots,
                ratio(matches as f64, true_pos_total as f64),
            )
        }
        OrMode::Tp => (
            ratio(tp as f64, pred_pos as f64),
            ratio(tp as f64, true_pos_total as f64),
        ),
    };
    Ok((op, or, harmonic(op, or)))
}

/// Everything at once.
pub fn report(truth: &LabelMatrix, pred: &LabelMatrix, mode: OrMode) -> Result<MetricReport> {
    let per_class = per_class_pr(truth, pred)?;
    let (ap, ar, af1) = macro_scores(&per_class);
    let (op, or, of1) = overall_scores(truth, pred, mode)?;
    Ok(MetricReport {
        per_class,
        ap,
        ar,
        af1,
        op,
        or,
        of1,
        or_mode: mode,
    })
}
