//! Label co-occurrence analysis over attribute-strength tables: the
//! pairwise ratio matrix R, per-class influence ratios, the label order
//! they induce, and dataset occurrence statistics.

use crate::error::{Error, Result};

/// A strength of 0.5 or higher marks the condition as present.
pub const PRESENCE_THRESHOLD: f64 = 0.5;

/// N×K table of attribute strengths in [0, 1] with class names.
#[derive(Clone, Debug)]
pub struct StrengthTable {
    classes: Vec<String>,
    rows: usize,
    data: Vec<f64>,
}

impl StrengthTable {
    pub fn new(classes: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = classes.len();
        if k == 0 {
            return Err(Error::invalid("strength_table", "needs at least one class"));
        }
        let mut data = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::shape(
                    "strength_table",
                    format!("row {i} has {} strengths for {k} classes", row.len()),
                ));
            }
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(
                        "strength_table",
                        format!("strength {v} out of [0,1] in row {i}"),
                    ));
                }
                data.push(v);
            }
        }
        Ok(StrengthTable {
            classes,
            rows: rows.len(),
            data,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_samples(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn strength(&self, n: usize, k: usize) -> f64 {
        self.data[n * self.classes.len() + k]
    }

    #[inline]
    pub fn present(&self, n: usize, k: usize) -> bool {
        self.strength(n, k) >= PRESENCE_THRESHOLD
    }
}

/// Occurrence counts in the style of a dataset-statistics table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub per_class: Vec<usize>,
    pub multi_label: usize,
    pub total: usize,
}

/// Everything the analysis produces.
#[derive(Clone, Debug)]
pub struct CooccurrenceReport {
    pub classes: Vec<String>,
    /// Row-major K×K matrix; entry (i, j) is the fraction of samples
    /// containing i that also contain j.
    pub matrix: Vec<f64>,
    /// Influence ratio per class.
    pub influence: Vec<f64>,
    /// Class indices sorted by descending influence, ties by index.
    pub order: Vec<usize>,
    pub stats: DatasetStats,
}

impl CooccurrenceReport {
    #[inline]
    pub fn r(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.classes.len() + j]
    }
}

/// R(i, j) = co-occurrence count of (i, j) / occurrence count of i,
/// with R(i, j) = 0 for classes that never occur.
pub fn cooccurrence_matrix(table: &StrengthTable) -> Result<Vec<f64>> {
    if table.num_samples() == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = table.num_classes();
    let mut occur = vec![0u64; k];
    let mut pair = vec![0u64; k * k];
    for n in 0..table.num_samples() {
        for i in 0..k {
            if !table.present(n, i) {
                continue;
            }
            occur[i] += 1;
            for j in 0..k {
                if table.present(n, j) {
                    pair[i * k + j] += 1;
                }
            }
        }
    }
    let mut r = vec![0.0; k * k];
    for i in 0..k {
        if occur[i] == 0 {
            continue;
        }
        for j in 0..k {
            r[i * k + j] = pair[i * k + j] as f64 / occur[i] as f64;
        }
    }
    Ok(r)
}

/// Influence ratio r_i = Σ_j R(i,j) / Σ_j R(j,i) (0 when the
/// denominator vanishes) and the induced order: descending r, ties by
/// ascending class index.
pub fn label_order(matrix: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
    assert_eq!(matrix.len(), k * k, "matrix is not K x K");
    let mut influence = vec![0.0; k];
    for i in 0..k {
        let out: f64 = (0..k).map(|j| matrix[i * k + j]).sum();
        let inc: f64 = (0..k).map(|j| matrix[j * k + i]).sum();
        influence[i] = if inc == 0.0 { 0.0 } else { out / inc };
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        influence[b]
            .partial_cmp(&influence[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    (influence, order)
}

/// Per-class occurrence counts, the number of samples with more than
/// one label, and the total sample count.
pub fn dataset_stats(table: &StrengthTable) -> DatasetStats {
    let k = table.num_classes();
    let mut per_class = vec![0usize; k];
    let mut multi_label = 0usize;
    for n in 0..table.num_samples() {
        let mut count = 0usize;
        for (i, slot) in per_class.iter_mut().enumerate() {
            if table.present(n, i) {
                *slot += 1;
                count += 1;
            }
        }
        if count > 1 {
            multi_label += 1;
        }
    }
    DatasetStats {
        per_class,
        multi_label,
        total: table.num_samples(),
    }
}

/// Run the whole analysis.
pub fn analyze(table: &StrengthTable) -> Result<CooccurrenceReport> {
    let matrix = cooccurrence_matrix(table)?;
    let (influence, order) = label_order(&matrix, table.num_classes());
    Ok(CooccurrenceReport {
        classes: table.classes().to_vec(),
        matrix,
        influence,
        order,
        stats: dataset_stats(table),
    })
}
