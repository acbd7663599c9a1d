//! Synthetic dataset generation. Label sets are drawn from a mixture of
//! weighted combinations, which makes the planted co-occurrence matrix
//! an exact closed form; each class owns a colored horizontal band so
//! the classes are visually separable at any backbone scale.

use super::manifest::{write_manifest, ManifestRow};
use super::ppm::write_ppm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::{Path, PathBuf};

pub const MAX_CLASSES: usize = 8;

const CLASS_COLORS: [[f32; 3]; MAX_CLASSES] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.10],
    [0.15, 0.25, 0.90],
    [0.90, 0.85, 0.10],
    [0.80, 0.10, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.55, 0.10],
    [0.92, 0.92, 0.92],
];

const BACKGROUND: f32 = 0.12;
const RENDER_NOISE: f64 = 0.03;

/// A mixture over label combinations: each entry is (weight, member
/// class indices). Weights must lie in [0, 1] and sum to at most 1;
/// leftover mass produces samples with no labels at all.
#[derive(Clone, Debug)]
pub struct CooccurrenceSpec {
    pub classes: Vec<String>,
    pub sets: Vec<(f64, Vec<usize>)>,
}

impl CooccurrenceSpec {
    pub fn new(classes: Vec<String>, sets: Vec<(f64, Vec<usize>)>) -> Result<Self> {
        if classes.is_empty() || classes.len() > MAX_CLASSES {
            return Err(Error::Config(format!(
                "class count {} outside 1..={MAX_CLASSES}",
                classes.len()
            )));
        }
        let mut total = 0.0;
        for (w, members) in &sets {
            if !(0.0..=1.0).contains(w) {
                return Err(Error::Config(format!("set weight {w} outside [0,1]")));
            }
            total += w;
            let mut seen = vec![false; classes.len()];
            for &m in members {
                if m >= classes.len() {
                    return Err(Error::Config(format!("class index {m} out of range")));
                }
                if seen[m] {
                    return Err(Error::Config(format!("duplicate class {m} in set")));
                }
                seen[m] = true;
            }
        }
        if total > 1.0 + 1e-9 {
            return Err(Error::Config(format!("set weights sum to {total} > 1")));
        }
        Ok(CooccurrenceSpec { classes, sets })
    }

    /// A built-in mixture for quick runs: each class appears alone and
    /// adjacent classes co-occur.
    pub fn default_for(k: usize) -> Result<Self> {
        let classes = (0..k).map(|i| format!("c{i}")).collect::<Vec<_>>();
        let mut sets = Vec::new();
        let solo = 0.6 / k as f64;
        let pair = 0.35 / k.max(2) as f64;
        for i in 0..k {
            sets.push((solo, vec![i]));
        }
        if k > 1 {
            for i in 0..k {
                sets.push((pair, vec![i, (i + 1) % k]));
            }
        }
        Self::new(classes, sets)
    }

    /// Spec file format: a `classes,A,B,...` header line, then one
    /// `weight,name[,name...]` line per combination. '#' starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut classes: Option<Vec<String>> = None;
        let mut sets = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let first = fields.next().unwrap_or_default();
            if first == "classes" {
                if classes.is_some() {
                    return Err(Error::Config("duplicate classes line".into()));
                }
                let names: Vec<String> = fields.map(str::to_string).collect();
                if names.iter().any(String::is_empty) {
                    return Err(Error::Config(format!("empty class name on line {}", idx + 1)));
                }
                classes = Some(names);
                continue;
            }
            let Some(ref names) = classes else {
                return Err(Error::Config("spec must start with a classes line".into()));
            };
            let weight: f64 = first
                .parse()
                .map_err(|_| Error::Config(format!("bad weight '{first}' on line {}", idx + 1)))?;
            let mut members = Vec::new();
            for name in fields {
                let pos = names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Config(format!("unknown class '{name}' on line {}", idx + 1)))?;
                members.push(pos);
            }
            sets.push((weight, members));
        }
        let classes = classes.ok_or_else(|| Error::Config("spec has no classes line".into()))?;
        Self::new(classes, sets)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("classes,{}\n", self.classes.join(","));
        for (w, members) in &self.sets {
            out.push_str(&w.to_string());
            for &m in members {
                out.push(',');
                out.push_str(&self.classes[m]);
            }
            out.push('\n');
        }
        out
    }

    /// The planted co-occurrence matrix in closed form:
    /// R(i,j) = Σ_{sets ∋ i,j} w / Σ_{sets ∋ i} w.
    pub fn expected_r(&self) -> Vec<f64> {
        let k = self.classes.len();
        let mut r = vec![0.0; k * k];
        for i in 0..k {
            let occ: f64 = self
                .sets
                .iter()
                .filter(|(_, m)| m.contains(&i))
                .map(|(w, _)| w)
                .sum();
            if occ == 0.0 {
                continue;
            }
            for j in 0..k {
                let both: f64 = self
                    .sets
                    .iter()
                    .filter(|(_, m)| m.contains(&i) && m.contains(&j))
                    .map(|(w, _)| w)
                    .sum();
                r[i * k + j] = both / occ;
            }
        }
        r
    }

    /// Draw one label vector from the mixture.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut labels = vec![0u8; self.classes.len()];
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        for (w, members) in &self.sets {
            acc += w;
            if u < acc {
                for &m in members {
                    labels[m] = 1;
                }
                break;
            }
        }
        labels // leftover mass: all zeros
    }
}

/// Render the visual cues for a label vector: class k paints band k of
/// the image in its color; everything else is noisy background.
pub fn render_image(labels: &[u8], size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let k = labels.len();
    assert!((1..=MAX_CLASSES).contains(&k));
    let noise = Normal::new(0.0, RENDER_NOISE).expect("valid sigma");
    let band = size / k;
    let mut img = Tensor::zeros(vec![size, size, 3]);
    for y in 0..size {
        let class = (y / band.max(1)).min(k - 1);
        let active = labels[class] == 1;
        for x in 0..size {
            for ch in 0..3 {
                let base = if active {
                    CLASS_COLORS[class][ch]
                } else {
                    BACKGROUND
                };
                let v = base + noise.sample(rng) as f32;
                img.data_mut()[(y * size + x) * 3 + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Generate `n` samples into `out_dir`: PPM images plus `manifest.csv`
/// with strengths of exactly 1.0 for active labels and 0.0 otherwise.
/// Returns the manifest path.
pub fn synth_dataset(
    spec: &CooccurrenceSpec,
    n: usize,
    seed: u64,
    image_size: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::invalid("synth_dataset", "need at least one sample"));
    }
    if image_size < 8 {
        return Err(Error::invalid("synth_dataset", "image size below 8"));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::trainer::derive_seed(seed, &[i as u64]));
        let labels = spec.sample(&mut rng);
        let img = render_image(&labels, image_size, &mut rng);
        let name = format!("img_{i:05}.ppm");
        write_ppm(&out_dir.join(&name), &img)?;
        rows.push(ManifestRow {
            path: name,
            strengths: labels.iter().map(|&l| l as f64).collect(),
        });
    }
    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &spec.classes, &rows)?;
    Ok(manifest_path)
}
