//! Dataset manifests, PPM image decoding, synthetic dataset generation,
//! and checkpoint persistence.

pub mod checkpoint;
pub mod manifest;
pub mod ppm;
pub mod synth;

pub use checkpoint::{
    backbone_from_checkpoint, backbone_to_checkpoint, load_checkpoint, model_from_checkpoint,
    model_to_checkpoint, save_checkpoint, AnyTensor, Checkpoint,
};
pub use manifest::{binarize_strengths, load_manifest, write_manifest, Manifest};
pub use ppm::{decode_image, read_ppm, resize_bilinear, write_ppm, DECODE_SIZE};
pub use synth::{synth_dataset, CooccurrenceSpec};

use crate::cooccur::StrengthTable;
use crate::error::Result;
use crate::metrics::LabelMatrix;
use crate::tensor::{Element, Tensor};
use rayon::prelude::*;

/// One training/eval sample: the decoded image resized to the pipeline's
/// pre-crop size, plus its strengths and thresholded labels.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub strengths: Vec<f64>,
    pub labels: Vec<u8>,
}

/// In-memory dataset with a class-name table. When built with
/// `add_other`, the trailing class marks samples whose strengths all
/// fall below the presence threshold.
#[derive(Clone, Debug)]
pub struct Dataset<T: Element> {
    pub classes: Vec<String>,
    pub samples: Vec<Sample<T>>,
}

impl<T: Element> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn strength_table(&self) -> Result<StrengthTable> {
        StrengthTable::new(
            self.classes.clone(),
            self.samples.iter().map(|s| s.strengths.clone()).collect(),
        )
    }

    pub fn label_matrix(&self) -> Result<LabelMatrix> {
        LabelMatrix::from_rows(
            &self
                .samples
                .iter()
                .map(|s| s.labels.clone())
                .collect::<Vec<_>>(),
        )
    }
}

/// Load a manifest and decode every image to `pre_size`. Strength and
/// label vectors gain an "other" column when requested.
pub fn load_dataset<T: Element>(
    manifest_path: &std::path::Path,
    pre_size: usize,
    add_other: bool,
) -> Result<Dataset<T>> {
    let manifest = load_manifest(manifest_path)?;
    let mut classes = manifest.classes.clone();
    if add_other {
        classes.push("other".to_string());
    }
    let samples: Vec<Sample<T>> = manifest
        .rows
        .par_iter()
        .map(|row| -> Result<Sample<T>> {
            let img = decode_image(&manifest.resolve(&row.path))?;
            let img = if pre_size == DECODE_SIZE {
                img
            } else {
                resize_bilinear(&img, pre_size, pre_size)
            };
            let mut strengths = row.strengths.clone();
            if add_other {
                let other = if row.strengths.iter().all(|&s| s < 0.5) {
                    1.0
                } else {
                    0.0
                };
                strengths.push(other);
            }
            let labels = binarize_strengths(&row.strengths, add_other);
            Ok(Sample {
                image: img.cast(),
                strengths,
                labels,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { classes, samples })
}
