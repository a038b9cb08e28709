//! Sample ingestion and synthetic datasets.

mod manifest;
mod pgm;
mod synth;

pub use manifest::{load_image_dataset, load_manifest, write_manifest, Manifest, ManifestRecord};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use synth::{
    gen_blob_images, gen_moons, moon_point, read_points, render_blob, write_points, BlobShape,
    SyntheticKind, SyntheticSpec,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples stacked along axis 0 with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>) -> Result<Self> {
        if samples.batch() != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                samples.batch(),
                labels.len()
            )));
        }
        Ok(Dataset { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.samples.gather(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }
}
