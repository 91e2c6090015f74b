//! Samples, file formats, the synthetic dataset and augmentation.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod pnm;
pub mod synth;
pub mod tta;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// One image with its per-pixel class map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[3,H,W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H·W` class indices.
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn new(image: Tensor, mask: Vec<u8>) -> Result<Self> {
        let (c, h, w) = image.dims3("SegSample")?;
        if c != 3 || mask.len() != h * w {
            return shape_err(
                "SegSample",
                format!("image {:?} with a mask of {} pixels", image.shape(), mask.len()),
            );
        }
        Ok(Self { image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Pixel count per class for `k` classes; out-of-range labels are ignored.
    pub fn class_counts(&self, k: usize) -> Vec<u64> {
        let mut counts = vec![0u64; k];
        for &m in &self.mask {
            if let Some(c) = counts.get_mut(m as usize) {
                *c += 1;
            }
        }
        counts
    }
}
