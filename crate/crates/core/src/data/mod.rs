//! Synthetic segmentation data, label-skewed partitioning across vehicles
//! and the on-disk dataset format.

mod io;
mod partition;
mod scene;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_VERSION};
pub use partition::{dirichlet_partition, dominant_class, label_skew, PartitionSpec};
pub use scene::{generate_dataset, generate_scene, render, sample_shapes, SceneConfig, Shape};

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// One image with its per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[channels, height, width]`, values in `[0,1]`.
    pub image: Vec<f32>,
    /// `[height, width]`, class ids or the ignore label.
    pub label: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, classes: usize, samples: Vec<SegSample>) -> Result<Self> {
        let (img, px) = (channels * height * width, height * width);
        for (i, s) in samples.iter().enumerate() {
            if s.image.len() != img || s.label.len() != px {
                return Err(Error::Data {
                    sample: i,
                    detail: format!(
                        "expected {img} image values and {px} labels, got {} and {}",
                        s.image.len(),
                        s.label.len()
                    ),
                });
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy of the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.header()
        }
    }

    fn header(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            samples: Vec::new(),
        }
    }

    /// Stacks the selected samples into an NCHW tensor and flat labels.
    pub fn batch<R: Real>(&self, indices: &[usize]) -> Result<(Tensor<R>, Vec<u8>)> {
        let img = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * img);
        let mut labels = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| Error::Data {
                sample: i,
                detail: format!("index out of range for {} samples", self.len()),
            })?;
            data.extend(s.image.iter().map(|&v| R::from_f64_lossy(v as f64)));
            labels.extend_from_slice(&s.label);
        }
        let t = Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, labels))
    }

    /// Pixel count per class (ignore-labelled pixels excluded).
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.classes];
        for s in &self.samples {
            for &l in &s.label {
                if (l as usize) < self.classes {
                    h[l as usize] += 1;
                }
            }
        }
        h
    }
}
