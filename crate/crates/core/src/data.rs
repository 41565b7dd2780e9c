//! In-memory labelled image sets.

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Other,
}

/// Images stored contiguously, `len * pixel_count` values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pixels: Vec<f64>,
    image_shape: [usize; 3],
    labels: Vec<u8>,
    classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        pixels: Vec<f64>,
        image_shape: [usize; 3],
        labels: Vec<u8>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::InvalidParam("image shape has a zero extent".into()));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::Dimension {
                expected: per * labels.len(),
                got: pixels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidParam(format!(
                "label {bad} not below class count {classes}"
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            pixels,
            image_shape,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn pixel_count(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.image_shape.to_vec(), self.pixels(i).to_vec())
    }

    /// First `n` items (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.pixel_count();
        Dataset {
            pixels: self.pixels[..n * per].to_vec(),
            image_shape: self.image_shape,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let per = self.pixel_count();
        let mut pixels = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.pixels(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            pixels,
            image_shape: self.image_shape,
            labels,
            classes: self.classes,
            split: self.split,
        }
    }
}
