//! Image and label containers used throughout the attack and evaluation
//! pipelines.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// An H×W×C image with values in `[0, 1]`.
///
/// This is the attack variable: the clean image and every adversarial
/// iterate are `ImageTensor`s. The `[0, 1]` range invariant can be waived
/// explicitly (see [`ImageTensor::from_unclamped`]) for engines that run
/// with pixel clamping disabled; finiteness is always required.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    values: Array3<f64>,
}

impl ImageTensor {
    /// Builds an image, validating finiteness and the `[0, 1]` range.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidInput(
                "image values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { values })
    }

    /// Builds an image that may lie outside `[0, 1]` (finiteness still
    /// enforced). Used when pixel clamping is disabled.
    pub fn from_unclamped(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    /// Decodes an 8-bit RGB buffer into `[0, 1]` floats.
    pub fn from_rgb8(height: usize, width: usize, data: &[u8]) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "from_rgb8",
                &[height * width * 3],
                &[data.len()],
            ));
        }
        let values = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            f64::from(data[(y * width + x) * 3 + c]) / 255.0
        });
        Ok(Self { values })
    }

    /// Quantizes to 8-bit RGB (row-major, interleaved channels). Values are
    /// clamped to `[0, 1]` before rounding.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w, c) = self.dims();
        assert_eq!(c, 3, "to_rgb8 requires a 3-channel image");
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = self.values[(y, x, ch)].clamp(0.0, 1.0);
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.values.dim();
        (d.0, d.1, d.2)
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    /// L∞ distance to another image of the same shape.
    pub fn linf_distance(&self, other: &ImageTensor) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Minimum and maximum pixel values.
    pub fn value_range(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }
}

/// An H×W map of class indices with a reserved ignore index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    values: Array2<u8>,
    ignore_index: u8,
}

/// Default ignore index, matching the common segmentation convention.
pub const DEFAULT_IGNORE_INDEX: u8 = 255;

impl LabelMap {
    /// Builds a label map; every entry must be `< num_classes` or equal to
    /// `ignore_index`.
    pub fn new(values: Array2<u8>, num_classes: usize, ignore_index: u8) -> Result<Self> {
        if let Some(&bad) = values
            .iter()
            .find(|&&v| v != ignore_index && usize::from(v) >= num_classes)
        {
            return Err(Error::InvalidInput(format!(
                "label value {bad} out of range for {num_classes} classes (ignore index {ignore_index})"
            )));
        }
        Ok(Self {
            values,
            ignore_index,
        })
    }

    /// Builds a label map without range validation (used when the class
    /// count is not yet known).
    pub fn from_raw(values: Array2<u8>, ignore_index: u8) -> Self {
        Self {
            values,
            ignore_index,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }
}
