//! Scalar objectives differentiated through a model adapter.

use ndarray::Array3;

use super::{Activation, ActivationGrad, ActivationLoss};
use crate::error::{Error, Result};
use crate::featsim::{weighted_similarity_grad, FeatureMap, LossWeights, SimilarityParams, WeightedLoss};
use crate::tensor::LabelMap;

/// Mean pixel-wise cross-entropy over valid (non-ignored) pixels.
pub struct CrossEntropyLoss<'a> {
    labels: &'a LabelMap,
}

impl<'a> CrossEntropyLoss<'a> {
    pub fn new(labels: &'a LabelMap) -> Self {
        Self { labels }
    }
}

impl ActivationLoss for CrossEntropyLoss<'_> {
    fn target_layer(&self) -> Option<&str> {
        None
    }

    fn eval(&mut self, activation: Activation<'_>) -> Result<(f64, ActivationGrad)> {
        let logits = match activation {
            Activation::Logits(l) => l,
            Activation::Features(_) => {
                return Err(Error::Adapter(
                    "cross-entropy loss reads logits, got features".into(),
                ))
            }
        };
        let (h, w, k) = logits.dim();
        let (lh, lw) = self.labels.dims();
        if (lh, lw) != (h, w) {
            return Err(Error::shape("cross_entropy labels", &[h, w], &[lh, lw]));
        }
        let ignore = self.labels.ignore_index();
        let mut grad = Array3::<f64>::zeros((h, w, k));
        let mut total = 0.0;
        let mut valid = 0usize;
        for y in 0..h {
            for x in 0..w {
                let label = self.labels.values()[(y, x)];
                if label == ignore {
                    continue;
                }
                valid += 1;
                let mut maxv = f64::NEG_INFINITY;
                for c in 0..k {
                    maxv = maxv.max(logits[(y, x, c)]);
                }
                let mut sum_exp = 0.0;
                for c in 0..k {
                    sum_exp += (logits[(y, x, c)] - maxv).exp();
                }
                let lse = maxv + sum_exp.ln();
                total += lse - logits[(y, x, usize::from(label))];
                for c in 0..k {
                    let softmax = (logits[(y, x, c)] - lse).exp();
                    grad[(y, x, c)] = softmax;
                }
                grad[(y, x, usize::from(label))] -= 1.0;
            }
        }
        if valid == 0 {
            return Ok((0.0, ActivationGrad::Logits(Array3::zeros((h, w, k)))));
        }
        let scale = 1.0 / valid as f64;
        grad.mapv_inplace(|v| v * scale);
        Ok((total * scale, ActivationGrad::Logits(grad)))
    }
}

/// The blended feature-similarity objective evaluated at a capture layer.
///
/// Holds the clean feature map (computed once, outside the attack loop) and
/// the blend weights for the current iteration. After `eval`, the full loss
/// decomposition is available in `last` for trace recording.
pub struct FeatureObjective {
    layer: String,
    clean_features: FeatureMap,
    tau: f64,
    weights: LossWeights,
    params: SimilarityParams,
    pub last: Option<WeightedLoss>,
}

impl FeatureObjective {
    pub fn new(
        layer: impl Into<String>,
        clean_features: FeatureMap,
        tau: f64,
        weights: LossWeights,
        params: SimilarityParams,
    ) -> Self {
        Self {
            layer: layer.into(),
            clean_features,
            tau,
            weights,
            params,
            last: None,
        }
    }

    pub fn set_weights(&mut self, weights: LossWeights) {
        self.weights = weights;
    }
}

impl ActivationLoss for FeatureObjective {
    fn target_layer(&self) -> Option<&str> {
        Some(&self.layer)
    }

    fn eval(&mut self, activation: Activation<'_>) -> Result<(f64, ActivationGrad)> {
        let features = match activation {
            Activation::Features(f) => f,
            Activation::Logits(_) => {
                return Err(Error::Adapter(
                    "feature objective reads features, got logits".into(),
                ))
            }
        };
        let (loss, grad) = weighted_similarity_grad(
            &self.clean_features,
            features,
            self.weights,
            self.tau,
            &self.params,
        )?;
        self.last = Some(loss);
        Ok((loss.combined, ActivationGrad::Features(grad)))
    }
}

/// A constant objective; its input gradient is identically zero.
pub struct ConstantLoss(pub f64);

impl ActivationLoss for ConstantLoss {
    fn target_layer(&self) -> Option<&str> {
        None
    }

    fn eval(&mut self, activation: Activation<'_>) -> Result<(f64, ActivationGrad)> {
        match activation {
            Activation::Logits(l) => Ok((self.0, ActivationGrad::Logits(Array3::zeros(l.dim())))),
            Activation::Features(f) => Ok((
                self.0,
                ActivationGrad::Features(ndarray::Array2::zeros(f.values().dim())),
            )),
        }
    }
}

/// Sum of all logits; useful for linear-model gradient sanity checks.
pub struct LogitSum;

impl ActivationLoss for LogitSum {
    fn target_layer(&self) -> Option<&str> {
        None
    }

    fn eval(&mut self, activation: Activation<'_>) -> Result<(f64, ActivationGrad)> {
        match activation {
            Activation::Logits(l) => Ok((l.sum(), ActivationGrad::Logits(Array3::ones(l.dim())))),
            Activation::Features(_) => Err(Error::Adapter("logit sum reads logits".into())),
        }
    }
}
