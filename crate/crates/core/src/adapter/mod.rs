//! Uniform model interface: forward pass to per-pixel logits, intermediate
//! feature capture at a named layer, and gradients of a scalar loss with
//! respect to the input image.

pub(crate) mod layers;
pub mod loss;
mod registry;
mod toy;

pub use registry::{
    init_model, layer_registry, list_models, load_model, LayerRegistryEntry, ModelInfo, ModelKind,
    DESK_NUM_CLASSES,
};
pub use toy::SeqCnn;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::featsim::FeatureMap;
use crate::tensor::{ImageTensor, LabelMap};

/// Expected input geometry and preprocessing, for reports.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Human-readable description of the adapter-internal normalization.
    pub preprocessing: String,
}

/// Adapter identity and capabilities, serialized into every report.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterMeta {
    pub model_id: String,
    pub num_classes: usize,
    pub input: InputSpec,
    pub layers: Vec<String>,
    pub recommended_layer: Option<String>,
    pub weights_checksum: Option<String>,
}

/// An activation surfaced to a scalar loss.
pub enum Activation<'a> {
    /// H×W×num_classes logits at input resolution.
    Logits(&'a Array3<f64>),
    /// Captured intermediate features.
    Features(&'a FeatureMap),
}

/// Gradient of a scalar loss with respect to the activation it read.
pub enum ActivationGrad {
    Logits(Array3<f64>),
    /// C×N gradient, matching the feature-map layout.
    Features(Array2<f64>),
}

/// A scalar objective over one of the model's activations.
///
/// `target_layer` selects where the scalar is computed: `None` reads the
/// output logits, `Some(layer)` reads the features captured at that layer.
/// `eval` returns the loss value together with its analytic gradient with
/// respect to the activation.
pub trait ActivationLoss {
    fn target_layer(&self) -> Option<&str>;
    fn eval(&mut self, activation: Activation<'_>) -> Result<(f64, ActivationGrad)>;
}

/// Result of differentiating a scalar loss through the model.
#[derive(Debug, Clone)]
pub struct InputGradient {
    pub value: f64,
    /// H×W×C gradient in raw pixel space (preprocessing accounted for).
    pub grad: Array3<f64>,
}

/// Uniform attack-facing model interface.
///
/// An adapter instance is single-caller at a time; concurrent workers must
/// each hold their own instance (see [`ModelAdapter::clone_adapter`]).
/// `Sync` is required only so harnesses can clone per worker from a shared
/// reference; implementations with interior mutability need a lock.
pub trait ModelAdapter: Send + Sync {
    fn meta(&self) -> &AdapterMeta;

    /// Forward pass to H×W×num_classes logits at input resolution.
    fn forward(&self, x: &ImageTensor) -> Result<Array3<f64>>;

    /// Forward pass that additionally captures the flattened activation at
    /// `layer_id`. Capturing must not alter the computed logits.
    fn forward_with_features(
        &self,
        x: &ImageTensor,
        layer_id: &str,
    ) -> Result<(Array3<f64>, FeatureMap)>;

    /// Gradient of `loss` with respect to the input pixels. Model parameters
    /// are untouched.
    fn input_gradient(&self, x: &ImageTensor, loss: &mut dyn ActivationLoss)
        -> Result<InputGradient>;

    fn clone_adapter(&self) -> Box<dyn ModelAdapter>;
}

/// Argmax over the class axis of H×W×K logits.
pub fn argmax_labels(logits: &Array3<f64>) -> LabelMap {
    let (h, w, k) = logits.dim();
    let values = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = logits[(y, x, 0)];
        for c in 1..k {
            let v = logits[(y, x, c)];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best as u8
    });
    LabelMap::from_raw(values, crate::tensor::DEFAULT_IGNORE_INDEX)
}

/// Runs a forward pass and argmaxes into a label map.
pub fn predict(model: &dyn ModelAdapter, x: &ImageTensor) -> Result<LabelMap> {
    Ok(argmax_labels(&model.forward(x)?))
}

pub(crate) fn unknown_layer_error(model: &str, layer: &str, available: &[String]) -> Error {
    Error::UnknownLayer {
        model: model.to_string(),
        id: layer.to_string(),
        available: available.to_vec(),
    }
}
