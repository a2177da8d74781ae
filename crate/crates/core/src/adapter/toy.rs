//! Bundled desk-scale segmentation models.
//!
//! A [`SeqCnn`] is a self-describing sequential CNN: the weights file
//! carries the full op list, so any checkpoint in the format can be loaded
//! and attacked through the same interface. Two architectures ship with the
//! crate:
//!
//! - `toy-cnn-a`: 5-conv encoder–decoder (stride-4 bottleneck).
//! - `toy-cnn-b`: 7-conv encoder–decoder with different widths and an extra
//!   stride-8 downsample.
//!
//! Inputs are `[0, 1]` RGB; the adapter normalizes internally with mean 0.5
//! and std 0.5 per channel. Logits are decoded at half resolution and
//! nearest-upsampled to the input size.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Op};
use super::{
    unknown_layer_error, Activation, ActivationGrad, ActivationLoss, AdapterMeta, InputGradient,
    InputSpec, ModelAdapter,
};
use crate::error::{Error, Result};
use crate::featsim::FeatureMap;
use crate::tensor::ImageTensor;
use crate::util::sha256_hex;

const WEIGHTS_FORMAT: &str = "segattack-seqcnn-v1";
const MEAN: [f64; 3] = [0.5, 0.5, 0.5];
const STD: [f64; 3] = [0.5, 0.5, 0.5];
const NATURAL_INPUT: (usize, usize) = (64, 64);

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    format: String,
    arch_id: String,
    num_classes: usize,
    input: (usize, usize, usize),
    mean: [f64; 3],
    std: [f64; 3],
    captures: Vec<(String, usize)>,
    recommended_layer: String,
    ops: Vec<Op>,
}

/// A sequential CNN with named capture points behind the uniform adapter
/// interface.
#[derive(Debug, Clone)]
pub struct SeqCnn {
    ops: Vec<Op>,
    /// `(layer id, op index)`: the layer's activation is the output of
    /// `ops[idx]`.
    captures: Vec<(String, usize)>,
    mean: [f64; 3],
    std: [f64; 3],
    /// Input dims must be divisible by this (deepest downsample factor).
    divisor: usize,
    meta: AdapterMeta,
}

struct ArchPlan {
    ops: Vec<Op>,
    captures: Vec<(String, usize)>,
    recommended: String,
}

fn he_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv2d {
    let fan_in = cin * k * k;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Conv2d {
        cin,
        cout,
        k,
        stride,
        pad,
        weight: Array2::from_shape_fn((cout, fan_in), |_| normal.sample(rng)),
        bias: Array1::zeros(cout),
    }
}

struct ArchBuilder<'r> {
    rng: &'r mut ChaCha8Rng,
    ops: Vec<Op>,
    captures: Vec<(String, usize)>,
    channels: usize,
}

impl<'r> ArchBuilder<'r> {
    fn new(rng: &'r mut ChaCha8Rng, channels: usize) -> Self {
        Self {
            rng,
            ops: Vec::new(),
            captures: Vec::new(),
            channels,
        }
    }

    /// One block: 3×3 conv, spatial centering, ReLU, per-pixel feature
    /// normalization. The block output (post-activation, normalized) is the
    /// capture point registered under `name`.
    fn conv_relu(&mut self, name: &str, cout: usize, stride: usize) -> &mut Self {
        let conv = he_conv(self.rng, self.channels, cout, 3, stride, 1);
        self.ops.push(Op::Conv(conv));
        self.ops.push(Op::Center);
        self.ops.push(Op::Relu);
        self.ops.push(Op::PixelNorm);
        self.captures.push((name.to_string(), self.ops.len() - 1));
        self.channels = cout;
        self
    }

    fn upsample(&mut self, factor: usize) -> &mut Self {
        self.ops.push(Op::Upsample(factor));
        self
    }

    /// 1×1 classifier head (no activation, no capture).
    fn head(&mut self, num_classes: usize) -> &mut Self {
        let conv = he_conv(self.rng, self.channels, num_classes, 1, 1, 0);
        self.ops.push(Op::Conv(conv));
        self.channels = num_classes;
        self
    }
}

fn plan_arch(arch_id: &str, num_classes: usize, rng: &mut ChaCha8Rng) -> Option<ArchPlan> {
    match arch_id {
        "toy-cnn-a" => {
            let mut b = ArchBuilder::new(rng, 3);
            b.conv_relu("enc1", 16, 1)
                .conv_relu("enc2", 24, 2)
                .conv_relu("enc3", 32, 2)
                .upsample(2)
                .conv_relu("dec1", 20, 1)
                .head(num_classes)
                .upsample(2);
            Some(ArchPlan {
                ops: b.ops,
                captures: b.captures,
                recommended: "enc3".into(),
            })
        }
        "toy-cnn-b" => {
            let mut b = ArchBuilder::new(rng, 3);
            b.conv_relu("enc1", 12, 1)
                .conv_relu("enc2", 18, 2)
                .conv_relu("enc3", 28, 2)
                .conv_relu("enc4", 40, 2)
                .upsample(2)
                .conv_relu("dec1", 28, 1)
                .upsample(2)
                .conv_relu("dec2", 18, 1)
                .head(num_classes)
                .upsample(2);
            Some(ArchPlan {
                ops: b.ops,
                captures: b.captures,
                recommended: "enc3".into(),
            })
        }
        _ => None,
    }
}

/// Deepest cumulative downsample factor along the op sequence.
fn required_divisor(ops: &[Op]) -> usize {
    let mut current = 1usize;
    let mut deepest = 1usize;
    for op in ops {
        match op {
            Op::Conv(c) => {
                current *= c.stride;
                deepest = deepest.max(current);
            }
            Op::Upsample(f) => {
                debug_assert_eq!(current % f, 0, "upsample past input resolution");
                current /= f;
            }
            Op::Relu | Op::Center | Op::PixelNorm => {}
        }
    }
    deepest
}

impl SeqCnn {
    /// Builds a bundled architecture with seeded He initialization.
    pub fn init(arch_id: &str, num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_arch(arch_id, num_classes, &mut rng).ok_or_else(|| Error::UnknownModel {
            id: arch_id.to_string(),
            known: super::registry::bundled_ids(),
        })?;
        Ok(Self::assemble(
            arch_id.to_string(),
            num_classes,
            plan.ops,
            plan.captures,
            plan.recommended,
            None,
        ))
    }

    fn assemble(
        arch_id: String,
        num_classes: usize,
        ops: Vec<Op>,
        captures: Vec<(String, usize)>,
        recommended: String,
        weights_checksum: Option<String>,
    ) -> Self {
        let divisor = required_divisor(&ops);
        let meta = AdapterMeta {
            model_id: arch_id,
            num_classes,
            input: InputSpec {
                height: NATURAL_INPUT.0,
                width: NATURAL_INPUT.1,
                channels: 3,
                preprocessing: "pixels in [0,1], normalized per channel as (x - 0.5) / 0.5".into(),
            },
            layers: captures.iter().map(|(n, _)| n.clone()).collect(),
            recommended_layer: Some(recommended),
            weights_checksum,
        };
        Self {
            ops,
            captures,
            mean: MEAN,
            std: STD,
            divisor,
            meta,
        }
    }

    /// Loads a checkpoint; when `expected_arch` is given, the file must
    /// carry the same architecture id.
    pub fn load(path: &Path, expected_arch: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let file: WeightsFile = serde_json::from_slice(&bytes)?;
        if file.format != WEIGHTS_FORMAT {
            return Err(Error::Adapter(format!(
                "unsupported weights format '{}' (expected '{WEIGHTS_FORMAT}')",
                file.format
            )));
        }
        if let Some(expected) = expected_arch {
            if file.arch_id != expected {
                return Err(Error::WeightsMismatch {
                    expected: expected.to_string(),
                    found: file.arch_id,
                });
            }
        }
        let checksum = sha256_hex(&bytes);
        let mut model = Self::assemble(
            file.arch_id,
            file.num_classes,
            file.ops,
            file.captures,
            file.recommended_layer,
            Some(checksum),
        );
        model.mean = file.mean;
        model.std = file.std;
        Ok(model)
    }

    /// Serializes the checkpoint and returns its SHA-256 checksum.
    pub fn save(&mut self, path: &Path) -> Result<String> {
        let file = WeightsFile {
            format: WEIGHTS_FORMAT.to_string(),
            arch_id: self.meta.model_id.clone(),
            num_classes: self.meta.num_classes,
            input: (
                self.meta.input.height,
                self.meta.input.width,
                self.meta.input.channels,
            ),
            mean: self.mean,
            std: self.std,
            captures: self.captures.clone(),
            recommended_layer: self
                .meta
                .recommended_layer
                .clone()
                .unwrap_or_else(|| "enc3".into()),
            ops: self.ops.clone(),
        };
        let bytes = serde_json::to_vec(&file)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, &bytes)?;
        let checksum = sha256_hex(&bytes);
        self.meta.weights_checksum = Some(checksum.clone());
        Ok(checksum)
    }

    pub fn arch_id(&self) -> &str {
        &self.meta.model_id
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn recommended_layer(&self) -> &str {
        self.meta.recommended_layer.as_deref().unwrap_or("enc3")
    }

    fn capture_index(&self, layer_id: &str) -> Result<usize> {
        self.captures
            .iter()
            .find(|(name, _)| name == layer_id)
            .map(|(_, idx)| *idx)
            .ok_or_else(|| unknown_layer_error(&self.meta.model_id, layer_id, &self.meta.layers))
    }

    /// Validates and normalizes an input image into channels-first layout.
    fn preprocess(&self, x: &ImageTensor) -> Result<Array3<f64>> {
        let (h, w, c) = x.dims();
        if c != self.meta.input.channels {
            return Err(Error::shape("model input channels", &[self.meta.input.channels], &[c]));
        }
        if h % self.divisor != 0 || w % self.divisor != 0 {
            return Err(Error::Adapter(format!(
                "input {h}×{w} not divisible by the model's downsample factor {}",
                self.divisor
            )));
        }
        let values = x.values();
        Ok(Array3::from_shape_fn((c, h, w), |(ci, y, xx)| {
            (values[(y, xx, ci)] - self.mean[ci]) / self.std[ci]
        }))
    }

    /// Runs ops `0..=upto` (all when `None`), returning every activation.
    /// `acts[0]` is the preprocessed input, `acts[i + 1]` the output of op `i`.
    fn forward_acts(&self, pre: Array3<f64>, upto: Option<usize>) -> Vec<Array3<f64>> {
        let last = upto.unwrap_or(self.ops.len() - 1);
        let mut acts = Vec::with_capacity(last + 2);
        acts.push(pre);
        for op in &self.ops[..=last] {
            let next = op.forward(acts.last().expect("non-empty acts"));
            acts.push(next);
        }
        acts
    }

    fn logits_hwk(&self, final_act: &Array3<f64>) -> Array3<f64> {
        let (k, h, w) = final_act.dim();
        Array3::from_shape_fn((h, w, k), |(y, x, c)| final_act[(c, y, x)])
    }

    fn feature_map_at(&self, acts: &[Array3<f64>], op_idx: usize) -> FeatureMap {
        let act = &acts[op_idx + 1];
        let (c, h, w) = act.dim();
        let values = act
            .clone()
            .into_shape_with_order((c, h * w))
            .expect("feature reshape");
        FeatureMap::new(values, h, w).expect("finite activations")
    }

    /// Backpropagates `d` from the output of `ops[from]` down to the raw
    /// input, returning an H×W×C pixel-space gradient.
    fn backprop_to_input(&self, acts: &[Array3<f64>], from: usize, mut d: Array3<f64>) -> Array3<f64> {
        for idx in (0..=from).rev() {
            d = self.ops[idx].backward_input(&acts[idx], &d);
        }
        let (c, h, w) = d.dim();
        Array3::from_shape_fn((h, w, c), |(y, x, ci)| d[(ci, y, x)] / self.std[ci])
    }

    // ---- training access (crate-internal) ----

    pub(crate) fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub(crate) fn ops_mut(&mut self) -> &mut [Op] {
        // Mutating weights invalidates any recorded checksum.
        self.meta.weights_checksum = None;
        &mut self.ops
    }

    /// Forward pass retaining conv patch matrices for parameter gradients.
    pub(crate) fn forward_train(
        &self,
        x: &ImageTensor,
    ) -> Result<(Vec<Array3<f64>>, Vec<Option<Array2<f64>>>, Array3<f64>)> {
        let pre = self.preprocess(x)?;
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        let mut cols = Vec::with_capacity(self.ops.len());
        acts.push(pre);
        for op in &self.ops {
            let input = acts.last().expect("non-empty");
            match op {
                Op::Conv(conv) => {
                    let (out, col) = conv.forward_cached(input);
                    acts.push(out);
                    cols.push(Some(col));
                }
                other => {
                    acts.push(other.forward(input));
                    cols.push(None);
                }
            }
        }
        let logits = self.logits_hwk(acts.last().expect("non-empty"));
        Ok((acts, cols, logits))
    }

    /// Backward pass from a logits-space gradient, returning per-conv
    /// parameter gradients in op order.
    pub(crate) fn backward_train(
        &self,
        acts: &[Array3<f64>],
        cols: &[Option<Array2<f64>>],
        d_logits_hwk: &Array3<f64>,
    ) -> Vec<(Array2<f64>, Array1<f64>)> {
        let (h, w, k) = d_logits_hwk.dim();
        let mut d = Array3::from_shape_fn((k, h, w), |(c, y, x)| d_logits_hwk[(y, x, c)]);
        let mut grads = Vec::new();
        for idx in (0..self.ops.len()).rev() {
            if let Op::Conv(conv) = &self.ops[idx] {
                let col = cols[idx].as_ref().expect("conv caches its patch matrix");
                grads.push(conv.param_grads(col, &d));
            }
            d = self.ops[idx].backward_input(&acts[idx], &d);
        }
        grads.reverse();
        grads
    }
}

impl ModelAdapter for SeqCnn {
    fn meta(&self) -> &AdapterMeta {
        &self.meta
    }

    fn forward(&self, x: &ImageTensor) -> Result<Array3<f64>> {
        let pre = self.preprocess(x)?;
        let acts = self.forward_acts(pre, None);
        Ok(self.logits_hwk(acts.last().expect("non-empty")))
    }

    fn forward_with_features(
        &self,
        x: &ImageTensor,
        layer_id: &str,
    ) -> Result<(Array3<f64>, FeatureMap)> {
        let capture_idx = self.capture_index(layer_id)?;
        let pre = self.preprocess(x)?;
        let acts = self.forward_acts(pre, None);
        let features = self.feature_map_at(&acts, capture_idx);
        Ok((self.logits_hwk(acts.last().expect("non-empty")), features))
    }

    fn input_gradient(
        &self,
        x: &ImageTensor,
        loss: &mut dyn ActivationLoss,
    ) -> Result<InputGradient> {
        let pre = self.preprocess(x)?;
        let target = loss.target_layer().map(str::to_owned);
        let (acts, from) = match &target {
            // A feature objective only needs the forward pass up to its layer.
            Some(layer) => {
                let idx = self.capture_index(layer)?;
                (self.forward_acts(pre, Some(idx)), idx)
            }
            None => (self.forward_acts(pre, None), self.ops.len() - 1),
        };

        let (value, d) = if let Some(_layer) = &target {
            let features = self.feature_map_at(&acts, from);
            let (value, grad) = loss.eval(Activation::Features(&features))?;
            let g = match grad {
                ActivationGrad::Features(g) => g,
                ActivationGrad::Logits(_) => {
                    return Err(Error::Adapter(
                        "loss targeted a layer but returned a logits gradient".into(),
                    ))
                }
            };
            let (fh, fw) = features.spatial();
            let c = features.channels();
            if g.dim() != (c, fh * fw) {
                return Err(Error::shape(
                    "feature gradient",
                    &[c, fh * fw],
                    &[g.dim().0, g.dim().1],
                ));
            }
            (value, g.into_shape_with_order((c, fh, fw)).expect("grad reshape"))
        } else {
            let logits = self.logits_hwk(acts.last().expect("non-empty"));
            let (value, grad) = loss.eval(Activation::Logits(&logits))?;
            let g = match grad {
                ActivationGrad::Logits(g) => g,
                ActivationGrad::Features(_) => {
                    return Err(Error::Adapter(
                        "loss targeted logits but returned a feature gradient".into(),
                    ))
                }
            };
            if g.dim() != logits.dim() {
                return Err(Error::shape(
                    "logits gradient",
                    &[logits.dim().0, logits.dim().1, logits.dim().2],
                    &[g.dim().0, g.dim().1, g.dim().2],
                ));
            }
            let (h, w, k) = g.dim();
            (
                value,
                Array3::from_shape_fn((k, h, w), |(c, y, xx)| g[(y, xx, c)]),
            )
        };

        if !value.is_finite() {
            return Err(Error::Numeric {
                context: format!("scalar loss on model '{}'", self.meta.model_id),
            });
        }
        let grad = self.backprop_to_input(&acts, from, d);
        Ok(InputGradient { value, grad })
    }

    fn clone_adapter(&self) -> Box<dyn ModelAdapter> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::loss::{ConstantLoss, LogitSum};
    use crate::adapter::{predict, ModelAdapter};
    use ndarray::Array3 as A3;

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(A3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn toy_a_shapes_and_capture() {
        let model = SeqCnn::init("toy-cnn-a", 5, 0).unwrap();
        let x = image(64, 64, 1);
        let (logits, features) = model.forward_with_features(&x, "enc3").unwrap();
        assert_eq!(logits.dim(), (64, 64, 5));
        assert_eq!(features.spatial(), (16, 16));
        assert_eq!(features.pixels(), 256);
        assert_eq!(features.channels(), 32);
    }

    #[test]
    fn capture_is_transparent_and_deterministic() {
        let model = SeqCnn::init("toy-cnn-b", 5, 3).unwrap();
        let x = image(32, 32, 2);
        let plain = model.forward(&x).unwrap();
        let (captured, _) = model.forward_with_features(&x, "enc2").unwrap();
        assert_eq!(plain, captured);
        let again = model.forward(&x).unwrap();
        assert_eq!(plain, again);
    }

    #[test]
    fn unknown_layer_lists_available() {
        let model = SeqCnn::init("toy-cnn-a", 5, 0).unwrap();
        let x = image(16, 16, 3);
        let err = model.forward_with_features(&x, "enc9").unwrap_err();
        match err {
            Error::UnknownLayer { available, .. } => {
                assert!(available.contains(&"enc3".to_string()));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let model = SeqCnn::init("toy-cnn-a", 4, 7).unwrap();
        let x = image(16, 16, 4);
        let g = model.input_gradient(&x, &mut ConstantLoss(0.25)).unwrap();
        assert_eq!(g.value, 0.25);
        assert!(g.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_sum_gradient_matches_finite_differences() {
        use rand::Rng;
        let model = SeqCnn::init("toy-cnn-a", 3, 11).unwrap();
        let x = image(8, 8, 5);
        let g = model.input_gradient(&x, &mut LogitSum).unwrap();
        assert_eq!(g.grad.dim(), (8, 8, 3));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for _ in 0..6 {
            let (py, px, pc) = (
                rng.gen_range(0..8usize),
                rng.gen_range(0..8usize),
                rng.gen_range(0..3usize),
            );
            let mut vp = x.values().clone();
            vp[(py, px, pc)] += h;
            let mut vm = x.values().clone();
            vm[(py, px, pc)] -= h;
            let fp = model
                .forward(&ImageTensor::from_unclamped(vp).unwrap())
                .unwrap()
                .sum();
            let fm = model
                .forward(&ImageTensor::from_unclamped(vm).unwrap())
                .unwrap()
                .sum();
            let fd = (fp - fm) / (2.0 * h);
            let scale = g.grad.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            assert!(
                (g.grad[(py, px, pc)] - fd).abs() / scale < 1e-5,
                "fd {fd} vs analytic {}",
                g.grad[(py, px, pc)]
            );
        }
    }

    #[test]
    fn save_load_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = SeqCnn::init("toy-cnn-b", 5, 21).unwrap();
        let checksum = model.save(&path).unwrap();
        let loaded = SeqCnn::load(&path, Some("toy-cnn-b")).unwrap();
        assert_eq!(loaded.meta().weights_checksum.as_deref(), Some(checksum.as_str()));
        let x = image(32, 32, 6);
        assert_eq!(model.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    }

    #[test]
    fn load_rejects_arch_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = SeqCnn::init("toy-cnn-a", 5, 0).unwrap();
        model.save(&path).unwrap();
        let err = SeqCnn::load(&path, Some("toy-cnn-b")).unwrap_err();
        assert!(matches!(err, Error::WeightsMismatch { .. }));
    }

    #[test]
    fn predict_produces_valid_labels() {
        let model = SeqCnn::init("toy-cnn-a", 4, 13).unwrap();
        let x = image(16, 16, 8);
        let labels = predict(&model, &x).unwrap();
        assert_eq!(labels.dims(), (16, 16));
        assert!(labels.values().iter().all(|&v| v < 4));
    }

    #[test]
    fn rejects_indivisible_input() {
        let model = SeqCnn::init("toy-cnn-b", 5, 0).unwrap();
        let x = image(20, 20, 9); // 20 % 8 != 0
        assert!(model.forward(&x).is_err());
    }
}
