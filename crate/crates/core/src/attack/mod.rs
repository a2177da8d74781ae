//! Iterative attack engine: FGSM, PGD and the feature-similarity attack.
//!
//! The similarity kernels report similarities as positive quantities; this
//! engine owns the sign convention. Cross-entropy attacks ascend their
//! objective, the feature-similarity attack descends its similarity
//! objective. All iterates are projected onto the L∞ ε-ball of the clean
//! image and (by default) clamped to the valid pixel range.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::loss::{CrossEntropyLoss, FeatureObjective};
use crate::adapter::ModelAdapter;
use crate::error::{Error, Result};
use crate::featsim::{LossWeights, SimilarityParams, DEFAULT_TAU};
use crate::tensor::{ImageTensor, LabelMap};
use crate::util::sign;

/// Default L∞ budget (8/255).
pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;
/// Default step size (2/255).
pub const DEFAULT_ALPHA: f64 = 2.0 / 255.0;
/// Default iteration budget.
pub const DEFAULT_ITERATIONS: usize = 20;

/// How the two similarity terms are blended per iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// λ_t = t/T: internal term early, external term late.
    Dynamic,
    /// External similarity only.
    ExOnly,
    /// Internal similarity only.
    InOnly,
    /// `L_ex + c·L_in` with a constant coefficient.
    ExPlusScaledIn(f64),
}

impl LossMode {
    /// Blend weights for iteration `t` of `total`.
    pub fn weights(&self, t: usize, total: usize) -> Result<(LossWeights, Option<f64>)> {
        match self {
            LossMode::Dynamic => {
                let lambda = crate::featsim::lambda_schedule(t, total)?;
                Ok((
                    LossWeights {
                        external: lambda,
                        internal: 1.0 - lambda,
                    },
                    Some(lambda),
                ))
            }
            LossMode::ExOnly => Ok((
                LossWeights {
                    external: 1.0,
                    internal: 0.0,
                },
                Some(1.0),
            )),
            LossMode::InOnly => Ok((
                LossWeights {
                    external: 0.0,
                    internal: 1.0,
                },
                Some(0.0),
            )),
            LossMode::ExPlusScaledIn(c) => Ok((
                LossWeights {
                    external: 1.0,
                    internal: *c,
                },
                None,
            )),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossMode::Dynamic => write!(f, "dynamic"),
            LossMode::ExOnly => write!(f, "ex_only"),
            LossMode::InOnly => write!(f, "in_only"),
            LossMode::ExPlusScaledIn(c) => write!(f, "const:{c}"),
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(LossMode::Dynamic),
            "ex_only" => Ok(LossMode::ExOnly),
            "in_only" => Ok(LossMode::InOnly),
            other => {
                if let Some(c) = other.strip_prefix("const:") {
                    let c: f64 = c.parse().map_err(|_| {
                        Error::Config(format!("invalid loss mode coefficient in '{other}'"))
                    })?;
                    if !c.is_finite() {
                        return Err(Error::Config("loss mode coefficient must be finite".into()));
                    }
                    Ok(LossMode::ExPlusScaledIn(c))
                } else {
                    Err(Error::Config(format!(
                        "unknown loss mode '{other}' (expected dynamic, ex_only, in_only or const:<c>)"
                    )))
                }
            }
        }
    }
}

impl Serialize for LossMode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LossMode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Attack hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L∞ budget in raw pixel units.
    pub epsilon: f64,
    /// Step size in raw pixel units.
    pub alpha: f64,
    /// Iteration budget T.
    pub iterations: usize,
    /// Mask threshold for the internal similarity term.
    pub tau: f64,
    /// Capture layer; `None` uses the source model's recommended layer.
    pub layer: Option<String>,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Clamp iterates to the valid pixel range after ε-projection.
    pub pixel_clamp: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            iterations: DEFAULT_ITERATIONS,
            tau: DEFAULT_TAU,
            layer: None,
            seed: 0,
            loss_mode: LossMode::Dynamic,
            pixel_clamp: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        // Steps larger than the ball diameter are pointless; an ε = 0 run is
        // the degenerate no-op attack and any step collapses back to x.
        if self.epsilon > 0.0 && self.alpha > 2.0 * self.epsilon {
            return Err(Error::Config(format!(
                "alpha {} exceeds the ball diameter 2ε = {}",
                self.alpha,
                2.0 * self.epsilon
            )));
        }
        if !self.tau.is_finite() || self.tau >= 1.0 {
            return Err(Error::Config(format!(
                "tau must be finite and < 1, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// One attack iteration as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub t: usize,
    /// Schedule value λ_t (blend modes without a schedule record `None`).
    pub lambda: Option<f64>,
    pub w_ex: f64,
    pub w_in: f64,
    pub l_ex: Option<f64>,
    pub l_in: Option<f64>,
    /// Objective value at the pre-update iterate.
    pub combined: f64,
    /// max|x_adv − x| after this iteration's projection.
    pub linf: f64,
    pub pixel_min: f64,
    pub pixel_max: f64,
}

/// Full per-image attack record: per-iteration diagnostics plus the final
/// adversarial image.
#[derive(Debug, Clone)]
pub struct AttackTrace {
    pub attack: String,
    pub model_id: String,
    pub seed: u64,
    pub epsilon: f64,
    pub records: Vec<IterRecord>,
    pub warnings: Vec<String>,
    pub adversarial: ImageTensor,
}

impl AttackTrace {
    /// Trace metadata as JSON (the image itself is written separately).
    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "attack": self.attack,
            "model_id": self.model_id,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "records": self.records,
            "warnings": self.warnings,
        })
    }
}

/// Adds elementwise noise `U(−ε, ε)` and clamps to the valid pixel range.
pub fn random_init(x: &ImageTensor, epsilon: f64, seed: u64) -> ImageTensor {
    if epsilon == 0.0 {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = x
        .values()
        .mapv(|v| (v + rng.gen_range(-epsilon..epsilon)).clamp(0.0, 1.0));
    ImageTensor::new(noisy).expect("clamped values are valid")
}

/// Clips `x_adv` into `[x−ε, x+ε]`, then into `[0, 1]` when `pixel_clamp`
/// is set. Idempotent.
pub fn project_linf(
    x_adv: &ImageTensor,
    x: &ImageTensor,
    epsilon: f64,
    pixel_clamp: bool,
) -> Result<ImageTensor> {
    if x_adv.dims() != x.dims() {
        let (h, w, c) = x.dims();
        let (ah, aw, ac) = x_adv.dims();
        return Err(Error::shape("project_linf", &[h, w, c], &[ah, aw, ac]));
    }
    let mut out = x_adv.values().clone();
    out.zip_mut_with(x.values(), |adv, &clean| {
        *adv = adv.clamp(clean - epsilon, clean + epsilon);
        if pixel_clamp {
            *adv = adv.clamp(0.0, 1.0);
        }
    });
    if pixel_clamp {
        ImageTensor::new(out)
    } else {
        ImageTensor::from_unclamped(out)
    }
}

fn signed_step(x: &ImageTensor, grad: &Array3<f64>, step: f64) -> ImageTensor {
    let values = ndarray::Zip::from(x.values())
        .and(grad)
        .map_collect(|&v, &g| v + step * sign(g));
    ImageTensor::from_unclamped(values).expect("finite step")
}

fn record_for(
    t: usize,
    lambda: Option<f64>,
    weights: (f64, f64),
    l_ex: Option<f64>,
    l_in: Option<f64>,
    combined: f64,
    x_adv: &ImageTensor,
    x: &ImageTensor,
) -> IterRecord {
    let (pixel_min, pixel_max) = x_adv.value_range();
    IterRecord {
        t,
        lambda,
        w_ex: weights.0,
        w_in: weights.1,
        l_ex,
        l_in,
        combined,
        linf: x_adv.linf_distance(x),
        pixel_min,
        pixel_max,
    }
}

/// Single-step sign-gradient attack on pixel-wise cross-entropy:
/// `clamp(x + ε·sign(∇_x CE), 0, 1)`.
pub fn fgsm(
    model: &dyn ModelAdapter,
    x: &ImageTensor,
    labels: &LabelMap,
    epsilon: f64,
) -> Result<ImageTensor> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut loss = CrossEntropyLoss::new(labels);
    let g = model.input_gradient(x, &mut loss)?;
    let stepped = signed_step(x, &g.grad, epsilon);
    project_linf(&stepped, x, epsilon, true)
}

/// Iterated sign-gradient ascent on cross-entropy with ε-ball projection
/// and a random start.
pub fn pgd(
    model: &dyn ModelAdapter,
    x: &ImageTensor,
    labels: &LabelMap,
    cfg: &AttackConfig,
) -> Result<AttackTrace> {
    cfg.validate()?;
    let mut x_adv = project_linf(
        &random_init(x, cfg.epsilon, cfg.seed),
        x,
        cfg.epsilon,
        cfg.pixel_clamp,
    )?;
    let mut records = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let mut loss = CrossEntropyLoss::new(labels);
        let g = model.input_gradient(&x_adv, &mut loss).map_err(|e| {
            attach_iteration_context(e, t)
        })?;
        // Ascend the cross-entropy objective.
        let stepped = signed_step(&x_adv, &g.grad, cfg.alpha);
        x_adv = project_linf(&stepped, x, cfg.epsilon, cfg.pixel_clamp)?;
        records.push(record_for(
            t,
            None,
            (0.0, 0.0),
            None,
            None,
            g.value,
            &x_adv,
            x,
        ));
    }
    Ok(AttackTrace {
        attack: "pgd".into(),
        model_id: model.meta().model_id.clone(),
        seed: cfg.seed,
        epsilon: cfg.epsilon,
        records,
        warnings: Vec::new(),
        adversarial: x_adv,
    })
}

/// The feature-similarity attack: clean features are captured once, then
/// every iteration descends the blended similarity objective evaluated at
/// the configured layer. Needs no ground-truth labels.
pub fn fspgd(model: &dyn ModelAdapter, x: &ImageTensor, cfg: &AttackConfig) -> Result<AttackTrace> {
    cfg.validate()?;
    let meta = model.meta();
    let layer = match &cfg.layer {
        Some(l) => l.clone(),
        None => meta
            .recommended_layer
            .clone()
            .ok_or_else(|| Error::Adapter(format!(
                "model '{}' has no recommended layer; set one explicitly",
                meta.model_id
            )))?,
    };

    // Clean features: computed once, outside the loop, gradient-free.
    let (_, clean_features) = model.forward_with_features(x, &layer)?;

    let mut objective = FeatureObjective::new(
        layer,
        clean_features,
        cfg.tau,
        LossWeights {
            external: 0.0,
            internal: 1.0,
        },
        SimilarityParams::default(),
    );

    let mut x_adv = project_linf(
        &random_init(x, cfg.epsilon, cfg.seed),
        x,
        cfg.epsilon,
        cfg.pixel_clamp,
    )?;
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut warnings = Vec::new();
    for t in 0..cfg.iterations {
        let (weights, lambda) = cfg.loss_mode.weights(t, cfg.iterations)?;
        objective.set_weights(weights);
        let g = model
            .input_gradient(&x_adv, &mut objective)
            .map_err(|e| attach_iteration_context(e, t))?;
        // Descend the similarity objective.
        let stepped = signed_step(&x_adv, &g.grad, -cfg.alpha);
        x_adv = project_linf(&stepped, x, cfg.epsilon, cfg.pixel_clamp)?;

        let breakdown = objective.last.expect("objective evaluated this iteration");
        if breakdown.mask_count == 0 && warnings.is_empty() {
            warnings.push(format!(
                "similarity mask is empty (K = 0) from iteration {t}; internal term contributes 0"
            ));
        }
        records.push(record_for(
            t,
            lambda,
            (weights.external, weights.internal),
            Some(breakdown.l_ex),
            Some(breakdown.l_in),
            breakdown.combined,
            &x_adv,
            x,
        ));
    }
    Ok(AttackTrace {
        attack: "fspgd".into(),
        model_id: meta.model_id.clone(),
        seed: cfg.seed,
        epsilon: cfg.epsilon,
        records,
        warnings,
        adversarial: x_adv,
    })
}

fn attach_iteration_context(e: Error, t: usize) -> Error {
    match e {
        Error::Numeric { context } => Error::Numeric {
            context: format!("{context} (attack iteration {t})"),
        },
        other => other,
    }
}

/// A named attack, pluggable into the transfer harness.
pub trait Attack: Send + Sync {
    fn name(&self) -> &str;
    fn needs_labels(&self) -> bool;
    /// Runs the attack on one image. `seed` overrides the configured seed so
    /// harnesses can derive per-image seeds.
    fn run(
        &self,
        model: &dyn ModelAdapter,
        x: &ImageTensor,
        labels: Option<&LabelMap>,
        seed: u64,
    ) -> Result<AttackTrace>;
}

/// Name + config pair, as it appears in run configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub name: String,
    #[serde(flatten)]
    pub config: AttackConfig,
}

impl AttackSpec {
    pub fn instantiate(&self) -> Result<Box<dyn Attack>> {
        self.config.validate()?;
        match self.name.as_str() {
            "fgsm" => Ok(Box::new(FgsmAttack {
                config: self.config.clone(),
            })),
            "pgd" => Ok(Box::new(PgdAttack {
                config: self.config.clone(),
            })),
            "fspgd" => Ok(Box::new(FspgdAttack {
                config: self.config.clone(),
            })),
            other => Err(Error::Config(format!(
                "unknown attack '{other}' (built in: fgsm, pgd, fspgd)"
            ))),
        }
    }
}

struct FgsmAttack {
    config: AttackConfig,
}

impl Attack for FgsmAttack {
    fn name(&self) -> &str {
        "fgsm"
    }

    fn needs_labels(&self) -> bool {
        true
    }

    fn run(
        &self,
        model: &dyn ModelAdapter,
        x: &ImageTensor,
        labels: Option<&LabelMap>,
        _seed: u64,
    ) -> Result<AttackTrace> {
        let labels = labels
            .ok_or_else(|| Error::Config("fgsm requires ground-truth labels".into()))?;
        let adversarial = fgsm(model, x, labels, self.config.epsilon)?;
        let record = record_for(0, None, (0.0, 0.0), None, None, f64::NAN, &adversarial, x);
        Ok(AttackTrace {
            attack: "fgsm".into(),
            model_id: model.meta().model_id.clone(),
            seed: 0,
            epsilon: self.config.epsilon,
            records: vec![IterRecord {
                combined: 0.0,
                ..record
            }],
            warnings: Vec::new(),
            adversarial,
        })
    }
}

struct PgdAttack {
    config: AttackConfig,
}

impl Attack for PgdAttack {
    fn name(&self) -> &str {
        "pgd"
    }

    fn needs_labels(&self) -> bool {
        true
    }

    fn run(
        &self,
        model: &dyn ModelAdapter,
        x: &ImageTensor,
        labels: Option<&LabelMap>,
        seed: u64,
    ) -> Result<AttackTrace> {
        let labels = labels
            .ok_or_else(|| Error::Config("pgd requires ground-truth labels".into()))?;
        let cfg = AttackConfig {
            seed,
            ..self.config.clone()
        };
        pgd(model, x, labels, &cfg)
    }
}

struct FspgdAttack {
    config: AttackConfig,
}

impl Attack for FspgdAttack {
    fn name(&self) -> &str {
        "fspgd"
    }

    fn needs_labels(&self) -> bool {
        false
    }

    fn run(
        &self,
        model: &dyn ModelAdapter,
        x: &ImageTensor,
        _labels: Option<&LabelMap>,
        seed: u64,
    ) -> Result<AttackTrace> {
        let cfg = AttackConfig {
            seed,
            ..self.config.clone()
        };
        fspgd(model, x, &cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::SeqCnn;
    use ndarray::Array3 as A3;

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(A3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    fn labels(h: usize, w: usize, classes: u8) -> LabelMap {
        LabelMap::new(
            ndarray::Array2::from_shape_fn((h, w), |(y, x)| ((y + x) as u8) % classes),
            classes as usize,
            255,
        )
        .unwrap()
    }

    #[test]
    fn random_init_zero_epsilon_is_identity() {
        let x = image(8, 8, 0);
        let init = random_init(&x, 0.0, 123);
        assert_eq!(init, x);
    }

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let x = image(8, 8, 1);
        let eps = DEFAULT_EPSILON;
        let a = random_init(&x, eps, 7);
        let b = random_init(&x, eps, 7);
        assert_eq!(a, b);
        assert!(a.linf_distance(&x) <= eps);
        let c = random_init(&x, eps, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn projection_cases() {
        let x = image(4, 4, 2);
        let eps = 0.1;
        // Already inside: unchanged.
        let inside = random_init(&x, eps / 2.0, 3);
        let projected = project_linf(&inside, &x, eps, true).unwrap();
        assert_eq!(projected, inside);
        // Far outside: hard clip to x + ε.
        let far = ImageTensor::from_unclamped(x.values().mapv(|v| v + 2.0 * eps)).unwrap();
        let clipped = project_linf(&far, &x, eps, false).unwrap();
        for (c, v) in clipped.values().iter().zip(x.values().iter()) {
            assert!((c - (v + eps)).abs() < 1e-12);
        }
        // Range clamp dominates at the top of the pixel range.
        let ones = ImageTensor::new(A3::ones((2, 2, 3))).unwrap();
        let above = ImageTensor::from_unclamped(ones.values().mapv(|v| v + eps / 2.0)).unwrap();
        let clamped = project_linf(&above, &ones, eps, true).unwrap();
        assert!(clamped.values().iter().all(|&v| v == 1.0));
        // Idempotent.
        let again = project_linf(&clipped, &x, eps, false).unwrap();
        assert_eq!(again, clipped);
    }

    #[test]
    fn projection_shape_mismatch_errors() {
        let x = image(4, 4, 2);
        let y = image(8, 8, 2);
        assert!(project_linf(&y, &x, 0.1, true).is_err());
    }

    #[test]
    fn fgsm_zero_epsilon_returns_input() {
        let model = SeqCnn::init("toy-cnn-a", 3, 0).unwrap();
        let x = image(8, 8, 3);
        let adv = fgsm(&model, &x, &labels(8, 8, 3), 0.0).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn fgsm_zero_gradient_returns_input() {
        // Zeroed weights make the logits constant, so sign(0) = 0 everywhere.
        let mut model = SeqCnn::init("toy-cnn-a", 3, 0).unwrap();
        for op in model.ops_mut() {
            if let crate::adapter::layers::Op::Conv(c) = op {
                c.weight.fill(0.0);
                c.bias.fill(0.1);
            }
        }
        let x = image(8, 8, 4);
        let adv = fgsm(&model, &x, &labels(8, 8, 3), DEFAULT_EPSILON).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn pgd_zero_iterations_returns_projected_init() {
        let model = SeqCnn::init("toy-cnn-a", 3, 1).unwrap();
        let x = image(8, 8, 5);
        let cfg = AttackConfig {
            iterations: 0,
            seed: 11,
            ..Default::default()
        };
        let trace = pgd(&model, &x, &labels(8, 8, 3), &cfg).unwrap();
        assert!(trace.records.is_empty());
        let expected = project_linf(&random_init(&x, cfg.epsilon, 11), &x, cfg.epsilon, true).unwrap();
        assert_eq!(trace.adversarial, expected);
    }

    #[test]
    fn pgd_iterates_stay_in_ball_and_range() {
        let model = SeqCnn::init("toy-cnn-a", 3, 2).unwrap();
        let x = image(8, 8, 6);
        let cfg = AttackConfig {
            iterations: 6,
            ..Default::default()
        };
        let trace = pgd(&model, &x, &labels(8, 8, 3), &cfg).unwrap();
        assert_eq!(trace.records.len(), 6);
        for r in &trace.records {
            assert!(r.linf <= cfg.epsilon + 1e-6);
            assert!(r.pixel_min >= 0.0 && r.pixel_max <= 1.0);
        }
    }

    #[test]
    fn fspgd_lambda_schedule_is_exact() {
        let model = SeqCnn::init("toy-cnn-a", 3, 3).unwrap();
        let x = image(8, 8, 7);
        let cfg = AttackConfig {
            iterations: 5,
            alpha: 0.01,
            ..Default::default()
        };
        let trace = fspgd(&model, &x, &cfg).unwrap();
        let lambdas: Vec<f64> = trace.records.iter().map(|r| r.lambda.unwrap()).collect();
        assert_eq!(lambdas, vec![0.0, 0.2, 0.4, 0.6, 0.8]);
        for r in &trace.records {
            assert!(r.linf <= cfg.epsilon + 1e-6);
            assert!(r.l_ex.is_some() && r.l_in.is_some());
        }
    }

    #[test]
    fn fspgd_is_deterministic_given_seed() {
        let model = SeqCnn::init("toy-cnn-b", 3, 4).unwrap();
        let x = image(16, 16, 8);
        let cfg = AttackConfig {
            iterations: 4,
            seed: 99,
            ..Default::default()
        };
        let a = fspgd(&model, &x, &cfg).unwrap();
        let b = fspgd(&model, &x, &cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.adversarial, b.adversarial);
    }

    #[test]
    fn fspgd_smaller_budget_is_feasible_for_larger() {
        let model = SeqCnn::init("toy-cnn-a", 3, 5).unwrap();
        let x = image(8, 8, 9);
        let eps = DEFAULT_EPSILON;
        let cfg = AttackConfig {
            iterations: 4,
            epsilon: eps / 2.0,
            alpha: eps / 4.0,
            seed: 1,
            ..Default::default()
        };
        let trace = fspgd(&model, &x, &cfg).unwrap();
        assert!(trace.adversarial.linf_distance(&x) <= eps + 1e-12);
    }

    #[test]
    fn fspgd_unknown_layer_errors() {
        let model = SeqCnn::init("toy-cnn-a", 3, 6).unwrap();
        let x = image(8, 8, 10);
        let cfg = AttackConfig {
            layer: Some("missing".into()),
            ..Default::default()
        };
        assert!(matches!(
            fspgd(&model, &x, &cfg),
            Err(Error::UnknownLayer { .. })
        ));
    }

    #[test]
    fn config_validation_rules() {
        let ok = AttackConfig::default();
        assert!(ok.validate().is_ok());
        let oversized_step = AttackConfig {
            alpha: 3.0 * DEFAULT_EPSILON,
            ..Default::default()
        };
        assert!(oversized_step.validate().is_err());
        // ε = 0 is the degenerate no-op attack; any α is accepted because
        // every step projects back onto x.
        let zero_eps = AttackConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(zero_eps.validate().is_ok());
        let bad_tau = AttackConfig {
            tau: 1.0,
            ..Default::default()
        };
        assert!(bad_tau.validate().is_err());
    }

    #[test]
    fn loss_mode_round_trips_through_strings() {
        for mode in [
            LossMode::Dynamic,
            LossMode::ExOnly,
            LossMode::InOnly,
            LossMode::ExPlusScaledIn(0.5),
        ] {
            let s = mode.to_string();
            let parsed: LossMode = s.parse().unwrap();
            assert_eq!(parsed, mode);
        }
        assert!("bogus".parse::<LossMode>().is_err());
    }

    #[test]
    fn attack_spec_instantiates_builtins() {
        for name in ["fgsm", "pgd", "fspgd"] {
            let spec = AttackSpec {
                name: name.into(),
                config: AttackConfig::default(),
            };
            let attack = spec.instantiate().unwrap();
            assert_eq!(attack.name(), name);
        }
        let unknown = AttackSpec {
            name: "cospgd".into(),
            config: AttackConfig::default(),
        };
        assert!(unknown.instantiate().is_err());
    }
}
