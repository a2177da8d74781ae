//! Training for the bundled desk-scale models: Adam on pixel-wise
//! cross-entropy, deterministic given the seed.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::DatasetManifest;
use crate::adapter::layers::Op;
use crate::adapter::loss::CrossEntropyLoss;
use crate::adapter::{argmax_labels, init_model, Activation, ActivationGrad, ActivationLoss, SeqCnn};
use crate::error::{Error, Result};
use crate::eval::{confusion, miou};
use crate::tensor::{ImageTensor, LabelMap};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Amplitude of seeded uniform pixel noise added to training inputs.
    /// Differently seeded runs see different noise streams, so separately
    /// trained models diverge the way independently built models do.
    pub augment_noise: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
            augment_noise: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights_path: PathBuf,
    pub checksum: String,
    pub epochs: usize,
    pub final_loss: f64,
    /// Global mIoU on the training manifest after the last epoch.
    pub final_train_miou: f64,
}

struct AdamState {
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn ce_value_and_grad(
    logits: &ndarray::Array3<f64>,
    labels: &LabelMap,
) -> Result<(f64, ndarray::Array3<f64>)> {
    let mut loss = CrossEntropyLoss::new(labels);
    let (value, grad) = loss.eval(Activation::Logits(logits))?;
    match grad {
        ActivationGrad::Logits(g) => Ok((value, g)),
        ActivationGrad::Features(_) => unreachable!("cross-entropy returns a logits gradient"),
    }
}

/// Trains a bundled architecture on the manifest and writes the checkpoint
/// to `out_path`. With `epochs = 0` the checkpoint equals the seeded
/// initialization.
pub fn train_toy(
    arch_id: &str,
    manifest: &DatasetManifest,
    opts: &TrainOptions,
    out_path: &Path,
) -> Result<TrainReport> {
    if manifest.is_empty() {
        return Err(Error::Train("training manifest is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be nonzero".into()));
    }
    let mut model = init_model(arch_id, manifest.num_classes, opts.seed)?;

    // Desk-scale datasets fit comfortably in memory.
    let dataset: Vec<(ImageTensor, LabelMap)> = (0..manifest.len())
        .map(|i| manifest.load_pair(i))
        .collect::<Result<_>>()?;

    let conv_indices: Vec<usize> = model
        .ops()
        .iter()
        .enumerate()
        .filter_map(|(i, op)| matches!(op, Op::Conv(_)).then_some(i))
        .collect();
    let mut adam: Vec<AdamState> = conv_indices
        .iter()
        .map(|&i| {
            let Op::Conv(c) = &model.ops()[i] else {
                unreachable!()
            };
            AdamState {
                m_w: Array2::zeros(c.weight.dim()),
                v_w: Array2::zeros(c.weight.dim()),
                m_b: Array1::zeros(c.bias.dim()),
                v_b: Array1::zeros(c.bias.dim()),
            }
        })
        .collect();
    let mut adam_t = 0usize;
    let mut last_loss = f64::NAN;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "train-epoch", epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            // Per-image loss and parameter gradients, reduced in index order
            // so results do not depend on the worker pool.
            let per_image: Vec<Result<(f64, Vec<(Array2<f64>, Array1<f64>)>)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let (image, labels) = &dataset[idx];
                    let image = if opts.augment_noise > 0.0 {
                        let tag = (epoch * dataset.len() + idx) as u64;
                        augment(image, opts.augment_noise, derive_seed(opts.seed, "augment", tag))
                    } else {
                        image.clone()
                    };
                    let (acts, cols, logits) = model.forward_train(&image)?;
                    let (value, d_logits) = ce_value_and_grad(&logits, labels)?;
                    let grads = model.backward_train(&acts, &cols, &d_logits);
                    Ok((value, grads))
                })
                .collect();

            let mut batch_loss = 0.0;
            let mut batch_grads: Option<Vec<(Array2<f64>, Array1<f64>)>> = None;
            for item in per_image {
                let (value, grads) = item?;
                batch_loss += value;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            a.0 += &g.0;
                            a.1 += &g.1;
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Train(format!(
                    "loss diverged at epoch {epoch} (value {batch_loss})"
                )));
            }
            epoch_loss += batch_loss;
            batches += 1;

            adam_t += 1;
            let bias1 = 1.0 - BETA1.powi(adam_t as i32);
            let bias2 = 1.0 - BETA2.powi(adam_t as i32);
            let grads = batch_grads.expect("non-empty batch");
            let ops = model.ops_mut();
            for ((state, &op_idx), (mut g_w, mut g_b)) in
                adam.iter_mut().zip(&conv_indices).zip(grads)
            {
                g_w.mapv_inplace(|v| v * scale);
                g_b.mapv_inplace(|v| v * scale);
                let Op::Conv(c) = &mut ops[op_idx] else {
                    unreachable!()
                };
                state.m_w.zip_mut_with(&g_w, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
                state.v_w.zip_mut_with(&g_w, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
                state.m_b.zip_mut_with(&g_b, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
                state.v_b.zip_mut_with(&g_b, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
                ndarray::Zip::from(&mut c.weight)
                    .and(&state.m_w)
                    .and(&state.v_w)
                    .for_each(|w, &m, &v| {
                        *w -= opts.learning_rate * (m / bias1) / ((v / bias2).sqrt() + ADAM_EPS);
                    });
                ndarray::Zip::from(&mut c.bias)
                    .and(&state.m_b)
                    .and(&state.v_b)
                    .for_each(|b, &m, &v| {
                        *b -= opts.learning_rate * (m / bias1) / ((v / bias2).sqrt() + ADAM_EPS);
                    });
            }
        }
        last_loss = epoch_loss / batches.max(1) as f64;
    }

    let final_train_miou = evaluate_miou(&model, &dataset)?;
    let checksum = model.save(out_path)?;
    Ok(TrainReport {
        weights_path: out_path.to_path_buf(),
        checksum,
        epochs: opts.epochs,
        final_loss: last_loss,
        final_train_miou,
    })
}

fn augment(image: &ImageTensor, amplitude: f64, seed: u64) -> ImageTensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = image
        .values()
        .mapv(|v| (v + rng.gen_range(-amplitude..=amplitude)).clamp(0.0, 1.0));
    ImageTensor::new(values).expect("clamped")
}

fn evaluate_miou(model: &SeqCnn, dataset: &[(ImageTensor, LabelMap)]) -> Result<f64> {
    let num_classes = model.num_classes();
    let confusions: Vec<Result<Array2<u64>>> = dataset
        .par_iter()
        .map(|(image, labels)| {
            let pred = argmax_labels(&crate::adapter::ModelAdapter::forward(model, image)?);
            confusion(&pred, labels, num_classes, labels.ignore_index())
        })
        .collect();
    let mut total = Array2::<u64>::zeros((num_classes, num_classes));
    for c in confusions {
        total += &c?;
    }
    Ok(miou(&total)?.miou)
}
