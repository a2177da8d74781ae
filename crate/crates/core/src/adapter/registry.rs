//! Model and layer registries.
//!
//! Two desk-scale architectures are bundled and runnable out of the box.
//! Full-scale segmentation architectures are registered for protocol
//! compatibility: their entries carry the ablation-selected attack layers,
//! and they load through the same interface when the user supplies a
//! checkpoint in the sequential surrogate format (see the full-scale
//! runbook shipped with the repository).

use std::path::Path;

use crate::error::{Error, Result};
use crate::util::derive_seed;

use super::{ModelAdapter, SeqCnn};

/// Class count of the bundled synthetic benchmark (4 shape classes plus
/// background); used when a bundled model is loaded without weights.
pub const DESK_NUM_CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ModelKind {
    /// Ships with the crate; random initialization allowed.
    Bundled,
    /// Requires user-supplied weights.
    FullScale,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ModelInfo {
    pub id: String,
    pub kind: ModelKind,
    pub description: String,
    pub recommended_layer: Option<String>,
    pub requires_weights: bool,
}

/// One row of the attack-layer registry.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerRegistryEntry {
    pub architecture: String,
    pub layer_id: String,
    pub recommended: bool,
    pub note: String,
}

struct ModelRow {
    id: &'static str,
    kind: ModelKind,
    description: &'static str,
    recommended_layer: &'static str,
}

const MODELS: &[ModelRow] = &[
    ModelRow {
        id: "toy-cnn-a",
        kind: ModelKind::Bundled,
        description: "bundled 5-conv encoder-decoder, stride-4 bottleneck",
        recommended_layer: "enc3",
    },
    ModelRow {
        id: "toy-cnn-b",
        kind: ModelKind::Bundled,
        description: "bundled 7-conv encoder-decoder, different widths, extra stride-8 downsample",
        recommended_layer: "enc3",
    },
    ModelRow {
        id: "pspnet-resnet50",
        kind: ModelKind::FullScale,
        description: "PSPNet with ResNet-50 encoder (weights required)",
        recommended_layer: "3_2",
    },
    ModelRow {
        id: "pspnet-resnet101",
        kind: ModelKind::FullScale,
        description: "PSPNet with ResNet-101 encoder (weights required)",
        recommended_layer: "3_10",
    },
    ModelRow {
        id: "deeplabv3-resnet50",
        kind: ModelKind::FullScale,
        description: "DeepLabv3 with ResNet-50 encoder (weights required)",
        recommended_layer: "3_2",
    },
    ModelRow {
        id: "deeplabv3-resnet101",
        kind: ModelKind::FullScale,
        description: "DeepLabv3 with ResNet-101 encoder (weights required)",
        recommended_layer: "3_10",
    },
    ModelRow {
        id: "segformer-mitb0",
        kind: ModelKind::FullScale,
        description: "SegFormer with MiT-B0 encoder (weights required)",
        recommended_layer: "block-1-0",
    },
    ModelRow {
        id: "mask2former-swins",
        kind: ModelKind::FullScale,
        description: "Mask2Former with Swin-S encoder (weights required)",
        recommended_layer: "layers-2-blocks-0",
    },
    ModelRow {
        id: "fcn-vgg16",
        kind: ModelKind::FullScale,
        description: "FCN with VGG-16 encoder, evaluation target (weights required)",
        recommended_layer: "",
    },
];

pub(crate) fn bundled_ids() -> Vec<String> {
    MODELS
        .iter()
        .filter(|m| m.kind == ModelKind::Bundled)
        .map(|m| m.id.to_string())
        .collect()
}

fn all_ids() -> Vec<String> {
    MODELS.iter().map(|m| m.id.to_string()).collect()
}

/// Lists every registered model.
pub fn list_models() -> Vec<ModelInfo> {
    MODELS
        .iter()
        .map(|m| ModelInfo {
            id: m.id.to_string(),
            kind: m.kind,
            description: m.description.to_string(),
            recommended_layer: (!m.recommended_layer.is_empty())
                .then(|| m.recommended_layer.to_string()),
            requires_weights: m.kind == ModelKind::FullScale,
        })
        .collect()
}

/// Builds a bundled architecture with seeded random initialization.
pub fn init_model(id: &str, num_classes: usize, seed: u64) -> Result<SeqCnn> {
    let row = MODELS
        .iter()
        .find(|m| m.id == id)
        .ok_or_else(|| Error::UnknownModel {
            id: id.to_string(),
            known: all_ids(),
        })?;
    if row.kind != ModelKind::Bundled {
        return Err(Error::WeightsRequired {
            id: id.to_string(),
            hint: "only bundled models support random initialization".into(),
        });
    }
    SeqCnn::init(id, num_classes, seed)
}

/// Resolves a model id into a ready adapter.
///
/// Bundled models fall back to deterministic random initialization when no
/// weights path is given; full-scale models require one.
pub fn load_model(id: &str, weights: Option<&Path>) -> Result<Box<dyn ModelAdapter>> {
    let row = MODELS
        .iter()
        .find(|m| m.id == id)
        .ok_or_else(|| Error::UnknownModel {
            id: id.to_string(),
            known: all_ids(),
        })?;
    match (row.kind, weights) {
        (_, Some(path)) => {
            let model = SeqCnn::load(path, Some(id))?;
            Ok(Box::new(model))
        }
        (ModelKind::Bundled, None) => {
            let seed = derive_seed(0, "model-init", id_hash(id));
            Ok(Box::new(SeqCnn::init(id, DESK_NUM_CLASSES, seed)?))
        }
        (ModelKind::FullScale, None) => Err(Error::WeightsRequired {
            id: id.to_string(),
            hint: "supply --weights with a checkpoint in the sequential surrogate format; see docs/full_scale_runbook.md".into(),
        }),
    }
}

fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0u64, |acc, b| {
        acc.wrapping_mul(131).wrapping_add(u64::from(b))
    })
}

/// The attack-layer registry: per architecture, the capture points and the
/// ablation-selected recommendation.
pub fn layer_registry() -> Vec<LayerRegistryEntry> {
    let mut entries = Vec::new();
    for (arch, layers, recommended, note) in [
        (
            "toy-cnn-a",
            vec!["enc1", "enc2", "enc3", "dec1"],
            "enc3",
            "mid-encoder capture, stride 4; post-activation",
        ),
        (
            "toy-cnn-b",
            vec!["enc1", "enc2", "enc3", "enc4", "dec1", "dec2"],
            "enc3",
            "mid-encoder capture, stride 4; post-activation",
        ),
    ] {
        for layer in layers {
            entries.push(LayerRegistryEntry {
                architecture: arch.to_string(),
                layer_id: layer.to_string(),
                recommended: layer == recommended,
                note: note.to_string(),
            });
        }
    }
    for (arch, layer, note) in [
        (
            "pspnet-resnet50",
            "3_2",
            "conv3_x layer 2 of ResNet-50; mid-encoder layers transfer best",
        ),
        (
            "deeplabv3-resnet50",
            "3_2",
            "conv3_x layer 2 of ResNet-50; mid-encoder layers transfer best",
        ),
        (
            "pspnet-resnet101",
            "3_10",
            "conv3_x layer 10 of ResNet-101; mid-encoder layers transfer best",
        ),
        (
            "deeplabv3-resnet101",
            "3_10",
            "conv3_x layer 10 of ResNet-101; mid-encoder layers transfer best",
        ),
        (
            "segformer-mitb0",
            "block-1-0",
            "layer 1 of transformer block 1 in MiT-B0",
        ),
        (
            "mask2former-swins",
            "layers-2-blocks-0",
            "layer 1 of stage 2 in Swin-S",
        ),
    ] {
        entries.push(LayerRegistryEntry {
            architecture: arch.to_string(),
            layer_id: layer.to_string(),
            recommended: true,
            note: note.to_string(),
        });
    }
    entries
}
