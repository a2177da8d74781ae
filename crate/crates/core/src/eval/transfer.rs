//! Source→target transfer matrices and ablation sweeps.
//!
//! For each (source, attack) row the adversarial images are generated once
//! over the dataset and evaluated on every column model; a clean-image row
//! comes first. Per-image seeds are derived from the root seed, so results
//! are independent of worker count.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{confusion, miou};
use crate::adapter::{argmax_labels, AdapterMeta, ModelAdapter};
use crate::attack::{AttackSpec, LossMode};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LabelMap};
use crate::util::{derive_seed, sha256_hex};

/// One evaluated cell: mIoU of a column model on this row's images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub column: String,
    pub miou: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    /// `None` for the clean-image row.
    pub source: Option<String>,
    pub attack: Option<String>,
    pub cells: Vec<TransferCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<TransferRow>,
    pub seed: u64,
    pub adapters: Vec<AdapterMeta>,
    pub config_echo: serde_json::Value,
}

impl TransferMatrix {
    pub fn cell(&self, source: &str, attack: &str, column: &str) -> Option<&TransferCell> {
        self.rows
            .iter()
            .find(|r| r.source.as_deref() == Some(source) && r.attack.as_deref() == Some(attack))
            .and_then(|r| r.cells.iter().find(|c| c.column == column))
    }

    pub fn clean_cell(&self, column: &str) -> Option<&TransferCell> {
        self.rows
            .iter()
            .find(|r| r.source.is_none())
            .and_then(|r| r.cells.iter().find(|c| c.column == column))
    }

    /// Plain-text table: clean row first, best (lowest) attack mIoU per
    /// column marked with `*`.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let label_width = 28;
        out.push_str(&format!("{:label_width$}", "row"));
        for col in &self.columns {
            out.push_str(&format!(" {col:>18}"));
        }
        out.push('\n');

        // Column minima over attack rows.
        let mut minima = vec![f64::INFINITY; self.columns.len()];
        for row in &self.rows {
            if row.source.is_none() {
                continue;
            }
            for (i, cell) in row.cells.iter().enumerate() {
                if let Some(m) = cell.miou {
                    minima[i] = minima[i].min(m);
                }
            }
        }

        for row in &self.rows {
            let label = match (&row.source, &row.attack) {
                (Some(s), Some(a)) => format!("{s} / {a}"),
                _ => "clean images".to_string(),
            };
            out.push_str(&format!("{label:label_width$}"));
            for (i, cell) in row.cells.iter().enumerate() {
                let text = match (&cell.miou, &cell.error) {
                    (Some(m), _) => {
                        let marker = if row.source.is_some() && (m - minima[i]).abs() < 1e-12 {
                            "*"
                        } else {
                            ""
                        };
                        format!("{:.2}{marker}", m * 100.0)
                    }
                    (None, Some(_)) => "error".to_string(),
                    (None, None) => "-".to_string(),
                };
                out.push_str(&format!(" {text:>18}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TransferOptions {
    pub seed: u64,
    /// Evaluate on 8-bit quantized adversarial images instead of raw floats.
    pub quantize: bool,
    /// Echoed verbatim into the emitted matrix.
    pub config_echo: serde_json::Value,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            quantize: false,
            config_echo: serde_json::Value::Null,
        }
    }
}

struct Column<'a> {
    id: String,
    adapter: &'a dyn ModelAdapter,
}

fn dedup_columns<'a>(
    sources: &'a [Box<dyn ModelAdapter>],
    targets: &'a [Box<dyn ModelAdapter>],
) -> Vec<Column<'a>> {
    let mut columns: Vec<Column<'a>> = Vec::new();
    for adapter in sources.iter().chain(targets.iter()) {
        let id = adapter.meta().model_id.clone();
        if columns.iter().all(|c| c.id != id) {
            columns.push(Column {
                id,
                adapter: adapter.as_ref(),
            });
        }
    }
    columns
}

fn quantized(image: &ImageTensor) -> ImageTensor {
    let (h, w, _) = image.dims();
    ImageTensor::from_rgb8(h, w, &image.to_rgb8()).expect("round trip")
}

fn cell_hash(
    seed: u64,
    source: Option<&str>,
    attack: Option<&AttackSpec>,
    column: &str,
    dataset_root: &str,
) -> String {
    let payload = serde_json::json!({
        "seed": seed,
        "source": source,
        "attack": attack,
        "column": column,
        "dataset": dataset_root,
    });
    sha256_hex(&serde_json::to_vec(&payload).expect("serializable"))[..16].to_string()
}

type ImageConfusions = Vec<Array2<u64>>; // per column

/// Evaluates adversarial images from every (source, attack) pair on every
/// column model; the clean baseline row comes first. A failing row records
/// its error in every cell and the run continues.
pub fn run_transfer(
    sources: &[Box<dyn ModelAdapter>],
    targets: &[Box<dyn ModelAdapter>],
    attacks: &[AttackSpec],
    dataset: &DatasetManifest,
    opts: &TransferOptions,
) -> Result<TransferMatrix> {
    if dataset.is_empty() {
        return Err(Error::Dataset("transfer dataset is empty".into()));
    }
    if sources.is_empty() && !attacks.is_empty() {
        return Err(Error::Config("attacks given but no source models".into()));
    }
    let columns = dedup_columns(sources, targets);
    let column_ids: Vec<String> = columns.iter().map(|c| c.id.clone()).collect();
    let num_classes = dataset.num_classes;
    let root_str = dataset.root().display().to_string();

    // Images are loaded once and shared across rows.
    let pairs: Vec<(ImageTensor, LabelMap)> = (0..dataset.len())
        .map(|i| dataset.load_pair(i))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();

    // Clean baseline row.
    {
        let per_image: Vec<Result<ImageConfusions>> = pairs
            .par_iter()
            .map_init(
                || columns.iter().map(|c| c.adapter.clone_adapter()).collect::<Vec<_>>(),
                |adapters, (image, labels)| {
                    adapters
                        .iter()
                        .map(|a| {
                            let pred = argmax_labels(&a.forward(image)?);
                            confusion(&pred, labels, num_classes, labels.ignore_index())
                        })
                        .collect()
                },
            )
            .collect();
        rows.push(reduce_row(
            None,
            None,
            &column_ids,
            per_image,
            opts.seed,
            &root_str,
            num_classes,
        ));
    }

    for source in sources {
        let source_id = source.meta().model_id.clone();
        for spec in attacks {
            let attack = spec.instantiate()?;
            let seed_domain = format!("attack/{source_id}/{}", spec.name);
            let per_image: Vec<Result<ImageConfusions>> = pairs
                .par_iter()
                .enumerate()
                .map_init(
                    || {
                        (
                            source.clone_adapter(),
                            columns
                                .iter()
                                .map(|c| c.adapter.clone_adapter())
                                .collect::<Vec<_>>(),
                        )
                    },
                    |(src, evals), (idx, (image, labels))| {
                        let seed = derive_seed(opts.seed, &seed_domain, idx as u64);
                        let trace =
                            attack.run(src.as_ref(), image, Some(labels), seed)?;
                        let adv = if opts.quantize {
                            quantized(&trace.adversarial)
                        } else {
                            trace.adversarial
                        };
                        evals
                            .iter()
                            .map(|a| {
                                let pred = argmax_labels(&a.forward(&adv)?);
                                confusion(&pred, labels, num_classes, labels.ignore_index())
                            })
                            .collect()
                    },
                )
                .collect();
            rows.push(reduce_row(
                Some((source_id.clone(), spec)),
                Some(attack.name().to_string()),
                &column_ids,
                per_image,
                opts.seed,
                &root_str,
                num_classes,
            ));
        }
    }

    let mut adapters: Vec<AdapterMeta> = Vec::new();
    for c in &columns {
        adapters.push(c.adapter.meta().clone());
    }

    Ok(TransferMatrix {
        columns: column_ids,
        rows,
        seed: opts.seed,
        adapters,
        config_echo: opts.config_echo.clone(),
    })
}

fn reduce_row(
    source_attack: Option<(String, &AttackSpec)>,
    attack_name: Option<String>,
    column_ids: &[String],
    per_image: Vec<Result<ImageConfusions>>,
    seed: u64,
    dataset_root: &str,
    num_classes: usize,
) -> TransferRow {
    let (source, spec) = match &source_attack {
        Some((s, spec)) => (Some(s.clone()), Some(*spec)),
        None => (None, None),
    };
    let mut totals: Vec<Array2<u64>> =
        vec![Array2::zeros((num_classes, num_classes)); column_ids.len()];
    let mut row_error: Option<String> = None;
    for item in per_image {
        match item {
            Ok(per_column) => {
                for (total, c) in totals.iter_mut().zip(per_column) {
                    *total += &c;
                }
            }
            Err(e) => {
                row_error = Some(e.to_string());
                break;
            }
        }
    }
    let cells = column_ids
        .iter()
        .zip(totals)
        .map(|(column, total)| {
            let hash = cell_hash(seed, source.as_deref(), spec, column, dataset_root);
            match (&row_error, miou(&total)) {
                (Some(e), _) => TransferCell {
                    column: column.clone(),
                    miou: None,
                    seed,
                    config_hash: hash,
                    error: Some(e.clone()),
                },
                (None, Ok(report)) => TransferCell {
                    column: column.clone(),
                    miou: Some(report.miou),
                    seed,
                    config_hash: hash,
                    error: None,
                },
                (None, Err(e)) => TransferCell {
                    column: column.clone(),
                    miou: None,
                    seed,
                    config_hash: hash,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    TransferRow {
        source,
        attack: attack_name,
        cells,
    }
}

/// What an ablation sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Tau,
    LambdaMode,
    Layer,
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepKind::Tau => write!(f, "tau"),
            SweepKind::LambdaMode => write!(f, "lambda_mode"),
            SweepKind::Layer => write!(f, "layer"),
        }
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepKind::Tau),
            "lambda_mode" | "lambda" => Ok(SweepKind::LambdaMode),
            "layer" => Ok(SweepKind::Layer),
            other => Err(Error::Config(format!(
                "unknown sweep kind '{other}' (expected tau, lambda_mode or layer)"
            ))),
        }
    }
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepValue {
    Tau(f64),
    Mode(LossMode),
    Layer(String),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Tau(t) => write!(f, "tau={t:.4}"),
            SweepValue::Mode(m) => write!(f, "{m}"),
            SweepValue::Layer(l) => write!(f, "layer={l}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub key: String,
    pub matrix: TransferMatrix,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    /// One table keyed by the swept value: rows = grid points, columns =
    /// models, cells = the swept attack's mIoU.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.points.first() else {
            return out;
        };
        out.push_str(&format!("{:>16}", self.kind.to_string()));
        for col in &first.matrix.columns {
            out.push_str(&format!(" {col:>18}"));
        }
        out.push('\n');
        for point in &self.points {
            out.push_str(&format!("{:>16}", point.key));
            let row = point.matrix.rows.iter().find(|r| r.source.is_some());
            if let Some(row) = row {
                for cell in &row.cells {
                    let text = match cell.miou {
                        Some(m) => format!("{:.2}", m * 100.0),
                        None => "error".to_string(),
                    };
                    out.push_str(&format!(" {text:>18}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs one transfer matrix per grid point, holding everything else fixed.
pub fn sweep(
    kind: SweepKind,
    grid: &[SweepValue],
    base: &AttackSpec,
    sources: &[Box<dyn ModelAdapter>],
    targets: &[Box<dyn ModelAdapter>],
    dataset: &DatasetManifest,
    opts: &TransferOptions,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for value in grid {
        let mut spec = base.clone();
        match (kind, value) {
            (SweepKind::Tau, SweepValue::Tau(t)) => spec.config.tau = *t,
            (SweepKind::LambdaMode, SweepValue::Mode(m)) => spec.config.loss_mode = *m,
            (SweepKind::Layer, SweepValue::Layer(l)) => spec.config.layer = Some(l.clone()),
            (k, v) => {
                return Err(Error::Config(format!(
                    "sweep value {v} does not match sweep kind {k}"
                )))
            }
        }
        let matrix = run_transfer(sources, targets, std::slice::from_ref(&spec), dataset, opts)?;
        points.push(SweepPoint {
            key: value.to_string(),
            matrix,
        });
    }
    Ok(SweepTable { kind, points })
}
