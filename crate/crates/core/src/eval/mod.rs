//! Segmentation metrics and the experiment protocol.

pub mod simmap;
mod transfer;

pub use simmap::{instance_region_at_feature_res, region_mean, similarity_map};
pub use transfer::{
    run_transfer, sweep, SweepKind, SweepPoint, SweepTable, SweepValue, TransferCell,
    TransferMatrix, TransferOptions, TransferRow,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// Class-by-class pixel counts: `counts[(gt, pred)]`. Pixels whose ground
/// truth equals the ignore index are excluded.
pub fn confusion(
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
    ignore_index: u8,
) -> Result<Array2<u64>> {
    if pred.dims() != gt.dims() {
        let (h, w) = gt.dims();
        let (ph, pw) = pred.dims();
        return Err(Error::shape("confusion", &[h, w], &[ph, pw]));
    }
    let mut counts = Array2::<u64>::zeros((num_classes, num_classes));
    for (&p, &g) in pred.values().iter().zip(gt.values().iter()) {
        if g == ignore_index {
            continue;
        }
        let (gi, pi) = (usize::from(g), usize::from(p));
        if gi >= num_classes || pi >= num_classes {
            return Err(Error::InvalidInput(format!(
                "label {g}/{p} out of range for {num_classes} classes"
            )));
        }
        counts[(gi, pi)] += 1;
    }
    Ok(counts)
}

/// Per-class IoU and its mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// IoU per class; `None` for classes absent from both prediction and
    /// ground truth (excluded from the mean).
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub valid_pixels: u64,
}

/// Reduces a confusion matrix to IoU per class and mean IoU.
/// `IoU_c = TP / (TP + FP + FN)`; zero-union classes are excluded.
pub fn miou(conf: &Array2<u64>) -> Result<EvalReport> {
    let n = conf.nrows();
    if conf.ncols() != n {
        return Err(Error::shape("miou", &[n, n], &[conf.nrows(), conf.ncols()]));
    }
    let mut per_class = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..n {
        let tp = conf[(c, c)];
        let row: u64 = conf.row(c).sum();
        let col: u64 = conf.column(c).sum();
        let union = row + col - tp;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Metric(
            "all classes empty; mIoU undefined".into(),
        ));
    }
    Ok(EvalReport {
        per_class_iou: per_class,
        miou: sum / counted as f64,
        valid_pixels: conf.sum(),
    })
}
