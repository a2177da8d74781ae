//! Property tests for the segmentation metrics.

use ndarray::Array2;
use proptest::prelude::*;
use segattack_core::eval::{confusion, miou};
use segattack_core::tensor::LabelMap;

/// A (ground truth, prediction) pair over one grid; ground truth may
/// contain ignore pixels.
fn label_pair(num_classes: u8) -> impl Strategy<Value = (Array2<u8>, Array2<u8>)> {
    (2usize..8, 2usize..8).prop_flat_map(move |(h, w)| {
        let gt_cell = prop_oneof![4 => 0..num_classes, 1 => Just(255u8)];
        let pred_cell = 0..num_classes;
        (
            proptest::collection::vec(gt_cell, h * w),
            proptest::collection::vec(pred_cell, h * w),
        )
            .prop_map(move |(g, p)| {
                (
                    Array2::from_shape_vec((h, w), g).unwrap(),
                    Array2::from_shape_vec((h, w), p).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn counts_conserve_valid_pixels((gt, pred) in label_pair(4)) {
        let valid = gt.iter().filter(|&&v| v != 255).count() as u64;
        let gt = LabelMap::from_raw(gt, 255);
        let pred = LabelMap::from_raw(pred, 255);
        let conf = confusion(&pred, &gt, 4, 255).unwrap();
        prop_assert_eq!(conf.sum(), valid);
        if valid > 0 {
            let report = miou(&conf).unwrap();
            prop_assert!((0.0..=1.0).contains(&report.miou));
            for iou in report.per_class_iou.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(iou));
            }
        }
    }

    #[test]
    fn miou_is_invariant_under_class_permutation(
        (gt, pred) in label_pair(4),
        swap in 0usize..6,
    ) {
        prop_assume!(gt.iter().any(|&v| v != 255));
        // One transposition of class labels, applied to both maps.
        let pairs = [(0u8, 1u8), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let (a, b) = pairs[swap];
        let relabel = |v: u8| {
            if v == a { b } else if v == b { a } else { v }
        };
        let gt_p = gt.mapv(relabel);
        let pred_p = pred.mapv(relabel);

        let base = miou(&confusion(
            &LabelMap::from_raw(pred, 255),
            &LabelMap::from_raw(gt, 255),
            4,
            255,
        ).unwrap()).unwrap();
        let permuted = miou(&confusion(
            &LabelMap::from_raw(pred_p, 255),
            &LabelMap::from_raw(gt_p, 255),
            4,
            255,
        ).unwrap()).unwrap();
        prop_assert!((base.miou - permuted.miou).abs() < 1e-12);
    }
}
