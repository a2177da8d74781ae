//! Feature-similarity maps: cosine similarity of every feature-grid pixel
//! against a reference pixel.

use ndarray::Array2;

use crate::data::synth::rasterize_instance;
use crate::data::InstanceRecord;
use crate::error::{Error, Result};
use crate::featsim::{normalized_columns, FeatureMap, DEFAULT_EPS_NORM};

/// `map(p) = cos(f(ref), f(p))` over the feature grid. The value at the
/// reference pixel is 1 for nonzero features.
pub fn similarity_map(f: &FeatureMap, ref_pixel: (usize, usize)) -> Result<Array2<f64>> {
    let (h, w) = f.spatial();
    let Some(ref_idx) = f.pixel_index(ref_pixel.0, ref_pixel.1) else {
        return Err(Error::InvalidInput(format!(
            "reference pixel {ref_pixel:?} outside feature grid {h}×{w}"
        )));
    };
    let (normalized, _) = normalized_columns(f.values().view(), DEFAULT_EPS_NORM);
    let reference = normalized.column(ref_idx).to_owned();
    let mut map = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let idx = r * w + c;
            map[(r, c)] = reference.dot(&normalized.column(idx));
        }
    }
    Ok(map)
}

/// Feature-grid cells covered by an image-space instance.
///
/// A cell belongs to the region when at least `min_coverage` of its image
/// pixels are instance pixels. Feature maps are assumed to divide the image
/// evenly (integer stride).
pub fn instance_region_at_feature_res(
    instance: &InstanceRecord,
    image_dims: (usize, usize),
    feature_dims: (usize, usize),
    min_coverage: f64,
) -> Vec<(usize, usize)> {
    let (ih, iw) = image_dims;
    let (fh, fw) = feature_dims;
    if fh == 0 || fw == 0 || ih % fh != 0 || iw % fw != 0 {
        return Vec::new();
    }
    let (sy, sx) = (ih / fh, iw / fw);
    let mut coverage = Array2::<usize>::zeros((fh, fw));
    for (y, x) in rasterize_instance(instance.kind, instance.center, instance.size, ih, iw) {
        coverage[(y / sy, x / sx)] += 1;
    }
    let cell_area = (sy * sx) as f64;
    let mut region = Vec::new();
    for r in 0..fh {
        for c in 0..fw {
            if coverage[(r, c)] as f64 / cell_area >= min_coverage {
                region.push((r, c));
            }
        }
    }
    region
}

/// Mean of a map over a set of cells; `None` when the region is empty.
pub fn region_mean(map: &Array2<f64>, region: &[(usize, usize)]) -> Option<f64> {
    if region.is_empty() {
        return None;
    }
    let sum: f64 = region.iter().map(|&(r, c)| map[(r, c)]).sum();
    Some(sum / region.len() as f64)
}
