//! Dataset ingestion: image/mask pair manifests and PNG I/O.
//!
//! On-disk layout: `<root>/images/*.png`, `<root>/masks/*.png` and a
//! `manifest.json` carrying class count, ignore index, palette and the pair
//! list. Masks are single-channel 8-bit class-id PNGs; palettes are purely
//! presentational.

pub mod synth;
mod train;

pub use synth::{generate_synthetic, ClassSpec, ShapeKind, SynthSpec};
pub use train::{train_toy, TrainOptions, TrainReport};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::GenericImageView;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LabelMap, DEFAULT_IGNORE_INDEX};

/// One placed shape instance, recorded so evaluations can recover exact
/// instance regions without re-reading masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class_id: u8,
    pub kind: ShapeKind,
    /// (row, col) center in image coordinates.
    pub center: (usize, usize),
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    /// Path relative to the dataset root.
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestFile {
    num_classes: usize,
    ignore_index: u8,
    palette: Vec<[u8; 3]>,
    pairs: Vec<PairRecord>,
}

/// A validated list of image/mask pairs under one root.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    pub num_classes: usize,
    pub ignore_index: u8,
    pub palette: Vec<[u8; 3]>,
    pub pairs: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn image_path(&self, idx: usize) -> PathBuf {
        self.root.join(&self.pairs[idx].image)
    }

    pub fn mask_path(&self, idx: usize) -> PathBuf {
        self.root.join(&self.pairs[idx].mask)
    }

    pub fn load_image(&self, idx: usize) -> Result<ImageTensor> {
        load_image_png(&self.image_path(idx))
    }

    pub fn load_mask(&self, idx: usize) -> Result<LabelMap> {
        let mask = load_mask_png(&self.mask_path(idx), self.ignore_index)?;
        LabelMap::new(mask.values().clone(), self.num_classes, self.ignore_index)
    }

    pub fn load_pair(&self, idx: usize) -> Result<(ImageTensor, LabelMap)> {
        Ok((self.load_image(idx)?, self.load_mask(idx)?))
    }

    /// A manifest over the first `n` pairs (or all, if fewer).
    pub fn head(&self, n: usize) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            num_classes: self.num_classes,
            ignore_index: self.ignore_index,
            palette: self.palette.clone(),
            pairs: self.pairs.iter().take(n).cloned().collect(),
        }
    }

    /// Writes `manifest.json` under the root.
    pub fn save(&self) -> Result<()> {
        let file = ManifestFile {
            num_classes: self.num_classes,
            ignore_index: self.ignore_index,
            palette: self.palette.clone(),
            pairs: self.pairs.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&file)?;
        std::fs::write(self.root.join("manifest.json"), bytes)?;
        Ok(())
    }
}

pub fn load_image_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ImageTensor::from_rgb8(h, w, img.as_raw())
}

pub fn load_mask_png(path: &Path, ignore_index: u8) -> Result<LabelMap> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = Array2::from_shape_fn((h, w), |(y, x)| img.get_pixel(x as u32, y as u32)[0]);
    Ok(LabelMap::from_raw(values, ignore_index))
}

pub fn save_image_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let (h, w, _) = img.dims();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, img.to_rgb8())
        .ok_or_else(|| Error::InvalidInput("image buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

pub fn save_mask_png(path: &Path, mask: &LabelMap) -> Result<()> {
    let (h, w) = mask.dims();
    let raw: Vec<u8> = mask.values().iter().copied().collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::InvalidInput("mask buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Loads and validates a dataset manifest.
///
/// When `manifest.json` exists it is authoritative; otherwise `images/` and
/// `masks/` are scanned for matching stems and the class count is inferred
/// from the mask contents.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let manifest_path = root.join("manifest.json");
    let manifest = if manifest_path.exists() {
        let bytes = std::fs::read(&manifest_path)?;
        let file: ManifestFile = serde_json::from_slice(&bytes)?;
        DatasetManifest {
            root: root.to_path_buf(),
            num_classes: file.num_classes,
            ignore_index: file.ignore_index,
            palette: file.palette,
            pairs: file.pairs,
        }
    } else {
        scan_directories(root)?
    };
    validate_pairs(&manifest)?;
    Ok(manifest)
}

fn scan_directories(root: &Path) -> Result<DatasetManifest> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() || !masks_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{} must contain images/ and masks/ subdirectories (or a manifest.json)",
            root.display()
        )));
    }
    let mut images = stem_map(&images_dir)?;
    let mut masks = stem_map(&masks_dir)?;

    let unmatched_images: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .cloned()
        .collect();
    let unmatched_masks: Vec<String> = masks
        .keys()
        .filter(|k| !images.contains_key(*k))
        .cloned()
        .collect();
    if !unmatched_images.is_empty() || !unmatched_masks.is_empty() {
        return Err(Error::Dataset(format!(
            "unmatched stems (images without masks: {unmatched_images:?}; masks without images: {unmatched_masks:?})"
        )));
    }

    let mut pairs = Vec::new();
    let stems: Vec<String> = images.keys().cloned().collect(); // BTreeMap: sorted
    let mut max_class = 0u8;
    for stem in stems {
        let image_rel = images.remove(&stem).expect("stem present");
        let mask_rel = masks.remove(&stem).expect("stem present");
        let mask = load_mask_png(&root.join(&mask_rel), DEFAULT_IGNORE_INDEX)?;
        for &v in mask.values().iter() {
            if v != DEFAULT_IGNORE_INDEX {
                max_class = max_class.max(v);
            }
        }
        pairs.push(PairRecord {
            image: image_rel,
            mask: mask_rel,
            instances: Vec::new(),
        });
    }
    let num_classes = usize::from(max_class) + 1;
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        num_classes,
        ignore_index: DEFAULT_IGNORE_INDEX,
        palette: default_palette(num_classes),
        pairs,
    })
}

fn stem_map(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("unreadable file name {}", path.display())))?
            .to_string();
        let parent = dir
            .file_name()
            .and_then(|s| s.to_str())
            .expect("named directory");
        map.insert(stem, format!("{parent}/{}", path.file_name().unwrap().to_str().unwrap()));
    }
    Ok(map)
}

fn validate_pairs(manifest: &DatasetManifest) -> Result<()> {
    for (idx, pair) in manifest.pairs.iter().enumerate() {
        let image_path = manifest.root.join(&pair.image);
        let mask_path = manifest.root.join(&pair.mask);
        for p in [&image_path, &mask_path] {
            if !p.exists() {
                return Err(Error::Dataset(format!(
                    "pair {idx}: missing file {}",
                    p.display()
                )));
            }
        }
        let image_dims = image::image_dimensions(&image_path)?;
        let mask_dims = image::image_dimensions(&mask_path)?;
        if image_dims != mask_dims {
            return Err(Error::Dataset(format!(
                "pair {idx}: image {image_dims:?} and mask {mask_dims:?} dimensions differ"
            )));
        }
    }
    Ok(())
}

/// The classic VOC colormap for 21 classes (bit-reversal construction).
pub fn voc_palette() -> Vec<[u8; 3]> {
    (0..21)
        .map(|i| {
            let mut c = [0u8; 3];
            let mut id = i;
            for shift in (0..8).rev() {
                for (ch, item) in c.iter_mut().enumerate() {
                    *item |= (((id >> ch) & 1) as u8) << shift;
                }
                id >>= 3;
            }
            c
        })
        .collect()
}

/// Evenly spread palette for synthetic class counts.
pub fn default_palette(num_classes: usize) -> Vec<[u8; 3]> {
    (0..num_classes)
        .map(|i| {
            if i == 0 {
                [0, 0, 0]
            } else {
                let hue = (i * 360 / num_classes) as f64;
                hsv_to_rgb(hue, 0.75, 0.95)
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0..=59 => (c, x, 0.0),
        60..=119 => (x, c, 0.0),
        120..=179 => (0.0, c, x),
        180..=239 => (0.0, x, c),
        240..=299 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

// Silences the unused-import lint for GenericImageView on some image
// versions where to_rgb8 suffices.
#[allow(unused)]
fn _dims(img: &image::DynamicImage) -> (u32, u32) {
    img.dimensions()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn scan_empty_directories_yields_empty_manifest() {
        let dir = tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        let manifest = load_manifest(dir.path()).unwrap();
        assert!(manifest.is_empty());
    }

    #[test]
    fn scan_matches_stems_in_sorted_order() {
        let dir = tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        for stem in ["b", "a", "c"] {
            let img = ImageTensor::from_rgb8(4, 4, &[128u8; 48]).unwrap();
            save_image_png(&dir.path().join(format!("images/{stem}.png")), &img).unwrap();
            let mask = LabelMap::from_raw(Array2::zeros((4, 4)), 255);
            save_mask_png(&dir.path().join(format!("masks/{stem}.png")), &mask).unwrap();
        }
        let manifest = load_manifest(dir.path()).unwrap();
        assert_eq!(manifest.len(), 3);
        let stems: Vec<&str> = manifest
            .pairs
            .iter()
            .map(|p| p.image.trim_start_matches("images/").trim_end_matches(".png"))
            .collect();
        assert_eq!(stems, vec!["a", "b", "c"]);
    }

    #[test]
    fn unmatched_stem_is_reported() {
        let dir = tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        let img = ImageTensor::from_rgb8(4, 4, &[10u8; 48]).unwrap();
        save_image_png(&dir.path().join("images/only.png"), &img).unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        match err {
            Error::Dataset(msg) => assert!(msg.contains("only")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        let img = ImageTensor::from_rgb8(4, 4, &[10u8; 48]).unwrap();
        save_image_png(&dir.path().join("images/x.png"), &img).unwrap();
        let mask = LabelMap::from_raw(Array2::zeros((8, 8)), 255);
        save_mask_png(&dir.path().join("masks/x.png"), &mask).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }

    #[test]
    fn voc_palette_has_21_entries_with_known_colors() {
        let palette = voc_palette();
        assert_eq!(palette.len(), 21);
        assert_eq!(palette[0], [0, 0, 0]); // background
        assert_eq!(palette[1], [128, 0, 0]); // aeroplane
        assert_eq!(palette[15], [192, 128, 128]); // person
    }

    #[test]
    fn mask_png_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let values = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 7 + x) % 5) as u8);
        let mask = LabelMap::from_raw(values.clone(), 255);
        let path = dir.path().join("m.png");
        save_mask_png(&path, &mask).unwrap();
        let loaded = load_mask_png(&path, 255).unwrap();
        assert_eq!(loaded.values(), &values);
    }
}
