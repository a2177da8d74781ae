//! Deterministic synthetic-shapes segmentation data.
//!
//! Images contain several instances of the same shape class placed at
//! disjoint locations — the spatial structure the internal similarity loss
//! exploits. Masks are pixel-exact: a pixel belongs to a class iff the
//! shape painter covered it, with no anti-aliasing.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{default_palette, save_image_png, save_mask_png, DatasetManifest, InstanceRecord, PairRecord};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LabelMap, DEFAULT_IGNORE_INDEX};
use crate::util::derive_seed;

const PLACEMENT_RETRIES: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Bar,
}

/// One shape class: which kind it draws and how many instances appear per
/// image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub kind: ShapeKind,
    pub class_id: u8,
    pub instances_min: usize,
    pub instances_max: usize,
}

/// Generator parameters. Background is class 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassSpec>,
    /// Shape half-extent range, inclusive.
    pub size_min: usize,
    pub size_max: usize,
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
    /// Per-instance color jitter amplitude.
    pub color_jitter: f64,
    /// How far class base colors spread from a shared tone (0 = identical
    /// colors, 1 = fully saturated per-class colors). Low values force
    /// models to read shape rather than color.
    pub color_separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        usize::from(self.classes.iter().map(|c| c.class_id).max().unwrap_or(0)) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dimensions must be nonzero".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("at least one shape class is required".into()));
        }
        if !self.classes.iter().any(|c| c.instances_min >= 2) {
            return Err(Error::Config(
                "at least one class must place >= 2 instances per image".into(),
            ));
        }
        for c in &self.classes {
            if c.class_id == 0 {
                return Err(Error::Config("class id 0 is reserved for background".into()));
            }
            if c.class_id == DEFAULT_IGNORE_INDEX {
                return Err(Error::Config("class id collides with the ignore index".into()));
            }
            if c.instances_min > c.instances_max || c.instances_max == 0 {
                return Err(Error::Config(format!(
                    "bad instance range for class {}: {}..={}",
                    c.class_id, c.instances_min, c.instances_max
                )));
            }
        }
        if self.size_min == 0 || self.size_min > self.size_max {
            return Err(Error::Config(format!(
                "bad size range {}..={}",
                self.size_min, self.size_max
            )));
        }
        if 2 * self.size_max + 2 >= self.height.min(self.width) {
            return Err(Error::Config(
                "largest shape does not fit inside the image".into(),
            ));
        }
        Ok(())
    }

    /// The bundled desk benchmark: four shape classes plus background,
    /// every class placing 2–3 disjoint instances per 64×64 image.
    pub fn desk(num_images: usize, seed: u64) -> Self {
        let classes = vec![
            ClassSpec {
                kind: ShapeKind::Disc,
                class_id: 1,
                instances_min: 2,
                instances_max: 3,
            },
            ClassSpec {
                kind: ShapeKind::Square,
                class_id: 2,
                instances_min: 1,
                instances_max: 2,
            },
            ClassSpec {
                kind: ShapeKind::Triangle,
                class_id: 3,
                instances_min: 1,
                instances_max: 2,
            },
            ClassSpec {
                kind: ShapeKind::Bar,
                class_id: 4,
                instances_min: 1,
                instances_max: 2,
            },
        ];
        Self {
            num_images,
            height: 64,
            width: 64,
            classes,
            size_min: 5,
            size_max: 7,
            noise: 0.08,
            color_jitter: 0.3,
            color_separation: 0.12,
            seed,
        }
    }

    /// Train/eval pair for the desk benchmark.
    pub fn desk_preset(seed: u64) -> (Self, Self) {
        let train = Self::desk(200, seed);
        let eval = Self::desk(50, derive_seed(seed, "desk-eval-split", 0));
        (train, eval)
    }
}

/// Pixels covered by a shape instance, clipped to the image bounds.
pub fn rasterize_instance(
    kind: ShapeKind,
    center: (usize, usize),
    size: usize,
    height: usize,
    width: usize,
) -> Vec<(usize, usize)> {
    let (cy, cx) = (center.0 as isize, center.1 as isize);
    let s = size as isize;
    let mut pixels = Vec::new();
    for dy in -s..=s {
        for dx in -s..=s {
            let inside = match kind {
                ShapeKind::Disc => dy * dy + dx * dx <= s * s,
                ShapeKind::Square => true,
                ShapeKind::Triangle => dx.abs() * 2 <= dy + s,
                ShapeKind::Bar => dy.abs() <= (s / 3).max(1),
            };
            if !inside {
                continue;
            }
            let (y, x) = (cy + dy, cx + dx);
            if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                pixels.push((y as usize, x as usize));
            }
        }
    }
    pixels
}

/// Class base colors spread around a shared foreground tone. At low
/// separation the classes are only distinguishable by shape.
fn class_base_color(class_id: u8, separation: f64) -> [f64; 3] {
    let neutral = [0.66, 0.6, 0.54];
    let offset = match class_id {
        1 => [0.25, -0.2, -0.2],
        2 => [-0.2, 0.25, -0.15],
        3 => [-0.2, -0.15, 0.3],
        4 => [0.2, 0.2, -0.25],
        other => {
            let h = f64::from(other) * 2.399963; // golden-angle spacing
            [h.sin() * 0.25, (h + 2.0).sin() * 0.25, (h + 4.0).sin() * 0.25]
        }
    };
    [
        neutral[0] + separation * offset[0],
        neutral[1] + separation * offset[1],
        neutral[2] + separation * offset[2],
    ]
}

/// Occupancy test with a 1-pixel separation margin, so same-class instances
/// stay spatially disjoint.
fn region_is_free(occupied: &Array2<bool>, pixels: &[(usize, usize)]) -> bool {
    let (h, w) = occupied.dim();
    for &(y, x) in pixels {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                    && occupied[(ny as usize, nx as usize)]
                {
                    return false;
                }
            }
        }
    }
    true
}

struct GeneratedImage {
    image: ImageTensor,
    mask: LabelMap,
    instances: Vec<InstanceRecord>,
}

fn generate_one(spec: &SynthSpec, index: usize) -> Result<GeneratedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth-image", index as u64));
    let (h, w) = (spec.height, spec.width);

    // Textured background: base gray, a smooth seeded gradient, pixel noise.
    let base = 0.42;
    let gy = rng.gen_range(-0.06..0.06);
    let gx = rng.gen_range(-0.06..0.06);
    let mut image = Array3::from_shape_fn((h, w, 3), |(y, x, _)| {
        base + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5)
    });
    let mut mask = Array2::<u8>::zeros((h, w));
    let mut occupied = Array2::from_elem((h, w), false);
    let mut instances = Vec::new();

    for class in &spec.classes {
        let count = rng.gen_range(class.instances_min..=class.instances_max);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let size = rng.gen_range(spec.size_min..=spec.size_max);
                let cy = rng.gen_range(size..h - size);
                let cx = rng.gen_range(size..w - size);
                let pixels = rasterize_instance(class.kind, (cy, cx), size, h, w);
                if !region_is_free(&occupied, &pixels) {
                    continue;
                }
                let base_color = class_base_color(class.class_id, spec.color_separation);
                let jitter: [f64; 3] = [
                    rng.gen_range(-spec.color_jitter..=spec.color_jitter),
                    rng.gen_range(-spec.color_jitter..=spec.color_jitter),
                    rng.gen_range(-spec.color_jitter..=spec.color_jitter),
                ];
                for &(y, x) in &pixels {
                    occupied[(y, x)] = true;
                    mask[(y, x)] = class.class_id;
                    for c in 0..3 {
                        image[(y, x, c)] = base_color[c] + jitter[c];
                    }
                }
                instances.push(InstanceRecord {
                    class_id: class.class_id,
                    kind: class.kind,
                    center: (cy, cx),
                    size,
                });
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Dataset(format!(
                    "image {index}: no disjoint placement for class {} after {PLACEMENT_RETRIES} retries",
                    class.class_id
                )));
            }
        }
    }

    // Pixel noise everywhere, then clamp.
    for v in image.iter_mut() {
        *v = (*v + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0);
    }

    Ok(GeneratedImage {
        image: ImageTensor::new(image).expect("clamped"),
        mask: LabelMap::new(mask, spec.num_classes(), DEFAULT_IGNORE_INDEX)?,
        instances,
    })
}

/// Writes a synthetic dataset under `out_root` and returns its manifest.
/// Byte-identical across runs for the same `(spec, seed)`.
pub fn generate_synthetic(spec: &SynthSpec, out_root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_root.join("images"))?;
    std::fs::create_dir_all(out_root.join("masks"))?;

    let mut pairs = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let generated = generate_one(spec, i)?;
        let image_rel = format!("images/img_{i:04}.png");
        let mask_rel = format!("masks/img_{i:04}.png");
        save_image_png(&out_root.join(&image_rel), &generated.image)?;
        save_mask_png(&out_root.join(&mask_rel), &generated.mask)?;
        pairs.push(PairRecord {
            image: image_rel,
            mask: mask_rel,
            instances: generated.instances,
        });
    }

    let manifest = DatasetManifest {
        root: out_root.to_path_buf(),
        num_classes: spec.num_classes(),
        ignore_index: DEFAULT_IGNORE_INDEX,
        palette: default_palette(spec.num_classes()),
        pairs,
    };
    manifest.save()?;
    Ok(manifest)
}
