use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SUPPORTED_DIMS;
use crate::attention::Mask;
use crate::denoiser::TrainingExample;
use crate::error::{Error, Result};
use crate::latent::LatentState;
use crate::sampler::sample_rng;

pub const DATASET_FORMAT: &str = "asyndiff-shapes/1";
const MANIFEST_FILE: &str = "manifest.json";
const IMAGES_FILE: &str = "images.f32";
const MASKS_FILE: &str = "masks.bits";

pub const VOCABULARY: [&str; 9] = [
    "<null>", "<bg>", "red", "green", "blue", "yellow", "square", "circle", "triangle",
];
pub const BACKGROUND_TOKEN: usize = 1;
pub const COLOR_TOKENS: [usize; 4] = [2, 3, 4, 5];
pub const SHAPE_TOKENS: [usize; 3] = [6, 7, 8];
/// RGB values of the color tokens, in `[-1, 1]`.
pub const COLOR_VALUES: [[f32; 3]; 4] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
];
const CHANNELS: usize = 3;
const BACKGROUND_NOISE: f64 = 0.1;
const MIN_AREA: usize = 9;
const PLACEMENT_TRIES: usize = 100;
const LAYOUT_TRIES: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub color_token: usize,
    pub shape_token: usize,
    /// Positions of this object's tokens within the caption.
    pub token_indices: Vec<usize>,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSample {
    pub height: usize,
    pub width: usize,
    /// `3 x H x W`, channel-major, values in `[-1, 1]`.
    pub image: Vec<f32>,
    pub caption: Vec<usize>,
    pub objects: Vec<ObjectAnnotation>,
}

impl ShapesSample {
    /// Caption positions of all object tokens.
    pub fn object_token_positions(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .objects
            .iter()
            .flat_map(|o| o.token_indices.iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    }

    /// Union of all object masks.
    pub fn union_mask(&self) -> Mask {
        self.objects
            .iter()
            .fold(Mask::filled(self.height, self.width, false), |acc, o| {
                acc.union(&o.mask).expect("masks share the image grid")
            })
    }

    pub fn latent(&self) -> LatentState {
        LatentState::from_vec(
            CHANNELS,
            self.height,
            self.width,
            self.image.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("image shape")
    }

    pub fn training_example(&self) -> TrainingExample {
        TrainingExample {
            image: self.latent(),
            tokens: self.caption.clone(),
        }
    }

    pub fn caption_text(&self) -> String {
        self.caption
            .iter()
            .map(|&t| VOCABULARY[t])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub color_token: usize,
    pub shape_token: usize,
    pub token_indices: Vec<usize>,
    /// Byte offset of the packed mask in the mask blob.
    pub mask_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub caption: Vec<usize>,
    pub objects: Vec<ObjectRecord>,
    /// Byte offset of the image in the image blob.
    pub image_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub size: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub vocabulary: Vec<String>,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesDataset {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ShapesSample>,
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

fn rasterize<R: Rng>(kind: ShapeKind, side: usize, rng: &mut R) -> Vec<bool> {
    let (h, w) = (side, side);
    let max_area = (h * w) / 4;
    let max_extent = (max_area as f64).sqrt();
    let mut mask = vec![false; h * w];
    match kind {
        ShapeKind::Square => {
            let s = rng.random_range(3..=max_extent.floor() as usize);
            let top = rng.random_range(0..=h - s);
            let left = rng.random_range(0..=w - s);
            for y in top..top + s {
                for x in left..left + s {
                    mask[y * w + x] = true;
                }
            }
        }
        ShapeKind::Circle => {
            let r_max = (max_area as f64 / std::f64::consts::PI).sqrt();
            let r = rng.random_range(1.7..r_max.max(1.8));
            let cy = rng.random_range(r..h as f64 - r);
            let cx = rng.random_range(r..w as f64 - r);
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    mask[y * w + x] = dy * dy + dx * dx <= r * r;
                }
            }
        }
        ShapeKind::Triangle => {
            let base = rng.random_range(4..=(2.0 * max_extent).floor() as usize).min(w);
            let height = rng.random_range(3..=(max_extent.floor() as usize).max(3)).min(h);
            let top = rng.random_range(0..=h - height);
            let left = rng.random_range(0..=w - base);
            let cx = left as f64 + base as f64 / 2.0;
            for y in top..top + height {
                let v = (y - top) as f64 + 0.5;
                let half = v / height as f64 * base as f64 / 2.0;
                for x in left..left + base {
                    if (x as f64 + 0.5 - cx).abs() <= half {
                        mask[y * w + x] = true;
                    }
                }
            }
        }
    }
    mask
}

/// True when the two masks overlap or touch (8-neighbourhood).
fn touches(a: &[bool], b: &[bool], side: usize) -> bool {
    (0..side * side).filter(|&p| a[p]).any(|p| {
        let (y, x) = ((p / side) as isize, (p % side) as isize);
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (yy, xx) = (y + dy, x + dx);
                yy >= 0
                    && xx >= 0
                    && (yy as usize) < side
                    && (xx as usize) < side
                    && b[yy as usize * side + xx as usize]
            })
        })
    })
}

fn try_layout(side: usize, n_objects: usize, rng: &mut ChaCha8Rng) -> Option<Vec<(usize, usize, Vec<bool>)>> {
    let max_area = side * side / 4;
    let mut colors: Vec<usize> = (0..COLOR_TOKENS.len()).collect();
    let mut placed: Vec<(usize, usize, Vec<bool>)> = Vec::new();
    for _ in 0..n_objects {
        let pick = rng.random_range(0..colors.len());
        let color = colors.swap_remove(pick);
        let shape = rng.random_range(0..SHAPE_TOKENS.len());
        let kind = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle][shape];
        let mut ok = None;
        for _ in 0..PLACEMENT_TRIES {
            let mask = rasterize(kind, side, rng);
            let area = mask.iter().filter(|&&v| v).count();
            if !(MIN_AREA..=max_area).contains(&area) {
                continue;
            }
            if placed.iter().any(|(_, _, other)| touches(&mask, other, side)) {
                continue;
            }
            ok = Some(mask);
            break;
        }
        placed.push((color, shape, ok?));
    }
    Some(placed)
}

/// Renders sample `index` of the dataset with `seed`.
pub fn generate_sample(side: usize, seed: u64, index: u64) -> Result<ShapesSample> {
    let mut rng = sample_rng(seed, index);
    let n_objects = if rng.random::<f64>() < 0.5 { 1 } else { 2 };
    let layout = (0..LAYOUT_TRIES)
        .find_map(|_| try_layout(side, n_objects, &mut rng))
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "could not place {n_objects} shapes on a {side}x{side} grid"
            ))
        })?;
    let plane = side * side;
    let mut image: Vec<f32> = (0..CHANNELS * plane)
        .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * BACKGROUND_NOISE) as f32)
        .collect();
    let mut caption = Vec::new();
    let mut objects = Vec::new();
    for (color, shape, mask) in layout {
        for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for c in 0..CHANNELS {
                image[c * plane + p] = COLOR_VALUES[color][c];
            }
        }
        let start = caption.len();
        caption.push(COLOR_TOKENS[color]);
        caption.push(SHAPE_TOKENS[shape]);
        objects.push(ObjectAnnotation {
            color_token: COLOR_TOKENS[color],
            shape_token: SHAPE_TOKENS[shape],
            token_indices: vec![start, start + 1],
            mask: Mask::from_values(side, side, mask)?,
        });
    }
    caption.push(BACKGROUND_TOKEN);
    Ok(ShapesSample {
        height: side,
        width: side,
        image,
        caption,
        objects,
    })
}

/// Generates `count` captioned shape images of side `side`.
pub fn generate_shapes(count: usize, side: usize, seed: u64) -> Result<ShapesDataset> {
    if !SUPPORTED_DIMS.contains(&side) {
        return Err(Error::InvalidArgument(format!(
            "image side {side} not in {SUPPORTED_DIMS:?}"
        )));
    }
    let samples = (0..count as u64)
        .map(|i| generate_sample(side, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapesDataset {
        seed,
        height: side,
        width: side,
        samples,
    })
}

fn pack_bits(values: &[bool]) -> Vec<u8> {
    values
        .chunks(8)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (k, &b)| acc | (u8::from(b) << k))
        })
        .collect()
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect()
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn training_examples(&self) -> Vec<TrainingExample> {
        self.samples.iter().map(ShapesSample::training_example).collect()
    }

    fn encode(&self) -> Result<(DatasetManifest, Vec<u8>, Vec<u8>)> {
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut records = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image_offset = images.len();
            for v in &s.image {
                images.extend_from_slice(&v.to_le_bytes());
            }
            let objects = s
                .objects
                .iter()
                .map(|o| {
                    let mask_offset = masks.len();
                    masks.extend(pack_bits(o.mask.values()));
                    ObjectRecord {
                        color_token: o.color_token,
                        shape_token: o.shape_token,
                        token_indices: o.token_indices.clone(),
                        mask_offset,
                    }
                })
                .collect();
            records.push(SampleRecord {
                caption: s.caption.clone(),
                objects,
                image_offset,
            });
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.to_string(),
            size: self.samples.len(),
            height: self.height,
            width: self.width,
            channels: CHANNELS,
            vocabulary: VOCABULARY.iter().map(|s| s.to_string()).collect(),
            seed: self.seed,
            records,
        };
        Ok((manifest, images, masks))
    }

    /// Writes `manifest.json`, `images.f32` and `masks.bits` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (manifest, images, masks) = self.encode()?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(IMAGES_FILE), images)?;
        fs::write(dir.join(MASKS_FILE), masks)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let bad = |message: String| Error::Format {
            path: manifest_path.clone(),
            message,
        };
        if manifest.format != DATASET_FORMAT {
            return Err(bad(format!("unsupported dataset format '{}'", manifest.format)));
        }
        if manifest.vocabulary != VOCABULARY {
            return Err(bad("vocabulary differs from the built-in vocabulary".into()));
        }
        if manifest.records.len() != manifest.size || manifest.channels != CHANNELS {
            return Err(bad("record count or channel count inconsistent".into()));
        }
        let images = fs::read(dir.join(IMAGES_FILE))?;
        let masks = fs::read(dir.join(MASKS_FILE))?;
        let (h, w) = (manifest.height, manifest.width);
        let plane = h * w;
        let image_bytes = CHANNELS * plane * 4;
        let mask_bytes = plane.div_ceil(8);
        let samples = manifest
            .records
            .iter()
            .enumerate()
            .map(|(k, rec)| {
                let raw = images
                    .get(rec.image_offset..rec.image_offset + image_bytes)
                    .ok_or_else(|| bad(format!("image {k} runs past the blob")))?;
                let image = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                if rec.caption.iter().any(|&t| t >= VOCABULARY.len()) {
                    return Err(bad(format!("sample {k} has out-of-vocabulary tokens")));
                }
                let objects = rec
                    .objects
                    .iter()
                    .map(|o| {
                        let bits = masks
                            .get(o.mask_offset..o.mask_offset + mask_bytes)
                            .ok_or_else(|| bad(format!("mask of sample {k} runs past the blob")))?;
                        Ok(ObjectAnnotation {
                            color_token: o.color_token,
                            shape_token: o.shape_token,
                            token_indices: o.token_indices.clone(),
                            mask: Mask::from_values(h, w, unpack_bits(bits, plane))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ShapesSample {
                    height: h,
                    width: w,
                    image,
                    caption: rec.caption.clone(),
                    objects,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: manifest.seed,
            height: h,
            width: w,
            samples,
        })
    }

    /// SHA-256 over the serialized manifest and blobs.
    pub fn fingerprint(&self) -> Result<String> {
        let (manifest, images, masks) = self.encode()?;
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&manifest)?);
        hasher.update(&images);
        hasher.update(&masks);
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
