//! Image/mask corpora: loading, splitting, synthetic generation and batching.
//!
//! A corpus lives under a root directory either with a predetermined split
//! (`<root>/{train,test}/{images,masks}`) or flat (`<root>/{images,masks}`)
//! plus a `split.txt` that assigns every id to a split. Images may be any
//! PNG/JPEG; masks are single-channel PNGs named `<id>.png`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patcher::PatchGrid;

pub const SPLIT_FILE: &str = "split.txt";
pub const SYNTHETIC_FILE: &str = "synthetic.json";
/// Fraction of ids assigned to the training split when no split is given.
pub const TRAIN_FRACTION: f64 = 0.8;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One image with its mask.
#[derive(Debug, Clone)]
pub struct SegmentationSample {
    pub id: String,
    /// `[3, H, W]` RGB in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]` with values in `{-1, +1}`.
    pub mask: Tensor,
}

impl SegmentationSample {
    pub fn height(&self) -> usize {
        self.image.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.image.dims()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleFiles {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    /// `(height, width)` every sample is resized to; `None` keeps native size.
    pub target_size: Option<(usize, usize)>,
    pub files: Vec<SampleFiles>,
}

/// Image files in `dir` keyed by file stem.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if out.insert(stem.to_string(), path.clone()).is_some() {
                return Err(Error::Data(format!("two images share the id `{stem}` in {}", dir.display())));
            }
        }
    }
    Ok(out)
}

/// Reads `split.txt` lines of the form `<train|test> <id>`.
pub fn read_split_file(path: &Path) -> Result<BTreeMap<String, Split>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (split, id) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::Data(format!("{}:{}: expected `<split> <id>`", path.display(), lineno + 1)))?;
        let split: Split = split.parse()?;
        if out.insert(id.trim().to_string(), split).is_some() {
            return Err(Error::Data(format!("{}: id `{}` listed twice", path.display(), id.trim())));
        }
    }
    Ok(out)
}

pub fn write_split_file(path: &Path, assignment: &BTreeMap<String, Split>) -> Result<()> {
    let mut text = String::new();
    for (id, split) in assignment {
        let _ = writeln!(text, "{} {id}", split.as_str());
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Seeded random split: sorted ids are shuffled and the first
/// `round(0.8 n)` go to training.
pub fn seeded_split(ids: &[String], seed: u64) -> BTreeMap<String, Split> {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n_train = (sorted.len() as f64 * TRAIN_FRACTION).round() as usize;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), if i < n_train { Split::Train } else { Split::Test }))
        .collect()
}

impl DatasetManifest {
    /// Finds the files of `split` under `root`. Without a predetermined split
    /// directory or a `split.txt`, a seeded split with `split_seed` is used.
    pub fn discover(root: &Path, split: Split, target_size: Option<(usize, usize)>, split_seed: u64) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Data(format!("dataset root {} does not exist", root.display())));
        }
        let split_dir = root.join(split.as_str());
        let (mask_dir, ids) = if split_dir.join("images").is_dir() {
            let images = list_images(&split_dir.join("images"))?;
            (split_dir.join("masks"), images)
        } else {
            let image_dir = root.join("images");
            if !image_dir.is_dir() {
                return Err(Error::Data(format!(
                    "{} has neither {}/images nor images/",
                    root.display(),
                    split.as_str()
                )));
            }
            let images = list_images(&image_dir)?;
            let split_path = root.join(SPLIT_FILE);
            let assignment = if split_path.is_file() {
                read_split_file(&split_path)?
            } else {
                seeded_split(&images.keys().cloned().collect::<Vec<_>>(), split_seed)
            };
            if let Some(id) = assignment.keys().find(|id| !images.contains_key(*id)) {
                return Err(Error::Data(format!("split lists `{id}` but there is no such image")));
            }
            let selected = images
                .into_iter()
                .filter(|(id, _)| assignment.get(id) == Some(&split))
                .collect();
            (root.join("masks"), selected)
        };
        let mut files = Vec::with_capacity(ids.len());
        let mut missing = Vec::new();
        for (id, image) in ids {
            let mask = mask_dir.join(format!("{id}.png"));
            if mask.is_file() {
                files.push(SampleFiles { id, image, mask });
            } else {
                missing.push(id);
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "no mask in {} for: {}",
                mask_dir.display(),
                missing.join(", ")
            )));
        }
        if let Some((h, w)) = target_size {
            if h == 0 || w == 0 {
                return Err(Error::Config("target size must be positive".into()));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            split,
            target_size,
            files,
        })
    }

    pub fn ids(&self) -> Vec<&str> {
        self.files.iter().map(|f| f.id.as_str()).collect()
    }

    /// Plain-text `key=value` record of the manifest.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "root={}", self.root.display());
        let _ = writeln!(s, "split={}", self.split.as_str());
        if let Some((h, w)) = self.target_size {
            let _ = writeln!(s, "target_height={h}\ntarget_width={w}");
        }
        let _ = writeln!(s, "count={}", self.files.len());
        for f in &self.files {
            let _ = writeln!(s, "file={}", f.id);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_values()).map_err(|e| Error::io(path, e))
    }
}

/// Checks that two manifests share no ids.
pub fn assert_disjoint(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    let left: BTreeSet<&str> = a.ids().into_iter().collect();
    if let Some(id) = b.ids().into_iter().find(|id| left.contains(id)) {
        return Err(Error::Data(format!(
            "`{id}` appears in both the {} and {} splits",
            a.split.as_str(),
            b.split.as_str()
        )));
    }
    Ok(())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::image(path, e))
}

/// RGB image as a `[3, H, W]` tensor in `[0, 1]`, bilinearly resized if needed.
pub fn load_image(path: &Path, target: Option<(usize, usize)>) -> Result<Tensor> {
    let mut rgb = open_image(path)?.to_rgb8();
    if let Some((h, w)) = target {
        if rgb.dimensions() != (w as u32, h as u32) {
            rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        }
    }
    rgb_to_tensor(&rgb)
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Result<Tensor> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data: Vec<f32> = rgb.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
    Ok(Tensor::from_vec(data, (h, w, 3), &Device::Cpu)?.permute((2, 0, 1))?.contiguous()?)
}

/// Mask as a `[1, H, W]` tensor in `{-1, +1}`: nearest-neighbour resize, then
/// foreground wherever the stored value exceeds half its range.
pub fn load_mask(path: &Path, target: Option<(usize, usize)>) -> Result<Tensor> {
    let mut gray = open_image(path)?.to_luma32f();
    if let Some((h, w)) = target {
        if gray.dimensions() != (w as u32, h as u32) {
            gray = image::imageops::resize(&gray, w as u32, h as u32, FilterType::Nearest);
        }
    }
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data: Vec<f32> = gray.as_raw().iter().map(|v| if *v > 0.5 { 1.0 } else { -1.0 }).collect();
    Ok(Tensor::from_vec(data, (1, h, w), &Device::Cpu)?)
}

/// Loads every sample of the manifest in id order.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<SegmentationSample>> {
    manifest
        .files
        .iter()
        .map(|f| {
            let image = load_image(&f.image, manifest.target_size)?;
            let mask = load_mask(&f.mask, manifest.target_size)?;
            if image.dims()[1..] != mask.dims()[1..] {
                return Err(Error::Data(format!(
                    "`{}`: image {:?} and mask {:?} differ in size",
                    f.id,
                    image.dims(),
                    mask.dims()
                )));
            }
            Ok(SegmentationSample {
                id: f.id.clone(),
                image,
                mask,
            })
        })
        .collect()
}

/// Axis-aligned-then-rotated ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl Ellipse {
    /// Whether the point lies strictly inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v < 1.0
    }

    /// Membership of pixel `(x, y)`, judged at its centre.
    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        self.contains(x as f64 + 0.5, y as f64 + 0.5)
    }
}

/// A semi-transparent stem drawn over the scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub half_width: f64,
}

impl Bar {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (self.x1 - self.x0, self.y1 - self.y0);
        let len2 = dx * dx + dy * dy;
        let t = (((x - self.x0) * dx + (y - self.y0) * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (self.x0 + t * dx - x, self.y0 + t * dy - y);
        px * px + py * py <= self.half_width * self.half_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub id: String,
    pub ellipses: Vec<Ellipse>,
    pub bars: Vec<Bar>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub scene: SyntheticScene,
    pub image: RgbImage,
    pub mask: GrayImage,
}

/// Accepted fraction of foreground pixels.
pub const SYNTHETIC_POSITIVE_RANGE: (f64, f64) = (0.05, 0.45);
const OCCLUSION_ALPHA: f64 = 0.35;

fn validate_synthetic_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
        return Err(Error::Config(format!(
            "synthetic size {height}x{width} must be a positive multiple of 16"
        )));
    }
    Ok(())
}

/// Renders scene `index` of the corpus seeded with `seed`: 1 to 6 red
/// ellipses over textured green background, crossed by translucent stems.
pub fn synthesize(index: usize, height: usize, width: usize, seed: u64) -> Result<SyntheticSample> {
    validate_synthetic_size(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (h, w) = (height as f64, width as f64);
    let scale = h.min(w);

    let (ellipses, mask) = loop {
        let count = rng.random_range(1..=6usize);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| Ellipse {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                rx: rng.random_range(0.08..0.22) * scale,
                ry: rng.random_range(0.08..0.22) * scale,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            })
            .collect();
        let mask = GrayImage::from_fn(width as u32, height as u32, |x, y| {
            Luma([if ellipses.iter().any(|e| e.contains_pixel(x, y)) { 255 } else { 0 }])
        });
        let frac = mask.pixels().filter(|p| p[0] > 0).count() as f64 / (h * w);
        if (SYNTHETIC_POSITIVE_RANGE.0..=SYNTHETIC_POSITIVE_RANGE.1).contains(&frac) {
            break (ellipses, mask);
        }
    };

    let bars: Vec<Bar> = (0..rng.random_range(1..=3usize))
        .map(|_| Bar {
            x0: rng.random_range(0.0..w),
            y0: rng.random_range(0.0..h),
            x1: rng.random_range(0.0..w),
            y1: rng.random_range(0.0..h),
            half_width: rng.random_range(0.01..0.035) * scale,
        })
        .collect();

    // Background: low-frequency green texture plus pixel noise.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..4.0) / scale,
                rng.random_range(0.5..4.0) / scale,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(10.0..30.0),
            )
        })
        .collect();
    let fruit_tint: Vec<(f64, f64, f64)> = ellipses
        .iter()
        .map(|_| {
            (
                rng.random_range(170.0..235.0),
                rng.random_range(20.0..80.0),
                rng.random_range(15.0..60.0),
            )
        })
        .collect();
    let mut image = RgbImage::new(width as u32, height as u32);
    for (x, y, px) in image.enumerate_pixels_mut() {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let texture: f64 = waves
            .iter()
            .map(|(kx, ky, phase, amp)| amp * (std::f64::consts::TAU * (kx * fx + ky * fy) + phase).sin())
            .sum();
        let noise = rng.random_range(-12.0..12.0);
        let mut rgb = [55.0 + 0.4 * texture + noise, 125.0 + texture + noise, 50.0 + 0.3 * texture + noise];
        // The last ellipse containing the pixel is drawn on top.
        if let Some((e, tint)) = ellipses.iter().zip(&fruit_tint).rev().find(|(e, _)| e.contains(fx, fy)) {
            let (dx, dy) = ((fx - e.cx) / e.rx, (fy - e.cy) / e.ry);
            let shade = 1.0 - 0.25 * (dx * dx + dy * dy).min(1.0) + 0.15 * (-dx - dy).clamp(-1.0, 1.0);
            rgb = [tint.0 * shade + noise, tint.1 * shade + noise, tint.2 * shade + noise];
        }
        if bars.iter().any(|b| b.covers(fx, fy)) {
            let stem = [60.0, 140.0, 45.0];
            for c in 0..3 {
                rgb[c] = (1.0 - OCCLUSION_ALPHA) * rgb[c] + OCCLUSION_ALPHA * stem[c];
            }
        }
        *px = Rgb(rgb.map(|v| v.round().clamp(0.0, 255.0) as u8));
    }

    Ok(SyntheticSample {
        scene: SyntheticScene {
            id: synthetic_id(index),
            ellipses,
            bars,
        },
        image,
        mask,
    })
}

pub fn synthetic_id(index: usize) -> String {
    format!("synth_{index:05}")
}

/// Writes `count` synthetic samples in the flat layout with a seeded
/// `split.txt` and the scene geometry in `synthetic.json`.
pub fn generate_synthetic(out_dir: &Path, count: usize, size: (usize, usize), seed: u64) -> Result<Vec<SyntheticScene>> {
    validate_synthetic_size(size.0, size.1)?;
    if count == 0 {
        return Err(Error::Config("synthetic corpus needs at least one sample".into()));
    }
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let sample = synthesize(i, size.0, size.1, seed)?;
        let id = &sample.scene.id;
        let ip = images.join(format!("{id}.png"));
        sample.image.save(&ip).map_err(|e| Error::image(&ip, e))?;
        let mp = masks.join(format!("{id}.png"));
        sample.mask.save(&mp).map_err(|e| Error::image(&mp, e))?;
        scenes.push(sample.scene);
    }
    let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    write_split_file(&out_dir.join(SPLIT_FILE), &seeded_split(&ids, seed))?;
    let meta = out_dir.join(SYNTHETIC_FILE);
    let json = serde_json::to_string_pretty(&scenes).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&meta, json).map_err(|e| Error::io(&meta, e))?;
    Ok(scenes)
}

/// Training batch of patches.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Indices into the batcher's patch table; they address cached pyramids.
    pub patch_ids: Vec<usize>,
    /// `[B, 3, P, P]`.
    pub images: Tensor,
    /// `[B, 1, P, P]` in `{-1, +1}`.
    pub masks: Tensor,
}

/// Cuts every sample into patches and serves them in a seeded order that is
/// reshuffled each epoch. Batches are addressed by global step, so a resumed
/// run sees exactly the batches an uninterrupted one would.
#[derive(Debug, Clone)]
pub struct Batcher {
    images: Tensor,
    masks: Tensor,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(samples: &[SegmentationSample], batch_size: usize, patch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if samples.is_empty() {
            return Err(Error::Data("cannot batch an empty dataset".into()));
        }
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for s in samples {
            let (image_patches, _) = crate::patcher::split(&s.image, patch_size)
                .map_err(|e| Error::Data(format!("sample `{}`: {e}", s.id)))?;
            let (mask_patches, _) = crate::patcher::split(&s.mask, patch_size)?;
            images.extend(image_patches);
            masks.extend(mask_patches);
        }
        Ok(Self {
            images: Tensor::stack(&images, 0)?.to_dtype(DType::F32)?,
            masks: Tensor::stack(&masks, 0)?.to_dtype(DType::F32)?,
            batch_size,
            seed,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.num_patches().div_ceil(self.batch_size)
    }

    /// All patch images `[N, 3, P, P]`, in patch-id order.
    pub fn patch_images(&self) -> &Tensor {
        &self.images
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_patches()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// The batch consumed at global step `step` (0-based). The last batch of
    /// an epoch may be smaller than `batch_size`.
    pub fn batch(&self, step: u64) -> Result<Batch> {
        let per_epoch = self.batches_per_epoch() as u64;
        let epoch = (step / per_epoch) as usize;
        let within = (step % per_epoch) as usize;
        let order = self.epoch_order(epoch);
        let end = ((within + 1) * self.batch_size).min(order.len());
        let ids = order[within * self.batch_size..end].to_vec();
        self.gather(ids)
    }

    pub fn gather(&self, patch_ids: Vec<usize>) -> Result<Batch> {
        let index = Tensor::from_vec(
            patch_ids.iter().map(|i| *i as u32).collect::<Vec<_>>(),
            patch_ids.len(),
            &Device::Cpu,
        )?;
        Ok(Batch {
            images: self.images.index_select(&index, 0)?,
            masks: self.masks.index_select(&index, 0)?,
            patch_ids,
        })
    }
}

/// Patch grid of a sample.
pub fn patch_grid(sample: &SegmentationSample, patch_size: usize) -> Result<PatchGrid> {
    PatchGrid::new(sample.height(), sample.width(), patch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        for i in 0..20 {
            let a = synthesize(i, 64, 64, 3).unwrap();
            let b = synthesize(i, 64, 64, 3).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
            let frac = a.mask.pixels().filter(|p| p[0] > 0).count() as f64 / 4096.0;
            assert!((0.05..=0.45).contains(&frac));
            assert!((1..=6).contains(&a.scene.ellipses.len()));
        }
        assert_ne!(synthesize(0, 64, 64, 3).unwrap().image, synthesize(1, 64, 64, 3).unwrap().image);
    }

    #[test]
    fn ellipse_membership_is_analytic() {
        let s = synthesize(4, 64, 96, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let (x, y) = (rng.random_range(0..96u32), rng.random_range(0..64u32));
            let inside = s.scene.ellipses.iter().any(|e| {
                let (s, c) = e.angle.sin_cos();
                let (dx, dy) = (x as f64 + 0.5 - e.cx, y as f64 + 0.5 - e.cy);
                ((c * dx + s * dy) / e.rx).powi(2) + ((c * dy - s * dx) / e.ry).powi(2) < 1.0
            });
            assert_eq!(s.mask.get_pixel(x, y)[0] == 255, inside);
        }
    }

    #[test]
    fn bad_sizes_rejected() {
        assert!(synthesize(0, 60, 64, 0).is_err());
        assert!(synthesize(0, 0, 64, 0).is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let ids: Vec<String> = (0..250).map(synthetic_id).collect();
        let a = seeded_split(&ids, 5);
        assert_eq!(a, seeded_split(&ids, 5));
        assert_eq!(a.values().filter(|s| **s == Split::Train).count(), 200);
        assert_ne!(a, seeded_split(&ids, 6));
    }
}
