//! Synthetic multi-modal scenes and sensor-failure corruptions.
//!
//! A scene is a background plus a handful of random shapes; the shape type is
//! the class. Every modality is rendered from the same layout:
//!
//! * `R` – per-class colour with pixel noise, `H x W x 3` in `[0, 1]`.
//! * `D` – per-class depth layer with jitter and noise, `H x W x 1` in `[0, 1]`.
//! * `L` – depth sampled at one jittered pixel per 4x4 cell, zero elsewhere.
//! * `E` – thresholded gradient magnitude of the noise-free colour image.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{read_json, write_json, BlobIndex, BlobReader, BlobWriter};
use crate::modality::{
    ModalityKind, ModalitySpec, MultiModalSample, SpatialLayout, DEPTH, EVENT, LIDAR, RGB,
};

const LIDAR_CELL: usize = 4;
const EVENT_THRESHOLD: f64 = 0.1;
const MAX_SPARSE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of shapes per scene.
    pub shape_count: (usize, usize),
    /// Shape radius range in pixels.
    pub radius: (f64, f64),
    pub patch_size: usize,
    pub rgb_noise: f64,
    pub depth_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 5,
            shape_count: (3, 6),
            radius: (8.0, 16.0),
            patch_size: 8,
            rgb_noise: 0.12,
            depth_noise: 0.04,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.patch_size == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if !self.height.is_multiple_of(self.patch_size) || !self.width.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "{}x{} scene not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes {} outside [2, 255]",
                self.num_classes
            )));
        }
        if self.shape_count.0 > self.shape_count.1 {
            return Err(Error::Config("shape_count range is reversed".into()));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::Config("radius range must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// Arrays keyed by modality name plus the label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub modalities: BTreeMap<String, Array3<f64>>,
    pub labels: Array2<u8>,
}

impl SyntheticScene {
    pub fn modality(&self, name: &str) -> Option<&Array3<f64>> {
        self.modalities.get(name)
    }

    /// Arrays in spec order.
    pub fn to_sample(&self, spec: &ModalitySpec) -> Result<MultiModalSample> {
        let arrays = spec
            .entries()
            .iter()
            .map(|e| {
                let a = self.modalities.get(&e.name).ok_or_else(|| {
                    Error::Alignment(format!("scene has no modality {}", e.name))
                })?;
                if a.dim().2 != e.channels {
                    return Err(Error::Alignment(format!(
                        "{} has {} channels, spec says {}",
                        e.name,
                        a.dim().2,
                        e.channels
                    )));
                }
                Ok(a.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiModalSample::new(arrays))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Disk,
    Rect,
    Triangle,
    Ring,
}

const SHAPES: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Rect, ShapeKind::Triangle, ShapeKind::Ring];

fn class_colour(class: usize, k: usize) -> [f64; 3] {
    if class == 0 {
        return [0.45, 0.45, 0.42];
    }
    let hue = (class - 1) as f64 / (k - 1) as f64;
    let h6 = hue * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

fn class_depth(class: usize, k: usize) -> f64 {
    if class == 0 {
        0.9
    } else {
        0.1 + 0.65 * (class - 1) as f64 / (k - 1).max(2) as f64
    }
}

fn inside(kind: ShapeKind, cy: f64, cx: f64, r: f64, y: f64, x: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match kind {
        ShapeKind::Disk => dy * dy + dx * dx <= r * r,
        ShapeKind::Rect => dy.abs() <= 0.7 * r && dx.abs() <= r,
        ShapeKind::Triangle => {
            // Apex up, base at cy + r.
            dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5
        }
        ShapeKind::Ring => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
    }
}

/// Renders one scene. Pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let (h, w, k) = (config.height, config.width, config.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(config.shape_count.0..=config.shape_count.1);
    let mut labels = Array2::<u8>::zeros((h, w));
    let mut clean_depth = Array2::from_shape_fn((h, w), |(y, _)| {
        class_depth(0, k) - 0.1 * y as f64 / h as f64
    });
    for _ in 0..count {
        let class = rng.random_range(1..k);
        let kind = SHAPES[(class - 1) % SHAPES.len()];
        let r = rng.random_range(config.radius.0..=config.radius.1);
        let cy = rng.random_range(r.min(h as f64 / 2.0)..=(h as f64 - r).max(h as f64 / 2.0));
        let cx = rng.random_range(r.min(w as f64 / 2.0)..=(w as f64 - r).max(w as f64 / 2.0));
        let depth = class_depth(class, k) + rng.random_range(-0.03..0.03);
        for y in 0..h {
            for x in 0..w {
                if inside(kind, cy, cx, r, y as f64 + 0.5, x as f64 + 0.5) {
                    labels[[y, x]] = class as u8;
                    clean_depth[[y, x]] = depth;
                }
            }
        }
    }

    let mut clean_rgb = Array3::<f64>::zeros((h, w, 3));
    for ((y, x), &c) in labels.indexed_iter() {
        let col = class_colour(c as usize, k);
        for ch in 0..3 {
            clean_rgb[[y, x, ch]] = col[ch];
        }
    }
    let rgb_noise = Normal::new(0.0, config.rgb_noise).map_err(|e| Error::Config(e.to_string()))?;
    let depth_noise = Normal::new(0.0, config.depth_noise).map_err(|e| Error::Config(e.to_string()))?;
    let rgb = clean_rgb.mapv(|v| (v + rgb_noise.sample(&mut rng)).clamp(0.0, 1.0));
    let depth = Array3::from_shape_fn((h, w, 1), |(y, x, _)| {
        (clean_depth[[y, x]] + depth_noise.sample(&mut rng)).clamp(0.05, 1.0)
    });

    let mut lidar = Array3::<f64>::zeros((h, w, 1));
    for cy in (0..h).step_by(LIDAR_CELL) {
        for cx in (0..w).step_by(LIDAR_CELL) {
            let y = (cy + rng.random_range(0..LIDAR_CELL)).min(h - 1);
            let x = (cx + rng.random_range(0..LIDAR_CELL)).min(w - 1);
            lidar[[y, x, 0]] = depth[[y, x, 0]];
        }
    }

    let event = event_map(&clean_rgb);

    let mut modalities = BTreeMap::new();
    modalities.insert(RGB.to_string(), rgb);
    modalities.insert(DEPTH.to_string(), depth);
    modalities.insert(LIDAR.to_string(), lidar);
    modalities.insert(EVENT.to_string(), event);
    Ok(SyntheticScene {
        seed,
        modalities,
        labels,
    })
}

fn event_map(rgb: &Array3<f64>) -> Array3<f64> {
    let (h, w, _) = rgb.dim();
    let gray = Array2::from_shape_fn((h, w), |(y, x)| {
        (rgb[[y, x, 0]] + rgb[[y, x, 1]] + rgb[[y, x, 2]]) / 3.0
    });
    let mut mag = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let gx = gray[[y, (x + 1).min(w - 1)]] - gray[[y, x.saturating_sub(1)]];
            let gy = gray[[(y + 1).min(h - 1), x]] - gray[[y.saturating_sub(1), x]];
            let m = (gx * gx + gy * gy).sqrt();
            if m > EVENT_THRESHOLD {
                mag[[y, x]] = m.min(1.0);
            }
        }
    }
    let budget = (MAX_SPARSE_FRACTION * (h * w) as f64).floor() as usize;
    let mut nonzero: Vec<f64> = mag.iter().copied().filter(|&v| v > 0.0).collect();
    if nonzero.len() > budget {
        nonzero.sort_by(|a, b| b.total_cmp(a));
        let cut = nonzero[budget.saturating_sub(1)];
        // Keep the strongest `budget` responses; ties at the cut go by raster order.
        let mut kept = 0;
        for v in mag.iter_mut() {
            if *v >= cut && *v > 0.0 && kept < budget {
                kept += 1;
            } else {
                *v = 0.0;
            }
        }
    }
    mag.insert_axis(ndarray::Axis(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    MotionBlur,
    OverExposure,
    UnderExposure,
    LidarJitter,
    EventLowRes,
}

impl FailureKind {
    pub const ALL: [FailureKind; 5] = [
        FailureKind::MotionBlur,
        FailureKind::OverExposure,
        FailureKind::UnderExposure,
        FailureKind::LidarJitter,
        FailureKind::EventLowRes,
    ];

    /// Column abbreviation used in reports.
    pub fn short(self) -> &'static str {
        match self {
            FailureKind::MotionBlur => "MB",
            FailureKind::OverExposure => "OE",
            FailureKind::UnderExposure => "UE",
            FailureKind::LidarJitter => "LJ",
            FailureKind::EventLowRes => "EL",
        }
    }

    fn compatible(self, kind: ModalityKind, spatial: SpatialLayout) -> bool {
        match self {
            FailureKind::MotionBlur | FailureKind::OverExposure | FailureKind::UnderExposure => {
                kind == ModalityKind::Dense
            }
            FailureKind::LidarJitter => kind == ModalityKind::Sparse && spatial == SpatialLayout::Pointset,
            FailureKind::EventLowRes => kind == ModalityKind::Sparse && spatial == SpatialLayout::Grid,
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for FailureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FailureKind::ALL
            .into_iter()
            .find(|k| k.short().eq_ignore_ascii_case(s))
            .or(match s {
                "motion_blur" => Some(FailureKind::MotionBlur),
                "over_exposure" => Some(FailureKind::OverExposure),
                "under_exposure" => Some(FailureKind::UnderExposure),
                "lidar_jitter" => Some(FailureKind::LidarJitter),
                "event_low_res" => Some(FailureKind::EventLowRes),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown failure kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub kind: FailureKind,
    pub severity: f64,
    pub target_modality: String,
}

impl FailureSpec {
    /// Targets the first compatible modality of `spec`, preferring a
    /// three-channel camera for blur and exposure.
    pub fn for_spec(kind: FailureKind, severity: f64, spec: &ModalitySpec) -> Result<Self> {
        let entries = spec.entries();
        let target = entries
            .iter()
            .filter(|e| kind.compatible(e.kind, e.spatial))
            .max_by_key(|e| (e.channels == 3, std::cmp::Reverse(spec.index_of(&e.name))))
            .ok_or_else(|| {
                Error::IncompatibleFailure(format!("no modality in the spec accepts {kind}"))
            })?;
        Ok(Self {
            kind,
            severity,
            target_modality: target.name.clone(),
        })
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.kind.short(), self.target_modality)
    }
}

/// Applies one corruption to a copy of the scene. Labels are never touched.
pub fn inject_failure<R: Rng + ?Sized>(
    scene: &SyntheticScene,
    failure: &FailureSpec,
    spec: &ModalitySpec,
    rng: &mut R,
) -> Result<SyntheticScene> {
    let s = failure.severity;
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Config(format!("severity {s} outside (0, 1]")));
    }
    let entry = spec
        .entries()
        .iter()
        .find(|e| e.name == failure.target_modality)
        .ok_or_else(|| {
            Error::IncompatibleFailure(format!("no modality named {}", failure.target_modality))
        })?;
    if !failure.kind.compatible(entry.kind, entry.spatial) {
        return Err(Error::IncompatibleFailure(format!(
            "{} cannot be applied to {} ({:?}, {:?})",
            failure.kind, entry.name, entry.kind, entry.spatial
        )));
    }
    let src = scene.modalities.get(&entry.name).ok_or_else(|| {
        Error::Alignment(format!("scene has no modality {}", entry.name))
    })?;
    let corrupted = match failure.kind {
        FailureKind::MotionBlur => {
            let len = (s * 9.0).ceil() as usize;
            let horizontal = rng.random::<bool>();
            motion_blur(src, len.max(1), horizontal)
        }
        FailureKind::OverExposure => src.mapv(|v| (v * (1.0 + 3.0 * s)).clamp(0.0, 1.0)),
        FailureKind::UnderExposure => src.mapv(|v| v * (1.0 - 0.9 * s)),
        FailureKind::LidarJitter => lidar_jitter(src, s, rng),
        FailureKind::EventLowRes => {
            let factor = 1usize << (s * 2.0).ceil() as u32;
            low_res(src, factor)
        }
    };
    let mut out = scene.clone();
    out.modalities.insert(entry.name.clone(), corrupted);
    Ok(out)
}

/// Centred box filter of `len` taps along one axis, edges replicated.
pub fn motion_blur(x: &Array3<f64>, len: usize, horizontal: bool) -> Array3<f64> {
    if len <= 1 {
        return x.clone();
    }
    let (h, w, c) = x.dim();
    let before = (len - 1) / 2;
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for t in 0..len {
                    let off = t as isize - before as isize;
                    let (yy, xs) = if horizontal {
                        (y, (xx as isize + off).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((y as isize + off).clamp(0, h as isize - 1) as usize, xx)
                    };
                    acc += x[[yy, xs, ch]];
                }
                out[[y, xx, ch]] = acc / len as f64;
            }
        }
    }
    out
}

/// Moves each return by a rounded Gaussian offset (std `3 * severity` px),
/// clamped to the frame, and scales its value by `1 + N(0, 0.1 * severity)`.
/// A return landing on an occupied pixel takes the nearest free one, so the
/// number of returns is preserved.
fn lidar_jitter<R: Rng + ?Sized>(x: &Array3<f64>, severity: f64, rng: &mut R) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let offset = Normal::new(0.0, 3.0 * severity).expect("finite std");
    let gain = Normal::new(0.0, 0.1 * severity).expect("finite std");
    let mut out = Array3::<f64>::zeros((h, w, c));
    let mut taken = Array2::<bool>::from_elem((h, w), false);
    for y in 0..h {
        for xx in 0..w {
            let v = x[[y, xx, 0]];
            if v == 0.0 {
                continue;
            }
            let ty = (y as f64 + offset.sample(rng)).round().clamp(0.0, (h - 1) as f64) as usize;
            let tx = (xx as f64 + offset.sample(rng)).round().clamp(0.0, (w - 1) as f64) as usize;
            let Some((py, px)) = nearest_free(&taken, ty, tx) else {
                continue;
            };
            taken[[py, px]] = true;
            out[[py, px, 0]] = (v * (1.0 + gain.sample(rng))).clamp(1e-3, 1.0);
        }
    }
    out
}

fn nearest_free(taken: &Array2<bool>, y: usize, x: usize) -> Option<(usize, usize)> {
    let (h, w) = taken.dim();
    let max_r = h.max(w);
    for r in 0..=max_r as isize {
        for dy in -r..=r {
            for dx in -r..=r {
                if dy.abs() != r && dx.abs() != r {
                    continue;
                }
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                if !taken[[yy as usize, xx as usize]] {
                    return Some((yy as usize, xx as usize));
                }
            }
        }
    }
    None
}

/// Block-average downsampling by `factor`, then nearest upsampling.
pub fn low_res(x: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::zeros((h, w, c));
    for by in (0..h).step_by(factor) {
        for bx in (0..w).step_by(factor) {
            let (ey, ex) = ((by + factor).min(h), (bx + factor).min(w));
            let n = ((ey - by) * (ex - bx)) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for y in by..ey {
                    for xx in bx..ex {
                        acc += x[[y, xx, ch]];
                    }
                }
                let mean = acc / n;
                for y in by..ey {
                    for xx in bx..ex {
                        out[[y, xx, ch]] = mean;
                    }
                }
            }
        }
    }
    out
}

/// Deterministic per-scene seed.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    // splitmix64 of the combined value.
    let mut z = base ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scenes generated from one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub base_seed: u64,
    pub scenes: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn generate(config: &SceneConfig, base_seed: u64, count: usize) -> Result<Self> {
        let scenes = (0..count)
            .map(|i| generate_scene(scene_seed(base_seed, i), config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            base_seed,
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Splits off the first `n` scenes.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.scenes.len());
        let head = Dataset {
            config: self.config.clone(),
            base_seed: self.base_seed,
            scenes: self.scenes[..n].to_vec(),
        };
        let tail = Dataset {
            config: self.config.clone(),
            base_seed: self.base_seed,
            scenes: self.scenes[n..].to_vec(),
        };
        (head, tail)
    }
}

pub const DATASET_FORMAT: &str = "mmfpt-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub seed: u64,
    pub modalities: Vec<String>,
}

/// Contents of `index.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub base_seed: u64,
    pub config: SceneConfig,
    pub scene_count: usize,
    pub scenes: Vec<SceneRecord>,
    pub blob: BlobIndex,
}

/// Writes `index.json` and `data.bin` into `dir`. Tensors are named
/// `scene{i}.{modality}` and `scene{i}.labels`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, config_hash: &str) -> Result<DatasetIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = BlobWriter::new();
    let mut records = Vec::with_capacity(dataset.len());
    for (i, scene) in dataset.scenes.iter().enumerate() {
        for (name, a) in &scene.modalities {
            let (h, w, c) = a.dim();
            blob.push_f64(&format!("scene{i}.{name}"), &[h, w, c], a.iter().copied());
        }
        let (h, w) = scene.labels.dim();
        blob.push_u8(&format!("scene{i}.labels"), &[h, w], scene.labels.iter().copied());
        records.push(SceneRecord {
            seed: scene.seed,
            modalities: scene.modalities.keys().cloned().collect(),
        });
    }
    let index = DatasetIndex {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config_hash.into(),
        base_seed: dataset.base_seed,
        config: dataset.config.clone(),
        scene_count: records.len(),
        scenes: records,
        blob: blob.write(dir, DATA_FILE)?,
    };
    write_json(&dir.join(INDEX_FILE), &index)?;
    Ok(index)
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetIndex)> {
    let index: DatasetIndex = read_json(&dir.join(INDEX_FILE))?;
    if index.format != DATASET_FORMAT {
        return Err(Error::Manifest(format!("not a dataset: format {}", index.format)));
    }
    if index.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION,
            found: index.version,
        });
    }
    if index.scene_count != index.scenes.len() {
        return Err(Error::Manifest(format!(
            "scene_count {} but {} scene records",
            index.scene_count,
            index.scenes.len()
        )));
    }
    let reader = BlobReader::open(dir, index.blob.clone())?;
    let shape_err = |name: &str, shape: &[usize]| Error::Manifest(format!("tensor {name} has shape {shape:?}"));
    let mut scenes = Vec::with_capacity(index.scenes.len());
    for (i, rec) in index.scenes.iter().enumerate() {
        let mut modalities = BTreeMap::new();
        for name in &rec.modalities {
            let key = format!("scene{i}.{name}");
            let (shape, data) = reader.f64(&key)?;
            let a = match shape[..] {
                [h, w, c] => Array3::from_shape_vec((h, w, c), data).map_err(|_| shape_err(&key, &shape))?,
                _ => return Err(shape_err(&key, &shape)),
            };
            modalities.insert(name.clone(), a);
        }
        let key = format!("scene{i}.labels");
        let (shape, data) = reader.u8(&key)?;
        let labels = match shape[..] {
            [h, w] => Array2::from_shape_vec((h, w), data).map_err(|_| shape_err(&key, &shape))?,
            _ => return Err(shape_err(&key, &shape)),
        };
        scenes.push(SyntheticScene {
            seed: rec.seed,
            modalities,
            labels,
        });
    }
    let dataset = Dataset {
        config: index.config.clone(),
        base_seed: index.base_seed,
        scenes,
    };
    Ok((dataset, index))
}
