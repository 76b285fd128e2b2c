//! Video datasets: a synthetic motion-only generator and on-disk clip folders.
//!
//! Frames are stored as `(T, H, W, 3)` arrays with values in `[0, 1]`.
//!
//! The synthetic generator renders one high-contrast square sprite moving over a
//! static textured background. Videos are produced in *slots*: every class gets
//! one video per slot, and all videos of a slot share the background texture and
//! the sprite position at `t = T/2`. Classes therefore differ only in how the
//! sprite moves, and background index is independent of class by construction.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use log::warn;
use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn ingest(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Ingest { path: path.to_path_buf(), reason: reason.into() }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    LinearRight,
    LinearLeft,
    LinearUp,
    LinearDown,
    Circular,
    AccelerateThenStop,
    RunThenJump,
}

impl MotionKind {
    /// Motions made of two visibly different phases.
    pub fn is_two_phase(self) -> bool {
        matches!(self, MotionKind::AccelerateThenStop | MotionKind::RunThenJump)
    }

    /// Sprite centre offset from its `t = T/2` position, in units of the travel
    /// distance, at normalised time `u = t / T`.
    fn offset(self, u: f64) -> (f64, f64) {
        let s = u - 0.5;
        match self {
            MotionKind::LinearRight => (s, 0.0),
            MotionKind::LinearLeft => (-s, 0.0),
            MotionKind::LinearUp => (0.0, -s),
            MotionKind::LinearDown => (0.0, s),
            MotionKind::Circular => {
                let r = 0.35;
                let a = 1.5 * std::f64::consts::PI * s;
                (r * a.sin(), r * (1.0 - a.cos()))
            }
            MotionKind::AccelerateThenStop => {
                // Quadratic ease-in until u = 0.6, then at rest.
                let p = (u / 0.6).min(1.0);
                let mid = (0.5f64 / 0.6).powi(2);
                (p * p - mid, 0.0)
            }
            MotionKind::RunThenJump => {
                if u < 0.5 {
                    (s, 0.0)
                } else {
                    let v = (u - 0.5) / 0.5;
                    (0.35 * s, -0.9 * v * (1.0 - v) * 2.0)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub videos_per_class: usize,
    /// `(T, H, W)` in frames and pixels.
    pub canvas: (usize, usize, usize),
    pub background_pool: usize,
    pub motion_kinds: Vec<MotionKind>,
    /// Sprite side as a fraction of the canvas width.
    pub sprite_frac: f64,
    /// Total travel as a fraction of the canvas width.
    pub travel_frac: f64,
    pub fps: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            videos_per_class: 50,
            canvas: (32, 64, 64),
            background_pool: 16,
            motion_kinds: vec![
                MotionKind::LinearRight,
                MotionKind::LinearLeft,
                MotionKind::Circular,
                MotionKind::RunThenJump,
            ],
            sprite_frac: 0.22,
            travel_frac: 0.55,
            fps: 16.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let (t, h, w) = self.canvas;
        if t < 16 || h < 64 || w < 64 {
            return Err(DataError::Config(format!("canvas {:?} is below the minimum (16, 64, 64)", self.canvas)));
        }
        if self.num_classes < 2 {
            return Err(DataError::Config("need at least two motion classes".into()));
        }
        if self.motion_kinds.len() < self.num_classes {
            return Err(DataError::Config(format!(
                "{} classes requested but only {} motion kinds given",
                self.num_classes,
                self.motion_kinds.len()
            )));
        }
        if self.videos_per_class == 0 || self.background_pool == 0 {
            return Err(DataError::Config("videos_per_class and background_pool must be positive".into()));
        }
        if !(self.sprite_frac > 0.0 && self.sprite_frac < 0.5) {
            return Err(DataError::Config("sprite_frac must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Provenance of a synthetic video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub background: usize,
    pub motion: MotionKind,
    pub slot: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    /// `(T, H, W, 3)`, values in `[0, 1]`.
    pub frames: Array4<f32>,
    pub fps: f64,
    /// Class index; only evaluation code reads it.
    pub label: Option<usize>,
    /// Ground-truth sprite masks `(T, H, W)` for synthetic videos.
    pub masks: Option<Array3<bool>>,
    pub meta: Option<SyntheticMeta>,
}

/// Label-free view of a video handed to pretraining code.
#[derive(Clone, Copy, Debug)]
pub struct Unlabeled<'a> {
    pub id: &'a str,
    pub frames: &'a Array4<f32>,
}

impl Unlabeled<'_> {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

impl Video {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled { id: &self.id, frames: &self.frames }
    }
}

pub fn unlabeled(videos: &[Video]) -> Vec<Unlabeled<'_>> {
    videos.iter().map(Video::unlabeled).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
    pub spec: Option<SyntheticSpec>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// Renders the synthetic motion dataset. Deterministic in `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let (t_len, h, w) = spec.canvas;
    let backgrounds: Vec<Array3<f32>> =
        (0..spec.background_pool).map(|b| render_background(seed, b, h, w)).collect();
    let side = ((spec.sprite_frac * w as f64).round() as usize).max(3);
    let travel = spec.travel_frac * w as f64;

    let mut videos = Vec::with_capacity(spec.num_classes * spec.videos_per_class);
    for class in 0..spec.num_classes {
        for slot in 0..spec.videos_per_class {
            let mut slot_rng = stream(seed, "synthetic-slot", &[slot as u64]);
            let background = slot_rng.gen_range(0..spec.background_pool);
            let margin = side as f64 / 2.0 + 1.0;
            let mid = (
                slot_rng.gen_range(0.3..0.7) * w as f64,
                slot_rng.gen_range(0.35..0.65) * h as f64,
            );
            let speed = slot_rng.gen_range(0.85..1.15);
            let motion = spec.motion_kinds[class];
            let mut frames = Array4::<f32>::zeros((t_len, h, w, 3));
            let mut masks = Array3::<bool>::from_elem((t_len, h, w), false);
            for t in 0..t_len {
                let u = t as f64 / t_len as f64;
                let (dx, dy) = motion.offset(u);
                let cx = (mid.0 + dx * travel * speed).clamp(margin, w as f64 - margin);
                let cy = (mid.1 + dy * travel * speed).clamp(margin, h as f64 - margin);
                let bg = &backgrounds[background];
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..3 {
                            frames[[t, y, x, c]] = bg[[y, x, c]];
                        }
                    }
                }
                draw_sprite(&mut frames, &mut masks, t, cx, cy, side);
            }
            videos.push(Video {
                id: format!("c{class}-s{slot:04}"),
                frames,
                fps: spec.fps,
                label: Some(class),
                masks: Some(masks),
                meta: Some(SyntheticMeta { background, motion, slot, seed }),
            });
        }
    }
    Ok(Dataset { videos, spec: Some(spec.clone()), seed: Some(seed) })
}

fn draw_sprite(frames: &mut Array4<f32>, masks: &mut Array3<bool>, t: usize, cx: f64, cy: f64, side: usize) {
    let (h, w) = (frames.shape()[1], frames.shape()[2]);
    let x0 = (cx - side as f64 / 2.0).round().max(0.0) as usize;
    let y0 = (cy - side as f64 / 2.0).round().max(0.0) as usize;
    let border = (side / 5).max(1);
    for y in y0..(y0 + side).min(h) {
        for x in x0..(x0 + side).min(w) {
            let edge = y - y0 < border || y0 + side - 1 - y < border || x - x0 < border || x0 + side - 1 - x < border;
            let v = if edge { 0.0 } else { 1.0 };
            for c in 0..3 {
                frames[[t, y, x, c]] = v;
            }
            masks[[t, y, x]] = true;
        }
    }
}

/// Static colour texture: a sum of random oriented gratings plus a tinted checkerboard.
fn render_background(seed: u64, index: usize, h: usize, w: usize) -> Array3<f32> {
    let mut rng = stream(seed, "background", &[index as u64]);
    let base: [f64; 3] = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
    let gratings: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(1.5..6.0) * 2.0 * std::f64::consts::PI;
            let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let amp = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
            (theta, freq, phase, amp)
        })
        .collect();
    let cell = rng.gen_range(6..16);
    let tint: [f64; 3] = [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)];
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let check = if ((x / cell) + (y / cell)) % 2 == 0 { 1.0 } else { -1.0 };
            for c in 0..3 {
                let mut val = base[c] + check * tint[c];
                for (theta, freq, phase, amp) in &gratings {
                    val += amp[c] * (freq * (u * theta.cos() + v * theta.sin()) + phase).sin();
                }
                out[[y, x, c]] = val.clamp(0.08, 0.92) as f32;
            }
        }
    }
    out
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Option<usize>,
    pub background: Option<usize>,
    pub motion: Option<MotionKind>,
    pub seed: Option<u64>,
    pub frames: usize,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: Option<u64>,
    pub spec: Option<SyntheticSpec>,
    pub videos: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn of(dataset: &Dataset) -> Self {
        Manifest {
            version: 1,
            seed: dataset.seed,
            spec: dataset.spec.clone(),
            videos: dataset
                .videos
                .iter()
                .map(|v| ManifestEntry {
                    id: v.id.clone(),
                    label: v.label,
                    background: v.meta.as_ref().map(|m| m.background),
                    motion: v.meta.as_ref().map(|m| m.motion),
                    seed: v.meta.as_ref().map(|m| m.seed),
                    frames: v.num_frames(),
                    fps: v.fps,
                })
                .collect(),
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("manifest serialises");
        hex::encode(Sha256::digest(json))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `manifest.json` and one folder of PNG frames (plus masks) per video.
/// Refuses to write into a non-empty directory.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest, DataError> {
    if dir.exists() && fs::read_dir(dir).map_err(io_err(dir))?.next().is_some() {
        return Err(DataError::Config(format!("{} exists and is not empty", dir.display())));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for v in &dataset.videos {
        let vdir = dir.join(&v.id);
        fs::create_dir_all(&vdir).map_err(io_err(&vdir))?;
        let (t_len, h, w) = (v.num_frames(), v.height(), v.width());
        for t in 0..t_len {
            let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([to_u8(v.frames[[t, y, x, 0]]), to_u8(v.frames[[t, y, x, 1]]), to_u8(v.frames[[t, y, x, 2]])])
            });
            let p = vdir.join(format!("frame_{t:05}.png"));
            img.save(&p).map_err(|e| ingest(&p, e.to_string()))?;
            if let Some(masks) = &v.masks {
                let m: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                    Luma([if masks[[t, y as usize, x as usize]] { 255 } else { 0 }])
                });
                let p = vdir.join(format!("mask_{t:05}.png"));
                m.save(&p).map_err(|e| ingest(&p, e.to_string()))?;
            }
        }
    }
    let manifest = Manifest::of(dataset);
    let mp = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&mp, json).map_err(io_err(&mp))?;
    Ok(manifest)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn is_gif(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("gif")).unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out: Vec<PathBuf> =
        fs::read_dir(dir).map_err(io_err(dir))?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>().map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}

fn decode_rgb(p: &Path, size: (usize, usize)) -> Result<RgbImage, DataError> {
    let img = image::open(p).map_err(|e| ingest(p, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (h, w) = size;
    if rgb.width() as usize == w && rgb.height() as usize == h {
        Ok(rgb)
    } else {
        Ok(image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle))
    }
}

fn stack(frames: &[RgbImage], size: (usize, usize)) -> Array4<f32> {
    let (h, w) = size;
    let mut out = Array4::<f32>::zeros((frames.len(), h, w, 3));
    for (t, f) in frames.iter().enumerate() {
        for (x, y, px) in f.enumerate_pixels() {
            for c in 0..3 {
                out[[t, y as usize, x as usize, c]] = px[c] as f32 / 255.0;
            }
        }
    }
    out
}

fn load_gif(p: &Path, size: (usize, usize)) -> Result<Vec<RgbImage>, DataError> {
    use image::codecs::gif::GifDecoder;
    use image::AnimationDecoder;
    let file = fs::File::open(p).map_err(io_err(p))?;
    let dec = GifDecoder::new(std::io::BufReader::new(file)).map_err(|e| ingest(p, e.to_string()))?;
    let frames = dec.into_frames().collect_frames().map_err(|e| ingest(p, e.to_string()))?;
    let (h, w) = size;
    Ok(frames
        .into_iter()
        .map(|f| {
            let rgb = image::DynamicImage::ImageRgba8(f.into_buffer()).to_rgb8();
            image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle)
        })
        .collect())
}

fn load_masks(paths: &[PathBuf], size: (usize, usize)) -> Result<Array3<bool>, DataError> {
    let (h, w) = size;
    let mut out = Array3::from_elem((paths.len(), h, w), false);
    for (t, p) in paths.iter().enumerate() {
        let img = image::open(p).map_err(|e| ingest(p, e.to_string()))?.to_luma8();
        let img = if img.width() as usize == w && img.height() as usize == h {
            img
        } else {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest)
        };
        for (x, y, px) in img.enumerate_pixels() {
            out[[t, y as usize, x as usize]] = px[0] >= 128;
        }
    }
    Ok(out)
}

/// Reads a folder holding one sub-folder of ordered frame images per video, or
/// one animated GIF per video. A `manifest.json`, if present, supplies labels
/// and synthetic metadata; `mask_*` images are read as sprite masks.
/// Frames are resized to `size = (H, W)` and scaled to `[0, 1]`.
pub fn load_clip_folder(path: &Path, size: (usize, usize)) -> Result<Dataset, DataError> {
    if !path.is_dir() {
        return Err(ingest(path, "not a directory"));
    }
    let manifest: Option<Manifest> = {
        let mp = path.join(MANIFEST_FILE);
        if mp.exists() {
            let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
            Some(serde_json::from_str(&text).map_err(|e| ingest(&mp, e.to_string()))?)
        } else {
            None
        }
    };
    let mut videos = Vec::new();
    for entry in sorted_entries(path)? {
        let name = entry.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name == MANIFEST_FILE || name.starts_with('.') {
            continue;
        }
        let (id, frames, masks) = if entry.is_dir() {
            let files = sorted_entries(&entry)?;
            let (mask_files, frame_files): (Vec<PathBuf>, Vec<PathBuf>) = files
                .into_iter()
                .filter(|p| is_image(p))
                .partition(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("mask_")));
            if frame_files.is_empty() {
                return Err(ingest(&entry, "folder holds no frame images"));
            }
            let imgs = frame_files.iter().map(|p| decode_rgb(p, size)).collect::<Result<Vec<_>, _>>()?;
            let masks = if mask_files.len() == frame_files.len() { Some(load_masks(&mask_files, size)?) } else { None };
            (name.clone(), imgs, masks)
        } else if is_gif(&entry) {
            let imgs = load_gif(&entry, size)?;
            if imgs.is_empty() {
                return Err(ingest(&entry, "animation holds no frames"));
            }
            let id = entry.file_stem().and_then(|s| s.to_str()).unwrap_or(&name).to_string();
            (id, imgs, None)
        } else {
            continue;
        };
        if frames.len() < 16 {
            warn!("video {id} has only {} frames", frames.len());
        }
        let row = manifest.as_ref().and_then(|m| m.videos.iter().find(|e| e.id == id));
        let meta = row.and_then(|r| match (r.background, r.motion) {
            (Some(background), Some(motion)) => Some(SyntheticMeta {
                background,
                motion,
                slot: id.rsplit('s').next().and_then(|s| s.parse().ok()).unwrap_or(0),
                seed: r.seed.unwrap_or(0),
            }),
            _ => None,
        });
        videos.push(Video {
            id,
            frames: stack(&frames, size),
            fps: row.map(|r| r.fps).unwrap_or(25.0),
            label: row.and_then(|r| r.label),
            masks,
            meta,
        });
    }
    if videos.is_empty() {
        return Err(ingest(path, "no videos found"));
    }
    Ok(Dataset { videos, spec: manifest.as_ref().and_then(|m| m.spec.clone()), seed: manifest.and_then(|m| m.seed) })
}

/// Splits a labelled dataset into `(train, test)` with `test_per_class` videos
/// of each class held out, keeping slot order.
pub fn split_per_class(videos: &[Video], test_per_class: usize) -> (Vec<Video>, Vec<Video>) {
    let mut seen = std::collections::HashMap::<usize, usize>::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for v in videos.iter().rev() {
        let c = v.label.unwrap_or(usize::MAX);
        let n = seen.entry(c).or_insert(0);
        if *n < test_per_class {
            *n += 1;
            test.push(v.clone());
        } else {
            train.push(v.clone());
        }
    }
    train.reverse();
    test.reverse();
    (train, test)
}
