//! Controllable augmentations.
//!
//! Position transforms (spatio-temporal crop and horizontal flip) are described
//! by [`CropParams`]; photometric transforms (colour jitter and Gaussian blur)
//! by [`LowLevelParams`]. Every sampler returns the exact record it drew, and
//! every `apply_*` function is a pure function of its inputs, so any view can
//! be regenerated and its geometry recomputed later.

use log::warn;
use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("video has {frames} frames, need at least {needed}")]
    VideoTooShort { frames: usize, needed: usize },
    #[error("invalid crop parameters: {0}")]
    InvalidCrop(String),
    #[error("invalid intensity level {0:?} for this grid")]
    InvalidLevel(LevelId),
    #[error("invalid augmentation configuration: {0}")]
    Config(String),
}

/// Normalised spatio-temporal box plus flip flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub t0: f64,
    pub t1: f64,
    pub y0: f64,
    pub y1: f64,
    pub x0: f64,
    pub x1: f64,
    pub flip: bool,
    pub n_frames: usize,
}

impl CropParams {
    /// Whole video, no flip.
    pub fn full(n_frames: usize) -> Self {
        CropParams { t0: 0.0, t1: 1.0, y0: 0.0, y1: 1.0, x0: 0.0, x1: 1.0, flip: false, n_frames }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let ok = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
        if !ok(self.t0, self.t1) || !ok(self.y0, self.y1) || !ok(self.x0, self.x1) || self.n_frames == 0 {
            return Err(AugmentError::InvalidCrop(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn center_t(&self) -> f64 {
        0.5 * (self.t0 + self.t1)
    }

    pub fn spatial_area(&self) -> f64 {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    /// Whether this box lies inside `outer` on all three axes.
    pub fn contained_in(&self, outer: &CropParams) -> bool {
        self.t0 >= outer.t0
            && self.t1 <= outer.t1
            && self.y0 >= outer.y0
            && self.y1 <= outer.y1
            && self.x0 >= outer.x0
            && self.x1 <= outer.x1
    }

    /// Source frame indices sampled evenly inside `[t0, t1)` of a `video_t`-frame video.
    pub fn frame_indices(&self, video_t: usize) -> Vec<usize> {
        let n = self.n_frames as f64;
        (0..self.n_frames)
            .map(|i| {
                let pos = self.t0 + (i as f64 + 0.5) / n * (self.t1 - self.t0);
                ((pos * video_t as f64).floor() as usize).min(video_t - 1)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LevelId {
    pub b: usize,
    pub c: usize,
    pub s: usize,
    pub h: usize,
    pub g: usize,
}

/// Discrete intensity levels for photometric augmentation. Each axis splits
/// `[0, base)` into equal buckets; a level picks one bucket per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntensityGrid {
    pub n_bcs: usize,
    pub n_h: usize,
    pub n_g: usize,
    /// Jitter strengths for brightness, contrast, saturation, hue.
    pub base: [f64; 4],
    /// Upper end of the blur sigma range, in pixels.
    pub blur_sigma_max: f64,
}

impl Default for IntensityGrid {
    fn default() -> Self {
        IntensityGrid { n_bcs: 4, n_h: 2, n_g: 4, base: [0.4, 0.4, 0.4, 0.1], blur_sigma_max: 1.5 }
    }
}

impl IntensityGrid {
    pub fn new(n_bcs: usize, n_h: usize, n_g: usize) -> Self {
        IntensityGrid { n_bcs, n_h, n_g, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.n_bcs == 0 || self.n_h == 0 || self.n_g == 0 {
            return Err(AugmentError::Config("every intensity axis needs at least one level".into()));
        }
        if self.base.iter().any(|&b| !(b >= 0.0)) || self.base[3] > 0.5 || !(self.blur_sigma_max >= 0.0) {
            return Err(AugmentError::Config(format!("bad base magnitudes {:?}", self.base)));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n_bcs.pow(3) * self.n_h * self.n_g
    }

    pub fn contains(&self, l: &LevelId) -> bool {
        l.b < self.n_bcs && l.c < self.n_bcs && l.s < self.n_bcs && l.h < self.n_h && l.g < self.n_g
    }

    pub fn index_of(&self, l: &LevelId) -> usize {
        (((l.b * self.n_bcs + l.c) * self.n_bcs + l.s) * self.n_h + l.h) * self.n_g + l.g
    }

    pub fn level_at(&self, mut idx: usize) -> LevelId {
        let g = idx % self.n_g;
        idx /= self.n_g;
        let h = idx % self.n_h;
        idx /= self.n_h;
        let s = idx % self.n_bcs;
        idx /= self.n_bcs;
        let c = idx % self.n_bcs;
        idx /= self.n_bcs;
        LevelId { b: idx, c, s, h, g }
    }

    pub fn levels(&self) -> impl Iterator<Item = LevelId> + '_ {
        (0..self.count()).map(|i| self.level_at(i))
    }

    /// Half-open bucket `[lo, hi)` for `level` of `n` over `[0, base)`.
    pub fn bucket(base: f64, n: usize, level: usize) -> (f64, f64) {
        let w = base / n as f64;
        (w * level as f64, w * (level + 1) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowLevelParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_radius: usize,
    pub blur_sigma: f64,
    pub level: LevelId,
}

impl LowLevelParams {
    pub fn identity() -> Self {
        LowLevelParams {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            blur_radius: 0,
            blur_sigma: 0.0,
            level: LevelId { b: 0, c: 0, s: 0, h: 0, g: 0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Minimum side fraction of the weak global crop.
    pub weak_min: f64,
    /// Local box area as a fraction of the global box.
    pub local_area: (f64, f64),
    /// Local box aspect ratio range (height / width).
    pub local_aspect: (f64, f64),
    /// Source frames spanned by one local clip.
    pub clip_span_frames: usize,
    /// Frames sampled per local clip.
    pub local_frames: usize,
    /// Frames sampled sparsely over the whole video for the global view.
    pub global_frames: usize,
    pub flip_prob: f64,
    pub grid: IntensityGrid,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_min: 0.9,
            local_area: (0.3, 0.8),
            local_aspect: (0.75, 4.0 / 3.0),
            clip_span_frames: 16,
            local_frames: 16,
            global_frames: 16,
            flip_prob: 0.5,
            grid: IntensityGrid::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.weak_min > 0.0 && self.weak_min <= 1.0) {
            return Err(AugmentError::Config("weak_min must lie in (0, 1]".into()));
        }
        let (lo, hi) = self.local_area;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(AugmentError::Config("local_area must satisfy 0 < lo <= hi <= 1".into()));
        }
        let (alo, ahi) = self.local_aspect;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(AugmentError::Config("local_aspect must satisfy 0 < lo <= hi".into()));
        }
        if self.clip_span_frames == 0 || self.local_frames == 0 || self.global_frames == 0 {
            return Err(AugmentError::Config("frame counts must be positive".into()));
        }
        self.grid.validate()
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Weak crop over the full temporal span.
pub fn sample_global_crop(video_t: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<CropParams, AugmentError> {
    if video_t < cfg.global_frames {
        return Err(AugmentError::VideoTooShort { frames: video_t, needed: cfg.global_frames });
    }
    let hf = uniform(rng, cfg.weak_min, 1.0);
    let wf = uniform(rng, cfg.weak_min, 1.0);
    let y0 = uniform(rng, 0.0, 1.0 - hf);
    let x0 = uniform(rng, 0.0, 1.0 - wf);
    let flip = rng.gen_bool(cfg.flip_prob);
    Ok(CropParams {
        t0: 0.0,
        t1: 1.0,
        y0,
        y1: (y0 + hf).min(1.0),
        x0,
        x1: (x0 + wf).min(1.0),
        flip,
        n_frames: cfg.global_frames,
    })
}

/// Local clip `k` of `num_clips` (1-based): its temporal centre is drawn from the
/// k-th of `num_clips` equal segments and its box lies inside the global box.
pub fn sample_local_crop(
    k: usize,
    num_clips: usize,
    global: &CropParams,
    video_t: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<CropParams, AugmentError> {
    if k == 0 || k > num_clips {
        return Err(AugmentError::Config(format!("clip index {k} outside 1..={num_clips}")));
    }
    global.validate()?;
    let dur = (cfg.clip_span_frames as f64 / video_t as f64).min(1.0);
    let seg_lo = (k - 1) as f64 / num_clips as f64;
    let seg_hi = k as f64 / num_clips as f64;
    let lo = seg_lo.max(dur / 2.0);
    let hi = seg_hi.min(1.0 - dur / 2.0);
    let center = if lo <= hi {
        uniform(rng, lo, hi)
    } else {
        let c = (0.5 * (seg_lo + seg_hi)).clamp(dur / 2.0, 1.0 - dur / 2.0);
        warn!("clip {k}/{num_clips} of {dur:.3} video length cannot centre in its segment; clamped to {c:.3}");
        c
    };
    let t0 = (center - dur / 2.0).max(0.0);
    let t1 = (center + dur / 2.0).min(1.0);

    let area = uniform(rng, cfg.local_area.0, cfg.local_area.1);
    let aspect = uniform(rng, cfg.local_aspect.0.ln(), cfg.local_aspect.1.ln()).exp();
    let mut hf = (area * aspect).sqrt();
    let mut wf = area / hf;
    if hf > 1.0 {
        hf = 1.0;
        wf = area;
    }
    if wf > 1.0 {
        wf = 1.0;
        hf = area;
    }
    let oy = uniform(rng, 0.0, 1.0 - hf);
    let ox = uniform(rng, 0.0, 1.0 - wf);
    let (gh, gw) = (global.y1 - global.y0, global.x1 - global.x0);
    let y0 = global.y0 + oy * gh;
    let x0 = global.x0 + ox * gw;
    let flip = rng.gen_bool(cfg.flip_prob);
    Ok(CropParams {
        t0,
        t1,
        y0,
        y1: (y0 + hf * gh).min(global.y1),
        x0,
        x1: (x0 + wf * gw).min(global.x1),
        flip,
        n_frames: cfg.local_frames,
    })
}

/// Draws photometric magnitudes inside the buckets of `level` (drawn uniformly
/// from the grid when `None`).
pub fn sample_lowlevel(
    grid: &IntensityGrid,
    level: Option<LevelId>,
    rng: &mut impl Rng,
) -> Result<LowLevelParams, AugmentError> {
    let level = match level {
        Some(l) if grid.contains(&l) => l,
        Some(l) => return Err(AugmentError::InvalidLevel(l)),
        None => grid.level_at(rng.gen_range(0..grid.count())),
    };
    let mut draw = |base: f64, n: usize, lvl: usize| {
        let (lo, hi) = IntensityGrid::bucket(base, n, lvl);
        uniform(rng, lo, hi)
    };
    let brightness = draw(grid.base[0], grid.n_bcs, level.b);
    let contrast = draw(grid.base[1], grid.n_bcs, level.c);
    let saturation = draw(grid.base[2], grid.n_bcs, level.s);
    let hue = draw(grid.base[3], grid.n_h, level.h);
    let blur_sigma = draw(grid.blur_sigma_max, grid.n_g, level.g);
    let blur_radius = if blur_sigma > 0.0 { (2.0 * blur_sigma).ceil().max(1.0) as usize } else { 0 };
    Ok(LowLevelParams { brightness, contrast, saturation, hue, blur_radius, blur_sigma, level })
}

/// Crops, resizes and optionally mirrors a `(T, H, W, 3)` video into a clip of
/// `p.n_frames` frames of size `out_hw`.
pub fn apply_crop(frames: &Array4<f32>, p: &CropParams, out_hw: (usize, usize)) -> Array4<f32> {
    let (vt, vh, vw) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    let (oh, ow) = out_hw;
    let idx = p.frame_indices(vt);
    // Pixel-centre aligned source coordinates for every output row and column.
    let src = |lo: f64, hi: f64, n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|j| {
                let s = lo * n_in as f64 + (j as f64 + 0.5) * (hi - lo) * n_in as f64 / n_out as f64 - 0.5;
                let s = s.clamp(0.0, (n_in - 1) as f64);
                let a = s.floor() as usize;
                let b = (a + 1).min(n_in - 1);
                (a, b, (s - a as f64) as f32)
            })
            .collect()
    };
    let rows = src(p.y0, p.y1, vh, oh);
    let cols = src(p.x0, p.x1, vw, ow);
    let mut out = Array4::<f32>::zeros((idx.len(), oh, ow, 3));
    for (ti, &t) in idx.iter().enumerate() {
        let f = frames.index_axis(Axis(0), t);
        for (i, &(ya, yb, fy)) in rows.iter().enumerate() {
            for (j, &(xa, xb, fx)) in cols.iter().enumerate() {
                let jj = if p.flip { ow - 1 - j } else { j };
                for c in 0..3 {
                    let top = f[[ya, xa, c]] * (1.0 - fx) + f[[ya, xb, c]] * fx;
                    let bot = f[[yb, xa, c]] * (1.0 - fx) + f[[yb, xb, c]] * fx;
                    out[[ti, i, jj, c]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

/// Mirrors every frame horizontally.
pub fn hflip(clip: &Array4<f32>) -> Array4<f32> {
    let mut out = clip.clone();
    out.invert_axis(Axis(2));
    out.as_standard_layout().to_owned()
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn adjust_brightness(clip: &mut Array4<f32>, factor: f32) {
    clip.mapv_inplace(|v| (v * factor).clamp(0.0, 1.0));
}

/// Blends towards the mean luminance of the whole clip.
pub fn adjust_contrast(clip: &mut Array4<f32>, factor: f32) {
    let n = (clip.len() / 3) as f64;
    let mut mean = 0.0f64;
    for px in clip.lanes(Axis(3)) {
        mean += luma(px[0], px[1], px[2]) as f64;
    }
    let mean = (mean / n) as f32;
    clip.mapv_inplace(|v| (mean + factor * (v - mean)).clamp(0.0, 1.0));
}

pub fn adjust_saturation(clip: &mut Array4<f32>, factor: f32) {
    for mut px in clip.lanes_mut(Axis(3)) {
        let g = luma(px[0], px[1], px[2]);
        for c in 0..3 {
            px[c] = (g + factor * (px[c] - g)).clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let d = mx - mn;
    let h = if d <= 0.0 {
        0.0
    } else if mx == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if mx == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if mx <= 0.0 { 0.0 } else { d / mx };
    (h, s, mx)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` (fraction of a full turn).
pub fn adjust_hue(clip: &mut Array4<f32>, shift: f32) {
    for mut px in clip.lanes_mut(Axis(3)) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
}

/// Separable spatial Gaussian blur of every frame; borders replicate edge pixels.
pub fn gaussian_blur(clip: &mut Array4<f32>, sigma: f64, radius: usize) {
    if sigma <= 1e-6 || radius == 0 {
        return;
    }
    let kernel: Vec<f32> = {
        let raw: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let d = i as f64 - radius as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| (v / s) as f32).collect()
    };
    let (t_len, h, w) = (clip.shape()[0], clip.shape()[1], clip.shape()[2]);
    let r = radius as isize;
    let mut tmp = clip.clone();
    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += kv * clip[[t, y, xx, c]];
                    }
                    tmp[[t, y, x, c]] = acc;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                        acc += kv * tmp[[t, yy, x, c]];
                    }
                    clip[[t, y, x, c]] = acc.clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Colour jitter then blur. Jitter factors are drawn once per clip from `rng`
/// (`[1 - m, 1 + m]` for brightness, contrast and saturation, `[-m, m]` for
/// hue), so every frame of the clip receives the same transform.
pub fn apply_lowlevel(clip: &Array4<f32>, p: &LowLevelParams, rng: &mut impl Rng) -> Array4<f32> {
    let mut out = clip.clone();
    let mut factor = |m: f64| if m > 0.0 { rng.gen_range((1.0 - m).max(0.0)..1.0 + m) as f32 } else { 1.0 };
    let b = factor(p.brightness);
    let c = factor(p.contrast);
    let s = factor(p.saturation);
    let h = if p.hue > 0.0 { rng.gen_range(-p.hue..p.hue) as f32 } else { 0.0 };
    if b != 1.0 {
        adjust_brightness(&mut out, b);
    }
    if c != 1.0 {
        adjust_contrast(&mut out, c);
    }
    if s != 1.0 {
        adjust_saturation(&mut out, s);
    }
    if h != 0.0 {
        adjust_hue(&mut out, h);
    }
    gaussian_blur(&mut out, p.blur_sigma, p.blur_radius);
    out
}
