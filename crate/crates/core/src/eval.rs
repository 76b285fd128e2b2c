//! Downstream evaluation on frozen features: linear probe, nearest-neighbour
//! retrieval, temporal-order ranking and class-agnostic activation maps.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_crop, sample_global_crop, sample_local_crop, AugmentConfig, CropParams};
use crate::autograd::Graph;
use crate::dataio::Video;
use crate::encoder::{clips_to_tensor, EncoderError, Mode};
use crate::losses::{random_shuffle, sequence};
use crate::rng::stream;
use crate::trainer::Model;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("class {0} has no training examples")]
    MissingClass(usize),
    #[error("k = {k} exceeds gallery size {gallery}")]
    KTooLarge { k: usize, gallery: usize },
    #[error("video {0} has no label")]
    Unlabeled(String),
    #[error("video {0} has no masks")]
    NoMasks(String),
    #[error("invalid evaluation input: {0}")]
    Input(String),
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Clips averaged per video feature.
    pub clips_per_video: usize,
    /// Side fraction of the centred spatial crop.
    pub center_crop: f64,
    pub probe_iters: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            clips_per_video: 10,
            center_crop: 0.9,
            probe_iters: 500,
            probe_lr: 0.5,
            probe_l2: 1e-4,
            ks: vec![1, 5, 10, 20],
            seed: 0,
        }
    }
}

/// Crop records for `n` clips of `span` frames spread evenly over a
/// `t_len`-frame video, each centre-cropped to `side`.
fn eval_crops(t_len: usize, span: usize, n_frames: usize, n: usize, side: f64) -> Vec<CropParams> {
    let dur = (span as f64 / t_len as f64).min(1.0);
    let m = (1.0 - side) / 2.0;
    (0..n)
        .map(|i| {
            let c = (i as f64 + 0.5) / n as f64;
            let c = c.clamp(dur / 2.0, 1.0 - dur / 2.0);
            CropParams {
                t0: (c - dur / 2.0).max(0.0),
                t1: (c + dur / 2.0).min(1.0),
                y0: m,
                y1: 1.0 - m,
                x0: m,
                x1: 1.0 - m,
                flip: false,
                n_frames,
            }
        })
        .collect()
}

/// Repeats frames cyclically until the video has at least `min_len` frames.
fn loop_pad(frames: &Array4<f32>, min_len: usize, id: &str) -> Array4<f32> {
    let t = frames.shape()[0];
    if t >= min_len {
        return frames.clone();
    }
    warn!("video {id} has {t} frames, fewer than the clip length {min_len}; looping");
    let idx: Vec<usize> = (0..min_len).map(|i| i % t).collect();
    frames.select(Axis(0), &idx)
}

/// Mean of pooled (pre-projection) clip-mode features over evenly spaced,
/// centre-cropped clips.
pub fn extract_video_feature(model: &Model, video: &Video, aug: &AugmentConfig, cfg: &EvalConfig) -> Result<Vec<f32>, EvalError> {
    let enc = &model.encoder;
    let [t_in, h, w] = enc.cfg.input;
    let frames = loop_pad(&video.frames, aug.clip_span_frames, &video.id);
    let crops = eval_crops(frames.shape()[0], aug.clip_span_frames, t_in, cfg.clips_per_video.max(1), cfg.center_crop);
    let clips: Vec<Array4<f32>> = crops.iter().map(|c| apply_crop(&frames, c, (h, w))).collect();
    let refs: Vec<&Array4<f32>> = clips.iter().collect();
    let mut g = Graph::<f32>::new();
    let x = g.constant(clips_to_tensor(&refs));
    let e = enc.encode(&mut g, &model.store, x, Mode::Clip)?;
    let p = enc.pool(&mut g, &e, false)?;
    let (n, c) = g.value(p).dims2();
    let data = g.value(p).data();
    Ok((0..c).map(|j| (0..n).map(|i| data[i * c + j] as f64).sum::<f64>() as f32 / n as f32).collect())
}

pub fn extract_features(model: &Model, videos: &[Video], aug: &AugmentConfig, cfg: &EvalConfig) -> Result<Array2<f64>, EvalError> {
    let c = model.encoder.cfg.channels();
    let mut out = Array2::zeros((videos.len(), c));
    for (i, v) in videos.iter().enumerate() {
        let f = extract_video_feature(model, v, aug, cfg)?;
        for (j, x) in f.into_iter().enumerate() {
            out[[i, j]] = x as f64;
        }
    }
    Ok(out)
}

pub fn labels_of(videos: &[Video]) -> Result<Vec<usize>, EvalError> {
    videos.iter().map(|v| v.label.ok_or_else(|| EvalError::Unlabeled(v.id.clone()))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub config_hash: Option<String>,
}

/// Softmax regression on z-scored frozen features, full-batch gradient descent.
pub fn linear_probe(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    cfg: &EvalConfig,
) -> Result<ProbeResult, EvalError> {
    let (n, d) = train_x.dim();
    if n != train_y.len() || test_x.nrows() != test_y.len() || test_x.ncols() != d || n == 0 {
        return Err(EvalError::Input("feature and label counts disagree".into()));
    }
    let classes = train_y.iter().chain(test_y).max().unwrap() + 1;
    for c in 0..classes {
        if !train_y.contains(&c) {
            return Err(EvalError::MissingClass(c));
        }
    }
    let mean = train_x.mean_axis(Axis(0)).unwrap();
    let std = train_x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let z = |x: &Array2<f64>| (x - &mean) / &std;
    let (xtr, xte) = (z(train_x), z(test_x));
    let mut wts = Array2::<f64>::zeros((d, classes));
    let mut bias = ndarray::Array1::<f64>::zeros(classes);
    let mut onehot = Array2::<f64>::zeros((n, classes));
    for (i, &y) in train_y.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    let softmax = |logits: &mut Array2<f64>| {
        for mut row in logits.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
    };
    for _ in 0..cfg.probe_iters {
        let mut p = xtr.dot(&wts) + &bias;
        softmax(&mut p);
        let err = (p - &onehot) / n as f64;
        let gw = xtr.t().dot(&err) + cfg.probe_l2 * &wts;
        let gb = err.sum_axis(Axis(0));
        wts = wts - cfg.probe_lr * gw;
        bias = bias - cfg.probe_lr * gb;
    }
    let scores = xte.dot(&wts) + &bias;
    let mut correct = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (row, &y) in scores.rows().into_iter().zip(test_y) {
        let pred = argmax(row.iter().copied());
        count[y] += 1;
        if pred == y {
            correct[y] += 1;
        }
    }
    let per_class = correct.iter().zip(&count).map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 }).collect();
    let top1 = correct.iter().sum::<usize>() as f64 / test_y.len().max(1) as f64;
    Ok(ProbeResult { top1, per_class, config_hash: None })
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `k -> R@k`.
    pub recall: BTreeMap<usize, f64>,
    pub queries: usize,
    pub gallery: usize,
}

impl RetrievalResult {
    pub fn is_monotone(&self) -> bool {
        self.recall.values().zip(self.recall.values().skip(1)).all(|(a, b)| a <= b)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut s = String::from("k,recall\n");
        for (k, r) in &self.recall {
            s.push_str(&format!("{k},{r:.6}\n"));
        }
        std::fs::write(path, s).map_err(|e| EvalError::Io { path: path.display().to_string(), reason: e.to_string() })
    }
}

/// Cosine nearest-neighbour retrieval; R@k is the share of queries with a
/// same-class item among their top `k` gallery neighbours.
pub fn retrieve(
    query: &Array2<f64>,
    query_y: &[usize],
    gallery: &Array2<f64>,
    gallery_y: &[usize],
    ks: &[usize],
) -> Result<RetrievalResult, EvalError> {
    let ng = gallery.nrows();
    if let Some(&k) = ks.iter().find(|&&k| k > ng || k == 0) {
        return Err(EvalError::KTooLarge { k, gallery: ng });
    }
    if query.ncols() != gallery.ncols() || query.nrows() != query_y.len() || ng != gallery_y.len() {
        return Err(EvalError::Input("feature and label counts disagree".into()));
    }
    let unit = |x: &Array2<f64>| {
        let mut y = x.clone();
        for mut r in y.rows_mut() {
            let n = r.dot(&r).sqrt().max(1e-12);
            r.mapv_inplace(|v| v / n);
        }
        y
    };
    let sims = unit(query).dot(&unit(gallery).t());
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (qi, row) in sims.rows().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..ng).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let first = order.iter().position(|&j| gallery_y[j] == query_y[qi]);
        for (&k, h) in hits.iter_mut() {
            if first.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    let nq = query.nrows().max(1) as f64;
    Ok(RetrievalResult {
        recall: hits.into_iter().map(|(k, h)| (k, h as f64 / nq)).collect(),
        queries: query.nrows(),
        gallery: ng,
    })
}

/// Share of videos whose correctly ordered clips score above one random
/// non-identity shuffle under the order head.
pub fn order_accuracy(model: &Model, videos: &[Video], aug: &AugmentConfig, k: usize, seed: u64) -> Result<f64, EvalError> {
    let head = model.order_head.as_ref().ok_or_else(|| EvalError::Input("model has no order head".into()))?;
    let enc = &model.encoder;
    let [_, h, w] = enc.cfg.input;
    let mut wins = 0usize;
    for (vi, v) in videos.iter().enumerate() {
        let mut rng = stream(seed, "order-eval", &[vi as u64]);
        let t_len = v.num_frames();
        let gcrop = sample_global_crop(t_len, aug, &mut rng).map_err(|e| EvalError::Input(e.to_string()))?;
        let mut clips = Vec::with_capacity(k);
        for kk in 1..=k {
            let lc = sample_local_crop(kk, k, &gcrop, t_len, aug, &mut rng).map_err(|e| EvalError::Input(e.to_string()))?;
            clips.push(apply_crop(&v.frames, &lc, (h, w)));
        }
        let global = apply_crop(&v.frames, &gcrop, (h, w));
        let perm = random_shuffle(k, &mut rng);
        let mut g = Graph::<f32>::new();
        let xg = g.constant(clips_to_tensor(&[&global]));
        let refs: Vec<&Array4<f32>> = clips.iter().collect();
        let xl = g.constant(clips_to_tensor(&refs));
        let eg = enc.encode(&mut g, &model.store, xg, Mode::Video)?;
        let el = enc.encode(&mut g, &model.store, xl, Mode::Clip)?;
        let pg = enc.pool(&mut g, &eg, false)?;
        let pl = enc.pool(&mut g, &el, false)?;
        let ordered = sequence(&mut g, pl, &[(0..k).collect()]);
        let shuffled = sequence(&mut g, pl, &[perm]);
        let s_ord = head.score(&mut g, &model.store, &ordered, pg).map_err(|e| EvalError::Input(e.to_string()))?;
        let s_shuf = head.score(&mut g, &model.store, &shuffled, pg).map_err(|e| EvalError::Input(e.to_string()))?;
        if g.scalar(s_ord) > g.scalar(s_shuf) {
            wins += 1;
        }
    }
    Ok(wins as f64 / videos.len().max(1) as f64)
}

/// Min-max normalisation to `[0, 1]`; a constant map becomes all ones.
pub fn normalize_map(map: &mut Array3<f32>) {
    let lo = map.fold(f32::INFINITY, |a, &b| a.min(b));
    let hi = map.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    if hi - lo <= 1e-12 {
        map.fill(1.0);
    } else {
        map.mapv_inplace(|v| (v - lo) / (hi - lo));
    }
}

pub const SCORE_FLOOR: f64 = 1e-3;

/// Mean activation inside the mask over mean activation outside it (floored).
pub fn foreground_score(map: &Array3<f32>, mask: &Array3<bool>) -> f64 {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in map.iter().zip(mask.iter()) {
        if m {
            si += v as f64;
            ni += 1;
        } else {
            so += v as f64;
            no += 1;
        }
    }
    let inside = if ni == 0 { 0.0 } else { si / ni as f64 };
    let outside = if no == 0 { 0.0 } else { so / no as f64 };
    inside / outside.max(SCORE_FLOOR)
}

#[derive(Clone, Debug)]
pub struct CaamResult {
    /// `(T, H, W)` at the source video's resolution, values in `[0, 1]`.
    pub maps: Array3<f32>,
    pub foreground_score: f64,
}

/// Channel-summed last-stage activation of the full-frame global view,
/// min-max normalised and upsampled to every source frame.
pub fn caam(model: &Model, video: &Video) -> Result<CaamResult, EvalError> {
    let masks = video.masks.as_ref().ok_or_else(|| EvalError::NoMasks(video.id.clone()))?;
    let enc = &model.encoder;
    let [t_in, h, w] = enc.cfg.input;
    let full = CropParams::full(t_in);
    let clip = apply_crop(&video.frames, &full, (h, w));
    let fm = enc.feature_map(&model.store, &clip, full, Mode::Video)?;
    let (c, gt, gh, gw) = (fm.channels(), fm.grid.t, fm.grid.h, fm.grid.w);
    let vals = fm.values.data();
    let mut grid = Array3::<f32>::zeros((gt, gh, gw));
    for ch in 0..c {
        for ((t, y, x), g) in grid.indexed_iter_mut() {
            *g += vals[((ch * gt + t) * gh + y) * gw + x];
        }
    }
    let (vt, vh, vw) = (video.frames.shape()[0], video.frames.shape()[1], video.frames.shape()[2]);
    let mut maps = Array3::<f32>::zeros((vt, vh, vw));
    let coord = |p: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let s = ((p as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let a = s.floor() as usize;
        (a, (a + 1).min(n_in - 1), (s - a as f64) as f32)
    };
    for t in 0..vt {
        let ti = ((t as f64 + 0.5) / vt as f64 * gt as f64).floor() as usize;
        let ti = ti.min(gt - 1);
        for y in 0..vh {
            let (ya, yb, fy) = coord(y, vh, gh);
            for x in 0..vw {
                let (xa, xb, fx) = coord(x, vw, gw);
                let top = grid[[ti, ya, xa]] * (1.0 - fx) + grid[[ti, ya, xb]] * fx;
                let bot = grid[[ti, yb, xa]] * (1.0 - fx) + grid[[ti, yb, xb]] * fx;
                maps[[t, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    normalize_map(&mut maps);
    let foreground_score = foreground_score(&maps, masks);
    Ok(CaamResult { maps, foreground_score })
}

/// Frames `frames` with the map blended in red, tiled left to right.
pub fn write_caam_png(video: &Video, maps: &Array3<f32>, frames: &[usize], path: &Path) -> Result<(), EvalError> {
    let (h, w) = (video.frames.shape()[1], video.frames.shape()[2]);
    let mut img = image::RgbImage::new((w * frames.len()) as u32, h as u32);
    for (i, &t) in frames.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let a = maps[[t, y, x]];
                let px: Vec<u8> = (0..3)
                    .map(|c| {
                        let base = video.frames[[t, y, x, c]] * 0.5;
                        let heat = if c == 0 { a } else { 0.0 };
                        ((base + 0.5 * heat).clamp(0.0, 1.0) * 255.0).round() as u8
                    })
                    .collect();
                img.put_pixel((i * w + x) as u32, y as u32, image::Rgb([px[0], px[1], px[2]]));
            }
        }
    }
    img.save(path).map_err(|e| EvalError::Io { path: path.display().to_string(), reason: e.to_string() })
}
