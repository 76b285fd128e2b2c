//! Pretraining: batch assembly, one optimisation step, and the epoch loop with
//! checkpoints and exact resumption.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    apply_crop, apply_lowlevel, sample_global_crop, sample_local_crop, sample_lowlevel, AugmentConfig, AugmentError,
    CropParams, LevelId, LowLevelParams,
};
use crate::autograd::{Gradients, Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataio::Unlabeled;
use crate::encoder::{clips_to_tensor, Encoder, EncoderConfig, EncoderError, Mode};
use crate::geometry::{correspondence, CorrespondenceMatrix, GeometryError};
use crate::losses::{
    info_nce, random_shuffle, region_contrast, shortcut_elimination_loss, temporal_dependency_loss, total_loss,
    ContrastKind, LossConfig, LossError, LossTerms, LossValues, MiHead, OrderHead,
};
use crate::nn::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite values at step {step}: {reason}; diagnostics in {diagnostics:?}")]
    NonFinite { step: usize, reason: String, diagnostics: Option<PathBuf> },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Local clips per video.
    pub k: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Intensity levels sampled per step, one MI group each.
    pub levels_per_step: usize,
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            k: 4,
            epochs: 30,
            optimizer: AdamConfig::default(),
            seed: 0,
            levels_per_step: 32,
            device: "cpu".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k < 1 {
            return Err(TrainError::Config("k must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2 so that negatives exist".into()));
        }
        if self.levels_per_step == 0 {
            return Err(TrainError::Config("levels_per_step must be positive".into()));
        }
        if self.device != "cpu" {
            return Err(TrainError::Config(format!("unsupported device {:?}; only \"cpu\" is available", self.device)));
        }
        Ok(())
    }
}

/// Record of one augmented view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub crop: CropParams,
    pub lowlevel: LowLevelParams,
    /// Index into [`TrainingBatch::levels`].
    pub group: usize,
}

#[derive(Clone, Debug)]
pub struct VideoViews {
    pub id: String,
    pub global: Array4<f32>,
    pub global_rec: ViewRecord,
    pub locals: Vec<Array4<f32>>,
    pub local_recs: Vec<ViewRecord>,
    /// Non-identity clip orders, one per configured permutation.
    pub shuffles: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub videos: Vec<VideoViews>,
    /// Intensity level of each MI group.
    pub levels: Vec<LevelId>,
    pub k: usize,
}

impl TrainingBatch {
    pub fn num_views(&self) -> usize {
        self.videos.len() * (self.k + 1)
    }

    /// Group of every view in `(video, slot)` order; slot 0 is the global view.
    pub fn view_groups(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (b, v) in self.videos.iter().enumerate() {
            out.push((b, 0, v.global_rec.group));
            for (k, r) in v.local_recs.iter().enumerate() {
                out.push((b, k + 1, r.group));
            }
        }
        out
    }
}

/// Splits `num_views` views of `num_videos` videos (`views_per_video` each)
/// into `groups` groups so that every group has members from at least two
/// videos. Returns the group of each view in `(video, slot)` order.
pub fn assign_groups(num_videos: usize, views_per_video: usize, groups: usize, rng: &mut impl Rng) -> Vec<usize> {
    let total = num_videos * views_per_video;
    assert!(num_videos >= 2 && groups >= 1 && 2 * groups <= total, "infeasible group assignment");
    let mut remaining: Vec<Vec<usize>> = (0..num_videos)
        .map(|v| {
            let mut slots: Vec<usize> = (0..views_per_video).map(|s| v * views_per_video + s).collect();
            slots.shuffle(rng);
            slots
        })
        .collect();
    let mut out = vec![usize::MAX; total];
    for g in 0..groups {
        let mut order: Vec<usize> = (0..num_videos).collect();
        order.sort_by_key(|&v| (std::cmp::Reverse(remaining[v].len()), v));
        for &v in &order[..2] {
            let view = remaining[v].pop().expect("balanced assignment keeps two videos available");
            out[view] = g;
        }
    }
    for slots in remaining {
        for view in slots {
            out[view] = rng.gen_range(0..groups);
        }
    }
    out
}

/// Clip shapes fed to the encoder, taken from its configured input size.
fn clip_hw(enc: &EncoderConfig) -> (usize, usize) {
    (enc.input[1], enc.input[2])
}

#[allow(clippy::too_many_arguments)]
pub fn build_batch(
    videos: &[Unlabeled<'_>],
    aug: &AugmentConfig,
    enc: &EncoderConfig,
    train: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
    index: &[u64],
) -> Result<TrainingBatch, TrainError> {
    if videos.len() < 2 {
        return Err(TrainError::Config(format!("a batch needs at least two videos, got {}", videos.len())));
    }
    if aug.global_frames != enc.input[0] || aug.local_frames != enc.input[0] {
        return Err(TrainError::Config(format!(
            "augment frame counts ({}, {}) must equal the encoder input length {}",
            aug.global_frames, aug.local_frames, enc.input[0]
        )));
    }
    let k = train.k;
    let per = k + 1;
    let capacity = videos.len() * per / 2;
    let groups = train.levels_per_step.min(capacity).min(aug.grid.count());
    if groups < train.levels_per_step {
        static WARNED: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);
        let level = if WARNED.swap(true, std::sync::atomic::Ordering::Relaxed) { log::Level::Debug } else { log::Level::Warn };
        log::log!(
            level,
            "{} intensity levels requested but {} views (grid of {}) support only {groups} groups",
            train.levels_per_step,
            videos.len() * per,
            aug.grid.count()
        );
    }
    let mut rng = stream(seed, "batch-levels", index);
    let levels: Vec<LevelId> = rand::seq::index::sample(&mut rng, aug.grid.count(), groups)
        .into_iter()
        .map(|i| aug.grid.level_at(i))
        .collect();
    let assignment = assign_groups(videos.len(), per, groups, &mut rng);

    let hw = clip_hw(enc);
    let mut out = Vec::with_capacity(videos.len());
    for (b, v) in videos.iter().enumerate() {
        let mut idx = index.to_vec();
        idx.push(b as u64);
        let mut vr = stream(seed, "batch-video", &idx);
        let t_len = v.num_frames();
        let gcrop = sample_global_crop(t_len, aug, &mut vr)?;
        let make = |crop: CropParams, slot: usize, vr: &mut crate::rng::StreamRng| -> Result<(Array4<f32>, ViewRecord), TrainError> {
            let group = assignment[b * per + slot];
            let ll = sample_lowlevel(&aug.grid, Some(levels[group]), vr)?;
            let clip = apply_crop(v.frames, &crop, hw);
            let clip = apply_lowlevel(&clip, &ll, vr);
            Ok((clip, ViewRecord { crop, lowlevel: ll, group }))
        };
        let (global, global_rec) = make(gcrop, 0, &mut vr)?;
        let mut locals = Vec::with_capacity(k);
        let mut local_recs = Vec::with_capacity(k);
        for kk in 1..=k {
            let lc = sample_local_crop(kk, k, &gcrop, t_len, aug, &mut vr)?;
            let (clip, rec) = make(lc, kk, &mut vr)?;
            locals.push(clip);
            local_recs.push(rec);
        }
        let shuffles = if k >= 2 { (0..loss.permutations).map(|_| random_shuffle(k, &mut vr)).collect() } else { Vec::new() };
        out.push(VideoViews { id: v.id.to_string(), global, global_rec, locals, local_recs, shuffles });
    }
    Ok(TrainingBatch { videos: out, levels, k })
}

/// Encoder plus every head trained during pretraining.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub encoder: Encoder,
    pub mi_head: MiHead,
    pub order_head: Option<OrderHead>,
    pub store: ParamStore<T>,
}

impl Model {
    pub fn new(enc: &EncoderConfig, loss: &LossConfig, k: usize, seed: u64) -> Result<Self, TrainError> {
        Self::with_precision(enc, loss, k, seed)
    }
}

impl<T: Real> Model<T> {
    /// Same initial values as [`Model::new`], stored as `T`.
    pub fn with_precision(enc: &EncoderConfig, loss: &LossConfig, k: usize, seed: u64) -> Result<Self, TrainError> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "init", &[]);
        let encoder = Encoder::new(enc.clone(), &mut store, &mut rng)?;
        let c = enc.channels();
        let mi_head = MiHead::new(&mut store, "mi", c, loss.mi_hidden, &mut rng);
        let order_head = if k >= 2 {
            Some(OrderHead::new(&mut store, loss.order_head, c, k, loss.order_hidden, loss.temperature, &mut rng)?)
        } else {
            None
        };
        Ok(Model { encoder, mi_head, order_head, store })
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossValues,
    pub lr: f64,
}

/// Forward pass of one batch, returning the graph, total loss node and values.
pub fn forward_batch<T: Real>(
    model: &Model<T>,
    batch: &TrainingBatch,
    loss_cfg: &LossConfig,
    seed: u64,
    index: &[u64],
) -> Result<(Graph<T>, Var, LossValues), TrainError> {
    let enc = &model.encoder;
    let store = &model.store;
    let b = batch.videos.len();
    let k = batch.k;
    let mut g = Graph::<T>::new();
    let globals: Vec<&Array4<f32>> = batch.videos.iter().map(|v| &v.global).collect();
    let locals: Vec<&Array4<f32>> = batch.videos.iter().flat_map(|v| v.locals.iter()).collect();
    let xg = g.constant(clips_to_tensor(&globals));
    let xl = g.constant(clips_to_tensor(&locals));
    let eg = enc.encode(&mut g, store, xg, Mode::Video)?;
    let el = enc.encode(&mut g, store, xl, Mode::Clip)?;
    let pg = enc.pool(&mut g, &eg, false)?;
    let pl = enc.pool(&mut g, &el, false)?;
    let tau = loss_cfg.temperature;
    let mut terms = LossTerms::default();
    let inv_b = T::of(1.0 / b as f64);

    if loss_cfg.w_rc > 0.0 {
        match loss_cfg.contrast {
            ContrastKind::Region => {
                let (nc, nv) = (el.grid.cells(), eg.grid.cells());
                let cg = g.cells(eg.var);
                let zg = enc.project(&mut g, store, cg);
                let cl = g.cells(el.var);
                let zl = enc.project(&mut g, store, cl);
                let mut rng = stream(seed, "negatives", index);
                let mut parts = Vec::with_capacity(b);
                for (vb, v) in batch.videos.iter().enumerate() {
                    let targets: Vec<CorrespondenceMatrix> = v
                        .local_recs
                        .iter()
                        .map(|r| correspondence(&r.crop, &v.global_rec.crop, el.grid, eg.grid))
                        .collect::<Result<_, _>>()?;
                    let trefs: Vec<&CorrespondenceMatrix> = targets.iter().collect();
                    let local = g.slice_rows(zl, vb * k * nc, k * nc);
                    let global = g.slice_rows(zg, vb * nv, nv);
                    let mut neg_idx: Vec<usize> = (0..b * nv).filter(|j| j / nv != vb).collect();
                    if neg_idx.len() > loss_cfg.max_negatives {
                        neg_idx = rand::seq::index::sample(&mut rng, neg_idx.len(), loss_cfg.max_negatives)
                            .into_iter()
                            .map(|i| neg_idx[i])
                            .collect();
                        neg_idx.sort_unstable();
                    }
                    let negs = (!neg_idx.is_empty()).then(|| g.gather_rows(zg, &neg_idx));
                    parts.push((region_contrast(&mut g, local, global, &trefs, negs, tau)?, inv_b));
                }
                terms.rc = Some(g.weighted_sum(&parts));
            }
            ContrastKind::Nce => {
                let zg = enc.project(&mut g, store, pg);
                let zl = enc.project(&mut g, store, pl);
                let mut parts = Vec::with_capacity(b);
                for vb in 0..b {
                    let q = g.slice_rows(zl, vb * k, k);
                    let pos = g.gather_rows(zg, &vec![vb; k]);
                    let others: Vec<usize> = (0..b).filter(|&j| j != vb).collect();
                    let negs = g.gather_rows(zg, &others);
                    parts.push((info_nce(&mut g, q, pos, negs, tau)?, inv_b));
                }
                terms.nce = Some(g.weighted_sum(&parts));
            }
        }
    }

    if loss_cfg.w_mi > 0.0 {
        let feats = g.concat_rows(&[pg, pl]);
        let mut levels = Vec::with_capacity(b * (k + 1));
        let mut videos = Vec::with_capacity(b * (k + 1));
        for (vb, v) in batch.videos.iter().enumerate() {
            levels.push(v.global_rec.group);
            videos.push(vb);
        }
        for (vb, v) in batch.videos.iter().enumerate() {
            for r in &v.local_recs {
                levels.push(r.group);
                videos.push(vb);
            }
        }
        terms.mi = shortcut_elimination_loss(
            &mut g,
            store,
            &model.mi_head,
            feats,
            &levels,
            &videos,
            pl,
            pg,
            k,
            loss_cfg.lambda,
        )?;
    }

    if loss_cfg.w_td > 0.0 {
        if let Some(head) = &model.order_head {
            let n_perm = batch.videos[0].shuffles.len();
            let shuffles: Vec<Vec<Vec<usize>>> =
                (0..n_perm).map(|p| batch.videos.iter().map(|v| v.shuffles[p].clone()).collect()).collect();
            terms.td = Some(temporal_dependency_loss(&mut g, store, head, pl, pg, &shuffles)?);
        }
    }

    let (total, values) = total_loss(&mut g, &terms, loss_cfg)?;
    Ok((g, total, values))
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    step: usize,
    reason: &'a str,
    losses: Option<&'a LossValues>,
    videos: Vec<&'a str>,
    global: Vec<&'a ViewRecord>,
    local: Vec<&'a Vec<ViewRecord>>,
    levels: &'a [LevelId],
}

fn dump_diagnostics(
    dir: Option<&Path>,
    step: usize,
    reason: &str,
    losses: Option<&LossValues>,
    batch: &TrainingBatch,
) -> Option<PathBuf> {
    let dir = dir?;
    let d = Diagnostics {
        step,
        reason,
        losses,
        videos: batch.videos.iter().map(|v| v.id.as_str()).collect(),
        global: batch.videos.iter().map(|v| &v.global_rec).collect(),
        local: batch.videos.iter().map(|v| &v.local_recs).collect(),
        levels: &batch.levels,
    };
    let path = dir.join(format!("nonfinite_step{step}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&d).ok()?).ok()?;
    Some(path)
}

/// Forward, backward and one optimiser update. On any non-finite loss or
/// gradient the parameters are left untouched and diagnostics are written to
/// `diag_dir` when given.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &TrainingBatch,
    loss_cfg: &LossConfig,
    seed: u64,
    step: usize,
    epoch: usize,
    diag_dir: Option<&Path>,
) -> Result<StepMetrics, TrainError> {
    let index = [step as u64];
    let (g, total, losses) = match forward_batch(model, batch, loss_cfg, seed, &index) {
        Ok(x) => x,
        Err(TrainError::Loss(e @ LossError::NonFinite { .. })) => {
            let reason = e.to_string();
            let diagnostics = dump_diagnostics(diag_dir, step, &reason, None, batch);
            return Err(TrainError::NonFinite { step, reason, diagnostics });
        }
        Err(e) => return Err(e),
    };
    let grads: Gradients<f32> = g.backward(total);
    if !grads.is_finite() {
        let reason = "gradient contains NaN or infinity".to_string();
        let diagnostics = dump_diagnostics(diag_dir, step, &reason, Some(&losses), batch);
        return Err(TrainError::NonFinite { step, reason, diagnostics });
    }
    opt.step(&mut model.store, &grads, epoch);
    Ok(StepMetrics { step, epoch, losses, lr: opt.cfg.lr_at(epoch) })
}

/// Everything `fit` needs besides the data.
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Hash stored in checkpoints and checked on resume.
    pub config_hash: String,
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Run directory for checkpoints and metrics; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many completed epochs (simulates an interruption).
    pub stop_after_epochs: Option<usize>,
}

pub struct FitResult {
    pub model: Model,
    /// Metrics produced by this call (not including those before a resume).
    pub metrics: Vec<StepMetrics>,
    pub epochs_completed: usize,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch{epoch:04}.ckpt")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Keeps only the first `steps` records of the metrics file.
fn truncate_metrics(path: &Path, steps: usize) -> Result<(), TrainError> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let kept: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).take(steps).collect();
    let mut body = kept.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    std::fs::write(path, body).map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Config(format!("bad metrics line: {e}"))))
        .collect()
}

/// Pretrains on `data`. Each epoch visits the videos in a seed-determined
/// order and drops the final incomplete batch; all randomness is derived from
/// `(seed, epoch, batch)` so a resumed run replays exactly.
pub fn fit(data: &[Unlabeled<'_>], cfg: &FitConfig, opts: &FitOptions) -> Result<FitResult, TrainError> {
    cfg.train.validate()?;
    cfg.loss.validate()?;
    cfg.augment.validate()?;
    cfg.encoder.validate()?;
    let bs = cfg.train.batch_size;
    if data.len() < bs {
        return Err(TrainError::Config(format!("dataset of {} videos is smaller than batch size {bs}", data.len())));
    }
    let seed = cfg.train.seed;
    let mut model = Model::new(&cfg.encoder, &cfg.loss, cfg.train.k, seed)?;
    let mut opt = Adam::new(cfg.train.optimizer.clone());
    let mut start_epoch = 0;
    let mut step = 0;
    let mut best: Option<f64> = None;

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let last = dir.join(LAST_CHECKPOINT);
        if opts.resume {
            let ck = Checkpoint::load(&last)?;
            ck.check_hash(&cfg.config_hash, false)?;
            ck.restore_into(&mut model.store)?;
            ck.restore_adam(&mut opt);
            start_epoch = ck.header.epoch;
            step = ck.header.step;
            best = ck.header.best_loss;
            truncate_metrics(&dir.join(METRICS_FILE), step)?;
            info!("resumed from epoch {start_epoch}, step {step}");
        } else if last.exists() || dir.join(METRICS_FILE).exists() {
            return Err(TrainError::Config(format!(
                "{} already holds a run; pass resume or choose a new directory",
                dir.display()
            )));
        }
    }

    let mut metrics = Vec::new();
    let steps_per_epoch = data.len() / bs;
    let end = cfg.train.epochs.min(opts.stop_after_epochs.unwrap_or(usize::MAX));
    let mut epochs_completed = start_epoch;
    for epoch in start_epoch..end {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(seed, "epoch-order", &[epoch as u64]));
        let mut epoch_total = 0.0;
        let mut epoch_metrics = Vec::with_capacity(steps_per_epoch);
        for i in 0..steps_per_epoch {
            let vids: Vec<Unlabeled<'_>> = order[i * bs..(i + 1) * bs].iter().map(|&j| data[j]).collect();
            let batch = build_batch(&vids, &cfg.augment, &cfg.encoder, &cfg.train, &cfg.loss, seed, &[step as u64])?;
            let m = train_step(&mut model, &mut opt, &batch, &cfg.loss, seed, step, epoch, opts.out_dir.as_deref())?;
            epoch_total += m.losses.total;
            step += 1;
            epoch_metrics.push(m);
        }
        let mean = epoch_total / steps_per_epoch as f64;
        info!("epoch {epoch}: mean total loss {mean:.5}");
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(METRICS_FILE);
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
            for m in &epoch_metrics {
                let line = serde_json::to_string(m).expect("metrics serialise");
                writeln!(f, "{line}").map_err(io_err(&path))?;
            }
            f.sync_all().map_err(io_err(&path))?;
            let is_best = best.is_none_or(|b| mean < b);
            if is_best {
                best = Some(mean);
            }
            let ck = Checkpoint::new(&cfg.config_hash, epoch + 1, step, best, cfg.meta.clone(), &model.store, Some(&opt));
            ck.save(&dir.join(epoch_checkpoint_name(epoch + 1)))?;
            if is_best {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
            ck.save(&dir.join(LAST_CHECKPOINT))?;
        }
        metrics.extend(epoch_metrics);
        epochs_completed = epoch + 1;
    }
    Ok(FitResult { model, metrics, epochs_completed })
}
