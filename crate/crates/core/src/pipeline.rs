//! End-to-end runs: data preparation, pretraining and the evaluation suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::CropParams;
use crate::config::RunConfig;
use crate::dataio::{generate_synthetic, load_clip_folder, split_per_class, unlabeled, DataError, Video};
use crate::geometry::{correspondence, correspondence_oracle, GeometryError, GridShape};
use crate::eval::{
    caam, extract_features, labels_of, linear_probe, order_accuracy, retrieve, EvalError, ProbeResult, RetrievalResult,
};
use crate::trainer::{fit, FitConfig, FitOptions, FitResult, Model, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Train/test split described by the data block.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Vec<Video>, Vec<Video>), DataError> {
    let ds = match &cfg.data.folder {
        Some(dir) => load_clip_folder(dir, cfg.data.resize)?,
        None => generate_synthetic(&cfg.data.synthetic, cfg.data.seed)?,
    };
    Ok(split_per_class(&ds.videos, cfg.data.test_per_class))
}

pub fn fit_config(cfg: &RunConfig) -> FitConfig {
    FitConfig {
        augment: cfg.augment.clone(),
        encoder: cfg.encoder.clone(),
        loss: cfg.loss.clone(),
        train: cfg.train.clone(),
        config_hash: cfg.hash(),
        meta: serde_json::to_value(cfg).expect("config serialises"),
    }
}

/// Pretrains on the label-free view of `train`.
pub fn pretrain(cfg: &RunConfig, train: &[Video], opts: &FitOptions) -> Result<FitResult, TrainError> {
    fit(&unlabeled(train), &fit_config(cfg), opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub probe: ProbeResult,
    pub retrieval: RetrievalResult,
    /// Mean CAAM foreground score over test videos with masks.
    pub caam_foreground: Option<f64>,
    /// Share of two-phase test videos whose true clip order outscores a shuffle.
    pub order_accuracy: Option<f64>,
    pub config_hash: String,
}

/// Probe, retrieval (test queries against the train gallery), CAAM and
/// temporal-order evaluation of a pretrained model.
pub fn evaluate(model: &Model, cfg: &RunConfig, train: &[Video], test: &[Video]) -> Result<EvalReport, EvalError> {
    let ftr = extract_features(model, train, &cfg.augment, &cfg.eval)?;
    let fte = extract_features(model, test, &cfg.augment, &cfg.eval)?;
    let (ytr, yte) = (labels_of(train)?, labels_of(test)?);
    let mut probe = linear_probe(&ftr, &ytr, &fte, &yte, &cfg.eval)?;
    probe.config_hash = Some(cfg.hash());
    let ks: Vec<usize> = cfg.eval.ks.iter().copied().filter(|&k| k <= train.len()).collect();
    let retrieval = retrieve(&fte, &yte, &ftr, &ytr, &ks)?;
    let masked: Vec<&Video> = test.iter().filter(|v| v.masks.is_some()).collect();
    let caam_foreground = if masked.is_empty() {
        None
    } else {
        let mut s = 0.0;
        for v in &masked {
            s += caam(model, v)?.foreground_score;
        }
        Some(s / masked.len() as f64)
    };
    let two_phase: Vec<Video> =
        test.iter().filter(|v| v.meta.as_ref().is_some_and(|m| m.motion.is_two_phase())).cloned().collect();
    let order_accuracy = match (&model.order_head, two_phase.is_empty()) {
        (Some(_), false) => Some(order_accuracy(model, &two_phase, &cfg.augment, cfg.train.k, cfg.eval.seed)?),
        _ => None,
    };
    Ok(EvalReport { probe, retrieval, caam_foreground, order_accuracy, config_hash: cfg.hash() })
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value).expect("serialisable"))
}

/// Outcome of comparing exact correspondences with the voxel oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub trials: usize,
    pub resolution: usize,
    pub max_deviation: f64,
    pub bound: f64,
    /// Largest `|row sum - 1|` over all contained pairs.
    pub max_row_sum_error: f64,
    /// The identity configuration yields the identity matrix exactly.
    pub identity_exact: bool,
    pub passed: bool,
}

fn random_interval(rng: &mut impl rand::Rng, lo: f64, hi: f64, min_frac: f64) -> (f64, f64) {
    let len = (hi - lo) * rng.gen_range(min_frac..=1.0);
    let a = lo + rng.gen_range(0.0..=(hi - lo - len));
    (a, (a + len).min(hi))
}

/// Random contained `(local, global)` crop pair with random grids up to `(8, 4, 4)`.
pub fn random_crop_pair(rng: &mut impl rand::Rng) -> (CropParams, CropParams, GridShape, GridShape) {
    let mut shape = || GridShape::new(rng.gen_range(1..=8), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (ls, gs) = (shape(), shape());
    let mut crop = |outer: Option<&CropParams>| {
        let (o_t, o_y, o_x) = outer.map_or(((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), |o| ((o.t0, o.t1), (o.y0, o.y1), (o.x0, o.x1)));
        let t = random_interval(rng, o_t.0, o_t.1, 0.1);
        let y = random_interval(rng, o_y.0, o_y.1, 0.1);
        let x = random_interval(rng, o_x.0, o_x.1, 0.1);
        CropParams { t0: t.0, t1: t.1, y0: y.0, y1: y.1, x0: x.0, x1: x.1, flip: rng.gen_bool(0.5), n_frames: 16 }
    };
    let global = crop(None);
    let local = crop(Some(&global));
    (local, global, ls, gs)
}

/// Checks `trials` random pairs against the oracle at `resolution`; the
/// deviation bound is `3 / resolution`.
pub fn check_geometry(trials: usize, resolution: usize, seed: u64) -> Result<GeometryReport, GeometryError> {
    let mut rng = crate::rng::stream(seed, "check-geometry", &[]);
    let (mut max_dev, mut max_row) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (lp, gp, ls, gs) = random_crop_pair(&mut rng);
        let exact = correspondence(&lp, &gp, ls, gs)?;
        let oracle = correspondence_oracle(&lp, &gp, ls, gs, resolution);
        max_dev = max_dev.max(exact.max_abs_diff(&oracle));
        if lp.contained_in(&gp) {
            for s in exact.row_sums() {
                max_row = max_row.max((s - 1.0).abs());
            }
        }
    }
    let shape = GridShape::new(4, 4, 4);
    let full = CropParams::full(16);
    let id = correspondence(&full, &full, shape, shape)?;
    let identity_exact =
        (0..id.rows()).all(|i| (0..id.cols()).all(|j| id.get(i, j) == if i == j { 1.0 } else { 0.0 }));
    let bound = 3.0 / resolution as f64;
    let passed = max_dev <= bound && max_row <= 1e-9 && identity_exact;
    Ok(GeometryReport { trials, resolution, max_deviation: max_dev, bound, max_row_sum_error: max_row, identity_exact, passed })
}
