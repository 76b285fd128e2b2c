//! Contrastive, mutual-information and temporal-order objectives.
//!
//! Similarities are `exp(cos / tau)`, so every contrastive loss is a softmax
//! cross-entropy over cosine logits divided by the temperature.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, GraphError, Var};
use crate::geometry::CorrespondenceMatrix;
use crate::nn::{GruCell, Mlp};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("{0} needs at least one negative")]
    NoNegatives(&'static str),
    #[error("correspondence row {0} sums to zero")]
    EmptyTargetRow(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss term {term}: {value}")]
    NonFinite { term: &'static str, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    /// Soft region contrast over feature-grid cells.
    Region,
    /// Instance-level InfoNCE on pooled features.
    Nce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderHeadKind {
    Mlp,
    Recurrent,
    RecurrentMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub contrast: ContrastKind,
    pub w_rc: f64,
    pub w_mi: f64,
    pub w_td: f64,
    /// Gradient-reversal scale.
    pub lambda: f64,
    /// Cap on cross-video negative cells per video.
    pub max_negatives: usize,
    /// Shuffled orderings per video for the temporal term.
    pub permutations: usize,
    pub order_head: OrderHeadKind,
    pub mi_hidden: usize,
    pub order_hidden: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            contrast: ContrastKind::Region,
            w_rc: 1.0,
            w_mi: 1.0,
            w_td: 1.0,
            lambda: 1.0,
            max_negatives: 1024,
            permutations: 1,
            order_head: OrderHeadKind::Recurrent,
            mi_hidden: 64,
            order_hidden: 64,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0) {
            return Err(LossError::Config("temperature must be positive".into()));
        }
        for (name, w) in [("w_rc", self.w_rc), ("w_mi", self.w_mi), ("w_td", self.w_td)] {
            if !(w >= 0.0) {
                return Err(LossError::Config(format!("{name} must be non-negative")));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(LossError::Config("lambda must be non-negative".into()));
        }
        if self.permutations == 0 || self.mi_hidden == 0 || self.order_hidden == 0 {
            return Err(LossError::Config("permutations and head widths must be positive".into()));
        }
        Ok(())
    }
}

fn cosine_logits<T: Real>(g: &mut Graph<T>, q: Var, keys: Var, tau: f64) -> Result<Var, LossError> {
    let qn = g.l2_normalize_rows(q)?;
    let kn = g.l2_normalize_rows(keys)?;
    let c = g.matmul_bt(qn, kn);
    Ok(g.scale(c, T::of(1.0 / tau)))
}

/// Row-wise InfoNCE: row `i` of `query` against row `i` of `positive` and every
/// row of `negatives`; mean over rows.
pub fn info_nce<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    positive: Var,
    negatives: Var,
    tau: f64,
) -> Result<Var, LossError> {
    let (m, d) = g.value(query).dims2();
    let (n, dn) = g.value(negatives).dims2();
    if g.value(positive).dims2() != (m, d) || dn != d {
        return Err(LossError::Shape("query, positive and negatives must share a dimension".into()));
    }
    if n == 0 {
        return Err(LossError::NoNegatives("info_nce"));
    }
    let qn = g.l2_normalize_rows(query)?;
    let pn = g.l2_normalize_rows(positive)?;
    let nn = g.l2_normalize_rows(negatives)?;
    let pos = g.row_dot(qn, pn);
    let neg = g.matmul_bt(qn, nn);
    let all = g.concat_cols(pos, neg);
    let logits = g.scale(all, T::of(1.0 / tau));
    let mut targets = Tensor::zeros(&[m, n + 1]);
    for r in 0..m {
        targets.data_mut()[r * (n + 1)] = T::one();
    }
    Ok(g.soft_cross_entropy(logits, targets))
}

/// Soft region contrast. `local` stacks the projected cells of one or more
/// local clips of a single video, `global` holds that video's projected global
/// cells, and `targets` gives one correspondence matrix per stacked clip in
/// the same order. `negatives` are cells from other videos.
pub fn region_contrast<T: Real>(
    g: &mut Graph<T>,
    local: Var,
    global: Var,
    targets: &[&CorrespondenceMatrix],
    negatives: Option<Var>,
    tau: f64,
) -> Result<Var, LossError> {
    let (rows, _) = g.value(local).dims2();
    let (nv, _) = g.value(global).dims2();
    let n_rows: usize = targets.iter().map(|s| s.rows()).sum();
    if n_rows != rows || targets.iter().any(|s| s.cols() != nv) {
        return Err(LossError::Shape(format!("targets cover {n_rows} rows, local has {rows}; global has {nv} cells")));
    }
    let keys = match negatives {
        Some(n) => g.concat_rows(&[global, n]),
        None => global,
    };
    let total = g.value(keys).dims2().0;
    let logits = cosine_logits(g, local, keys, tau)?;
    let mut t = Tensor::zeros(&[rows, total]);
    let mut r = 0;
    for s in targets {
        for i in 0..s.rows() {
            let row = s.row(i);
            if row.iter().sum::<f64>() <= 0.0 {
                return Err(LossError::EmptyTargetRow(r));
            }
            for (j, &v) in row.iter().enumerate() {
                t.data_mut()[r * total + j] = T::of(v);
            }
            r += 1;
        }
    }
    Ok(g.soft_cross_entropy(logits, t))
}

/// Donsker-Varadhan bound `mean(joint) - log(mean(exp(marginal)))`.
pub fn mine_lowerbound<T: Real>(g: &mut Graph<T>, joint: Var, marginal: Var) -> Result<Var, LossError> {
    if g.value(joint).is_empty() || g.value(marginal).is_empty() {
        return Err(LossError::Graph(GraphError::Empty("mine_lowerbound")));
    }
    let a = g.mean(joint)?;
    let b = g.log_mean_exp(marginal)?;
    Ok(g.sub(a, b))
}

/// Critic `G(x, y)`: a two-layer MLP on the concatenated pair.
#[derive(Clone, Copy, Debug)]
pub struct MiHead {
    pub mlp: Mlp,
    pub dim: usize,
}

impl MiHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        MiHead { mlp: Mlp::new(store, name, ParamGroup::MiHead, (2 * dim, hidden, 1), rng), dim }
    }

    /// Scores for row-aligned pairs, `(n, 1)`. With `frozen` the critic
    /// parameters are constants and receive no gradient.
    pub fn score<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, y: Var, frozen: bool) -> Var {
        let xy = g.concat_cols(x, y);
        if frozen {
            self.mlp.forward_frozen(g, store, xy)
        } else {
            self.mlp.forward(g, store, xy)
        }
    }

    /// Bound over index pairs into the row sets `xs` and `ys`.
    #[allow(clippy::too_many_arguments)]
    pub fn bound<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xs: Var,
        ys: Var,
        joint: &[(usize, usize)],
        marginal: &[(usize, usize)],
        frozen: bool,
    ) -> Result<Var, LossError> {
        let pairs = |g: &mut Graph<T>, p: &[(usize, usize)]| {
            let a: Vec<usize> = p.iter().map(|x| x.0).collect();
            let b: Vec<usize> = p.iter().map(|x| x.1).collect();
            (g.gather_rows(xs, &a), g.gather_rows(ys, &b))
        };
        let (jx, jy) = pairs(g, joint);
        let (mx, my) = pairs(g, marginal);
        let sj = self.score(g, store, jx, jy, frozen);
        let sm = self.score(g, store, mx, my, frozen);
        mine_lowerbound(g, sj, sm)
    }
}

/// Standalone MINE estimate on paired samples, used to calibrate the bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineEstimator {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    /// Shifted copies of `y` used as marginal partners for each row.
    pub shifts: usize,
    pub lr: f64,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for MineEstimator {
    fn default() -> Self {
        MineEstimator { hidden: 64, steps: 3000, batch: 512, shifts: 8, lr: 1e-3, eval_samples: 50_000, seed: 0 }
    }
}

impl MineEstimator {
    /// Trains a fresh critic on batches from `sample` and returns the bound
    /// evaluated on an independent draw. `sample(rng, n)` yields `n` row-major
    /// rows of `x` and of `y`, each `dim` wide.
    pub fn estimate<F>(&self, dim: usize, mut sample: F) -> Result<f64, LossError>
    where
        F: FnMut(&mut crate::rng::StreamRng, usize) -> (Vec<f64>, Vec<f64>),
    {
        if self.batch < 2 || self.shifts == 0 || self.shifts >= self.batch.min(self.eval_samples) {
            return Err(LossError::Config("need batch > shifts >= 1".into()));
        }
        let mut rng = crate::rng::stream(self.seed, "mine-estimator", &[]);
        let mut store = ParamStore::<f64>::new();
        let head = MiHead::new(&mut store, "mine", dim, self.hidden, &mut rng);
        let mut opt = crate::nn::Adam::new(crate::nn::AdamConfig {
            lr: self.lr,
            weight_decay: 0.0,
            milestones: Vec::new(),
            ..Default::default()
        });
        let pairs = |n: usize, shifts: &[usize]| {
            let joint: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
            let marginal: Vec<(usize, usize)> =
                shifts.iter().flat_map(|&s| (0..n).map(move |i| (i, (i + s) % n))).collect();
            (joint, marginal)
        };
        let bound = |store: &ParamStore<f64>, x: Vec<f64>, y: Vec<f64>, n: usize, shifts: &[usize]| {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(Tensor::new(vec![n, dim], x));
            let yv = g.constant(Tensor::new(vec![n, dim], y));
            let (joint, marginal) = pairs(n, shifts);
            let b = head.bound(&mut g, store, xv, yv, &joint, &marginal, false)?;
            Ok::<_, LossError>((g, b))
        };
        for _ in 0..self.steps {
            let (x, y) = sample(&mut rng, self.batch);
            let shifts: Vec<usize> = (0..self.shifts).map(|_| rng.gen_range(1..self.batch)).collect();
            let (mut g, b) = bound(&store, x, y, self.batch, &shifts)?;
            let loss = g.neg(b);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads, 0);
        }
        let n = self.eval_samples;
        let (x, y) = sample(&mut rng, n);
        let shifts: Vec<usize> = (1..=self.shifts).map(|s| s * n / (self.shifts + 1)).collect();
        let (g, b) = bound(&store, x, y, n, &shifts)?;
        Ok(g.scalar(b))
    }
}

/// Pair sets for the level-grouped bound: joint pairs share a level and come
/// from different videos; marginal pairs are any rows from different videos.
pub fn level_pairs(levels: &[usize], videos: &[usize]) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut joint = Vec::new();
    let mut marginal = Vec::new();
    for a in 0..levels.len() {
        for b in 0..levels.len() {
            if a == b || videos[a] == videos[b] {
                continue;
            }
            marginal.push((a, b));
            if levels[a] == levels[b] {
                joint.push((a, b));
            }
        }
    }
    (joint, marginal)
}

/// Output of [`shortcut_elimination_loss`].
#[derive(Clone, Copy, Debug)]
pub struct MiTerms {
    /// Level-grouped bound the critic maximises.
    pub head_bound: Var,
    /// Frozen-critic bound on local/global pairs.
    pub local_global_bound: Var,
    /// Term added to the total loss: `-head_bound` through gradient reversal
    /// plus `local_global_bound`. Its gradient raises the bound for the critic
    /// and lowers both bounds for the encoder.
    pub objective: Var,
}

/// Adversarial low-level MI term.
///
/// `feats` holds one pooled feature per augmented view with its level and
/// video index. `local`/`global` are pooled local clips `(B*K, C)` (row
/// `b*K + k`) and pooled global views `(B, C)`.
#[allow(clippy::too_many_arguments)]
pub fn shortcut_elimination_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &MiHead,
    feats: Var,
    levels: &[usize],
    videos: &[usize],
    local: Var,
    global: Var,
    k: usize,
    lambda: f64,
) -> Result<Option<MiTerms>, LossError> {
    let (joint, marginal) = level_pairs(levels, videos);
    if joint.is_empty() || marginal.is_empty() {
        warn!("no level group spans two videos; skipping the MI term");
        return Ok(None);
    }
    let rev = g.grad_reverse(feats, T::of(lambda));
    let head_bound = head.bound(g, store, rev, rev, &joint, &marginal, false)?;

    let b = g.value(global).dims2().0;
    let mut lg_joint = Vec::new();
    let mut lg_marg = Vec::new();
    for v in 0..b {
        for kk in 0..k {
            lg_joint.push((v * k + kk, v));
            for w in (0..b).filter(|&w| w != v) {
                lg_marg.push((v * k + kk, w));
            }
        }
    }
    let local_global_bound = if lg_marg.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        head.bound(g, store, local, global, &lg_joint, &lg_marg, true)?
    };
    let objective = g.sub(local_global_bound, head_bound);
    Ok(Some(MiTerms { head_bound, local_global_bound, objective }))
}

/// Scores a clip sequence against a global feature.
#[derive(Clone, Debug)]
pub struct OrderHead {
    pub kind: OrderHeadKind,
    pub gru: Option<GruCell>,
    pub mlp: Option<Mlp>,
    pub k: usize,
    pub tau: f64,
}

impl OrderHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        kind: OrderHeadKind,
        dim: usize,
        k: usize,
        hidden: usize,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, LossError> {
        if k < 2 {
            return Err(LossError::Config(format!("temporal order needs at least two clips, got {k}")));
        }
        let grp = ParamGroup::OrderHead;
        let (gru, mlp) = match kind {
            OrderHeadKind::Mlp => (None, Some(Mlp::new(store, "order.mlp", grp, ((k + 1) * dim, hidden, 1), rng))),
            OrderHeadKind::Recurrent => (Some(GruCell::new(store, "order.gru", grp, dim, dim, rng)), None),
            OrderHeadKind::RecurrentMlp => (
                Some(GruCell::new(store, "order.gru", grp, dim, dim, rng)),
                Some(Mlp::new(store, "order.mlp", grp, (2 * dim, hidden, 1), rng)),
            ),
        };
        Ok(OrderHead { kind, gru, mlp, k, tau })
    }

    /// `seq` holds K tensors `(B, C)`; returns scores `(B, 1)`.
    pub fn score<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: &[Var], global: Var) -> Result<Var, LossError> {
        if seq.len() != self.k {
            return Err(LossError::Shape(format!("expected {} clips, got {}", self.k, seq.len())));
        }
        Ok(match self.kind {
            OrderHeadKind::Mlp => {
                let mut x = seq[0];
                for &s in &seq[1..] {
                    x = g.concat_cols(x, s);
                }
                let x = g.concat_cols(x, global);
                self.mlp.unwrap().forward(g, store, x)
            }
            OrderHeadKind::Recurrent => {
                let h = self.gru.unwrap().run(g, store, seq);
                let hn = g.l2_normalize_rows(h)?;
                let gn = g.l2_normalize_rows(global)?;
                let c = g.row_dot(hn, gn);
                g.scale(c, T::of(1.0 / self.tau))
            }
            OrderHeadKind::RecurrentMlp => {
                let h = self.gru.unwrap().run(g, store, seq);
                let x = g.concat_cols(h, global);
                self.mlp.unwrap().forward(g, store, x)
            }
        })
    }
}

/// Clip sequence for videos `0..B` with clip order `perm[b]`, from pooled
/// local features stacked as rows `b*K + k`.
pub fn sequence<T: Real>(g: &mut Graph<T>, local: Var, perms: &[Vec<usize>]) -> Vec<Var> {
    let k = perms[0].len();
    (0..k)
        .map(|step| {
            let idx: Vec<usize> = perms.iter().enumerate().map(|(b, p)| b * k + p[step]).collect();
            g.gather_rows(local, &idx)
        })
        .collect()
}

/// Uniform draw from the non-identity permutations of `0..k`.
pub fn random_shuffle(k: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    assert!(k >= 2, "need at least two clips to shuffle");
    loop {
        let mut p: Vec<usize> = (0..k).collect();
        p.shuffle(rng);
        if p.iter().enumerate().any(|(i, &v)| i != v) {
            return p;
        }
    }
}

/// Temporal dependency bound: joint = (ordered clips, global), marginal =
/// (shuffled clips, global), for every video in the batch.
pub fn temporal_dependency_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &OrderHead,
    local: Var,
    global: Var,
    shuffles: &[Vec<Vec<usize>>],
) -> Result<Var, LossError> {
    let b = g.value(global).dims2().0;
    let k = head.k;
    if g.value(local).dims2().0 != b * k {
        return Err(LossError::Shape(format!("{} local rows for {b} videos of {k} clips", g.value(local).dims2().0)));
    }
    let identity: Vec<Vec<usize>> = (0..b).map(|_| (0..k).collect()).collect();
    let ordered = sequence(g, local, &identity);
    let joint = head.score(g, store, &ordered, global)?;
    let mut marg = Vec::new();
    for perms in shuffles {
        if perms.iter().any(|p| p.iter().enumerate().all(|(i, &v)| i == v)) {
            return Err(LossError::Config("shuffled order equals the identity".into()));
        }
        let seq = sequence(g, local, perms);
        marg.push(head.score(g, store, &seq, global)?);
    }
    let marginal = g.concat_rows(&marg);
    mine_lowerbound(g, joint, marginal)
}

/// Loss terms of one step, as graph nodes.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub rc: Option<Var>,
    pub nce: Option<Var>,
    pub mi: Option<MiTerms>,
    pub td: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    #[serde(rename = "L_rc")]
    pub rc: Option<f64>,
    #[serde(rename = "L_nce")]
    pub nce: Option<f64>,
    #[serde(rename = "L_mi_head")]
    pub mi_head: Option<f64>,
    #[serde(rename = "L_mi_enc")]
    pub mi_enc: Option<f64>,
    #[serde(rename = "L_td")]
    pub td: Option<f64>,
    pub total: f64,
}

/// `w_rc * contrast + w_mi * mi.objective - w_td * td`. Fails on any
/// non-finite term.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &LossTerms, cfg: &LossConfig) -> Result<(Var, LossValues), LossError> {
    let mut parts: Vec<(Var, T)> = Vec::new();
    let mut vals = LossValues::default();
    let check = |g: &Graph<T>, v: Var, term: &'static str| -> Result<f64, LossError> {
        let x = g.scalar(v).as_f64();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(LossError::NonFinite { term, value: x })
        }
    };
    if let Some(v) = terms.rc {
        vals.rc = Some(check(g, v, "L_rc")?);
        parts.push((v, T::of(cfg.w_rc)));
    }
    if let Some(v) = terms.nce {
        vals.nce = Some(check(g, v, "L_nce")?);
        parts.push((v, T::of(cfg.w_rc)));
    }
    if let Some(mi) = terms.mi {
        let head = check(g, mi.head_bound, "L_mi_head")?;
        let lg = check(g, mi.local_global_bound, "L_mi_enc")?;
        vals.mi_head = Some(head);
        vals.mi_enc = Some(head + lg);
        parts.push((mi.objective, T::of(cfg.w_mi)));
    }
    if let Some(v) = terms.td {
        vals.td = Some(check(g, v, "L_td")?);
        parts.push((v, T::of(-cfg.w_td)));
    }
    let total = if parts.is_empty() { g.constant(Tensor::scalar(T::zero())) } else { g.weighted_sum(&parts) };
    vals.total = check(g, total, "total")?;
    Ok((total, vals))
}
