//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,3,9` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use vidssl::autograd::Graph;
use vidssl::config::RunConfig;
use vidssl::dataio::{unlabeled, Video};
use vidssl::encoder::EncoderConfig;
use vidssl::geometry::{CorrespondenceMatrix, GridShape};
use vidssl::losses::{info_nce, region_contrast, shortcut_elimination_loss, ContrastKind, MineEstimator};
use vidssl::nn::Adam;
use vidssl::params::ParamId;
use vidssl::pipeline::{check_geometry, evaluate, prepare_data, pretrain, EvalReport};
use vidssl::rng::stream;
use vidssl::tensor::Tensor;
use vidssl::trainer::{build_batch, forward_batch, train_step, FitOptions, Model, StepMetrics, TrainingBatch};

const ROWS: [&str; 6] = ["nce", "rc", "rc_mi", "rc_td", "nce_mi_td", "rc_mi_td"];

struct Outcome {
    report: EvalReport,
    metrics: Vec<StepMetrics>,
}

#[derive(Default)]
struct Runs(BTreeMap<&'static str, Outcome>);

impl Runs {
    fn get(&mut self, row: &'static str) -> &Outcome {
        self.0.entry(row).or_insert_with(|| {
            let path = configs_dir().join(format!("ablation_{row}.toml"));
            let cfg = RunConfig::load(&path).expect("ablation config loads");
            let start = Instant::now();
            let (train, test) = prepare_data(&cfg).expect("data");
            let fit = pretrain(&cfg, &train, &FitOptions::default()).expect("pretraining");
            let report = evaluate(&fit.model, &cfg, &train, &test).expect("evaluation");
            println!(
                "  run {row:>9}: probe {:.3}  R@1 {:.3}  caam {:.3}  order {}  ({:.0}s)",
                report.probe.top1,
                report.retrieval.recall[&1],
                report.caam_foreground.unwrap_or(f64::NAN),
                report.order_accuracy.map_or("n/a".into(), |o| format!("{o:.3}")),
                start.elapsed().as_secs_f64()
            );
            Outcome { report, metrics: fit.metrics }
        })
    }
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn verdict(id: &str, ok: bool, detail: String) -> bool {
    println!("{} criterion {id}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn c1_geometry() -> bool {
    let start = Instant::now();
    let r = check_geometry(1000, 256, 0).expect("geometry check runs");
    let secs = start.elapsed().as_secs_f64();
    let ok = r.passed && r.max_row_sum_error <= 1e-9 && r.max_deviation <= 3.0 / 256.0 && secs < 120.0;
    verdict(
        "1 (correspondence vs oracle)",
        ok,
        format!(
            "max dev {:.2e} <= {:.2e}, max |row sum - 1| {:.1e}, identity exact {}, {secs:.1}s",
            r.max_deviation, r.bound, r.max_row_sum_error, r.identity_exact
        ),
    )
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, d: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.sample(StandardNormal)).collect())
}

fn c2_indicator_reduction() -> bool {
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = stream(trial, "indicator-reduction", &[]);
        let ls = GridShape::new(rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let gs = GridShape::new(rng.gen_range(1..=8), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (nc, nv, d) = (ls.cells(), gs.cells(), 16);
        let n_neg = if nv == 1 { rng.gen_range(1..20) } else { rng.gen_range(0..20) };
        let tau = rng.gen_range(0.05..0.5);
        let pos: Vec<usize> = (0..nc).map(|_| rng.gen_range(0..nv)).collect();
        let mut values = vec![0.0; nc * nv];
        for (i, &j) in pos.iter().enumerate() {
            values[i * nv + j] = 1.0;
        }
        let s = CorrespondenceMatrix { local_shape: ls, global_shape: gs, values };
        let (lt, gt, nt) = (normal_tensor(&mut rng, nc, d), normal_tensor(&mut rng, nv, d), normal_tensor(&mut rng, n_neg, d));

        let mut g = Graph::<f64>::new();
        let (l, gl) = (g.constant(lt.clone()), g.constant(gt.clone()));
        let negs = (n_neg > 0).then(|| g.constant(nt.clone()));
        let rc = region_contrast(&mut g, l, gl, &[&s], negs, tau).unwrap();
        let rc = g.scalar(rc);

        let mut sum = 0.0;
        for (i, &j) in pos.iter().enumerate() {
            let mut h = Graph::<f64>::new();
            let q = h.constant(Tensor::new(vec![1, d], lt.row(i).to_vec()));
            let p = h.constant(Tensor::new(vec![1, d], gt.row(j).to_vec()));
            let mut rest: Vec<f64> = (0..nv).filter(|&c| c != j).flat_map(|c| gt.row(c).to_vec()).collect();
            rest.extend_from_slice(nt.data());
            let n = h.constant(Tensor::new(vec![rest.len() / d, d], rest));
            let v = info_nce(&mut h, q, p, n, tau).unwrap();
            sum += h.scalar(v);
        }
        worst = worst.max((rc - sum / nc as f64).abs());
    }
    verdict("2 (indicator targets reduce to InfoNCE)", worst <= 1e-6, format!("max |diff| {worst:.2e} over 100 batches"))
}

fn small_setup(w_rc: f64, contrast: ContrastKind, w_mi: f64, w_td: f64) -> (RunConfig, TrainingBatch) {
    let mut cfg = RunConfig::fast();
    cfg.encoder = EncoderConfig { widths: vec![4, 4, 8, 8], proj_dim: 8, ..EncoderConfig::fast() };
    cfg.data.synthetic.videos_per_class = 1;
    cfg.loss.contrast = contrast;
    cfg.loss.w_rc = w_rc;
    cfg.loss.w_mi = w_mi;
    cfg.loss.w_td = w_td;
    cfg.loss.mi_hidden = 8;
    cfg.loss.order_hidden = 8;
    cfg.data.test_per_class = 0;
    let (train, _) = prepare_data(&cfg).unwrap();
    let batch = build_batch(&unlabeled(&train)[..3], &cfg.augment, &cfg.encoder, &cfg.train, &cfg.loss, 5, &[0]).unwrap();
    (cfg, batch)
}

fn reversal_gradients(model: &Model<f64>, batch: &TrainingBatch, k: usize, lambda: f64) -> BTreeMap<ParamId, Vec<f64>> {
    let enc = &model.encoder;
    let mut g = Graph::<f64>::new();
    let globals: Vec<_> = batch.videos.iter().map(|v| &v.global).collect();
    let locals: Vec<_> = batch.videos.iter().flat_map(|v| v.locals.iter()).collect();
    let xg = g.constant(vidssl::encoder::clips_to_tensor(&globals));
    let xl = g.constant(vidssl::encoder::clips_to_tensor(&locals));
    let eg = enc.encode(&mut g, &model.store, xg, vidssl::encoder::Mode::Video).unwrap();
    let el = enc.encode(&mut g, &model.store, xl, vidssl::encoder::Mode::Clip).unwrap();
    let pg = enc.pool(&mut g, &eg, false).unwrap();
    let pl = enc.pool(&mut g, &el, false).unwrap();
    let feats = g.concat_rows(&[pg, pl]);
    let b = batch.videos.len();
    let mut levels: Vec<usize> = batch.videos.iter().map(|v| v.global_rec.group).collect();
    let mut videos: Vec<usize> = (0..b).collect();
    for (vb, v) in batch.videos.iter().enumerate() {
        levels.extend(v.local_recs.iter().map(|r| r.group));
        videos.extend(std::iter::repeat_n(vb, v.local_recs.len()));
    }
    let terms = shortcut_elimination_loss(&mut g, &model.store, &model.mi_head, feats, &levels, &videos, pl, pg, k, lambda)
        .unwrap()
        .expect("cross-video level groups");
    g.backward(terms.head_bound).params().map(|(id, t)| (id, t.data().to_vec())).collect()
}

fn finite_difference(cfg: &RunConfig, batch: &TrainingBatch, label: &str) -> f64 {
    let mut loss = cfg.loss.clone();
    // lambda = -1 turns the reversal layer into the identity, so the backward
    // pass is the plain derivative of the forward value.
    loss.lambda = -1.0;
    let mut model = Model::<f64>::with_precision(&cfg.encoder, &loss, cfg.train.k, 1).unwrap();
    let value = |m: &Model<f64>| forward_batch(m, batch, &loss, 9, &[0]).unwrap().2.total;
    let (g, total, _) = forward_batch(&model, batch, &loss, 9, &[0]).unwrap();
    let grads: Vec<(ParamId, Vec<f64>)> = g.backward(total).params().map(|(id, t)| (id, t.data().to_vec())).collect();
    let mut rng = stream(0, "finite-difference", &[label.len() as u64]);
    let mut worst = 0.0f64;
    let eps = 1e-6;
    for _ in 0..10 {
        let (id, an) = &grads[rng.gen_range(0..grads.len())];
        let i = rng.gen_range(0..an.len());
        let orig = model.store.get(*id).data()[i];
        model.store.get_mut(*id).data_mut()[i] = orig + eps;
        let up = value(&model);
        model.store.get_mut(*id).data_mut()[i] = orig - eps;
        let down = value(&model);
        model.store.get_mut(*id).data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let err = (fd - an[i]).abs() / fd.abs().max(an[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

fn c3_gradients() -> bool {
    let (cfg, batch) = small_setup(0.0, ContrastKind::Region, 1.0, 0.0);
    let model = Model::<f64>::with_precision(&cfg.encoder, &cfg.loss, cfg.train.k, 1).unwrap();
    let encoder_ids = model.store.ids_in(vidssl::params::ParamGroup::Encoder);
    let plain = reversal_gradients(&model, &batch, cfg.train.k, -1.0);
    let mut rev_err = 0.0f64;
    let mut head_err = 0.0f64;
    for lambda in [0.5, 1.0, 2.0] {
        let rev = reversal_gradients(&model, &batch, cfg.train.k, lambda);
        for (id, p) in &plain {
            let r = &rev[id];
            let is_encoder = encoder_ids.contains(id);
            for (a, b) in r.iter().zip(p) {
                let want = if is_encoder { -lambda * b } else { *b };
                let e = (a - want).abs() / want.abs().max(1e-12);
                if is_encoder {
                    rev_err = rev_err.max(e);
                } else {
                    head_err = head_err.max(e);
                }
            }
        }
    }
    let mut fd = Vec::new();
    for (label, w_rc, kind, w_mi, w_td) in [
        ("rc", 1.0, ContrastKind::Region, 0.0, 0.0),
        ("nce", 1.0, ContrastKind::Nce, 0.0, 0.0),
        ("mi", 0.0, ContrastKind::Region, 1.0, 0.0),
        ("td", 0.0, ContrastKind::Region, 0.0, 1.0),
        ("total", 1.0, ContrastKind::Region, 1.0, 1.0),
    ] {
        let (cfg, batch) = small_setup(w_rc, kind, w_mi, w_td);
        fd.push((label, finite_difference(&cfg, &batch, label)));
    }
    let fd_ok = fd.iter().all(|(_, e)| *e <= 1e-2);
    let detail = fd.iter().map(|(l, e)| format!("{l} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(
        "3 (gradient reversal and finite differences)",
        rev_err <= 1e-9 && head_err <= 1e-9 && fd_ok,
        format!("encoder grad vs -lambda*plain rel err {rev_err:.1e}, critic grad rel err {head_err:.1e}; FD rel err {detail}"),
    )
}

fn c4_mine() -> bool {
    let start = Instant::now();
    let est = MineEstimator::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for rho in [0.0f64, 0.5, 0.9] {
        let mi = est
            .estimate(1, |rng, n| {
                let (mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    let a: f64 = rng.sample(StandardNormal);
                    let e: f64 = rng.sample(StandardNormal);
                    x.push(a);
                    y.push(rho * a + (1.0 - rho * rho).sqrt() * e);
                }
                (x, y)
            })
            .unwrap();
        let truth = -0.5 * (1.0 - rho * rho).ln();
        ok &= if rho == 0.0 { mi.abs() <= 0.05 } else { (mi - truth).abs() <= 0.15 * truth };
        parts.push(format!("rho {rho}: {mi:.4} vs {truth:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict("4 (MINE calibration)", ok && secs < 300.0, format!("{}; {secs:.0}s", parts.join(", ")))
}

fn c5_motion_bias(runs: &mut Runs) -> bool {
    let base = runs.get("nce").report.clone();
    let full = runs.get("rc_mi_td").report.clone();
    let (bc, fc) = (base.caam_foreground.unwrap_or(f64::NAN), full.caam_foreground.unwrap_or(f64::NAN));
    let ok = full.probe.top1 >= base.probe.top1 + 0.10 && fc > bc;
    verdict(
        "5 (motion over background)",
        ok,
        format!("probe full {:.3} vs nce {:.3} (need +0.10); caam full {fc:.3} vs nce {bc:.3}", full.probe.top1, base.probe.top1),
    )
}

fn c6_ablation(runs: &mut Runs) -> bool {
    let score: BTreeMap<&str, f64> = ROWS.iter().map(|&r| (r, runs.get(r).report.probe.top1)).collect();
    let pairs = [("rc_mi_td", "rc_mi"), ("rc_mi_td", "rc_td"), ("rc_mi", "rc"), ("rc_td", "rc"), ("rc", "nce")];
    let inversions: Vec<(&str, &str, f64)> =
        pairs.iter().filter(|(hi, lo)| score[hi] < score[lo]).map(|&(hi, lo)| (hi, lo, score[lo] - score[hi])).collect();
    let ok = inversions.is_empty() || (inversions.len() == 1 && inversions[0].2 <= 0.02 + 1e-12);
    let table = ROWS.iter().map(|r| format!("{r} {:.3}", score[r])).collect::<Vec<_>>().join(", ");
    let inv = inversions.iter().map(|(h, l, d)| format!("{h}<{l} by {d:.3}")).collect::<Vec<_>>().join(", ");
    verdict("6 (ablation ordering)", ok, format!("probe top-1 {table}; inversions [{inv}]"))
}

fn c7_order(runs: &mut Runs) -> bool {
    let acc = runs.get("rc_mi_td").report.order_accuracy;
    verdict(
        "7 (order head on two-phase videos)",
        acc.is_some_and(|a| a >= 0.8),
        format!("ordered > shuffled on {} of held-out two-phase videos (need 0.80)", acc.map_or("n/a".into(), |a| format!("{a:.3}"))),
    )
}

fn c8_retrieval(runs: &mut Runs) -> bool {
    let full = runs.get("rc_mi_td").report.clone();
    let chance = 0.25;
    let r1 = full.retrieval.recall[&1];
    let monotone: Vec<&str> = ROWS.iter().copied().filter(|r| !runs.get(r).report.retrieval.is_monotone()).collect();
    verdict(
        "8 (retrieval)",
        r1 >= 2.0 * chance && monotone.is_empty(),
        format!("full R@1 {r1:.3} (need {:.2}); non-monotone runs {monotone:?}", 2.0 * chance),
    )
}

fn short_fit_data() -> (RunConfig, Vec<Video>) {
    let mut cfg = RunConfig::fast();
    cfg.data.synthetic.videos_per_class = 4;
    cfg.data.test_per_class = 0;
    cfg.train.epochs = 3;
    let (train, _) = prepare_data(&cfg).unwrap();
    (cfg, train)
}

fn c9_determinism() -> bool {
    let (cfg, videos) = short_fit_data();
    let vids = unlabeled(&videos);
    let ten_steps = || {
        let mut model = Model::new(&cfg.encoder, &cfg.loss, cfg.train.k, cfg.train.seed).unwrap();
        let mut opt = Adam::new(cfg.train.optimizer.clone());
        (0..10usize)
            .map(|s| {
                let start = (s % 2) * 8;
                let b = build_batch(&vids[start..start + 8], &cfg.augment, &cfg.encoder, &cfg.train, &cfg.loss, cfg.train.seed, &[s as u64])
                    .unwrap();
                train_step(&mut model, &mut opt, &b, &cfg.loss, cfg.train.seed, s, 0, None).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let (a, b) = (ten_steps(), ten_steps());
    let values = |m: &StepMetrics| {
        let l = &m.losses;
        [Some(l.total), l.rc, l.nce, l.mi_head, l.mi_enc, l.td]
    };
    let step_diff = a
        .iter()
        .zip(&b)
        .flat_map(|(x, y)| values(x).into_iter().zip(values(y)))
        .map(|pair| match pair {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max);

    let tmp = tempfile::tempdir().unwrap();
    let (full_dir, cut_dir) = (tmp.path().join("full"), tmp.path().join("cut"));
    let fit = |dir: &PathBuf, resume: bool, stop: Option<usize>| {
        pretrain(&cfg, &videos, &FitOptions { out_dir: Some(dir.clone()), resume, stop_after_epochs: stop }).unwrap()
    };
    let whole = fit(&full_dir, false, None);
    let first = fit(&cut_dir, false, Some(1));
    let rest = fit(&cut_dir, true, None);
    let mut replay = first.metrics.clone();
    replay.extend(rest.metrics.clone());
    let resumed_same = replay == whole.metrics && rest.model.store.fingerprint() == whole.model.store.fingerprint();
    verdict(
        "9 (determinism and resume)",
        a.len() == 10 && step_diff <= 1e-6 && resumed_same,
        format!(
            "10-step max metric diff {step_diff:.1e}; resumed run identical: {resumed_same} ({} steps over {} epochs)",
            whole.metrics.len(),
            whole.epochs_completed
        ),
    )
}

fn loss_trend(runs: &mut Runs) {
    let m = &runs.get("rc_mi_td").metrics;
    let n = m.len().min(200);
    let window = 20;
    let ma: Vec<f64> = (0..=n - window).map(|i| m[i..i + window].iter().map(|s| s.losses.total).sum::<f64>() / window as f64).collect();
    let xs: Vec<f64> = (0..ma.len()).map(|i| i as f64).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / xs.len() as f64, ma.iter().sum::<f64>() / ma.len() as f64);
    let slope = xs.iter().zip(&ma).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    println!("INFO full-objective loss: slope of 20-step moving average over the first {n} steps = {slope:.2e}");
}

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |c: u32| only.as_ref().is_none_or(|o| o.contains(&c));
    let mut runs = Runs::default();
    let mut failed = Vec::new();
    let started = Instant::now();
    type Check = fn(&mut Runs) -> bool;
    let checks: [(u32, Check); 9] = [
        (1, |_| c1_geometry()),
        (2, |_| c2_indicator_reduction()),
        (3, |_| c3_gradients()),
        (4, |_| c4_mine()),
        (9, |_| c9_determinism()),
        (5, c5_motion_bias),
        (6, c6_ablation),
        (7, c7_order),
        (8, c8_retrieval),
    ];
    for (id, check) in checks {
        if wanted(id) && !check(&mut runs) {
            failed.push(id);
        }
    }
    if runs.0.contains_key("rc_mi_td") {
        loss_trend(&mut runs);
    }
    println!("acceptance finished in {:.0}s; failed criteria: {failed:?}", started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
