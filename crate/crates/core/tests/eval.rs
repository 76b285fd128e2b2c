use ndarray::{array, Array2, Array3};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use vidssl::config::RunConfig;
use vidssl::dataio::SyntheticSpec;
use vidssl::eval::{foreground_score, linear_probe, normalize_map, retrieve, EvalConfig, EvalError};
use vidssl::pipeline::{evaluate, prepare_data};
use vidssl::rng::stream;
use vidssl::trainer::Model;

fn gaussian(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
}

fn labels(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| if i < classes { i } else { rng.gen_range(0..classes) }).collect()
}

#[test]
fn probe_on_noise_sits_at_chance() {
    let cfg = EvalConfig { probe_iters: 200, ..Default::default() };
    let mut total = 0.0;
    let trials = 20;
    for s in 0..trials {
        let mut rng = stream(s, "probe-noise", &[]);
        let (xtr, xte) = (gaussian(&mut rng, 200, 16), gaussian(&mut rng, 80, 16));
        let (ytr, yte) = (labels(&mut rng, 200, 4), labels(&mut rng, 80, 4));
        total += linear_probe(&xtr, &ytr, &xte, &yte, &cfg).unwrap().top1;
    }
    let mean = total / trials as f64;
    assert!((mean - 0.25).abs() < 0.04, "mean top1 {mean}");
}

#[test]
fn probe_separates_shifted_classes() {
    let mut rng = stream(1, "probe-sep", &[]);
    let shift = |x: &mut Array2<f64>, y: &[usize]| {
        for (mut row, &c) in x.rows_mut().into_iter().zip(y) {
            row[c] += 6.0;
        }
    };
    let (mut xtr, mut xte) = (gaussian(&mut rng, 120, 4), gaussian(&mut rng, 40, 4));
    let (ytr, yte) = (labels(&mut rng, 120, 4), labels(&mut rng, 40, 4));
    shift(&mut xtr, &ytr);
    shift(&mut xte, &yte);
    let r = linear_probe(&xtr, &ytr, &xte, &yte, &EvalConfig::default()).unwrap();
    assert!(r.top1 > 0.95, "{r:?}");
    assert_eq!(r.per_class.len(), 4);
}

#[test]
fn probe_requires_every_class_in_training() {
    let x = Array2::zeros((3, 2));
    let err = linear_probe(&x, &[0, 0, 2], &x, &[0, 1, 2], &EvalConfig::default()).unwrap_err();
    assert!(matches!(err, EvalError::MissingClass(1)));
}

#[test]
fn retrieval_matches_hand_ranking() {
    let gallery = array![[1.0, 0.0], [0.0, 1.0], [0.7, 0.7], [-1.0, 0.0]];
    let gy = [0, 1, 2, 1];
    // cos to (1, 0.1): 0.995, 0.0995, 0.774, -0.995 -> order 0, 2, 1, 3
    let query = array![[1.0, 0.1], [1.0, 0.1]];
    let r = retrieve(&query, &[1, 0], &gallery, &gy, &[1, 2, 3, 4]).unwrap();
    assert_eq!(r.recall[&1], 0.5);
    assert_eq!(r.recall[&2], 0.5);
    assert_eq!(r.recall[&3], 1.0);
    assert!(matches!(retrieve(&query, &[1, 0], &gallery, &gy, &[5]), Err(EvalError::KTooLarge { k: 5, gallery: 4 })));
}

#[test]
fn retrieval_on_noise_sits_at_chance() {
    let mut total = 0.0;
    for s in 0..20 {
        let mut rng = stream(s, "retrieve-noise", &[]);
        let (g, q) = (gaussian(&mut rng, 200, 16), gaussian(&mut rng, 80, 16));
        let (gy, qy) = (labels(&mut rng, 200, 4), labels(&mut rng, 80, 4));
        total += retrieve(&q, &qy, &g, &gy, &[1]).unwrap().recall[&1];
    }
    let mean = total / 20.0;
    assert!((mean - 0.25).abs() < 0.04, "mean R@1 {mean}");
}

proptest! {
    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), nq in 1usize..20, ng in 5usize..40, classes in 2usize..6) {
        let mut rng = stream(seed, "retrieve-prop", &[]);
        let (q, g) = (gaussian(&mut rng, nq, 3), gaussian(&mut rng, ng, 3));
        let qy: Vec<usize> = (0..nq).map(|_| rng.gen_range(0..classes)).collect();
        let gy: Vec<usize> = (0..ng).map(|_| rng.gen_range(0..classes)).collect();
        let r = retrieve(&q, &qy, &g, &gy, &[1, 2, 3, 5]).unwrap();
        prop_assert!(r.is_monotone());
        prop_assert!(r.recall.values().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn foreground_score_is_inside_over_outside() {
    let map = Array3::from_shape_vec((1, 2, 2), vec![1.0f32, 0.5, 0.25, 0.25]).unwrap();
    let mask = Array3::from_shape_vec((1, 2, 2), vec![true, true, false, false]).unwrap();
    assert!((foreground_score(&map, &mask) - 3.0).abs() < 1e-9);
    let mut flat = Array3::from_elem((2, 3, 3), 0.7f32);
    normalize_map(&mut flat);
    assert!(flat.iter().all(|&v| v == 1.0));
    let mut ramp = Array3::from_shape_fn((1, 2, 3), |(_, y, x)| (y * 3 + x) as f32 - 2.0);
    normalize_map(&mut ramp);
    assert_eq!(ramp[[0, 0, 0]], 0.0);
    assert_eq!(ramp[[0, 1, 2]], 1.0);
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let mut cfg = RunConfig::fast();
    cfg.data.synthetic = SyntheticSpec { videos_per_class: 3, ..Default::default() };
    cfg.data.test_per_class = 1;
    cfg.eval.clips_per_video = 2;
    let (train, test) = prepare_data(&cfg).unwrap();
    let model = Model::new(&cfg.encoder, &cfg.loss, cfg.train.k, 3).unwrap();
    let before = model.store.fingerprint();
    let report = evaluate(&model, &cfg, &train, &test).unwrap();
    assert_eq!(model.store.fingerprint(), before);
    assert!(report.retrieval.is_monotone());
    assert!(report.retrieval.recall.keys().all(|&k| k <= train.len()));
    assert!(report.caam_foreground.is_some());
    assert!(report.order_accuracy.is_some());
}
