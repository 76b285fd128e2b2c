//! Linear probe, retrieval and order accuracy for a randomly initialised
//! encoder and for one pretrained for a few epochs.

use vidssl::config::RunConfig;
use vidssl::pipeline::{evaluate, prepare_data, pretrain, EvalReport};
use vidssl::trainer::{FitOptions, Model};

fn show(name: &str, r: &EvalReport) {
    let recall: Vec<String> = r.retrieval.recall.iter().map(|(k, v)| format!("R@{k} {v:.3}")).collect();
    println!(
        "{name:>10}: probe {:.3}  {}  caam {:.3}  order {}",
        r.probe.top1,
        recall.join("  "),
        r.caam_foreground.unwrap_or(f64::NAN),
        r.order_accuracy.map_or("n/a".into(), |o| format!("{o:.3}"))
    );
}

fn main() {
    let mut cfg = RunConfig::fast();
    cfg.data.synthetic.videos_per_class = 16;
    cfg.data.test_per_class = 6;
    cfg.train.epochs = std::env::var("EVAL_EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(4);
    let (train, test) = prepare_data(&cfg).unwrap();
    let init = Model::new(&cfg.encoder, &cfg.loss, cfg.train.k, cfg.train.seed).unwrap();
    show("random", &evaluate(&init, &cfg, &train, &test).unwrap());
    let fit = pretrain(&cfg, &train, &FitOptions::default()).unwrap();
    show("pretrained", &evaluate(&fit.model, &cfg, &train, &test).unwrap());
}
