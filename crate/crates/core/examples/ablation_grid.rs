//! Pretrains and evaluates ablation rows on the synthetic motion set.
//!
//! `cargo run --example ablation_grid -- [rows...]` where rows are any of
//! nce, rc, rc_mi, rc_td, nce_mi_td, rc_mi_td (default: all). Set
//! `ABLATION_EPOCHS` to shorten runs.

use vidssl::config::RunConfig;
use vidssl::losses::ContrastKind;
use vidssl::pipeline::{evaluate, prepare_data, pretrain};
use vidssl::trainer::FitOptions;

fn row(name: &str) -> Option<RunConfig> {
    let mut c = RunConfig::fast();
    let (contrast, mi, td) = match name {
        "nce" => (ContrastKind::Nce, 0.0, 0.0),
        "rc" => (ContrastKind::Region, 0.0, 0.0),
        "rc_mi" => (ContrastKind::Region, 1.0, 0.0),
        "rc_td" => (ContrastKind::Region, 0.0, 1.0),
        "nce_mi_td" => (ContrastKind::Nce, 1.0, 1.0),
        "rc_mi_td" => (ContrastKind::Region, 1.0, 1.0),
        _ => return None,
    };
    c.loss.contrast = contrast;
    c.loss.w_mi = mi;
    c.loss.w_td = td;
    Some(c)
}

fn main() {
    env_logger::init();
    let mut rows: Vec<String> = std::env::args().skip(1).collect();
    if rows.is_empty() {
        rows = ["nce", "rc", "rc_mi", "rc_td", "nce_mi_td", "rc_mi_td"].map(String::from).to_vec();
    }
    for name in rows {
        let Some(mut cfg) = row(&name) else {
            eprintln!("unknown row {name}");
            std::process::exit(1);
        };
        if let Some(e) = std::env::var("ABLATION_EPOCHS").ok().and_then(|s| s.parse().ok()) {
            cfg.train.epochs = e;
        }
        let (train, test) = prepare_data(&cfg).expect("data");
        let start = std::time::Instant::now();
        let fit = pretrain(&cfg, &train, &FitOptions::default()).expect("pretrain");
        let report = evaluate(&fit.model, &cfg, &train, &test).expect("evaluate");
        let last = fit.metrics.last().map(|m| m.losses.total).unwrap_or(f64::NAN);
        println!(
            "{name:>10}  probe {:.3}  R@1 {:.3}  caam {:.3}  order {}  final loss {last:.4}  ({:.0}s)",
            report.probe.top1,
            report.retrieval.recall.get(&1).copied().unwrap_or(f64::NAN),
            report.caam_foreground.unwrap_or(f64::NAN),
            report.order_accuracy.map_or("-".into(), |a| format!("{a:.3}")),
            start.elapsed().as_secs_f64()
        );
    }
}
