//! Two epochs of pretraining on a small synthetic set, with checkpoints and a
//! metrics log in a temporary run directory.

use vidssl::config::RunConfig;
use vidssl::pipeline::{prepare_data, pretrain};
use vidssl::trainer::FitOptions;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = RunConfig::fast();
    cfg.data.synthetic.videos_per_class = 6;
    cfg.data.test_per_class = 2;
    cfg.train.epochs = 2;
    let (train, _) = prepare_data(&cfg).unwrap();
    let dir = tempfile_dir();
    let opts = FitOptions { out_dir: Some(dir.clone()), ..Default::default() };
    let fit = pretrain(&cfg, &train, &opts).unwrap();
    for m in &fit.metrics {
        println!("step {:>2}  epoch {}  {}", m.step, m.epoch, serde_json::to_string(&m.losses).unwrap());
    }
    println!("run directory {}", dir.display());
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("vidssl-pretrain-{}", std::process::id()))
}
