//! Command-line entry point: `gen-data`, `pretrain`, `eval`, `check-geometry`
//! and `visualize`.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure,
//! 3 failed self-check.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::{ConfigError, RunConfig};
use crate::dataio::{generate_synthetic, load_clip_folder, save_dataset, split_per_class, unlabeled, DataError, Video};
use crate::eval::{caam, write_caam_png};
use crate::pipeline::{check_geometry, evaluate, random_crop_pair, write_json};
use crate::trainer::{build_batch, forward_batch, FitOptions, Model, BEST_CHECKPOINT, LAST_CHECKPOINT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

pub const CONFIG_FILE: &str = "config.toml";
pub const HASH_FILE: &str = "config.sha256";

#[derive(Parser, Debug)]
#[command(name = "vidssl", version, about = "Self-supervised video representation learning on synthetic motion data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic motion dataset into a new directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder; writes checkpoints and `metrics.jsonl`.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Build one batch, print shapes and losses, and exit.
        #[arg(long)]
        dry_run: bool,
        /// Continue the run in `--out` from its last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        /// Load the checkpoint even if its config hash differs.
        #[arg(long)]
        force: bool,
    },
    /// Compare exact correspondences against the voxel oracle.
    CheckGeometry {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write one example matrix as CSV and PNG heatmap here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Write CAAM overlays for test videos.
    Visualize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        videos: usize,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Probe,
    Retrieve,
    Caam,
    Order,
    All,
}

/// Error carrying the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_VALIDATION, message: e.to_string() }
    }
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_RUNTIME, message: e.to_string() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::validation(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::validation(e),
            _ => CliError::runtime(e),
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Pretrain { config, data, out, dry_run, resume } => {
            pretrain(config.as_deref(), data.as_deref(), &out, dry_run, resume)
        }
        Command::Eval { config, checkpoint, data, task, out, force } => {
            eval(config.as_deref(), &checkpoint, data.as_deref(), task, &out, force)
        }
        Command::CheckGeometry { trials, resolution, seed, dump } => {
            geometry(trials, resolution, seed, dump.as_deref())
        }
        Command::Visualize { config, checkpoint, data, out, videos, force } => {
            visualize(config.as_deref(), &checkpoint, data.as_deref(), &out, videos, force)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env()?;
            c
        }
    };
    if cfg.train.device != "cpu" {
        return Err(CliError::validation(format!("device {:?} is not available; only \"cpu\" is supported", cfg.train.device)));
    }
    Ok(cfg)
}

/// Creates `dir`, refusing one that already has content.
fn fresh_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() && std::fs::read_dir(dir).map_err(CliError::runtime)?.next().is_some() {
        return Err(CliError::validation(format!("{} exists and is not empty; refusing to overwrite", dir.display())));
    }
    std::fs::create_dir_all(dir).map_err(CliError::runtime)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).map_err(CliError::runtime)?;
    std::fs::write(dir.join(HASH_FILE), format!("{}\n", cfg.hash())).map_err(CliError::runtime)
}

fn load_split(cfg: &RunConfig, data: Option<&Path>) -> Result<(Vec<Video>, Vec<Video>), CliError> {
    let ds = match data.or(cfg.data.folder.as_deref()) {
        Some(dir) => load_clip_folder(dir, cfg.data.resize)?,
        None => generate_synthetic(&cfg.data.synthetic, cfg.data.seed)?,
    };
    Ok(split_per_class(&ds.videos, cfg.data.test_per_class))
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<i32, CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    fresh_dir(out)?;
    let ds = generate_synthetic(&cfg.data.synthetic, cfg.data.seed)?;
    let manifest = save_dataset(&ds, out)?;
    write_config(out, &cfg)?;
    println!("wrote {} videos to {}", manifest.videos.len(), out.display());
    println!("manifest sha256 {}", manifest.hash());
    Ok(EXIT_OK)
}

fn pretrain(config: Option<&Path>, data: Option<&Path>, out: &Path, dry_run: bool, resume: bool) -> Result<i32, CliError> {
    let cfg = load_config(config)?;
    let (train, _) = load_split(&cfg, data)?;
    if dry_run {
        let vids = unlabeled(&train);
        let n = cfg.train.batch_size.min(vids.len());
        let batch = build_batch(&vids[..n], &cfg.augment, &cfg.encoder, &cfg.train, &cfg.loss, cfg.train.seed, &[0])
            .map_err(CliError::validation)?;
        let model = Model::new(&cfg.encoder, &cfg.loss, cfg.train.k, cfg.train.seed).map_err(CliError::validation)?;
        let v = &batch.videos[0];
        println!("videos {}  clips/video {}  groups {}", batch.videos.len(), batch.k, batch.levels.len());
        println!("global view {:?}  local clip {:?}", v.global.shape(), v.locals[0].shape());
        println!("clip grid {:?}  video grid {:?}", cfg.encoder.grid(crate::encoder::Mode::Clip), cfg.encoder.grid(crate::encoder::Mode::Video));
        println!("parameters {}", model.store.num_scalars());
        let (_, _, losses) = forward_batch(&model, &batch, &cfg.loss, cfg.train.seed, &[0]).map_err(CliError::runtime)?;
        println!("losses {}", serde_json::to_string(&losses).expect("serialisable"));
        return Ok(EXIT_OK);
    }
    if resume {
        if !out.join(LAST_CHECKPOINT).exists() {
            return Err(CliError::validation(format!("nothing to resume in {}", out.display())));
        }
    } else {
        fresh_dir(out)?;
        write_config(out, &cfg)?;
    }
    let opts = FitOptions { out_dir: Some(out.to_path_buf()), resume, stop_after_epochs: None };
    let fit = crate::pipeline::pretrain(&cfg, &train, &opts).map_err(CliError::runtime)?;
    let last = fit.metrics.last();
    println!(
        "trained {} epochs, {} steps; final loss {}",
        fit.epochs_completed,
        last.map_or(0, |m| m.step + 1),
        last.map_or("n/a".into(), |m| format!("{:.5}", m.losses.total))
    );
    Ok(EXIT_OK)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path, force: bool) -> Result<Model, CliError> {
    let ckpt = Checkpoint::load(checkpoint).map_err(CliError::runtime)?;
    ckpt.check_hash(&cfg.hash(), force).map_err(CliError::validation)?;
    let mut model = Model::new(&cfg.encoder, &cfg.loss, cfg.train.k, cfg.train.seed).map_err(CliError::validation)?;
    ckpt.restore_into(&mut model.store).map_err(CliError::validation)?;
    info!("loaded {} (epoch {})", checkpoint.display(), ckpt.header.epoch);
    Ok(model)
}

/// A run directory stands for its best checkpoint.
fn resolve_checkpoint(p: &Path) -> PathBuf {
    if p.is_dir() {
        let best = p.join(BEST_CHECKPOINT);
        if best.exists() {
            return best;
        }
        return p.join(LAST_CHECKPOINT);
    }
    p.to_path_buf()
}

fn eval(config: Option<&Path>, checkpoint: &Path, data: Option<&Path>, task: Task, out: &Path, force: bool) -> Result<i32, CliError> {
    let cfg = load_config(config)?;
    let model = load_model(&cfg, &resolve_checkpoint(checkpoint), force)?;
    let (train, test) = load_split(&cfg, data)?;
    fresh_dir(out)?;
    write_config(out, &cfg)?;
    let report = evaluate(&model, &cfg, &train, &test).map_err(CliError::runtime)?;
    let io = CliError::runtime;
    let want = |t: Task| task == Task::All || task == t;
    if want(Task::Probe) {
        write_json(&out.join("probe.json"), &report.probe).map_err(io)?;
        println!("probe top-1 {:.4}", report.probe.top1);
    }
    if want(Task::Retrieve) {
        write_json(&out.join("retrieval.json"), &report.retrieval).map_err(io)?;
        report.retrieval.write_csv(&out.join("retrieval.csv")).map_err(CliError::runtime)?;
        for (k, r) in &report.retrieval.recall {
            println!("R@{k} {r:.4}");
        }
    }
    if want(Task::Caam) {
        write_json(&out.join("caam.json"), &serde_json::json!({ "foreground_score": report.caam_foreground })).map_err(io)?;
        println!("caam foreground {}", report.caam_foreground.map_or("n/a".into(), |s| format!("{s:.4}")));
    }
    if want(Task::Order) {
        write_json(&out.join("order.json"), &serde_json::json!({ "order_accuracy": report.order_accuracy })).map_err(io)?;
        println!("order accuracy {}", report.order_accuracy.map_or("n/a".into(), |s| format!("{s:.4}")));
    }
    if task == Task::All {
        write_json(&out.join("report.json"), &report).map_err(io)?;
    }
    Ok(EXIT_OK)
}

fn geometry(trials: usize, resolution: usize, seed: u64, dump: Option<&Path>) -> Result<i32, CliError> {
    if trials == 0 || resolution == 0 {
        return Err(CliError::validation("trials and resolution must be positive"));
    }
    let start = std::time::Instant::now();
    let report = check_geometry(trials, resolution, seed).map_err(CliError::runtime)?;
    println!("trials {}  resolution {}", report.trials, report.resolution);
    println!("max |exact - oracle| = {:.3e}  (bound {:.3e})", report.max_deviation, report.bound);
    println!("max |row sum - 1| = {:.3e}", report.max_row_sum_error);
    println!("identity configuration exact: {}", report.identity_exact);
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    if let Some(dir) = dump {
        fresh_dir(dir)?;
        let mut rng = crate::rng::stream(seed, "check-geometry-dump", &[]);
        let (lp, gp, ls, gs) = random_crop_pair(&mut rng);
        let m = crate::geometry::correspondence(&lp, &gp, ls, gs).map_err(CliError::runtime)?;
        m.write_csv(&dir.join("correspondence.csv")).map_err(CliError::runtime)?;
        m.write_heatmap(&dir.join("correspondence.png"), 8).map_err(CliError::runtime)?;
        write_json(&dir.join("pair.json"), &serde_json::json!({ "local": lp, "global": gp, "local_grid": ls, "global_grid": gs }))
            .map_err(CliError::runtime)?;
        println!("dumped example matrix to {}", dir.display());
    }
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn visualize(
    config: Option<&Path>,
    checkpoint: &Path,
    data: Option<&Path>,
    out: &Path,
    videos: usize,
    force: bool,
) -> Result<i32, CliError> {
    let cfg = load_config(config)?;
    let model = load_model(&cfg, &resolve_checkpoint(checkpoint), force)?;
    let (_, test) = load_split(&cfg, data)?;
    fresh_dir(out)?;
    write_config(out, &cfg)?;
    for v in test.iter().take(videos) {
        let r = caam(&model, v).map_err(CliError::runtime)?;
        let t = v.num_frames();
        let frames: Vec<usize> = (0..4).map(|i| (2 * i + 1) * t / 8).collect();
        let path = out.join(format!("caam_{}.png", v.id));
        write_caam_png(v, &r.maps, &frames, &path).map_err(CliError::runtime)?;
        println!("{}  foreground {:.4}", path.display(), r.foreground_score);
    }
    Ok(EXIT_OK)
}
