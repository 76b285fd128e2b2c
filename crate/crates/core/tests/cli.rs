use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
schema_version = 1

[data]
test_per_class = 1

[data.synthetic]
videos_per_class = 3

[encoder]
widths = [8, 16, 32, 64]
stem_kernel = [3, 3, 3]
stem_stride = [1, 2, 2]
spatial_strides = [1, 2, 2, 1]
clip_temporal_strides = [1, 2, 2, 1]
video_temporal_strides = [1, 1, 1, 1]
input = [8, 32, 32]
proj_dim = 32
blocks_per_stage = 1

[augment]
clip_span_frames = 8
local_frames = 8
global_frames = 8

[train]
epochs = 1

[eval]
clips_per_video = 2
"#;

fn vidssl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidssl")).args(args).env_remove("VIDSSL_SEED").env_remove("VIDSSL_DEVICE").output().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest_hash(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stdout);
    text.lines().find_map(|l| l.strip_prefix("manifest sha256 ")).unwrap().to_string()
}

#[test]
fn gen_data_is_reproducible_and_refuses_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = vidssl(&["gen-data", "--config", s(&cfg), "--seed", "5", "--out", s(&a)]);
    assert_eq!(ra.status.code(), Some(0), "{}", String::from_utf8_lossy(&ra.stderr));
    let rb = vidssl(&["gen-data", "--config", s(&cfg), "--seed", "5", "--out", s(&b)]);
    assert_eq!(manifest_hash(&ra), manifest_hash(&b_out(rb)));
    assert!(a.join("config.toml").exists() && a.join("config.sha256").exists());
    let again = vidssl(&["gen-data", "--config", s(&cfg), "--seed", "5", "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("refusing to overwrite"));
}

fn b_out(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0));
    o
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    std::fs::write(&p, "schema_version = 1\n[loss]\nw_typo = 1.0\n").unwrap();
    let r = vidssl(&["gen-data", "--config", s(&p), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("w_typo"));
    let r = vidssl(&["pretrain", "--no-such-flag"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn unsupported_device_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let r = Command::new(env!("CARGO_BIN_EXE_vidssl"))
        .args(["pretrain", "--dry-run", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))])
        .env("VIDSSL_DEVICE", "cuda")
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn dry_run_reports_shapes_and_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let r = vidssl(&["pretrain", "--dry-run", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains("parameters") && text.contains("L_rc"), "{text}");
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn check_geometry_passes_and_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let dump = tmp.path().join("dump");
    let r = vidssl(&["check-geometry", "--trials", "50", "--resolution", "64", "--dump", s(&dump)]);
    assert_eq!(r.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&r.stdout).contains("PASS"));
    assert!(dump.join("correspondence.csv").exists());
    assert!(dump.join("correspondence.png").exists());
}

#[test]
fn pretrain_then_evaluate_and_visualize() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    let r = vidssl(&["pretrain", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(run.join("last.ckpt").exists());
    assert!(vidssl(&["pretrain", "--config", s(&cfg), "--out", s(&run)]).status.code() == Some(1));

    let ev = tmp.path().join("eval");
    let r = vidssl(&["eval", "--config", s(&cfg), "--checkpoint", s(&run), "--out", s(&ev)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["probe.json", "retrieval.json", "retrieval.csv", "caam.json", "order.json", "report.json"] {
        assert!(ev.join(f).exists(), "{f}");
    }

    let other = tmp.path().join("other.toml");
    std::fs::write(&other, TINY.replace("epochs = 1", "epochs = 2")).unwrap();
    let r = vidssl(&["eval", "--config", s(&other), "--checkpoint", s(&run), "--out", s(&tmp.path().join("e2"))]);
    assert_eq!(r.status.code(), Some(1), "config hash mismatch must be refused");
    let r = vidssl(&["eval", "--config", s(&other), "--checkpoint", s(&run), "--out", s(&tmp.path().join("e3")), "--force", "--task", "probe"]);
    assert_eq!(r.status.code(), Some(0));

    let vis = tmp.path().join("vis");
    let r = vidssl(&["visualize", "--config", s(&cfg), "--checkpoint", s(&run), "--out", s(&vis), "--videos", "1"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(std::fs::read_dir(&vis).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "png")));
}
