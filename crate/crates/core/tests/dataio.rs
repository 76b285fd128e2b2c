use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{s, Axis};
use vidssl::dataio::{generate_synthetic, load_clip_folder, save_dataset, DataError, MotionKind, SyntheticSpec};

fn write_frames(dir: &Path, n: usize, size: (u32, u32)) {
    std::fs::create_dir_all(dir).unwrap();
    for t in 0..n {
        let img = RgbImage::from_fn(size.0, size.1, |x, y| Rgb([(x * 7 + t as u32) as u8, (y * 5) as u8, 128]));
        img.save(dir.join(format!("{t:03}.png"))).unwrap();
    }
}

#[test]
fn folder_of_three_videos_keeps_frame_counts() {
    let tmp = tempfile::tempdir().unwrap();
    for v in ["a", "b", "c"] {
        write_frames(&tmp.path().join(v), 20, (40, 30));
    }
    let ds = load_clip_folder(tmp.path(), (32, 32)).unwrap();
    assert_eq!(ds.len(), 3);
    for v in &ds.videos {
        assert_eq!(v.frames.shape(), &[20, 32, 32, 3]);
        assert!(v.frames.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(v.label, None);
    }
    assert_eq!(ds.videos.iter().map(|v| v.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
}

#[test]
fn mixed_frame_sizes_are_resized() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("v");
    write_frames(&dir, 16, (50, 20));
    RgbImage::from_pixel(13, 77, Rgb([255, 0, 0])).save(dir.join("100.png")).unwrap();
    let ds = load_clip_folder(tmp.path(), (24, 36)).unwrap();
    assert_eq!(ds.videos[0].frames.shape(), &[17, 24, 36, 3]);
    let last = ds.videos[0].frames.slice(s![16, .., .., 0]);
    assert!(last.iter().all(|&r| r > 0.99));
}

#[test]
fn corrupt_frame_is_named_in_the_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("v");
    write_frames(&dir, 16, (32, 32));
    std::fs::write(dir.join("007.png"), b"not an image").unwrap();
    let err = load_clip_folder(tmp.path(), (32, 32)).unwrap_err();
    assert!(matches!(err, DataError::Ingest { .. }));
    assert!(err.to_string().contains("007.png"), "{err}");
}

#[test]
fn empty_or_missing_folders_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(load_clip_folder(tmp.path(), (32, 32)).unwrap_err().to_string().contains(&tmp.path().display().to_string()));
    std::fs::create_dir(tmp.path().join("empty")).unwrap();
    let err = load_clip_folder(tmp.path(), (32, 32)).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");
    assert!(load_clip_folder(&tmp.path().join("absent"), (32, 32)).is_err());
}

#[test]
fn saved_dataset_round_trips_with_labels_and_masks() {
    let spec = SyntheticSpec { videos_per_class: 2, canvas: (16, 64, 64), ..Default::default() };
    let ds = generate_synthetic(&spec, 5).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ds");
    let manifest = save_dataset(&ds, &dir).unwrap();
    assert_eq!(manifest.videos.len(), 8);
    let back = load_clip_folder(&dir, (64, 64)).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.videos.iter().zip(&back.videos) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.meta.as_ref().map(|m| (m.background, m.motion)), b.meta.as_ref().map(|m| (m.background, m.motion)));
        assert_eq!(a.masks, b.masks);
        let err = (&a.frames - &b.frames).mapv(f32::abs).fold(0.0f32, |m, &x| m.max(x));
        assert!(err <= 0.5 / 255.0 + 1e-6, "quantisation error {err}");
    }
    assert!(save_dataset(&ds, &dir).is_err(), "must refuse to overwrite");
}

#[test]
fn generation_is_bit_identical_per_seed() {
    let spec = SyntheticSpec { num_classes: 2, videos_per_class: 4, canvas: (16, 64, 64), ..Default::default() };
    let a = generate_synthetic(&spec, 0).unwrap();
    let b = generate_synthetic(&spec, 0).unwrap();
    let c = generate_synthetic(&spec, 1).unwrap();
    assert_eq!(a.videos, b.videos);
    assert_ne!(a.videos[0].frames, c.videos[0].frames);
}

fn histogram(values: impl Iterator<Item = f32>, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let mut n = 0.0;
    for v in values {
        h[((v * bins as f32) as usize).min(bins - 1)] += 1.0;
        n += 1.0;
    }
    h.iter().map(|c| c / n).collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Left- and right-moving sprites: the middle frame has the same pixel
/// distribution in both classes, while the first frame does not.
#[test]
fn middle_frame_distribution_matches_across_classes() {
    let spec = SyntheticSpec {
        num_classes: 2,
        videos_per_class: 60,
        canvas: (16, 64, 64),
        motion_kinds: vec![MotionKind::LinearLeft, MotionKind::LinearRight],
        ..Default::default()
    };
    let ds = generate_synthetic(&spec, 3).unwrap();
    assert!(ds.len() >= 100);
    let t_mid = spec.canvas.0 / 2;
    let frame_hist = |class: usize, t: usize| {
        let vals = ds
            .videos
            .iter()
            .filter(|v| v.label == Some(class))
            .flat_map(|v| v.frames.index_axis(Axis(0), t).iter().copied().collect::<Vec<_>>());
        histogram(vals, 32)
    };
    let mid = l1(&frame_hist(0, t_mid), &frame_hist(1, t_mid));
    assert!(mid < 0.02, "middle-frame histogram distance {mid}");

    // Horizontal sprite position in the first frame separates the classes.
    let mean_x = |class: usize| {
        let mut acc = (0.0, 0.0);
        for v in ds.videos.iter().filter(|v| v.label == Some(class)) {
            let m = v.masks.as_ref().unwrap().index_axis(Axis(0), 0).to_owned();
            for ((_, x), &on) in m.indexed_iter() {
                if on {
                    acc.0 += x as f64;
                    acc.1 += 1.0;
                }
            }
        }
        acc.0 / acc.1
    };
    assert!(mean_x(0) > mean_x(1) + 5.0, "left-movers start right of right-movers");
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn background_is_uncorrelated_with_class() {
    let spec = SyntheticSpec { videos_per_class: 63, canvas: (16, 64, 64), ..Default::default() };
    let (mut bg, mut label) = (Vec::new(), Vec::new());
    for seed in 0..4 {
        let ds = generate_synthetic(&spec, seed).unwrap();
        for v in &ds.videos {
            bg.push(v.meta.as_ref().unwrap().background as f64);
            label.push(v.label.unwrap() as f64);
        }
    }
    assert!(bg.len() >= 1000);
    let r = pearson(&bg, &label);
    assert!(r.abs() < 0.1, "correlation {r}");
    // Every background that appears is shared by at least two classes.
    let mut classes = std::collections::BTreeMap::<usize, std::collections::BTreeSet<usize>>::new();
    for (b, l) in bg.iter().zip(&label) {
        classes.entry(*b as usize).or_default().insert(*l as usize);
    }
    assert!(classes.values().all(|c| c.len() >= 2));
}

#[test]
fn small_canvas_is_a_configuration_error() {
    let spec = SyntheticSpec { canvas: (8, 64, 64), ..Default::default() };
    assert!(matches!(generate_synthetic(&spec, 0), Err(DataError::Config(_))));
}
