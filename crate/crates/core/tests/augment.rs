use ndarray::Array4;
use proptest::prelude::*;
use rand::Rng;
use vidssl::augment::{
    apply_crop, apply_lowlevel, sample_global_crop, sample_local_crop, sample_lowlevel, AugmentConfig, CropParams,
    IntensityGrid,
};
use vidssl::rng::stream;

const DRAWS: usize = 10_000;

#[test]
fn global_crop_extent_never_below_weak_min() {
    let cfg = AugmentConfig::default();
    let mut rng = stream(11, "mc-global", &[]);
    let (mut min_h, mut min_w, mut flips) = (1.0f64, 1.0f64, 0usize);
    for _ in 0..DRAWS {
        let p = sample_global_crop(32, &cfg, &mut rng).unwrap();
        assert_eq!((p.t0, p.t1), (0.0, 1.0));
        min_h = min_h.min(p.y1 - p.y0);
        min_w = min_w.min(p.x1 - p.x0);
        flips += p.flip as usize;
    }
    assert!(min_h >= 0.9 - 1e-12 && min_w >= 0.9 - 1e-12, "min extents {min_h} {min_w}");
    // Binomial(10000, 0.5) lies within 5 standard deviations of 5000.
    assert!((flips as f64 - 5000.0).abs() < 250.0, "{flips} flips");
}

#[test]
fn local_centres_stay_in_their_segment() {
    let cfg = AugmentConfig::default();
    let mut rng = stream(12, "mc-local", &[]);
    let g = CropParams::full(16);
    for _ in 0..DRAWS {
        let p = sample_local_crop(2, 4, &g, 64, &cfg, &mut rng).unwrap();
        let c = p.center_t();
        assert!((0.25..=0.5).contains(&c), "centre {c}");
    }
}

#[test]
fn local_boxes_inside_full_frame_with_area_in_range() {
    let cfg = AugmentConfig::default();
    let mut rng = stream(13, "mc-contain", &[]);
    let g = CropParams::full(16);
    for i in 0..DRAWS {
        let p = sample_local_crop(1 + i % 4, 4, &g, 64, &cfg, &mut rng).unwrap();
        assert!(p.y0 >= 0.0 && p.y1 <= 1.0 && p.x0 >= 0.0 && p.x1 <= 1.0);
        let area = p.spatial_area();
        assert!((0.3 - 1e-9..=0.8 + 1e-9).contains(&area), "area ratio {area}");
    }
}

#[test]
fn clips_of_one_video_cover_disjoint_segments() {
    let cfg = AugmentConfig::default();
    let mut rng = stream(14, "segments", &[]);
    for _ in 0..500 {
        let g = sample_global_crop(64, &cfg, &mut rng).unwrap();
        let centres: Vec<f64> =
            (1..=4).map(|k| sample_local_crop(k, 4, &g, 64, &cfg, &mut rng).unwrap().center_t()).collect();
        for (k, c) in centres.iter().enumerate() {
            assert!(*c >= k as f64 / 4.0 && *c <= (k + 1) as f64 / 4.0);
        }
    }
}

fn global_crop() -> impl Strategy<Value = CropParams> {
    (0.9f64..=1.0, 0.9f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, any::<bool>()).prop_map(|(h, w, a, b, flip)| {
        let (y0, x0) = (a * (1.0 - h), b * (1.0 - w));
        CropParams { t0: 0.0, t1: 1.0, y0, y1: y0 + h, x0, x1: x0 + w, flip, n_frames: 16 }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn local_crop_contained_in_any_global(g in global_crop(), k in 1usize..=4, seed in any::<u64>(), t in 32usize..128) {
        let cfg = AugmentConfig::default();
        let p = sample_local_crop(k, 4, &g, t, &cfg, &mut stream(seed, "prop", &[])).unwrap();
        prop_assert!(p.validate().is_ok());
        prop_assert!(p.contained_in(&g));
        let area = p.spatial_area() / g.spatial_area();
        prop_assert!((0.3 - 1e-9..=0.8 + 1e-9).contains(&area), "relative area {}", area);
    }

    #[test]
    fn magnitudes_lie_in_their_level_buckets(idx in 0usize..512, seed in any::<u64>()) {
        let grid = IntensityGrid::new(4, 2, 4);
        let level = grid.level_at(idx);
        let p = sample_lowlevel(&grid, Some(level), &mut stream(seed, "lvl", &[])).unwrap();
        prop_assert_eq!(p.level, level);
        let inside = |v: f64, base: f64, n: usize, l: usize| {
            let (lo, hi) = IntensityGrid::bucket(base, n, l);
            lo <= v && v < hi
        };
        prop_assert!(inside(p.brightness, grid.base[0], 4, level.b));
        prop_assert!(inside(p.contrast, grid.base[1], 4, level.c));
        prop_assert!(inside(p.saturation, grid.base[2], 4, level.s));
        prop_assert!(inside(p.hue, grid.base[3], 2, level.h));
        prop_assert!(inside(p.blur_sigma, grid.blur_sigma_max, 4, level.g));
    }

    #[test]
    fn lowlevel_output_stays_in_unit_range(seed in any::<u64>()) {
        let mut rng = stream(seed, "clip", &[]);
        let clip = Array4::from_shape_fn((4, 12, 12, 3), |_| rng.gen_range(0.0f32..=1.0));
        let p = sample_lowlevel(&IntensityGrid::default(), None, &mut rng).unwrap();
        let out = apply_lowlevel(&clip, &p, &mut rng);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_output_has_requested_shape(g in global_crop(), h in 4usize..20, w in 4usize..20) {
        let v = Array4::from_elem((20, 16, 16, 3), 0.5f32);
        let out = apply_crop(&v, &g, (h, w));
        prop_assert_eq!(out.shape(), &[16, h, w, 3]);
        prop_assert!(out.iter().all(|&x| (x - 0.5).abs() < 1e-6));
    }
}
