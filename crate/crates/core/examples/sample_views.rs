//! Draws one global view and K local clips of a synthetic video and prints
//! their crop boxes and photometric levels.

use vidssl::augment::{apply_crop, apply_lowlevel, sample_global_crop, sample_local_crop, sample_lowlevel, AugmentConfig};
use vidssl::dataio::{generate_synthetic, SyntheticSpec};
use vidssl::rng::stream;

fn main() {
    let ds = generate_synthetic(&SyntheticSpec { videos_per_class: 1, ..Default::default() }, 3).unwrap();
    let video = &ds.videos[0];
    let cfg = AugmentConfig::default();
    let k = 4;
    let mut rng = stream(0, "sample-views", &[]);
    let t = video.num_frames();

    let global = sample_global_crop(t, &cfg, &mut rng).unwrap();
    let gl = sample_lowlevel(&cfg.grid, None, &mut rng).unwrap();
    let clip = apply_lowlevel(&apply_crop(&video.frames, &global, (64, 64)), &gl, &mut rng);
    println!("global  t [{:.2}, {:.2}]  y [{:.2}, {:.2}]  x [{:.2}, {:.2}]  flip {}  level {:?}  shape {:?}",
        global.t0, global.t1, global.y0, global.y1, global.x0, global.x1, global.flip, gl.level, clip.shape());

    for kk in 1..=k {
        let local = sample_local_crop(kk, k, &global, t, &cfg, &mut rng).unwrap();
        let ll = sample_lowlevel(&cfg.grid, None, &mut rng).unwrap();
        println!(
            "local {kk}  t [{:.2}, {:.2}]  area {:.2}  flip {}  brightness {:.3}  blur sigma {:.2}  contained {}",
            local.t0,
            local.t1,
            local.spatial_area() / ((global.y1 - global.y0) * (global.x1 - global.x0)),
            local.flip,
            ll.brightness,
            ll.blur_sigma,
            local.contained_in(&global)
        );
    }
    println!("{} intensity levels in the default grid", cfg.grid.count());
}
