//! Class-agnostic activation maps of a briefly pretrained encoder, written as
//! PNG strips next to their foreground scores.

use vidssl::config::RunConfig;
use vidssl::eval::{caam, write_caam_png};
use vidssl::pipeline::{prepare_data, pretrain};
use vidssl::trainer::FitOptions;

fn main() {
    let mut cfg = RunConfig::fast();
    cfg.data.synthetic.videos_per_class = 8;
    cfg.data.test_per_class = 1;
    cfg.train.epochs = 2;
    let (train, test) = prepare_data(&cfg).unwrap();
    let fit = pretrain(&cfg, &train, &FitOptions::default()).unwrap();
    let dir = std::env::temp_dir().join(format!("vidssl-caam-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for v in &test {
        let r = caam(&fit.model, v).unwrap();
        let t = v.num_frames();
        let path = dir.join(format!("{}.png", v.id));
        write_caam_png(v, &r.maps, &[t / 8, 3 * t / 8, 5 * t / 8, 7 * t / 8], &path).unwrap();
        println!("{}  foreground {:.3}", path.display(), r.foreground_score);
    }
}
