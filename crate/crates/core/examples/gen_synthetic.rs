//! Renders the synthetic motion set and writes it as PNG frame folders.
//!
//! `cargo run --example gen_synthetic -- [out_dir]`

use std::collections::BTreeMap;

use vidssl::dataio::{generate_synthetic, save_dataset, SyntheticSpec};

fn main() {
    let spec = SyntheticSpec { videos_per_class: 3, ..Default::default() };
    let ds = generate_synthetic(&spec, 0).expect("default spec is valid");
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for v in &ds.videos {
        *per_class.entry(v.label.unwrap_or(usize::MAX)).or_default() += 1;
    }
    let v = &ds.videos[0];
    println!("{} videos, {} frames of {}x{} each", ds.len(), v.num_frames(), v.height(), v.width());
    for (label, n) in &per_class {
        println!("  class {label} ({:?}): {n} videos", spec.motion_kinds[*label]);
    }
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| {
        std::env::temp_dir().join(format!("vidssl-synthetic-{}", std::process::id()))
    });
    match save_dataset(&ds, &out) {
        Ok(m) => println!("wrote {} (manifest sha256 {})", out.display(), m.hash()),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    }
}
