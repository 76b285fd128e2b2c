//! Soft correspondence between a local clip and its global view, checked
//! against the voxel-count oracle and written as a heatmap.

use vidssl::augment::CropParams;
use vidssl::geometry::{correspondence, correspondence_oracle, GridShape};

fn main() {
    let global = CropParams { t0: 0.0, t1: 1.0, y0: 0.05, y1: 0.95, x0: 0.0, x1: 0.9, flip: false, n_frames: 16 };
    let local = CropParams { t0: 0.2, t1: 0.45, y0: 0.3, y1: 0.8, x0: 0.1, x1: 0.6, flip: true, n_frames: 16 };
    let (ls, gs) = (GridShape::new(2, 4, 4), GridShape::new(8, 4, 4));
    let exact = correspondence(&local, &global, ls, gs).unwrap();
    let oracle = correspondence_oracle(&local, &global, ls, gs, 256);
    println!("matrix {} x {}", exact.rows(), exact.cols());
    println!("max |exact - oracle| = {:.2e} (bound {:.2e})", exact.max_abs_diff(&oracle), 3.0 / 256.0);
    let sums = exact.row_sums();
    println!("row sums in [{:.12}, {:.12}]", sums.iter().cloned().fold(f64::INFINITY, f64::min), sums.iter().cloned().fold(0.0, f64::max));
    for i in 0..4 {
        let row = exact.row(i);
        let nz: Vec<String> = row.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(j, v)| format!("{j}:{v:.3}")).collect();
        println!("cell {i}: {}", nz.join(" "));
    }
    let path = std::env::temp_dir().join("vidssl-correspondence.png");
    exact.write_heatmap(&path, 8).unwrap();
    println!("heatmap at {}", path.display());
}
