//! Region contrast on toy features: soft targets spread credit over
//! overlapping cells, one-hot targets recover per-cell InfoNCE.

use vidssl::autograd::Graph;
use vidssl::geometry::{CorrespondenceMatrix, GridShape};
use vidssl::losses::{info_nce, region_contrast};
use vidssl::tensor::Tensor;

fn main() {
    let tau = 0.1;
    let local = [1.0, 0.0, 0.0, 1.0];
    let global = [1.0, 0.1, 0.1, 1.0, -1.0, 0.0];
    let negatives = [0.0, -1.0];
    let shapes = (GridShape::new(1, 1, 2), GridShape::new(1, 1, 3));
    let soft = CorrespondenceMatrix { local_shape: shapes.0, global_shape: shapes.1, values: vec![0.7, 0.3, 0.0, 0.0, 1.0, 0.0] };
    let hard = CorrespondenceMatrix { local_shape: shapes.0, global_shape: shapes.1, values: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0] };

    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::from_f64(&[2, 2], &local));
    let gv = g.constant(Tensor::from_f64(&[3, 2], &global));
    let n = g.constant(Tensor::from_f64(&[1, 2], &negatives));
    let soft_loss = region_contrast(&mut g, l, gv, &[&soft], Some(n), tau).unwrap();
    let hard_loss = region_contrast(&mut g, l, gv, &[&hard], Some(n), tau).unwrap();
    println!("soft targets  {:.5}", g.scalar(soft_loss));
    println!("one-hot       {:.5}", g.scalar(hard_loss));

    let mut per_cell = 0.0;
    for (i, j) in [(0usize, 0usize), (1, 1)] {
        let mut h = Graph::<f64>::new();
        let q = h.constant(Tensor::from_f64(&[1, 2], &local[2 * i..2 * i + 2]));
        let p = h.constant(Tensor::from_f64(&[1, 2], &global[2 * j..2 * j + 2]));
        let mut rest: Vec<f64> = (0..3).filter(|&c| c != j).flat_map(|c| global[2 * c..2 * c + 2].to_vec()).collect();
        rest.extend_from_slice(&negatives);
        let ng = h.constant(Tensor::from_f64(&[rest.len() / 2, 2], &rest));
        let v = info_nce(&mut h, q, p, ng, tau).unwrap();
        per_cell += h.scalar(v) / 2.0;
    }
    println!("mean InfoNCE  {per_cell:.5}");
}
