//! Soft spatio-temporal correspondence between feature grids.
//!
//! Each cell of a feature grid covers a tube (axis-aligned box) of the source
//! video in normalised coordinates. `S(i, j)` is the fraction of local tube `i`
//! covered by global tube `j`. Cells are flattened in `(t, h, w)` row-major
//! order everywhere in the crate.

use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::CropParams;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("grid index {index:?} outside shape {shape:?}")]
    IndexOutOfRange { index: (usize, usize, usize), shape: GridShape },
    #[error("local tube {0} has zero volume")]
    ZeroVolume(usize),
    #[error("invalid crop parameters: {0}")]
    InvalidParams(String),
    #[error("local tube {0} has no overlap with any global tube")]
    NoOverlap(usize),
    #[error("io error writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("image error writing {path}: {reason}")]
    Image { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        GridShape { t, h, w }
    }

    pub fn cells(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn flat(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }

    pub fn unflat(&self, i: usize) -> (usize, usize, usize) {
        (i / (self.h * self.w), (i / self.w) % self.h, i % self.w)
    }

    pub fn is_valid(&self) -> bool {
        self.t > 0 && self.h > 0 && self.w > 0
    }
}

/// Half-open box `[t0, t1) x [y0, y1) x [x0, x1)` in normalised video coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub t: (f64, f64),
    pub y: (f64, f64),
    pub x: (f64, f64),
}

impl Box3 {
    pub fn volume(&self) -> f64 {
        (self.t.1 - self.t.0) * (self.y.1 - self.y.0) * (self.x.1 - self.x.0)
    }

    pub fn intersection_volume(&self, other: &Box3) -> f64 {
        overlap(self.t, other.t) * overlap(self.y, other.y) * overlap(self.x, other.x)
    }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

fn split(lo: f64, hi: f64, i: usize, n: usize) -> (f64, f64) {
    let step = (hi - lo) / n as f64;
    (lo + step * i as f64, lo + step * (i + 1) as f64)
}

/// Tube covered by grid cell `(t, h, w)` of a feature map produced under `p`.
pub fn tube_of(index: (usize, usize, usize), shape: GridShape, p: &CropParams) -> Result<Box3, GeometryError> {
    let (t, h, w) = index;
    if t >= shape.t || h >= shape.h || w >= shape.w {
        return Err(GeometryError::IndexOutOfRange { index, shape });
    }
    let w = if p.flip { shape.w - 1 - w } else { w };
    Ok(Box3 {
        t: split(p.t0, p.t1, t, shape.t),
        y: split(p.y0, p.y1, h, shape.h),
        x: split(p.x0, p.x1, w, shape.w),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceMatrix {
    pub local_shape: GridShape,
    pub global_shape: GridShape,
    /// Row-major `(N_c, N_v)`.
    pub values: Vec<f64>,
}

impl CorrespondenceMatrix {
    pub fn rows(&self) -> usize {
        self.local_shape.cells()
    }

    pub fn cols(&self) -> usize {
        self.global_shape.cells()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows()).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn max_abs_diff(&self, other: &CorrespondenceMatrix) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GeometryError> {
        let io = |source| GeometryError::Io { path: path.display().to_string(), source };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for i in 0..self.rows() {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:.9}")).collect();
            writeln!(f, "{}", line.join(",")).map_err(io)?;
        }
        f.flush().map_err(io)
    }

    /// Grayscale heatmap, one `scale x scale` block per entry, white = 1.
    pub fn write_heatmap(&self, path: &Path, scale: u32) -> Result<(), GeometryError> {
        let scale = scale.max(1);
        let (rows, cols) = (self.rows() as u32, self.cols() as u32);
        let img = image::GrayImage::from_fn(cols * scale, rows * scale, |x, y| {
            let v = self.get((y / scale) as usize, (x / scale) as usize);
            image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(path).map_err(|e| GeometryError::Image { path: path.display().to_string(), reason: e.to_string() })
    }
}

fn check_params(p: &CropParams) -> Result<(), GeometryError> {
    p.validate().map_err(|e| GeometryError::InvalidParams(e.to_string()))
}

/// Exact correspondence from products of 1-D interval overlaps.
///
/// If the local box is not contained in the global box the rows are
/// renormalised to sum to one and a warning is logged.
pub fn correspondence(
    local_p: &CropParams,
    global_p: &CropParams,
    local_shape: GridShape,
    global_shape: GridShape,
) -> Result<CorrespondenceMatrix, GeometryError> {
    check_params(local_p)?;
    check_params(global_p)?;
    let nc = local_shape.cells();
    let nv = global_shape.cells();
    let globals: Vec<Box3> = (0..nv)
        .map(|j| tube_of(global_shape.unflat(j), global_shape, global_p))
        .collect::<Result<_, _>>()?;
    let contained = local_p.contained_in(global_p);
    if !contained {
        warn!("local box {local_p:?} not contained in global box {global_p:?}; renormalising rows");
    }
    let mut values = vec![0.0; nc * nv];
    for i in 0..nc {
        let b = tube_of(local_shape.unflat(i), local_shape, local_p)?;
        let vol = b.volume();
        if vol <= 0.0 {
            return Err(GeometryError::ZeroVolume(i));
        }
        let row = &mut values[i * nv..(i + 1) * nv];
        for (j, g) in globals.iter().enumerate() {
            row[j] = (b.intersection_volume(g) / vol).min(1.0);
        }
        if !contained {
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return Err(GeometryError::NoOverlap(i));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(CorrespondenceMatrix { local_shape, global_shape, values })
}

/// Per-axis share of `res` evenly spaced sample points of `interval` that fall
/// in each of `n` equal cells of `[lo, hi)`, optionally mirrored.
fn axis_counts(interval: (f64, f64), lo: f64, hi: f64, n: usize, mirror: bool, res: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n];
    for m in 0..res {
        let p = interval.0 + (m as f64 + 0.5) / res as f64 * (interval.1 - interval.0);
        if p < lo || p >= hi {
            continue;
        }
        let c = (((p - lo) / (hi - lo) * n as f64).floor() as usize).min(n - 1);
        counts[if mirror { n - 1 - c } else { c }] += 1;
    }
    counts.into_iter().map(|c| c as f64 / res as f64).collect()
}

fn local_axis(lo: f64, hi: f64, i: usize, n: usize) -> (f64, f64) {
    (lo + (hi - lo) * i as f64 / n as f64, lo + (hi - lo) * (i + 1) as f64 / n as f64)
}

/// Voxel-counting estimate of the correspondence matrix.
///
/// Every local tube is filled with a `resolution^3` lattice of voxel centres and
/// each centre is assigned to the global cell containing it. Voxel counts over
/// a product lattice factor into per-axis counts, which is how they are
/// tallied here; [`correspondence_voxels_3d`] performs the same count without
/// the factorisation.
pub fn correspondence_oracle(
    local_p: &CropParams,
    global_p: &CropParams,
    local_shape: GridShape,
    global_shape: GridShape,
    resolution: usize,
) -> CorrespondenceMatrix {
    let (ls, gs) = (local_shape, global_shape);
    let mut values = vec![0.0; ls.cells() * gs.cells()];
    for i in 0..ls.cells() {
        let (t, h, w) = ls.unflat(i);
        let w = if local_p.flip { ls.w - 1 - w } else { w };
        let ct = axis_counts(local_axis(local_p.t0, local_p.t1, t, ls.t), global_p.t0, global_p.t1, gs.t, false, resolution);
        let cy = axis_counts(local_axis(local_p.y0, local_p.y1, h, ls.h), global_p.y0, global_p.y1, gs.h, false, resolution);
        let cx = axis_counts(
            local_axis(local_p.x0, local_p.x1, w, ls.w),
            global_p.x0,
            global_p.x1,
            gs.w,
            global_p.flip,
            resolution,
        );
        for j in 0..gs.cells() {
            let (gt, gh, gw) = gs.unflat(j);
            values[i * gs.cells() + j] = ct[gt] * cy[gh] * cx[gw];
        }
    }
    CorrespondenceMatrix { local_shape, global_shape, values }
}

/// Direct 3-D voxel count, cubic in `resolution`; intended for small resolutions.
pub fn correspondence_voxels_3d(
    local_p: &CropParams,
    global_p: &CropParams,
    local_shape: GridShape,
    global_shape: GridShape,
    resolution: usize,
) -> CorrespondenceMatrix {
    let (ls, gs) = (local_shape, global_shape);
    let res = resolution as f64;
    let cell = |p: f64, lo: f64, hi: f64, n: usize| -> Option<usize> {
        (p >= lo && p < hi).then(|| (((p - lo) / (hi - lo) * n as f64).floor() as usize).min(n - 1))
    };
    let mut values = vec![0.0; ls.cells() * gs.cells()];
    for i in 0..ls.cells() {
        let (t, h, w) = ls.unflat(i);
        let w = if local_p.flip { ls.w - 1 - w } else { w };
        let (ta, tb) = local_axis(local_p.t0, local_p.t1, t, ls.t);
        let (ya, yb) = local_axis(local_p.y0, local_p.y1, h, ls.h);
        let (xa, xb) = local_axis(local_p.x0, local_p.x1, w, ls.w);
        let row = &mut values[i * gs.cells()..(i + 1) * gs.cells()];
        for a in 0..resolution {
            let pt = ta + (a as f64 + 0.5) / res * (tb - ta);
            let Some(gt) = cell(pt, global_p.t0, global_p.t1, gs.t) else { continue };
            for b in 0..resolution {
                let py = ya + (b as f64 + 0.5) / res * (yb - ya);
                let Some(gh) = cell(py, global_p.y0, global_p.y1, gs.h) else { continue };
                for c in 0..resolution {
                    let px = xa + (c as f64 + 0.5) / res * (xb - xa);
                    let Some(gw) = cell(px, global_p.x0, global_p.x1, gs.w) else { continue };
                    let gw = if global_p.flip { gs.w - 1 - gw } else { gw };
                    row[gs.flat(gt, gh, gw)] += 1.0;
                }
            }
        }
        let total = res * res * res;
        row.iter_mut().for_each(|v| *v /= total);
    }
    CorrespondenceMatrix { local_shape, global_shape, values }
}
