//! Small 3-D residual video encoder with a clip mode and a video mode.
//!
//! Both modes run the same layers; the video mode only uses smaller temporal
//! strides, so its output grid keeps more temporal cells.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::CropParams;
use crate::autograd::{Graph, GraphError, Var};
use crate::geometry::GridShape;
use crate::nn::{Conv3d, GroupNorm, Mlp};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match configured {want:?}")]
    ShapeMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Clip,
    Video,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stem_kernel: [usize; 3],
    pub stem_stride: [usize; 3],
    pub spatial_strides: Vec<usize>,
    pub clip_temporal_strides: Vec<usize>,
    pub video_temporal_strides: Vec<usize>,
    pub proj_dim: usize,
    /// Input clip size `(T, H, W)`.
    pub input: [usize; 3],
    /// Give the video mode its own weights instead of sharing the clip-mode ones.
    #[serde(default)]
    pub unshared: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Desk-scale default: 16x64x64 input, clip grid (2, 4, 4), video grid (8, 4, 4).
    pub fn desk() -> Self {
        EncoderConfig {
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            stem_kernel: [3, 5, 5],
            stem_stride: [1, 2, 2],
            spatial_strides: vec![1, 2, 2, 2],
            clip_temporal_strides: vec![2, 2, 2, 1],
            video_temporal_strides: vec![2, 1, 1, 1],
            proj_dim: 64,
            input: [16, 64, 64],
            unshared: false,
        }
    }

    /// Reduced profile for quick CPU experiments: 8x32x32 input, clip grid
    /// (2, 4, 4), video grid (8, 4, 4).
    pub fn fast() -> Self {
        EncoderConfig {
            widths: vec![8, 16, 32, 64],
            blocks_per_stage: 1,
            stem_kernel: [3, 3, 3],
            stem_stride: [1, 2, 2],
            spatial_strides: vec![1, 2, 2, 1],
            clip_temporal_strides: vec![1, 2, 2, 1],
            video_temporal_strides: vec![1, 1, 1, 1],
            proj_dim: 32,
            input: [8, 32, 32],
            unshared: false,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let n = self.widths.len();
        if n == 0 || self.blocks_per_stage == 0 || self.proj_dim == 0 {
            return Err(EncoderError::Config("need at least one stage, one block and a projection dim".into()));
        }
        if self.spatial_strides.len() != n || self.clip_temporal_strides.len() != n || self.video_temporal_strides.len() != n
        {
            return Err(EncoderError::Config("stride lists must have one entry per stage".into()));
        }
        let all = self.spatial_strides.iter().chain(&self.clip_temporal_strides).chain(&self.video_temporal_strides);
        if all.chain(&self.stem_stride).any(|&s| s == 0) || self.widths.contains(&0) {
            return Err(EncoderError::Config("strides and widths must be positive".into()));
        }
        if self.video_temporal_strides.iter().zip(&self.clip_temporal_strides).any(|(v, c)| v > c) {
            return Err(EncoderError::Config("video-mode strides must not exceed clip-mode strides".into()));
        }
        for mode in [Mode::Clip, Mode::Video] {
            let g = self.grid(mode);
            if !g.is_valid() {
                return Err(EncoderError::Config(format!("{mode:?} mode output grid is empty")));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn temporal_strides(&self, mode: Mode) -> &[usize] {
        match mode {
            Mode::Clip => &self.clip_temporal_strides,
            Mode::Video => &self.video_temporal_strides,
        }
    }

    /// Output grid announced for `mode`; always equal to the realised output shape.
    pub fn grid(&self, mode: Mode) -> GridShape {
        let out = |n: usize, k: usize, s: usize| (n + 2 * (k / 2) - k) / s + 1;
        let mut t = out(self.input[0], self.stem_kernel[0], self.stem_stride[0]);
        let mut h = out(self.input[1], self.stem_kernel[1], self.stem_stride[1]);
        let mut w = out(self.input[2], self.stem_kernel[2], self.stem_stride[2]);
        for (st, &ss) in self.temporal_strides(mode).iter().zip(&self.spatial_strides) {
            t = out(t, 3, *st);
            h = out(h, 3, ss);
            w = out(w, 3, ss);
        }
        GridShape::new(t, h, w)
    }

    /// `T_v / (K * T_c)` for `k` local clips.
    pub fn temporal_ratio(&self, k: usize) -> f64 {
        self.grid(Mode::Video).t as f64 / (k * self.grid(Mode::Clip).t) as f64
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv3d,
    gn1: GroupNorm,
    conv2: Conv3d,
    gn2: GroupNorm,
    shortcut: Option<(Conv3d, GroupNorm)>,
}

#[derive(Clone, Debug)]
struct Trunk {
    stem: Conv3d,
    stem_gn: GroupNorm,
    /// Per stage, per block.
    stages: Vec<Vec<Block>>,
}

impl Trunk {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Encoder;
        let stem = Conv3d::new(store, &format!("{prefix}stem"), g, 3, cfg.widths[0], cfg.stem_kernel, rng);
        let stem_gn = GroupNorm::new(store, &format!("{prefix}stem.gn"), g, cfg.widths[0], 1.0);
        let mut cin = cfg.widths[0];
        let mut stages = Vec::new();
        for (s, &cout) in cfg.widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let name = format!("{prefix}stage{s}.block{b}");
                let needs_proj = b == 0
                    && (cin != cout
                        || cfg.spatial_strides[s] != 1
                        || cfg.clip_temporal_strides[s] != 1
                        || cfg.video_temporal_strides[s] != 1);
                let shortcut = needs_proj.then(|| {
                    (
                        Conv3d::new(store, &format!("{name}.down"), g, cin, cout, [1, 1, 1], rng),
                        GroupNorm::new(store, &format!("{name}.down.gn"), g, cout, 1.0),
                    )
                });
                blocks.push(Block {
                    conv1: Conv3d::new(store, &format!("{name}.conv1"), g, cin, cout, [3, 3, 3], rng),
                    gn1: GroupNorm::new(store, &format!("{name}.gn1"), g, cout, 1.0),
                    conv2: Conv3d::new(store, &format!("{name}.conv2"), g, cout, cout, [3, 3, 3], rng),
                    gn2: GroupNorm::new(store, &format!("{name}.gn2"), g, cout, 0.5),
                    shortcut,
                });
                cin = cout;
            }
            stages.push(blocks);
        }
        Trunk { stem, stem_gn, stages }
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cfg: &EncoderConfig,
        x: Var,
        mode: Mode,
    ) -> Var {
        let mut h = self.stem.forward(g, store, x, cfg.stem_stride);
        h = self.stem_gn.forward(g, store, h);
        h = g.relu(h);
        let ts = cfg.temporal_strides(mode);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                let stride = if b == 0 { [ts[s], cfg.spatial_strides[s], cfg.spatial_strides[s]] } else { [1, 1, 1] };
                let mut y = block.conv1.forward(g, store, h, stride);
                y = block.gn1.forward(g, store, y);
                y = g.relu(y);
                y = block.conv2.forward(g, store, y, [1, 1, 1]);
                y = block.gn2.forward(g, store, y);
                let skip = match &block.shortcut {
                    Some((conv, gn)) => {
                        let z = conv.forward(g, store, h, stride);
                        gn.forward(g, store, z)
                    }
                    None => h,
                };
                let sum = g.add(y, skip);
                h = g.relu(sum);
            }
        }
        h
    }
}

/// Encoder output for a batch held on a graph: `(N, C, T, H, W)`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub var: Var,
    pub grid: GridShape,
    pub mode: Mode,
    pub batch: usize,
}

/// Encoder output for one clip, detached from any graph.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    /// `(C, T, H, W)`.
    pub values: Tensor<f32>,
    pub grid: GridShape,
    pub source_params: CropParams,
    pub mode: Mode,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    clip: Trunk,
    video: Option<Trunk>,
    pub head: Mlp,
}

impl Encoder {
    pub fn new<T: Real>(cfg: EncoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let clip = Trunk::new(store, "enc.", &cfg, rng);
        let video = cfg.unshared.then(|| Trunk::new(store, "enc_video.", &cfg, rng));
        let c = cfg.channels();
        let head = Mlp::new(store, "proj", ParamGroup::Projection, (c, c, cfg.proj_dim), rng);
        Ok(Encoder { cfg, clip, video, head })
    }

    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        vec![n, 3, self.cfg.input[0], self.cfg.input[1], self.cfg.input[2]]
    }

    /// Encodes a batch `(N, 3, T, H, W)` already on the graph.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Encoded, EncoderError> {
        let shape = g.shape(x).to_vec();
        let want = self.input_shape(shape.first().copied().unwrap_or(0));
        if shape != want || shape[0] == 0 {
            return Err(EncoderError::ShapeMismatch { got: shape, want });
        }
        let trunk = match (mode, &self.video) {
            (Mode::Video, Some(v)) => v,
            _ => &self.clip,
        };
        let var = trunk.forward(g, store, &self.cfg, x, mode);
        let grid = self.cfg.grid(mode);
        debug_assert_eq!(&g.shape(var)[2..], &[grid.t, grid.h, grid.w]);
        Ok(Encoded { var, grid, mode, batch: shape[0] })
    }

    /// Global average over the grid: `(N, C)`, optionally unit-normalised.
    pub fn pool<T: Real>(&self, g: &mut Graph<T>, e: &Encoded, unit: bool) -> Result<Var, EncoderError> {
        let p = g.mean_pool(e.var);
        Ok(if unit { g.l2_normalize_rows(p)? } else { p })
    }

    /// Projection head applied to rows of C-dim vectors (cells or pooled vectors).
    pub fn project<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, rows: Var) -> Var {
        self.head.forward(g, store, rows)
    }

    /// Forward one clip without recording gradients.
    pub fn feature_map<T: Real>(
        &self,
        store: &ParamStore<T>,
        clip: &Array4<f32>,
        params: CropParams,
        mode: Mode,
    ) -> Result<FeatureMap, EncoderError> {
        let mut g = Graph::new();
        let x = g.constant(clips_to_tensor(&[clip]));
        let e = self.encode(&mut g, store, x, mode)?;
        let v = g.value(e.var);
        let shape = v.shape()[1..].to_vec();
        Ok(FeatureMap {
            values: Tensor::new(shape, v.data().iter().map(|x| x.as_f64() as f32).collect()),
            grid: e.grid,
            source_params: params,
            mode,
        })
    }
}

/// Stacks `(T, H, W, 3)` clips in `[0, 1]` into a centred `(N, 3, T, H, W)` tensor.
pub fn clips_to_tensor<T: Real>(clips: &[&Array4<f32>]) -> Tensor<T> {
    let s = clips[0].shape();
    let (t, h, w) = (s[0], s[1], s[2]);
    let per = t * h * w;
    let mut data = vec![T::zero(); clips.len() * 3 * per];
    for (n, clip) in clips.iter().enumerate() {
        assert_eq!(clip.shape(), s, "clips in one batch must share a shape");
        for ((ti, y, x, c), &v) in clip.indexed_iter() {
            data[(n * 3 + c) * per + (ti * h + y) * w + x] = T::of(((v - 0.5) * 4.0) as f64);
        }
    }
    Tensor::new(vec![clips.len(), 3, t, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn desk_strides_give_expected_grids() {
        let cfg = EncoderConfig::desk();
        assert_eq!(cfg.grid(Mode::Clip), GridShape::new(2, 4, 4));
        assert_eq!(cfg.grid(Mode::Video), GridShape::new(8, 4, 4));
        let fast = EncoderConfig::fast();
        assert_eq!(fast.grid(Mode::Clip), GridShape::new(2, 4, 4));
        assert_eq!(fast.grid(Mode::Video), GridShape::new(8, 4, 4));
        assert_eq!(fast.temporal_ratio(4), 1.0);
    }

    #[test]
    fn realised_grid_matches_announced() {
        let cfg = EncoderConfig::fast();
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(cfg.clone(), &mut store, &mut stream(0, "enc", &[])).unwrap();
        for mode in [Mode::Clip, Mode::Video] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&enc.input_shape(2)));
            let e = enc.encode(&mut g, &store, x, mode).unwrap();
            let gr = cfg.grid(mode);
            assert_eq!(g.shape(e.var), &[2, cfg.channels(), gr.t, gr.h, gr.w]);
            assert!(g.value(e.var).is_finite());
        }
    }

    #[test]
    fn rejects_wrong_input_and_bad_config() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(EncoderConfig::fast(), &mut store, &mut stream(0, "enc", &[])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 32, 32]));
        assert!(matches!(enc.encode(&mut g, &store, x, Mode::Clip), Err(EncoderError::ShapeMismatch { .. })));
        let bad = EncoderConfig { video_temporal_strides: vec![2, 2, 2, 2], ..EncoderConfig::fast() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unshared_doubles_trunk_parameters() {
        let mut a = ParamStore::<f32>::new();
        Encoder::new(EncoderConfig::fast(), &mut a, &mut stream(0, "enc", &[])).unwrap();
        let mut b = ParamStore::<f32>::new();
        Encoder::new(EncoderConfig { unshared: true, ..EncoderConfig::fast() }, &mut b, &mut stream(0, "enc", &[])).unwrap();
        let trunk = a.ids_in(ParamGroup::Encoder).len();
        assert_eq!(b.ids_in(ParamGroup::Encoder).len(), 2 * trunk);
    }
}
