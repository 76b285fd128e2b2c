//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. [`Graph::backward`]
//! walks the tape in reverse and returns gradients for the trainable
//! parameters that took part. The engine is single-threaded and evaluates every
//! reduction in a fixed order, so two identical passes produce bit-identical
//! values and gradients.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("row {row} has zero norm; cosine similarity is undefined")]
    ZeroNorm { row: usize },
    #[error("empty input to {0}")]
    Empty(&'static str),
}

/// Geometry of a 3-D convolution over one sample laid out as (C, T, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad[a];
            assert!(span >= kernel[a], "kernel larger than padded input on axis {a}");
            output[a] = (span - kernel[a]) / stride[a] + 1;
        }
        ConvGeom { cin, cout, input, kernel, stride, pad, output }
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn in_size(&self) -> usize {
        self.input.iter().product()
    }

    fn out_size(&self) -> usize {
        self.output.iter().product()
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    AddRowVec(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(T, T)> },
    MeanPool(Var),
    Cells(Var),
    L2NormRows { x: Var, norms: Vec<T> },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RowDot(Var, Var),
    SoftCrossEntropy { logits: Var, targets: Tensor<T> },
    LogMeanExp(Var),
    Mean(Var),
    GradReverse(Var, T),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Tensor<T>>,
    watched: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.watched.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|t| t.is_finite())
    }

    /// Adds another gradient set into this one.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    frozen_vars: HashMap<ParamId, Var>,
    watched: Vec<Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_vars: HashMap::new(), frozen_vars: HashMap::new(), watched: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient retrievable through [`Gradients::var`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.watched.push(v);
        v
    }

    /// Keeps the gradient of an intermediate node after backward.
    pub fn watch(&mut self, v: Var) {
        self.watched.push(v);
    }

    /// Trainable parameter; repeated calls return the same node so every use
    /// accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Parameter read as a constant: gradients stop here.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.frozen_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, false);
        self.frozen_vars.insert(id, v);
        v
    }

    /// Parameter ids that entered the graph as trainable nodes.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.param_vars.keys().copied().collect();
        ids.sort();
        ids
    }

    fn binary_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s),
            });
        }
        acc.expect("weighted_sum needs at least one term")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` for `a: (m, k)`, `b: (n, k)`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul_bt inner dims");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulBT(a, b), ng)
    }

    pub fn add_row_vec(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(b).len(), n, "row vector length");
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for (x, &y) in data[r * n..(r + 1) * n].iter_mut().zip(&bv) {
                *x += y;
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, n], data), Op::AddRowVec(a, b), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(&[a]);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(&[a]);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        let ng = self.ng(&[a]);
        self.push(t, Op::Tanh(a), ng)
    }

    /// Batched 3-D convolution. `x: (N, Cin, T, H, W)`, `w: (Cout, Cin, kt, kh, kw)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], pad: [usize; 3]) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be (N,C,T,H,W), got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be 5-D");
        assert_eq!(xs[1], ws[1], "conv3d channel mismatch");
        let geom = ConvGeom::new(ws[1], ws[0], [xs[2], xs[3], xs[4]], [ws[2], ws[3], ws[4]], stride, pad);
        let n = xs[0];
        let (kr, p) = (geom.col_rows(), geom.out_size());
        let mut out = vec![T::zero(); n * geom.cout * p];
        let mut cols = vec![T::zero(); kr * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            im2col(&xv[s * geom.cin * geom.in_size()..(s + 1) * geom.cin * geom.in_size()], &geom, &mut cols);
            let o = &mut out[s * geom.cout * p..(s + 1) * geom.cout * p];
            T::gemm(geom.cout, kr, p, T::one(), wv, kr as isize, 1, &cols, p as isize, 1, T::zero(), o, p as isize, 1);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for c in 0..geom.cout {
                    for y in &mut o[c * p..(c + 1) * p] {
                        *y += bv[c];
                    }
                }
            }
        }
        let shape = vec![n, geom.cout, geom.output[0], geom.output[1], geom.output[2]];
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::new(shape, out), Op::Conv3d { x, w, b, geom }, ng)
    }

    /// Group normalisation over `(N, C, ...)` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert!(groups > 0 && c % groups == 0, "channels {c} not divisible into {groups} groups");
        let s: usize = xs[2..].iter().product();
        let cg = c / groups;
        let eps = T::of(1e-5);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(n * groups);
        let cnt = T::of((cg * s) as f64);
        for i in 0..n {
            for g in 0..groups {
                let lo = (i * c + g * cg) * s;
                let hi = lo + cg * s;
                let chunk = &xv[lo..hi];
                let mean = chunk.iter().copied().sum::<T>() / cnt;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
                let rstd = T::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let base = lo + cc * s;
                    for j in 0..s {
                        out[base + j] = (xv[base + j] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(Tensor::new(xs, out), Op::GroupNorm { x, gamma, beta, groups, stats }, ng)
    }

    /// Mean over every axis after the first two: `(N, C, ...) -> (N, C)`.
    pub fn mean_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let inv = T::one() / T::of(s as f64);
        let xv = self.value(x).data();
        let out = (0..n * c).map(|r| xv[r * s..(r + 1) * s].iter().copied().sum::<T>() * inv).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![n, c], out), Op::MeanPool(x), ng)
    }

    /// Feature-grid cells as rows: `(N, C, T, H, W) -> (N·T·H·W, C)`, cells in (t, h, w) row-major order.
    pub fn cells(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                for j in 0..s {
                    out[(i * s + j) * c + ch] = xv[(i * c + ch) * s + j];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![n * s, c], out), Op::Cells(x), ng)
    }

    /// Rows scaled to unit L2 norm. A zero row is an error, never clamped.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, GraphError> {
        let (m, n) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(nrm > T::zero()) || !nrm.is_finite() {
                return Err(GraphError::ZeroNorm { row: r });
            }
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v / nrm;
            }
            norms.push(nrm);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::L2NormRows { x, norms }, ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, na) = self.value(a).dims2();
        let (m2, nb) = self.value(b).dims2();
        assert_eq!(m, m2, "concat_cols row mismatch");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            out.extend_from_slice(&av[r * na..(r + 1) * na]);
            out.extend_from_slice(&bv[r * nb..(r + 1) * nb]);
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, na + nb], out), Op::ConcatCols(a, b), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2();
            assert_eq!(pn, n, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let ng = self.ng(parts);
        self.push(Tensor::new(vec![m, n], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = self.value(a).dims2();
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "gather index {i} out of {m} rows");
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![idx.len(), n], out), Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    /// Row-wise dot products: `(m, n), (m, n) -> (m, 1)`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(b).dims2(), (m, n), "row_dot shape mismatch");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|r| av[r * n..(r + 1) * n].iter().zip(&bv[r * n..(r + 1) * n]).map(|(&x, &y)| x * y).sum())
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, 1], out), Op::RowDot(a, b), ng)
    }

    /// Mean over rows of `Σ_j t_ij (logsumexp_i − z_ij)`: cross-entropy of each
    /// softmax row against a (possibly soft, possibly unnormalised) target row.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Var {
        let (m, n) = self.value(logits).dims2();
        assert_eq!(targets.shape(), &[m, n], "target shape must match logits");
        let zv = self.value(logits).data();
        let tv = targets.data();
        let mut total = T::zero();
        for r in 0..m {
            let z = &zv[r * n..(r + 1) * n];
            let lse = logsumexp(z);
            for j in 0..n {
                let t = tv[r * n + j];
                if t != T::zero() {
                    total += t * (lse - z[j]);
                }
            }
        }
        let loss = total / T::of(m as f64);
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(loss), Op::SoftCrossEntropy { logits, targets }, ng)
    }

    /// `log(mean(exp(x)))` over all elements, computed with max subtraction.
    pub fn log_mean_exp(&mut self, x: Var) -> Result<Var, GraphError> {
        let xv = self.value(x).data();
        if xv.is_empty() {
            return Err(GraphError::Empty("log_mean_exp"));
        }
        let v = logsumexp(xv) - T::of(xv.len() as f64).ln();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::LogMeanExp(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GraphError> {
        let xv = self.value(x).data();
        if xv.is_empty() {
            return Err(GraphError::Empty("mean"));
        }
        let v = xv.iter().copied().sum::<T>() / T::of(xv.len() as f64);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Mean(x), ng))
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: T) -> Var {
        let t = self.value(x).clone();
        let ng = self.ng(&[x]);
        self.push(t, Op::GradReverse(x, lambda), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out = Gradients::default();
        let watched: std::collections::HashSet<Var> = self.watched.iter().copied().collect();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if watched.contains(&Var(i)) {
                out.watched.insert(Var(i), g.clone());
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>], out: &mut Gradients<T>) {
        let mut acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match out.params.get_mut(id) {
                Some(e) => e.add_assign(g),
                None => {
                    out.params.insert(*id, g.clone());
                }
            },
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(g.shape().to_vec(), gd.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect());
                let gb = Tensor::new(g.shape().to_vec(), gd.iter().zip(va.data()).map(|(&x, &y)| x * y).collect());
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|x| x * *c)),
            Op::GradReverse(a, lambda) => acc(grads, *a, g.map(|x| -(x * *lambda))),
            Op::Reshape(a) => acc(grads, *a, g.clone().reshape(self.shape(*a))),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    let bv = self.value(*b).data();
                    T::gemm(m, n, k, T::one(), gd, n as isize, 1, bv, 1, n as isize, T::zero(), &mut da, k as isize, 1);
                    acc(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    let av = self.value(*a).data();
                    T::gemm(k, m, n, T::one(), av, 1, k as isize, gd, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    acc(grads, *b, Tensor::new(vec![k, n], db));
                }
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    let bv = self.value(*b).data();
                    T::gemm(m, n, k, T::one(), gd, n as isize, 1, bv, k as isize, 1, T::zero(), &mut da, k as isize, 1);
                    acc(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); n * k];
                    let av = self.value(*a).data();
                    T::gemm(n, m, k, T::one(), gd, 1, n as isize, av, k as isize, 1, T::zero(), &mut db, k as isize, 1);
                    acc(grads, *b, Tensor::new(vec![n, k], db));
                }
            }
            Op::AddRowVec(a, b) => {
                let (m, n) = g.dims2();
                acc(grads, *a, g.clone());
                let mut db = vec![T::zero(); n];
                for r in 0..m {
                    for (d, &x) in db.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *d += x;
                    }
                }
                acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), db));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let d = gd.iter().zip(av).map(|(&x, &y)| if y > T::zero() { x } else { T::zero() }).collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                let d = gd.iter().zip(yv).map(|(&x, &y)| x * y * (T::one() - y)).collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Tanh(a) => {
                let yv = node.value.data();
                let d = gd.iter().zip(yv).map(|(&x, &y)| x * (T::one() - y * y)).collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Conv3d { x, w, b, geom } => self.conv3d_backward(*x, *w, *b, geom, gd, grads, &mut acc),
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xs = self.shape(*x).to_vec();
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let cg = c / groups;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let cnt = T::of((cg * s) as f64);
                for i in 0..n {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[i * groups + gi];
                        let lo = (i * c + gi * cg) * s;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let base = lo + cc * s;
                            for j in 0..s {
                                let xhat = (xv[base + j] - mean) * rstd;
                                let dy = gd[base + j];
                                dgamma[ch] += dy * xhat;
                                dbeta[ch] += dy;
                                let dxh = dy * gv[ch];
                                sum_d += dxh;
                                sum_dx += dxh * xhat;
                            }
                        }
                        let md = sum_d / cnt;
                        let mdx = sum_dx / cnt;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let base = lo + cc * s;
                            for j in 0..s {
                                let xhat = (xv[base + j] - mean) * rstd;
                                let dxh = gd[base + j] * gv[ch];
                                dx[base + j] = rstd * (dxh - md - xhat * mdx);
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::new(xs, dx));
                acc(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), dgamma));
                acc(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), dbeta));
            }
            Op::MeanPool(a) => {
                let xs = self.shape(*a).to_vec();
                let s: usize = xs[2..].iter().product();
                let inv = T::one() / T::of(s as f64);
                let mut d = vec![T::zero(); xs.iter().product()];
                for (r, &gv) in gd.iter().enumerate() {
                    for v in &mut d[r * s..(r + 1) * s] {
                        *v = gv * inv;
                    }
                }
                acc(grads, *a, Tensor::new(xs, d));
            }
            Op::Cells(a) => {
                let xs = self.shape(*a).to_vec();
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let mut d = vec![T::zero(); gd.len()];
                for i in 0..n {
                    for ch in 0..c {
                        for j in 0..s {
                            d[(i * c + ch) * s + j] = gd[(i * s + j) * c + ch];
                        }
                    }
                }
                acc(grads, *a, Tensor::new(xs, d));
            }
            Op::L2NormRows { x, norms } => {
                let (m, n) = g.dims2();
                let yv = node.value.data();
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    let y = &yv[r * n..(r + 1) * n];
                    let gy = &gd[r * n..(r + 1) * n];
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = (gy[j] - y[j] * dot) / norms[r];
                    }
                }
                acc(grads, *x, Tensor::new(vec![m, n], d));
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = self.value(*a).dims2();
                let nb = self.value(*b).dims2().1;
                let w = na + nb;
                let mut da = Vec::with_capacity(m * na);
                let mut db = Vec::with_capacity(m * nb);
                for r in 0..m {
                    da.extend_from_slice(&gd[r * w..r * w + na]);
                    db.extend_from_slice(&gd[r * w + na..(r + 1) * w]);
                }
                acc(grads, *a, Tensor::new(vec![m, na], da));
                acc(grads, *b, Tensor::new(vec![m, nb], db));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(grads, p, Tensor::new(self.shape(p).to_vec(), gd[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.value(*a).dims2();
                let mut d = vec![T::zero(); m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for (dv, &gv) in d[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *dv += gv;
                    }
                }
                acc(grads, *a, Tensor::new(vec![m, n], d));
            }
            Op::RowDot(a, b) => {
                let (m, n) = self.value(*a).dims2();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); m * n];
                let mut db = vec![T::zero(); m * n];
                for r in 0..m {
                    for j in 0..n {
                        da[r * n + j] = gd[r] * bv[r * n + j];
                        db[r * n + j] = gd[r] * av[r * n + j];
                    }
                }
                acc(grads, *a, Tensor::new(vec![m, n], da));
                acc(grads, *b, Tensor::new(vec![m, n], db));
            }
            Op::SoftCrossEntropy { logits, targets } => {
                let (m, n) = self.value(*logits).dims2();
                let zv = self.value(*logits).data();
                let tv = targets.data();
                let scale = gd[0] / T::of(m as f64);
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    let z = &zv[r * n..(r + 1) * n];
                    let lse = logsumexp(z);
                    let tsum: T = tv[r * n..(r + 1) * n].iter().copied().sum();
                    for j in 0..n {
                        d[r * n + j] = scale * (tsum * (z[j] - lse).exp() - tv[r * n + j]);
                    }
                }
                acc(grads, *logits, Tensor::new(vec![m, n], d));
            }
            Op::LogMeanExp(a) => {
                let xv = self.value(*a).data();
                let lse = logsumexp(xv);
                let d = xv.iter().map(|&v| gd[0] * (v - lse).exp()).collect();
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), d));
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let v = gd[0] / T::of(len as f64);
                acc(grads, *a, Tensor::full(self.shape(*a), v));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv3d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
        acc: &mut impl FnMut(&mut [Option<Tensor<T>>], Var, Tensor<T>),
    ) {
        let xs = self.shape(x).to_vec();
        let n = xs[0];
        let (kr, p) = (geom.col_rows(), geom.out_size());
        let in_len = geom.cin * geom.in_size();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_x = self.nodes[x.0].needs_grad;
        let need_w = self.nodes[w.0].needs_grad;
        let mut cols = vec![T::zero(); kr * p];
        let mut dw = vec![T::zero(); geom.cout * kr];
        let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
        for s in 0..n {
            let go = &gd[s * geom.cout * p..(s + 1) * geom.cout * p];
            if need_w {
                im2col(&xv[s * in_len..(s + 1) * in_len], geom, &mut cols);
                T::gemm(geom.cout, p, kr, T::one(), go, p as isize, 1, &cols, 1, p as isize, T::one(), &mut dw, kr as isize, 1);
            }
            if need_x {
                T::gemm(kr, geom.cout, p, T::one(), wv, 1, kr as isize, go, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
                col2im(&cols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
        if need_x {
            acc(grads, x, Tensor::new(xs, dx));
        }
        if need_w {
            acc(grads, w, Tensor::new(self.shape(w).to_vec(), dw));
        }
        if let Some(b) = b {
            let mut db = vec![T::zero(); geom.cout];
            for s in 0..n {
                for (c, d) in db.iter_mut().enumerate() {
                    let lo = (s * geom.cout + c) * p;
                    *d += gd[lo..lo + p].iter().copied().sum::<T>();
                }
            }
            acc(grads, b, Tensor::new(vec![geom.cout], db));
        }
    }
}

pub(crate) fn logsumexp<T: Real>(z: &[T]) -> T {
    let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + z.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
}

/// Output columns `[lo, hi)` whose input column `cc * s + d - pad` lies in `[0, n)`.
fn valid_range(out: usize, n: usize, s: usize, d: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > d { (pad - d).div_ceil(s) } else { 0 }.min(out);
    let hi = if n + pad > d { ((n + pad - d - 1) / s + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let p = ot * oh * ow;
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = valid_range(ow, iw, sw, dw, pw);
                    let mut o = 0;
                    for a in 0..ot {
                        let ti = (a * st + dt) as isize - pt as isize;
                        let t_ok = ti >= 0 && (ti as usize) < it;
                        for bb in 0..oh {
                            let hi_ = (bb * sh + dh) as isize - ph as isize;
                            let d = &mut dst[o..o + ow];
                            o += ow;
                            if !t_ok || hi_ < 0 || hi_ as usize >= ih {
                                d.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(ti as usize * ih + hi_ as usize) * iw..][..iw];
                            d[..lo].fill(T::zero());
                            d[hi..].fill(T::zero());
                            let first = lo * sw + dw - pw;
                            if sw == 1 {
                                d[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (v, s) in d[lo..hi].iter_mut().zip(src[first..].iter().step_by(sw)) {
                                    *v = *s;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let p = ot * oh * ow;
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &mut dx[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = valid_range(ow, iw, sw, dw, pw);
                    let mut o = 0;
                    for a in 0..ot {
                        let ti = (a * st + dt) as isize - pt as isize;
                        let t_ok = ti >= 0 && (ti as usize) < it;
                        for bb in 0..oh {
                            let hi_ = (bb * sh + dh) as isize - ph as isize;
                            let s = &src[o..o + ow];
                            o += ow;
                            if !t_ok || hi_ < 0 || hi_ as usize >= ih || lo == hi {
                                continue;
                            }
                            let dst = &mut xc[(ti as usize * ih + hi_ as usize) * iw..][..iw];
                            let first = lo * sw + dw - pw;
                            for (d, v) in dst[first..].iter_mut().step_by(sw).zip(&s[lo..hi]) {
                                *d += *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of a scalar function of one input tensor.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let x0 = rand_tensor(shape, seed);
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let ad = grads.var(x).unwrap().data().to_vec();
        let fd = numeric_grad(&x0, |t| {
            let mut g = Graph::new();
            let x = g.input(t.clone());
            let y = build(&mut g, x);
            g.scalar(y)
        });
        for (a, f) in ad.iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-6 + 1e-5 * f.abs(), "autodiff {a} vs numeric {f}");
        }
    }

    #[test]
    fn conv3d_gradient() {
        let w0 = rand_tensor(&[3, 2, 3, 3, 3], 7);
        check(&[2, 2, 4, 5, 6], 1, |g, x| {
            let w = g.constant(w0.clone());
            let y = g.conv3d(x, w, None, [2, 1, 2], [1, 1, 1]);
            let y2 = g.mul(y, y);
            g.mean(y2).unwrap()
        });
        let x0 = rand_tensor(&[2, 2, 4, 5, 6], 3);
        check(&[3, 2, 3, 3, 3], 2, |g, w| {
            let x = g.constant(x0.clone());
            let y = g.conv3d(x, w, None, [1, 2, 1], [1, 0, 1]);
            let y2 = g.mul(y, y);
            g.mean(y2).unwrap()
        });
    }

    #[test]
    fn group_norm_gradient() {
        let gm = rand_tensor(&[4], 5);
        check(&[2, 4, 2, 3, 3], 4, |g, x| {
            let gamma = g.constant(gm.clone());
            let beta = g.constant(Tensor::zeros(&[4]));
            let y = g.group_norm(x, gamma, beta, 2);
            let t = g.tanh(y);
            let y2 = g.mul(t, y);
            g.mean(y2).unwrap()
        });
    }

    #[test]
    fn loss_op_gradients() {
        let tgt = rand_tensor(&[3, 5], 9).map(|v| v.abs());
        check(&[3, 5], 8, |g, x| g.soft_cross_entropy(x, tgt.clone()));
        check(&[3, 4], 10, |g, x| {
            let n = g.l2_normalize_rows(x).unwrap();
            let s = g.matmul_bt(n, n);
            g.log_mean_exp(s).unwrap()
        });
        check(&[4, 3], 11, |g, x| {
            let a = g.gather_rows(x, &[3, 0, 0, 2]);
            let b = g.slice_rows(x, 0, 4);
            let c = g.concat_cols(a, b);
            let d = g.row_dot(c, c);
            let s = g.sigmoid(d);
            g.mean(s).unwrap()
        });
        check(&[2, 3, 2, 2, 1], 12, |g, x| {
            let c = g.cells(x);
            let p = g.mean_pool(x);
            let both = g.concat_rows(&[c, p]);
            let t = g.tanh(both);
            let r = g.relu(t);
            let sq = g.mul(r, t);
            g.mean(sq).unwrap()
        });
    }

    #[test]
    fn matmul_gradients() {
        let b0 = rand_tensor(&[4, 3], 21);
        check(&[2, 4], 20, |g, x| {
            let b = g.constant(b0.clone());
            let y = g.matmul(x, b);
            let bias = g.constant(Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]));
            let y = g.add_row_vec(y, bias);
            let y2 = g.mul(y, y);
            g.mean(y2).unwrap()
        });
        check(&[3, 4], 22, |g, x| {
            let b = g.constant(b0.clone().reshape(&[3, 4]));
            let y = g.matmul_bt(b, x);
            let y2 = g.mul(y, y);
            g.mean(y2).unwrap()
        });
    }

    #[test]
    fn grad_reverse_flips_sign() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[2], &[1.0, 2.0]));
        let r = g.grad_reverse(x, 0.5);
        let y = g.mul(r, r);
        let l = g.mean(y).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0]);
        let gr = g.backward(l);
        assert_eq!(gr.var(x).unwrap().data(), &[-0.5, -1.0]);
    }

    #[test]
    fn params_accumulate_and_frozen_block() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamGroup::Other, Tensor::from_f64(&[1, 1], &[3.0]));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let f = g.frozen_param(&store, id);
        let y = g.mul(a, f);
        let l = g.mean(y).unwrap();
        let gr = g.backward(l);
        assert_eq!(gr.param(id).unwrap().data(), &[3.0]);
    }

    #[test]
    fn zero_norm_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(g.l2_normalize_rows(x), Err(GraphError::ZeroNorm { row: 1 }));
    }
}
