//! Layers built on the autodiff graph, plus the Adam optimiser.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), group, &[fan_in, fan_out], bound, rng);
        let b = store.add_uniform(format!("{name}.b"), group, &[fan_out], bound, rng);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row_vec(y, b)
    }

    /// Same computation with the parameters held constant.
    pub fn forward_frozen<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.frozen_param(store, self.w);
        let b = g.frozen_param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row_vec(y, b)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dims: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.fc1"), group, dims.0, dims.1, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), group, dims.1, dims.2, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.l1.forward(g, store, x);
        let h = g.relu(h);
        self.l2.forward(g, store, h)
    }

    pub fn forward_frozen<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.l1.forward_frozen(g, store, x);
        let h = g.relu(h);
        self.l2.forward_frozen(g, store, h)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let w = store.add_he(format!("{name}.w"), group, &[cout, cin, kernel[0], kernel[1], kernel[2]], fan_in, rng);
        Conv3d { w, kernel, pad: kernel.map(|k| k / 2) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, stride: [usize; 3]) -> Var {
        let w = g.param(store, self.w);
        g.conv3d(x, w, None, stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, channels: usize, init_gamma: f64) -> Self {
        let gamma = store.add_const(format!("{name}.gamma"), group, &[channels], init_gamma);
        let beta = store.add_const(format!("{name}.beta"), group, &[channels], 0.0);
        GroupNorm { gamma, beta, groups: groups_for(channels) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Largest group count in {8, 4, 2, 1} dividing `channels` with at least two channels per group.
fn groups_for(channels: usize) -> usize {
    [8, 4, 2].into_iter().find(|&g| channels % g == 0 && channels / g >= 2).unwrap_or(1)
}

/// Gated recurrent unit cell.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub wx: [Linear; 3],
    pub wh: [ParamId; 3],
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gates = ["z", "r", "n"];
        let wx = gates.map(|gname| Linear::new(store, &format!("{name}.x{gname}"), group, input, hidden, rng));
        let bound = (1.0 / hidden as f64).sqrt();
        let wh = gates.map(|gname| store.add_uniform(format!("{name}.h{gname}"), group, &[hidden, hidden], bound, rng));
        GruCell { wx, wh, hidden }
    }

    pub fn step<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, h: Var) -> Var {
        let mut pre = [x; 3];
        for k in 0..3 {
            pre[k] = self.wx[k].forward(g, store, x);
        }
        let uz = g.param(store, self.wh[0]);
        let ur = g.param(store, self.wh[1]);
        let un = g.param(store, self.wh[2]);
        let hz = g.matmul(h, uz);
        let z = g.add(pre[0], hz);
        let z = g.sigmoid(z);
        let hr = g.matmul(h, ur);
        let r = g.add(pre[1], hr);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let hn = g.matmul(rh, un);
        let n = g.add(pre[2], hn);
        let n = g.tanh(n);
        let d = g.sub(h, n);
        let zd = g.mul(z, d);
        g.add(n, zd)
    }

    /// Runs the cell over `seq` (each `(B, input)`) from a zero state; returns the final state.
    pub fn run<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: &[Var]) -> Var {
        let b = g.value(seq[0]).dims2().0;
        let mut h = g.constant(Tensor::zeros(&[b, self.hidden]));
        for &x in seq {
            h = self.step(g, store, x, h);
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    /// Per-group learning-rate multipliers; groups not listed use 1.
    pub group_lr: BTreeMap<ParamGroup, f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            milestones: vec![20],
            decay: 0.1,
            group_lr: BTreeMap::new(),
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with L2 weight decay folded into the gradient. Only parameters that
/// received a gradient in a step are touched by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub slots: BTreeMap<usize, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, slots: BTreeMap::new() }
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, epoch: usize) {
        let base = self.cfg.lr_at(epoch);
        for (id, gt) in grads.params() {
            let group = store.param(id).group;
            let lr = base * self.cfg.group_lr.get(&group).copied().unwrap_or(1.0);
            let value = store.get_mut(id);
            let n = value.len();
            let slot = self.slots.entry(id.0).or_insert_with(|| AdamSlot { step: 0, m: vec![0.0; n], v: vec![0.0; n] });
            slot.step += 1;
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            let c1 = 1.0 - b1.powi(slot.step as i32);
            let c2 = 1.0 - b2.powi(slot.step as i32);
            for ((p, &gr), (m, v)) in
                value.data_mut().iter_mut().zip(gt.data()).zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                let pv = p.as_f64();
                let gv = gr.as_f64() + self.cfg.weight_decay * pv;
                *m = b1 * *m + (1.0 - b1) * gv;
                *v = b2 * *v + (1.0 - b2) * gv * gv;
                let upd = lr * (*m / c1) / ((*v / c2).sqrt() + self.cfg.eps);
                *p = T::of(pv - upd);
            }
        }
    }
}
