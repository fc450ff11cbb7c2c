//! Trainable-parameter plumbing: a named parameter store, conv/group-norm
//! building blocks, and deterministic initialization.

use ndarray::prelude::*;
use rand::Rng;

use crate::autodiff::{Arr, Tape, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arr,
}

/// All trainable parameters of a model, in a fixed registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> PId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        PId(self.params.len() - 1)
    }

    pub fn value(&self, id: PId) -> &Arr {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Insert every parameter into a tape as a leaf; index by PId.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<VarId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }
}

/// Standard-normal sample via Box-Muller; depends only on the rng stream.
pub fn randn(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub fn randn_arr(rng: &mut impl Rng, shape: &[usize], std: f64) -> Arr {
    let mut out = Arr::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = randn(rng) * std;
    }
    out
}

/// Largest divisor of `channels` that is <= 8, for group-norm groups.
pub fn gn_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: PId,
    pub b: PId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        // He initialization for ReLU towers.
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = ps.add(format!("{name}.w"), randn_arr(rng, &[cout, cin, k, k], std));
        let b = ps.add(format!("{name}.b"), Arr::zeros(IxDyn(&[cout])));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, leaves: &[VarId], x: VarId) -> VarId {
        t.conv2d(x, leaves[self.w.0], leaves[self.b.0], self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: PId,
    pub beta: PId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Arr::ones(IxDyn(&[channels])));
        let beta = ps.add(format!("{name}.beta"), Arr::zeros(IxDyn(&[channels])));
        Self {
            gamma,
            beta,
            groups: gn_groups(channels),
        }
    }

    pub fn forward(&self, t: &mut Tape, leaves: &[VarId], x: VarId) -> VarId {
        t.group_norm(x, self.groups, leaves[self.gamma.0], leaves[self.beta.0], 1e-5)
    }
}

/// conv 3x3 -> group norm -> ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub gn: GroupNorm,
}

impl ConvBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(ps, rng, &format!("{name}.conv"), cin, cout, 3, stride, 1),
            gn: GroupNorm::new(ps, &format!("{name}.gn"), cout),
        }
    }

    pub fn forward(&self, t: &mut Tape, leaves: &[VarId], x: VarId) -> VarId {
        let x = self.conv.forward(t, leaves, x);
        let x = self.gn.forward(t, leaves, x);
        t.relu(x)
    }
}
