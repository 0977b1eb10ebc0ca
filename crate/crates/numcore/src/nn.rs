//! Small neural-network building blocks on top of the gradient tape:
//! convolution and linear layers with He initialization, residual blocks,
//! and a sinusoidal timestep embedding.

use crate::graph::{Graph, PId, ParamStore, Var};
use crate::rng::Rng;

/// 2-d convolution layer (NCHW, weight (cout,cin,kh,kw), per-channel bias).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: PId,
    pub b: PId,
    pub stride: usize,
    pub pad: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..cout * cin * k * k).map(|_| std * rng.normal()).collect();
        let w = store.alloc(&[cout, cin, k, k], w);
        let b = store.alloc(&[cout, 1, 1], vec![0.0; cout]);
        Conv2d { w, b, stride, pad, cout }
    }

    /// Final layer initialized to zero, so the block starts as the identity
    /// (or as an exact zero map), which some contracts rely on.
    pub fn new_zeroed(
        store: &mut ParamStore,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.alloc(&[cout, cin, k, k], vec![0.0; cout * cin * k * k]);
        let b = store.alloc(&[cout, 1, 1], vec![0.0; cout]);
        Conv2d { w, b, stride, pad, cout }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Var {
        let w = if frozen { g.frozen(store, self.w) } else { g.param(store, self.w) };
        let b = if frozen { g.frozen(store, self.b) } else { g.param(store, self.b) };
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add(y, b)
    }
}

/// Fully connected layer: (n, fin) -> (n, fout).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: PId,
    pub b: PId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, fin: usize, fout: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fin as f64).sqrt();
        let w: Vec<f64> = (0..fin * fout).map(|_| std * rng.normal()).collect();
        let w = store.alloc(&[fin, fout], w);
        let b = store.alloc(&[fout], vec![0.0; fout]);
        Linear { w, b }
    }

    pub fn new_zeroed(store: &mut ParamStore, fin: usize, fout: usize) -> Self {
        let w = store.alloc(&[fin, fout], vec![0.0; fin * fout]);
        let b = store.alloc(&[fout], vec![0.0; fout]);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Var {
        let w = if frozen { g.frozen(store, self.w) } else { g.param(store, self.w) };
        let b = if frozen { g.frozen(store, self.b) } else { g.param(store, self.b) };
        let y = g.matmul(x, w);
        g.add(y, b)
    }
}

/// Two 3x3 convolutions with a ReLU in between and an additive skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, ch: usize, rng: &mut Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(store, ch, ch, 3, 1, 1, rng),
            conv2: Conv2d::new(store, ch, ch, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Var {
        let h = self.conv1.forward(g, store, x, frozen);
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h, frozen);
        let h = g.add(h, x);
        g.relu(h)
    }
}

/// Sinusoidal embedding of an integer timestep, dimension `dim` (even).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}
