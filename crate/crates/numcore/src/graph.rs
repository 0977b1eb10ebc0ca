//! Reverse-mode gradient tape over dense row-major f64 tensors.
//!
//! A [`Graph`] is a per-step arena: forward operations append nodes, a single
//! `backward` call from a scalar loss fills adjoints in reverse insertion
//! order. Trainable weights live outside the tape in a [`ParamStore`]; binding
//! a parameter to a graph records (store, pid, node) so the optimizer can read
//! gradients back in a deterministic order.
//!
//! Forward values are immutable once computed; the tape is confined to one
//! training thread.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::rng::Rng;
use crate::special::{erf as erf_scalar, erf_derivative};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PId(pub usize);

/// A named, owned tensor of trainable weights.
#[derive(Clone, Debug)]
pub struct PTensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

static STORE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Flat storage for the weights of one model.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<PTensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: STORE_COUNTER.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn alloc(&mut self, shape: &[usize], data: Vec<f64>) -> PId {
        assert_eq!(data.len(), numel(shape), "param data/shape mismatch");
        self.params.push(PTensor {
            data,
            shape: shape.to_vec(),
        });
        PId(self.params.len() - 1)
    }

    pub fn get(&self, pid: PId) -> &PTensor {
        &self.params[pid.0]
    }

    pub fn get_mut(&mut self, pid: PId) -> &mut PTensor {
        &mut self.params[pid.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PId, &PTensor)> {
        self.params.iter().enumerate().map(|(i, p)| (PId(i), p))
    }

    pub fn add(&mut self, t: PTensor) -> PId {
        assert_eq!(t.data.len(), numel(&t.shape), "param data/shape mismatch");
        self.params.push(t);
        PId(self.params.len() - 1)
    }

    pub fn tensors(&self) -> &[PTensor] {
        &self.params
    }

    /// Overwrites all tensors at once (checkpoint loading). Shapes must match
    /// the existing allocation one for one.
    pub fn replace_tensors(&mut self, tensors: Vec<PTensor>) {
        assert_eq!(tensors.len(), self.params.len(), "tensor count mismatch");
        for (old, new) in self.params.iter().zip(&tensors) {
            assert_eq!(old.shape, new.shape, "tensor shape mismatch");
        }
        self.params = tensors;
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Erf(Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    BatchMatmul(Var, Var),
    SwapLast2(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        // im2col cache, (cin*kh*kw) x (n*hout*wout)
        col: Vec<f64>,
    },
    UpsampleNearest(Var, usize),
    AvgPoolAll(Var),
    SteRound(Var),
    ClampSte(Var),
    SoftmaxAxis(Var, usize),
    HardMaxSt(Var),
    CrossEntropyLogits {
        logits: Var,
        labels: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires: bool,
    op: Op,
}

/// Binding of a store parameter to its tape node for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Binding {
    pub store_id: u64,
    pub pid: PId,
    pub node: Var,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<Binding>,
    param_cache: HashMap<(u64, usize, bool), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.numel(v), 1, "scalar() on non-scalar");
        self.nodes[v.0].data[0]
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    // ---- leaves ------------------------------------------------------------

    pub fn input(&mut self, data: Vec<f64>, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), data, false, Op::Leaf)
    }

    pub fn input_grad(&mut self, data: Vec<f64>, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), data, true, Op::Leaf)
    }

    pub fn full(&mut self, shape: &[usize], value: f64) -> Var {
        self.input(vec![value; numel(shape)], shape)
    }

    pub fn scalar_input(&mut self, value: f64) -> Var {
        self.input(vec![value], &[1])
    }

    /// Trainable parameter bound to the tape; repeated calls with the same
    /// (store, pid) return the same node so gradients accumulate correctly.
    pub fn param(&mut self, store: &ParamStore, pid: PId) -> Var {
        if let Some(&v) = self.param_cache.get(&(store.id, pid.0, true)) {
            return v;
        }
        let p = store.get(pid);
        let v = self.push(p.shape.clone(), p.data.clone(), true, Op::Leaf);
        self.param_cache.insert((store.id, pid.0, true), v);
        self.bindings.push(Binding {
            store_id: store.id,
            pid,
            node: v,
        });
        v
    }

    /// Frozen parameter: same value, no gradient.
    pub fn frozen(&mut self, store: &ParamStore, pid: PId) -> Var {
        if let Some(&v) = self.param_cache.get(&(store.id, pid.0, false)) {
            return v;
        }
        let p = store.get(pid);
        let v = self.push(p.shape.clone(), p.data.clone(), false, Op::Leaf);
        self.param_cache.insert((store.id, pid.0, false), v);
        v
    }

    // ---- elementwise with broadcasting ------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (shape, data) = self.broadcast_eval(a, b, |x, y| x + y);
        let r = self.req(a) || self.req(b);
        self.push(shape, data, r, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (shape, data) = self.broadcast_eval(a, b, |x, y| x - y);
        let r = self.req(a) || self.req(b);
        self.push(shape, data, r, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (shape, data) = self.broadcast_eval(a, b, |x, y| x * y);
        let r = self.req(a) || self.req(b);
        self.push(shape, data, r, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (shape, data) = self.broadcast_eval(a, b, |x, y| x / y);
        let r = self.req(a) || self.req(b);
        self.push(shape, data, r, Op::Div(a, b))
    }

    fn broadcast_eval(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape == nb.shape {
            let data = na
                .data
                .iter()
                .zip(nb.data.iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return (na.shape.clone(), data);
        }
        let shape = broadcast_shape(&na.shape, &nb.shape);
        let data = broadcast_apply(&shape, &na.shape, &na.data, &nb.shape, &nb.data, f);
        (shape, data)
    }

    // ---- unary -------------------------------------------------------------

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| -x).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| c * x).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.sqrt()).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::Sqrt(a))
    }

    pub fn erf(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| erf_scalar(x)).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::Erf(a))
    }

    /// Forward rounds half away from zero; backward is identity.
    pub fn ste_round(&mut self, a: Var) -> Var {
        for &x in &self.nodes[a.0].data {
            assert!(x.is_finite(), "ste_round on non-finite value");
        }
        let data = self.nodes[a.0].data.iter().map(|&x| x.round()).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::SteRound(a))
    }

    /// Clamp with a straight-through backward (gradient passes unchanged).
    pub fn clamp_ste(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.clamp(lo, hi)).collect();
        let (s, r) = (self.nodes[a.0].shape.clone(), self.req(a));
        self.push(s, data, r, Op::ClampSte(a))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let r = self.req(a);
        self.push(vec![1], vec![s], r, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let r = self.req(a);
        self.push(vec![1], vec![s / n], r, Op::Mean(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    pub fn mean_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.mean(sq)
    }

    /// sqrt(sum of squares + eps); eps keeps the gradient finite at zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let ss = self.sum_squares(a);
        let eps = self.scalar_input(1e-12);
        let ss = self.add(ss, eps);
        self.sqrt(ss)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d");
        assert_eq!(sa[1], sb[0], "matmul inner dims {:?} x {:?}", sa, sb);
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm_nn(n, k, m, &self.nodes[a.0].data, &self.nodes[b.0].data, &mut out);
        let r = self.req(a) || self.req(b);
        self.push(vec![n, m], out, r, Op::Matmul(a, b))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3, "batch_matmul lhs must be 3-d");
        assert_eq!(sb.len(), 3, "batch_matmul rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "batch dims differ");
        assert_eq!(sa[2], sb[1], "inner dims differ");
        let (bsz, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * n * m];
        for i in 0..bsz {
            gemm_nn(
                n,
                k,
                m,
                &self.nodes[a.0].data[i * n * k..(i + 1) * n * k],
                &self.nodes[b.0].data[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
            );
        }
        let r = self.req(a) || self.req(b);
        self.push(vec![bsz, n, m], out, r, Op::BatchMatmul(a, b))
    }

    /// Transpose of the last two axes (2-d or batched 3-d).
    pub fn swap_last2(&mut self, a: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let nd = sa.len();
        assert!(nd == 2 || nd == 3, "swap_last2 needs 2-d or 3-d input");
        let (bsz, n, m) = if nd == 2 {
            (1, sa[0], sa[1])
        } else {
            (sa[0], sa[1], sa[2])
        };
        let data = transpose_batched(&self.nodes[a.0].data, bsz, n, m);
        let mut shape = sa.clone();
        shape[nd - 2] = m;
        shape[nd - 1] = n;
        let r = self.req(a);
        self.push(shape, data, r, Op::SwapLast2(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), self.numel(a), "reshape changes element count");
        let data = self.nodes[a.0].data.clone();
        let r = self.req(a);
        self.push(shape.to_vec(), data, r, Op::Reshape(a))
    }

    // ---- convolution and pooling ------------------------------------------

    /// NCHW convolution; weight layout (cout, cin, kh, kw).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 4, "conv2d input must be NCHW");
        assert_eq!(sw.len(), 4, "conv2d weight must be (cout,cin,kh,kw)");
        assert_eq!(sx[1], sw[1], "conv2d channel mismatch");
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel exceeds input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = cin * kh * kw;
        let cols = n * ho * wo;
        let col = im2col(&self.nodes[x.0].data, n, cin, h, wd, kh, kw, stride, pad, ho, wo);
        // (cout, ckk) x (ckk, cols)
        let mut flat = vec![0.0; cout * cols];
        gemm_nn(cout, ckk, cols, &self.nodes[w.0].data, &col, &mut flat);
        // (cout, n, ho*wo) -> (n, cout, ho, wo)
        let mut out = vec![0.0; n * cout * ho * wo];
        let hw = ho * wo;
        for c in 0..cout {
            for b in 0..n {
                let src = &flat[c * cols + b * hw..c * cols + (b + 1) * hw];
                out[b * cout * hw + c * hw..b * cout * hw + (c + 1) * hw].copy_from_slice(src);
            }
        }
        let r = self.req(x) || self.req(w);
        self.push(vec![n, cout, ho, wo], out, r, Op::Conv2d { x, w, stride, pad, col })
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "upsample_nearest input must be NCHW");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * ho * wo];
        let src = &self.nodes[a.0].data;
        for nc in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[nc * ho * wo + i * wo + j] = src[nc * h * w + (i / factor) * w + j / factor];
                }
            }
        }
        let r = self.req(a);
        self.push(vec![n, c, ho, wo], out, r, Op::UpsampleNearest(a, factor))
    }

    /// Spatial mean over the full grid: (n, c, h, w) -> (n, c).
    pub fn avg_pool_all(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "avg_pool_all input must be NCHW");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = (h * w) as f64;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; n * c];
        for nc in 0..n * c {
            out[nc] = src[nc * h * w..(nc + 1) * h * w].iter().sum::<f64>() / hw;
        }
        let r = self.req(a);
        self.push(vec![n, c], out, r, Op::AvgPoolAll(a))
    }

    // ---- softmax family ----------------------------------------------------

    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(axis < s.len());
        let (outer, len, inner) = axis_split(&s, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let r = self.req(a);
        self.push(s, out, r, Op::SoftmaxAxis(a, axis))
    }

    /// One-hot argmax along `axis` in the forward pass (first index wins on
    /// ties); identity in the backward pass.
    pub fn hardmax_st(&mut self, a: Var, axis: usize) -> Var {
        let s = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&s, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut best = 0;
                for j in 1..len {
                    if src[at(j)] > src[at(best)] {
                        best = j;
                    }
                }
                out[at(best)] = 1.0;
            }
        }
        let r = self.req(a);
        self.push(s, out, r, Op::HardMaxSt(a))
    }

    /// Mean softmax cross-entropy over a batch of logits (n, c).
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2, "logits must be (n, c)");
        let (n, c) = (s[0], s[1]);
        assert_eq!(labels.len(), n, "one label per row");
        let src = &self.nodes[logits.0].data;
        let mut loss = 0.0;
        for b in 0..n {
            assert!(labels[b] < c, "label out of range");
            let row = &src[b * c..(b + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            loss += lse - row[labels[b]];
        }
        let r = self.req(logits);
        self.push(
            vec![1],
            vec![loss / n as f64],
            r,
            Op::CrossEntropyLogits {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Adjoints accumulate into each
    /// reachable node's `grad`; repeated calls without a fresh graph add up.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.numel(loss), 1, "backward source must be a scalar");
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires {
            // Loss disconnected from every trainable input: all grads zero.
            for node in &mut self.nodes {
                if node.requires {
                    let len = node.data.len();
                    node.grad.get_or_insert_with(|| vec![0.0; len]);
                }
            }
            return;
        }
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(go) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires {
                continue;
            }
            self.propagate(idx, &go, &mut adj);
            let node = &mut self.nodes[idx];
            let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            for (gi, &v) in g.iter_mut().zip(go.iter()) {
                *gi += v;
            }
        }
        // Reachable-but-unvisited trainable leaves: zero gradient, not an error.
        for node in &mut self.nodes {
            if node.requires && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
    }

    fn accum(adj: &mut [Option<Vec<f64>>], target: usize, len: usize, add: impl Fn(&mut [f64])) {
        let buf = adj[target].get_or_insert_with(|| vec![0.0; len]);
        add(buf);
    }

    fn propagate(&self, idx: usize, go: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        macro_rules! push1 {
            ($v:expr, $f:expr) => {
                if self.nodes[$v.0].requires {
                    let len = self.nodes[$v.0].data.len();
                    Self::accum(adj, $v.0, len, $f);
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                push1!(a, |g: &mut [f64]| reduce_add(g, &sa, go, &node.shape, 1.0));
                push1!(b, |g: &mut [f64]| reduce_add(g, &sb, go, &node.shape, 1.0));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                push1!(a, |g: &mut [f64]| reduce_add(g, &sa, go, &node.shape, 1.0));
                push1!(b, |g: &mut [f64]| reduce_add(g, &sb, go, &node.shape, -1.0));
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                if self.nodes[a.0].requires {
                    let da = broadcast_apply(&node.shape, &node.shape, go, &sb, self.data(*b), |g, y| g * y);
                    push1!(a, |g: &mut [f64]| reduce_add(g, &sa, &da, &node.shape, 1.0));
                }
                if self.nodes[b.0].requires {
                    let db = broadcast_apply(&node.shape, &node.shape, go, &sa, self.data(*a), |g, x| g * x);
                    push1!(b, |g: &mut [f64]| reduce_add(g, &sb, &db, &node.shape, 1.0));
                }
            }
            Op::Div(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                if self.nodes[a.0].requires {
                    let da = broadcast_apply(&node.shape, &node.shape, go, &sb, self.data(*b), |g, y| g / y);
                    push1!(a, |g: &mut [f64]| reduce_add(g, &sa, &da, &node.shape, 1.0));
                }
                if self.nodes[b.0].requires {
                    // d/db (a/b) = -a/b^2; out = a/b so this is -out/b.
                    let tmp = broadcast_apply(&node.shape, &node.shape, go, &node.shape, &node.data, |g, o| g * o);
                    let db = broadcast_apply(&node.shape, &node.shape, &tmp, &sb, self.data(*b), |t, y| -t / y);
                    push1!(b, |g: &mut [f64]| reduce_add(g, &sb, &db, &node.shape, 1.0));
                }
            }
            Op::Neg(a) => push1!(a, |g: &mut [f64]| {
                for (gi, &v) in g.iter_mut().zip(go) {
                    *gi -= v;
                }
            }),
            Op::Scale(a, c) => {
                let c = *c;
                push1!(a, |g: &mut [f64]| {
                    for (gi, &v) in g.iter_mut().zip(go) {
                        *gi += c * v;
                    }
                })
            }
            Op::AddScalar(a) | Op::SteRound(a) | Op::ClampSte(a) | Op::Reshape(a) | Op::HardMaxSt(a) => {
                push1!(a, |g: &mut [f64]| {
                    for (gi, &v) in g.iter_mut().zip(go) {
                        *gi += v;
                    }
                })
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                push1!(a, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += go[i];
                        }
                    }
                })
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.data(*a);
                let s = *slope;
                push1!(a, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += go[i] * if x[i] > 0.0 { 1.0 } else { s };
                    }
                })
            }
            Op::Tanh(a) => {
                let y = &node.data;
                push1!(a, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += go[i] * (1.0 - y[i] * y[i]);
                    }
                })
            }
            Op::Exp(a) => {
                let y = &node.data;
                push1!(a, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += go[i] * y[i];
                    }
                })
            }
            Op::Ln(a) => {
                let x = self.data(*a);
                push1!(a, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += go[i] / x[i];
                    }
                })
            }
            Op::Sqrt(a) => {
                let y = &node.data;
                push1!(a, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += go[i] * 0.5 / y[i];
                    }
                })
            }
            Op::Erf(a) => {
                let x = self.data(*a);
                push1!(a, |g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += go[i] * erf_derivative(x[i]);
                    }
                })
            }
            Op::Sum(a) => {
                let v = go[0];
                push1!(a, |g: &mut [f64]| {
                    for gi in g.iter_mut() {
                        *gi += v;
                    }
                })
            }
            Op::Mean(a) => {
                let v = go[0] / self.nodes[a.0].data.len() as f64;
                push1!(a, |g: &mut [f64]| {
                    for gi in g.iter_mut() {
                        *gi += v;
                    }
                })
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires {
                    // dA = dC (n,m) x B^T (m,k)
                    push1!(a, |g: &mut [f64]| gemm_nt(n, m, k, go, self.data(*b), g));
                }
                if self.nodes[b.0].requires {
                    // dB = A^T (k,n) x dC (n,m)
                    push1!(b, |g: &mut [f64]| gemm_tn(k, n, m, self.data(*a), go, g));
                }
            }
            Op::BatchMatmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bsz, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
                if self.nodes[a.0].requires {
                    push1!(a, |g: &mut [f64]| {
                        for i in 0..bsz {
                            gemm_nt(
                                n,
                                m,
                                k,
                                &go[i * n * m..(i + 1) * n * m],
                                &self.data(*b)[i * k * m..(i + 1) * k * m],
                                &mut g[i * n * k..(i + 1) * n * k],
                            );
                        }
                    });
                }
                if self.nodes[b.0].requires {
                    push1!(b, |g: &mut [f64]| {
                        for i in 0..bsz {
                            gemm_tn(
                                k,
                                n,
                                m,
                                &self.data(*a)[i * n * k..(i + 1) * n * k],
                                &go[i * n * m..(i + 1) * n * m],
                                &mut g[i * k * m..(i + 1) * k * m],
                            );
                        }
                    });
                }
            }
            Op::SwapLast2(a) => {
                let s = &node.shape;
                let nd = s.len();
                let (bsz, n, m) = if nd == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                let t = transpose_batched(go, bsz, n, m);
                push1!(a, |g: &mut [f64]| {
                    for (gi, &v) in g.iter_mut().zip(&t) {
                        *gi += v;
                    }
                })
            }
            Op::Conv2d { x, w, stride, pad, col } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let ckk = cin * kh * kw;
                let cols = n * ho * wo;
                let hw = ho * wo;
                // go (n, cout, ho, wo) -> flat (cout, n*ho*wo)
                let mut gof = vec![0.0; cout * cols];
                for c in 0..cout {
                    for b in 0..n {
                        let src = &go[b * cout * hw + c * hw..b * cout * hw + (c + 1) * hw];
                        gof[c * cols + b * hw..c * cols + (b + 1) * hw].copy_from_slice(src);
                    }
                }
                if self.nodes[w.0].requires {
                    // dW (cout, ckk) = gof (cout, cols) x col^T (cols, ckk)
                    push1!(w, |g: &mut [f64]| gemm_nt(cout, cols, ckk, &gof, col, g));
                }
                if self.nodes[x.0].requires {
                    // dcol (ckk, cols) = W^T (ckk, cout) x gof (cout, cols)
                    let mut dcol = vec![0.0; ckk * cols];
                    gemm_tn(ckk, cout, cols, self.data(*w), &gof, &mut dcol);
                    push1!(x, |g: &mut [f64]| {
                        col2im_add(&dcol, g, n, cin, h, wd, kh, kw, *stride, *pad, ho, wo)
                    });
                }
            }
            Op::UpsampleNearest(a, factor) => {
                let s = self.shape(*a);
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let f = *factor;
                let (ho, wo) = (h * f, w * f);
                push1!(a, |g: &mut [f64]| {
                    for nc in 0..n * c {
                        for i in 0..ho {
                            for j in 0..wo {
                                g[nc * h * w + (i / f) * w + j / f] += go[nc * ho * wo + i * wo + j];
                            }
                        }
                    }
                })
            }
            Op::AvgPoolAll(a) => {
                let s = self.shape(*a);
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let inv = 1.0 / (h * w) as f64;
                push1!(a, |g: &mut [f64]| {
                    for nc in 0..n * c {
                        let v = go[nc] * inv;
                        for p in &mut g[nc * h * w..(nc + 1) * h * w] {
                            *p += v;
                        }
                    }
                })
            }
            Op::SoftmaxAxis(a, axis) => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.data;
                push1!(a, |g: &mut [f64]| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += go[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                g[at(j)] += y[at(j)] * (go[at(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::CrossEntropyLogits { logits, labels } => {
                let s = self.shape(*logits);
                let (n, c) = (s[0], s[1]);
                let src = self.data(*logits);
                let scale = go[0] / n as f64;
                push1!(logits, |g: &mut [f64]| {
                    for b in 0..n {
                        let row = &src[b * c..(b + 1) * c];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / z;
                            let y = if j == labels[b] { 1.0 } else { 0.0 };
                            g[b * c + j] += scale * (p - y);
                        }
                    }
                })
            }
        }
    }
}

/// Gradients of a scalar loss with respect to each listed input. Disconnected
/// inputs yield zero gradients.
pub fn grad_of(g: &mut Graph, scalar_loss: Var, inputs: &[Var]) -> Vec<Vec<f64>> {
    g.backward(scalar_loss);
    inputs
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.numel(v)])
        })
        .collect()
}

/// Gumbel-Softmax relaxation over `axis`. Soft mode returns a probability
/// simplex per lane; hard mode returns one-hot forward values with the soft
/// sample's gradient (straight-through).
pub fn gumbel_softmax(g: &mut Graph, logits: Var, axis: usize, tau: f64, hard: bool, rng: &mut Rng) -> Var {
    assert!(tau > 0.0, "gumbel_softmax temperature must be positive");
    let n = g.numel(logits);
    let shape = g.shape(logits).to_vec();
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            let u = rng.next_f64_open();
            -(-u.ln()).ln()
        })
        .collect();
    let noise = g.input(noise, &shape);
    let z = g.add(logits, noise);
    let z = g.scale(z, 1.0 / tau);
    let soft = g.softmax_axis(z, axis);
    if hard {
        g.hardmax_st(soft, axis)
    } else {
        soft
    }
}

// ---- shape helpers ---------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn padded_strides(shape: &[usize], out_nd: usize) -> Vec<usize> {
    // Row-major strides, right-aligned into out_nd dims; broadcast dims get 0.
    let mut strides = vec![0usize; out_nd];
    let mut acc = 1usize;
    for (k, &d) in shape.iter().enumerate().rev() {
        let pos = out_nd - shape.len() + k;
        strides[pos] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Elementwise op of two broadcast-compatible tensors evaluated on `out_shape`.
fn broadcast_apply(
    out_shape: &[usize],
    sa: &[usize],
    a: &[f64],
    sb: &[usize],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let n = numel(out_shape);
    if sa == sb && sa == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if numel(sb) == 1 {
        return a.iter().map(|&x| f(x, b[0])).collect();
    }
    if numel(sa) == 1 {
        return b.iter().map(|&y| f(a[0], y)).collect();
    }
    let nd = out_shape.len();
    let stra = padded_strides(sa, nd);
    let strb = padded_strides(sb, nd);
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in out.iter_mut() {
        *o = f(a[oa], b[ob]);
        // Increment the multi-index with carry, updating offsets incrementally.
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += stra[d];
            ob += strb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= stra[d] * out_shape[d];
            ob -= strb[d] * out_shape[d];
        }
    }
    out
}

/// Accumulate `src` (shaped `src_shape`) into `dst` (shaped `dst_shape`),
/// summing over broadcast axes; `sign` is +-1.
fn reduce_add(dst: &mut [f64], dst_shape: &[usize], src: &[f64], src_shape: &[usize], sign: f64) {
    if dst_shape == src_shape {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += sign * s;
        }
        return;
    }
    if dst.len() == 1 {
        dst[0] += sign * src.iter().sum::<f64>();
        return;
    }
    let nd = src_shape.len();
    let strd = padded_strides(dst_shape, nd);
    let mut idx = vec![0usize; nd];
    let mut od = 0usize;
    for &v in src {
        dst[od] += sign * v;
        for d in (0..nd).rev() {
            idx[d] += 1;
            od += strd[d];
            if idx[d] < src_shape[d] {
                break;
            }
            idx[d] = 0;
            od -= strd[d] * src_shape[d];
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn transpose_batched(src: &[f64], bsz: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..bsz {
        let s = &src[b * n * m..(b + 1) * n * m];
        let o = &mut out[b * n * m..(b + 1) * n * m];
        for i in 0..n {
            for j in 0..m {
                o[j * n + i] = s[i * m + j];
            }
        }
    }
    out
}

// ---- gemm wrappers (row-major) ---------------------------------------------

fn gemm_nn(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), m as isize, 1, 0.0,
            c.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// c (n,m) += a (n,k) x b^T where b is (m,k) row-major.
fn gemm_nt(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(c.len(), n * m);
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, 1.0,
            c.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// c (n,m) += a^T x b where a is (k,n) row-major and b is (k,m) row-major.
fn gemm_tn(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0, a.as_ptr(), 1, n as isize, b.as_ptr(), m as isize, 1, 1.0,
            c.as_mut_ptr(), m as isize, 1,
        );
    }
}

// ---- im2col ----------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let cols = n * ho * wo;
    let mut col = vec![0.0; cin * kh * kw * cols];
    let hw = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * cols;
                for b in 0..n {
                    let xoff = (b * cin + c) * h * w;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        let dst = base + b * hw + oi * wo;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xrow = xoff + ii as usize * w;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                col[dst + oj] = x[xrow + jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcol: &[f64],
    dx: &mut [f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let cols = n * ho * wo;
    let hw = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * cols;
                for b in 0..n {
                    let xoff = (b * cin + c) * h * w;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xrow = xoff + ii as usize * w;
                        let src = base + b * hw + oi * wo;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                dx[xrow + jj as usize] += dcol[src + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}
