//! Re-synthesis of a shareable image from the blocked input and the
//! identity-free semantic feature: a strided Feat-Net projects X_noID to a
//! low-resolution feature, bi-directional single-head cross-attention fuses
//! it with f_sem_hat, and a small conditional denoising-diffusion model
//! generates the output. Kept (unblocked) pixels are enforced by replacing
//! them with their forward-noised ground truth at every sampling step; a
//! deterministic conditional decoder is available as a fast generator.

use numcore::nn::{timestep_embedding, Conv2d, Linear, ResBlock};
use numcore::{Graph, ParamStore, Rng, Var};

use crate::error::{DeidError, Result};
use crate::mfm::{FEAT_C, FEAT_HW};
use crate::synthgen::IMG_SIZE;

pub const T_STEPS: usize = 100;
pub const FUSE_C: usize = 64;
#[cfg(test)]
const FUSE_HW: usize = FEAT_HW * FEAT_HW;
const TEMB_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Diffusion,
    Decoder,
}

impl GeneratorKind {
    pub fn tag(self) -> &'static str {
        match self {
            GeneratorKind::Diffusion => "diffusion",
            GeneratorKind::Decoder => "decoder",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "diffusion" => Ok(GeneratorKind::Diffusion),
            "decoder" => Ok(GeneratorKind::Decoder),
            other => Err(DeidError::InvalidParameter(format!("unknown generator {other:?}"))),
        }
    }
}

/// Linear variance schedule 1e-4 -> 0.02 over T steps; index by t in [1, T].
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(t_steps: usize) -> Self {
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / (t_steps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_steps);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Schedule { betas, alpha_bar }
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of (1 - beta) up to t; abar(0) = 1.
    pub fn abar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bar[t - 1] }
    }
}

pub struct SynthModel {
    pub store: ParamStore,
    pub schedule: Schedule,
    // Feat-Net: X_noID -> f_noID at 1/8 resolution.
    fn_convs: Vec<Conv2d>,
    // Fusion projections.
    self_proj: Linear,
    a_q: Linear,
    a_k: Linear,
    a_v: Linear,
    b_q: Linear,
    b_k: Linear,
    b_v: Linear,
    wo_ab: Linear,
    wo_ba: Linear,
    // Denoiser.
    dn_down: Vec<Conv2d>,
    dn_temb: Linear,
    dn_mid: ResBlock,
    dn_up: Vec<Conv2d>,
    // Deterministic fallback generator from f_fuse.
    dec_up: Vec<Conv2d>,
}

pub struct FuseOut {
    pub f_fuse: Var,
    pub attn_ab: Var,
    pub attn_ba: Var,
}

impl SynthModel {
    pub fn new(rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let fn_convs = vec![
            Conv2d::new(&mut store, 1, 16, 3, 2, 1, rng),
            Conv2d::new(&mut store, 16, 32, 3, 2, 1, rng),
            Conv2d::new(&mut store, 32, FUSE_C, 3, 2, 1, rng),
        ];
        let self_proj = Linear::new(&mut store, FUSE_C, FUSE_C, rng);
        let a_q = Linear::new(&mut store, FUSE_C, FUSE_C, rng);
        let a_k = Linear::new(&mut store, FUSE_C, FUSE_C, rng);
        let a_v = Linear::new(&mut store, FUSE_C, FUSE_C, rng);
        let b_q = Linear::new(&mut store, FEAT_C, FUSE_C, rng);
        let b_k = Linear::new(&mut store, FEAT_C, FUSE_C, rng);
        let b_v = Linear::new(&mut store, FEAT_C, FUSE_C, rng);
        let wo_ab = Linear::new(&mut store, FUSE_C, FUSE_C, rng);
        let wo_ba = Linear::new(&mut store, FUSE_C, FUSE_C, rng);
        let dn_down = vec![
            Conv2d::new(&mut store, 1, 16, 3, 2, 1, rng),
            Conv2d::new(&mut store, 16, 32, 3, 2, 1, rng),
            Conv2d::new(&mut store, 32, FUSE_C, 3, 2, 1, rng),
        ];
        let dn_temb = Linear::new(&mut store, TEMB_DIM, FUSE_C, rng);
        let dn_mid = ResBlock::new(&mut store, FUSE_C, rng);
        let dn_up = vec![
            Conv2d::new(&mut store, FUSE_C, 32, 3, 1, 1, rng),
            Conv2d::new(&mut store, 32, 16, 3, 1, 1, rng),
            // Zero tail: a fresh denoiser predicts zero noise.
            Conv2d::new_zeroed(&mut store, 16, 1, 3, 1, 1),
        ];
        let dec_up = vec![
            Conv2d::new(&mut store, FUSE_C, 32, 3, 1, 1, rng),
            Conv2d::new(&mut store, 32, 16, 3, 1, 1, rng),
            Conv2d::new(&mut store, 16, 1, 3, 1, 1, rng),
        ];
        SynthModel {
            store,
            schedule: Schedule::new(T_STEPS),
            fn_convs,
            self_proj,
            a_q,
            a_k,
            a_v,
            b_q,
            b_k,
            b_v,
            wo_ab,
            wo_ba,
            dn_down,
            dn_temb,
            dn_mid,
            dn_up,
            dec_up,
        }
    }

    /// (B, 1, 64, 64) -> (B, 64, 8, 8).
    pub fn feat_net(&self, g: &mut Graph, x_noid: Var, frozen: bool) -> Var {
        let mut h = x_noid;
        for (i, c) in self.fn_convs.iter().enumerate() {
            h = c.forward(g, &self.store, h, frozen);
            if i + 1 < self.fn_convs.len() {
                h = g.relu(h);
            }
        }
        h
    }

    /// (B, C, h, w) -> token matrix (B*hw, C), with hw known statically.
    fn to_tokens(&self, g: &mut Graph, f: Var) -> (Var, usize, usize) {
        let s = g.shape(f).to_vec();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let r = g.reshape(f, &[b, c, hw]);
        let t = g.swap_last2(r); // (b, hw, c)
        (g.reshape(t, &[b * hw, c]), b, hw)
    }

    /// Bi-directional single-head cross-attention between the blocked-image
    /// feature (64 tokens, 64 ch) and the semantic feature (64 tokens,
    /// 32 ch); both attention outputs are projected and summed onto the
    /// f_noID self-projection. A semantic stream on a coarser grid is
    /// nearest-neighbor upsampled first.
    pub fn fuse(&self, g: &mut Graph, f_noid: Var, f_sem: Var, frozen: bool) -> Result<FuseOut> {
        let sa = g.shape(f_noid).to_vec();
        let sb = g.shape(f_sem).to_vec();
        let f_sem = if sa[2..] == sb[2..] {
            f_sem
        } else if sa[2] % sb[2] == 0 && sa[3] % sb[3] == 0 && sa[2] / sb[2] == sa[3] / sb[3] {
            g.upsample_nearest(f_sem, sa[2] / sb[2])
        } else {
            return Err(DeidError::Geometry(format!(
                "semantic grid {:?} incompatible with image grid {:?}",
                &sb[2..],
                &sa[2..]
            )));
        };
        let (ta, b, hwa) = self.to_tokens(g, f_noid);
        let (tb, _, hwb) = self.to_tokens(g, f_sem);
        let proj = |g: &mut Graph, l: &Linear, t: Var, b: usize, hw: usize| {
            let p = l.forward(g, &self.store, t, frozen);
            g.reshape(p, &[b, hw, FUSE_C])
        };
        let qa = proj(g, &self.a_q, ta, b, hwa);
        let ka = proj(g, &self.a_k, ta, b, hwa);
        let va = proj(g, &self.a_v, ta, b, hwa);
        let qb = proj(g, &self.b_q, tb, b, hwb);
        let kb = proj(g, &self.b_k, tb, b, hwb);
        let vb = proj(g, &self.b_v, tb, b, hwb);
        let scale = 1.0 / (FUSE_C as f64).sqrt();
        let attend = |g: &mut Graph, q: Var, k: Var, v: Var| {
            let kt = g.swap_last2(k);
            let scores = g.batch_matmul(q, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_axis(scores, 2);
            (g.batch_matmul(attn, v), attn)
        };
        let (out_ab, attn_ab) = attend(g, qa, kb, vb); // image queries semantic
        let (out_ba, attn_ba) = attend(g, qb, ka, va); // semantic queries image
        let flat = |g: &mut Graph, t: Var, hw: usize| g.reshape(t, &[b * hw, FUSE_C]);
        let o_ab = flat(g, out_ab, hwa);
        let o_ab = self.wo_ab.forward(g, &self.store, o_ab, frozen);
        let o_ba = flat(g, out_ba, hwb);
        let o_ba = self.wo_ba.forward(g, &self.store, o_ba, frozen);
        let selfp = self.self_proj.forward(g, &self.store, ta, frozen);
        let sum = g.add(selfp, o_ab);
        let sum = g.add(sum, o_ba);
        let t3 = g.reshape(sum, &[b, hwa, FUSE_C]);
        let t3 = g.swap_last2(t3);
        let f_fuse = g.reshape(t3, &[b, FUSE_C, FEAT_HW, FEAT_HW]);
        Ok(FuseOut { f_fuse, attn_ab, attn_ba })
    }

    /// Noise prediction eps_hat(x_t, t, f_fuse); conditioning is injected
    /// additively at the 8x8 bottleneck.
    pub fn denoise(
        &self,
        g: &mut Graph,
        x_t: Var,
        t_emb: Var,
        f_fuse: Var,
        frozen: bool,
    ) -> Var {
        let b = g.shape(x_t)[0];
        let mut h = x_t;
        for c in &self.dn_down {
            h = c.forward(g, &self.store, h, frozen);
            h = g.relu(h);
        }
        let te = self.dn_temb.forward(g, &self.store, t_emb, frozen);
        let te = g.reshape(te, &[b, FUSE_C, 1, 1]);
        h = g.add(h, te);
        h = g.add(h, f_fuse);
        h = self.dn_mid.forward(g, &self.store, h, frozen);
        for (i, c) in self.dn_up.iter().enumerate() {
            h = g.upsample_nearest(h, 2);
            h = c.forward(g, &self.store, h, frozen);
            if i + 1 < self.dn_up.len() {
                h = g.relu(h);
            }
        }
        h
    }

    /// Deterministic fallback generator: f_fuse -> image in one shot.
    pub fn decode_direct(&self, g: &mut Graph, f_fuse: Var, frozen: bool) -> Var {
        let mut h = f_fuse;
        for (i, c) in self.dec_up.iter().enumerate() {
            h = g.upsample_nearest(h, 2);
            h = c.forward(g, &self.store, h, frozen);
            if i + 1 < self.dec_up.len() {
                h = g.relu(h);
            }
        }
        let t = g.tanh(h);
        let t = g.add_scalar(t, 1.0);
        g.scale(t, 0.5)
    }

    /// Denoising-diffusion training loss: per sample, a uniform step t, the
    /// forward-noised x_t, and MSE between true and predicted noise. x0 is
    /// given in [0, 1] and rescaled to [-1, 1] internally.
    pub fn diffusion_loss(
        &self,
        g: &mut Graph,
        x0: Var,
        f_fuse: Var,
        rng: &mut Rng,
        frozen: bool,
    ) -> Var {
        let shape = g.shape(x0).to_vec();
        let b = shape[0];
        let n: usize = shape.iter().product();
        let y0 = self.to_signed(g, x0);
        let mut sa = Vec::with_capacity(b);
        let mut sb = Vec::with_capacity(b);
        let mut temb = Vec::with_capacity(b * TEMB_DIM);
        for _ in 0..b {
            let t = 1 + rng.gen_index(self.schedule.t_steps());
            let ab = self.schedule.abar(t);
            sa.push(ab.sqrt());
            sb.push((1.0 - ab).sqrt());
            temb.extend(timestep_embedding(t, TEMB_DIM));
        }
        let sa = g.input(sa, &[b, 1, 1, 1]);
        let sb = g.input(sb, &[b, 1, 1, 1]);
        let t_emb = g.input(temb, &[b, TEMB_DIM]);
        let eps = g.input(rng.normal_vec(n), &shape);
        let signal = g.mul(sa, y0);
        let noise = g.mul(sb, eps);
        let x_t = g.add(signal, noise);
        let pred = self.denoise(g, x_t, t_emb, f_fuse, frozen);
        let diff = g.sub(pred, eps);
        g.mean_squares(diff)
    }

    fn to_signed(&self, g: &mut Graph, x01: Var) -> Var {
        let x = g.scale(x01, 2.0);
        g.add_scalar(x, -1.0)
    }

    /// Ancestral sampling for a batch, conditioned on f_fuse, with hard
    /// inpainting: kept pixels (keep_mask 1) are overwritten at every step by
    /// the forward-noised blocked image, so they converge to their originals.
    /// Output in [0, 1], batch-flattened.
    pub fn sample_batch(
        &self,
        images_noid: &[Vec<f64>],
        keep_masks: &[Vec<u8>],
        f_fuse_data: &[f64],
        rng: &mut Rng,
    ) -> Vec<Vec<f64>> {
        let b = images_noid.len();
        assert_eq!(keep_masks.len(), b);
        let px = IMG_SIZE * IMG_SIZE;
        let n = b * px;
        let y0: Vec<f64> = images_noid
            .iter()
            .flat_map(|im| im.iter().map(|&v| 2.0 * v - 1.0))
            .collect();
        let mut x = rng.normal_vec(n);
        let ts = self.schedule.t_steps();
        for t in (1..=ts).rev() {
            let mut g = Graph::new();
            let xt = g.input(x.clone(), &[b, 1, IMG_SIZE, IMG_SIZE]);
            let mut temb = Vec::with_capacity(b * TEMB_DIM);
            for _ in 0..b {
                temb.extend(timestep_embedding(t, TEMB_DIM));
            }
            let t_emb = g.input(temb, &[b, TEMB_DIM]);
            let ff = g.input(f_fuse_data.to_vec(), &[b, FUSE_C, FEAT_HW, FEAT_HW]);
            let pred = self.denoise(&mut g, xt, t_emb, ff, true);
            let eps_hat = g.data(pred);
            let beta = self.schedule.beta(t);
            let alpha = 1.0 - beta;
            let abar = self.schedule.abar(t);
            let abar_prev = self.schedule.abar(t - 1);
            let coef = beta / (1.0 - abar).sqrt();
            let sigma = if t > 1 {
                ((1.0 - abar_prev) / (1.0 - abar) * beta).sqrt()
            } else {
                0.0
            };
            for i in 0..n {
                let mean = (x[i] - coef * eps_hat[i]) / alpha.sqrt();
                x[i] = mean + if t > 1 { sigma * rng.normal() } else { 0.0 };
            }
            // Inpaint kept pixels at the new noise level t-1.
            for bi in 0..b {
                for p in 0..px {
                    if keep_masks[bi][p] == 1 {
                        let i = bi * px + p;
                        let noised = abar_prev.sqrt() * y0[i]
                            + (1.0 - abar_prev).sqrt()
                                * if t > 1 { rng.normal() } else { 0.0 };
                        x[i] = noised;
                    }
                }
            }
        }
        (0..b)
            .map(|bi| {
                x[bi * px..(bi + 1) * px]
                    .iter()
                    .map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
                    .collect()
            })
            .collect()
    }
}
