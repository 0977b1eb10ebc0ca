//! Minimum-codelength codec over frozen foundation-model features: a
//! residual encoder quantizes the feature map to an integer code grid Q, a
//! Gaussian-mixture entropy model prices each code in bits, a single-conv
//! mask predictor splits Q into identity codes (Q masked) and semantic codes
//! (inverse mask), and a small id-head regresses the attacker's identity
//! embedding from the identity codes. The codelength penalty is what forces
//! identity information into the few masked codes.

use numcore::nn::{Conv2d, Linear, ResBlock};
use numcore::{AdamW, Graph, PId, ParamStore, Rng, Var};

use crate::error::{DeidError, Result};
use crate::mfm::{FEAT_C, FEAT_HW, FEAT_LEN};
use crate::reid::EMBED_DIM;

pub const GMM_K: usize = 3;
pub const CODE_CLAMP: f64 = 512.0;
pub const PROB_FLOOR: f64 = 1e-9;
pub const DEFAULT_BETA: f64 = 0.5;
/// Rate terms inside the training losses are normalized; a raw bit sum
/// (thousands of bits against unit-scale feature and embedding norms) drowns
/// every other term and collapses the identity mask to all-zero. Reported
/// codelengths stay exact sums. The reconstruction loss averages per spatial
/// site, matching the per-element scale of its distortion gradient; the
/// identity loss averages per element, matching the much smaller per-element
/// gradient that survives the id-head's global average pooling.
pub const RATE_SITE_NORM: f64 = (FEAT_HW * FEAT_HW) as f64;
pub const RATE_ELEM_NORM: f64 = FEAT_LEN as f64;
/// Learning-rate multiplier for the entropy model; see
/// [`CodecModel::boost_entropy_lr`].
pub const ENTROPY_LR_MULT: f64 = 100.0;
const LN2: f64 = std::f64::consts::LN_2;
const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug)]
pub struct CodecConfig {
    /// Hidden channel width of the residual stacks. The source description
    /// uses 256; the default here is narrower for CPU-scale training and is
    /// configurable back up.
    pub hidden: usize,
    /// One GMM per channel (false) or a single GMM shared by all channels.
    pub shared_channel_gmm: bool,
    pub beta: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { hidden: 64, shared_channel_gmm: false, beta: DEFAULT_BETA }
    }
}

/// Integer code grid and its identity mask for one image (C x h x w).
#[derive(Clone, Debug, PartialEq)]
pub struct CodeGrid {
    pub q: Vec<i32>,
    /// 1 = identity code, 0 = semantic code.
    pub m: Vec<u8>,
}

impl CodeGrid {
    pub fn q_id(&self) -> Vec<i32> {
        self.q.iter().zip(&self.m).map(|(&q, &m)| if m == 1 { q } else { 0 }).collect()
    }

    pub fn q_sem(&self) -> Vec<i32> {
        self.q.iter().zip(&self.m).map(|(&q, &m)| if m == 0 { q } else { 0 }).collect()
    }
}

/// One channel's mixture after the weight softmax; variances are e^sigma.
#[derive(Clone, Debug)]
pub struct GmmSlice {
    pub w: [f64; GMM_K],
    pub mu: [f64; GMM_K],
    pub var: [f64; GMM_K],
}

pub fn gmm_cdf(s: &GmmSlice, x: f64) -> f64 {
    let mut f = 0.0;
    for k in 0..GMM_K {
        let z = (x - s.mu[k]) / (SQRT2 * s.var[k].sqrt());
        f += s.w[k] * 0.5 * (1.0 + numcore::erf(z));
    }
    f
}

/// Raw quantization-bin mass; the 1e-9 floor is applied where a logarithm is
/// taken, so CDF telescoping stays exact.
pub fn bin_probability(s: &GmmSlice, q: i32) -> f64 {
    gmm_cdf(s, q as f64 + 0.5) - gmm_cdf(s, q as f64 - 0.5)
}

pub struct CodecModel {
    pub store: ParamStore,
    pub cfg: CodecConfig,
    enc_in: Conv2d,
    enc_blocks: Vec<ResBlock>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_blocks: Vec<ResBlock>,
    dec_out: Conv2d,
    mask_conv: Conv2d,
    idh_in: Conv2d,
    idh_blocks: Vec<ResBlock>,
    idh_proj: Linear,
    gmm_w: PId,
    gmm_mu: PId,
    gmm_sigma: PId,
}

impl CodecModel {
    pub fn new(cfg: CodecConfig, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let enc_in = Conv2d::new(&mut store, FEAT_C, h, 3, 1, 1, rng);
        let enc_blocks = (0..3).map(|_| ResBlock::new(&mut store, h, rng)).collect();
        // The encoder tail must start with real weights: a zero-initialized
        // tail leaves every pre-rounding activation inside the dead zone of
        // ste_round, the grid stays all-zero, and downstream heads (decoder,
        // mask, identity regressor) never receive a learning signal.
        let enc_out = Conv2d::new(&mut store, h, FEAT_C, 3, 1, 1, rng);
        let dec_in = Conv2d::new(&mut store, FEAT_C, h, 3, 1, 1, rng);
        let dec_blocks = (0..3).map(|_| ResBlock::new(&mut store, h, rng)).collect();
        let dec_out = Conv2d::new(&mut store, h, FEAT_C, 3, 1, 1, rng);
        let mask_conv = Conv2d::new(&mut store, FEAT_C, FEAT_C, 3, 1, 1, rng);
        let idh_in = Conv2d::new(&mut store, FEAT_C, EMBED_DIM, 3, 1, 1, rng);
        let idh_blocks = (0..3).map(|_| ResBlock::new(&mut store, EMBED_DIM, rng)).collect();
        let idh_proj = Linear::new(&mut store, EMBED_DIM, EMBED_DIM, rng);
        let gc = if cfg.shared_channel_gmm { 1 } else { FEAT_C };
        let gmm_w = store.alloc(&[gc, GMM_K], vec![0.0; gc * GMM_K]);
        let mu0: Vec<f64> =
            (0..gc * GMM_K).map(|i| (i % GMM_K) as f64 - 1.0).collect();
        let gmm_mu = store.alloc(&[gc, GMM_K], mu0);
        let gmm_sigma = store.alloc(&[gc, GMM_K], vec![0.0; gc * GMM_K]);
        CodecModel {
            store,
            cfg,
            enc_in,
            enc_blocks,
            enc_out,
            dec_in,
            dec_blocks,
            dec_out,
            mask_conv,
            idh_in,
            idh_blocks,
            idh_proj,
            gmm_w,
            gmm_mu,
            gmm_sigma,
        }
    }

    /// E with straight-through rounding and clamping: (B,32,h,w) -> integer
    /// valued Q of the same shape. Forward values are exact integers.
    pub fn encode_graph(&self, g: &mut Graph, f: Var, frozen: bool) -> Var {
        let mut x = self.enc_in.forward(g, &self.store, f, frozen);
        x = g.relu(x);
        for b in &self.enc_blocks {
            x = b.forward(g, &self.store, x, frozen);
        }
        x = self.enc_out.forward(g, &self.store, x, frozen);
        let q = g.ste_round(x);
        g.clamp_ste(q, -CODE_CLAMP, CODE_CLAMP)
    }

    /// E without quantization: the continuous bottleneck used when the code
    /// space (and with it the entropy model) is ablated away.
    pub fn encode_continuous_graph(&self, g: &mut Graph, f: Var, frozen: bool) -> Var {
        let mut x = self.enc_in.forward(g, &self.store, f, frozen);
        x = g.relu(x);
        for b in &self.enc_blocks {
            x = b.forward(g, &self.store, x, frozen);
        }
        self.enc_out.forward(g, &self.store, x, frozen)
    }

    /// D, symmetric to E without rounding.
    pub fn decode_graph(&self, g: &mut Graph, q: Var, frozen: bool) -> Var {
        let mut x = self.dec_in.forward(g, &self.store, q, frozen);
        x = g.relu(x);
        for b in &self.dec_blocks {
            x = b.forward(g, &self.store, x, frozen);
        }
        self.dec_out.forward(g, &self.store, x, frozen)
    }

    /// Per-site-per-channel identity-class logit (the semantic class logit
    /// is fixed at zero, the usual binary Gumbel-Softmax parametrization).
    pub fn mask_logits_graph(&self, g: &mut Graph, q: Var, frozen: bool) -> Var {
        self.mask_conv.forward(g, &self.store, q, frozen)
    }

    /// Training-time mask: hard binary Gumbel-Softmax sample with a
    /// straight-through gradient. Forward values are exactly 0 or 1.
    pub fn sample_mask_graph(&self, g: &mut Graph, logits: Var, tau: f64, rng: &mut Rng) -> Var {
        assert!(tau > 0.0, "temperature must be positive");
        let shape = g.shape(logits).to_vec();
        let n: usize = shape.iter().product();
        // Difference of two Gumbel draws is logistic noise.
        let noise: Vec<f64> = (0..n)
            .map(|_| {
                let u = rng.next_f64_open();
                (u / (1.0 - u)).ln()
            })
            .collect();
        let gnoise = g.input(noise, &shape);
        let z = g.add(logits, gnoise);
        let z = g.scale(z, 0.5 / tau);
        let t = g.tanh(z);
        let soft = g.add_scalar(t, 1.0);
        let soft = g.scale(soft, 0.5);
        g.ste_round(soft)
    }

    /// Deterministic inference mask: identity class wherever its logit wins.
    pub fn infer_mask(&self, logits: &[f64]) -> Vec<u8> {
        logits.iter().map(|&l| (l > 0.0) as u8).collect()
    }

    /// Identity-embedding regressor on the masked code grid.
    pub fn id_head_graph(&self, g: &mut Graph, q_id: Var, frozen: bool) -> Var {
        let mut x = self.idh_in.forward(g, &self.store, q_id, frozen);
        x = g.relu(x);
        for b in &self.idh_blocks {
            x = b.forward(g, &self.store, x, frozen);
        }
        let pooled = g.avg_pool_all(x);
        self.idh_proj.forward(g, &self.store, pooled, frozen)
    }

    /// Give the entropy-model parameters a larger optimizer step. Mixture
    /// logits, means and log-variances must traverse several units to fit the
    /// code distribution; at the backbone learning rate they move too little
    /// over a whole training run and the rate term stays inert.
    pub fn boost_entropy_lr(&self, opt: &mut AdamW) {
        for pid in [self.gmm_w, self.gmm_mu, self.gmm_sigma] {
            opt.set_lr_mult(self.store.id(), pid, ENTROPY_LR_MULT);
        }
    }

    /// Faster steps for the identity head. It has to win a race: unless it
    /// learns to regress the attacker embedding from the masked codes before
    /// the rate penalty prunes the code grid, the mask gets no directional
    /// gradient and identity information is never concentrated.
    pub fn boost_id_head_lr(&self, opt: &mut AdamW, mult: f64) {
        let mut pids = vec![self.idh_in.w, self.idh_in.b, self.idh_proj.w, self.idh_proj.b];
        for b in &self.idh_blocks {
            pids.extend([b.conv1.w, b.conv1.b, b.conv2.w, b.conv2.b]);
        }
        for pid in pids {
            opt.set_lr_mult(self.store.id(), pid, mult);
        }
    }

    pub fn gmm_channel(&self, channel: usize) -> GmmSlice {
        let c = if self.cfg.shared_channel_gmm { 0 } else { channel };
        let wl = &self.store.get(self.gmm_w).data[c * GMM_K..(c + 1) * GMM_K];
        let mu = &self.store.get(self.gmm_mu).data[c * GMM_K..(c + 1) * GMM_K];
        let sg = &self.store.get(self.gmm_sigma).data[c * GMM_K..(c + 1) * GMM_K];
        let mx = wl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = wl.iter().map(|v| (v - mx).exp()).sum();
        let mut s = GmmSlice { w: [0.0; GMM_K], mu: [0.0; GMM_K], var: [0.0; GMM_K] };
        for k in 0..GMM_K {
            s.w[k] = (wl[k] - mx).exp() / z;
            s.mu[k] = mu[k];
            s.var[k] = sg[k].exp();
        }
        s
    }

    /// Codelength in bits of an integer grid under the entropy model; with a
    /// mask, only mask-1 sites are coded.
    pub fn codelength_bits(&self, q: &[i32], mask: Option<&[u8]>) -> f64 {
        assert_eq!(q.len() % FEAT_LEN, 0);
        let hw = FEAT_HW * FEAT_HW;
        let mut slices = Vec::with_capacity(FEAT_C);
        for c in 0..FEAT_C {
            slices.push(self.gmm_channel(c));
        }
        let mut bits = 0.0;
        for (i, &qi) in q.iter().enumerate() {
            if let Some(m) = mask {
                if m[i] == 0 {
                    continue;
                }
            }
            let c = (i / hw) % FEAT_C;
            let p = bin_probability(&slices[c], qi).max(PROB_FLOOR);
            bits -= p.log2();
        }
        bits
    }

    /// Differentiable per-element codelength, summed, in bits. `mask` (0/1
    /// values) restricts which sites are coded; probabilities are floored at
    /// 1e-9 before the logarithm.
    pub fn codelength_graph(
        &self,
        g: &mut Graph,
        q: Var,
        mask: Option<Var>,
        frozen: bool,
    ) -> Var {
        let getp = |g: &mut Graph, pid: PId| if frozen { g.frozen(&self.store, pid) } else { g.param(&self.store, pid) };
        let wl = getp(g, self.gmm_w);
        let mu = getp(g, self.gmm_mu);
        let sg = getp(g, self.gmm_sigma);
        let w = g.softmax_axis(wl, 1);
        let gc = self.store.get(self.gmm_w).shape[0];
        let mut p: Option<Var> = None;
        for k in 0..GMM_K {
            let mut onehot = vec![0.0; GMM_K];
            onehot[k] = 1.0;
            let sel = g.input(onehot, &[GMM_K, 1]);
            let wk = g.matmul(w, sel);
            let wk = g.reshape(wk, &[gc, 1, 1]);
            let muk = g.matmul(mu, sel);
            let muk = g.reshape(muk, &[gc, 1, 1]);
            let sgk = g.matmul(sg, sel);
            let sgk = g.reshape(sgk, &[gc, 1, 1]);
            // Standard deviation e^{sigma/2}; CDF at bin edges via erf.
            let half_sg = g.scale(sgk, 0.5);
            let sd = g.exp(half_sg);
            let denom = g.scale(sd, SQRT2);
            let hi = g.add_scalar(q, 0.5);
            let lo = g.add_scalar(q, -0.5);
            let zhi0 = g.sub(hi, muk);
            let zhi = g.div(zhi0, denom);
            let zlo0 = g.sub(lo, muk);
            let zlo = g.div(zlo0, denom);
            let ehi = g.erf(zhi);
            let elo = g.erf(zlo);
            let diff = g.sub(ehi, elo);
            let phi = g.scale(diff, 0.5);
            let term = g.mul(wk, phi);
            p = Some(match p {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        let p = p.unwrap();
        let p = g.clamp_ste(p, PROB_FLOOR, 1.0);
        let lnp = g.ln(p);
        let contrib = match mask {
            Some(m) => g.mul(lnp, m),
            None => lnp,
        };
        let total = g.sum(contrib);
        g.scale(total, -1.0 / LN2)
    }

    /// Non-differentiable encode + mask inference for one feature map.
    pub fn analyze(&self, f_mfm: &[f64]) -> Result<CodeGrid> {
        if f_mfm.len() != FEAT_LEN {
            return Err(DeidError::Geometry(format!(
                "feature map has {} values, expected {FEAT_LEN}",
                f_mfm.len()
            )));
        }
        if f_mfm.iter().any(|v| !v.is_finite()) {
            return Err(DeidError::InvalidParameter("non-finite feature input".into()));
        }
        let mut g = Graph::new();
        let f = g.input(f_mfm.to_vec(), &[1, FEAT_C, FEAT_HW, FEAT_HW]);
        let qv = self.encode_graph(&mut g, f, true);
        let logits = self.mask_logits_graph(&mut g, qv, true);
        let q: Vec<i32> = g.data(qv).iter().map(|&v| v as i32).collect();
        let m = self.infer_mask(g.data(logits));
        Ok(CodeGrid { q, m })
    }

    /// f_sem reconstruction: D((1 - M) .* Q).
    pub fn reconstruct_semantics(&self, grid: &CodeGrid) -> Vec<f64> {
        let q_sem: Vec<f64> = grid.q_sem().iter().map(|&v| v as f64).collect();
        let mut g = Graph::new();
        let q = g.input(q_sem, &[1, FEAT_C, FEAT_HW, FEAT_HW]);
        let out = self.decode_graph(&mut g, q, true);
        g.data(out).to_vec()
    }
}

/// Rate-distortion composition shared by both codec losses: L2 norm of the
/// reconstruction error plus beta times the codelength in bits.
pub fn rd_loss(g: &mut Graph, target: Var, recon: Var, bits: Var, beta: f64) -> Var {
    let diff = g.sub(recon, target);
    let dist = g.l2_norm(diff);
    let rate = g.scale(bits, beta);
    g.add(dist, rate)
}

pub struct CodeAllParts {
    pub loss: Var,
    pub q: Var,
    pub recon: Var,
}

/// L_code-all = ||f_MFM - D(Q)||2 + beta H(Q).
pub fn loss_code_all(
    model: &CodecModel,
    g: &mut Graph,
    f_mfm: Var,
    beta: f64,
    frozen: bool,
) -> CodeAllParts {
    assert!(beta >= 0.0);
    let q = model.encode_graph(g, f_mfm, frozen);
    let recon = model.decode_graph(g, q, frozen);
    let bits = model.codelength_graph(g, q, None, frozen);
    let bits = g.scale(bits, 1.0 / RATE_SITE_NORM);
    let loss = rd_loss(g, f_mfm, recon, bits, beta);
    CodeAllParts { loss, q, recon }
}

/// L_code-id = ||id_hat - id||2 + beta H(Q_id), with Q_id = Q .* M.
pub fn loss_code_id(
    model: &CodecModel,
    g: &mut Graph,
    q: Var,
    mask: Var,
    id_target: Var,
    beta: f64,
    frozen: bool,
) -> Var {
    let q_id = g.mul(q, mask);
    let id_hat = model.id_head_graph(g, q_id, frozen);
    let bits = model.codelength_graph(g, q, Some(mask), frozen);
    let bits = g.scale(bits, 1.0 / RATE_ELEM_NORM);
    rd_loss(g, id_target, id_hat, bits, beta)
}

/// Feature codelength divided by the pixel count of the original image.
pub fn bits_per_pixel(codelength_bits: f64, pixels: usize) -> f64 {
    assert!(pixels > 0);
    codelength_bits / pixels as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_gaussian() -> GmmSlice {
        GmmSlice { w: [1.0, 0.0, 0.0], mu: [0.0; GMM_K], var: [1.0; GMM_K] }
    }

    fn random_slice(rng: &mut Rng) -> GmmSlice {
        let raw: Vec<f64> = (0..GMM_K).map(|_| rng.normal()).collect();
        let z: f64 = raw.iter().map(|v| v.exp()).sum();
        let mut s = GmmSlice { w: [0.0; GMM_K], mu: [0.0; GMM_K], var: [0.0; GMM_K] };
        for k in 0..GMM_K {
            s.w[k] = raw[k].exp() / z;
            s.mu[k] = 3.0 * rng.normal();
            s.var[k] = rng.normal().exp();
        }
        s
    }

    #[test]
    fn cdf_symmetry_and_monotonicity() {
        let s = unit_gaussian();
        assert!((gmm_cdf(&s, 0.0) - 0.5).abs() < 1e-15);
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let s = random_slice(&mut rng);
            let mut prev = gmm_cdf(&s, -30.0);
            assert!(prev < 1e-6);
            for i in -29..=30 {
                let f = gmm_cdf(&s, i as f64);
                assert!(f >= prev);
                prev = f;
            }
            assert!(prev > 1.0 - 1e-6);
        }
    }

    #[test]
    fn cdf_matches_quadrature_oracle() {
        // Mixture of two unit Gaussians at -1 and +1, evaluated at 0.
        let s = GmmSlice { w: [0.5, 0.5, 0.0], mu: [-1.0, 1.0, 0.0], var: [1.0; GMM_K] };
        // Trapezoid integration of the mixture density from far left to 0.
        let pdf = |x: f64| {
            let mut d = 0.0;
            for k in 0..GMM_K {
                let z = (x - s.mu[k]) / s.var[k].sqrt();
                d += s.w[k] * (-0.5 * z * z).exp()
                    / (s.var[k].sqrt() * (2.0 * std::f64::consts::PI).sqrt());
            }
            d
        };
        let (a, b, n) = (-14.0, 0.0, 400_000);
        let h = (b - a) / n as f64;
        let mut integral = 0.5 * (pdf(a) + pdf(b));
        for i in 1..n {
            integral += pdf(a + i as f64 * h);
        }
        integral *= h;
        assert!((gmm_cdf(&s, 0.0) - integral).abs() < 1e-8);
    }

    #[test]
    fn bin_probability_reference_value() {
        // Unit Gaussian: p(0) = erf(0.5 / sqrt(2)).
        let p = bin_probability(&unit_gaussian(), 0);
        assert!((p - 0.382_924_922_548_026_3).abs() < 1e-12);
    }

    #[test]
    fn bin_probabilities_sum_to_one() {
        let mut rng = Rng::new(2);
        for _ in 0..10 {
            let mut s = random_slice(&mut rng);
            for k in 0..GMM_K {
                s.mu[k] = s.mu[k].clamp(-10.0, 10.0);
                s.var[k] = s.var[k].min(25.0);
            }
            let total: f64 = (-200..=200).map(|q| bin_probability(&s, q)).sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!((-200..=200).all(|q| bin_probability(&s, q) >= 0.0));
        }
    }

    #[test]
    fn cdf_telescoping_exact() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let s = random_slice(&mut rng);
            let (a, b) = (-17i32, 23i32);
            let sum: f64 = (a..=b).map(|q| bin_probability(&s, q)).sum();
            let direct = gmm_cdf(&s, b as f64 + 0.5) - gmm_cdf(&s, a as f64 - 0.5);
            assert!((sum - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn half_probability_grid_costs_one_bit_each() {
        let mut rng = Rng::new(4);
        let mut model = CodecModel::new(CodecConfig::default(), &mut rng);
        // Two needle components at 0 and 1, equal weight: p(0) = p(1) = 0.5.
        let gc = FEAT_C;
        let w = model.store.get_mut(model.gmm_w);
        w.data = vec![0.0, 0.0, -1e9].repeat(gc);
        let mu = model.store.get_mut(model.gmm_mu);
        mu.data = vec![0.0, 1.0, 0.0].repeat(gc);
        let sg = model.store.get_mut(model.gmm_sigma);
        sg.data = vec![-40.0, -40.0, 0.0].repeat(gc);
        let q: Vec<i32> = (0..FEAT_LEN).map(|i| (i % 2) as i32).collect();
        let bits = model.codelength_bits(&q, None);
        assert!((bits - FEAT_LEN as f64).abs() < 1e-6, "bits = {bits}");
    }

    #[test]
    fn empty_mask_codes_nothing() {
        let mut rng = Rng::new(5);
        let model = CodecModel::new(CodecConfig::default(), &mut rng);
        let q = vec![7i32; FEAT_LEN];
        assert_eq!(model.codelength_bits(&q, Some(&vec![0u8; FEAT_LEN])), 0.0);
    }

    #[test]
    fn codelength_additive_under_mask_partition() {
        let mut rng = Rng::new(6);
        let model = CodecModel::new(CodecConfig::default(), &mut rng);
        let q: Vec<i32> = (0..FEAT_LEN).map(|_| rng.gen_index(9) as i32 - 4).collect();
        let m: Vec<u8> = (0..FEAT_LEN).map(|_| rng.gen_index(2) as u8).collect();
        let inv: Vec<u8> = m.iter().map(|&v| 1 - v).collect();
        let total = model.codelength_bits(&q, None);
        let a = model.codelength_bits(&q, Some(&m));
        let b = model.codelength_bits(&q, Some(&inv));
        assert!((total - (a + b)).abs() < 1e-9);
    }

    #[test]
    fn graph_codelength_matches_pure() {
        let mut rng = Rng::new(7);
        for shared in [false, true] {
            let model = CodecModel::new(
                CodecConfig { shared_channel_gmm: shared, ..Default::default() },
                &mut rng,
            );
            let q: Vec<i32> = (0..FEAT_LEN).map(|_| rng.gen_index(7) as i32 - 3).collect();
            let pure = model.codelength_bits(&q, None);
            let mut g = Graph::new();
            let qv = g.input(q.iter().map(|&v| v as f64).collect(), &[1, FEAT_C, FEAT_HW, FEAT_HW]);
            let bits = model.codelength_graph(&mut g, qv, None, true);
            assert!((g.scalar(bits) - pure).abs() < 1e-9);
        }
    }

    #[test]
    fn fresh_codec_analyze_is_deterministic_and_nondegenerate() {
        let mut rng = Rng::new(8);
        let model = CodecModel::new(CodecConfig::default(), &mut rng);
        let f = rng.normal_vec(FEAT_LEN);
        let grid = model.analyze(&f).unwrap();
        // A fresh encoder must already produce a varying grid; an all-constant
        // code would give every downstream head a zero learning signal.
        assert!(grid.q.iter().any(|&v| v != grid.q[0]));
        assert!(grid.q.iter().all(|&v| v.abs() <= CODE_CLAMP as i32));
        let again = model.analyze(&f).unwrap();
        assert_eq!(grid, again);
    }

    #[test]
    fn analyze_rejects_bad_input() {
        let mut rng = Rng::new(9);
        let model = CodecModel::new(CodecConfig::default(), &mut rng);
        assert!(model.analyze(&vec![0.0; 5]).is_err());
        let mut f = vec![0.0; FEAT_LEN];
        f[17] = f64::NAN;
        assert!(model.analyze(&f).is_err());
    }

    #[test]
    fn code_grid_partition_identity() {
        let mut rng = Rng::new(10);
        let q: Vec<i32> = (0..64).map(|_| rng.gen_index(1025) as i32 - 512).collect();
        let m: Vec<u8> = (0..64).map(|_| rng.gen_index(2) as u8).collect();
        let grid = CodeGrid { q: q.clone(), m };
        let (id, sem) = (grid.q_id(), grid.q_sem());
        for i in 0..64 {
            assert_eq!(id[i] + sem[i], q[i]);
        }
    }

    #[test]
    fn mask_sampling_contracts() {
        let mut rng = Rng::new(11);
        let model = CodecModel::new(CodecConfig::default(), &mut rng);
        // Saturated positive logits: identity class everywhere.
        let mut g = Graph::new();
        let logits = g.input(vec![50.0; 16], &[1, 1, 4, 4]);
        let m = model.sample_mask_graph(&mut g, logits, 1.0, &mut rng);
        assert!(g.data(m).iter().all(|&v| v == 1.0));
        // Zero logits: empirical frequency 0.5 over 10k draws.
        let mut ones = 0usize;
        let n = 10_000;
        let mut g = Graph::new();
        let logits = g.input(vec![0.0; n], &[1, 1, 1, n]);
        let m = model.sample_mask_graph(&mut g, logits, 1.0, &mut rng);
        for &v in g.data(m) {
            assert!(v == 0.0 || v == 1.0);
            ones += v as usize;
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "freq = {freq}");
        // Inference is deterministic thresholding.
        let logits = vec![-0.3, 0.0, 0.2, 5.0];
        assert_eq!(model.infer_mask(&logits), vec![0, 0, 1, 1]);
        assert_eq!(model.infer_mask(&logits), model.infer_mask(&logits));
    }

    #[test]
    fn rd_loss_manual_two_element_example() {
        // target (3, 4), recon (3.3, 3.6), bits 7, beta 0.5:
        // loss = sqrt(0.09 + 0.16) + 3.5 = 0.5 + 3.5.
        let mut g = Graph::new();
        let target = g.input(vec![3.0, 4.0], &[2]);
        let recon = g.input(vec![3.3, 3.6], &[2]);
        let bits = g.scalar_input(7.0);
        let loss = rd_loss(&mut g, target, recon, bits, 0.5);
        assert!((g.scalar(loss) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn loss_code_all_zero_when_perfect() {
        // beta = 0 and recon == target gives exactly the epsilon-regularized
        // norm of zero.
        let mut g = Graph::new();
        let target = g.input(vec![1.0, 2.0], &[2]);
        let bits = g.scalar_input(0.0);
        let loss = rd_loss(&mut g, target, target, bits, 0.7);
        assert!(g.scalar(loss) < 1e-5);
    }

    #[test]
    fn loss_code_id_empty_mask_is_pure_distortion() {
        let mut rng = Rng::new(12);
        let model = CodecModel::new(CodecConfig::default(), &mut rng);
        let mut g = Graph::new();
        let q = g.input(rng.normal_vec(FEAT_LEN).iter().map(|v| v.round()).collect(), &[1, FEAT_C, FEAT_HW, FEAT_HW]);
        let mask = g.full(&[1, FEAT_C, FEAT_HW, FEAT_HW], 0.0);
        let target = g.input(rng.normal_vec(EMBED_DIM), &[1, EMBED_DIM]);
        let loss = loss_code_id(&model, &mut g, q, mask, target, 0.5, true);
        // With an empty mask the rate term is zero, so the loss equals the
        // embedding distortion of id-head(0).
        let zeros = g.full(&[1, FEAT_C, FEAT_HW, FEAT_HW], 0.0);
        let id_hat = model.id_head_graph(&mut g, zeros, true);
        let diff = g.sub(id_hat, target);
        let dist = g.l2_norm(diff);
        assert!((g.scalar(loss) - g.scalar(dist)).abs() < 1e-9);
    }

    #[test]
    fn gradient_flows_through_rounding_to_encoder() {
        let mut rng = Rng::new(13);
        let mut model = CodecModel::new(CodecConfig { hidden: 16, ..Default::default() }, &mut rng);
        // Perturb the zero-initialized tail so Q is non-constant.
        let w = model.store.get_mut(model.enc_out.w);
        for v in w.data.iter_mut() {
            *v = 0.1 * rng.normal();
        }
        let mut g = Graph::new();
        let f = g.input(rng.normal_vec(2 * FEAT_LEN), &[2, FEAT_C, FEAT_HW, FEAT_HW]);
        let parts = loss_code_all(&model, &mut g, f, 0.5, false);
        g.backward(parts.loss);
        let enc_w = g.bindings().iter().find(|b| b.pid == model.enc_in.w).unwrap();
        assert!(g.grad(enc_w.node).unwrap().iter().any(|&v| v != 0.0));
        let gw = g.bindings().iter().find(|b| b.pid == model.gmm_mu).unwrap();
        assert!(g.grad(gw.node).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn reconstruct_semantics_limits() {
        let mut rng = Rng::new(14);
        let model = CodecModel::new(CodecConfig { hidden: 16, ..Default::default() }, &mut rng);
        let q: Vec<i32> = (0..FEAT_LEN).map(|_| rng.gen_index(5) as i32 - 2).collect();
        // M all zeros: f_sem = D(Q).
        let grid0 = CodeGrid { q: q.clone(), m: vec![0; FEAT_LEN] };
        let mut g = Graph::new();
        let qv = g.input(q.iter().map(|&v| v as f64).collect(), &[1, FEAT_C, FEAT_HW, FEAT_HW]);
        let dq = model.decode_graph(&mut g, qv, true);
        assert_eq!(model.reconstruct_semantics(&grid0), g.data(dq));
        // M all ones: f_sem = D(0).
        let grid1 = CodeGrid { q, m: vec![1; FEAT_LEN] };
        let z = g.full(&[1, FEAT_C, FEAT_HW, FEAT_HW], 0.0);
        let dz = model.decode_graph(&mut g, z, true);
        assert_eq!(model.reconstruct_semantics(&grid1), g.data(dz));
    }

    #[test]
    fn bits_per_pixel_division() {
        assert_eq!(bits_per_pixel(4096.0, 64 * 64), 1.0);
        assert_eq!(bits_per_pixel(0.0, 64 * 64), 0.0);
    }
}
