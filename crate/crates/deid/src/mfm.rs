//! Desk-scale stand-in for a pre-trained medical foundation model: a small
//! convolutional encoder pre-trained jointly on image reconstruction and
//! disease classification, then frozen. The joint objective makes the
//! features carry both diagnostic semantics and residual identity detail,
//! which is the premise the decoupling codec operates on.

use numcore::nn::{Conv2d, Linear};
use numcore::{AdamW, AdamWConfig, Graph, ParamStore, Rng, Var};

use crate::error::{DeidError, Result};
use crate::synthgen::{Corpus, Split, IMG_SIZE, N_DISEASE_CLASSES};

pub const FEAT_C: usize = 32;
pub const FEAT_HW: usize = 8;
pub const FEAT_LEN: usize = FEAT_C * FEAT_HW * FEAT_HW;

pub struct MfmModel {
    pub store: ParamStore,
    layers: Vec<Conv2d>,
}

impl MfmModel {
    pub fn new(rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let layers = vec![
            Conv2d::new(&mut store, 1, 16, 3, 2, 1, rng),
            Conv2d::new(&mut store, 16, 32, 3, 2, 1, rng),
            Conv2d::new(&mut store, 32, FEAT_C, 3, 2, 1, rng),
        ];
        MfmModel { store, layers }
    }

    /// (B, 1, 64, 64) -> (B, 32, 8, 8). `frozen` skips parameter binding;
    /// all post-pre-training use is frozen.
    pub fn features(&self, g: &mut Graph, x: Var, frozen: bool) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(&shape[1..], &[1, IMG_SIZE, IMG_SIZE], "corpus geometry required");
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &self.store, h, frozen);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn extract(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != IMG_SIZE * IMG_SIZE {
            return Err(DeidError::Geometry(format!(
                "image has {} pixels, expected {}",
                image.len(),
                IMG_SIZE * IMG_SIZE
            )));
        }
        let mut g = Graph::new();
        let x = g.input(image.to_vec(), &[1, 1, IMG_SIZE, IMG_SIZE]);
        let f = self.features(&mut g, x, true);
        Ok(g.data(f).to_vec())
    }
}

/// Throwaway pre-training heads: a mirror decoder back to pixels and a
/// disease classifier. Discarded after pre-training.
struct AuxHeads {
    store: ParamStore,
    up: Vec<Conv2d>,
    cls: Linear,
}

impl AuxHeads {
    fn new(rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let up = vec![
            Conv2d::new(&mut store, FEAT_C, 32, 3, 1, 1, rng),
            Conv2d::new(&mut store, 32, 16, 3, 1, 1, rng),
            Conv2d::new(&mut store, 16, 1, 3, 1, 1, rng),
        ];
        let cls = Linear::new(&mut store, FEAT_C, N_DISEASE_CLASSES, rng);
        AuxHeads { store, up, cls }
    }

    fn reconstruct(&self, g: &mut Graph, f: Var) -> Var {
        let mut h = f;
        for (i, layer) in self.up.iter().enumerate() {
            h = g.upsample_nearest(h, 2);
            h = layer.forward(g, &self.store, h, false);
            if i + 1 < self.up.len() {
                h = g.relu(h);
            }
        }
        h
    }

    fn classify(&self, g: &mut Graph, f: Var) -> Var {
        let pooled = g.avg_pool_all(f);
        self.cls.forward(g, &self.store, pooled, false)
    }
}

pub struct MfmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for MfmTrainConfig {
    fn default() -> Self {
        MfmTrainConfig { steps: 5000, batch: 16, lr: 1e-4 }
    }
}

pub fn pretrain_mfm(corpus: &Corpus, cfg: &MfmTrainConfig, rng: &mut Rng) -> Result<MfmModel> {
    let train: Vec<usize> = corpus
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train.is_empty() {
        return Err(DeidError::InvalidParameter("corpus has no training samples".into()));
    }
    let mut model = MfmModel::new(rng);
    let mut aux = AuxHeads::new(rng);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        total_steps: cfg.steps as u64,
        ..Default::default()
    });
    for _ in 0..cfg.steps {
        let mut pixels = Vec::with_capacity(cfg.batch * IMG_SIZE * IMG_SIZE);
        let mut labels = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let s = &corpus.samples[train[rng.gen_index(train.len())]];
            pixels.extend_from_slice(&s.image);
            labels.push(s.semantics.disease_class);
        }
        let mut g = Graph::new();
        let x = g.input(pixels, &[cfg.batch, 1, IMG_SIZE, IMG_SIZE]);
        let f = model.features(&mut g, x, false);
        let recon = aux.reconstruct(&mut g, f);
        let diff = g.sub(recon, x);
        let recon_loss = g.mean_squares(diff);
        let recon_loss = g.scale(recon_loss, 10.0);
        let logits = aux.classify(&mut g, f);
        let ce = g.cross_entropy_logits(logits, &labels);
        let loss = g.add(recon_loss, ce);
        g.backward(loss);
        opt.step(&g, &mut [&mut model.store, &mut aux.store]);
    }
    Ok(model)
}
