//! Re-identification attackers: convolutional feature extractors producing
//! patch-level local features at 1/16 resolution, identity embeddings by
//! spatial average pooling, cosine similarity maps, classification + batch
//! hard triplet training, and Euclidean gallery retrieval.

use numcore::nn::{Conv2d, Linear};
use numcore::{AdamW, AdamWConfig, Graph, ParamStore, Rng, Var};

use crate::error::{DeidError, Result};
use crate::synthgen::{Corpus, Split, SyntheticSample, IMG_SIZE};

pub const PATCH_FACTOR: usize = 16;
pub const EMBED_DIM: usize = 64;
pub const FEAT_HW: usize = IMG_SIZE / PATCH_FACTOR;
pub const TRIPLET_MARGIN: f64 = 0.3;
pub const BATCH_P: usize = 8;
pub const BATCH_K: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Training-time attacker: four stride-2 stages.
    ConvA,
    /// Evaluation-time attacker: two stride-4 stages, wider early channels.
    ConvB,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::ConvA => "conv_a",
            Arch::ConvB => "conv_b",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "conv_a" => Ok(Arch::ConvA),
            "conv_b" => Ok(Arch::ConvB),
            other => Err(DeidError::InvalidParameter(format!("unknown attacker arch {other:?}"))),
        }
    }
}

pub struct ReidModel {
    pub arch: Arch,
    pub store: ParamStore,
    layers: Vec<Conv2d>,
    head: Linear,
    pub n_classes: usize,
}

impl ReidModel {
    /// Weight layout is a pure function of (arch, n_classes); checkpoints
    /// restore into a freshly constructed model.
    pub fn new(arch: Arch, n_classes: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let layers = match arch {
            Arch::ConvA => vec![
                Conv2d::new(&mut store, 1, 16, 3, 2, 1, rng),
                Conv2d::new(&mut store, 16, 32, 3, 2, 1, rng),
                Conv2d::new(&mut store, 32, 48, 3, 2, 1, rng),
                Conv2d::new(&mut store, 48, EMBED_DIM, 3, 2, 1, rng),
            ],
            Arch::ConvB => vec![
                Conv2d::new(&mut store, 1, 32, 5, 4, 2, rng),
                Conv2d::new(&mut store, 32, EMBED_DIM, 5, 4, 2, rng),
            ],
        };
        let head = Linear::new(&mut store, EMBED_DIM, n_classes, rng);
        ReidModel { arch, store, layers, head, n_classes }
    }

    /// Local features f: (B, 1, H, W) -> (B, EMBED_DIM, H/16, W/16).
    pub fn features(&self, g: &mut Graph, x: Var, frozen: bool) -> Var {
        let shape = g.shape(x).to_vec();
        assert!(
            shape[2] % PATCH_FACTOR == 0 && shape[3] % PATCH_FACTOR == 0,
            "image extents must be divisible by {PATCH_FACTOR}"
        );
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &self.store, h, frozen);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    /// Identity embedding: spatial mean of local features, (B, EMBED_DIM).
    pub fn embed(&self, g: &mut Graph, f: Var) -> Var {
        g.avg_pool_all(f)
    }

    pub fn logits(&self, g: &mut Graph, emb: Var, frozen: bool) -> Var {
        self.head.forward(g, &self.store, emb, frozen)
    }

    /// Non-differentiable inference: local features and embedding of one image.
    pub fn extract(&self, image: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let x = g.input(image.to_vec(), &[1, 1, IMG_SIZE, IMG_SIZE]);
        let f = self.features(&mut g, x, true);
        let emb = self.embed(&mut g, f);
        (g.data(f).to_vec(), g.data(emb).to_vec())
    }
}

/// S[i] = cos(f[:, i], id) over spatial sites; a zero vector on either side
/// yields similarity 0 by convention.
pub fn similarity_map(f: &[f64], channels: usize, hw: usize, id: &[f64]) -> Vec<f64> {
    assert_eq!(f.len(), channels * hw);
    assert_eq!(id.len(), channels);
    let id_norm = id.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut s = vec![0.0; hw];
    for (i, si) in s.iter_mut().enumerate() {
        let mut dot = 0.0;
        let mut n2 = 0.0;
        for c in 0..channels {
            let v = f[c * hw + i];
            dot += v * id[c];
            n2 += v * v;
        }
        let denom = n2.sqrt() * id_norm;
        *si = if denom == 0.0 { 0.0 } else { dot / denom };
    }
    s
}

/// Batch-hard triplet loss on (B, D) embeddings: per anchor, hardest positive
/// minus hardest negative under Euclidean distance, hinged at `margin` and
/// averaged over anchors with at least one positive and one negative.
pub fn triplet_loss_batch_hard(
    g: &mut Graph,
    emb: Var,
    patient_ids: &[usize],
    margin: f64,
) -> Result<Var> {
    let shape = g.shape(emb).to_vec();
    let (b, d) = (shape[0], shape[1]);
    assert_eq!(patient_ids.len(), b);
    let data = g.data(emb).to_vec();
    let dist = |i: usize, j: usize| {
        let mut s = 0.0;
        for k in 0..d {
            let diff = data[i * d + k] - data[j * d + k];
            s += diff * diff;
        }
        s.sqrt()
    };
    let row = |g: &mut Graph, i: usize| {
        let mut onehot = vec![0.0; b];
        onehot[i] = 1.0;
        let sel = g.input(onehot, &[1, b]);
        g.matmul(sel, emb)
    };
    let mut terms = Vec::new();
    for a in 0..b {
        let mut hardest_pos: Option<usize> = None;
        let mut hardest_neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if patient_ids[j] == patient_ids[a] {
                if hardest_pos.is_none_or(|p| dist(a, j) > dist(a, p)) {
                    hardest_pos = Some(j);
                }
            } else if hardest_neg.is_none_or(|n| dist(a, j) < dist(a, n)) {
                hardest_neg = Some(j);
            }
        }
        let (Some(p), Some(n)) = (hardest_pos, hardest_neg) else { continue };
        let ra = row(g, a);
        let rp = row(g, p);
        let rn = row(g, n);
        let dp_vec = g.sub(ra, rp);
        let dn_vec = g.sub(ra, rn);
        let dp = g.l2_norm(dp_vec);
        let dn = g.l2_norm(dn_vec);
        let gap = g.sub(dp, dn);
        let shifted = g.add_scalar(gap, margin);
        terms.push(g.relu(shifted));
    }
    if terms.is_empty() {
        return Err(DeidError::InvalidParameter(
            "triplet loss needs at least one anchor with a positive and a negative".into(),
        ));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Combined attacker training loss: cross-entropy over train-patient classes
/// plus batch-hard triplet on the embeddings.
pub fn reid_training_loss(
    g: &mut Graph,
    emb: Var,
    logits: Var,
    class_labels: &[usize],
    patient_ids: &[usize],
) -> Result<Var> {
    let ce = g.cross_entropy_logits(logits, class_labels);
    let triplet = triplet_loss_batch_hard(g, emb, patient_ids, TRIPLET_MARGIN)?;
    Ok(g.add(ce, triplet))
}

pub struct GalleryEntry {
    pub embedding: Vec<f64>,
    pub patient_id: usize,
    pub sample_id: usize,
}

pub struct Gallery {
    pub entries: Vec<GalleryEntry>,
    pub embed_dim: usize,
}

impl Gallery {
    pub fn build(model: &ReidModel, samples: &[&SyntheticSample]) -> Self {
        let entries = samples
            .iter()
            .map(|s| {
                let (_, emb) = model.extract(&s.image);
                GalleryEntry {
                    embedding: emb,
                    patient_id: s.identity.patient_id,
                    sample_id: s.sample_id,
                }
            })
            .collect();
        Gallery { entries, embed_dim: EMBED_DIM }
    }
}

/// Indices of gallery entries sorted by ascending Euclidean distance to the
/// query; ties keep gallery order.
pub fn rank_gallery(query: &[f64], gallery: &Gallery) -> Vec<usize> {
    assert!(!gallery.entries.is_empty(), "gallery must be nonempty");
    assert_eq!(query.len(), gallery.embed_dim);
    let mut order: Vec<usize> = (0..gallery.entries.len()).collect();
    let d2 = |e: &GalleryEntry| {
        e.embedding.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    order.sort_by(|&i, &j| {
        d2(&gallery.entries[i]).partial_cmp(&d2(&gallery.entries[j])).unwrap()
    });
    order
}

pub struct ReidTrainConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ReidTrainConfig {
    fn default() -> Self {
        ReidTrainConfig { steps: 5000, lr: 1e-4 }
    }
}

/// Per-patient sample indices usable for P x K batch sampling.
fn train_groups(corpus: &Corpus) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for &pid in &corpus.train_patients {
        let idx: Vec<usize> = corpus
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Split::Train && s.identity.patient_id == pid)
            .map(|(i, _)| i)
            .collect();
        if idx.len() >= BATCH_K {
            groups.push((pid, idx));
        }
    }
    if groups.len() < BATCH_P {
        return Err(DeidError::InvalidParameter(format!(
            "need >= {BATCH_P} train patients with >= {BATCH_K} images, have {}",
            groups.len()
        )));
    }
    Ok(groups)
}

pub fn train_reid(
    corpus: &Corpus,
    arch: Arch,
    cfg: &ReidTrainConfig,
    rng: &mut Rng,
) -> Result<ReidModel> {
    let groups = train_groups(corpus)?;
    let n_classes = corpus.train_patients.len();
    let mut model = ReidModel::new(arch, n_classes, rng);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, total_steps: cfg.steps as u64, ..Default::default() });
    for _ in 0..cfg.steps {
        let picked = rng.choose_k(groups.len(), BATCH_P);
        let mut pixels = Vec::with_capacity(BATCH_P * BATCH_K * IMG_SIZE * IMG_SIZE);
        let mut patient_ids = Vec::new();
        let mut class_labels = Vec::new();
        for &gi in &picked {
            let (pid, ref idx) = groups[gi];
            for k in rng.choose_k(idx.len(), BATCH_K) {
                let s = &corpus.samples[idx[k]];
                pixels.extend_from_slice(&s.image);
                patient_ids.push(pid);
                class_labels.push(corpus.train_class_of(pid).unwrap());
            }
        }
        let b = patient_ids.len();
        let mut g = Graph::new();
        let x = g.input(pixels, &[b, 1, IMG_SIZE, IMG_SIZE]);
        let f = model.features(&mut g, x, false);
        let emb = model.embed(&mut g, f);
        let logits = model.logits(&mut g, emb, false);
        let loss = reid_training_loss(&mut g, emb, logits, &class_labels, &patient_ids)?;
        g.backward(loss);
        opt.step(&g, &mut [&mut model.store]);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_geometry() {
        let mut rng = Rng::new(1);
        for arch in [Arch::ConvA, Arch::ConvB] {
            let model = ReidModel::new(arch, 10, &mut rng);
            let (f, emb) = model.extract(&vec![0.5; IMG_SIZE * IMG_SIZE]);
            assert_eq!(f.len(), EMBED_DIM * FEAT_HW * FEAT_HW);
            assert_eq!(emb.len(), EMBED_DIM);
        }
    }

    #[test]
    fn attackers_differ_in_depth() {
        let mut rng = Rng::new(1);
        let a = ReidModel::new(Arch::ConvA, 10, &mut rng);
        let b = ReidModel::new(Arch::ConvB, 10, &mut rng);
        assert_ne!(a.layers.len(), b.layers.len());
    }

    #[test]
    fn embedding_is_spatial_mean() {
        let mut rng = Rng::new(2);
        let model = ReidModel::new(Arch::ConvA, 4, &mut rng);
        let (f, emb) = model.extract(&rng.normal_vec(IMG_SIZE * IMG_SIZE));
        let hw = FEAT_HW * FEAT_HW;
        for c in 0..EMBED_DIM {
            let mean = f[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
            assert!((emb[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_map_extremes_and_zero_convention() {
        let id = vec![1.0, 2.0];
        // Site 0 parallel, site 1 antiparallel, site 2 zero.
        let f = vec![2.0, -1.0, 0.0, 4.0, -2.0, 0.0]; // channel-major, hw = 3
        let s = similarity_map(&f, 2, 3, &id);
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!((s[1] + 1.0).abs() < 1e-12);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn similarity_map_matches_brute_force() {
        let mut rng = Rng::new(3);
        let (c, hw) = (8, 16);
        let f = rng.normal_vec(c * hw);
        let id = rng.normal_vec(c);
        let s = similarity_map(&f, c, hw, &id);
        for i in 0..hw {
            let site: Vec<f64> = (0..c).map(|ch| f[ch * hw + i]).collect();
            let dot: f64 = site.iter().zip(&id).map(|(a, b)| a * b).sum();
            let na = site.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = id.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((s[i] - dot / (na * nb)).abs() < 1e-9);
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s[i]));
        }
    }

    #[test]
    fn triplet_identical_embeddings_give_margin() {
        let mut g = Graph::new();
        let emb = g.input(vec![0.7; 4 * 3], &[4, 3]);
        let loss = triplet_loss_batch_hard(&mut g, emb, &[0, 0, 1, 1], TRIPLET_MARGIN).unwrap();
        assert!((g.scalar(loss) - TRIPLET_MARGIN).abs() < 1e-6);
    }

    #[test]
    fn triplet_satisfied_margin_gives_zero() {
        let mut g = Graph::new();
        // Two tight clusters 10 apart; margin easily satisfied.
        let emb = g.input(vec![0.0, 0.0, 0.01, 0.0, 10.0, 0.0, 10.01, 0.0], &[4, 2]);
        let loss = triplet_loss_batch_hard(&mut g, emb, &[0, 0, 1, 1], TRIPLET_MARGIN).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn combined_loss_matches_hand_computation() {
        // 2 patients x 2 images, 2-d embeddings, 2 classes.
        let emb_data = vec![0.0, 0.0, 0.3, 0.0, 1.0, 0.0, 1.0, 0.4];
        let logit_data = vec![2.0, 0.0, 1.0, 1.0, 0.0, 1.5, 0.5, 0.5];
        let labels = [0usize, 0, 1, 1];
        let pids = [7usize, 7, 9, 9];
        let mut g = Graph::new();
        let emb = g.input(emb_data.clone(), &[4, 2]);
        let logits = g.input(logit_data.clone(), &[4, 2]);
        let loss = reid_training_loss(&mut g, emb, logits, &labels, &pids).unwrap();
        // Cross-entropy by hand.
        let mut ce = 0.0;
        for i in 0..4 {
            let (a, b) = (logit_data[2 * i], logit_data[2 * i + 1]);
            let z = a.exp() + b.exp();
            let picked = if labels[i] == 0 { a } else { b };
            ce -= picked - z.ln();
        }
        ce /= 4.0;
        // Batch-hard triplet by hand: distances within {0,1}: 0.3; anchors'
        // hardest negatives are the nearest cross-cluster points.
        let d = |i: usize, j: usize| {
            let (dx, dy) =
                (emb_data[2 * i] - emb_data[2 * j], emb_data[2 * i + 1] - emb_data[2 * j + 1]);
            (dx * dx + dy * dy).sqrt()
        };
        let mut tri = 0.0;
        for a in 0..4 {
            let p = if a % 2 == 0 { a + 1 } else { a - 1 };
            let others = if a < 2 { [2, 3] } else { [0, 1] };
            let dn = d(a, others[0]).min(d(a, others[1]));
            tri += (TRIPLET_MARGIN + d(a, p) - dn).max(0.0);
        }
        tri /= 4.0;
        assert!((g.scalar(loss) - (ce + tri)).abs() < 1e-6);
    }

    #[test]
    fn triplet_requires_valid_anchor() {
        let mut g = Graph::new();
        let emb = g.input(vec![0.0; 4], &[2, 2]);
        // Same patient twice: no negatives anywhere.
        assert!(triplet_loss_batch_hard(&mut g, emb, &[3, 3], TRIPLET_MARGIN).is_err());
    }

    #[test]
    fn rank_gallery_matches_brute_force() {
        let mut rng = Rng::new(4);
        let entries: Vec<GalleryEntry> = (0..5)
            .map(|i| GalleryEntry { embedding: rng.normal_vec(3), patient_id: i, sample_id: i })
            .collect();
        let gallery = Gallery { entries, embed_dim: 3 };
        let q = rng.normal_vec(3);
        let order = rank_gallery(&q, &gallery);
        let mut expect: Vec<usize> = (0..5).collect();
        expect.sort_by(|&i, &j| {
            let di: f64 = gallery.entries[i]
                .embedding
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let dj: f64 = gallery.entries[j]
                .embedding
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            di.partial_cmp(&dj).unwrap()
        });
        assert_eq!(order, expect);
        let mut perm = order.clone();
        perm.sort_unstable();
        assert_eq!(perm, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn rank_gallery_exact_match_first_and_stable_ties() {
        let e = |v: Vec<f64>, id: usize| GalleryEntry { embedding: v, patient_id: id, sample_id: id };
        let gallery = Gallery {
            entries: vec![e(vec![1.0, 0.0], 0), e(vec![0.0, 1.0], 1), e(vec![1.0, 0.0], 2)],
            embed_dim: 2,
        };
        let order = rank_gallery(&[1.0, 0.0], &gallery);
        // Entries 0 and 2 tie at distance 0; stable order keeps 0 first.
        assert_eq!(order, vec![0, 2, 1]);
    }

    #[test]
    fn gradient_reaches_first_layer() {
        let mut rng = Rng::new(5);
        let model = ReidModel::new(Arch::ConvB, 3, &mut rng);
        let mut g = Graph::new();
        let x = g.input(rng.normal_vec(2 * IMG_SIZE * IMG_SIZE), &[2, 1, IMG_SIZE, IMG_SIZE]);
        let f = model.features(&mut g, x, false);
        let emb = model.embed(&mut g, f);
        let logits = model.logits(&mut g, emb, false);
        let loss = g.cross_entropy_logits(logits, &[0, 2]);
        g.backward(loss);
        let first_w = g.bindings().iter().find(|b| b.pid == model.layers[0].w).unwrap();
        let grad = g.grad(first_w.node).unwrap();
        assert!(grad.iter().any(|&v| v != 0.0));
    }
}
