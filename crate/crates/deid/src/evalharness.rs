//! Attack and utility metrics, ID-R threshold calibration, linear probes,
//! frozen downstream task models, and the privacy-utility sweep with CSV and
//! gnuplot outputs.

use std::fmt::Write as _;
use std::path::Path;

use numcore::nn::{Conv2d, Linear};
use numcore::{AdamW, AdamWConfig, Graph, ParamStore, Rng, Var};

use crate::error::{DeidError, Result};
use crate::reid::{rank_gallery, Gallery, ReidModel};
use crate::synthgen::{Corpus, Split, SyntheticSample, IMG_SIZE, N_DISEASE_CLASSES};

/// One cell of the privacy-utility trade-off.
#[derive(Clone, Debug)]
pub struct TradeoffPoint {
    pub protector: String,
    pub strength: f64,
    pub cmc_r1: f64,
    pub id_r: f64,
    pub auroc: f64,
    pub dice: f64,
    pub bpp_total: f64,
    pub bpp_id: f64,
    pub bpp_sem: f64,
}

pub const CSV_HEADER: &str = "protector,strength,cmc_r1,id_r,auroc,dice,bpp_total,bpp_id,bpp_sem,seed";

// ---- attack metrics --------------------------------------------------------

pub struct QueryEntry {
    pub embedding: Vec<f64>,
    pub patient_id: usize,
    pub sample_id: usize,
}

/// Fraction of queries whose best gallery match (excluding the exact same
/// sample) shares the query's patient id.
pub fn cmc_rank1(queries: &[QueryEntry], gallery: &Gallery) -> Result<f64> {
    if gallery.entries.is_empty() {
        return Err(DeidError::InvalidParameter("empty gallery".into()));
    }
    if queries.is_empty() {
        return Err(DeidError::InvalidParameter("no queries".into()));
    }
    let mut hits = 0usize;
    for q in queries {
        let order = rank_gallery(&q.embedding, gallery);
        let best = order
            .iter()
            .map(|&i| &gallery.entries[i])
            .find(|e| e.sample_id != q.sample_id)
            .ok_or_else(|| {
                DeidError::InvalidParameter("gallery holds only the query itself".into())
            })?;
        if best.patient_id == q.patient_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

pub fn embedding_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fraction of original/protected pairs whose embedding distance stays
/// within the threshold (the pair is judged re-identified).
pub fn id_recognition_rate(pair_distances: &[f64], threshold: f64) -> f64 {
    if pair_distances.is_empty() {
        return 0.0;
    }
    let hits = pair_distances.iter().filter(|&&d| d <= threshold).count();
    hits as f64 / pair_distances.len() as f64
}

fn frac_le(sorted: &[f64], t: f64) -> f64 {
    sorted.partition_point(|&v| v <= t) as f64 / sorted.len() as f64
}

/// Equal-error-rate threshold on genuine (same patient) and impostor
/// (different patient) distance samples.
pub fn calibrate_idr_threshold(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.len() < 100 || impostor.len() < 100 {
        return Err(DeidError::InvalidParameter(format!(
            "threshold calibration needs >= 100 genuine and impostor pairs, got {} and {}",
            genuine.len(),
            impostor.len()
        )));
    }
    let mut gs = genuine.to_vec();
    let mut is = impostor.to_vec();
    gs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    is.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut pooled: Vec<f64> = gs.iter().chain(is.iter()).copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pooled.dedup();
    // Candidate thresholds sit between adjacent observed distances, so a
    // clean separation gap returns its midpoint.
    let mut candidates = vec![pooled[0] - 1.0];
    for w in pooled.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(pooled[pooled.len() - 1] + 1.0);
    let mut best = candidates[0];
    let mut best_gap = f64::INFINITY;
    for &t in &candidates {
        let fmr = frac_le(&is, t);
        let fnmr = 1.0 - frac_le(&gs, t);
        let gap = (fmr - fnmr).abs();
        if gap < best_gap {
            best_gap = gap;
            best = t;
        }
    }
    Ok(best)
}

/// Rank-based AUROC; tied score pairs count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DeidError::Geometry("scores and labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DeidError::InvalidParameter("auroc needs both classes present".into()));
    }
    let mut stat = 0.0;
    for (sp, &lp) in scores.iter().zip(labels) {
        if !lp {
            continue;
        }
        for (sn, &ln) in scores.iter().zip(labels) {
            if ln {
                continue;
            }
            stat += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(stat / (n_pos * n_neg) as f64)
}

/// Overlap score 2|A∩B| / (|A| + |B|); two empty masks count as 1.
pub fn dice(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(DeidError::Geometry("mask shape mismatch".into()));
    }
    let a: usize = pred.iter().filter(|&&v| v != 0).count();
    let b: usize = truth.iter().filter(|&&v| v != 0).count();
    if a + b == 0 {
        return Ok(1.0);
    }
    let inter = pred.iter().zip(truth).filter(|(&p, &t)| p != 0 && t != 0).count();
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

// ---- downstream task models ------------------------------------------------

/// Disease classifier and lesion segmenter trained on original training
/// images only, then frozen for every protector evaluation.
pub struct DownstreamModels {
    pub cls_store: ParamStore,
    cls_convs: Vec<Conv2d>,
    cls_head: Linear,
    pub seg_store: ParamStore,
    seg_convs: Vec<Conv2d>,
    pub trained: bool,
}

impl DownstreamModels {
    pub fn new(rng: &mut Rng) -> Self {
        let mut cls_store = ParamStore::new();
        let cls_convs = vec![
            Conv2d::new(&mut cls_store, 1, 16, 3, 2, 1, rng),
            Conv2d::new(&mut cls_store, 16, 32, 3, 2, 1, rng),
            Conv2d::new(&mut cls_store, 32, 32, 3, 2, 1, rng),
        ];
        let cls_head = Linear::new(&mut cls_store, 32, N_DISEASE_CLASSES, rng);
        let mut seg_store = ParamStore::new();
        let seg_convs = vec![
            Conv2d::new(&mut seg_store, 1, 16, 3, 1, 1, rng),
            Conv2d::new(&mut seg_store, 16, 16, 3, 1, 1, rng),
            Conv2d::new(&mut seg_store, 16, 1, 3, 1, 1, rng),
        ];
        DownstreamModels { cls_store, cls_convs, cls_head, seg_store, seg_convs, trained: false }
    }

    pub fn class_logits(&self, g: &mut Graph, x: Var, frozen: bool) -> Var {
        let mut h = x;
        for c in &self.cls_convs {
            h = c.forward(g, &self.cls_store, h, frozen);
            h = g.relu(h);
        }
        let pooled = g.avg_pool_all(h);
        self.cls_head.forward(g, &self.cls_store, pooled, frozen)
    }

    pub fn seg_logits(&self, g: &mut Graph, x: Var, frozen: bool) -> Var {
        let mut h = x;
        for (i, c) in self.seg_convs.iter().enumerate() {
            h = c.forward(g, &self.seg_store, h, frozen);
            if i + 1 < self.seg_convs.len() {
                h = g.relu(h);
            }
        }
        h
    }

    /// Softmax class probabilities for one image.
    pub fn classify(&self, image: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(image.to_vec(), &[1, 1, IMG_SIZE, IMG_SIZE]);
        let logits = self.class_logits(&mut g, x, true);
        let data = g.data(logits);
        let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = data.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|v| v / z).collect()
    }

    /// Probability that a lesion is present: 1 - P(healthy class).
    pub fn lesion_score(&self, image: &[f64]) -> f64 {
        1.0 - self.classify(image)[0]
    }

    /// Binary lesion mask from thresholded sigmoid logits.
    pub fn segment(&self, image: &[f64]) -> Vec<u8> {
        let mut g = Graph::new();
        let x = g.input(image.to_vec(), &[1, 1, IMG_SIZE, IMG_SIZE]);
        let logits = self.seg_logits(&mut g, x, true);
        g.data(logits).iter().map(|&v| u8::from(v > 0.0)).collect()
    }
}

pub struct DownstreamTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DownstreamTrainConfig {
    fn default() -> Self {
        DownstreamTrainConfig { steps: 1500, batch: 16, lr: 3e-4 }
    }
}

pub fn train_downstream(
    corpus: &Corpus,
    cfg: &DownstreamTrainConfig,
    rng: &mut Rng,
) -> Result<DownstreamModels> {
    let train = corpus.split_samples(Split::Train);
    if train.is_empty() {
        return Err(DeidError::InvalidParameter("corpus has no training samples".into()));
    }
    let mut models = DownstreamModels::new(rng);
    let mut cls_opt =
        AdamW::new(AdamWConfig { lr: cfg.lr, total_steps: cfg.steps as u64, ..Default::default() });
    let mut seg_opt =
        AdamW::new(AdamWConfig { lr: cfg.lr, total_steps: cfg.steps as u64, ..Default::default() });
    for _ in 0..cfg.steps {
        let mut pixels = Vec::with_capacity(cfg.batch * IMG_SIZE * IMG_SIZE);
        let mut classes = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let s = train[rng.gen_index(train.len())];
            pixels.extend_from_slice(&s.image);
            classes.push(s.semantics.disease_class);
        }
        let mut g = Graph::new();
        let x = g.input(pixels, &[cfg.batch, 1, IMG_SIZE, IMG_SIZE]);
        let logits = models.class_logits(&mut g, x, false);
        let cls_loss = g.cross_entropy_logits(logits, &classes);
        g.backward(cls_loss);
        cls_opt.step(&g, &mut [&mut models.cls_store]);

        let mut pixels = Vec::with_capacity(cfg.batch * IMG_SIZE * IMG_SIZE);
        let mut masks = Vec::with_capacity(cfg.batch * IMG_SIZE * IMG_SIZE);
        for _ in 0..cfg.batch {
            let s = train[rng.gen_index(train.len())];
            pixels.extend_from_slice(&s.image);
            masks.extend(s.lesion_mask.iter().map(|&v| v as f64));
        }
        let mut g = Graph::new();
        let x = g.input(pixels, &[cfg.batch, 1, IMG_SIZE, IMG_SIZE]);
        let logits = models.seg_logits(&mut g, x, false);
        let half = g.scale(logits, 0.5);
        let t = g.tanh(half);
        let t1 = g.add_scalar(t, 1.0);
        let prob = g.scale(t1, 0.5);
        let target = g.input(masks, &[cfg.batch, 1, IMG_SIZE, IMG_SIZE]);
        let diff = g.sub(prob, target);
        let seg_loss = g.mean_squares(diff);
        g.backward(seg_loss);
        seg_opt.step(&g, &mut [&mut models.seg_store]);
    }
    models.trained = true;
    Ok(models)
}

// ---- linear probes ---------------------------------------------------------

/// Multinomial linear probe trained on (features, labels); returns held-out
/// argmax accuracy. Used for identity and disease probes on code features.
pub fn linear_probe_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    n_classes: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() {
        return Err(DeidError::InvalidParameter("probe needs train and test features".into()));
    }
    let dim = train_x[0].len();
    if train_x.iter().chain(test_x).any(|v| v.len() != dim) {
        return Err(DeidError::Geometry("inconsistent probe feature lengths".into()));
    }
    // Per-dimension standardization (train statistics) keeps the probe's
    // fixed learning rate meaningful regardless of the feature scale.
    let n_tr = train_x.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in train_x {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x / n_tr;
        }
    }
    let mut sd = vec![0.0; dim];
    for v in train_x {
        for ((s, &x), m) in sd.iter_mut().zip(v).zip(&mean) {
            *s += (x - m) * (x - m) / n_tr;
        }
    }
    for s in sd.iter_mut() {
        *s = s.sqrt().max(1e-8);
    }
    let standardize = |xs: &[Vec<f64>]| -> Vec<f64> {
        xs.iter()
            .flat_map(|v| v.iter().zip(&mean).zip(&sd).map(|((&x, m), s)| (x - m) / s))
            .collect()
    };
    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, dim, n_classes, rng);
    let flat: Vec<f64> = standardize(train_x);
    let mut opt =
        AdamW::new(AdamWConfig { lr: 1e-2, total_steps: steps as u64, ..Default::default() });
    for _ in 0..steps {
        let mut g = Graph::new();
        let x = g.input(flat.clone(), &[train_x.len(), dim]);
        let logits = head.forward(&mut g, &store, x, false);
        let loss = g.cross_entropy_logits(logits, train_y);
        g.backward(loss);
        opt.step(&g, &mut [&mut store]);
    }
    let test_flat: Vec<f64> = standardize(test_x);
    let mut g = Graph::new();
    let x = g.input(test_flat, &[test_x.len(), dim]);
    let logits = head.forward(&mut g, &store, x, true);
    let data = g.data(logits);
    let mut hits = 0usize;
    for (i, &y) in test_y.iter().enumerate() {
        let row = &data[i * n_classes..(i + 1) * n_classes];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_y.len() as f64)
}

// ---- sweep -----------------------------------------------------------------

pub struct ProtectedOutput {
    pub image: Vec<f64>,
    pub bpp_total: f64,
    pub bpp_id: f64,
    pub bpp_sem: f64,
}

/// A trained protector at one strength setting.
pub trait Protector {
    fn tag(&self) -> String;
    fn strength(&self) -> f64;
    fn protect(&self, sample: &SyntheticSample, rng: &mut Rng) -> Result<ProtectedOutput>;
}

/// The unprotected upper-bound row.
pub struct OriginalProtector;

impl Protector for OriginalProtector {
    fn tag(&self) -> String {
        "Original".into()
    }
    fn strength(&self) -> f64 {
        0.0
    }
    fn protect(&self, sample: &SyntheticSample, _rng: &mut Rng) -> Result<ProtectedOutput> {
        Ok(ProtectedOutput {
            image: sample.image.clone(),
            bpp_total: 0.0,
            bpp_id: 0.0,
            bpp_sem: 0.0,
        })
    }
}

/// Where and how to dump protected images during evaluation.
pub struct DumpSpec<'a> {
    pub dir: &'a Path,
    pub seed: u64,
}

/// Attack and utility metrics for one protector over the given test samples,
/// against a fixed original-image gallery. With a dump spec, every protected
/// image is written as PGM next to a provenance record.
pub fn evaluate_protector(
    protector: &dyn Protector,
    samples: &[&SyntheticSample],
    attacker: &ReidModel,
    gallery: &Gallery,
    threshold: f64,
    downstream: &DownstreamModels,
    dump: Option<&DumpSpec>,
    rng: &mut Rng,
) -> Result<TradeoffPoint> {
    if !downstream.trained {
        return Err(DeidError::MissingPrerequisite("downstream models are untrained".into()));
    }
    if samples.is_empty() {
        return Err(DeidError::InvalidParameter("no evaluation samples".into()));
    }
    let mut queries = Vec::with_capacity(samples.len());
    let mut pair_distances = Vec::with_capacity(samples.len());
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut dice_sum = 0.0;
    let (mut bpp_total, mut bpp_id, mut bpp_sem) = (0.0, 0.0, 0.0);
    let cell_dir = dump
        .map(|d| {
            let dir =
                d.dir.join(format!("{}_{}", protector.tag(), protector.strength()));
            std::fs::create_dir_all(&dir).map(|_| dir)
        })
        .transpose()?;
    let mut provenance = String::new();
    for s in samples {
        let out = protector.protect(s, rng)?;
        if let Some(dir) = &cell_dir {
            crate::corpusio::write_pgm(
                &dir.join(format!("sample_{:05}.pgm", s.sample_id)),
                &out.image,
            )?;
            writeln!(
                provenance,
                "{}",
                serde_json::json!({
                    "sample_id": s.sample_id,
                    "protector": protector.tag(),
                    "strength": protector.strength(),
                    "seed": dump.unwrap().seed,
                })
            )
            .unwrap();
        }
        let (_, emb_p) = attacker.extract(&out.image);
        let (_, emb_o) = attacker.extract(&s.image);
        pair_distances.push(embedding_distance(&emb_o, &emb_p));
        queries.push(QueryEntry {
            embedding: emb_p,
            patient_id: s.identity.patient_id,
            sample_id: s.sample_id,
        });
        scores.push(downstream.lesion_score(&out.image));
        labels.push(s.semantics.lesion_present);
        dice_sum += dice(&downstream.segment(&out.image), &s.lesion_mask)?;
        bpp_total += out.bpp_total;
        bpp_id += out.bpp_id;
        bpp_sem += out.bpp_sem;
    }
    if let Some(dir) = &cell_dir {
        std::fs::write(dir.join("provenance.jsonl"), provenance)?;
    }
    let n = samples.len() as f64;
    Ok(TradeoffPoint {
        protector: protector.tag(),
        strength: protector.strength(),
        cmc_r1: cmc_rank1(&queries, gallery)?,
        id_r: id_recognition_rate(&pair_distances, threshold),
        auroc: auroc(&scores, &labels)?,
        dice: dice_sum / n,
        bpp_total: bpp_total / n,
        bpp_id: bpp_id / n,
        bpp_sem: bpp_sem / n,
    })
}

/// Full sweep: one point per protector cell plus the leading Original row.
pub fn sweep_tradeoff(
    protectors: &[&dyn Protector],
    corpus: &Corpus,
    attacker: &ReidModel,
    downstream: &DownstreamModels,
    threshold: f64,
    dump: Option<&DumpSpec>,
    rng: &mut Rng,
) -> Result<Vec<TradeoffPoint>> {
    let test = corpus.split_samples(Split::Test);
    let gallery = Gallery::build(attacker, &test);
    let mut points = Vec::with_capacity(protectors.len() + 1);
    points.push(evaluate_protector(
        &OriginalProtector,
        &test,
        attacker,
        &gallery,
        threshold,
        downstream,
        None,
        rng,
    )?);
    for &p in protectors {
        points.push(evaluate_protector(
            p, &test, attacker, &gallery, threshold, downstream, dump, rng,
        )?);
    }
    Ok(points)
}

pub fn tradeoff_csv(points: &[TradeoffPoint], seed: u64) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in points {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.9},{:.9},{:.9},{}",
            p.protector, p.strength, p.cmc_r1, p.id_r, p.auroc, p.dice, p.bpp_total, p.bpp_id,
            p.bpp_sem, seed
        )
        .unwrap();
    }
    out
}

/// One plain-text data file per protector curve, columns:
/// strength cmc_r1 id_r auroc dice.
pub fn write_gnuplot_curves(points: &[TradeoffPoint], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tags: Vec<&str> = points.iter().map(|p| p.protector.as_str()).collect();
    tags.dedup();
    tags.sort_unstable();
    tags.dedup();
    for tag in tags {
        let mut body = format!("# protector: {tag}\n# strength cmc_r1 id_r auroc dice\n");
        for p in points.iter().filter(|p| p.protector == tag) {
            writeln!(
                body,
                "{} {:.6} {:.6} {:.6} {:.6}",
                p.strength, p.cmc_r1, p.id_r, p.auroc, p.dice
            )
            .unwrap();
        }
        std::fs::write(dir.join(format!("curve_{tag}.dat")), body)?;
    }
    Ok(())
}

/// Piecewise-linear interpolation of a utility metric at a target attack
/// rate; None when the target lies outside the curve's attack range.
pub fn interpolate_at_attack(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    let mut pts = curve.to_vec();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if pts.is_empty() || target < pts[0].0 || target > pts[pts.len() - 1].0 {
        return None;
    }
    for w in pts.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if target >= x0 && target <= x1 {
            if x1 == x0 {
                return Some(0.5 * (y0 + y1));
            }
            return Some(y0 + (y1 - y0) * (target - x0) / (x1 - x0));
        }
    }
    Some(pts[pts.len() - 1].1)
}
