//! End-to-end orchestration: staged, checkpoint-resumable training of every
//! component, the full-method protector, and the privacy-utility sweep.

use std::path::{Path, PathBuf};

use numcore::{AdamW, AdamWConfig, Graph, Rng};

use crate::baselines::{
    self, pixel_blur, train_adversarial_protector, train_autoencoder, AdvTrainConfig, Autoencoder,
    Generator,
};
use crate::checkpoint::{load_store, save_store};
use crate::config::{ExperimentConfig, GeneratorKind};
use crate::corpusio::{load_corpus, save_corpus};
use crate::error::{DeidError, Result};
use crate::evalharness::{
    calibrate_idr_threshold, embedding_distance, sweep_tradeoff, tradeoff_csv,
    train_downstream, write_gnuplot_curves, DownstreamModels, DownstreamTrainConfig, DumpSpec,
    ProtectedOutput, Protector, TradeoffPoint,
};
use crate::idblock::{apply_blocking, make_block_plan, BlockPlan};
use crate::mdlcodec::{loss_code_all, loss_code_id, CodecConfig, CodecModel};
use crate::mfm::{pretrain_mfm, MfmModel, MfmTrainConfig, FEAT_C, FEAT_HW, FEAT_LEN};
use crate::reid::{self, similarity_map, train_reid, Arch, ReidModel, ReidTrainConfig};
use crate::resynth::{SynthModel, FUSE_C};
use crate::synthgen::{generate_corpus, Corpus, Split, SyntheticSample, IMG_SIZE};

pub const VERSION_TAG: &str = concat!("deid-", env!("CARGO_PKG_VERSION"));

/// RNG stream labels, one per stage, so resuming never perturbs later stages.
mod stream {
    pub const CORPUS: u64 = 1;
    pub const REID_A: u64 = 2;
    pub const REID_B: u64 = 3;
    pub const MFM: u64 = 4;
    pub const AUTOENCODER: u64 = 5;
    pub const DEID: u64 = 6;
    pub const ADV: u64 = 7;
    pub const DOWNSTREAM: u64 = 8;
    pub const SWEEP: u64 = 9;
}

fn stage_err(stage: &str, e: DeidError) -> DeidError {
    DeidError::Stage { stage: stage.into(), source: Box::new(e) }
}

/// The trained de-identification system: codec plus generator.
pub struct DeidSystem {
    pub codec: CodecModel,
    pub synth: SynthModel,
    pub kind: GeneratorKind,
}

// ---- deid training ---------------------------------------------------------

fn anneal_tau(step: usize, total: usize) -> f64 {
    // Gumbel temperature from 2.0 down to 0.5 on a geometric schedule.
    let progress = step as f64 / total.max(1) as f64;
    2.0 * 0.25f64.powf(progress)
}

/// Per-image blocking plan from the frozen attacker's features.
pub fn plan_for_image(
    reid_a: &ReidModel,
    image: &[f64],
    rho: f64,
) -> Result<BlockPlan> {
    let (f, emb) = reid_a.extract(image);
    let hw = reid::FEAT_HW * reid::FEAT_HW;
    let s = similarity_map(&f, reid::EMBED_DIM, hw, &emb);
    make_block_plan(&s, reid::FEAT_HW, reid::FEAT_HW, rho, false)
}

/// One optimization step of the composite objective
/// L_code-all + L_code-id + L_generator; returns the scalar loss.
#[allow(clippy::too_many_arguments)]
fn deid_step(
    system: &mut DeidSystem,
    reid_a: &ReidModel,
    mfm: &MfmModel,
    cfg: &ExperimentConfig,
    batch: &[&SyntheticSample],
    tau: f64,
    opt: &mut AdamW,
    rng: &mut Rng,
) -> Result<f64> {
    let b = batch.len();
    let px = IMG_SIZE * IMG_SIZE;
    let mut pixels = Vec::with_capacity(b * px);
    for s in batch {
        pixels.extend_from_slice(&s.image);
    }
    // Blocked inputs are prepared outside the graph; blocking is not
    // differentiated through.
    let rho = if cfg.no_id_blocking {
        None
    } else {
        Some(cfg.rho_grid[rng.gen_index(cfg.rho_grid.len())])
    };
    let mut blocked = Vec::with_capacity(b * px);
    for s in batch {
        match rho {
            Some(r) => {
                let plan = plan_for_image(reid_a, &s.image, r)?;
                blocked.extend(apply_blocking(&s.image, &plan)?);
            }
            None => blocked.extend_from_slice(&s.image),
        }
    }
    let mut g = Graph::new();
    let x = g.input(pixels, &[b, 1, IMG_SIZE, IMG_SIZE]);
    let x_noid = g.input(blocked, &[b, 1, IMG_SIZE, IMG_SIZE]);
    let f_mfm = mfm.features(&mut g, x, true);
    let beta = if cfg.no_codelength_loss { 0.0 } else { cfg.beta };

    let codec = &system.codec;
    let (mut loss, q, recon) = if cfg.no_code_space {
        let q = codec.encode_continuous_graph(&mut g, f_mfm, false);
        let recon = codec.decode_graph(&mut g, q, false);
        let diff = g.sub(recon, f_mfm);
        (g.l2_norm(diff), q, recon)
    } else {
        let parts = loss_code_all(codec, &mut g, f_mfm, beta, false);
        (parts.loss, parts.q, parts.recon)
    };

    // Decoupling branch: sampled binary mask, identity regression on the
    // masked codes, semantic reconstruction on the complement.
    let f_sem = if cfg.no_decouple {
        recon
    } else {
        let logits = codec.mask_logits_graph(&mut g, q, false);
        let mask = codec.sample_mask_graph(&mut g, logits, tau, rng);
        let f_id = reid_a.features(&mut g, x, true);
        let id_target = reid_a.embed(&mut g, f_id);
        let l_id = if cfg.no_code_space {
            let q_id = g.mul(q, mask);
            let id_hat = codec.id_head_graph(&mut g, q_id, false);
            let diff = g.sub(id_hat, id_target);
            g.l2_norm(diff)
        } else {
            loss_code_id(codec, &mut g, q, mask, id_target, beta, false)
        };
        loss = g.add(loss, l_id);
        let ones = g.input(vec![1.0; b * FEAT_LEN], &[b, FEAT_C, FEAT_HW, FEAT_HW]);
        let inv = g.sub(ones, mask);
        let q_sem = g.mul(q, inv);
        codec.decode_graph(&mut g, q_sem, false)
    };
    let f_sem = if cfg.no_sem {
        g.input(vec![0.0; b * FEAT_LEN], &[b, FEAT_C, FEAT_HW, FEAT_HW])
    } else {
        f_sem
    };

    let synth = &system.synth;
    let f_noid = synth.feat_net(&mut g, x_noid, false);
    let fused = synth.fuse(&mut g, f_noid, f_sem, false)?;
    let l_gen = match system.kind {
        GeneratorKind::Diffusion => synth.diffusion_loss(&mut g, x, fused.f_fuse, rng, false),
        GeneratorKind::Decoder => {
            let out = synth.decode_direct(&mut g, fused.f_fuse, false);
            let diff = g.sub(out, x);
            g.mean_squares(diff)
        }
    };
    loss = g.add(loss, l_gen);
    let total = g.scalar(loss);
    if !total.is_finite() {
        return Err(DeidError::InvalidParameter(format!("non-finite training loss {total}")));
    }
    g.backward(loss);
    opt.step(&g, &mut [&mut system.codec.store, &mut system.synth.store]);
    Ok(total)
}

/// End-to-end training of codec and generator on the composite objective,
/// with the frozen attacker and feature extractor as teachers.
pub fn train_deid(
    corpus: &Corpus,
    reid_a: &ReidModel,
    mfm: &MfmModel,
    cfg: &ExperimentConfig,
    rng: &mut Rng,
) -> Result<DeidSystem> {
    cfg.validate()?;
    let train = corpus.split_samples(Split::Train);
    if train.is_empty() {
        return Err(DeidError::InvalidParameter("corpus has no training samples".into()));
    }
    let codec = CodecModel::new(
        CodecConfig { hidden: cfg.codec_hidden, beta: cfg.beta, ..Default::default() },
        rng,
    );
    let synth = SynthModel::new(rng);
    let mut system = DeidSystem {
        codec,
        synth,
        kind: cfg.generator,
    };
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        total_steps: cfg.deid_steps as u64,
        ..Default::default()
    });
    system.codec.boost_entropy_lr(&mut opt);
    for step in 0..cfg.deid_steps {
        let batch: Vec<&SyntheticSample> =
            (0..cfg.batch).map(|_| train[rng.gen_index(train.len())]).collect();
        let tau = anneal_tau(step, cfg.deid_steps);
        let loss = deid_step(&mut system, reid_a, mfm, cfg, &batch, tau, &mut opt, rng)?;
        if step == 0 && !loss.is_finite() {
            return Err(DeidError::InvalidParameter("non-finite initial loss".into()));
        }
    }
    Ok(system)
}

/// Mean codelength H(Q) in bits over the given samples; used to compare a
/// default run against the no_codelength_loss ablation.
pub fn mean_code_bits(codec: &CodecModel, mfm: &MfmModel, samples: &[&SyntheticSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let f = mfm.extract(&s.image)?;
        let grid = codec.analyze(&f)?;
        total += codec.codelength_bits(&grid.q, None);
    }
    Ok(total / samples.len() as f64)
}

// ---- protectors ------------------------------------------------------------

/// The full method: ID-Blocking, identity-code suppression, re-synthesis.
pub struct OursProtector<'a> {
    pub system: &'a DeidSystem,
    pub reid_a: &'a ReidModel,
    pub mfm: &'a MfmModel,
    pub rho: f64,
    /// Zero out the semantic stream (the blocking-only ablation).
    pub no_sem: bool,
    /// No blocking; privacy comes from generating every pixel from the
    /// identity-suppressed code instead.
    pub no_id_blocking: bool,
    pub no_code_space: bool,
}

impl OursProtector<'_> {
    fn f_sem_and_bits(&self, image: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
        let f_mfm = self.mfm.extract(image)?;
        if self.no_code_space {
            // Continuous bottleneck: no entropy model, zero codelength.
            let mut g = Graph::new();
            let f = g.input(f_mfm, &[1, FEAT_C, FEAT_HW, FEAT_HW]);
            let q = self.system.codec.encode_continuous_graph(&mut g, f, true);
            let logits = self.system.codec.mask_logits_graph(&mut g, q, true);
            let m = self.system.codec.infer_mask(g.data(logits));
            let q_sem: Vec<f64> = g
                .data(q)
                .iter()
                .zip(&m)
                .map(|(&v, &mi)| if mi == 1 { 0.0 } else { v })
                .collect();
            let qs = g.input(q_sem, &[1, FEAT_C, FEAT_HW, FEAT_HW]);
            let out = self.system.codec.decode_graph(&mut g, qs, true);
            return Ok((g.data(out).to_vec(), 0.0, 0.0));
        }
        let grid = self.system.codec.analyze(&f_mfm)?;
        let bits_total = self.system.codec.codelength_bits(&grid.q, None);
        let bits_id = self.system.codec.codelength_bits(&grid.q, Some(&grid.m));
        Ok((self.system.codec.reconstruct_semantics(&grid), bits_total, bits_id))
    }

}

/// Run the trained generator on one blocked image conditioned on f_sem.
pub fn generate_protected(
    system: &DeidSystem,
    x_noid: &[f64],
    keep: &[u8],
    f_sem: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.input(x_noid.to_vec(), &[1, 1, IMG_SIZE, IMG_SIZE]);
    let fs = g.input(f_sem.to_vec(), &[1, FEAT_C, FEAT_HW, FEAT_HW]);
    let f_noid = system.synth.feat_net(&mut g, xv, true);
    let fused = system.synth.fuse(&mut g, f_noid, fs, true)?;
    match system.kind {
        GeneratorKind::Diffusion => {
            let f_fuse = g.data(fused.f_fuse).to_vec();
            assert_eq!(f_fuse.len(), FUSE_C * FEAT_HW * FEAT_HW);
            let out = system.synth.sample_batch(&[x_noid.to_vec()], &[keep.to_vec()], &f_fuse, rng);
            Ok(out.into_iter().next().unwrap())
        }
        GeneratorKind::Decoder => {
            let out = system.synth.decode_direct(&mut g, fused.f_fuse, true);
            let gen = g.data(out);
            // The one-shot decoder has no inpainting chain; kept pixels are
            // composited back directly.
            Ok(x_noid
                .iter()
                .zip(gen)
                .zip(keep)
                .map(|((&xk, &gv), &k)| if k == 1 { xk } else { gv.clamp(0.0, 1.0) })
                .collect())
        }
    }
}

impl Protector for OursProtector<'_> {
    fn tag(&self) -> String {
        if self.no_sem {
            "ours_no_sem".into()
        } else if self.no_code_space {
            "ours_no_code_space".into()
        } else {
            "ours".into()
        }
    }
    fn strength(&self) -> f64 {
        self.rho
    }
    fn protect(&self, sample: &SyntheticSample, rng: &mut Rng) -> Result<ProtectedOutput> {
        let px = IMG_SIZE * IMG_SIZE;
        let (x_noid, keep) = if self.no_id_blocking {
            // Generate every pixel, conditioned on the unblocked image.
            (sample.image.clone(), vec![0u8; px])
        } else {
            let plan = plan_for_image(self.reid_a, &sample.image, self.rho)?;
            (apply_blocking(&sample.image, &plan)?, plan.upsampled_mask())
        };
        let (f_sem, bits_total, bits_id) = if self.no_sem {
            (vec![0.0; FEAT_LEN], 0.0, 0.0)
        } else {
            self.f_sem_and_bits(&sample.image)?
        };
        let image = generate_protected(self.system, &x_noid, &keep, &f_sem, rng)?;
        Ok(ProtectedOutput {
            image,
            bpp_total: bits_total / px as f64,
            bpp_id: bits_id / px as f64,
            bpp_sem: (bits_total - bits_id) / px as f64,
        })
    }
}

pub struct BlurProtector {
    pub sigma: f64,
}

impl Protector for BlurProtector {
    fn tag(&self) -> String {
        "pixel_blur".into()
    }
    fn strength(&self) -> f64 {
        self.sigma
    }
    fn protect(&self, sample: &SyntheticSample, _rng: &mut Rng) -> Result<ProtectedOutput> {
        Ok(ProtectedOutput {
            image: pixel_blur(&sample.image, IMG_SIZE, self.sigma),
            bpp_total: 0.0,
            bpp_id: 0.0,
            bpp_sem: 0.0,
        })
    }
}

pub struct FeatNoiseProtector<'a> {
    pub ae: &'a Autoencoder,
    pub level: f64,
}

impl Protector for FeatNoiseProtector<'_> {
    fn tag(&self) -> String {
        "feat_noise".into()
    }
    fn strength(&self) -> f64 {
        self.level
    }
    fn protect(&self, sample: &SyntheticSample, rng: &mut Rng) -> Result<ProtectedOutput> {
        Ok(ProtectedOutput {
            image: self.ae.protect(&sample.image, self.level, rng)?,
            bpp_total: 0.0,
            bpp_id: 0.0,
            bpp_sem: 0.0,
        })
    }
}

pub struct AdvProtector<'a> {
    pub generator: &'a Generator,
    pub co_trained: bool,
    pub lambda: f64,
}

impl Protector for AdvProtector<'_> {
    fn tag(&self) -> String {
        if self.co_trained { "privacy_net".into() } else { "id_adv".into() }
    }
    fn strength(&self) -> f64 {
        self.lambda
    }
    fn protect(&self, sample: &SyntheticSample, _rng: &mut Rng) -> Result<ProtectedOutput> {
        Ok(ProtectedOutput {
            image: self.generator.protect(&sample.image),
            bpp_total: 0.0,
            bpp_id: 0.0,
            bpp_sem: 0.0,
        })
    }
}

/// Random cell masking re-synthesized with a zeroed semantic stream; the
/// paper's degenerate variant sharing our generator.
pub struct MaeProtector<'a> {
    pub system: &'a DeidSystem,
    pub ratio: f64,
}

impl Protector for MaeProtector<'_> {
    fn tag(&self) -> String {
        "mae_mask".into()
    }
    fn strength(&self) -> f64 {
        self.ratio
    }
    fn protect(&self, sample: &SyntheticSample, rng: &mut Rng) -> Result<ProtectedOutput> {
        let grid = reid::FEAT_HW;
        let keep_cells = baselines::mae_keep_mask(self.ratio, rng)?;
        let plan = BlockPlan {
            block_fraction: self.ratio,
            threshold: 0.0,
            keep_mask: keep_cells,
            grid_h: grid,
            grid_w: grid,
            degenerate: false,
        };
        let x_noid = apply_blocking(&sample.image, &plan)?;
        let keep = plan.upsampled_mask();
        let image = generate_protected(self.system, &x_noid, &keep, &vec![0.0; FEAT_LEN], rng)?;
        Ok(ProtectedOutput { image, bpp_total: 0.0, bpp_id: 0.0, bpp_sem: 0.0 })
    }
}

// ---- staged, resumable pipeline --------------------------------------------

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Freeze the resolved configuration and version tag on first use; on
    /// resume, reject a config that differs from the frozen copy.
    pub fn init(&self, cfg: &ExperimentConfig) -> Result<()> {
        let cfg_path = self.path("config.cfg");
        let flat = cfg.to_flat_string();
        if cfg_path.exists() {
            let frozen = std::fs::read_to_string(&cfg_path)?;
            if frozen != flat {
                return Err(DeidError::Config(
                    "run directory holds a different frozen config; use a fresh directory".into(),
                ));
            }
        } else {
            std::fs::write(&cfg_path, flat)?;
        }
        std::fs::write(self.path("VERSION"), VERSION_TAG)?;
        Ok(())
    }

    pub fn ensure_corpus(&self, cfg: &ExperimentConfig, base: &Rng) -> Result<Corpus> {
        let dir = self.path("corpus");
        if dir.join("meta.json").exists() {
            return load_corpus(&dir).map_err(|e| stage_err("corpus", e));
        }
        let corpus = generate_corpus(
            cfg.n_patients,
            cfg.images_per_patient,
            cfg.lesion_rate,
            &base.derive(stream::CORPUS),
        )
        .map_err(|e| stage_err("corpus", e))?;
        save_corpus(&dir, &corpus).map_err(|e| stage_err("corpus", e))?;
        Ok(corpus)
    }

    pub fn ensure_reid(
        &self,
        cfg: &ExperimentConfig,
        corpus: &Corpus,
        arch: Arch,
        base: &Rng,
    ) -> Result<ReidModel> {
        let stage = format!("reid_{}", arch.tag());
        let ckpt = self.path(&format!("{stage}.ckpt"));
        let label = if arch == Arch::ConvA { stream::REID_A } else { stream::REID_B };
        let mut rng = base.derive(label);
        if ckpt.exists() {
            let mut model = ReidModel::new(arch, corpus.train_patients.len(), &mut rng);
            load_store(&ckpt, arch.tag(), &mut model.store)
                .map_err(|e| stage_err(&stage, e))?;
            return Ok(model);
        }
        let tcfg = ReidTrainConfig { steps: cfg.reid_steps, ..Default::default() };
        let model =
            train_reid(corpus, arch, &tcfg, &mut rng).map_err(|e| stage_err(&stage, e))?;
        save_store(&ckpt, arch.tag(), &model.store).map_err(|e| stage_err(&stage, e))?;
        Ok(model)
    }

    pub fn ensure_mfm(
        &self,
        cfg: &ExperimentConfig,
        corpus: &Corpus,
        base: &Rng,
    ) -> Result<MfmModel> {
        let ckpt = self.path("mfm.ckpt");
        let mut rng = base.derive(stream::MFM);
        if ckpt.exists() {
            let mut model = MfmModel::new(&mut rng);
            load_store(&ckpt, "mfm", &mut model.store).map_err(|e| stage_err("mfm", e))?;
            return Ok(model);
        }
        let tcfg = MfmTrainConfig { steps: cfg.mfm_steps, batch: cfg.batch, ..Default::default() };
        let model = pretrain_mfm(corpus, &tcfg, &mut rng).map_err(|e| stage_err("mfm", e))?;
        save_store(&ckpt, "mfm", &model.store).map_err(|e| stage_err("mfm", e))?;
        Ok(model)
    }

    pub fn ensure_autoencoder(
        &self,
        cfg: &ExperimentConfig,
        corpus: &Corpus,
        base: &Rng,
    ) -> Result<Autoencoder> {
        let ckpt = self.path("autoencoder.ckpt");
        let mut rng = base.derive(stream::AUTOENCODER);
        if ckpt.exists() {
            let mut ae = Autoencoder::new(&mut rng);
            load_store(&ckpt, "autoencoder", &mut ae.store)
                .map_err(|e| stage_err("autoencoder", e))?;
            ae.trained = true;
            return Ok(ae);
        }
        let ae = train_autoencoder(corpus, cfg.ae_steps, cfg.batch, &mut rng)
            .map_err(|e| stage_err("autoencoder", e))?;
        save_store(&ckpt, "autoencoder", &ae.store).map_err(|e| stage_err("autoencoder", e))?;
        Ok(ae)
    }

    pub fn ensure_deid(
        &self,
        cfg: &ExperimentConfig,
        corpus: &Corpus,
        reid_a: &ReidModel,
        mfm: &MfmModel,
        base: &Rng,
    ) -> Result<DeidSystem> {
        let codec_ckpt = self.path("codec.ckpt");
        let synth_ckpt = self.path("synth.ckpt");
        let mut rng = base.derive(stream::DEID);
        if codec_ckpt.exists() && synth_ckpt.exists() {
            let codec = CodecModel::new(
                CodecConfig { hidden: cfg.codec_hidden, beta: cfg.beta, ..Default::default() },
                &mut rng,
            );
            let synth = SynthModel::new(&mut rng);
            let mut system = DeidSystem { codec, synth, kind: cfg.generator };
            load_store(&codec_ckpt, "codec", &mut system.codec.store)
                .map_err(|e| stage_err("deid", e))?;
            load_store(&synth_ckpt, "synth", &mut system.synth.store)
                .map_err(|e| stage_err("deid", e))?;
            return Ok(system);
        }
        let system =
            train_deid(corpus, reid_a, mfm, cfg, &mut rng).map_err(|e| stage_err("deid", e))?;
        save_store(&codec_ckpt, "codec", &system.codec.store)
            .map_err(|e| stage_err("deid", e))?;
        save_store(&synth_ckpt, "synth", &system.synth.store)
            .map_err(|e| stage_err("deid", e))?;
        Ok(system)
    }

    pub fn ensure_adv_generator(
        &self,
        cfg: &ExperimentConfig,
        corpus: &Corpus,
        reid_a: &ReidModel,
        mfm: &MfmModel,
        lambda: f64,
        co_train: bool,
        base: &Rng,
    ) -> Result<Generator> {
        let kind = if co_train { "privacy_net" } else { "id_adv" };
        let stage = format!("{kind}_{lambda}");
        let ckpt = self.path(&format!("{stage}.ckpt"));
        let mut rng = base.derive(stream::ADV ^ (lambda.to_bits().rotate_left(u32::from(co_train))));
        if ckpt.exists() {
            let mut gen = Generator::new(&mut rng);
            load_store(&ckpt, kind, &mut gen.store).map_err(|e| stage_err(&stage, e))?;
            return Ok(gen);
        }
        let tcfg = AdvTrainConfig {
            steps: cfg.adv_steps,
            batch: cfg.batch,
            lambda,
            co_train_attacker: co_train,
        };
        let outcome = train_adversarial_protector(corpus, reid_a, mfm, &tcfg, &mut rng)
            .map_err(|e| stage_err(&stage, e))?;
        save_store(&ckpt, kind, &outcome.generator.store).map_err(|e| stage_err(&stage, e))?;
        Ok(outcome.generator)
    }

    pub fn ensure_downstream(
        &self,
        cfg: &ExperimentConfig,
        corpus: &Corpus,
        base: &Rng,
    ) -> Result<DownstreamModels> {
        let cls_ckpt = self.path("downstream_cls.ckpt");
        let seg_ckpt = self.path("downstream_seg.ckpt");
        let mut rng = base.derive(stream::DOWNSTREAM);
        if cls_ckpt.exists() && seg_ckpt.exists() {
            let mut models = DownstreamModels::new(&mut rng);
            load_store(&cls_ckpt, "downstream_cls", &mut models.cls_store)
                .map_err(|e| stage_err("downstream", e))?;
            load_store(&seg_ckpt, "downstream_seg", &mut models.seg_store)
                .map_err(|e| stage_err("downstream", e))?;
            models.trained = true;
            return Ok(models);
        }
        let tcfg = DownstreamTrainConfig {
            steps: cfg.downstream_steps,
            batch: cfg.batch,
            ..Default::default()
        };
        let models =
            train_downstream(corpus, &tcfg, &mut rng).map_err(|e| stage_err("downstream", e))?;
        save_store(&cls_ckpt, "downstream_cls", &models.cls_store)
            .map_err(|e| stage_err("downstream", e))?;
        save_store(&seg_ckpt, "downstream_seg", &models.seg_store)
            .map_err(|e| stage_err("downstream", e))?;
        Ok(models)
    }

    /// EER threshold calibrated on validation originals under the evaluation
    /// attacker; cached as plain text.
    pub fn ensure_threshold(&self, corpus: &Corpus, reid_b: &ReidModel) -> Result<f64> {
        let path = self.path("threshold.txt");
        if path.exists() {
            let body = std::fs::read_to_string(&path)?;
            return body
                .trim()
                .parse()
                .map_err(|_| stage_err("threshold", DeidError::Corrupt("bad threshold file".into())));
        }
        let t = calibrate_threshold_on_split(corpus, reid_b, Split::Val)
            .map_err(|e| stage_err("threshold", e))?;
        std::fs::write(&path, format!("{t}\n"))?;
        Ok(t)
    }
}

/// All genuine (same patient) and impostor (cross patient) embedding
/// distances within a split, fed to EER calibration.
pub fn calibrate_threshold_on_split(
    corpus: &Corpus,
    attacker: &ReidModel,
    split: Split,
) -> Result<f64> {
    let samples = corpus.split_samples(split);
    let embs: Vec<(usize, Vec<f64>)> = samples
        .iter()
        .map(|s| (s.identity.patient_id, attacker.extract(&s.image).1))
        .collect();
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let d = embedding_distance(&embs[i].1, &embs[j].1);
            if embs[i].0 == embs[j].0 {
                genuine.push(d);
            } else {
                impostor.push(d);
            }
        }
    }
    calibrate_idr_threshold(&genuine, &impostor)
}

/// Everything a sweep needs, trained or loaded.
pub struct TrainedStack {
    pub corpus: Corpus,
    pub reid_a: ReidModel,
    pub reid_b: ReidModel,
    pub mfm: MfmModel,
    pub autoencoder: Autoencoder,
    pub system: DeidSystem,
    pub downstream: DownstreamModels,
    pub threshold: f64,
}

pub fn ensure_stack(run: &RunDir, cfg: &ExperimentConfig) -> Result<TrainedStack> {
    cfg.validate()?;
    run.init(cfg)?;
    let base = Rng::new(cfg.seed);
    let corpus = run.ensure_corpus(cfg, &base)?;
    let reid_a = run.ensure_reid(cfg, &corpus, Arch::ConvA, &base)?;
    let reid_b = run.ensure_reid(cfg, &corpus, Arch::ConvB, &base)?;
    let mfm = run.ensure_mfm(cfg, &corpus, &base)?;
    let autoencoder = run.ensure_autoencoder(cfg, &corpus, &base)?;
    let system = run.ensure_deid(cfg, &corpus, &reid_a, &mfm, &base)?;
    let downstream = run.ensure_downstream(cfg, &corpus, &base)?;
    let threshold = run.ensure_threshold(&corpus, &reid_b)?;
    Ok(TrainedStack { corpus, reid_a, reid_b, mfm, autoencoder, system, downstream, threshold })
}

/// The full sweep: ours over the rho grid, the blocking-only ablation, and
/// all five baselines over their grids; CSV, per-curve gnuplot data, and
/// protected-image dumps land in the run directory.
pub fn run_sweep(run: &RunDir, cfg: &ExperimentConfig) -> Result<Vec<TradeoffPoint>> {
    let stack = ensure_stack(run, cfg)?;
    let base = Rng::new(cfg.seed);
    let mut adv_gens: Vec<(f64, bool, Generator)> = Vec::new();
    for &lambda in &cfg.id_adv_grid {
        let g = run.ensure_adv_generator(cfg, &stack.corpus, &stack.reid_a, &stack.mfm, lambda, false, &base)?;
        adv_gens.push((lambda, false, g));
    }
    for &lambda in &cfg.privacy_net_grid {
        let g = run.ensure_adv_generator(cfg, &stack.corpus, &stack.reid_a, &stack.mfm, lambda, true, &base)?;
        adv_gens.push((lambda, true, g));
    }

    let mut owned: Vec<Box<dyn Protector + '_>> = Vec::new();
    for &rho in &cfg.rho_grid {
        owned.push(Box::new(OursProtector {
            system: &stack.system,
            reid_a: &stack.reid_a,
            mfm: &stack.mfm,
            rho,
            no_sem: false,
            no_id_blocking: cfg.no_id_blocking,
            no_code_space: cfg.no_code_space,
        }));
        owned.push(Box::new(OursProtector {
            system: &stack.system,
            reid_a: &stack.reid_a,
            mfm: &stack.mfm,
            rho,
            no_sem: true,
            no_id_blocking: cfg.no_id_blocking,
            no_code_space: cfg.no_code_space,
        }));
    }
    for &sigma in &cfg.blur_grid {
        owned.push(Box::new(BlurProtector { sigma }));
    }
    for &level in &cfg.feat_noise_grid {
        owned.push(Box::new(FeatNoiseProtector { ae: &stack.autoencoder, level }));
    }
    for (lambda, co_trained, generator) in &adv_gens {
        owned.push(Box::new(AdvProtector {
            generator,
            co_trained: *co_trained,
            lambda: *lambda,
        }));
    }
    for &ratio in &cfg.mae_grid {
        owned.push(Box::new(MaeProtector { system: &stack.system, ratio }));
    }
    let refs: Vec<&dyn Protector> = owned.iter().map(|b| b.as_ref()).collect();

    let dump_dir = run.root.join("protected");
    let dump = DumpSpec { dir: &dump_dir, seed: cfg.seed };
    let mut rng = base.derive(stream::SWEEP);
    let points = sweep_tradeoff(
        &refs,
        &stack.corpus,
        &stack.reid_b,
        &stack.downstream,
        stack.threshold,
        Some(&dump),
        &mut rng,
    )?;
    std::fs::write(run.root.join("tradeoff.csv"), tradeoff_csv(&points, cfg.seed))?;
    write_gnuplot_curves(&points, &run.root.join("curves"))?;
    Ok(points)
}

/// Full artifact run; every stage resumes from its checkpoint if present.
pub fn run_pipeline(run: &RunDir, cfg: &ExperimentConfig) -> Result<Vec<TradeoffPoint>> {
    let csv = run.root.join("tradeoff.csv");
    if csv.exists() {
        // Idempotent resume: nothing left to compute.
        let body = std::fs::read_to_string(&csv)?;
        let points = parse_tradeoff_csv(&body)?;
        return Ok(points);
    }
    run_sweep(run, cfg)
}

pub fn parse_tradeoff_csv(body: &str) -> Result<Vec<TradeoffPoint>> {
    let mut lines = body.lines();
    let header = lines.next().unwrap_or("");
    if header != crate::evalharness::CSV_HEADER {
        return Err(DeidError::Corrupt(format!("unexpected CSV header '{header}'")));
    }
    let mut points = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(DeidError::Corrupt(format!("bad CSV row '{line}'")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| DeidError::Corrupt(format!("bad CSV field '{}'", f[i])))
        };
        points.push(TradeoffPoint {
            protector: f[0].into(),
            strength: num(1)?,
            cmc_r1: num(2)?,
            id_r: num(3)?,
            auroc: num(4)?,
            dice: num(5)?,
            bpp_total: num(6)?,
            bpp_id: num(7)?,
            bpp_sem: num(8)?,
        });
    }
    Ok(points)
}
