//! Scratch experiment for budget tuning; not part of the final suite.

use std::path::PathBuf;

use deid::config::ExperimentConfig;
use deid::evalharness::linear_probe_accuracy;
use deid::mdlcodec::{CodecConfig, CodecModel};
use deid::mfm::{MfmModel, FEAT_C, FEAT_HW};
use deid::pipeline::RunDir;
use deid::reid::ReidModel;
use deid::synthgen::{Corpus, Split, IMG_SIZE};
use numcore::{AdamW, AdamWConfig, Graph, Rng};

fn probe_report(label: &str, codec: &CodecModel, corpus: &Corpus, mfm: &MfmModel) {
    let train = corpus.split_samples(Split::Train);
    let mut by_patient: std::collections::BTreeMap<usize, Vec<&deid::synthgen::SyntheticSample>> =
        Default::default();
    for s in &train {
        by_patient.entry(s.identity.patient_id).or_default().push(s);
    }
    let n_classes = by_patient.len();
    let mut tr_sem = Vec::new();
    let mut tr_mfm = Vec::new();
    let mut tr_idy = Vec::new();
    let mut tr_dis = Vec::new();
    let mut te_sem = Vec::new();
    let mut te_mfm = Vec::new();
    let mut te_idy = Vec::new();
    let mut te_dis = Vec::new();
    let mut mask_frac = 0.0;
    let mut share_sum = 0.0;
    let mut bits_sum = 0.0;
    let mut n_imgs = 0.0;
    for (ci, (_pid, samples)) in by_patient.iter().enumerate() {
        for (j, s) in samples.iter().enumerate() {
            let f = mfm.extract(&s.image).unwrap();
            let grid = codec.analyze(&f).unwrap();
            let fsem = codec.reconstruct_semantics(&grid);
            let bits_total = codec.codelength_bits(&grid.q, None);
            let bits_id = codec.codelength_bits(&grid.q, Some(&grid.m));
            if bits_total > 0.0 {
                share_sum += bits_id / bits_total;
            }
            bits_sum += bits_total;
            mask_frac += grid.m.iter().map(|&v| v as f64).sum::<f64>() / grid.m.len() as f64;
            n_imgs += 1.0;
            let dis = s.semantics.disease_class;
            if j + 1 == samples.len() {
                te_sem.push(fsem);
                te_mfm.push(f);
                te_idy.push(ci);
                te_dis.push(dis);
            } else {
                tr_sem.push(fsem);
                tr_mfm.push(f);
                tr_idy.push(ci);
                tr_dis.push(dis);
            }
        }
    }
    println!(
        "[{label}] mask_frac={:.3} id_share={:.3} mean_bits={:.0}",
        mask_frac / n_imgs,
        share_sum / n_imgs,
        bits_sum / n_imgs
    );
    let mut prng = Rng::new(99);
    let id_sem =
        linear_probe_accuracy(&tr_sem, &tr_idy, &te_sem, &te_idy, n_classes, 300, &mut prng)
            .unwrap();
    let id_mfm =
        linear_probe_accuracy(&tr_mfm, &tr_idy, &te_mfm, &te_idy, n_classes, 300, &mut prng)
            .unwrap();
    let dis_sem =
        linear_probe_accuracy(&tr_sem, &tr_dis, &te_sem, &te_dis, 4, 300, &mut prng).unwrap();
    let dis_mfm =
        linear_probe_accuracy(&tr_mfm, &tr_dis, &te_mfm, &te_dis, 4, 300, &mut prng).unwrap();
    println!(
        "[{label}] identity probe: sem={id_sem:.3} mfm={id_mfm:.3} (chance {:.3}); disease probe: sem={dis_sem:.3} mfm={dis_mfm:.3}",
        1.0 / n_classes as f64
    );
}

struct DiagCfg {
    beta: f64,
    rate_all_div: f64,
    rate_id_div: f64,
    steps: usize,
    batch: usize,
    lr: f64,
    /// Multiplier on the identity-regression distortion term.
    id_w: f64,
    /// Fraction of training over which beta ramps 0 -> beta; 0 = no warmup.
    beta_warmup: f64,
    /// Z-score the attacker embedding target with train-set statistics.
    std_target: bool,
    /// Learning-rate multiplier for the identity head.
    idh_lr: f64,
}

impl Default for DiagCfg {
    fn default() -> Self {
        DiagCfg {
            beta: 0.5,
            rate_all_div: 64.0,
            rate_id_div: 2048.0,
            steps: 2000,
            batch: 8,
            lr: 1e-4,
            id_w: 1.0,
            beta_warmup: 0.0,
            std_target: false,
            idh_lr: 1.0,
        }
    }
}

fn train_codec_diag(
    label: &str,
    corpus: &Corpus,
    reid_a: &ReidModel,
    mfm: &MfmModel,
    dc: &DiagCfg,
    rng: &mut Rng,
) -> CodecModel {
    let train = corpus.split_samples(Split::Train);
    let (emb_mean, emb_sd) = if dc.std_target {
        let d = deid::reid::EMBED_DIM;
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        let mut embs = Vec::with_capacity(train.len());
        for s in &train {
            let (_f, e) = reid_a.extract(&s.image);
            for j in 0..d {
                mean[j] += e[j] / n;
            }
            embs.push(e);
        }
        let mut sd = vec![0.0; d];
        for e in &embs {
            for j in 0..d {
                sd[j] += (e[j] - mean[j]).powi(2) / n;
            }
        }
        for v in sd.iter_mut() {
            *v = v.sqrt().max(1e-8);
        }
        (mean, sd)
    } else {
        (vec![0.0; deid::reid::EMBED_DIM], vec![1.0; deid::reid::EMBED_DIM])
    };
    let mut codec = CodecModel::new(CodecConfig::default(), rng);
    let mut opt = AdamW::new(AdamWConfig {
        lr: dc.lr,
        total_steps: dc.steps as u64,
        ..Default::default()
    });
    codec.boost_entropy_lr(&mut opt);
    if dc.idh_lr != 1.0 {
        codec.boost_id_head_lr(&mut opt, dc.idh_lr);
    }
    let feat_len = FEAT_C * FEAT_HW * FEAT_HW;
    for step in 0..dc.steps {
        let progress = step as f64 / dc.steps as f64;
        let tau = 2.0 * 0.25f64.powf(progress);
        let beta = if dc.beta_warmup > 0.0 {
            dc.beta * (progress / dc.beta_warmup).min(1.0)
        } else {
            dc.beta
        };
        let b = dc.batch;
        let px = IMG_SIZE * IMG_SIZE;
        let mut pixels = Vec::with_capacity(b * px);
        for _ in 0..b {
            pixels.extend_from_slice(&train[rng.gen_index(train.len())].image);
        }
        let mut g = Graph::new();
        let x = g.input(pixels, &[b, 1, IMG_SIZE, IMG_SIZE]);
        let f_mfm = mfm.features(&mut g, x, true);
        let q = codec.encode_graph(&mut g, f_mfm, false);
        let recon = codec.decode_graph(&mut g, q, false);
        let dall = g.sub(recon, f_mfm);
        let dist_all = g.l2_norm(dall);
        let bits_all = codec.codelength_graph(&mut g, q, None, false);
        let logits = codec.mask_logits_graph(&mut g, q, false);
        let mask = codec.sample_mask_graph(&mut g, logits, tau, rng);
        let f_id = reid_a.features(&mut g, x, true);
        let mut id_target = reid_a.embed(&mut g, f_id);
        if dc.std_target {
            let d = emb_mean.len();
            let neg_mean: Vec<f64> =
                (0..b).flat_map(|_| emb_mean.iter().map(|&m| -m)).collect();
            let inv_sd: Vec<f64> =
                (0..b).flat_map(|_| emb_sd.iter().map(|&s| 1.0 / s)).collect();
            let nm = g.input(neg_mean, &[b, d]);
            let is = g.input(inv_sd, &[b, d]);
            let centered = g.add(id_target, nm);
            id_target = g.mul(centered, is);
        }
        let q_id = g.mul(q, mask);
        let id_hat = codec.id_head_graph(&mut g, q_id, false);
        let did = g.sub(id_hat, id_target);
        let dist_id = g.l2_norm(did);
        let bits_id = codec.codelength_graph(&mut g, q, Some(mask), false);

        let r_all = g.scale(bits_all, beta / dc.rate_all_div);
        let r_id = g.scale(bits_id, beta / dc.rate_id_div);
        let wdist_id = g.scale(dist_id, dc.id_w);
        let mut loss = g.add(dist_all, r_all);
        loss = g.add(loss, wdist_id);
        loss = g.add(loss, r_id);
        g.backward(loss);
        opt.step(&g, &mut [&mut codec.store]);

        if step % 200 == 0 || step + 1 == dc.steps {
            let qd = g.data(q);
            let qm: f64 = qd.iter().sum::<f64>() / qd.len() as f64;
            let qstd =
                (qd.iter().map(|v| (v - qm) * (v - qm)).sum::<f64>() / qd.len() as f64).sqrt();
            let ld = g.data(logits);
            let lmean: f64 = ld.iter().sum::<f64>() / ld.len() as f64;
            let mfrac: f64 =
                g.data(mask).iter().sum::<f64>() / (b * feat_len) as f64;
            // Distortion of predicting the batch-mean embedding: the
            // "mask everything out" attractor's floor.
            let idt = g.data(id_target);
            let ed = idt.len() / b;
            let mut emean = vec![0.0; ed];
            for i in 0..b {
                for j in 0..ed {
                    emean[j] += idt[i * ed + j] / b as f64;
                }
            }
            let mut meanpred = 0.0;
            for i in 0..b {
                for j in 0..ed {
                    let d = idt[i * ed + j] - emean[j];
                    meanpred += d * d;
                }
            }
            println!(
                "[{label}] step {step:4} dist_all={:.3} bits={:.0} dist_id={:.3} (mean-pred floor {:.3}) bits_id={:.0} q_std={qstd:.3} logit_mean={lmean:.3} m_frac={mfrac:.3}",
                g.scalar(dist_all),
                g.scalar(bits_all),
                g.scalar(dist_id),
                meanpred.sqrt(),
                g.scalar(bits_id),
            );
        }
    }
    codec
}

#[test]
#[ignore]
fn scratch_embedding_geometry() {
    let cfg = ExperimentConfig {
        n_patients: 120,
        images_per_patient: 5,
        reid_steps: 1500,
        mfm_steps: 1500,
        deid_steps: 2000,
        batch: 8,
        ..Default::default()
    };
    let run = RunDir::new(&PathBuf::from("/root/crate/target/scratch_cache")).unwrap();
    run.init(&cfg).unwrap();
    let base = Rng::new(501);
    let corpus = run.ensure_corpus(&cfg, &base).unwrap();
    let reid_a = run.ensure_reid(&cfg, &corpus, deid::reid::Arch::ConvA, &base).unwrap();
    let train = corpus.split_samples(Split::Train);
    let mut by_patient: std::collections::BTreeMap<usize, Vec<Vec<f64>>> = Default::default();
    for s in &train {
        let (_f, emb) = reid_a.extract(&s.image);
        by_patient.entry(s.identity.patient_id).or_default().push(emb);
    }
    let all: Vec<&Vec<f64>> = by_patient.values().flatten().collect();
    let d = all[0].len();
    let n = all.len() as f64;
    let mut mean = vec![0.0; d];
    for e in &all {
        for j in 0..d {
            mean[j] += e[j] / n;
        }
    }
    let mut var = vec![0.0; d];
    for e in &all {
        for j in 0..d {
            var[j] += (e[j] - mean[j]).powi(2) / n;
        }
    }
    let norm: f64 = all.iter().map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / n;
    let tot_sd: f64 = var.iter().sum::<f64>().sqrt();
    // Within-patient spread.
    let mut within = 0.0;
    let mut wn = 0.0;
    for embs in by_patient.values() {
        let m = embs.len();
        let mut pm = vec![0.0; d];
        for e in embs {
            for j in 0..d {
                pm[j] += e[j] / m as f64;
            }
        }
        for e in embs {
            within += e
                .iter()
                .zip(&pm)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            wn += 1.0;
        }
    }
    let within_sd = (within / wn).sqrt();
    println!(
        "embed dim={d} mean_norm={norm:.3} total_sd={tot_sd:.3} within_sd={within_sd:.3} per_dim_sd_range=({:.4},{:.4})",
        var.iter().cloned().fold(f64::INFINITY, f64::min).sqrt(),
        var.iter().cloned().fold(0.0_f64, f64::max).sqrt()
    );
}

#[test]
#[ignore]
fn scratch_codec_dynamics() {
    let t0 = std::time::Instant::now();
    let cfg = ExperimentConfig {
        n_patients: 120,
        images_per_patient: 5,
        reid_steps: 1500,
        mfm_steps: 1500,
        deid_steps: 2000,
        batch: 8,
        ..Default::default()
    };
    let run = RunDir::new(&PathBuf::from("/root/crate/target/scratch_cache")).unwrap();
    run.init(&cfg).unwrap();
    let base = Rng::new(501);
    let corpus = run.ensure_corpus(&cfg, &base).unwrap();
    let reid_a = run.ensure_reid(&cfg, &corpus, deid::reid::Arch::ConvA, &base).unwrap();
    let mfm = run.ensure_mfm(&cfg, &corpus, &base).unwrap();
    println!("[{}s] attacker+mfm ready", t0.elapsed().as_secs());

    let mut rng = Rng::new(801);
    let dc_y = DiagCfg {
        std_target: true,
        rate_id_div: 32768.0,
        idh_lr: 10.0,
        id_w: 4.0,
        steps: 4000,
        ..Default::default()
    };
    let cy = train_codec_diag("Y idw4 4k", &corpus, &reid_a, &mfm, &dc_y, &mut rng);
    probe_report("Y idw4 4k", &cy, &corpus, &mfm);
    println!("[{}s] variant Y done", t0.elapsed().as_secs());

    let mut rng = Rng::new(802);
    let dc_z = DiagCfg {
        std_target: true,
        rate_id_div: 32768.0,
        idh_lr: 10.0,
        id_w: 8.0,
        steps: 4000,
        ..Default::default()
    };
    let cz = train_codec_diag("Z idw8 4k", &corpus, &reid_a, &mfm, &dc_z, &mut rng);
    probe_report("Z idw8 4k", &cz, &corpus, &mfm);
    println!("[{}s] variant Z done", t0.elapsed().as_secs());
}
