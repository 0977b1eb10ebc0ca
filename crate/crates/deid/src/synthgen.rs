//! Procedural corpus of synthetic grayscale "patient" images in which the
//! identity-bearing structure (torso contour, rib-like stripes, background
//! texture) and the diagnostic semantics (a lesion disk with a disease grade)
//! are controlled by independent generative factors.
//!
//! Rendering is a pure function of (identity, semantics, noise seed), so the
//! stored factors act as a ground-truth oracle for decoupling experiments.

use serde::{Deserialize, Serialize};

use numcore::Rng;

use crate::error::{DeidError, Result};

pub const IMG_SIZE: usize = 64;
pub const N_DISEASE_CLASSES: usize = 4;

/// Grid resolution for identity parameters: 21 levels per parameter, i.e.
/// adjacent levels are separated by 5% of the parameter range. Two distinct
/// patients differ in at least one parameter by at least one level.
const ID_LEVELS: usize = 21;

const AX_RANGE: (f64, f64) = (14.0, 24.0);
const AY_RANGE: (f64, f64) = (18.0, 28.0);
const TILT_RANGE: (f64, f64) = (-0.3, 0.3);
const OFFSET_RANGE: (f64, f64) = (-6.0, 6.0);
const PERIOD_RANGE: (f64, f64) = (4.0, 9.0);
const PHASE_RANGE: (f64, f64) = (0.0, std::f64::consts::TAU);
const AMP_RANGE: (f64, f64) = (0.08, 0.25);

const LESION_RADIUS_RANGE: (f64, f64) = (3.0, 8.0);
const LESION_INTENSITY_RANGE: (f64, f64) = (0.25, 0.55);
pub const NOISE_SIGMA: f64 = 0.02;
const JITTER_MAX: i64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientIdentity {
    pub patient_id: usize,
    /// Torso ellipse: semi-axes, tilt (radians), vertical offset (pixels).
    pub contour_params: [f64; 4],
    /// Rib-like stripes: period (pixels), phase, amplitude.
    pub stripe_params: [f64; 3],
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticContent {
    pub lesion_present: bool,
    pub lesion_center: [f64; 2],
    pub lesion_radius: f64,
    pub lesion_intensity: f64,
    /// 0 = healthy; 1..=3 grade by lesion radius tercile.
    pub disease_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub sample_id: usize,
    /// 1 x H x W grayscale image in [0, 1], row-major.
    pub image: Vec<f64>,
    pub identity: PatientIdentity,
    pub semantics: SemanticContent,
    /// Binary H x W lesion mask; exactly the pixels within the lesion radius.
    pub lesion_mask: Vec<u8>,
    pub acquisition_noise_seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<SyntheticSample>,
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub train_patients: Vec<usize>,
    pub val_patients: Vec<usize>,
    pub test_patients: Vec<usize>,
}

impl Corpus {
    pub fn split_samples(&self, split: Split) -> Vec<&SyntheticSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Contiguous class index for train-set patients (classification head).
    pub fn train_class_of(&self, patient_id: usize) -> Option<usize> {
        self.train_patients.iter().position(|&p| p == patient_id)
    }
}

fn level_value(range: (f64, f64), level: usize) -> f64 {
    range.0 + (range.1 - range.0) * level as f64 / (ID_LEVELS - 1) as f64
}

fn sample_identity(patient_id: usize, levels: [usize; 7], texture_seed: u64) -> PatientIdentity {
    PatientIdentity {
        patient_id,
        contour_params: [
            level_value(AX_RANGE, levels[0]),
            level_value(AY_RANGE, levels[1]),
            level_value(TILT_RANGE, levels[2]),
            level_value(OFFSET_RANGE, levels[3]),
        ],
        stripe_params: [
            level_value(PERIOD_RANGE, levels[4]),
            level_value(PHASE_RANGE, levels[5]),
            level_value(AMP_RANGE, levels[6]),
        ],
        texture_seed,
    }
}

fn sample_semantics(lesion_rate: f64, rng: &mut Rng) -> SemanticContent {
    let present = rng.next_f64() < lesion_rate;
    if !present {
        return SemanticContent {
            lesion_present: false,
            lesion_center: [0.0, 0.0],
            lesion_radius: 0.0,
            lesion_intensity: 0.0,
            disease_class: 0,
        };
    }
    let radius = rng.uniform(LESION_RADIUS_RANGE.0, LESION_RADIUS_RANGE.1);
    let margin = radius + 2.0;
    let cx = rng.uniform(margin, IMG_SIZE as f64 - margin);
    let cy = rng.uniform(margin, IMG_SIZE as f64 - margin);
    let intensity = rng.uniform(LESION_INTENSITY_RANGE.0, LESION_INTENSITY_RANGE.1);
    let span = LESION_RADIUS_RANGE.1 - LESION_RADIUS_RANGE.0;
    let tercile = ((radius - LESION_RADIUS_RANGE.0) / span * 3.0).floor().min(2.0) as usize;
    SemanticContent {
        lesion_present: true,
        lesion_center: [cx, cy],
        lesion_radius: radius,
        lesion_intensity: intensity,
        disease_class: 1 + tercile,
    }
}

/// Exact lesion mask implied by the semantics (independent of pose jitter).
pub fn lesion_mask_of(semantics: &SemanticContent) -> Vec<u8> {
    let mut mask = vec![0u8; IMG_SIZE * IMG_SIZE];
    if !semantics.lesion_present {
        return mask;
    }
    let [cx, cy] = semantics.lesion_center;
    let r2 = semantics.lesion_radius * semantics.lesion_radius;
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r2 {
                mask[y * IMG_SIZE + x] = 1;
            }
        }
    }
    mask
}

fn validate_identity(id: &PatientIdentity) -> Result<()> {
    let checks = [
        (id.contour_params[0], AX_RANGE, "ellipse semi-axis x"),
        (id.contour_params[1], AY_RANGE, "ellipse semi-axis y"),
        (id.contour_params[2], TILT_RANGE, "tilt"),
        (id.contour_params[3], OFFSET_RANGE, "offset"),
        (id.stripe_params[0], PERIOD_RANGE, "stripe period"),
        (id.stripe_params[1], PHASE_RANGE, "stripe phase"),
        (id.stripe_params[2], AMP_RANGE, "stripe amplitude"),
    ];
    for (v, (lo, hi), name) in checks {
        if !(lo..=hi).contains(&v) {
            return Err(DeidError::InvalidParameter(format!("{name} = {v} outside [{lo}, {hi}]")));
        }
    }
    Ok(())
}

fn validate_semantics(sem: &SemanticContent) -> Result<()> {
    if sem.lesion_present {
        if sem.lesion_radius <= 0.0 {
            return Err(DeidError::InvalidParameter("lesion_radius must be positive".into()));
        }
        let [cx, cy] = sem.lesion_center;
        let r = sem.lesion_radius;
        if cx - r < 0.0 || cy - r < 0.0 || cx + r > IMG_SIZE as f64 || cy + r > IMG_SIZE as f64 {
            return Err(DeidError::InvalidParameter("lesion extends outside image bounds".into()));
        }
    }
    Ok(())
}

/// Render one sample. Pure in (identity, semantics, noise_seed); the image
/// composes background gradient + identity contour ring + identity stripes +
/// lesion disk + seeded Gaussian pixel noise, clamped to [0, 1].
pub fn render(
    identity: &PatientIdentity,
    semantics: &SemanticContent,
    noise_seed: u64,
) -> Result<SyntheticSample> {
    validate_identity(identity)?;
    validate_semantics(semantics)?;
    let mut noise_rng = Rng::new(noise_seed);
    // Pose jitter in whole pixels, shared by all identity structure.
    let jx = noise_rng.gen_index((2 * JITTER_MAX + 1) as usize) as i64 - JITTER_MAX;
    let jy = noise_rng.gen_index((2 * JITTER_MAX + 1) as usize) as i64 - JITTER_MAX;

    let [ax, ay, tilt, offset] = identity.contour_params;
    let [period, phase, amplitude] = identity.stripe_params;
    let mut tex_rng = Rng::new(identity.texture_seed);
    let slope = 0.30 * (0.9 + 0.2 * tex_rng.next_f64());
    let base = 0.12;

    let cx = IMG_SIZE as f64 / 2.0 + jx as f64;
    let cy = IMG_SIZE as f64 / 2.0 + offset + jy as f64;
    let (sin_t, cos_t) = tilt.sin_cos();

    let mask = lesion_mask_of(semantics);
    let mut image = vec![0.0; IMG_SIZE * IMG_SIZE];
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let mut v = base + slope * y as f64 / IMG_SIZE as f64;
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = cos_t * dx + sin_t * dy;
            let w = -sin_t * dx + cos_t * dy;
            let re = ((u / ax) * (u / ax) + (w / ay) * (w / ay)).sqrt();
            // Soft contour ring at the ellipse boundary.
            let ring = (re - 1.0) / 0.08;
            v += 0.35 * (-ring * ring).exp();
            // Stripes fill the torso interior.
            if re < 1.0 {
                v += amplitude * 0.5 * (1.0 + (std::f64::consts::TAU * w / period + phase).sin());
            }
            if mask[y * IMG_SIZE + x] == 1 {
                v += semantics.lesion_intensity;
            }
            v += NOISE_SIGMA * noise_rng.normal();
            image[y * IMG_SIZE + x] = v.clamp(0.0, 1.0);
        }
    }
    Ok(SyntheticSample {
        sample_id: 0,
        image,
        identity: identity.clone(),
        semantics: semantics.clone(),
        lesion_mask: mask,
        acquisition_noise_seed: noise_seed,
        split: Split::Train,
    })
}

/// The exact generative factors of a sample. Test-suite oracle only; trained
/// models never see these.
pub fn oracle_probe_features(sample: &SyntheticSample) -> (&PatientIdentity, &SemanticContent) {
    (&sample.identity, &sample.semantics)
}

/// Generate a corpus with disjoint train/val/test patient partitions at an
/// 8:1:1 ratio by patient. Per-image acquisition noise, pose jitter, and
/// lesion content vary within a patient; identity factors do not.
pub fn generate_corpus(
    n_patients: usize,
    images_per_patient: usize,
    lesion_rate: f64,
    rng: &Rng,
) -> Result<Corpus> {
    if n_patients < 2 {
        return Err(DeidError::InvalidParameter("need at least 2 patients".into()));
    }
    if images_per_patient < 2 {
        return Err(DeidError::InvalidParameter(
            "need at least 2 images per patient (ReID positive pairs)".into(),
        ));
    }
    if !(0.0..=1.0).contains(&lesion_rate) {
        return Err(DeidError::InvalidParameter(format!(
            "lesion_rate {lesion_rate} outside [0, 1]"
        )));
    }

    let mut id_rng = rng.derive(1);
    let mut sem_rng = rng.derive(2);
    let mut split_rng = rng.derive(3);
    let mut noise_rng = rng.derive(4);

    // Distinct grid tuples guarantee the documented minimum separation.
    let mut seen = std::collections::HashSet::new();
    let mut identities = Vec::with_capacity(n_patients);
    for pid in 0..n_patients {
        let levels = loop {
            let cand: [usize; 7] = std::array::from_fn(|_| id_rng.gen_index(ID_LEVELS));
            if seen.insert(cand) {
                break cand;
            }
        };
        identities.push(sample_identity(pid, levels, id_rng.next_u64()));
    }

    // Patient-level split, 8:1:1.
    let mut order: Vec<usize> = (0..n_patients).collect();
    split_rng.shuffle(&mut order);
    let n_test = (n_patients / 10).max(1);
    let n_val = (n_patients / 10).max(1);
    let test_patients: Vec<usize> = order[..n_test].to_vec();
    let val_patients: Vec<usize> = order[n_test..n_test + n_val].to_vec();
    let train_patients: Vec<usize> = order[n_test + n_val..].to_vec();
    let split_of = |pid: usize| {
        if test_patients.contains(&pid) {
            Split::Test
        } else if val_patients.contains(&pid) {
            Split::Val
        } else {
            Split::Train
        }
    };

    let mut samples = Vec::with_capacity(n_patients * images_per_patient);
    for identity in &identities {
        for _ in 0..images_per_patient {
            let semantics = sample_semantics(lesion_rate, &mut sem_rng);
            let noise_seed = noise_rng.next_u64();
            let mut sample = render(identity, &semantics, noise_seed)?;
            sample.sample_id = samples.len();
            sample.split = split_of(identity.patient_id);
            samples.push(sample);
        }
    }
    let mut train_patients = train_patients;
    let mut val_patients = val_patients;
    let mut test_patients = test_patients;
    train_patients.sort_unstable();
    val_patients.sort_unstable();
    test_patients.sort_unstable();
    Ok(Corpus {
        samples,
        n_patients,
        images_per_patient,
        train_patients,
        val_patients,
        test_patients,
    })
}
