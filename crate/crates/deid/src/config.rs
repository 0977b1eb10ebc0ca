//! Flat key=value experiment configuration with documented defaults,
//! command-line overrides, and ablation-flag validation.

use std::fmt::Write as _;
use std::path::Path;

use crate::baselines;
use crate::error::{DeidError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Diffusion,
    Decoder,
}

/// All tunables of a run. Every field has a default; unknown keys are
/// rejected at parse time.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    // Corpus.
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub lesion_rate: f64,
    // Codec.
    pub beta: f64,
    pub codec_hidden: usize,
    // Blocking strength used when protecting with the full method.
    pub rho: f64,
    pub rho_grid: Vec<f64>,
    // Baseline strength grids.
    pub blur_grid: Vec<f64>,
    pub feat_noise_grid: Vec<f64>,
    pub id_adv_grid: Vec<f64>,
    pub privacy_net_grid: Vec<f64>,
    pub mae_grid: Vec<f64>,
    // Training budgets.
    pub reid_steps: usize,
    pub mfm_steps: usize,
    pub deid_steps: usize,
    pub ae_steps: usize,
    pub adv_steps: usize,
    pub downstream_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub generator: GeneratorKind,
    // Ablations.
    pub no_sem: bool,
    pub no_decouple: bool,
    pub no_codelength_loss: bool,
    pub no_code_space: bool,
    pub no_id_blocking: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            // 200 patients split 8:1:1 leaves 20 validation patients, enough
            // for the 100-genuine-pair threshold calibration requirement.
            n_patients: 200,
            images_per_patient: 4,
            lesion_rate: 0.5,
            beta: 0.5,
            codec_hidden: 64,
            rho: 0.5,
            rho_grid: vec![0.2, 0.4, 0.7, 0.95],
            blur_grid: baselines::BLUR_GRID.to_vec(),
            feat_noise_grid: baselines::FEAT_NOISE_GRID.to_vec(),
            id_adv_grid: baselines::ID_ADV_GRID.to_vec(),
            privacy_net_grid: baselines::PRIVACY_NET_GRID.to_vec(),
            mae_grid: baselines::MAE_GRID.to_vec(),
            reid_steps: 5000,
            mfm_steps: 5000,
            deid_steps: 20000,
            ae_steps: 2000,
            adv_steps: 2000,
            downstream_steps: 1500,
            batch: 16,
            lr: 1e-4,
            generator: GeneratorKind::Diffusion,
            no_sem: false,
            no_decouple: false,
            no_codelength_loss: false,
            no_code_space: false,
            no_id_blocking: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DeidError::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_grid(key: &str, value: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = value
        .split(',')
        .map(|v| parse_num(key, v.trim()))
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(DeidError::Config(format!("key '{key}': empty grid")));
    }
    Ok(grid)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(DeidError::Config(format!("key '{key}': expected true/false, got '{value}'"))),
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "n_patients" => self.n_patients = parse_num(key, value)?,
            "images_per_patient" => self.images_per_patient = parse_num(key, value)?,
            "lesion_rate" => self.lesion_rate = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "codec_hidden" => self.codec_hidden = parse_num(key, value)?,
            "rho" => self.rho = parse_num(key, value)?,
            "rho_grid" => self.rho_grid = parse_grid(key, value)?,
            "blur_grid" => self.blur_grid = parse_grid(key, value)?,
            "feat_noise_grid" => self.feat_noise_grid = parse_grid(key, value)?,
            "id_adv_grid" => self.id_adv_grid = parse_grid(key, value)?,
            "privacy_net_grid" => self.privacy_net_grid = parse_grid(key, value)?,
            "mae_grid" => self.mae_grid = parse_grid(key, value)?,
            "reid_steps" => self.reid_steps = parse_num(key, value)?,
            "mfm_steps" => self.mfm_steps = parse_num(key, value)?,
            "deid_steps" => self.deid_steps = parse_num(key, value)?,
            "ae_steps" => self.ae_steps = parse_num(key, value)?,
            "adv_steps" => self.adv_steps = parse_num(key, value)?,
            "downstream_steps" => self.downstream_steps = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "generator" => {
                self.generator = match value {
                    "diffusion" => GeneratorKind::Diffusion,
                    "decoder" => GeneratorKind::Decoder,
                    _ => {
                        return Err(DeidError::Config(format!(
                            "key 'generator': expected diffusion or decoder, got '{value}'"
                        )))
                    }
                }
            }
            "no_sem" => self.no_sem = parse_bool(key, value)?,
            "no_decouple" => self.no_decouple = parse_bool(key, value)?,
            "no_codelength_loss" => self.no_codelength_loss = parse_bool(key, value)?,
            "no_code_space" => self.no_code_space = parse_bool(key, value)?,
            "no_id_blocking" => self.no_id_blocking = parse_bool(key, value)?,
            _ => return Err(DeidError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a flat `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let body = std::fs::read_to_string(path)?;
        for (lineno, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DeidError::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `--key=value` command-line overrides; other arguments error.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        for arg in args {
            let stripped = arg.strip_prefix("--").ok_or_else(|| {
                DeidError::Config(format!("expected --key=value override, got '{arg}'"))
            })?;
            let (key, value) = stripped.split_once('=').ok_or_else(|| {
                DeidError::Config(format!("override '{arg}' is missing '=value'"))
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Range checks plus rejection of meaningless ablation combinations.
    pub fn validate(&self) -> Result<()> {
        if self.no_code_space && self.no_codelength_loss {
            return Err(DeidError::Config(
                "no_code_space already removes the entropy term; combining it with \
                 no_codelength_loss is meaningless"
                    .into(),
            ));
        }
        if !(0.0..1.0).contains(&self.rho) || self.rho == 0.0 {
            if !self.no_id_blocking {
                return Err(DeidError::Config(format!("rho {} outside (0, 1)", self.rho)));
            }
        }
        if self.beta < 0.0 {
            return Err(DeidError::Config(format!("beta {} must be non-negative", self.beta)));
        }
        if self.n_patients < 12 || self.images_per_patient < 2 {
            return Err(DeidError::Config(
                "corpus needs at least 12 patients and 2 images per patient".into(),
            ));
        }
        if self.batch < 2 {
            return Err(DeidError::Config("batch must be at least 2".into()));
        }
        Ok(())
    }

    fn grid_str(grid: &[f64]) -> String {
        grid.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }

    /// The resolved configuration in the same flat format it is parsed from;
    /// written into every run directory.
    pub fn to_flat_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "n_patients = {}", self.n_patients).unwrap();
        writeln!(s, "images_per_patient = {}", self.images_per_patient).unwrap();
        writeln!(s, "lesion_rate = {}", self.lesion_rate).unwrap();
        writeln!(s, "beta = {}", self.beta).unwrap();
        writeln!(s, "codec_hidden = {}", self.codec_hidden).unwrap();
        writeln!(s, "rho = {}", self.rho).unwrap();
        writeln!(s, "rho_grid = {}", Self::grid_str(&self.rho_grid)).unwrap();
        writeln!(s, "blur_grid = {}", Self::grid_str(&self.blur_grid)).unwrap();
        writeln!(s, "feat_noise_grid = {}", Self::grid_str(&self.feat_noise_grid)).unwrap();
        writeln!(s, "id_adv_grid = {}", Self::grid_str(&self.id_adv_grid)).unwrap();
        writeln!(s, "privacy_net_grid = {}", Self::grid_str(&self.privacy_net_grid)).unwrap();
        writeln!(s, "mae_grid = {}", Self::grid_str(&self.mae_grid)).unwrap();
        writeln!(s, "reid_steps = {}", self.reid_steps).unwrap();
        writeln!(s, "mfm_steps = {}", self.mfm_steps).unwrap();
        writeln!(s, "deid_steps = {}", self.deid_steps).unwrap();
        writeln!(s, "ae_steps = {}", self.ae_steps).unwrap();
        writeln!(s, "adv_steps = {}", self.adv_steps).unwrap();
        writeln!(s, "downstream_steps = {}", self.downstream_steps).unwrap();
        writeln!(s, "batch = {}", self.batch).unwrap();
        writeln!(s, "lr = {}", self.lr).unwrap();
        let gen = match self.generator {
            GeneratorKind::Diffusion => "diffusion",
            GeneratorKind::Decoder => "decoder",
        };
        writeln!(s, "generator = {gen}").unwrap();
        writeln!(s, "no_sem = {}", self.no_sem).unwrap();
        writeln!(s, "no_decouple = {}", self.no_decouple).unwrap();
        writeln!(s, "no_codelength_loss = {}", self.no_codelength_loss).unwrap();
        writeln!(s, "no_code_space = {}", self.no_code_space).unwrap();
        writeln!(s, "no_id_blocking = {}", self.no_id_blocking).unwrap();
        s
    }
}
