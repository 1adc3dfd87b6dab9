use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cartpole::CartPoleParams;
use crate::drl::LearnerConfig;
use crate::error::{Error, Result};
use crate::student::StudentOptions;
use crate::teacher::TeacherConfig;

pub const SEED_ENV: &str = "SEC_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Pretrained policy, frozen, no teacher.
    Pretrained,
    /// Keeps learning on the real plant, no teacher.
    UnsafeContinual,
    /// Keeps learning with the teacher and coordinator in the loop.
    Sec,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Pretrained, ModelKind::UnsafeContinual, ModelKind::Sec];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Pretrained => "pretrained",
            ModelKind::UnsafeContinual => "unsafe-continual",
            ModelKind::Sec => "sec",
        }
    }

    pub fn learns(self) -> bool {
        self != ModelKind::Pretrained
    }

    pub fn supervised(self) -> bool {
        self == ModelKind::Sec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignSource {
    /// The published cart-pole (P, F).
    Published,
    /// Solve the student LMIs at startup.
    Synthesize,
    /// Load `design.path`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub source: DesignSource,
    pub path: Option<PathBuf>,
    pub alpha: f64,
    pub beta_act: f64,
    pub maximize_volume: bool,
}

impl Default for DesignConfig {
    fn default() -> Self {
        let o = StudentOptions::default();
        DesignConfig {
            source: DesignSource::Published,
            path: None,
            alpha: o.alpha,
            beta_act: o.beta_act,
            maximize_volume: o.maximize_volume,
        }
    }
}

impl DesignConfig {
    pub fn options(&self) -> StudentOptions {
        StudentOptions {
            alpha: self.alpha,
            beta_act: self.beta_act,
            maximize_volume: self.maximize_volume,
            ..StudentOptions::default()
        }
    }
}

/// Training-time plant randomization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationConfig {
    /// Range of the cart friction coefficient, as factors of the nominal value.
    pub mu_cart_low: f64,
    pub mu_cart_high: f64,
    /// Per-step force disturbance drawn from U[−d, d] newtons.
    pub disturbance: f64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        RandomizationConfig { mu_cart_low: 0.5, mu_cart_high: 1.5, disturbance: 2.0 }
    }
}

/// The deployment plant with its out-of-distribution friction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealPlantConfig {
    pub mu_cart_factor: f64,
    pub disturbance: f64,
}

impl Default for RealPlantConfig {
    fn default() -> Self {
        RealPlantConfig { mu_cart_factor: 2.5, disturbance: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub pretrain: usize,
    pub pretrain_steps: usize,
    pub continual: usize,
    pub continual_steps: usize,
    /// Pretraining starts are drawn with sᵀPs uniform in [0.05, init_level].
    pub init_level: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { pretrain: 5, pretrain_steps: 500, continual: 1, continual_steps: 1500, init_level: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub seeds: usize,
    /// Continual episodes per seed on the reward curves.
    pub episodes: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { seeds: 5, episodes: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelKind,
    pub checkpoint: Option<PathBuf>,
    pub initial_conditions: Vec<[f64; 4]>,
    pub plant: CartPoleParams,
    pub randomization: RandomizationConfig,
    pub real_plant: RealPlantConfig,
    pub design: DesignConfig,
    pub teacher: TeacherConfig,
    pub learner: LearnerConfig,
    pub episodes: EpisodeConfig,
    pub compare: CompareConfig,
}

pub fn default_initial_conditions() -> Vec<[f64; 4]> {
    vec![[0.3, 0.0, -0.15, 0.0], [-0.2, 0.0, 0.1, 0.0], [0.15, 0.0, 0.0, 0.0]]
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            model: ModelKind::Sec,
            checkpoint: None,
            initial_conditions: default_initial_conditions(),
            plant: CartPoleParams::default(),
            randomization: RandomizationConfig::default(),
            real_plant: RealPlantConfig::default(),
            design: DesignConfig::default(),
            teacher: TeacherConfig::default(),
            learner: LearnerConfig::default(),
            episodes: EpisodeConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file and apply the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer: {e}")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.teacher.validate()?;
        self.learner.validate()?;
        self.design.options().validate()?;
        let r = &self.randomization;
        if !(r.mu_cart_low >= 0.0 && r.mu_cart_low <= r.mu_cart_high && r.mu_cart_high.is_finite()) {
            return Err(Error::Config("randomization: need 0 <= mu_cart_low <= mu_cart_high".into()));
        }
        if !(r.disturbance >= 0.0 && r.disturbance.is_finite()) {
            return Err(Error::Config("randomization.disturbance must be non-negative".into()));
        }
        let rp = &self.real_plant;
        if !(rp.mu_cart_factor >= 0.0 && rp.mu_cart_factor.is_finite() && rp.disturbance >= 0.0) {
            return Err(Error::Config("real_plant: factors must be non-negative".into()));
        }
        if self.episodes.pretrain_steps == 0 || self.episodes.continual_steps == 0 {
            return Err(Error::Config("episode step caps must be positive".into()));
        }
        if !(self.episodes.init_level > 0.05 && self.episodes.init_level < 1.0) {
            return Err(Error::Config("episodes.init_level must lie in (0.05, 1)".into()));
        }
        if self.initial_conditions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("initial conditions must be finite".into()));
        }
        if self.design.source == DesignSource::File && self.design.path.is_none() {
            return Err(Error::Config("design.source = \"file\" needs design.path".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML form. The
    /// output directory is not part of the experiment and is left out.
    pub fn hash(&self) -> Result<String> {
        let canonical = RunConfig { output_dir: PathBuf::new(), ..self.clone() };
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }

    /// Provenance embedded in every output file.
    pub fn provenance(&self) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        m.insert("config_hash".to_string(), self.hash()?);
        m.insert("seed".to_string(), self.seed.to_string());
        Ok(m)
    }

    pub fn initial_states(&self) -> Vec<DVector<f64>> {
        self.initial_conditions.iter().map(|s| DVector::from_column_slice(s)).collect()
    }

    /// The deployment plant.
    pub fn real_plant_params(&self) -> CartPoleParams {
        CartPoleParams { mu_cart: self.plant.mu_cart * self.real_plant.mu_cart_factor, ..self.plant.clone() }
    }
}
