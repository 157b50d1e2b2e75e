//! Run configuration: a flat `key = value` file (TOML syntax). Unknown keys
//! are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model, objective and optimiser settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub seed: u64,
    /// Number of generator stages (m).
    pub stages: usize,
    /// Side of the first stage's image; each later stage doubles it.
    pub base_resolution: usize,
    /// Word / image feature dimension (D).
    pub feature_dim: usize,
    /// Sentence dimension (D_s).
    pub sentence_dim: usize,
    /// Caption length in tokens (T).
    pub words: usize,
    pub noise_dim: usize,
    pub gamma: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kl_weight: f64,
    pub matching_temperature: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_encoder: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Global gradient-norm clip for the discriminators.
    pub d_grad_clip: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Adaptive layout refinement term.
    pub alr: bool,
    /// Perception refinement term.
    pub pr: bool,
    /// Style refinement term.
    pub sr: bool,
    /// Reconstruction term.
    pub rec: bool,
    /// Learned easy/hard weights; when false the layout term is the plain
    /// Frobenius distance between the two similarity matrices.
    pub adaptive_weights: bool,
    /// Conditioning-augmentation KL term.
    pub kl: bool,
    /// Let the layout, refinement and reconstruction terms train the
    /// real-image encoder; when false only the matching loss does.
    pub encoder_layout_grad: bool,
    /// Stop gradients through the real-image layout masks, so the encoder
    /// is reached through the layout term alone. Only matters with
    /// `encoder_layout_grad`.
    pub detach_real_masks: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            seed: 1,
            stages: 3,
            base_resolution: 8,
            feature_dim: 16,
            sentence_dim: 16,
            words: 10,
            noise_dim: 16,
            gamma: crate::alr::DEFAULT_GAMMA,
            eta1: 1.0,
            eta2: 1.0,
            lambda1: 0.1,
            lambda2: 5.0,
            kl_weight: 1.0,
            matching_temperature: 0.1,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            lr_encoder: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            d_grad_clip: 5.0,
            batch_size: 2,
            steps: 5000,
            alr: true,
            pr: true,
            sr: true,
            rec: true,
            adaptive_weights: true,
            kl: true,
            encoder_layout_grad: false,
            detach_real_masks: true,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stages == 0 {
            return bad("stages must be >= 1".into());
        }
        if self.base_resolution < 4 || !self.base_resolution.is_power_of_two() {
            return bad(format!("base_resolution must be a power of two >= 4, got {}", self.base_resolution));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("sentence_dim", self.sentence_dim),
            ("noise_dim", self.noise_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.words < 1 + crate::data::TOKENS_PER_OBJECT {
            return bad(format!("words must be at least 4 to describe one object, got {}", self.words));
        }
        if self.feature_dim < self.words {
            return bad(format!(
                "feature_dim ({}) must be at least words ({}) for the layout weight networks",
                self.feature_dim, self.words
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2 for the matching loss, got {}", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        for (name, v) in [
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("kl_weight", self.kl_weight),
            ("d_grad_clip", self.d_grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_encoder", self.lr_encoder),
            ("matching_temperature", self.matching_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        Ok(())
    }

    /// Side of stage `i`'s image.
    pub fn side(&self, stage: usize) -> usize {
        self.base_resolution << stage
    }

    /// Most objects a caption of `words` tokens can describe.
    pub fn max_objects(&self) -> usize {
        ((self.words - 1) / crate::data::TOKENS_PER_OBJECT).min(crate::data::MAX_OBJECTS)
    }

    /// Fields that fix parameter shapes; checkpoints record their hash.
    pub fn architecture_key(&self) -> String {
        format!(
            "stages={} base={} d={} ds={} t={} z={} vocab={}",
            self.stages,
            self.base_resolution,
            self.feature_dim,
            self.sentence_dim,
            self.words,
            self.noise_dim,
            crate::data::vocab::SIZE
        )
    }
}

/// Everything a CLI run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub gan: GanConfig,
    /// Number of distinct training scenes.
    pub dataset_size: usize,
    /// Held-out scenes used for metrics.
    pub eval_size: usize,
    /// Steps between metric rows; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gan: GanConfig::default(),
            dataset_size: 512,
            eval_size: 100,
            eval_every: 500,
            checkpoint_every: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "ALR_SEED";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let cfg: RunConfig = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known: BTreeSet<String> = cfg.to_table()?.keys().cloned().collect();
        if let Some(k) = table.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies [`SEED_ENV`] if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.gan.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(self)
    }

    fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        if self.dataset_size < self.gan.batch_size {
            return Err(Error::Config("dataset_size must be at least batch_size".into()));
        }
        if self.eval_size < crate::metrics::FEATURE_DIM + 1 {
            return Err(Error::Config(format!(
                "eval_size must be at least {} for toy-FID",
                crate::metrics::FEATURE_DIM + 1
            )));
        }
        Ok(())
    }
}
