//! Configuration types shared by the trainer, the distribution module and
//! the CLI. JSON configs deserialize into these structs with unknown keys
//! rejected so typos fail fast.

use serde::{Deserialize, Serialize};

use crate::error::{AmcnError, Result};

/// Direction of the pseudo-OOD filter comparison.
///
/// `Literal` follows the published rule as written (a score above the
/// class threshold marks the sample pseudo-OOD). `Flipped` reverses the
/// comparison so that a high class score indicates class membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    #[default]
    Literal,
    Flipped,
}

impl std::str::FromStr for Polarity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "literal" => Ok(Polarity::Literal),
            "flipped" => Ok(Polarity::Flipped),
            other => Err(format!("unknown polarity {other:?}")),
        }
    }
}

/// Every scalar knob of the training objective and the distribution module.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Similarity temperature.
    pub sigma: f64,
    /// Additive constant in the distribution-score denominator.
    pub tau0: f64,
    /// ID weight in the classification contrast.
    pub tau1: f64,
    /// Family weight in the OOD alignment loss.
    pub tau2: f64,
    /// OOD weight in the OOD contrastive loss.
    pub tau3: f64,
    /// Mean/std balance in the class-wise P-score threshold.
    pub lambda: f64,
    /// Intra-class hinge margins.
    pub eps1: f64,
    pub eps2: f64,
    /// Inter-class hinge margins.
    pub eps3: f64,
    pub eps4: f64,
    /// Loss weights for separation, alignment and OOD contrast.
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// ID prompts per class.
    pub p: usize,
    /// Label-fixed / label-adaptive OOD prompt counts.
    pub s: usize,
    pub z: usize,
    /// Prefix token counts.
    pub n_ip: usize,
    pub n_lfop: usize,
    pub n_laop: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            tau0: 1.0,
            tau1: 0.8,
            tau2: 0.5,
            tau3: 0.8,
            lambda: 0.5,
            eps1: 0.9,
            eps2: 0.1,
            eps3: 0.9,
            eps4: 0.1,
            alpha1: 0.4,
            alpha2: 0.2,
            alpha3: 0.8,
            p: 1,
            s: 50,
            z: 50,
            n_ip: 16,
            n_lfop: 16,
            n_laop: 16,
        }
    }
}

impl HyperParams {
    /// Scale the unvalued hinge margins to a batch/class geometry:
    /// eps1 = 0.9 B/C, eps2 = 0.1 B/C, eps3 = 0.9, eps4 = 0.1 C.
    pub fn with_hinge_defaults(mut self, batch_size: usize, num_classes: usize) -> Self {
        let ratio = batch_size as f64 / num_classes as f64;
        self.eps1 = 0.9 * ratio;
        self.eps2 = 0.1 * ratio;
        self.eps3 = 0.9;
        self.eps4 = 0.1 * num_classes as f64;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(AmcnError::NonPositiveTemperature(self.sigma));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(AmcnError::InvalidConfig(format!("{name} = {v} not in [0, 1]")))
            }
        };
        unit("tau1", self.tau1)?;
        unit("tau2", self.tau2)?;
        unit("tau3", self.tau3)?;
        unit("lambda", self.lambda)?;
        for (name, v) in [
            ("tau0", self.tau0),
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("eps3", self.eps3),
            ("eps4", self.eps4),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(AmcnError::InvalidConfig(format!("{name} = {v} must be >= 0")));
            }
        }
        for (name, v) in [
            ("p", self.p),
            ("s", self.s),
            ("z", self.z),
            ("n_ip", self.n_ip),
            ("n_lfop", self.n_lfop),
            ("n_laop", self.n_laop),
        ] {
            if v == 0 {
                return Err(AmcnError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Full training-run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Labeled ID shots selected per class.
    pub shots: usize,
    #[serde(default)]
    pub hp: HyperParams,
    #[serde(default)]
    pub polarity: Polarity,
    /// Checkpoint every N epochs; 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Optimizer settings.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Token embedding width; defaults to the data dimension.
    #[serde(default)]
    pub d_tok: Option<usize>,
    /// ID prefix tokens private to each class instead of shared.
    #[serde(default)]
    pub per_class_prefixes: bool,
    /// Names for the label tokens; auto-generated when absent.
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub ood_names: Option<Vec<String>>,
}

fn default_lr() -> f64 {
    0.003
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.batch_size == 0 {
            return Err(AmcnError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.shots < 2 {
            return Err(AmcnError::InvalidConfig(
                "shots must be >= 2 for class statistics".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(AmcnError::InvalidConfig(format!("lr = {} must be > 0", self.lr)));
        }
        Ok(())
    }
}

/// Synthetic hypersphere benchmark generator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub num_id_classes: usize,
    pub num_ood_clusters: usize,
    pub samples_per_class: usize,
    pub noise_low: f64,
    pub noise_high: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(AmcnError::InvalidConfig("dim must be >= 2".into()));
        }
        if self.num_id_classes < 2 {
            return Err(AmcnError::InvalidConfig("num_id_classes must be >= 2".into()));
        }
        if self.noise_low < 0.0 || self.noise_high < self.noise_low {
            return Err(AmcnError::InvalidConfig(
                "need 0 <= noise_low <= noise_high".into(),
            ));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON serialization; the run-report's
/// configuration fingerprint.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
