use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{default_glyphs, Glyph, LetterSpec};
use crate::device::{DeviceModel, Intensity};
use crate::nn::{ExecMode, OptimizerKind, Quantization, RhoSharing};
use crate::{Error, Result};

/// Which techniques a run enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Regime {
    /// Ideal-mode training; evaluated under noise.
    Baseline,
    /// Noisy forward passes during fine-tuning.
    A,
    /// `A` plus trainable `rho` under the energy penalty.
    AB,
    /// `A+B` executed with bit-plane decomposition.
    ABC,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Baseline, Regime::A, Regime::AB, Regime::ABC];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::A => "A",
            Regime::AB => "A+B",
            Regime::ABC => "A+B+C",
        }
    }

    /// Execution mode during fine-tuning.
    pub fn train_mode(self) -> ExecMode {
        match self {
            Regime::Baseline => ExecMode::Ideal,
            Regime::A | Regime::AB => ExecMode::NoisyOriginal,
            Regime::ABC => ExecMode::NoisyDecomposed,
        }
    }

    /// Execution mode on the noisy device at evaluation.
    pub fn eval_mode(self) -> ExecMode {
        match self {
            Regime::ABC => ExecMode::NoisyDecomposed,
            _ => ExecMode::NoisyOriginal,
        }
    }

    pub fn trains_rho(self) -> bool {
        matches!(self, Regime::AB | Regime::ABC)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Regime::Baseline),
            "a" => Ok(Regime::A),
            "a+b" | "ab" => Ok(Regime::AB),
            "a+b+c" | "abc" => Ok(Regime::ABC),
            _ => Err(Error::config(
                "regime",
                format!("unknown regime `{s}` (expected baseline|A|A+B|A+B+C)"),
            )),
        }
    }
}

impl TryFrom<String> for Regime {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Regime> for String {
    fn from(r: Regime) -> String {
        r.name().to_string()
    }
}

/// Where training and test images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Letters {
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_jitter")]
        jitter: f64,
        #[serde(default = "default_slant")]
        slant: f64,
        /// Replaces the built-in glyphs; one string per row, `#` for ink.
        #[serde(default)]
        glyphs: Option<Vec<Vec<String>>>,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_train_per_class() -> usize {
    1000
}
fn default_test_per_class() -> usize {
    250
}
fn default_jitter() -> f64 {
    0.1
}
fn default_slant() -> f64 {
    0.3
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Letters {
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            jitter: default_jitter(),
            slant: default_slant(),
            glyphs: None,
            seed: 0,
        }
    }
}

impl DataSource {
    pub(crate) fn letter_spec(&self) -> Result<Option<LetterSpec>> {
        let DataSource::Letters {
            jitter, slant, glyphs, ..
        } = self
        else {
            return Ok(None);
        };
        let templates = match glyphs {
            None => default_glyphs(),
            Some(rows) => rows
                .iter()
                .map(|g| {
                    let rows: Vec<&str> = g.iter().map(String::as_str).collect();
                    Glyph::parse(&rows)
                })
                .collect::<Result<_>>()?,
        };
        Ok(Some(LetterSpec {
            templates,
            jitter: *jitter,
            slant: *slant,
        }))
    }
}

/// One experiment: regime, device, network, optimizer and evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub intensity: Intensity,
    /// Overrides the preset's fluctuation strength.
    pub kappa: Option<f64>,
    /// Full device model; replaces `intensity` and `kappa` when present.
    pub device: Option<DeviceModel>,
    pub peripheral_energy: f64,
    pub hidden: Vec<usize>,
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
    pub rho_sharing: RhoSharing,
    pub init_rho: f64,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    /// Learning-rate multiplier for `theta` in regimes that train it.
    pub theta_lr_scale: f64,
    /// Ideal-mode epochs shared by every regime.
    pub pretrain_epochs: usize,
    /// Regime-specific fine-tuning epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_reps: usize,
    pub seeds: Vec<u64>,
    /// Upper end of the `lambda` search used to meet an energy budget.
    pub budget_lambda_max: f64,
    pub data: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            regime: Regime::Baseline,
            intensity: Intensity::Strong,
            kappa: None,
            device: None,
            peripheral_energy: 0.0,
            hidden: vec![64],
            weight_bits: Some(8),
            act_bits: Some(8),
            rho_sharing: RhoSharing::PerLayer,
            init_rho: 1.0,
            lambda: 0.0,
            optimizer: OptimizerKind::adam(1e-3),
            theta_lr_scale: 1.0,
            pretrain_epochs: 10,
            epochs: 5,
            batch_size: 32,
            eval_reps: 32,
            seeds: (0..5).collect(),
            budget_lambda_max: 1.0,
            data: DataSource::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn device_model(&self) -> Result<DeviceModel> {
        let base = match &self.device {
            Some(d) => d.clone(),
            None => {
                let d = DeviceModel::preset(self.intensity);
                match self.kappa {
                    Some(k) => d.with_kappa(k)?,
                    None => d,
                }
            }
        };
        base.with_peripheral_energy(self.peripheral_energy)
    }

    pub fn quantization(&self) -> Quantization {
        Quantization {
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
        }
    }

    /// Checks ranges and regime gating.
    pub fn validate(&self) -> Result<()> {
        if self.regime == Regime::ABC && self.act_bits.is_none() {
            return Err(Error::config("act_bits", "regime A+B+C needs activation quantization"));
        }
        if let Some(b) = self.act_bits {
            if !(1..=24).contains(&b) {
                return Err(Error::config("act_bits", format!("{b} not in 1..=24")));
            }
        }
        if let Some(b) = self.weight_bits {
            if !(2..=32).contains(&b) {
                return Err(Error::config("weight_bits", format!("{b} not in 2..=32")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be a finite value >= 0"));
        }
        if !self.regime.trains_rho() && self.lambda != 0.0 {
            return Err(Error::config(
                "lambda",
                format!("regime {} does not train rho; lambda must be 0", self.regime),
            ));
        }
        if !(self.init_rho.is_finite() && self.init_rho > 0.0) {
            return Err(Error::config("init_rho", "must be > 0"));
        }
        if !(self.theta_lr_scale.is_finite() && self.theta_lr_scale >= 0.0) {
            return Err(Error::config("theta_lr_scale", "must be a finite value >= 0"));
        }
        if self.optimizer.lr().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::config("optimizer", "learning rate must be > 0"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.eval_reps == 0 {
            return Err(Error::config("eval_reps", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if !(self.budget_lambda_max.is_finite() && self.budget_lambda_max > 0.0) {
            return Err(Error::config("budget_lambda_max", "must be > 0"));
        }
        if let DataSource::Letters {
            train_per_class,
            test_per_class,
            jitter,
            ..
        } = &self.data
        {
            if *train_per_class == 0 || *test_per_class == 0 {
                return Err(Error::config("data", "letter counts must be >= 1"));
            }
            if !(0.0..0.5).contains(jitter) {
                return Err(Error::config("jitter", format!("{jitter} not in [0, 0.5)")));
            }
        }
        self.device_model()?;
        Ok(())
    }
}
