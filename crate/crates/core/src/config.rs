//! Model and training configuration in sectioned TOML form.
//!
//! Every section is optional and falls back to defaults; unknown sections and keys are
//! rejected with the offending section and key named.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cpkan::CpkanConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Modality};
use crate::head::HeadConfig;
use crate::mkcl::MkclConfig;
use crate::msgraph::MsGraphConfig;
use crate::optim::AdamConfig;

/// Environment variable that replaces `[train] seed`.
pub const SEED_ENV: &str = "HGMAMBA_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Sequence padding length; 0 uses the longest sequence in the training data.
    pub max_len: usize,
    /// Modalities used when the command line does not choose.
    pub modalities: Vec<Modality>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            max_len: 0,
            modalities: Modality::ALL.to_vec(),
        }
    }
}

/// Expression encoder widths; the input width comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpkanSection {
    pub hidden: Vec<usize>,
    pub d_exp: usize,
    pub degree: usize,
    pub scale_base: f64,
    pub scale_cheby: f64,
}

impl Default for CpkanSection {
    fn default() -> Self {
        let c = CpkanConfig::new(1, 64);
        Self {
            hidden: c.widths[1..c.widths.len() - 1].to_vec(),
            d_exp: c.output_dim(),
            degree: c.degree,
            scale_base: c.scale_base,
            scale_cheby: c.scale_cheby,
        }
    }
}

impl CpkanSection {
    pub fn to_config(&self, input: usize) -> CpkanConfig {
        let mut widths = vec![input];
        widths.extend(&self.hidden);
        widths.push(self.d_exp);
        CpkanConfig {
            widths,
            degree: self.degree,
            scale_base: self.scale_base,
            scale_cheby: self.scale_cheby,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 100,
            batch_size: 32,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            seed: 0,
            train_fraction: 0.7,
            val_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, msg: &str| Err(Error::config("train", key, msg));
        if self.epochs == 0 {
            return err("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return err("lr", "must be finite and non-negative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return err("weight_decay", "must be finite and non-negative");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return err("train_fraction", "must lie in (0, 1)");
        }
        if !(self.val_fraction >= 0.0 && self.train_fraction + self.val_fraction < 1.0) {
            return err("val_fraction", "train and validation fractions must leave room for a test split");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub data: DataConfig,
    pub cpkan: CpkanSection,
    pub msgraph: MsGraphConfig,
    pub mkcl: MkclConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| locate_error(text, &e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Checkpoint(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.modalities.len() < 2 {
            return Err(Error::config("data", "modalities", "fusion needs at least two modalities"));
        }
        let mut sorted = self.data.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.data.modalities.len() {
            return Err(Error::config("data", "modalities", "modalities repeated"));
        }
        if self.cpkan.d_exp == 0 || self.cpkan.hidden.contains(&0) {
            return Err(Error::config("cpkan", "d_exp", "widths must be positive"));
        }
        self.cpkan.to_config(1).validate()?;
        self.msgraph.validate()?;
        self.mkcl.validate()?;
        self.fusion.validate()?;
        self.head.validate()?;
        self.train.validate()
    }

    /// Replaces the training seed with `HGMAMBA_SEED` when set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

/// Maps a deserialization error to the section and key at its source position.
fn locate_error(text: &str, err: &toml::de::Error) -> Error {
    let message = err.message().trim().to_string();
    let Some(span) = err.span() else {
        return Error::config("", "", message);
    };
    let start = span.start.min(text.len());
    let line_start = text[..start].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("").trim();
    let header = |l: &str| {
        let l = l.trim();
        (l.starts_with('[') && l.ends_with(']')).then(|| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
    };
    if let Some(section) = header(line) {
        return Error::config(&section, "", message);
    }
    let key = line.split('=').next().unwrap_or("").trim().trim_matches('"').to_string();
    let section = text[..line_start].lines().rev().find_map(header).unwrap_or_default();
    Error::config(&section, &key, message)
}
