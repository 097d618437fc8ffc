use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::TemplateMode;
use crate::error::{Error, Result};
use crate::losses::{ConplConfig, CplConfig, MiLossConfig, SckdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "SCKD", alias = "sckd")]
    Sckd,
    #[serde(rename = "ConPL", alias = "conpl")]
    ConPl,
    #[serde(rename = "CPL", alias = "cpl")]
    Cpl,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Sckd, Family::ConPl, Family::Cpl];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sckd => "SCKD",
            Family::ConPl => "ConPL",
            Family::Cpl => "CPL",
        }
    }

    /// Whether scaffold positions read learnable prompt vectors.
    pub fn uses_prompts(self) -> bool {
        self == Family::Cpl
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    /// Overrides the generated label.
    pub name: Option<String>,
    pub family: Family,
    pub mi_enabled: bool,
    pub freeze_lm_head: bool,
    pub template: TemplateMode,
    pub epochs: usize,
    /// Epochs of each replay / memory phase.
    pub replay_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mi: MiLossConfig,
    pub conpl: ConplConfig,
    pub cpl: CplConfig,
    pub sckd: SckdConfig,
    /// Stored samples per relation. ConPL always keeps one.
    pub memory_size: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            name: None,
            family: Family::Cpl,
            mi_enabled: false,
            freeze_lm_head: false,
            template: TemplateMode::Mask,
            epochs: 10,
            replay_epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            mi: MiLossConfig::default(),
            conpl: ConplConfig::default(),
            cpl: CplConfig::default(),
            sckd: SckdConfig::default(),
            memory_size: 1,
        }
    }
}

impl MethodConfig {
    pub fn new(family: Family, mi_enabled: bool) -> Self {
        MethodConfig { family, mi_enabled, ..MethodConfig::default() }
    }

    /// "SCKD", "SCKD+MI", with a suffix for the frozen-head ablation.
    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let mut s = self.family.name().to_string();
        if self.mi_enabled {
            s.push_str("+MI");
        }
        if self.freeze_lm_head {
            s.push_str(" (frozen LM head)");
        }
        s
    }

    /// The MI term to add, if any. A zero weight counts as disabled.
    pub fn active_mi(&self) -> Option<&MiLossConfig> {
        (self.mi_enabled && self.mi.weight != 0.0).then_some(&self.mi)
    }

    pub fn effective_memory_size(&self) -> usize {
        match self.family {
            Family::ConPl => 1,
            _ => self.memory_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs per task must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.memory_size == 0 {
            return Err(Error::config("memory size must be at least 1"));
        }
        self.mi.validate()?;
        match self.family {
            Family::Sckd => self.sckd.validate(),
            Family::ConPl => self.conpl.validate(),
            Family::Cpl => self.cpl.validate(),
        }
    }
}
