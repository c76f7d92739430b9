//! Named experiment configurations, `{model}-{1d|2d}-{raw|mu}`.

use serde::{Deserialize, Serialize};

use crate::adqc::AdqcModel;
use crate::dynamics::{MapFamily, System};
use crate::lstm::{LstmConfig, LstmModel};
use crate::model::{default_window, Model};
use crate::training::init_rng;
use crate::{Error, Result};

pub const PRESET_NAMES: [&str; 6] = [
    "adqc-1d-mu",
    "adqc-2d-mu",
    "lstm-1d-raw",
    "lstm-1d-mu",
    "lstm-2d-raw",
    "lstm-2d-mu",
];

/// Seeds of the five independent runs per configuration.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Adqc { d: usize, n_layers: usize },
    Lstm(LstmConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub system: System,
    pub mu_tuned: bool,
    pub window: usize,
    pub architecture: Architecture,
    pub seeds: Vec<u64>,
}

impl ExperimentPreset {
    pub fn named(name: &str) -> Result<Self> {
        let parts: Vec<&str> = name.split('-').collect();
        let [model, system, variant] = parts[..] else {
            return Err(Error::Domain(format!("unknown preset `{name}`")));
        };
        let system: System = system
            .parse()
            .map_err(|_| Error::Domain(format!("unknown preset `{name}`")))?;
        let mu_tuned = match variant {
            "mu" => true,
            "raw" => false,
            _ => return Err(Error::Domain(format!("unknown preset `{name}`"))),
        };
        let window = default_window(system);
        let family = MapFamily::for_system(system);
        let architecture = match (model, mu_tuned) {
            ("adqc", true) => Architecture::Adqc { d: 3, n_layers: 4 },
            ("lstm", _) => Architecture::Lstm(LstmConfig::preset(&family, window, mu_tuned)),
            _ => return Err(Error::Domain(format!("unknown preset `{name}`"))),
        };
        Ok(Self {
            name: name.to_string(),
            system,
            mu_tuned,
            window,
            architecture,
            seeds: DEFAULT_SEEDS.to_vec(),
        })
    }

    pub fn all() -> Vec<Self> {
        PRESET_NAMES
            .iter()
            .map(|n| Self::named(n).expect("built-in preset"))
            .collect()
    }

    pub fn family(&self) -> MapFamily {
        MapFamily::for_system(self.system)
    }

    /// Overrides the circuit depth; errors for LSTM presets.
    pub fn with_layers(mut self, n: usize) -> Result<Self> {
        match &mut self.architecture {
            Architecture::Adqc { n_layers, .. } => *n_layers = n,
            Architecture::Lstm(_) => {
                return Err(Error::Domain(
                    "the layer sweep applies to circuit presets".into(),
                ))
            }
        }
        Ok(self)
    }

    /// Overrides the LSTM hidden size; errors for circuit presets.
    pub fn with_hidden(mut self, h: usize) -> Result<Self> {
        match &mut self.architecture {
            Architecture::Lstm(cfg) => cfg.hidden = h,
            Architecture::Adqc { .. } => {
                return Err(Error::Domain(
                    "the hidden-size sweep applies to LSTM presets".into(),
                ))
            }
        }
        Ok(self)
    }

    /// A freshly initialized model for `seed`.
    pub fn build(&self, seed: u64) -> Result<Model> {
        let mut rng = init_rng(seed);
        Ok(match self.architecture {
            Architecture::Adqc { d, n_layers } => Model::Adqc(AdqcModel::init(
                self.family(),
                self.window,
                d,
                n_layers,
                &mut rng,
            )?),
            Architecture::Lstm(cfg) => {
                Model::Lstm(LstmModel::init(self.family(), self.window, cfg, &mut rng)?)
            }
        })
    }
}
