//! Run configuration read from a flat TOML file:
//!
//! ```toml
//! [sim]
//! n_agents = 20
//! n_topics = 3
//! n_steps = 25
//!
//! [train]
//! n_sims = 1000
//! batch_size = 50
//!
//! [arch]
//! cheb_order = 3
//!
//! [prior]
//! rho = [0.0, 5.0]
//! ```
//!
//! Every section and key is optional; omitted values take the defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abm::{PriorBox, SimConfig, TieInit};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub n_agents: usize,
    pub n_topics: usize,
    pub n_steps: usize,
    pub tie_init: TieInit,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = SimConfig::default();
        SimSection {
            n_agents: d.n_agents,
            n_topics: d.n_topics,
            n_steps: d.n_steps,
            tie_init: d.tie_init,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub rho: [f64; 2],
    pub eps: [f64; 2],
    pub lam: [f64; 2],
    pub p: [f64; 2],
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            rho: [0.0, 5.0],
            eps: [0.0, 1.0],
            lam: [0.0, 1.0],
            p: [0.0, 1.0],
        }
    }
}

impl PriorSection {
    pub fn to_box(self) -> PriorBox {
        let dims = [self.rho, self.eps, self.lam, self.p];
        PriorBox {
            lower: dims.map(|d| d[0]),
            upper: dims.map(|d| d[1]),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimSection,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub prior: PriorSection,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim_config(0).validate()?;
        self.train.validate()?;
        self.arch.validate()?;
        self.prior_box().validate()
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            n_agents: self.sim.n_agents,
            n_topics: self.sim.n_topics,
            n_steps: self.sim.n_steps,
            seed,
            tie_init: self.sim.tie_init,
        }
    }

    pub fn prior_box(&self) -> PriorBox {
        self.prior.to_box()
    }

    /// SHA-256 over the simulator and prior settings, the inputs a corpus depends on.
    pub fn data_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            sim: &'a SimSection,
            prior: &'a PriorSection,
        }
        let bytes = serde_json::to_vec(&Hashed {
            sim: &self.sim,
            prior: &self.prior,
        })
        .expect("plain data serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 50);
        assert_eq!(cfg.arch.flow_blocks, 5);
        assert_eq!(cfg.prior_box(), PriorBox::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml_str(
            r#"
            [sim]
            n_agents = 10
            n_steps = 10
            tie_init = { kind = "constant", value = 0.5 }
            [train]
            n_sims = 500
            lr = 1e-3
            [arch]
            readout = [8, 4]
            [prior]
            rho = [0.0, 2.0]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.sim.n_agents, 10);
        assert_eq!(cfg.sim.tie_init, TieInit::Constant { value: 0.5 });
        assert_eq!(cfg.train.n_sims, 500);
        assert_eq!(cfg.arch.flow().context_dim, 4);
        assert_eq!(cfg.prior_box().upper[0], 2.0);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[sim]\nn_agents = 1").is_err());
        assert!(RunConfig::from_toml_str("[train]\nval_fraction = 1.5").is_err());
        assert!(RunConfig::from_toml_str("[prior]\neps = [0.5, 0.2]").is_err());
        assert!(RunConfig::from_toml_str("[sim]\nbogus = 3").is_err());
    }

    #[test]
    fn hash_tracks_data_settings_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.lr = 1e-2;
        assert_eq!(a.data_hash(), b.data_hash());
        b.sim.n_steps = 7;
        assert_ne!(a.data_hash(), b.data_hash());
    }
}
