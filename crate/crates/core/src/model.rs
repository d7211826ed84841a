use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::abm::{GraphTrace, PriorBox, SimConfig};
use crate::embedder::{EmbedderArch, EmbedderParams};
use crate::error::{Error, Result};
use crate::flow::{BoxTransform, FlowArch, FlowParams};

/// Network sizes shared by the embedder and the flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub cheb_order: usize,
    pub hidden: usize,
    pub readout: Vec<usize>,
    pub flow_blocks: usize,
    pub flow_hidden: usize,
    pub alpha_clamp: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            cheb_order: 3,
            hidden: 64,
            readout: vec![32, 16, 16],
            flow_blocks: 5,
            flow_hidden: 50,
            alpha_clamp: 7.0,
        }
    }
}

impl ArchConfig {
    pub fn embedder(&self, n_agents: usize, n_topics: usize) -> EmbedderArch {
        EmbedderArch {
            n_agents,
            n_topics,
            cheb_order: self.cheb_order,
            hidden: self.hidden,
            readout: self.readout.clone(),
        }
    }

    pub fn flow(&self) -> FlowArch {
        FlowArch {
            dim: 4,
            context_dim: self.readout.last().copied().unwrap_or(0),
            n_blocks: self.flow_blocks,
            hidden: self.flow_hidden,
            alpha_clamp: self.alpha_clamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embedder(2, 1).validate()?;
        self.flow().validate()
    }
}

/// Observation shape a model was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub n_agents: usize,
    pub n_topics: usize,
    pub n_steps: usize,
}

impl Fingerprint {
    pub fn of_config(c: &SimConfig) -> Self {
        Fingerprint {
            n_agents: c.n_agents,
            n_topics: c.n_topics,
            n_steps: c.n_steps,
        }
    }

    pub fn of_trace(t: &GraphTrace) -> Self {
        Fingerprint {
            n_agents: t.n_agents,
            n_topics: t.n_topics,
            n_steps: t.n_steps,
        }
    }
}

/// Trained embedder + flow + parameter box: an amortised posterior `q(θ | trace)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorModel {
    pub embedder: EmbedderParams,
    pub flow: FlowParams,
    pub bx: BoxTransform,
    pub fingerprint: Fingerprint,
}

impl PosteriorModel {
    pub fn init(arch: &ArchConfig, sim: &SimConfig, prior: &PriorBox, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let embedder = EmbedderParams::init(&arch.embedder(sim.n_agents, sim.n_topics), rng)?;
        let flow = FlowParams::init(&arch.flow(), rng)?;
        Ok(PosteriorModel {
            embedder,
            flow,
            bx: BoxTransform::from_prior(prior),
            fingerprint: Fingerprint::of_config(sim),
        })
    }

    /// All-zero weights: the flow is then the logit-normal pushforward of the base.
    pub fn zeros(arch: &ArchConfig, sim: &SimConfig, prior: &PriorBox) -> Result<Self> {
        arch.validate()?;
        Ok(PosteriorModel {
            embedder: EmbedderParams::zeros(&arch.embedder(sim.n_agents, sim.n_topics))?,
            flow: FlowParams::zeros(&arch.flow())?,
            bx: BoxTransform::from_prior(prior),
            fingerprint: Fingerprint::of_config(sim),
        })
    }

    pub fn arch(&self) -> ArchConfig {
        let e = self.embedder.arch();
        let f = self.flow.arch();
        ArchConfig {
            cheb_order: e.cheb_order,
            hidden: e.hidden,
            readout: e.readout.clone(),
            flow_blocks: f.n_blocks,
            flow_hidden: f.hidden,
            alpha_clamp: f.alpha_clamp,
        }
    }

    pub fn check_observation(&self, obs: &GraphTrace) -> Result<()> {
        let fp = Fingerprint::of_trace(obs);
        if fp != self.fingerprint {
            return Err(Error::Usage(format!(
                "observation has (N, K, T) = ({}, {}, {}) but the model was trained on ({}, {}, {})",
                fp.n_agents,
                fp.n_topics,
                fp.n_steps,
                self.fingerprint.n_agents,
                self.fingerprint.n_topics,
                self.fingerprint.n_steps
            )));
        }
        Ok(())
    }

    /// Rounds every weight to the nearest `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        let r = |x: f64| f64::from(x as f32);
        self.embedder.params_mut().map_in_place(r);
        self.flow.params_mut().map_in_place(r);
    }
}
