//! Posterior sampling and checks for a trained [`PosteriorModel`].
//!
//! Besides plain sampling this covers corner-plot histograms, the density at
//! a known ground truth, simulation-based calibration ranks with a
//! Kolmogorov–Smirnov uniformity test, and posterior predictive checks on
//! fixed summary statistics.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::abm::{sample_prior, simulate, GraphTrace, ModelParams, PriorBox, SimConfig, SimRng, PARAM_NAMES};
use crate::embedder::embed_trace;
use crate::error::{Error, Result};
use crate::flow::{maf_log_prob_strict, maf_sample, to_model_params};
pub use crate::model::{ArchConfig, Fingerprint, PosteriorModel};

pub const DEFAULT_BINS: usize = 30;

/// Anything that can produce approximate posterior draws for an observation.
pub trait PosteriorSampler {
    fn sample_posterior(&self, obs: &GraphTrace, n: usize, rng: &mut SimRng) -> Result<Vec<ModelParams>>;
}

impl PosteriorSampler for PosteriorModel {
    fn sample_posterior(&self, obs: &GraphTrace, n: usize, rng: &mut SimRng) -> Result<Vec<ModelParams>> {
        Ok(posterior_sample(self, obs, n, rng)?.thetas)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub thetas: Vec<ModelParams>,
    pub log_probs: Vec<f64>,
}

/// `n` draws from `q(θ | obs)`; the observation is embedded once.
pub fn posterior_sample(model: &PosteriorModel, obs: &GraphTrace, n: usize, rng: &mut impl Rng) -> Result<PosteriorDraws> {
    model.check_observation(obs)?;
    if n == 0 {
        return Ok(PosteriorDraws {
            thetas: Vec::new(),
            log_probs: Vec::new(),
        });
    }
    let context = embed_trace(&model.embedder, obs)?;
    let samples = maf_sample(&model.flow, &model.bx, &context, rng, n)?;
    Ok(PosteriorDraws {
        thetas: samples.iter().map(|s| to_model_params(&s.theta)).collect(),
        log_probs: samples.iter().map(|s| s.log_prob).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairHistogram {
    pub x: usize,
    pub y: usize,
    /// `counts[i][j]`: bin `i` of dimension `x`, bin `j` of dimension `y`.
    pub counts: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerData {
    pub n_samples: usize,
    pub bins: usize,
    pub marginals: Vec<Marginal>,
    pub pairs: Vec<PairHistogram>,
    pub truth: Option<[f64; 4]>,
}

fn bin_of(x: f64, lower: f64, upper: f64, bins: usize) -> usize {
    let f = (x - lower) / (upper - lower);
    ((f * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// 1-D and 2-D histograms over the prior box ranges.
pub fn corner_data(samples: &[ModelParams], bins: usize, truth: Option<ModelParams>, prior: &PriorBox) -> Result<CornerData> {
    if samples.is_empty() || bins == 0 {
        return Err(Error::Usage("corner data needs samples and at least one bin".into()));
    }
    let arrays: Vec<[f64; 4]> = samples.iter().map(|s| s.to_array()).collect();
    let idx: Vec<[usize; 4]> = arrays
        .iter()
        .map(|a| std::array::from_fn(|d| bin_of(a[d], prior.lower[d], prior.upper[d], bins)))
        .collect();
    let marginals = (0..4)
        .map(|d| {
            let mut counts = vec![0u64; bins];
            for b in &idx {
                counts[b[d]] += 1;
            }
            Marginal {
                name: PARAM_NAMES[d].to_string(),
                lower: prior.lower[d],
                upper: prior.upper[d],
                counts,
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for x in 0..4 {
        for y in x + 1..4 {
            let mut counts = vec![vec![0u64; bins]; bins];
            for b in &idx {
                counts[b[x]][b[y]] += 1;
            }
            pairs.push(PairHistogram { x, y, counts });
        }
    }
    Ok(CornerData {
        n_samples: samples.len(),
        bins,
        marginals,
        pairs,
        truth: truth.map(ModelParams::to_array),
    })
}

/// Equal-tailed interval of one marginal at the given central mass.
pub fn central_interval(samples: &[ModelParams], dim: usize, level: f64) -> (f64, f64) {
    let mut v: Vec<f64> = samples.iter().map(|s| s.to_array()[dim]).collect();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    let tail = 0.5 * (1.0 - level);
    (q(tail), q(1.0 - tail))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthCheck {
    pub log_posterior: f64,
    pub log_prior: f64,
    /// Posterior density at the truth exceeds the prior density there.
    pub exceeds: bool,
}

pub fn truth_density_check(model: &PosteriorModel, obs: &GraphTrace, truth: &ModelParams) -> Result<TruthCheck> {
    model.check_observation(obs)?;
    let context = embed_trace(&model.embedder, obs)?;
    let log_posterior = maf_log_prob_strict(&model.flow, &model.bx, &truth.to_array(), &context)?;
    let log_prior = -(0..model.bx.dim())
        .map(|d| (model.bx.upper[d] - model.bx.lower[d]).ln())
        .sum::<f64>();
    Ok(TruthCheck {
        log_posterior,
        log_prior,
        exceeds: log_posterior > log_prior,
    })
}

/// One-sample Kolmogorov–Smirnov test against `U(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov tail with the Stephens small-sample correction.
fn kolmogorov_p(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn ks_uniform(values: &[f64]) -> KsTest {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let statistic = v.iter().enumerate().fold(0.0f64, |m, (i, &x)| {
        let lo = x - i as f64 / n;
        let hi = (i + 1) as f64 / n - x;
        m.max(lo).max(hi)
    });
    KsTest {
        statistic,
        p_value: kolmogorov_p(statistic, v.len()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbcResult {
    pub n_runs: usize,
    pub n_draws: usize,
    /// `ranks[run][d]` = number of posterior draws below the true value.
    pub ranks: Vec<[usize; 4]>,
    pub ks: [KsTest; 4],
}

impl SbcResult {
    pub fn min_p_value(&self) -> f64 {
        self.ks.iter().map(|k| k.p_value).fold(1.0, f64::min)
    }
}

/// Simulation-based calibration of an amortised sampler.
///
/// Discrete ranks are mapped to `(rank + U)/(L + 1)` with `U ~ U(0, 1)` so the
/// continuous KS test applies exactly under calibration.
pub fn sbc(
    sampler: &dyn PosteriorSampler,
    sim: &SimConfig,
    prior: &PriorBox,
    n_runs: usize,
    n_draws: usize,
    rng: &mut SimRng,
) -> Result<SbcResult> {
    if n_runs < 20 || n_draws < 20 {
        return Err(Error::Usage(format!(
            "SBC needs at least 20 runs and 20 draws, got {n_runs} and {n_draws}"
        )));
    }
    let mut ranks = Vec::with_capacity(n_runs);
    let mut pit: [Vec<f64>; 4] = Default::default();
    for _ in 0..n_runs {
        let truth = sample_prior(prior, rng);
        let obs = simulate(&truth, &sim.with_seed(rng.next_u64()))?;
        let draws = sampler.sample_posterior(&obs, n_draws, rng)?;
        let t = truth.to_array();
        let rank: [usize; 4] = std::array::from_fn(|d| draws.iter().filter(|s| s.to_array()[d] < t[d]).count());
        for d in 0..4 {
            pit[d].push((rank[d] as f64 + rng.gen::<f64>()) / (n_draws + 1) as f64);
        }
        ranks.push(rank);
    }
    Ok(SbcResult {
        n_runs,
        n_draws,
        ranks,
        ks: std::array::from_fn(|d| ks_uniform(&pit[d])),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summary {
    /// Mean of all opinion entries over every snapshot.
    MeanOpinion,
    /// Mean off-diagonal `|w|` over every snapshot.
    MeanAbsTie,
    /// Fraction of agent pairs whose majority opinions are opposite at the final step.
    FinalPolarization,
}

impl Summary {
    pub const DEFAULTS: [Summary; 3] = [Summary::MeanOpinion, Summary::MeanAbsTie, Summary::FinalPolarization];

    pub fn evaluate(self, trace: &GraphTrace) -> f64 {
        let n = trace.n_agents;
        let k = trace.n_topics;
        match self {
            Summary::MeanOpinion => trace.z.iter().map(|&v| f64::from(v)).sum::<f64>() / trace.z.len() as f64,
            Summary::MeanAbsTie => {
                let pairs = (n * (n - 1)) as f64 * trace.n_snapshots() as f64;
                trace.w.iter().map(|x| x.abs()).sum::<f64>() / pairs
            }
            Summary::FinalPolarization => {
                let z = trace.z_at(trace.n_steps);
                let majority: Vec<i32> = (0..n)
                    .map(|i| z[i * k..(i + 1) * k].iter().map(|&v| i32::from(v)).sum::<i32>().signum())
                    .collect();
                let mut opposite = 0usize;
                for i in 0..n {
                    for j in i + 1..n {
                        if majority[i] * majority[j] < 0 {
                            opposite += 1;
                        }
                    }
                }
                opposite as f64 / (n * (n - 1) / 2) as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpcSummary {
    pub summary: Summary,
    pub observed: f64,
    /// Simulated 5/25/50/75/95 % quantiles.
    pub simulated_quantiles: [f64; 5],
    /// Mid-rank position of the observed value among the simulated values, in `[0, 1]`.
    pub observed_quantile: f64,
}

impl PpcSummary {
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        (lo..=hi).contains(&self.observed_quantile)
    }
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let pos = p * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Predictive check from explicit `(θ, simulation seed)` draws.
pub fn ppc_from_draws(
    draws: &[(ModelParams, u64)],
    obs: &GraphTrace,
    sim: &SimConfig,
    summaries: &[Summary],
) -> Result<Vec<PpcSummary>> {
    if summaries.is_empty() || draws.is_empty() {
        return Err(Error::Usage("PPC needs at least one draw and one summary".into()));
    }
    let sims: Vec<GraphTrace> = draws
        .iter()
        .map(|(theta, seed)| simulate(theta, &sim.with_seed(*seed)))
        .collect::<Result<_>>()?;
    Ok(summaries
        .iter()
        .map(|&s| {
            let observed = s.evaluate(obs);
            let mut values: Vec<f64> = sims.iter().map(|t| s.evaluate(t)).collect();
            values.sort_by(f64::total_cmp);
            let below = values.iter().filter(|&&v| v < observed).count() as f64;
            let equal = values.iter().filter(|&&v| v == observed).count() as f64;
            PpcSummary {
                summary: s,
                observed,
                simulated_quantiles: [0.05, 0.25, 0.5, 0.75, 0.95].map(|p| quantile_sorted(&values, p)),
                observed_quantile: (below + 0.5 * equal) / values.len() as f64,
            }
        })
        .collect())
}

/// Re-simulates `n` posterior draws with fresh seeds and compares summaries.
pub fn ppc(
    sampler: &dyn PosteriorSampler,
    obs: &GraphTrace,
    sim: &SimConfig,
    n: usize,
    summaries: &[Summary],
    rng: &mut SimRng,
) -> Result<Vec<PpcSummary>> {
    let thetas = sampler.sample_posterior(obs, n, rng)?;
    let draws: Vec<(ModelParams, u64)> = thetas.into_iter().map(|t| (t, rng.next_u64())).collect();
    ppc_from_draws(&draws, obs, sim, summaries)
}
