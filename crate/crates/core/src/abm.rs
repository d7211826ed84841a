//! Hopfield opinion/tie coevolution model.
//!
//! `N` agents hold binary opinions on `K` topics and are joined by signed,
//! symmetric ties in `[-1, 1]`. Each step every agent feels the tie-weighted
//! mean opinion of the others, adopts the positive opinion when a noisy
//! threshold on the sigmoid of that pressure is cleared, and then every tie
//! relaxes towards the pair's current agreement.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::sigmoid;

pub type SimRng = ChaCha8Rng;

/// Generator for task `stream` of a run seeded with `seed`. Distinct streams
/// are independent, so work can be fanned out in any order.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const PARAM_NAMES: [&str; 4] = ["rho", "eps", "lam", "p"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub rho: f64,
    pub eps: f64,
    pub lam: f64,
    pub p_init: f64,
}

impl ModelParams {
    pub fn new(rho: f64, eps: f64, lam: f64, p_init: f64) -> Self {
        ModelParams {
            rho,
            eps,
            lam,
            p_init,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.rho, self.eps, self.lam, self.p_init]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        ModelParams::new(a[0], a[1], a[2], a[3])
    }

    /// Checks the ranges the dynamics are defined on (ρ > 0, the rest in `[0, 1]`).
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho > 0.0
            && self.rho.is_finite()
            && (0.0..=1.0).contains(&self.eps)
            && (0.0..=1.0).contains(&self.lam)
            && (0.0..=1.0).contains(&self.p_init);
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("{self:?}")))
        }
    }
}

/// Product of independent uniform priors; also the support the flow maps onto.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub lower: [f64; 4],
    pub upper: [f64; 4],
}

impl Default for PriorBox {
    fn default() -> Self {
        PriorBox {
            lower: [0.0; 4],
            upper: [5.0, 1.0, 1.0, 1.0],
        }
    }
}

impl PriorBox {
    pub fn validate(&self) -> Result<()> {
        for d in 0..4 {
            let (a, b) = (self.lower[d], self.upper[d]);
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::Config(format!(
                    "prior bounds for {} must satisfy lower < upper, got ({a}, {b})",
                    PARAM_NAMES[d]
                )));
            }
        }
        if self.lower[0] < 0.0 || self.lower[1..].iter().any(|&a| a < 0.0) || self.upper[1..].iter().any(|&b| b > 1.0) {
            return Err(Error::Config(
                "prior box must lie inside the model's parameter ranges".into(),
            ));
        }
        Ok(())
    }

    pub fn contains_strict(&self, theta: &ModelParams) -> bool {
        let t = theta.to_array();
        (0..4).all(|d| t[d] > self.lower[d] && t[d] < self.upper[d])
    }

    pub fn log_density(&self) -> f64 {
        -(0..4).map(|d| (self.upper[d] - self.lower[d]).ln()).sum::<f64>()
    }

    pub fn center(&self) -> ModelParams {
        ModelParams::from_array(std::array::from_fn(|d| 0.5 * (self.lower[d] + self.upper[d])))
    }
}

/// Independent uniform draws over the open prior box.
pub fn sample_prior(prior: &PriorBox, rng: &mut impl Rng) -> ModelParams {
    ModelParams::from_array(std::array::from_fn(|d| {
        let (a, b) = (prior.lower[d], prior.upper[d]);
        loop {
            let x = rng.gen_range(a..b);
            if x > a {
                break x;
            }
        }
    }))
}

/// Distribution of the initial tie weights `w⁰`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TieInit {
    /// i.i.d. `U(low, high)` for each unordered pair.
    Uniform { low: f64, high: f64 },
    Constant { value: f64 },
}

impl Default for TieInit {
    fn default() -> Self {
        TieInit::Uniform {
            low: -1.0,
            high: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_agents: usize,
    pub n_topics: usize,
    pub n_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub tie_init: TieInit,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_agents: 20,
            n_topics: 3,
            n_steps: 25,
            seed: 0,
            tie_init: TieInit::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::Config(format!("n_agents must be ≥ 2, got {}", self.n_agents)));
        }
        if self.n_topics < 1 {
            return Err(Error::Config("n_topics must be ≥ 1".into()));
        }
        if self.n_steps < 1 {
            return Err(Error::Config("n_steps must be ≥ 1".into()));
        }
        let ok = match self.tie_init {
            TieInit::Uniform { low, high } => -1.0 <= low && low < high && high <= 1.0,
            TieInit::Constant { value } => (-1.0..=1.0).contains(&value),
        };
        if !ok {
            return Err(Error::Config(format!("tie_init {:?} must lie in [-1, 1]", self.tie_init)));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        SimConfig { seed, ..self }
    }
}

/// Complete microstate record: `T+1` snapshots including `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTrace {
    pub n_agents: usize,
    pub n_topics: usize,
    pub n_steps: usize,
    /// `(T+1) × N × K`, entries ±1.
    pub z: Vec<i8>,
    /// `(T+1) × N × N`, symmetric with zero diagonal.
    pub w: Vec<f64>,
}

impl GraphTrace {
    pub fn n_snapshots(&self) -> usize {
        self.n_steps + 1
    }

    pub fn z_at(&self, t: usize) -> &[i8] {
        let s = self.n_agents * self.n_topics;
        &self.z[t * s..(t + 1) * s]
    }

    pub fn w_at(&self, t: usize) -> &[f64] {
        let s = self.n_agents * self.n_agents;
        &self.w[t * s..(t + 1) * s]
    }

    pub fn fingerprint(&self) -> (usize, usize, usize) {
        (self.n_agents, self.n_topics, self.n_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k, s) = (self.n_agents, self.n_topics, self.n_snapshots());
        if self.z.len() != s * n * k || self.w.len() != s * n * n {
            return Err(Error::Validation("trace buffers do not match (N, K, T)".into()));
        }
        if let Some(i) = self.z.iter().position(|&v| v != 1 && v != -1) {
            return Err(Error::Validation(format!("opinion entry {i} is {}", self.z[i])));
        }
        for t in 0..s {
            validate_ties(self.w_at(t), n).map_err(|e| Error::Validation(format!("t={t}: {e}")))?;
        }
        Ok(())
    }
}

fn validate_ties(w: &[f64], n: usize) -> std::result::Result<(), String> {
    for i in 0..n {
        if w[i * n + i] != 0.0 {
            return Err(format!("nonzero diagonal at {i}"));
        }
        for j in 0..n {
            let x = w[i * n + j];
            if !(-1.0..=1.0).contains(&x) {
                return Err(format!("w[{i}][{j}] = {x} outside [-1, 1]"));
            }
            if x != w[j * n + i] {
                return Err(format!("asymmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// Initial opinions (`+1` with probability `p_init`) and symmetric ties.
pub fn init_state(params: &ModelParams, config: &SimConfig, rng: &mut impl Rng) -> (Vec<i8>, Vec<f64>) {
    let (n, k) = (config.n_agents, config.n_topics);
    let z = (0..n * k)
        .map(|_| if rng.gen::<f64>() < params.p_init { 1 } else { -1 })
        .collect();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let x = match config.tie_init {
                TieInit::Uniform { low, high } => rng.gen_range(low..high),
                TieInit::Constant { value } => value,
            };
            w[i * n + j] = x;
            w[j * n + i] = x;
        }
    }
    (z, w)
}

/// Tie-weighted mean neighbour opinion, `N × K` row-major.
pub fn social_pressure(z: &[i8], w: &[f64], n: usize, k: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Config(format!("social pressure needs N ≥ 2, got {n}")));
    }
    if z.len() != n * k || w.len() != n * n {
        return Err(Error::dim("social_pressure", format!("z {} / w {} for N={n}, K={k}", z.len(), w.len())));
    }
    let scale = 1.0 / (n - 1) as f64;
    let mut p = vec![0.0; n * k];
    for i in 0..n {
        let row = &mut p[i * k..(i + 1) * k];
        for j in (0..n).filter(|&j| j != i) {
            let wij = w[i * n + j];
            if wij == 0.0 {
                continue;
            }
            for (pk, &zj) in row.iter_mut().zip(&z[j * k..(j + 1) * k]) {
                *pk += wij * f64::from(zj);
            }
        }
        for pk in row {
            *pk *= scale;
        }
    }
    Ok(p)
}

/// Probability of leaning positive given the pressure.
pub fn propensity(pressure: &[f64], rho: f64) -> Vec<f64> {
    pressure.iter().map(|&x| sigmoid(rho * x)).collect()
}

/// Synchronous opinion update: one uniform draw per agent shared by its topics.
pub fn step_opinions(pi: &[f64], eps: f64, n: usize, k: usize, rng: &mut impl Rng) -> Vec<i8> {
    debug_assert_eq!(pi.len(), n * k);
    let mut z = Vec::with_capacity(n * k);
    for i in 0..n {
        let u = rng.gen::<f64>() - 0.5;
        let threshold = 0.5 + eps * u;
        z.extend(pi[i * k..(i + 1) * k].iter().map(|&p| if p > threshold { 1 } else { -1 }));
    }
    z
}

/// Ties relax towards the pair's mean agreement across topics.
pub fn step_ties(w: &[f64], z_next: &[i8], lam: f64, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let gain = lam / k as f64;
    for i in 0..n {
        let zi = &z_next[i * k..(i + 1) * k];
        for j in i + 1..n {
            let zj = &z_next[j * k..(j + 1) * k];
            let agree: i32 = zi.iter().zip(zj).map(|(&a, &b)| i32::from(a) * i32::from(b)).sum();
            let x = ((1.0 - lam) * w[i * n + j] + gain * f64::from(agree)).clamp(-1.0, 1.0);
            out[i * n + j] = x;
            out[j * n + i] = x;
        }
    }
    out
}

/// Runs the model for `config.n_steps` steps from a seed-derived stream.
pub fn simulate(params: &ModelParams, config: &SimConfig) -> Result<GraphTrace> {
    params.validate()?;
    config.validate()?;
    simulate_with_rng(params, config, &mut stream_rng(config.seed, 0))
}

fn simulate_with_rng(params: &ModelParams, config: &SimConfig, rng: &mut impl RngCore) -> Result<GraphTrace> {
    let (n, k, steps) = (config.n_agents, config.n_topics, config.n_steps);
    let (mut z, mut w) = init_state(params, config, rng);
    let mut zs = Vec::with_capacity((steps + 1) * n * k);
    let mut ws = Vec::with_capacity((steps + 1) * n * n);
    zs.extend_from_slice(&z);
    ws.extend_from_slice(&w);
    for _ in 0..steps {
        let pressure = social_pressure(&z, &w, n, k)?;
        let pi = propensity(&pressure, params.rho);
        z = step_opinions(&pi, params.eps, n, k, rng);
        w = step_ties(&w, &z, params.lam, n, k);
        zs.extend_from_slice(&z);
        ws.extend_from_slice(&w);
    }
    Ok(GraphTrace {
        n_agents: n,
        n_topics: k,
        n_steps: steps,
        z: zs,
        w: ws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, k: usize, t: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_agents: n,
            n_topics: k,
            n_steps: t,
            seed,
            tie_init: TieInit::default(),
        }
    }

    #[test]
    fn prior_mean_and_support() {
        let prior = PriorBox::default();
        let mut rng = stream_rng(11, 0);
        let draws: Vec<_> = (0..100_000).map(|_| sample_prior(&prior, &mut rng)).collect();
        let mean_rho = draws.iter().map(|d| d.rho).sum::<f64>() / draws.len() as f64;
        assert!((mean_rho - 2.5).abs() < 0.05, "{mean_rho}");
        assert!(draws.iter().all(|d| prior.contains_strict(d)));
    }

    #[test]
    fn prior_is_seed_deterministic() {
        let prior = PriorBox::default();
        let a: Vec<_> = (0..5).map({ let mut r = stream_rng(3, 1); move |_| sample_prior(&prior, &mut r) }).collect();
        let b: Vec<_> = (0..5).map({ let mut r = stream_rng(3, 1); move |_| sample_prior(&prior, &mut r) }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_initial_opinions() {
        let c = cfg(6, 4, 1, 0);
        let mut rng = stream_rng(0, 0);
        let (z, w) = init_state(&ModelParams::new(1.0, 0.5, 0.5, 1.0), &c, &mut rng);
        assert!(z.iter().all(|&v| v == 1));
        validate_ties(&w, 6).unwrap();
        let (z, _) = init_state(&ModelParams::new(1.0, 0.5, 0.5, 0.0), &c, &mut rng);
        assert!(z.iter().all(|&v| v == -1));
    }

    #[test]
    fn initial_positive_fraction_tracks_p() {
        let c = cfg(20, 5, 1, 0);
        let theta = ModelParams::new(1.0, 0.5, 0.5, 0.5);
        let mut pos = 0usize;
        for seed in 0..1000 {
            let (z, _) = init_state(&theta, &c, &mut stream_rng(seed, 0));
            pos += z.iter().filter(|&&v| v == 1).count();
        }
        let frac = pos as f64 / (1000.0 * 100.0);
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
    }

    #[test]
    fn pressure_zero_weights() {
        let z = vec![1, -1, 1, 1, -1, -1];
        let p = social_pressure(&z, &[0.0; 9], 3, 2).unwrap();
        assert!(p.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pressure_two_agents() {
        let p = social_pressure(&[1, 1], &[0.0, 0.5, 0.5, 0.0], 2, 1).unwrap();
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn pressure_needs_two_agents() {
        assert!(matches!(social_pressure(&[1], &[0.0], 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn propensity_symmetry() {
        assert_eq!(propensity(&[0.0], 3.7)[0], 0.5);
        assert!((propensity(&[1.0], 1.0)[0] - 0.731_058_6).abs() < 1e-7);
        let a = propensity(&[0.3, -0.8], 2.0);
        let b = propensity(&[-0.3, 0.8], 2.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn noiseless_update_is_threshold() {
        let pressure = [0.2, -0.1, 0.0, 0.7];
        let pi = propensity(&pressure, 2.0);
        let z = step_opinions(&pi, 0.0, 2, 2, &mut stream_rng(0, 0));
        assert_eq!(z, vec![1, -1, -1, 1]);
    }

    #[test]
    fn strong_propensity_always_adopts() {
        let mut rng = stream_rng(5, 0);
        for _ in 0..1000 {
            assert_eq!(step_opinions(&[0.99], 0.5, 1, 1, &mut rng), vec![1]);
        }
    }

    #[test]
    fn noisy_adoption_matches_uniform_cdf() {
        // ε = 1: P(π > 0.5 + U) = P(U < δ) = 0.5 + δ
        let delta = 0.13;
        let trials = 10_000;
        let hits: usize = (0..trials)
            .filter(|&s| step_opinions(&[0.5 + delta], 1.0, 1, 1, &mut stream_rng(s, 0))[0] == 1)
            .count();
        let p = 0.5 + delta;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        let freq = hits as f64 / trials as f64;
        assert!((freq - p).abs() < 3.0 * sigma, "{freq} vs {p}");
    }

    #[test]
    fn ties_frozen_at_zero_rate() {
        let c = cfg(5, 2, 1, 1);
        let (_, w) = init_state(&ModelParams::new(1.0, 0.5, 0.5, 0.5), &c, &mut stream_rng(1, 0));
        let z = vec![1, -1, 1, 1, -1, -1, 1, 1, -1, 1];
        assert_eq!(step_ties(&w, &z, 0.0, 5, 2), w);
    }

    #[test]
    fn ties_full_rate_agreement() {
        let w = vec![0.0, -0.4, -0.4, 0.0];
        let out = step_ties(&w, &[1, 1], 1.0, 2, 1);
        assert_eq!(out[1], 1.0);
        assert_eq!(out[2], 1.0);
    }

    #[test]
    fn frozen_ties_over_whole_run() {
        let trace = simulate(&ModelParams::new(2.0, 0.5, 0.0, 0.4), &cfg(8, 3, 10, 4)).unwrap();
        for t in 1..=10 {
            assert_eq!(trace.w_at(t), trace.w_at(0));
        }
    }

    #[test]
    fn all_positive_fixed_point() {
        let c = SimConfig {
            tie_init: TieInit::Uniform { low: 0.1, high: 1.0 },
            ..cfg(10, 3, 15, 9)
        };
        for rho in [0.1, 1.0, 4.9] {
            let trace = simulate(&ModelParams::new(rho, 0.0, 0.6, 1.0), &c).unwrap();
            assert!(trace.z.iter().all(|&v| v == 1));
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let theta = ModelParams::new(1.0, 0.8, 0.5, 0.5);
        let a = simulate(&theta, &cfg(20, 3, 25, 42)).unwrap();
        let b = simulate(&theta, &cfg(20, 3, 25, 42)).unwrap();
        assert_eq!(a, b);
        let c = simulate(&theta, &cfg(20, 3, 25, 43)).unwrap();
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn rejects_invalid_config() {
        let theta = ModelParams::new(1.0, 0.8, 0.5, 0.5);
        assert!(simulate(&theta, &cfg(1, 3, 5, 0)).is_err());
        assert!(simulate(&theta, &cfg(4, 0, 5, 0)).is_err());
        assert!(simulate(&theta, &cfg(4, 1, 0, 0)).is_err());
        assert!(simulate(&ModelParams::new(-1.0, 0.5, 0.5, 0.5), &cfg(4, 1, 2, 0)).is_err());
    }
}
