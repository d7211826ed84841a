//! Corpus generation and joint training of the embedder and the flow.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abm::{sample_prior, simulate, stream_rng, GraphTrace, ModelParams, PriorBox, SimConfig};
use crate::embedder::embed_on_tape;
use crate::error::{Error, Result};
use crate::flow::BoundFlow;
use crate::model::{ArchConfig, PosteriorModel};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_sims: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_sims: 1000,
            batch_size: 50,
            lr: 5e-4,
            val_fraction: 0.10,
            patience_epochs: 20,
            max_epochs: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must be in (0, 1), got {}", self.val_fraction)));
        }
        if self.batch_size == 0 || self.n_sims == 0 || self.max_epochs == 0 || self.patience_epochs == 0 {
            return Err(Error::Config("batch_size, n_sims, max_epochs and patience_epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Validation-set size for a corpus of `n` pairs.
    pub fn n_val(&self, n: usize) -> usize {
        (self.val_fraction * n as f64).ceil() as usize
    }
}

/// Prior-predictive `(θ, trace)` pairs plus what produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sim: SimConfig,
    pub prior: PriorBox,
    pub seed: u64,
    pub thetas: Vec<ModelParams>,
    pub traces: Vec<GraphTrace>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.thetas.len() != self.traces.len() {
            return Err(Error::Validation("theta and trace counts differ".into()));
        }
        for (i, t) in self.traces.iter().enumerate() {
            t.validate().map_err(|e| Error::Validation(format!("trace {i}: {e}")))?;
        }
        Ok(())
    }
}

/// One prior draw and its simulation; `index` selects the RNG stream.
pub fn simulate_task(sim: &SimConfig, prior: &PriorBox, seed: u64, index: usize) -> Result<(ModelParams, GraphTrace)> {
    let mut rng = stream_rng(seed, index as u64);
    let theta = sample_prior(prior, &mut rng);
    let trace = simulate(&theta, &sim.with_seed(rng.next_u64())).map_err(|e| Error::Simulation {
        index,
        source: Box::new(e),
    })?;
    Ok((theta, trace))
}

/// Draws `n_sims` pairs. The result does not depend on `jobs`.
pub fn generate_corpus(sim: &SimConfig, prior: &PriorBox, n_sims: usize, seed: u64, jobs: usize) -> Result<Corpus> {
    if n_sims == 0 {
        return Err(Error::Config("n_sims must be ≥ 1".into()));
    }
    sim.validate()?;
    prior.validate()?;
    let run = || -> Result<Vec<(ModelParams, GraphTrace)>> {
        (0..n_sims)
            .into_par_iter()
            .map(|i| simulate_task(sim, prior, seed, i))
            .collect()
    };
    let pairs = if jobs <= 1 {
        (0..n_sims).map(|i| simulate_task(sim, prior, seed, i)).collect::<Result<Vec<_>>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?
    };
    let (thetas, traces) = pairs.into_iter().unzip();
    Ok(Corpus {
        sim: *sim,
        prior: *prior,
        seed,
        thetas,
        traces,
    })
}

/// Loss value and gradients for both parameter sets, in [`crate::numerics::ParamSet`] order.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub loss: f64,
    pub embedder: Vec<Tensor>,
    pub flow: Vec<Tensor>,
}

fn check_batch(model: &PosteriorModel, thetas: &[ModelParams], traces: &[&GraphTrace]) -> Result<()> {
    if thetas.is_empty() || thetas.len() != traces.len() {
        return Err(Error::Usage(format!(
            "batch needs matching non-empty θ/trace lists, got {} and {}",
            thetas.len(),
            traces.len()
        )));
    }
    traces.iter().try_for_each(|t| model.check_observation(t))
}

/// Box-transformed θ rows and the summed log-Jacobian.
fn unconstrained(model: &PosteriorModel, thetas: &[ModelParams]) -> Result<(Tensor, f64)> {
    let mut data = Vec::with_capacity(thetas.len() * 4);
    let mut jac = 0.0;
    for t in thetas {
        let (u, j) = model.bx.forward(&t.to_array())?;
        data.extend(u);
        jac += j;
    }
    Ok((Tensor::matrix(thetas.len(), 4, data)?, jac))
}

fn finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::numeric("nll_loss", format!("loss is {loss}")))
    }
}

/// Embeds every trace on its own tape, returning the tapes for the reverse pass.
fn embed_batch(model: &PosteriorModel, traces: &[&GraphTrace], trainable: bool) -> Result<Vec<(Tape, Vec<Var>, Var)>> {
    traces
        .par_iter()
        .map(|trace| {
            let mut tape = Tape::new();
            let vars = model.embedder.params().bind(&mut tape, trainable);
            let out = embed_on_tape(&mut tape, &model.embedder, &vars, trace)?;
            Ok((tape, vars, out))
        })
        .collect()
}

/// `-(1/B) Σ_b log q(θ_b | embed(trace_b))`.
pub fn nll_loss(model: &PosteriorModel, thetas: &[ModelParams], traces: &[&GraphTrace]) -> Result<f64> {
    check_batch(model, thetas, traces)?;
    let contexts: Vec<f64> = embed_batch(model, traces, false)?
        .into_iter()
        .flat_map(|(tape, _, out)| tape.value(out).data().to_vec())
        .collect();
    let (u, jac) = unconstrained(model, thetas)?;
    let b = thetas.len();
    let mut tape = Tape::new();
    let flow = BoundFlow::new(&mut tape, &model.flow, false);
    let uv = tape.constant(u);
    let cv = tape.constant(Tensor::matrix(b, model.flow.arch().context_dim, contexts)?);
    let lp = flow.log_prob_unconstrained(&mut tape, uv, cv)?;
    finite_loss(-(tape.value(lp).sum() + jac) / b as f64)
}

/// Loss and its gradients with respect to embedder and flow weights.
///
/// The flow is differentiated on one tape with the contexts as leaves; each
/// trace's tape is then swept with its context adjoint as the seed. Partial
/// gradients are summed in batch order, so the result is independent of how
/// rayon schedules the traces.
pub fn loss_and_grads(model: &PosteriorModel, thetas: &[ModelParams], traces: &[&GraphTrace]) -> Result<LossGrads> {
    check_batch(model, thetas, traces)?;
    let b = thetas.len();
    let embedded = embed_batch(model, traces, true)?;
    let (u, jac) = unconstrained(model, thetas)?;

    let mut tape = Tape::new();
    let flow = BoundFlow::new(&mut tape, &model.flow, true);
    let uv = tape.constant(u);
    let ctx_leaves: Vec<Var> = embedded
        .iter()
        .map(|(t, _, out)| tape.param(t.value(*out).clone()))
        .collect();
    let ctx = tape.concat_rows(&ctx_leaves)?;
    let lp = flow.log_prob_unconstrained(&mut tape, uv, ctx)?;
    let total = tape.sum(lp)?;
    let loss_var = tape.scale(total, -1.0 / b as f64)?;
    let loss = finite_loss(tape.value(loss_var).item() - jac / b as f64)?;

    let grads = tape.backward(loss_var)?;
    let flow_grads: Vec<Tensor> = flow.vars().iter().map(|&v| grads.wrt(&tape, v)).collect();
    let ctx_grads: Vec<Tensor> = ctx_leaves.iter().map(|&v| grads.wrt(&tape, v)).collect();

    let per_trace: Vec<Vec<Tensor>> = embedded
        .into_par_iter()
        .zip(ctx_grads.into_par_iter())
        .map(|((mut t, vars, out), g)| {
            let seed = t.constant(g);
            let prod = t.mul(out, seed)?;
            let s = t.sum(prod)?;
            let gr = t.backward(s)?;
            Ok(vars.iter().map(|&v| gr.wrt(&t, v)).collect())
        })
        .collect::<Result<_>>()?;

    let mut emb_grads: Vec<Tensor> = model.embedder.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for g in &per_trace {
        for (acc, x) in emb_grads.iter_mut().zip(g) {
            *acc = acc.zip_map(x, |a, b| a + b)?;
        }
    }
    Ok(LossGrads {
        loss,
        embedder: emb_grads,
        flow: flow_grads,
    })
}

/// Joint Adam state over the embedder and flow tensors.
pub struct Optimizer {
    state: AdamState,
}

impl Optimizer {
    pub fn new(config: AdamConfig, model: &PosteriorModel) -> Self {
        let tensors = model
            .embedder
            .params()
            .tensors()
            .iter()
            .chain(model.flow.params().tensors());
        Optimizer {
            state: AdamState::new(config, tensors),
        }
    }

    pub fn step(&mut self, model: &mut PosteriorModel, grads: LossGrads) -> Result<()> {
        let mut params = model.embedder.params_mut().tensors_mut();
        params.extend(model.flow.params_mut().tensors_mut());
        let all: Vec<Tensor> = grads.embedder.into_iter().chain(grads.flow).collect();
        adam_step(&mut params, &all, &mut self.state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

/// Patience rule over validation losses; strict improvement resets the counter.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since: usize,
}

impl EarlyStopping {
    /// `initial` is the validation loss before any update (epoch 0).
    pub fn new(patience: usize, initial: f64) -> Self {
        EarlyStopping {
            patience,
            best: initial,
            best_epoch: 0,
            since: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> Decision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since = 0;
            Decision::Improved
        } else {
            self.since += 1;
            if self.since >= self.patience {
                Decision::Stop
            } else {
                Decision::Continue
            }
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_val: usize,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    /// Excluded from reproducibility comparisons.
    pub timing: Timing,
}

/// Seed-shuffled split: the last `⌈f·n⌉` shuffled indices are validation.
pub fn split_indices(n: usize, config: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(config.seed, 0));
    let n_val = config.n_val(n).min(n);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Model initialisation used by [`train`].
pub fn initial_model(arch: &ArchConfig, corpus: &Corpus, config: &TrainConfig) -> Result<PosteriorModel> {
    PosteriorModel::init(arch, &corpus.sim, &corpus.prior, &mut stream_rng(config.seed, 1))
}

fn gather<'a>(corpus: &'a Corpus, idx: &[usize]) -> (Vec<ModelParams>, Vec<&'a GraphTrace>) {
    (
        idx.iter().map(|&i| corpus.thetas[i]).collect(),
        idx.iter().map(|&i| &corpus.traces[i]).collect(),
    )
}

/// Size-weighted mean loss over `idx` in chunks of `batch`.
pub fn eval_loss(model: &PosteriorModel, corpus: &Corpus, idx: &[usize], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let (th, tr) = gather(corpus, chunk);
        total += nll_loss(model, &th, &tr)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Fits the model with mini-batch Adam and validation early stopping,
/// returning the best-validation parameters.
pub fn train(corpus: &Corpus, arch: &ArchConfig, config: &TrainConfig) -> Result<(PosteriorModel, TrainReport)> {
    train_with_progress(corpus, arch, config, |_| {})
}

pub fn train_with_progress(
    corpus: &Corpus,
    arch: &ArchConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(PosteriorModel, TrainReport)> {
    config.validate()?;
    let start = Instant::now();
    let n = corpus.len();
    let (train_idx, val_idx) = split_indices(n, config);
    if train_idx.is_empty() || config.batch_size > train_idx.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training pairs",
            config.batch_size,
            train_idx.len()
        )));
    }

    let mut model = initial_model(arch, corpus, config)?;
    let mut opt = Optimizer::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model,
    );
    let initial_val = eval_loss(&model, corpus, &val_idx, config.batch_size)?;
    let mut stopper = EarlyStopping::new(config.patience_epochs, initial_val);
    let mut best_model = model.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    let mut order = train_idx.clone();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut stream_rng(config.seed, 1 + epoch as u64));
        let mut train_total = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let (th, tr) = gather(corpus, chunk);
            let lg = loss_and_grads(&model, &th, &tr).map_err(|e| match e {
                Error::Numeric { .. } => Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            train_total += lg.loss * chunk.len() as f64;
            opt.step(&mut model, lg)?;
        }
        let val_loss = eval_loss(&model, corpus, &val_idx, config.batch_size).map_err(|e| match e {
            Error::Numeric { .. } => Error::Divergence {
                epoch,
                batch: usize::MAX,
                loss: f64::NAN,
            },
            other => other,
        })?;
        let record = EpochRecord {
            epoch,
            train_loss: train_total / order.len() as f64,
            val_loss,
        };
        on_epoch(&record);
        epochs.push(record);
        match stopper.update(epoch, val_loss) {
            Decision::Improved => best_model = model.clone(),
            Decision::Continue => {}
            Decision::Stop => {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }

    let (best_epoch, best_val_loss) = stopper.best();
    Ok((
        best_model,
        TrainReport {
            n_train: train_idx.len(),
            n_val: val_idx.len(),
            initial_val_loss: initial_val,
            epochs,
            best_epoch,
            best_val_loss,
            stop_reason,
            timing: Timing {
                wall_clock_secs: start.elapsed().as_secs_f64(),
            },
        },
    ))
}
