//! Conditional masked autoregressive flow over box-constrained parameters.
//!
//! Parameters are first mapped to ℝᴰ by a per-dimension logit transform of
//! the prior box, then pushed through a stack of MADE affine blocks with the
//! dimension order reversed between consecutive blocks. The base density is
//! a standard normal.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::abm::{ModelParams, PriorBox};
use crate::error::{Error, Result};
use crate::numerics::{glorot, sigmoid, ParamSet, Tape, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowArch {
    pub dim: usize,
    pub context_dim: usize,
    pub n_blocks: usize,
    pub hidden: usize,
    /// Log-scales are squashed to `(-alpha_clamp, alpha_clamp)`.
    pub alpha_clamp: f64,
}

impl Default for FlowArch {
    fn default() -> Self {
        FlowArch {
            dim: 4,
            context_dim: 16,
            n_blocks: 5,
            hidden: 50,
            alpha_clamp: 7.0,
        }
    }
}

impl FlowArch {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 || self.context_dim < 1 || self.n_blocks < 1 || self.hidden < 1 || self.alpha_clamp <= 0.0 {
            return Err(Error::Config(format!("invalid flow architecture {self:?}")));
        }
        Ok(())
    }
}

/// Per-dimension logit map from an open box onto ℝᴰ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxTransform {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxTransform {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(a, b)| !(a < b)) {
            return Err(Error::Config("box bounds must satisfy lower < upper".into()));
        }
        Ok(BoxTransform { lower, upper })
    }

    pub fn from_prior(prior: &PriorBox) -> Self {
        BoxTransform {
            lower: prior.lower.to_vec(),
            upper: prior.upper.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim() && (0..self.dim()).all(|d| theta[d] > self.lower[d] && theta[d] < self.upper[d])
    }

    /// Unconstrained coordinates and `log |du/dθ|`.
    pub fn forward(&self, theta: &[f64]) -> Result<(Vec<f64>, f64)> {
        if !self.contains(theta) {
            return Err(Error::Domain(format!("{theta:?} not strictly inside {:?}..{:?}", self.lower, self.upper)));
        }
        let mut log_jac = 0.0;
        let u = (0..self.dim())
            .map(|d| {
                let (a, b, x) = (self.lower[d], self.upper[d], theta[d]);
                log_jac += (b - a).ln() - (x - a).ln() - (b - x).ln();
                ((x - a) / (b - x)).ln()
            })
            .collect();
        Ok((u, log_jac))
    }

    /// Maps back into the box, keeping results strictly inside it.
    pub fn inverse(&self, u: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|d| {
                let (a, b) = (self.lower[d], self.upper[d]);
                let x = a + (b - a) * sigmoid(u[d]);
                x.clamp(a.next_up(), b.next_down())
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct MadeSlot {
    w_in: usize,
    w_ctx: usize,
    b_hidden: usize,
    w_out: usize,
    b_out: usize,
}

/// Weights of every MADE block plus the fixed autoregressive masks.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    arch: FlowArch,
    set: ParamSet,
    blocks: Vec<MadeSlot>,
    in_mask: Tensor,
    out_mask: Tensor,
}

/// Degrees `1..=D` for inputs and `1..=max(1, D-1)` cycled over hidden units.
fn made_masks(dim: usize, hidden: usize) -> (Tensor, Tensor) {
    let span = (dim.max(2) - 1).max(1);
    let hidden_deg: Vec<usize> = (0..hidden).map(|k| k % span + 1).collect();
    let mut in_mask = Tensor::zeros(&[dim, hidden]);
    for d in 0..dim {
        for (k, &hd) in hidden_deg.iter().enumerate() {
            if hd >= d + 1 {
                in_mask.set(d, k, 1.0);
            }
        }
    }
    // outputs: μ in columns 0..D, raw α in D..2D, both with degree d+1
    let mut out_mask = Tensor::zeros(&[hidden, 2 * dim]);
    for (k, &hd) in hidden_deg.iter().enumerate() {
        for d in 0..dim {
            if d + 1 > hd {
                out_mask.set(k, d, 1.0);
                out_mask.set(k, dim + d, 1.0);
            }
        }
    }
    (in_mask, out_mask)
}

impl FlowParams {
    /// Glorot-uniform weights with the output layer shrunk by `1e-2`, so each
    /// block starts close to the identity map.
    pub fn init(arch: &FlowArch, rng: &mut impl Rng) -> Result<Self> {
        let out_cols = 2 * arch.dim;
        Self::build(arch, |fan_in, fan_out| {
            let w = glorot(rng, fan_in, fan_out);
            if fan_out == out_cols && fan_in == arch.hidden {
                w.map(|x| 1e-2 * x)
            } else {
                w
            }
        })
    }

    pub fn zeros(arch: &FlowArch) -> Result<Self> {
        Self::build(arch, |fan_in, fan_out| Tensor::zeros(&[fan_in, fan_out]))
    }

    fn build(arch: &FlowArch, mut weight: impl FnMut(usize, usize) -> Tensor) -> Result<Self> {
        arch.validate()?;
        let (d, c, h) = (arch.dim, arch.context_dim, arch.hidden);
        let (in_mask, out_mask) = made_masks(d, h);
        let mut set = ParamSet::new();
        let blocks = (0..arch.n_blocks)
            .map(|b| {
                // masked entries are stored as zero so saved weights show the structure
                let w_in = weight(d, h).zip_map(&in_mask, |w, m| w * m).expect("mask shape");
                let w_out = weight(h, 2 * d).zip_map(&out_mask, |w, m| w * m).expect("mask shape");
                MadeSlot {
                    w_in: set.push(format!("flow.block{b}.w_in"), w_in),
                    w_ctx: set.push(format!("flow.block{b}.w_ctx"), weight(c, h)),
                    b_hidden: set.push(format!("flow.block{b}.b_hidden"), Tensor::zeros(&[h])),
                    w_out: set.push(format!("flow.block{b}.w_out"), w_out),
                    b_out: set.push(format!("flow.block{b}.b_out"), Tensor::zeros(&[2 * d])),
                }
            })
            .collect();
        Ok(FlowParams {
            arch: arch.clone(),
            set,
            blocks,
            in_mask,
            out_mask,
        })
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.set
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }
}

/// Flow weights bound to a tape together with the constant masks.
pub struct BoundFlow<'a> {
    flow: &'a FlowParams,
    vars: Vec<Var>,
    in_mask: Var,
    out_mask: Var,
    reverse: Var,
}

impl<'a> BoundFlow<'a> {
    pub fn new(tape: &mut Tape, flow: &'a FlowParams, trainable: bool) -> Self {
        let vars = flow.set.bind(tape, trainable);
        let d = flow.arch.dim;
        let mut rev = Tensor::zeros(&[d, d]);
        for i in 0..d {
            rev.set(i, d - 1 - i, 1.0);
        }
        BoundFlow {
            flow,
            vars,
            in_mask: tape.constant(flow.in_mask.clone()),
            out_mask: tape.constant(flow.out_mask.clone()),
            reverse: tape.constant(rev),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// `(μ, α)` of block `b` for a batch `u: B×D` with context `B×C`.
    pub fn made(&self, tape: &mut Tape, b: usize, u: Var, ctx: Var) -> Result<(Var, Var)> {
        let s = self.flow.blocks[b];
        let d = self.flow.arch.dim;
        let w_in = tape.mul(self.vars[s.w_in], self.in_mask)?;
        let w_out = tape.mul(self.vars[s.w_out], self.out_mask)?;
        let a = tape.matmul(u, w_in)?;
        let c = tape.matmul(ctx, self.vars[s.w_ctx])?;
        let pre = tape.add(a, c)?;
        let pre = tape.add_row(pre, self.vars[s.b_hidden])?;
        let hidden = tape.relu(pre)?;
        let out = tape.matmul(hidden, w_out)?;
        let out = tape.add_row(out, self.vars[s.b_out])?;
        let mu = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, 2 * d)?;
        let clamp = self.flow.arch.alpha_clamp;
        let alpha = tape.scale(raw, 1.0 / clamp)?;
        let alpha = tape.tanh(alpha)?;
        let alpha = tape.scale(alpha, clamp)?;
        Ok((mu, alpha))
    }

    /// Noise-direction transform of a batch: returns `(v, Σ_blocks Σ_d -α)`
    /// with `v: B×D` and the log-determinant as `B×1`.
    pub fn forward(&self, tape: &mut Tape, u: Var, ctx: Var) -> Result<(Var, Var)> {
        let mut x = u;
        let mut log_det: Option<Var> = None;
        let n = self.flow.arch.n_blocks;
        for b in 0..n {
            let (mu, alpha) = self.made(tape, b, x, ctx)?;
            let neg_alpha = tape.neg(alpha)?;
            let scale = tape.exp(neg_alpha)?;
            let centered = tape.sub(x, mu)?;
            x = tape.mul(centered, scale)?;
            let ld = tape.row_sums(neg_alpha)?;
            log_det = Some(match log_det {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
            if b + 1 < n {
                x = tape.matmul(x, self.reverse)?;
            }
        }
        Ok((x, log_det.expect("at least one block")))
    }

    /// `log q(u | ctx)` in unconstrained coordinates, as `B×1`.
    pub fn log_prob_unconstrained(&self, tape: &mut Tape, u: Var, ctx: Var) -> Result<Var> {
        let (v, log_det) = self.forward(tape, u, ctx)?;
        let sq = tape.mul(v, v)?;
        let sq = tape.row_sums(sq)?;
        let base = tape.scale(sq, -0.5)?;
        let norm = tape.constant(Tensor::scalar(-0.5 * self.flow.arch.dim as f64 * LN_2PI));
        let base = tape.add(base, norm)?;
        tape.add(base, log_det)
    }
}

fn repeat_rows(row: &[f64], n: usize) -> Tensor {
    let mut data = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        data.extend_from_slice(row);
    }
    Tensor::matrix(n, row.len(), data).expect("finite, consistently shaped rows")
}

fn check_context(flow: &FlowParams, context: &[f64]) -> Result<()> {
    if context.len() != flow.arch.context_dim {
        return Err(Error::dim(
            "flow context",
            format!("expected {} values, got {}", flow.arch.context_dim, context.len()),
        ));
    }
    Ok(())
}

/// `(μ, α)` of one block for a single input.
pub fn made_forward(flow: &FlowParams, block: usize, u: &[f64], context: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_context(flow, context)?;
    if u.len() != flow.arch.dim || block >= flow.arch.n_blocks {
        return Err(Error::dim("made_forward", format!("input of {} values, block {block}", u.len())));
    }
    let mut tape = Tape::new();
    let bound = BoundFlow::new(&mut tape, flow, false);
    let uv = tape.constant(repeat_rows(u, 1));
    let cv = tape.constant(repeat_rows(context, 1));
    let (mu, alpha) = bound.made(&mut tape, block, uv, cv)?;
    Ok((tape.value(mu).data().to_vec(), tape.value(alpha).data().to_vec()))
}

/// Forward (density-direction) transform in unconstrained space.
pub fn flow_forward(flow: &FlowParams, u: &[f64], context: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_context(flow, context)?;
    let mut tape = Tape::new();
    let bound = BoundFlow::new(&mut tape, flow, false);
    let uv = tape.constant(repeat_rows(u, 1));
    let cv = tape.constant(repeat_rows(context, 1));
    let (v, ld) = bound.forward(&mut tape, uv, cv)?;
    Ok((tape.value(v).data().to_vec(), tape.value(ld).item()))
}

/// Inverts the block stack for a batch of base points `v: B×D`, returning the
/// unconstrained samples and `Σ α` per row.
pub fn flow_inverse_batch(flow: &FlowParams, v: &Tensor, context: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    check_context(flow, context)?;
    let (rows, d) = v.dims2()?;
    if d != flow.arch.dim {
        return Err(Error::dim("flow_inverse", format!("{d} columns for a {}-D flow", flow.arch.dim)));
    }
    let mut tape = Tape::new();
    let bound = BoundFlow::new(&mut tape, flow, false);
    let ctx = tape.constant(repeat_rows(context, rows));
    let n = flow.arch.n_blocks;
    let mut x = v.clone();
    let mut alpha_sum = vec![0.0; rows];
    for b in (0..n).rev() {
        if b + 1 < n {
            x = reverse_cols(&x);
        }
        let mut u = Tensor::zeros(&[rows, d]);
        for dd in 0..d {
            let uv = tape.constant(u.clone());
            let (mu, alpha) = bound.made(&mut tape, b, uv, ctx)?;
            let (mu, alpha) = (tape.value(mu), tape.value(alpha));
            for r in 0..rows {
                let a = alpha.at(r, dd);
                u.set(r, dd, mu.at(r, dd) + x.at(r, dd) * a.exp());
                alpha_sum[r] += a;
            }
        }
        u.ensure_finite("flow_inverse")?;
        x = u;
    }
    Ok((x, alpha_sum))
}

fn reverse_cols(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            out.set(i, c - 1 - j, x.at(i, j));
        }
    }
    out
}

/// `log q(θ | context)` including the box Jacobian; `-∞` outside the box.
pub fn maf_log_prob(flow: &FlowParams, bx: &BoxTransform, theta: &[f64], context: &[f64]) -> Result<f64> {
    match maf_log_prob_strict(flow, bx, theta, context) {
        Err(Error::Domain(_)) => Ok(f64::NEG_INFINITY),
        other => other,
    }
}

/// As [`maf_log_prob`] but out-of-box parameters are a domain error.
pub fn maf_log_prob_strict(flow: &FlowParams, bx: &BoxTransform, theta: &[f64], context: &[f64]) -> Result<f64> {
    Ok(log_prob_batch(flow, bx, std::slice::from_ref(&theta.to_vec()), context)?[0])
}

/// Batched strict log densities for many θ sharing one context.
pub fn log_prob_batch(flow: &FlowParams, bx: &BoxTransform, thetas: &[Vec<f64>], context: &[f64]) -> Result<Vec<f64>> {
    check_context(flow, context)?;
    if bx.dim() != flow.arch.dim {
        return Err(Error::dim("maf_log_prob", "box and flow dimensions differ"));
    }
    if thetas.is_empty() {
        return Ok(Vec::new());
    }
    let mut us = Vec::with_capacity(thetas.len() * bx.dim());
    let mut jacs = Vec::with_capacity(thetas.len());
    for t in thetas {
        let (u, j) = bx.forward(t)?;
        us.extend(u);
        jacs.push(j);
    }
    let mut tape = Tape::new();
    let bound = BoundFlow::new(&mut tape, flow, false);
    let uv = tape.constant(Tensor::matrix(thetas.len(), bx.dim(), us)?);
    let cv = tape.constant(repeat_rows(context, thetas.len()));
    let lp = bound.log_prob_unconstrained(&mut tape, uv, cv)?;
    Ok(tape.value(lp).data().iter().zip(&jacs).map(|(l, j)| l + j).collect())
}

/// A draw in parameter space with the log density accumulated along the sampling path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub theta: Vec<f64>,
    pub log_prob: f64,
}

/// `n` draws from `q(· | context)`.
pub fn maf_sample(
    flow: &FlowParams,
    bx: &BoxTransform,
    context: &[f64],
    rng: &mut impl Rng,
    n: usize,
) -> Result<Vec<FlowSample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = flow.arch.dim;
    let v: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let v = Tensor::matrix(n, d, v)?;
    let (u, alpha_sum) = flow_inverse_batch(flow, &v, context)?;
    (0..n)
        .map(|r| {
            let theta = bx.inverse(u.row(r));
            let (_, log_jac) = bx.forward(&theta)?;
            let base: f64 = -0.5 * v.row(r).iter().map(|x| x * x).sum::<f64>() - 0.5 * d as f64 * LN_2PI;
            Ok(FlowSample {
                theta,
                log_prob: base - alpha_sum[r] + log_jac,
            })
        })
        .collect()
}

/// Convenience for the 4-parameter model.
pub fn to_model_params(theta: &[f64]) -> ModelParams {
    ModelParams::from_array([theta[0], theta[1], theta[2], theta[3]])
}
