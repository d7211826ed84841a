//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the library's numerical kernels: each oracle is
//! written from the defining formula with plain loops.

#![allow(dead_code)]

use graph_npe::abm::{stream_rng, SimRng};
use graph_npe::numerics::Tensor;
use rand::Rng;

pub fn rng(seed: u64) -> SimRng {
    stream_rng(seed, 7_777)
}

/// Symmetric, zero-diagonal matrix with off-diagonal entries in `[-1, 1]`.
pub fn random_ties(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.gen_range(-1.0..=1.0);
            w[i * n + j] = v;
            w[j * n + i] = v;
        }
    }
    w
}

pub fn random_opinions(rng: &mut impl Rng, n: usize, k: usize) -> Vec<i8> {
    (0..n * k).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// `P[i][k] = (1/(N-1)) Σ_{j≠i} w_ij z_jk`.
pub fn social_pressure_oracle(z: &[i8], w: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * k];
    for i in 0..n {
        for t in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                if j != i {
                    acc += w[i * n + j] * f64::from(z[j * k + t]);
                }
            }
            p[i * k + t] = acc / (n - 1) as f64;
        }
    }
    p
}

/// `w'_ij = (1-λ) w_ij + (λ/K) Σ_k z_ik z_jk` off the diagonal.
pub fn step_ties_oracle(w: &[f64], z: &[i8], lam: f64, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut agree = 0.0;
            for t in 0..k {
                agree += f64::from(z[i * k + t]) * f64::from(z[j * k + t]);
            }
            out[i * n + j] = (1.0 - lam) * w[i * n + j] + lam / k as f64 * agree;
        }
    }
    out
}

pub fn dense_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Monomial coefficients of the Chebyshev polynomials `T_0 … T_{q-1}`.
pub fn chebyshev_coefficients(q: usize) -> Vec<Vec<f64>> {
    let mut polys: Vec<Vec<f64>> = Vec::new();
    for m in 0..q {
        let p = match m {
            0 => vec![1.0],
            1 => vec![0.0, 1.0],
            _ => {
                let mut p = vec![0.0; m + 1];
                for (d, c) in polys[m - 1].iter().enumerate() {
                    p[d + 1] += 2.0 * c;
                }
                for (d, c) in polys[m - 2].iter().enumerate() {
                    p[d] -= c;
                }
                p
            }
        };
        polys.push(p);
    }
    polys
}

/// `Σ_q T_q(L) X Θ_q + b` with each `T_q(L)` expanded as a dense sum of matrix powers.
pub fn cheb_conv_oracle(x: &Tensor, lap: &Tensor, blocks: &[Tensor], bias: &[f64]) -> Tensor {
    let n = lap.rows();
    let (din, dout) = (x.cols(), bias.len());
    let coeffs = chebyshev_coefficients(blocks.len());
    let mut powers = vec![Tensor::identity(n).into_data()];
    for p in 1..blocks.len() {
        let next = dense_matmul(&powers[p - 1], lap.data(), n, n, n);
        powers.push(next);
    }
    let mut out = vec![0.0; n * dout];
    for (q, theta) in blocks.iter().enumerate() {
        let mut tq = vec![0.0; n * n];
        for (p, c) in coeffs[q].iter().enumerate() {
            for (t, v) in tq.iter_mut().zip(&powers[p]) {
                *t += c * v;
            }
        }
        let tx = dense_matmul(&tq, x.data(), n, n, din);
        let y = dense_matmul(&tx, theta.data(), n, din, dout);
        for (o, v) in out.iter_mut().zip(y) {
            *o += v;
        }
    }
    for i in 0..n {
        for j in 0..dout {
            out[i * dout + j] += bias[j];
        }
    }
    Tensor::matrix(n, dout, out).unwrap()
}

/// Random permutation of `0..n` (`perm[new] = old`).
pub fn random_permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Rows of `x` reordered: `out[i] = x[perm[i]]`.
pub fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row(p).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// `Π A Πᵀ` for a square row-major matrix.
pub fn permute_square(a: &[f64], n: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = a[perm[i] * n + perm[j]];
        }
    }
    out
}

pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely. With
/// `h = 1e-5`, a central difference of an O(1) objective carries roughly
/// `ε/h ≈ 1e-11`–`1e-10` of round-off, so relative error is meaningless for
/// entries much smaller than this.
pub const FD_FLOOR: f64 = 1e-5;

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] -= 2.0 * h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn determinant(rows: usize, data: &[f64]) -> f64 {
    nalgebra::DMatrix::from_row_slice(rows, rows, data).determinant()
}

/// Trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], step: f64) -> f64 {
    let n = values.len();
    step * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

/// Finite-difference gradient checks for the embedder and the flow.
pub mod gradcheck {
    use super::{central_difference, rel_err, FD_FLOOR, FD_STEP};

    /// Outcome of a gradient check.
    #[derive(Clone, Copy, Debug, Default)]
    pub struct GradReport {
        pub worst: f64,
        pub checked: usize,
        /// Coordinates whose stencil straddles a ReLU kink.
        pub kinks: usize,
    }

    impl GradReport {
        pub fn record(&mut self, analytic: f64, fd: Option<f64>) {
            match fd {
                Some(fd) => {
                    self.worst = self.worst.max(rel_err(analytic, fd, FD_FLOOR));
                    self.checked += 1;
                }
                None => self.kinks += 1,
            }
        }

        pub fn merge(&mut self, other: GradReport) {
            self.worst = self.worst.max(other.worst);
            self.checked += other.checked;
            self.kinks += other.kinks;
        }
    }

    /// Central difference at `h`, or `None` when it disagrees with the one at
    /// `h/2`: the stencil then crosses a point where the function is not
    /// differentiable and neither value estimates the derivative.
    pub fn smooth_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> Option<f64> {
        let a = central_difference(f, x, i, FD_STEP);
        let b = central_difference(f, x, i, 0.5 * FD_STEP);
        (rel_err(a, b, FD_FLOOR) < 1e-3).then_some(a)
    }
    use graph_npe::abm::{GraphTrace, PriorBox};
    use graph_npe::embedder::{embed_on_tape, embed_trace, EmbedderParams};
    use graph_npe::flow::{maf_log_prob, BoundFlow, BoxTransform, FlowArch, FlowParams};
    use graph_npe::numerics::{Tape, Tensor};
    use rand::Rng;

    /// Analytic gradient of `c · embed(trace)` for every parameter tensor.
    pub fn tape_gradient(params: &EmbedderParams, trace: &GraphTrace, c: &[f64]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = params.params().bind(&mut tape, true);
        let e = embed_on_tape(&mut tape, params, &vars, trace).unwrap();
        let cv = tape.constant(Tensor::matrix(1, c.len(), c.to_vec()).unwrap());
        let prod = tape.mul(e, cv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        vars.iter().map(|&v| grads.wrt(&tape, v).into_data()).collect()
    }

    pub fn objective(params: &EmbedderParams, trace: &GraphTrace, c: &[f64]) -> f64 {
        embed_trace(params, trace).unwrap().iter().zip(c).map(|(a, b)| a * b).sum()
    }

    /// Checks every coordinate (or a random subset of `limit` per tensor).
    pub fn check_embedder_gradients(params: &mut EmbedderParams, trace: &GraphTrace, r: &mut impl Rng, limit: Option<usize>) -> GradReport {
        let c: Vec<f64> = (0..params.arch().embedding_dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let analytic = tape_gradient(params, trace, &c);
        let mut report = GradReport::default();
        for (ti, grad) in analytic.iter().enumerate() {
            let base = params.params().get(ti).clone();
            let coords: Vec<usize> = match limit {
                Some(m) if m < base.len() => (0..m).map(|_| r.gen_range(0..base.len())).collect(),
                _ => (0..base.len()).collect(),
            };
            for i in coords {
                let mut f = |x: &[f64]| {
                    *params.params_mut().get_mut(ti) = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
                    objective(params, trace, &c)
                };
                report.record(grad[i], smooth_difference(&mut f, base.data(), i));
            }
            *params.params_mut().get_mut(ti) = base;
        }
        report
    }

    /// Initialised flow with every weight jittered, so no block is near the identity.
    pub fn rough_flow(arch: &FlowArch, r: &mut impl Rng, jitter: f64) -> FlowParams {
        let mut flow = FlowParams::init(arch, r).unwrap();
        for i in 0..flow.params().len() {
            let t = flow.params().get(i).clone();
            let data = t.data().iter().map(|x| x + r.gen_range(-jitter..jitter)).collect();
            *flow.params_mut().get_mut(i) = Tensor::new(t.shape().to_vec(), data).unwrap();
        }
        flow
    }

    pub fn random_vec(r: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-scale..scale)).collect()
    }

    /// `log q` gradient w.r.t. every flow tensor and the context, through the tape.
    pub fn tape_gradients(flow: &FlowParams, bx: &BoxTransform, theta: &[f64], ctx: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let (u, _) = bx.forward(theta).unwrap();
        let mut tape = Tape::new();
        let bound = BoundFlow::new(&mut tape, flow, true);
        let uv = tape.constant(Tensor::matrix(1, u.len(), u).unwrap());
        let cv = tape.param(Tensor::matrix(1, ctx.len(), ctx.to_vec()).unwrap());
        let lp = bound.log_prob_unconstrained(&mut tape, uv, cv).unwrap();
        let loss = tape.sum(lp).unwrap();
        let grads = tape.backward(loss).unwrap();
        let params = bound.vars().iter().map(|&v| grads.wrt(&tape, v).into_data()).collect();
        (params, grads.wrt(&tape, cv).into_data())
    }

    /// Worst relative error of `∂ log q / ∂(weights, context)` for a jittered
    /// flow at a random in-box θ; every coordinate is checked.
    pub fn check_flow_gradients(arch: &FlowArch, r: &mut impl Rng) -> GradReport {
        let bx = BoxTransform::from_prior(&PriorBox::default());
        let mut flow = rough_flow(arch, r, 0.1);
        let ctx = random_vec(r, arch.context_dim, 1.0);
        let theta = vec![r.gen_range(0.2..4.8), r.gen_range(0.05..0.95), r.gen_range(0.05..0.95), r.gen_range(0.05..0.95)];
        let (analytic, ctx_grad) = tape_gradients(&flow, &bx, &theta, &ctx);

        let mut report = GradReport::default();
        let mut f_ctx = |c: &[f64]| maf_log_prob(&flow, &bx, &theta, c).unwrap();
        for i in 0..ctx.len() {
            report.record(ctx_grad[i], smooth_difference(&mut f_ctx, &ctx, i));
        }
        for (ti, grad) in analytic.iter().enumerate() {
            let base = flow.params().get(ti).clone();
            for i in 0..base.len() {
                let mut f = |x: &[f64]| {
                    *flow.params_mut().get_mut(ti) = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
                    maf_log_prob(&flow, &bx, &theta, &ctx).unwrap()
                };
                report.record(grad[i], smooth_difference(&mut f, base.data(), i));
            }
            *flow.params_mut().get_mut(ti) = base;
        }
        report
    }
}

/// Synthetic samplers with known calibration, used to validate SBC itself.
pub mod samplers {
    use graph_npe::abm::{sample_prior, GraphTrace, ModelParams, PriorBox, SimRng};
    use graph_npe::diagnostics::PosteriorSampler;
    use graph_npe::Result;
    use rand_distr::{Beta, Distribution};

    /// `p` only enters through the initial opinions, so under the uniform
    /// prior `p | trace ~ Beta(1 + #positive, 1 + #negative)` exactly.
    fn p_posterior(obs: &GraphTrace) -> Beta<f64> {
        let z0 = obs.z_at(0);
        let pos = z0.iter().filter(|&&v| v == 1).count() as f64;
        Beta::new(1.0 + pos, 1.0 + z0.len() as f64 - pos).unwrap()
    }

    /// Calibrated: exact posterior for `p`, prior draws for the rest.
    pub struct ExactP {
        pub prior: PriorBox,
    }

    impl PosteriorSampler for ExactP {
        fn sample_posterior(&self, obs: &GraphTrace, n: usize, rng: &mut SimRng) -> Result<Vec<ModelParams>> {
            let beta = p_posterior(obs);
            Ok((0..n)
                .map(|_| {
                    let mut t = sample_prior(&self.prior, rng);
                    t.p_init = beta.sample(rng);
                    t
                })
                .collect())
        }
    }

    /// Overconfident: the same posteriors with every draw pulled `shrink`-fold
    /// towards a single point draw, so credible sets are far too narrow.
    pub struct Overconfident {
        pub prior: PriorBox,
        pub shrink: f64,
    }

    impl PosteriorSampler for Overconfident {
        fn sample_posterior(&self, obs: &GraphTrace, n: usize, rng: &mut SimRng) -> Result<Vec<ModelParams>> {
            let beta = p_posterior(obs);
            let mut anchor = sample_prior(&self.prior, rng).to_array();
            anchor[3] = beta.sample(rng);
            Ok((0..n)
                .map(|_| {
                    let mut fresh = sample_prior(&self.prior, rng).to_array();
                    fresh[3] = beta.sample(rng);
                    ModelParams::from_array(std::array::from_fn(|d| anchor[d] + (fresh[d] - anchor[d]) / self.shrink))
                })
                .collect())
        }
    }
}
