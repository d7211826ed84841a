//! Recurrent graph embedding of a [`GraphTrace`].
//!
//! Each snapshot is filtered with Chebyshev polynomials of a scaled signed
//! Laplacian inside a gated recurrent cell. The final per-node hidden states
//! are reduced to one scalar per node and a small feedforward network maps
//! that vector to the embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::abm::GraphTrace;
use crate::error::{Error, Result};
use crate::numerics::{glorot, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderArch {
    pub n_agents: usize,
    pub n_topics: usize,
    /// Number of Chebyshev terms `Q`.
    pub cheb_order: usize,
    pub hidden: usize,
    /// Widths of the feedforward readout; the last entry is the embedding size.
    pub readout: Vec<usize>,
}

impl EmbedderArch {
    pub fn new(n_agents: usize, n_topics: usize) -> Self {
        EmbedderArch {
            n_agents,
            n_topics,
            cheb_order: 3,
            hidden: 64,
            readout: vec![32, 16, 16],
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.readout.last().expect("validated non-empty readout")
    }

    pub fn validate(&self) -> Result<()> {
        if self.cheb_order < 1 || self.hidden < 1 || self.readout.is_empty() || self.readout.contains(&0) {
            return Err(Error::Config(format!("invalid embedder architecture {self:?}")));
        }
        if self.n_agents < 2 || self.n_topics < 1 {
            return Err(Error::Config("embedder needs N ≥ 2 and K ≥ 1".into()));
        }
        Ok(())
    }
}

/// Polynomial filter weights: `Q` stacked `in × out` blocks plus a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebFilter {
    pub order: usize,
    /// `(Q·in) × out`; block `q` occupies rows `q·in..(q+1)·in`.
    pub theta: Tensor,
    /// `out` elements.
    pub bias: Tensor,
}

impl ChebFilter {
    pub fn init(rng: &mut impl Rng, order: usize, in_dim: usize, out_dim: usize) -> Self {
        ChebFilter {
            order,
            theta: glorot(rng, order * in_dim, out_dim),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeros(order: usize, in_dim: usize, out_dim: usize) -> Self {
        ChebFilter {
            order,
            theta: Tensor::zeros(&[order * in_dim, out_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.theta.rows() / self.order
    }

    pub fn out_dim(&self) -> usize {
        self.theta.cols()
    }

    /// Block `q` as an `in × out` matrix.
    pub fn block(&self, q: usize) -> Tensor {
        let (d, o) = (self.in_dim(), self.out_dim());
        Tensor::matrix(d, o, self.theta.data()[q * d * o..(q + 1) * d * o].to_vec()).expect("block shape")
    }
}

/// Signed, degree-normalised Laplacian shifted so its spectrum sits in `[-1, 1]`.
///
/// Degrees use `|w|`; rows of isolated nodes are zero, so `L̃ = -D^{-1/2} W D^{-1/2}`.
pub fn scaled_laplacian(w: &[f64], n: usize) -> Result<Tensor> {
    if w.len() != n * n {
        return Err(Error::dim("scaled_laplacian", format!("{} entries for N={n}", w.len())));
    }
    for i in 0..n {
        for j in i + 1..n {
            if (w[i * n + j] - w[j * n + i]).abs() > 1e-12 {
                return Err(Error::Validation(format!("tie matrix asymmetric at ({i}, {j})")));
            }
        }
    }
    let deg: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| w[i * n + j].abs()).sum())
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let scale = deg[i] * deg[j];
            if scale > 0.0 {
                out[i * n + j] = -w[i * n + j] / scale.sqrt();
            }
        }
    }
    Tensor::matrix(n, n, out)
}

/// `[T_0(L̃)X | T_1(L̃)X | … | T_{Q-1}(L̃)X]` via the three-term recurrence.
pub fn cheb_basis(tape: &mut Tape, x: Var, lap: Var, order: usize) -> Result<Var> {
    let mut terms = Vec::with_capacity(order);
    terms.push(x);
    if order > 1 {
        terms.push(tape.matmul(lap, x)?);
    }
    for q in 2..order {
        let lt = tape.matmul(lap, terms[q - 1])?;
        let twice = tape.scale(lt, 2.0)?;
        terms.push(tape.sub(twice, terms[q - 2])?);
    }
    if terms.len() == 1 {
        Ok(x)
    } else {
        tape.concat_cols(&terms)
    }
}

fn apply_filter(tape: &mut Tape, basis: Var, theta: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(basis, theta)?;
    tape.add_row(y, bias)
}

/// `Σ_q T_q(L̃)·X·Θ_q + b` on the tape.
pub fn cheb_conv(tape: &mut Tape, x: Var, lap: Var, order: usize, theta: Var, bias: Var) -> Result<Var> {
    let (xr, xc) = tape.value(x).dims2()?;
    let (lr, lc) = tape.value(lap).dims2()?;
    if lr != xr || lc != xr || tape.value(theta).rows() != order * xc {
        return Err(Error::dim(
            "cheb_conv",
            format!(
                "X {:?}, L {:?}, Θ {:?}, Q={order}",
                tape.value(x).shape(),
                tape.value(lap).shape(),
                tape.value(theta).shape()
            ),
        ));
    }
    let basis = cheb_basis(tape, x, lap, order)?;
    apply_filter(tape, basis, theta, bias)
}

/// Evaluates a filter on plain tensors.
pub fn cheb_conv_eval(x: &Tensor, lap: &Tensor, filter: &ChebFilter) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, lv) = (tape.constant(x.clone()), tape.constant(lap.clone()));
    let (tv, bv) = (tape.constant(filter.theta.clone()), tape.constant(filter.bias.clone()));
    let out = cheb_conv(&mut tape, xv, lv, filter.order, tv, bv)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct FilterSlot {
    theta: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    weight: usize,
    bias: usize,
}

/// Trainable weights of the recurrent cell and the readout.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams {
    arch: EmbedderArch,
    set: ParamSet,
    xr: FilterSlot,
    hr: FilterSlot,
    xu: FilterSlot,
    hu: FilterSlot,
    xc: FilterSlot,
    hc: FilterSlot,
    reducer: Layer,
    mlp: Vec<Layer>,
}

impl EmbedderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &EmbedderArch, rng: &mut impl Rng) -> Result<Self> {
        Self::build(arch, |_, fan_in, fan_out| glorot(rng, fan_in, fan_out))
    }

    pub fn zeros(arch: &EmbedderArch) -> Result<Self> {
        Self::build(arch, |_, fan_in, fan_out| Tensor::zeros(&[fan_in, fan_out]))
    }

    fn build(arch: &EmbedderArch, mut weight: impl FnMut(&str, usize, usize) -> Tensor) -> Result<Self> {
        arch.validate()?;
        let (q, k, h) = (arch.cheb_order, arch.n_topics, arch.hidden);
        let mut set = ParamSet::new();
        let mut filter = |set: &mut ParamSet, name: &str, in_dim: usize| FilterSlot {
            theta: set.push(format!("cell.{name}.theta"), weight(name, q * in_dim, h)),
            bias: set.push(format!("cell.{name}.bias"), Tensor::zeros(&[h])),
        };
        let xr = filter(&mut set, "xr", k);
        let hr = filter(&mut set, "hr", h);
        let xu = filter(&mut set, "xu", k);
        let hu = filter(&mut set, "hu", h);
        let xc = filter(&mut set, "xc", k);
        let hc = filter(&mut set, "hc", h);
        let reducer = Layer {
            weight: set.push("readout.reduce.weight", weight("reduce", h, 1)),
            bias: set.push("readout.reduce.bias", Tensor::zeros(&[1])),
        };
        let mut mlp = Vec::new();
        let mut width = arch.n_agents;
        for (i, &out) in arch.readout.iter().enumerate() {
            mlp.push(Layer {
                weight: set.push(format!("readout.mlp{i}.weight"), weight("mlp", width, out)),
                bias: set.push(format!("readout.mlp{i}.bias"), Tensor::zeros(&[out])),
            });
            width = out;
        }
        Ok(EmbedderParams {
            arch: arch.clone(),
            set,
            xr,
            hr,
            xu,
            hu,
            xc,
            hc,
            reducer,
            mlp,
        })
    }

    pub fn arch(&self) -> &EmbedderArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.set
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    fn filter(&self, slot: FilterSlot) -> ChebFilter {
        ChebFilter {
            order: self.arch.cheb_order,
            theta: self.set.get(slot.theta).clone(),
            bias: self.set.get(slot.bias).clone(),
        }
    }

    /// The six gate filters in the order reset (x, h), update (x, h), candidate (x, h).
    pub fn cell_filters(&self) -> [ChebFilter; 6] {
        [self.xr, self.hr, self.xu, self.hu, self.xc, self.hc].map(|s| self.filter(s))
    }

    /// Overwrites one of the six gate filters (same order as [`Self::cell_filters`]).
    pub fn set_cell_filter(&mut self, index: usize, filter: ChebFilter) -> Result<()> {
        let slot = [self.xr, self.hr, self.xu, self.hu, self.xc, self.hc]
            .get(index)
            .copied()
            .ok_or_else(|| Error::Usage(format!("filter index {index} out of range")))?;
        if filter.theta.shape() != self.set.get(slot.theta).shape()
            || filter.bias.shape() != self.set.get(slot.bias).shape()
        {
            return Err(Error::dim("set_cell_filter", "filter shape differs from the cell's"));
        }
        *self.set.get_mut(slot.theta) = filter.theta;
        *self.set.get_mut(slot.bias) = filter.bias;
        Ok(())
    }
}

/// One gated recurrent update with graph-filtered gates.
pub fn gru_step(
    tape: &mut Tape,
    params: &EmbedderParams,
    vars: &[Var],
    x: Var,
    lap: Var,
    h_prev: Var,
) -> Result<Var> {
    let q = params.arch.cheb_order;
    let (n, h) = (params.arch.n_agents, params.arch.hidden);
    let (xn, xk) = tape.value(x).dims2()?;
    let (hn, hh) = tape.value(h_prev).dims2()?;
    if xn != n || xk != params.arch.n_topics || hn != n || hh != h || tape.value(lap).shape() != [n, n] {
        return Err(Error::dim(
            "gru_step",
            format!(
                "X {:?}, L {:?}, H {:?} for N={n}, K={}, hidden={h}",
                tape.value(x).shape(),
                tape.value(lap).shape(),
                tape.value(h_prev).shape(),
                params.arch.n_topics
            ),
        ));
    }
    let conv = |tape: &mut Tape, basis: Var, s: FilterSlot| apply_filter(tape, basis, vars[s.theta], vars[s.bias]);

    let x_basis = cheb_basis(tape, x, lap, q)?;
    let h_basis = cheb_basis(tape, h_prev, lap, q)?;

    let a = conv(tape, x_basis, params.xr)?;
    let b = conv(tape, h_basis, params.hr)?;
    let r_pre = tape.add(a, b)?;
    let r = tape.sigmoid(r_pre)?;

    let a = conv(tape, x_basis, params.xu)?;
    let b = conv(tape, h_basis, params.hu)?;
    let u_pre = tape.add(a, b)?;
    let u = tape.sigmoid(u_pre)?;

    let rh = tape.mul(r, h_prev)?;
    let rh_basis = cheb_basis(tape, rh, lap, q)?;
    let a = conv(tape, x_basis, params.xc)?;
    let b = conv(tape, rh_basis, params.hc)?;
    let c_pre = tape.add(a, b)?;
    let c = tape.tanh(c_pre)?;

    // H = u ⊙ H_prev + (1 - u) ⊙ c = c + u ⊙ (H_prev - c)
    let diff = tape.sub(h_prev, c)?;
    let gated = tape.mul(u, diff)?;
    tape.add(c, gated)
}

/// Evaluates [`gru_step`] on plain tensors.
pub fn gru_step_eval(params: &EmbedderParams, x: &Tensor, lap: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.set.bind(&mut tape, false);
    let (xv, lv, hv) = (
        tape.constant(x.clone()),
        tape.constant(lap.clone()),
        tape.constant(h_prev.clone()),
    );
    let out = gru_step(&mut tape, params, &vars, xv, lv, hv)?;
    Ok(tape.value(out).clone())
}

/// Opinions at snapshot `t` as an `N × K` real matrix.
pub fn opinion_features(trace: &GraphTrace, t: usize) -> Tensor {
    let data = trace.z_at(t).iter().map(|&v| f64::from(v)).collect();
    Tensor::matrix(trace.n_agents, trace.n_topics, data).expect("trace shape")
}

/// Records the full embedding of `trace` on `tape`, returning a `1 × D` row.
pub fn embed_on_tape(tape: &mut Tape, params: &EmbedderParams, vars: &[Var], trace: &GraphTrace) -> Result<Var> {
    let arch = &params.arch;
    if trace.n_agents != arch.n_agents || trace.n_topics != arch.n_topics {
        return Err(Error::Usage(format!(
            "trace has N={}, K={} but the embedder expects N={}, K={}",
            trace.n_agents, trace.n_topics, arch.n_agents, arch.n_topics
        )));
    }
    let n = arch.n_agents;
    let mut h = tape.constant(Tensor::zeros(&[n, arch.hidden]));
    for t in 0..trace.n_snapshots() {
        let x = tape.constant(opinion_features(trace, t));
        let lap = tape.constant(scaled_laplacian(trace.w_at(t), n)?);
        h = gru_step(tape, params, vars, x, lap, h)?;
    }

    let reduced = tape.matmul(h, vars[params.reducer.weight])?;
    let reduced = tape.add_row(reduced, vars[params.reducer.bias])?;
    let mut y = tape.reshape(reduced, &[1, n])?;
    for (i, layer) in params.mlp.iter().enumerate() {
        y = tape.matmul(y, vars[layer.weight])?;
        y = tape.add_row(y, vars[layer.bias])?;
        if i + 1 < params.mlp.len() {
            y = tape.relu(y)?;
        }
    }
    Ok(y)
}

/// Embedding vector of a trace.
pub fn embed_trace(params: &EmbedderParams, trace: &GraphTrace) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.set.bind(&mut tape, false);
    let out = embed_on_tape(&mut tape, params, &vars, trace)?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abm::{simulate, stream_rng, ModelParams, SimConfig, TieInit};

    fn small_trace(n: usize, k: usize, t: usize, seed: u64) -> GraphTrace {
        let cfg = SimConfig {
            n_agents: n,
            n_topics: k,
            n_steps: t,
            seed,
            tie_init: TieInit::default(),
        };
        simulate(&ModelParams::new(1.5, 0.6, 0.3, 0.5), &cfg).unwrap()
    }

    #[test]
    fn empty_graph_laplacian_is_zero() {
        let l = scaled_laplacian(&[0.0; 9], 3).unwrap();
        assert_eq!(l, Tensor::zeros(&[3, 3]));
    }

    #[test]
    fn two_node_laplacian() {
        let l = scaled_laplacian(&[0.0, 0.5, 0.5, 0.0], 2).unwrap();
        assert_eq!(l.data(), &[0.0, -1.0, -1.0, 0.0]);
        let l = scaled_laplacian(&[0.0, -0.25, -0.25, 0.0], 2).unwrap();
        assert_eq!(l.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn asymmetric_ties_rejected() {
        let err = scaled_laplacian(&[0.0, 0.5, 0.4, 0.0], 2).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn order_one_ignores_graph() {
        let mut rng = stream_rng(1, 0);
        let f = ChebFilter {
            bias: Tensor::new(vec![2], vec![0.1, -0.3]).unwrap(),
            ..ChebFilter::init(&mut rng, 1, 3, 2)
        };
        let x = glorot(&mut rng, 4, 3);
        let lap = scaled_laplacian(small_trace(4, 1, 1, 0).w_at(0), 4).unwrap();
        let out = cheb_conv_eval(&x, &lap, &f).unwrap();
        let mut expected = x.matmul(&f.theta).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                expected.set(i, j, expected.at(i, j) + f.bias.data()[j]);
            }
        }
        assert!(out.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn zero_laplacian_keeps_even_terms() {
        // T_q(0) = 0 for odd q and (-1)^{q/2} I for even q.
        let mut rng = stream_rng(2, 0);
        let f = ChebFilter::init(&mut rng, 4, 2, 3);
        let x = glorot(&mut rng, 5, 2);
        let out = cheb_conv_eval(&x, &Tensor::zeros(&[5, 5]), &f).unwrap();
        let t0 = x.matmul(&f.block(0)).unwrap();
        let t2 = x.matmul(&f.block(2)).unwrap();
        let expected = t0.zip_map(&t2, |a, b| a - b).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn zero_cell_keeps_zero_state() {
        let arch = EmbedderArch::new(5, 2);
        let params = EmbedderParams::zeros(&arch).unwrap();
        let trace = small_trace(5, 2, 1, 3);
        let lap = scaled_laplacian(trace.w_at(0), 5).unwrap();
        let h = gru_step_eval(&params, &opinion_features(&trace, 0), &lap, &Tensor::zeros(&[5, 64])).unwrap();
        assert_eq!(h, Tensor::zeros(&[5, 64]));
    }

    #[test]
    fn hidden_state_stays_bounded() {
        let arch = EmbedderArch::new(6, 2);
        let mut rng = stream_rng(4, 0);
        let params = EmbedderParams::init(&arch, &mut rng).unwrap();
        let trace = small_trace(6, 2, 1, 5);
        let lap = scaled_laplacian(trace.w_at(1), 6).unwrap();
        let h_prev = glorot(&mut rng, 6, 64).map(|x| 8.0 * x);
        let bound = h_prev.max_abs().max(1.0);
        let h = gru_step_eval(&params, &opinion_features(&trace, 1), &lap, &h_prev).unwrap();
        assert!(h.max_abs() < bound);
    }

    #[test]
    fn embedding_shape_and_purity() {
        for (n, k, t) in [(4, 1, 1), (7, 3, 4)] {
            let arch = EmbedderArch::new(n, k);
            let params = EmbedderParams::init(&arch, &mut stream_rng(6, 0)).unwrap();
            let trace = small_trace(n, k, t, 8);
            let a = embed_trace(&params, &trace).unwrap();
            assert_eq!(a.len(), 16);
            assert_eq!(a, embed_trace(&params, &trace).unwrap());
        }
    }

    #[test]
    fn initial_ties_affect_embedding() {
        let arch = EmbedderArch::new(5, 2);
        let params = EmbedderParams::init(&arch, &mut stream_rng(7, 0)).unwrap();
        let trace = small_trace(5, 2, 3, 9);
        let mut perturbed = trace.clone();
        perturbed.w[1] = (perturbed.w[1] + 0.5).min(1.0) - 0.9;
        perturbed.w[5] = perturbed.w[1];
        let a = embed_trace(&params, &trace).unwrap();
        let b = embed_trace(&params, &perturbed).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn mismatched_trace_rejected() {
        let params = EmbedderParams::zeros(&EmbedderArch::new(5, 2)).unwrap();
        assert!(matches!(embed_trace(&params, &small_trace(4, 2, 1, 0)), Err(Error::Usage(_))));
    }
}
