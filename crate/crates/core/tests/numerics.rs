mod common;

use common::*;
use graph_npe::numerics::*;
use proptest::prelude::*;
use rand::Rng;

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).unwrap()
}

fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| mat(rows, cols, d))
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((m, k, n) in (1usize..7, 1usize..7, 1usize..7), seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_matrix(&mut r, m, k, 2.0);
        let b = random_matrix(&mut r, k, n, 2.0);
        let want = mat(m, n, dense_matmul(a.data(), b.data(), m, k, n));
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn matmul_is_associative(a in arb_matrix(3, 4), b in arb_matrix(4, 2), c in arb_matrix(2, 5)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }
}

/// Gradient of `Σ c ⊙ f(x)` for a unary tape op, against central differences.
fn check_unary(op: UnaryOp, reference: fn(f64) -> f64, lo: f64, hi: f64) {
    let mut r = rng(20);
    let x = Tensor::matrix(3, 4, (0..12).map(|_| r.gen_range(lo..hi)).collect()).unwrap();
    let c = random_matrix(&mut r, 3, 4, 1.0);
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let cv = tape.constant(c.clone());
    let y = tape.unary(op, xv).unwrap();
    let yc = tape.mul(y, cv).unwrap();
    let loss = tape.sum(yc).unwrap();
    for (i, v) in tape.value(y).data().iter().enumerate() {
        assert!((v - reference(x.data()[i])).abs() < 1e-12, "{op:?} value");
    }
    let g = tape.backward(loss).unwrap().wrt(&tape, xv);
    let mut f = |z: &[f64]| z.iter().zip(c.data()).map(|(a, b)| reference(*a) * b).sum::<f64>();
    for i in 0..12 {
        let fd = central_difference(&mut f, x.data(), i, FD_STEP);
        assert!(rel_err(g.data()[i], fd, FD_FLOOR) < 1e-6, "{op:?} gradient at {i}");
    }
}

#[test]
fn unary_gradients() {
    check_unary(UnaryOp::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()), -4.0, 4.0);
    check_unary(UnaryOp::Tanh, f64::tanh, -3.0, 3.0);
    check_unary(UnaryOp::Exp, f64::exp, -2.0, 2.0);
    check_unary(UnaryOp::Log, f64::ln, 0.2, 3.0);
    check_unary(UnaryOp::Neg, |x| -x, -2.0, 2.0);
    // stay away from the kink
    check_unary(UnaryOp::Relu, |x| x.max(0.0), 0.1, 2.0);
    check_unary(UnaryOp::Relu, |x| x.max(0.0), -2.0, -0.1);
}

/// Composite expression exercising the structural ops, checked coordinate-wise.
fn composite(tape: &mut Tape, a: Var, b: Var, bias: Var) -> Var {
    let ab = tape.matmul(a, b).unwrap(); // 3×4
    let ab = tape.add_row(ab, bias).unwrap();
    let left = tape.slice_cols(ab, 0, 2).unwrap();
    let right = tape.slice_cols(ab, 2, 4).unwrap();
    let prod = tape.mul(left, right).unwrap();
    let cat = tape.concat_cols(&[prod, left]).unwrap(); // 3×4
    let stacked = tape.concat_rows(&[cat, ab]).unwrap(); // 6×4
    let flat = tape.reshape(stacked, &[4, 6]).unwrap();
    let th = tape.tanh(flat).unwrap();
    let rs = tape.row_sums(th).unwrap();
    let sq = tape.mul(rs, rs).unwrap();
    let sc = tape.scale(sq, 0.7).unwrap();
    let diff = tape.sub(sc, rs).unwrap();
    tape.sum(diff).unwrap()
}

#[test]
fn structural_op_gradients() {
    let mut r = rng(21);
    let a = random_matrix(&mut r, 3, 5, 1.0);
    let b = random_matrix(&mut r, 5, 4, 1.0);
    let bias = Tensor::new(vec![4], (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let inputs = [a, b, bias];

    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let v: Vec<Var> = vals.iter().map(|x| t.constant(x.clone())).collect();
        let out = composite(&mut t, v[0], v[1], v[2]);
        t.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = composite(&mut tape, vars[0], vars[1], vars[2]);
    let grads = tape.backward(out).unwrap();
    for (which, v) in vars.iter().enumerate() {
        let g = grads.wrt(&tape, *v);
        let base = inputs[which].clone();
        for i in 0..base.len() {
            let mut f = |x: &[f64]| {
                let mut vals = inputs.to_vec();
                vals[which] = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
                eval(&vals)
            };
            let fd = central_difference(&mut f, base.data(), i, FD_STEP);
            assert!(rel_err(g.data()[i], fd, FD_FLOOR) < 1e-6, "input {which}, entry {i}");
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let mut r = rng(22);
    let a = random_matrix(&mut r, 3, 5, 1.0);
    let b = random_matrix(&mut r, 5, 4, 1.0);
    let bias = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let v = [tape.param(a.clone()), tape.param(b.clone()), tape.param(bias.clone())];
        let out = composite(&mut tape, v[0], v[1], v[2]);
        let g = tape.backward(out).unwrap();
        v.iter().flat_map(|&x| g.wrt(&tape, x).into_data()).map(f64::to_bits).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_minimises_a_quadratic() {
    let target = [1.5, -2.0, 0.25];
    let mut x = Tensor::zeros(&[3]);
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(cfg, [&x]);
    for _ in 0..2000 {
        let g: Vec<f64> = x.data().iter().zip(target).map(|(a, t)| 2.0 * (a - t)).collect();
        adam_step(&mut [&mut x], &[Tensor::new(vec![3], g).unwrap()], &mut state).unwrap();
    }
    for (a, t) in x.data().iter().zip(target) {
        assert!((a - t).abs() < 1e-3, "{a} vs {t}");
    }
}

#[test]
fn adam_first_step_is_bias_corrected() {
    let mut p = Tensor::scalar(1.0);
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(cfg, [&p]);
    adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut state).unwrap();
    assert!((p.item() - 0.9).abs() < 1e-6);
}
