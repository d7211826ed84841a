//! Conditional MAF basics: density at the box centre, sampling, and agreement
//! between the density carried along the sampling path and a fresh evaluation.

use graph_npe::abm::{stream_rng, PriorBox, PARAM_NAMES};
use graph_npe::flow::{log_prob_batch, maf_log_prob, maf_sample, BoxTransform, FlowArch, FlowParams};

fn main() -> graph_npe::Result<()> {
    let arch = FlowArch::default();
    let bx = BoxTransform::from_prior(&PriorBox::default());
    let context = vec![0.0; arch.context_dim];

    let zero = FlowParams::zeros(&arch)?;
    let centre = maf_log_prob(&zero, &bx, &[2.5, 0.5, 0.5, 0.5], &context)?;
    println!("zero flow, log q(box centre) = {centre:.6}");

    let flow = FlowParams::init(&arch, &mut stream_rng(3, 0))?;
    let draws = maf_sample(&flow, &bx, &context, &mut stream_rng(3, 1), 5_000)?;
    let thetas: Vec<Vec<f64>> = draws.iter().map(|d| d.theta.clone()).collect();
    let fresh = log_prob_batch(&flow, &bx, &thetas, &context)?;
    let worst = draws
        .iter()
        .zip(&fresh)
        .map(|(d, f)| (d.log_prob - f).abs())
        .fold(0.0, f64::max);
    println!("5000 draws; max |path log q - evaluated log q| = {worst:.2e}");

    for (d, name) in PARAM_NAMES.iter().enumerate() {
        let mut v: Vec<f64> = thetas.iter().map(|t| t[d]).collect();
        v.sort_by(f64::total_cmp);
        println!(
            "{name:>4}: median {:.3}, 5%–95% [{:.3}, {:.3}] within ({}, {})",
            v[v.len() / 2],
            v[v.len() / 20],
            v[v.len() * 19 / 20],
            bx.lower[d],
            bx.upper[d]
        );
    }
    Ok(())
}
