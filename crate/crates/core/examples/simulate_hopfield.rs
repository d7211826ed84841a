//! Simulates the opinion/tie model at a fixed parameter vector and prints how
//! polarisation and tie strength evolve.
//!
//! ```text
//! cargo run --example simulate_hopfield -- 1.0 0.8 0.5 0.5
//! ```

use graph_npe::abm::{simulate, ModelParams, SimConfig};
use graph_npe::diagnostics::Summary;

fn main() -> graph_npe::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let theta = match args.as_slice() {
        [rho, eps, lam, p] => ModelParams::new(*rho, *eps, *lam, *p),
        _ => ModelParams::new(1.0, 0.8, 0.5, 0.5),
    };
    let config = SimConfig::default();
    let trace = simulate(&theta, &config)?;
    trace.validate()?;

    let (n, k) = (trace.n_agents, trace.n_topics);
    println!("θ = {:?}, N = {n}, K = {k}, T = {}", theta.to_array(), trace.n_steps);
    println!("{:>4} {:>12} {:>12} {:>12}", "t", "mean z", "mean |w|", "mean w");
    for t in 0..trace.n_snapshots() {
        let z = trace.z_at(t);
        let w = trace.w_at(t);
        let mean_z = z.iter().map(|&v| f64::from(v)).sum::<f64>() / z.len() as f64;
        let pairs = (n * (n - 1)) as f64;
        let abs_w = w.iter().map(|x| x.abs()).sum::<f64>() / pairs;
        let mean_w = w.iter().sum::<f64>() / pairs;
        println!("{t:>4} {mean_z:>12.4} {abs_w:>12.4} {mean_w:>12.4}");
    }
    for s in Summary::DEFAULTS {
        println!("{s:?}: {:.4}", s.evaluate(&trace));
    }
    Ok(())
}
