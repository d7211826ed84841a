//! Embeds simulated traces with a randomly initialised graph-recurrent
//! embedder and shows that traces from different regimes land in different
//! places even before training.

use graph_npe::abm::{simulate, stream_rng, ModelParams, SimConfig};
use graph_npe::embedder::{embed_trace, scaled_laplacian, EmbedderArch, EmbedderParams};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn main() -> graph_npe::Result<()> {
    let config = SimConfig::default();
    let arch = EmbedderArch::new(config.n_agents, config.n_topics);
    let params = EmbedderParams::init(&arch, &mut stream_rng(0, 1))?;
    println!(
        "embedder: Q = {}, hidden = {}, readout {:?}, {} weights",
        arch.cheb_order,
        arch.hidden,
        arch.readout,
        params.params().num_scalars()
    );

    let trace = simulate(&ModelParams::new(1.0, 0.8, 0.5, 0.5), &config)?;
    let lap = scaled_laplacian(trace.w_at(trace.n_steps), trace.n_agents)?;
    println!("final scaled Laplacian: max |entry| = {:.4}", lap.max_abs());

    let regimes = [
        ("weak coupling, noisy", ModelParams::new(0.2, 0.9, 0.1, 0.5)),
        ("strong coupling", ModelParams::new(4.5, 0.1, 0.5, 0.5)),
        ("fast tie learning", ModelParams::new(1.0, 0.5, 0.95, 0.5)),
        ("mostly positive start", ModelParams::new(1.0, 0.5, 0.5, 0.95)),
    ];
    let embeddings: Vec<Vec<f64>> = regimes
        .iter()
        .map(|(_, theta)| embed_trace(&params, &simulate(theta, &config)?))
        .collect::<graph_npe::Result<_>>()?;
    for ((name, _), e) in regimes.iter().zip(&embeddings) {
        let head: Vec<String> = e.iter().take(4).map(|x| format!("{x:+.3}")).collect();
        println!("{name:<24} |e| = {:.3}  e[..4] = [{}]", norm(e), head.join(", "));
    }
    println!("pairwise distances:");
    for i in 0..embeddings.len() {
        let row: Vec<String> = (0..embeddings.len())
            .map(|j| {
                let d: Vec<f64> = embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| a - b).collect();
                format!("{:6.3}", norm(&d))
            })
            .collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
