//! Posterior predictive check: train a small posterior, sample it for one
//! observation, re-simulate each draw and see where the observed summaries
//! fall among the simulated ones.

use graph_npe::abm::{simulate, stream_rng, ModelParams, PriorBox, SimConfig};
use graph_npe::diagnostics::{ppc, Summary};
use graph_npe::model::ArchConfig;
use graph_npe::training::{generate_corpus, train, TrainConfig};

fn main() -> graph_npe::Result<()> {
    let sim = SimConfig {
        n_agents: 10,
        n_topics: 3,
        n_steps: 10,
        ..SimConfig::default()
    };
    let prior = PriorBox::default();
    let arch = ArchConfig {
        hidden: 16,
        readout: vec![16, 8],
        flow_blocks: 3,
        flow_hidden: 32,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        n_sims: 300,
        batch_size: 25,
        lr: 2e-3,
        max_epochs: 40,
        patience_epochs: 8,
        ..TrainConfig::default()
    };
    let corpus = generate_corpus(&sim, &prior, cfg.n_sims, 0, 1)?;
    let (model, _) = train(&corpus, &arch, &cfg)?;

    let obs = simulate(&ModelParams::new(2.0, 0.3, 0.6, 0.7), &sim.with_seed(99))?;
    let checks = ppc(&model, &obs, &sim, 500, &Summary::DEFAULTS, &mut stream_rng(5, 1))?;
    println!("{:<20} {:>9} {:>9} {:>9} {:>9} {:>9}", "summary", "observed", "q05", "q50", "q95", "rank");
    for c in &checks {
        let q = c.simulated_quantiles;
        println!(
            "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.3}{}",
            format!("{:?}", c.summary),
            c.observed,
            q[0],
            q[2],
            q[4],
            c.observed_quantile,
            if c.within(0.025, 0.975) { "" } else { "  ← outside central 95%" }
        );
    }
    Ok(())
}
