//! Simulation-based calibration of a quickly trained small posterior: for
//! each of 100 prior draws, count how many of 100 posterior draws fall below
//! the truth, then KS-test the randomised ranks against uniformity.

use graph_npe::abm::{stream_rng, PriorBox, SimConfig, PARAM_NAMES};
use graph_npe::diagnostics::sbc;
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
        n_sims: 400,
        batch_size: 25,
        lr: 2e-3,
        max_epochs: 60,
        patience_epochs: 10,
        seed: 4,
        ..TrainConfig::default()
    };
    let corpus = generate_corpus(&sim, &prior, cfg.n_sims, 4, 1)?;
    let (model, report) = train(&corpus, &arch, &cfg)?;
    println!("trained: best validation loss {:.4} at epoch {}", report.best_val_loss, report.best_epoch);

    let result = sbc(&model, &sim, &prior, 100, 100, &mut stream_rng(104, 0))?;
    for (d, name) in PARAM_NAMES.iter().enumerate() {
        let mut hist = [0usize; 10];
        for r in &result.ranks {
            hist[(r[d] * 10 / (result.n_draws + 1)).min(9)] += 1;
        }
        println!(
            "{name:>4}: KS D = {:.3}, p = {:.3}, rank deciles {:?}",
            result.ks[d].statistic, result.ks[d].p_value, hist
        );
    }
    println!("minimum p-value {:.3}", result.min_p_value());
    Ok(())
}
