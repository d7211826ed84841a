//! End-to-end neural posterior estimation at a small scale: simulate a
//! corpus, train the embedder and flow jointly, then sample the posterior for
//! a held-out observation. Finishes in well under a minute.

use graph_npe::abm::{simulate, stream_rng, ModelParams, PriorBox, SimConfig, PARAM_NAMES};
use graph_npe::diagnostics::{central_interval, posterior_sample, truth_density_check};
use graph_npe::model::ArchConfig;
use graph_npe::training::{generate_corpus, train_with_progress, TrainConfig};

fn main() -> graph_npe::Result<()> {
    let sim = SimConfig {
        n_agents: 10,
        n_topics: 3,
        n_steps: 8,
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
    let (mut model, report) = train_with_progress(&corpus, &arch, &cfg, |r| {
        println!("epoch {:>3}  train {:>8.4}  val {:>8.4}", r.epoch, r.train_loss, r.val_loss);
    })?;
    model.round_to_f32();
    println!(
        "initial val {:.4} → best {:.4} at epoch {} ({:?})",
        report.initial_val_loss, report.best_val_loss, report.best_epoch, report.stop_reason
    );

    let truth = ModelParams::new(1.0, 0.8, 0.5, 0.5);
    let obs = simulate(&truth, &sim.with_seed(12_345))?;
    let draws = posterior_sample(&model, &obs, 4_000, &mut stream_rng(1, 0))?;
    let check = truth_density_check(&model, &obs, &truth)?;
    println!(
        "log q(θ*) = {:.3}, log prior = {:.3}",
        check.log_posterior, check.log_prior
    );
    let t = truth.to_array();
    for (d, name) in PARAM_NAMES.iter().enumerate() {
        let (lo, hi) = central_interval(&draws.thetas, d, 0.9);
        println!("{name:>4}: truth {:.2}, 90% interval [{lo:.3}, {hi:.3}]", t[d]);
    }
    Ok(())
}
