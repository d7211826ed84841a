//! Reproduces the headline experiment: 1000 simulations of the default
//! 20-agent, 3-topic, 25-step model, a jointly trained embedder and flow, and
//! 10⁴ posterior draws for an observation generated at
//! θ* = (ρ, ε, λ, p) = (1, 0.8, 0.5, 0.5). Writes corner-plot data as JSON.
//!
//! Training takes several minutes on a single core.
//!
//! ```text
//! cargo run --release --example posterior_figure -- corner.json
//! ```

use graph_npe::abm::{simulate, stream_rng, ModelParams, PriorBox, SimConfig, PARAM_NAMES};
use graph_npe::diagnostics::{central_interval, corner_data, posterior_sample, truth_density_check, DEFAULT_BINS};
use graph_npe::model::ArchConfig;
use graph_npe::store;
use graph_npe::training::{generate_corpus, train_with_progress, TrainConfig};

fn main() -> graph_npe::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "corner.json".into());
    let sim = SimConfig::default();
    let prior = PriorBox::default();
    let cfg = TrainConfig::default();

    let corpus = generate_corpus(&sim, &prior, cfg.n_sims, 0, 1)?;
    let (mut model, report) = train_with_progress(&corpus, &ArchConfig::default(), &cfg, |r| {
        eprintln!("epoch {:>3}  train {:>8.4}  val {:>8.4}", r.epoch, r.train_loss, r.val_loss);
    })?;
    model.round_to_f32();
    println!(
        "best validation loss {:.4} at epoch {} (initial {:.4})",
        report.best_val_loss, report.best_epoch, report.initial_val_loss
    );

    let truth = ModelParams::new(1.0, 0.8, 0.5, 0.5);
    let obs = simulate(&truth, &sim.with_seed(0))?;
    let draws = posterior_sample(&model, &obs, 10_000, &mut stream_rng(0, 0))?;
    let check = truth_density_check(&model, &obs, &truth)?;
    println!(
        "log q(θ* | x) = {:.3} vs log prior = {:.3} → {}",
        check.log_posterior,
        check.log_prior,
        if check.exceeds { "concentrated" } else { "not concentrated" }
    );
    let t = truth.to_array();
    for (d, name) in PARAM_NAMES.iter().enumerate() {
        let (lo, hi) = central_interval(&draws.thetas, d, 0.95);
        let hit = if (lo..=hi).contains(&t[d]) { "covered" } else { "missed" };
        println!("{name:>4}: truth {:.2}, 95% interval [{lo:.3}, {hi:.3}] {hit}", t[d]);
    }

    let corner = corner_data(&draws.thetas, DEFAULT_BINS, Some(truth), &prior)?;
    store::write_json(std::path::Path::new(&out), &corner)?;
    println!("corner data written to {out}");
    Ok(())
}
