//! Trains the surrogate network on data from the true bicycle model.
//!
//! cargo run --release --example train_surrogate -- [config.json] [model_out.json]

use enkmp::dynamics::BicycleParams;
use enkmp::learning::{generate_dataset, holdout_rmse, initial_model, train, TrainingConfig};

fn main() -> enkmp::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = match args.first() {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainingConfig::default(),
    };
    let out = args.get(1).map_or("surrogate.json", String::as_str);
    let params = BicycleParams::default();

    let data = generate_dataset(&config, &params)?;
    println!("{} samples ({} validation)", data.len(), data.validation_idx.len());
    let started = std::time::Instant::now();
    let report = train(&initial_model(&config), &data, &config)?;
    for e in report.history.iter().step_by((config.epochs / 10).max(1)) {
        println!("epoch {:4}  train {:.3e}  validation {:.3e}", e.epoch, e.train, e.validation);
    }
    println!("trained in {:.1} s", started.elapsed().as_secs_f64());
    println!("validation rmse (x, y, heading, speed rates): {:?}", report.validation_rmse);
    let fresh = holdout_rmse(&report.model, &config, &params, config.rng_seed + 1000)?;
    println!("fresh holdout rmse: {fresh:?}");
    report.model.save(out)?;
    println!("saved {out}");
    Ok(())
}
