//! Trains and evaluates on an in-memory synthetic dataset.
//!
//! `cargo run --release --example synthetic_benchmark -- [spec.json] [train.json]`

use cras::crd::{train, TrainConfig};
use cras::scoring::{evaluate, ScoreConfig};
use cras::synth::{sample_dataset, SynthSpec};

fn read_or_default<T: serde::de::DeserializeOwned + Default>(arg: Option<String>) -> T {
    match arg {
        Some(text) if text.trim_start().starts_with('{') => serde_json::from_str(&text).expect("inline json"),
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path).expect("readable file")).expect("json"),
        None => T::default(),
    }
}

fn main() -> cras::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CRAS_LOG_LEVEL", "warn")).init();
    let mut args = std::env::args().skip(1);
    let spec: SynthSpec = read_or_default(args.next());
    let cfg: TrainConfig = read_or_default(args.next());
    let data = sample_dataset(&spec)?;
    let start = std::time::Instant::now();
    let outcome = train(&data.train, &data.categories, &cfg)?;
    let score = ScoreConfig {
        feature_mode: cfg.feature_mode,
        ..ScoreConfig::default()
    };
    let (report, _) = evaluate(&data.test, &data.categories, &outcome.model, &outcome.centers, &score)?;
    print!("{}", report.to_table());
    let losses = &outcome.epoch_losses;
    println!(
        "loss first {:.5} last {:.5}; {:.1}s",
        losses[0],
        losses[losses.len() - 1],
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
