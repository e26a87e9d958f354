//! Runs the standard component variants on synthetic data over several seeds.
//!
//! `cargo run --release --example ablation_study -- [spec.json] [train.json] [seeds]`

use cras::crd::TrainConfig;
use cras::scoring::ScoreConfig;
use cras::synth::{run_ablation, sample_dataset, standard_variants, SynthSpec};

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
    let base: TrainConfig = read_or_default(args.next());
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seed count"));
    let only: Option<Vec<String>> = args.next().map(|s| s.split(',').map(str::to_string).collect());
    for seed in 0..seeds {
        let data = sample_dataset(&SynthSpec { seed, ..spec.clone() })?;
        let cfg = TrainConfig {
            seed,
            noise: cras::dafs::NoiseConfig { seed, ..base.noise.clone() },
            ..base.clone()
        };
        let score = ScoreConfig {
            feature_mode: cfg.feature_mode,
            ..ScoreConfig::default()
        };
        let variants: Vec<_> = standard_variants(&cfg)
            .into_iter()
            .filter(|v| only.as_ref().is_none_or(|o| o.contains(&v.name)))
            .collect();
        let table = run_ablation(&data.train, &data.test, &data.categories, &cfg, &score, &variants)?;
        println!("seed {seed}");
        print!("{}", table.to_table());
    }
    Ok(())
}
