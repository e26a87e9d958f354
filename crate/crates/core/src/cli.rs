//! Command-line interface.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{bench_hpi, format_rows, BenchConfig};
use crate::centers::{CenterBank, CenterMode, RefreshPolicy};
use crate::config::{RunConfig, CENTERS_DIR, CHECKPOINT, REPORT, SCORES_DIR, TRAIN_LOG};
use crate::crd::{gradient_check, train, FeatureMode, Objective};
use crate::dataset::{group_by_category, load_split, Sample};
use crate::error::{CrasError, Result};
use crate::nn::ModelParams;
use crate::scoring::{build_report, score_samples, write_score_maps};
use crate::synth::{generate, run_ablation, sample_dataset, standard_variants, SynthSpec};
use crate::tensor::FeatureMap;
use crate::tensor_store::{
    decode_tensor, encode_tensor, load_manifest, write_atomic, write_feature_map, write_manifest, DatasetManifest,
    ManifestEntry, Split, Tensor,
};

#[derive(Parser, Debug)]
#[command(name = "cras", version, about = "Multi-class feature-space anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge per-level feature files into one feature map per sample.
    Prep(CommonArgs),
    /// Compute class centers from the training split.
    BuildCenters {
        #[command(flatten)]
        common: CommonArgs,
        /// Adapter weights to use; a fresh near-identity adapter otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train adapter and discriminator.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write score maps for the test split.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        score: ScoreArgs,
    },
    /// Score the test split and write a metrics report.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        score: ScoreArgs,
    },
    /// Generate a synthetic feature dataset.
    SynthGen {
        /// JSON spec file; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        heteroscedastic: bool,
        /// Generate even a degenerate spec.
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate the standard component variants.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Time global-to-local against exhaustive center matching.
    BenchHpi {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        classes: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
    },
    /// Gradient check and file-format round trips.
    Selfcheck,
}

#[derive(Args, Debug, Clone, Default)]
struct CommonArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-worker execution with bit-reproducible results.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_adapter: Option<f64>,
    #[arg(long)]
    lr_discriminator: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// raw, residual or raw+residual.
    #[arg(long)]
    feature_mode: Option<FeatureMode>,
    #[arg(long, value_parser = parse_refresh)]
    refresh_policy: Option<RefreshPolicy>,
    #[arg(long, value_parser = parse_center_mode)]
    center_mode: Option<CenterMode>,
}

#[derive(Args, Debug, Clone, Default)]
struct ScoreArgs {
    /// Directory holding checkpoint.crmd and centers/; defaults to --out.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    smooth_sigma: Option<f64>,
    /// Also write 8-bit PGM heatmaps.
    #[arg(long)]
    heatmaps: bool,
}

fn parse_refresh(s: &str) -> std::result::Result<RefreshPolicy, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected once or per-epoch, got {s}"))
}

fn parse_center_mode(s: &str) -> std::result::Result<CenterMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("expected mean or single-sample, got {s}"))
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("CRAS_LOG_LEVEL", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn base_config(common: &CommonArgs, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => RunConfig::from_file(path)?,
        (None, Some(path)) if path.is_file() => RunConfig::from_file(path)?,
        _ => RunConfig::default(),
    };
    if let Some(m) = &common.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    if let Some(w) = common.workers {
        cfg.train.workers = w;
    }
    Ok(cfg)
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr_adapter {
        t.lr_adapter = v;
    }
    if let Some(v) = a.lr_discriminator {
        t.lr_discriminator = v;
    }
    if let Some(v) = a.sigma {
        t.noise.sigma = v;
    }
    if let Some(v) = a.beta {
        t.noise.beta = v;
    }
    if let Some(v) = a.feature_mode {
        t.feature_mode = v;
    }
    if let Some(v) = a.refresh_policy {
        t.refresh_policy = v;
    }
    if let Some(v) = a.center_mode {
        t.center_mode = v;
    }
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CrasError::io(dir, e))?;
    cfg.write_resolved(dir)?;
    info!("resolved config: {}", serde_json::to_string(cfg)?);
    Ok(())
}

struct Loaded {
    manifest: DatasetManifest,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

fn load_data(cfg: &RunConfig, need_train: bool, need_test: bool) -> Result<Loaded> {
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let train = if need_train { load_split(&manifest, Split::Train, &cfg.prep)? } else { Vec::new() };
    let test = if need_test { load_split(&manifest, Split::Test, &cfg.prep)? } else { Vec::new() };
    Ok(Loaded { manifest, train, test })
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Prep(common) => {
            let cfg = base_config(&common, None)?.resolve()?;
            prepare_output(&cfg)?;
            cmd_prep(&cfg)
        }
        Command::BuildCenters { common, checkpoint } => {
            let cfg = base_config(&common, None)?.resolve()?;
            prepare_output(&cfg)?;
            cmd_build_centers(&cfg, checkpoint.as_deref())
        }
        Command::Train { common, train: args } => {
            let mut cfg = base_config(&common, None)?;
            apply_train_args(&mut cfg, &args);
            let cfg = cfg.resolve()?;
            prepare_output(&cfg)?;
            cmd_train(&cfg)
        }
        Command::Infer { common, score } => {
            let (cfg, run_dir) = score_config(&common, &score)?;
            cmd_score(&cfg, &run_dir, score.heatmaps, false)
        }
        Command::Eval { common, score } => {
            let (cfg, run_dir) = score_config(&common, &score)?;
            cmd_score(&cfg, &run_dir, score.heatmaps, true)
        }
        Command::SynthGen {
            spec,
            out,
            seed,
            classes,
            heteroscedastic,
            force,
        } => {
            let mut s = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| CrasError::Config(format!("spec {}: {e}", path.display())))?;
                    serde_json::from_str(&text).map_err(|e| CrasError::Config(format!("spec {}: {e}", path.display())))?
                }
                None => SynthSpec::default(),
            };
            if let Some(v) = seed {
                s.seed = v;
            }
            if let Some(v) = classes {
                s.n_classes = v;
            }
            s.heteroscedastic |= heteroscedastic;
            s.force |= force;
            let manifest = generate(&s, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Ablate { common, train: args } => {
            let mut cfg = base_config(&common, None)?;
            apply_train_args(&mut cfg, &args);
            let cfg = cfg.resolve()?;
            prepare_output(&cfg)?;
            let data = load_data(&cfg, true, true)?;
            let table = run_ablation(
                &data.train,
                &data.test,
                &data.manifest.categories,
                &cfg.train,
                &cfg.score_config(),
                &standard_variants(&cfg.train),
            )?;
            write_atomic(
                &cfg.output_dir.join("ablation.json"),
                serde_json::to_string_pretty(&table)?.as_bytes(),
            )?;
            print!("{}", table.to_table());
            Ok(())
        }
        Command::BenchHpi {
            classes,
            channels,
            size,
            repetitions,
        } => {
            if classes.is_empty() || classes.contains(&0) || channels == 0 || size == 0 {
                return Err(CrasError::Config("classes, channels and size must be positive".into()));
            }
            let rows = bench_hpi(
                &classes,
                &BenchConfig {
                    channels,
                    size,
                    repetitions,
                    ..BenchConfig::default()
                },
            )?;
            print!("{}", format_rows(&rows));
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                println!(
                    "growth {}->{}: local {:.2}x, exhaustive {:.2}x",
                    first.classes,
                    last.classes,
                    last.local_secs / first.local_secs,
                    last.exhaustive_secs / first.exhaustive_secs
                );
            }
            Ok(())
        }
        Command::Selfcheck => cmd_selfcheck(),
    }
}

fn score_config(common: &CommonArgs, score: &ScoreArgs) -> Result<(RunConfig, PathBuf)> {
    let run_dir = score
        .run
        .clone()
        .or_else(|| common.out.clone())
        .ok_or_else(|| CrasError::Config("give --run or --out".into()))?;
    let resolved = run_dir.join(crate::config::RESOLVED_CONFIG);
    let mut cfg = base_config(common, Some(&resolved))?;
    if common.out.is_none() {
        cfg.output_dir = run_dir.clone();
    }
    if let Some(s) = score.smooth_sigma {
        cfg.smooth_sigma = s;
    }
    let cfg = cfg.resolve()?;
    for need in [run_dir.join(CHECKPOINT), run_dir.join(CENTERS_DIR)] {
        if !need.exists() {
            return Err(CrasError::Config(format!("{} not found", need.display())));
        }
    }
    prepare_output(&cfg)?;
    Ok((cfg, run_dir))
}

fn cmd_prep(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg, true, true)?;
    let out = &cfg.output_dir;
    let mut entries = Vec::new();
    for (split, samples) in [(Split::Train, &data.train), (Split::Test, &data.test)] {
        for s in samples {
            let stem = s.sample_id.replace(['/', '\\'], "_");
            let path = format!("features/{stem}.crft");
            write_feature_map(out.join(&path), &s.features)?;
            let mask_path = match &s.mask {
                Some(m) => {
                    let rel = format!("masks/{stem}.crft");
                    crate::tensor_store::write_mask(out.join(&rel), m)?;
                    Some(rel)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                path,
                category: s.category.clone(),
                sample_id: s.sample_id.clone(),
                split,
                label: s.label,
                mask_path,
                level: None,
            });
        }
    }
    let merged = DatasetManifest::from_entries(out, entries)?;
    let path = out.join("manifest.jsonl");
    write_manifest(&path, &merged)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_build_centers(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let data = load_data(cfg, true, false)?;
    let first = data
        .train
        .first()
        .ok_or_else(|| CrasError::Empty("training split is empty".into()))?;
    let channels = first.features.channels();
    let model = match checkpoint {
        Some(path) => ModelParams::load(path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            ModelParams::init(channels, cfg.train.feature_mode.width(channels), &mut rng)
        }
    };
    let groups = group_by_category(&data.train, &data.manifest.categories)?;
    let bank = CenterBank::build(&groups, &model.adapter, cfg.train.center_mode, cfg.train.refresh_policy)?;
    bank.save(cfg.output_dir.join(CENTERS_DIR))?;
    println!("{} centers written to {}", bank.len(), cfg.output_dir.join(CENTERS_DIR).display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg, true, false)?;
    let outcome = train(&data.train, &data.manifest.categories, &cfg.train)?;
    let dir = &cfg.output_dir;
    outcome.model.save(dir.join(CHECKPOINT))?;
    outcome.centers.save(dir.join(CENTERS_DIR))?;
    let mut log = String::new();
    for rec in &outcome.log {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    write_atomic(&dir.join(TRAIN_LOG), log.as_bytes())?;
    if let Some(last) = outcome.epoch_losses.last() {
        println!("final epoch loss {last:.6}");
    }
    Ok(())
}

fn cmd_score(cfg: &RunConfig, run_dir: &Path, heatmaps: bool, report: bool) -> Result<()> {
    let model = ModelParams::load(run_dir.join(CHECKPOINT))?;
    let bank = CenterBank::load(run_dir.join(CENTERS_DIR))?;
    let channels = model.channels();
    if model.disc.in_dim() != cfg.train.feature_mode.width(channels) {
        return Err(CrasError::Config(format!(
            "checkpoint discriminator reads {} values, feature mode {} needs {}",
            model.disc.in_dim(),
            cfg.train.feature_mode.name(),
            cfg.train.feature_mode.width(channels)
        )));
    }
    let data = load_data(cfg, false, true)?;
    let scored = score_samples(&data.test, &model, &bank, &cfg.score_config())?;
    write_score_maps(cfg.output_dir.join(SCORES_DIR), &scored, heatmaps)?;
    if report {
        let rep = build_report(&data.test, &scored, &bank, &data.manifest.categories)?;
        rep.write(cfg.output_dir.join(REPORT))?;
        let table = rep.to_table();
        write_atomic(&cfg.output_dir.join("report.txt"), table.as_bytes())?;
        print!("{table}");
    } else {
        let scores: Vec<_> = scored
            .iter()
            .map(|s| serde_json::json!({"sample_id": s.map.sample_id, "category": s.map.category, "score": s.score}))
            .collect();
        write_atomic(
            &cfg.output_dir.join("image_scores.json"),
            serde_json::to_string_pretty(&scores)?.as_bytes(),
        )?;
        println!("scored {} samples", scored.len());
    }
    Ok(())
}

fn cmd_selfcheck() -> Result<()> {
    let mut worst: f64 = 0.0;
    for (seed, mode, beta) in [
        (1, FeatureMode::RawResidual, 0.3),
        (2, FeatureMode::Raw, 0.3),
        (3, FeatureMode::Residual, 0.3),
        (4, FeatureMode::RawResidual, 0.0),
    ] {
        let r = gradient_check(6, 3, 3, 2, &Objective::new(beta, mode), seed)?;
        println!(
            "gradient check {:<13} beta={beta}: max rel error {:.3e} ({} checked, {} skipped at kinks)",
            mode.name(),
            r.max_rel_error,
            r.checked,
            r.skipped
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max gradient relative error: {worst:.3e}");

    let spec = SynthSpec {
        n_classes: 2,
        channels: 4,
        height: 5,
        width: 3,
        anomaly_patch: 2,
        train_per_class: 2,
        test_normal_per_class: 1,
        test_anomalous_per_class: 1,
        mask_scale: 2,
        ..SynthSpec::default()
    };
    let data = sample_dataset(&spec)?;
    let mut roundtrips = 0;
    for s in data.train.iter().chain(&data.test) {
        let t = Tensor::from(&s.features);
        let back = decode_tensor(&encode_tensor(&t)?)?;
        let map: FeatureMap<f32> = back.into_feature_map()?;
        let same = map.dims() == s.features.dims()
            && map.as_slice().iter().zip(s.features.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(CrasError::BadHeader(format!("round trip changed {}", s.sample_id)));
        }
        roundtrips += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = ModelParams::<f32>::init(4, 8, &mut rng);
    let back = ModelParams::from_checkpoint_bytes(&model.to_checkpoint_bytes()?)?;
    if back.to_checkpoint_bytes()? != model.to_checkpoint_bytes()? {
        return Err(CrasError::BadHeader("checkpoint round trip changed bytes".into()));
    }
    println!("format round trips: {roundtrips} tensors and 1 checkpoint bit-exact");
    if worst > 1e-6 {
        warn!("gradient check above tolerance");
        return Err(CrasError::NonFiniteLoss(format!("gradient relative error {worst:.3e} exceeds 1e-6")));
    }
    println!("selfcheck passed");
    Ok(())
}
