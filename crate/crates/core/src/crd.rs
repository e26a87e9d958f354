//! Center-aware residual discrimination: feature construction, the training
//! objective with its exact gradient, and the end-to-end training loop.
//!
//! For one sample the objective is
//!
//! ```text
//! u = A(t)                      adapted normal feature
//! r = |u - p|, alpha = f(|g|, r) per position (distance-guided scale)
//! v = u + alpha (.) g           synthetic anomaly
//! y = [u | u - p], z = [v | v - p]
//! L = sum_pos BCE(D(y), 0) + BCE(D(z), 1)
//! ```
//!
//! and a batch loss is the sum over samples divided by `2 * N * H * W`.
//! The recomposed center `p` and the noise `g` are constants of the step;
//! gradients reach the adapter through `u`, through `v`, and through the
//! dependence of `alpha` on `r`.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centers::{adapt, recompose, CenterBank, CenterMode, RefreshPolicy};
use crate::dafs::{derive_seed, distance_ratio_map, sample_noise_with, NoiseConfig, NormMap};
use crate::dataset::{group_by_category, Sample};
use crate::error::{shape_err, CrasError, Result};
use crate::nn::{bce_grad, bce_with_logits, DiscriminatorNet, ModelGrads, ModelParams, OptimState};
use crate::tensor::{FeatureMap, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "residual")]
    Residual,
    #[default]
    #[serde(rename = "raw+residual")]
    RawResidual,
}

impl FeatureMode {
    /// Discriminator input width for `channels` feature channels.
    pub fn width(self, channels: usize) -> usize {
        match self {
            FeatureMode::Raw | FeatureMode::Residual => channels,
            FeatureMode::RawResidual => 2 * channels,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Raw => "raw",
            FeatureMode::Residual => "residual",
            FeatureMode::RawResidual => "raw+residual",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = CrasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(FeatureMode::Raw),
            "residual" => Ok(FeatureMode::Residual),
            "raw+residual" => Ok(FeatureMode::RawResidual),
            other => Err(CrasError::Config(format!("unknown feature mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_adapter: f64,
    pub lr_discriminator: f64,
    pub weight_decay: f64,
    pub noise: NoiseConfig,
    pub refresh_policy: RefreshPolicy,
    pub center_mode: CenterMode,
    pub seed: u64,
    pub feature_mode: FeatureMode,
    /// Threads computing per-sample gradients; 1 runs everything inline.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr_adapter: 1e-4,
            lr_discriminator: 2e-4,
            weight_decay: 1e-5,
            noise: NoiseConfig::default(),
            refresh_policy: RefreshPolicy::PerEpoch,
            center_mode: CenterMode::Mean,
            seed: 0,
            feature_mode: FeatureMode::RawResidual,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(CrasError::Config(
                "epochs, batch_size and workers must be positive".into(),
            ));
        }
        for (name, lr) in [("lr_adapter", self.lr_adapter), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(CrasError::Config(format!("{name} must be non-negative, got {lr}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CrasError::Config("weight_decay must be non-negative".into()));
        }
        self.noise.validate()
    }
}

/// `raw -> x`, `residual -> x - p`, `raw+residual -> [x | x - p]`.
pub fn concat_center_aware<T: Real>(x: &FeatureMap<T>, p: &FeatureMap<T>, mode: FeatureMode) -> Result<FeatureMap<T>> {
    x.ensure_same_dims(p, "concat_center_aware")?;
    let (c, h, w) = x.dims();
    let residual: Vec<T> = x
        .as_slice()
        .iter()
        .zip(p.as_slice())
        .map(|(&a, &b)| a - b)
        .collect();
    match mode {
        FeatureMode::Raw => Ok(x.clone()),
        FeatureMode::Residual => FeatureMap::new(c, h, w, residual),
        FeatureMode::RawResidual => {
            let mut data = x.as_slice().to_vec();
            data.extend(residual);
            FeatureMap::new(2 * c, h, w, data)
        }
    }
}

/// Position-major form of [`concat_center_aware`].
fn concat_rows<T: Real>(x: &[T], p: &[T], channels: usize, mode: FeatureMode) -> Vec<T> {
    match mode {
        FeatureMode::Raw => x.to_vec(),
        FeatureMode::Residual => x.iter().zip(p).map(|(&a, &b)| a - b).collect(),
        FeatureMode::RawResidual => {
            let mut out = Vec::with_capacity(2 * x.len());
            for (xr, pr) in x.chunks_exact(channels).zip(p.chunks_exact(channels)) {
                out.extend_from_slice(xr);
                out.extend(xr.iter().zip(pr).map(|(&a, &b)| a - b));
            }
            out
        }
    }
}

/// Gradient of [`concat_rows`] with respect to `x`.
fn split_rows_grad<T: Real>(d: &[T], channels: usize, mode: FeatureMode) -> Vec<T> {
    match mode {
        FeatureMode::Raw | FeatureMode::Residual => d.to_vec(),
        FeatureMode::RawResidual => d
            .chunks_exact(2 * channels)
            .flat_map(|row| (0..channels).map(move |c| row[c] + row[channels + c]))
            .collect(),
    }
}

/// Normal (`y`) and synthetic anomalous (`z`) center-aware features of one
/// sample, channel-major.
#[derive(Clone, Debug)]
pub struct CenterAwarePair<T> {
    pub y: FeatureMap<T>,
    pub z: FeatureMap<T>,
}

/// Mean BCE over samples, positions and both branches (`y -> 0`, `z -> 1`).
pub fn batch_loss<T: Real>(pairs: &[CenterAwarePair<T>], disc: &DiscriminatorNet<T>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CrasError::Empty("batch_loss on an empty batch".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        pair.y.ensure_same_dims(&pair.z, "center-aware pair")?;
        if pair.y.channels() != disc.in_dim() {
            return Err(shape_err(format!(
                "pair {i} has {} channels, discriminator reads {}",
                pair.y.channels(),
                disc.in_dim()
            )));
        }
        for (map, target) in [(&pair.y, false), (&pair.z, true)] {
            for l in disc.forward(&map.to_positions())? {
                total += bce_with_logits(l, target).f64();
                count += 1;
            }
        }
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(CrasError::NonFiniteLoss(format!(
            "batch of {} samples, summed loss {total}",
            pairs.len()
        )));
    }
    Ok(loss)
}

/// Fixed inputs of one sample's objective.
#[derive(Clone, Copy, Debug)]
pub struct SampleInputs<'a, T> {
    pub t: &'a FeatureMap<T>,
    pub p: &'a FeatureMap<T>,
    pub g: &'a FeatureMap<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub beta: f64,
    pub mode: FeatureMode,
    /// Targets of the normal and anomalous branch.
    pub targets: (bool, bool),
}

impl Objective {
    pub fn new(beta: f64, mode: FeatureMode) -> Self {
        Objective {
            beta,
            mode,
            targets: (false, true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleResult<T> {
    /// Unnormalized BCE sum over both branches and all positions.
    pub loss_sum: f64,
    pub grads: Option<ModelGrads<T>>,
    /// Sign pattern of the discriminator's hidden pre-activations.
    pub hidden_signs: Vec<bool>,
}

/// Evaluates one sample's loss and, when `grad_scale` is given, its exact
/// gradient scaled by `grad_scale`.
pub fn sample_objective<T: Real>(
    model: &ModelParams<T>,
    inputs: SampleInputs<'_, T>,
    objective: &Objective,
    grad_scale: Option<T>,
) -> Result<SampleResult<T>> {
    let SampleInputs { t, p, g } = inputs;
    t.ensure_same_dims(p, "features vs center")?;
    t.ensure_same_dims(g, "features vs noise")?;
    let (channels, height, width) = t.dims();
    let n = height * width;
    if model.disc.in_dim() != objective.mode.width(channels) {
        return Err(shape_err(format!(
            "discriminator reads {} values, mode {} needs {}",
            model.disc.in_dim(),
            objective.mode.name(),
            objective.mode.width(channels)
        )));
    }
    let p_rows = p.to_positions();
    let g_rows = g.to_positions();
    let (u_rows, adapter_trace) = model.adapter.forward_traced(&t.to_positions())?;

    let residual: Vec<T> = u_rows.iter().zip(&p_rows).map(|(&a, &b)| a - b).collect();
    let r_norms = row_norms(&residual, channels, height, width);
    let g_norms = row_norms(&g_rows, channels, height, width);
    let ratio = distance_ratio_map(&g_norms, &r_norms, objective.beta)?;

    let mut v_rows = u_rows.clone();
    for (pos, (vr, gr)) in v_rows
        .chunks_exact_mut(channels)
        .zip(g_rows.chunks_exact(channels))
        .enumerate()
    {
        let a = ratio.alpha[pos];
        vr.iter_mut().zip(gr).for_each(|(v, &gv)| *v += a * gv);
    }

    let mut disc_in = concat_rows(&u_rows, &p_rows, channels, objective.mode);
    disc_in.extend(concat_rows(&v_rows, &p_rows, channels, objective.mode));
    let (logits, disc_trace) = model.disc.forward_traced(&disc_in)?;
    let target = |i: usize| if i < n { objective.targets.0 } else { objective.targets.1 };
    let loss_sum: f64 = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| bce_with_logits(l, target(i)).f64())
        .sum();
    let hidden_signs = disc_trace
        .pre_activations()
        .iter()
        .map(|&z| z >= T::zero())
        .collect();

    let Some(scale) = grad_scale else {
        return Ok(SampleResult {
            loss_sum,
            grads: None,
            hidden_signs,
        });
    };

    let d_logits: Vec<T> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| scale * bce_grad(l, target(i)))
        .collect();
    let (disc_grads, d_in) = model.disc.backward(&disc_trace, &d_logits)?;
    let width_in = objective.mode.width(channels);
    let (d_y, d_z) = d_in.split_at(n * width_in);
    let mut d_u = split_rows_grad(d_y, channels, objective.mode);
    let d_v = split_rows_grad(d_z, channels, objective.mode);

    // v = u + alpha * g
    let mut d_alpha = vec![T::zero(); n];
    for (pos, ((du, dv), gr)) in d_u
        .chunks_exact_mut(channels)
        .zip(d_v.chunks_exact(channels))
        .zip(g_rows.chunks_exact(channels))
        .enumerate()
    {
        let mut acc = T::zero();
        for c in 0..channels {
            du[c] += dv[c];
            acc += dv[c] * gr[c];
        }
        d_alpha[pos] = acc;
    }

    // alpha depends on r = |u - p|
    let d_r = ratio.backprop(&d_alpha);
    for (pos, (du, res)) in d_u
        .chunks_exact_mut(channels)
        .zip(residual.chunks_exact(channels))
        .enumerate()
    {
        let r = r_norms.values[pos];
        if d_r[pos] == T::zero() || r <= T::zero() {
            continue;
        }
        let k = d_r[pos] / r;
        du.iter_mut().zip(res).for_each(|(d, &x)| *d += k * x);
    }

    let (adapter_grads, _) = model.adapter.backward(&adapter_trace, &d_u)?;
    Ok(SampleResult {
        loss_sum,
        grads: Some(ModelGrads {
            adapter: adapter_grads,
            disc: disc_grads,
        }),
        hidden_signs,
    })
}

fn row_norms<T: Real>(rows: &[T], channels: usize, height: usize, width: usize) -> NormMap<T> {
    NormMap {
        height,
        width,
        values: rows
            .chunks_exact(channels)
            .map(|r| T::of(r.iter().map(|&v| v.f64() * v.f64()).sum::<f64>().sqrt()))
            .collect(),
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams<f32>,
    /// Centers consistent with the returned adapter.
    pub centers: CenterBank,
    pub log: Vec<TrainLogRecord>,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Prepared<'a> {
    sample: &'a Sample,
    p: FeatureMap<f32>,
    g: FeatureMap<f32>,
}

/// Trains adapter and discriminator on the normal samples of all categories
/// jointly. Categories follow `categories` order.
pub fn train(samples: &[Sample], categories: &[String], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| CrasError::Empty("training split is empty".into()))?;
    let (channels, height, width) = first.features.dims();
    let groups = group_by_category(samples, categories)?;
    let n_pos = height * width;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModelParams::<f32>::init(channels, cfg.feature_mode.width(channels), &mut rng);
    let adapter_shapes: Vec<usize> = model.slices()[..2].iter().map(|s| s.len()).collect();
    let disc_shapes: Vec<usize> = model.slices()[2..].iter().map(|s| s.len()).collect();
    let mut opt_adapter = OptimState::<f32>::new(&adapter_shapes, cfg.lr_adapter, cfg.weight_decay);
    let mut opt_disc = OptimState::<f32>::new(&disc_shapes, cfg.lr_discriminator, cfg.weight_decay);
    let objective = Objective::new(cfg.noise.beta, cfg.feature_mode);

    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| CrasError::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut bank = CenterBank::build(&groups, &model.adapter, cfg.center_mode, cfg.refresh_policy)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.refresh_policy == RefreshPolicy::PerEpoch {
            bank = CenterBank::build(&groups, &model.adapter, cfg.center_mode, cfg.refresh_policy)?;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let prepared = chunk
                .iter()
                .map(|&i| {
                    let sample = &samples[i];
                    let u = adapt(&model.adapter, &sample.features)?;
                    let (_, aligned) = recompose(&u, &bank)?;
                    let mut noise_rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(cfg.noise.seed, &sample.sample_id, step as u64));
                    let g = sample_noise_with(sample.features.dims(), cfg.noise.sigma, &mut noise_rng);
                    Ok(Prepared {
                        sample,
                        p: aligned.map,
                        g,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / (2 * chunk.len() * n_pos) as f64;
            let run = |item: &Prepared<'_>| {
                sample_objective(
                    &model,
                    SampleInputs {
                        t: &item.sample.features,
                        p: &item.p,
                        g: &item.g,
                    },
                    &objective,
                    Some(scale as f32),
                )
            };
            let results: Vec<Result<SampleResult<f32>>> = match &pool {
                Some(pool) => pool.install(|| prepared.par_iter().map(run).collect()),
                None => prepared.iter().map(run).collect(),
            };
            let mut grads = ModelGrads::zeros(&model);
            let mut loss_sum = 0.0;
            for r in results {
                let r = r?;
                loss_sum += r.loss_sum;
                grads.add_assign(r.grads.as_ref().expect("gradients requested"));
            }
            let loss = loss_sum * scale;
            let grad_norm = grads.norm();
            if !loss.is_finite() || !grads.is_finite() {
                return Err(CrasError::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {loss}, grad norm {grad_norm}"),
                });
            }
            let g = grads.slices();
            let [aw, ab, hw, hb, ow, ob] = model.slices_mut();
            opt_adapter.adamw_step(&mut [aw, ab], &g[..2])?;
            opt_disc.adamw_step(&mut [hw, hb, ow, ob], &g[2..])?;
            debug!("epoch {epoch} step {step}: loss {loss:.6} grad_norm {grad_norm:.6}");
            log.push(TrainLogRecord {
                epoch,
                step,
                loss,
                grad_norm,
            });
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let mean = epoch_loss / batches as f64;
        info!("epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }

    if cfg.refresh_policy == RefreshPolicy::PerEpoch {
        bank = CenterBank::build(&groups, &model.adapter, cfg.center_mode, cfg.refresh_policy)?;
    }
    Ok(TrainOutcome {
        model,
        centers: bank,
        log,
        epoch_losses,
    })
}

/// Result of comparing analytic gradients with central finite differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters skipped because a perturbation crossed a leaky-ReLU kink.
    pub skipped: usize,
}

/// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Checks the full adapter + synthesis + discriminator objective of a random
/// small batch in `f64` against central finite differences.
pub fn gradient_check(
    channels: usize,
    height: usize,
    width: usize,
    batch: usize,
    objective: &Objective,
    seed: u64,
) -> Result<GradCheckReport> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::<f64>::init(channels, objective.mode.width(channels), &mut rng);
    // move away from the identity so every adapter entry matters
    for w in model.adapter.layer.weight.iter_mut().chain(model.adapter.layer.bias.iter_mut()) {
        *w += 0.3 * rng.random_range(-1.0..1.0);
    }
    for b in model.disc.hidden.bias.iter_mut().chain(model.disc.output.bias.iter_mut()) {
        *b = 0.2 * rng.random_range(-1.0..1.0);
    }
    // the output layer starts at zero, which would hide every upstream gradient
    for w in model.disc.output.weight.iter_mut() {
        *w = rng.random_range(-1.0..1.0);
    }
    let mut normal = |scale: f64| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    };
    let data: Vec<[FeatureMap<f64>; 3]> = (0..batch)
        .map(|_| {
            [
                FeatureMap::from_fn(channels, height, width, |_, _, _| normal(1.0)),
                FeatureMap::from_fn(channels, height, width, |_, _, _| normal(1.0)),
                FeatureMap::from_fn(channels, height, width, |_, _, _| normal(0.5)),
            ]
        })
        .collect();
    let scale = 1.0 / (2 * batch * height * width) as f64;

    let evaluate = |m: &ModelParams<f64>, with_grad: bool| -> Result<(f64, Option<ModelGrads<f64>>, Vec<bool>)> {
        let mut loss = 0.0;
        let mut grads = with_grad.then(|| ModelGrads::zeros(m));
        let mut signs = Vec::new();
        for [t, p, g] in &data {
            let r = sample_objective(m, SampleInputs { t, p, g }, objective, with_grad.then_some(scale))?;
            loss += r.loss_sum * scale;
            if let (Some(acc), Some(sg)) = (grads.as_mut(), r.grads.as_ref()) {
                acc.add_assign(sg);
            }
            signs.extend(r.hidden_signs);
        }
        Ok((loss, grads, signs))
    };

    let (_, grads, base_signs) = evaluate(&model, true)?;
    let grads = grads.expect("requested");
    let analytic: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut flat_index = 0;
    for tensor in 0..6 {
        let len = model.slices()[tensor].len();
        for j in 0..len {
            let original = model.slices()[tensor][j];
            model.slices_mut()[tensor][j] = original + GRAD_CHECK_STEP;
            let (plus, _, plus_signs) = evaluate(&model, false)?;
            model.slices_mut()[tensor][j] = original - GRAD_CHECK_STEP;
            let (minus, _, minus_signs) = evaluate(&model, false)?;
            model.slices_mut()[tensor][j] = original;
            let a = analytic[flat_index];
            flat_index += 1;
            if plus_signs != base_signs || minus_signs != base_signs {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
            report.checked += 1;
        }
    }
    Ok(report)
}
