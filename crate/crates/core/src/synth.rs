//! Seeded synthetic multi-class feature datasets and the ablation harness.
//!
//! Each class has a procedurally drawn mean map. Normal samples add Gaussian
//! jitter; anomalous test samples additionally shift a rectangular patch
//! along a random unit channel direction. With `heteroscedastic` set, the
//! jitter std grows linearly across the width from 0.2x to 1.8x.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::centers::{CenterMode, RefreshPolicy};
use crate::crd::{train, FeatureMode, TrainConfig};
use crate::dataset::Sample;
use crate::error::{CrasError, Result};
use crate::scoring::{evaluate, ScoreConfig};
use crate::tensor::{FeatureMap, Mask};
use crate::tensor_store::{
    write_atomic, write_feature_map, write_manifest, write_mask, DatasetManifest, Label, ManifestEntry, Split,
};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub within_class_std: f64,
    /// RMS per-element gap between two class means, in units of
    /// `within_class_std`.
    pub class_separation: f64,
    /// RMS per-channel shift inside the anomaly patch, in units of
    /// `within_class_std`.
    pub anomaly_shift: f64,
    pub anomaly_patch: usize,
    pub heteroscedastic: bool,
    pub seed: u64,
    pub train_per_class: usize,
    pub test_normal_per_class: usize,
    pub test_anomalous_per_class: usize,
    /// Masks and score maps are `mask_scale` times the feature size.
    pub mask_scale: usize,
    /// Generate even when the spec is degenerate (zero anomaly shift).
    pub force: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 4,
            channels: 16,
            height: 16,
            width: 16,
            within_class_std: 0.01,
            class_separation: 5.0,
            anomaly_shift: 4.0,
            anomaly_patch: 4,
            heteroscedastic: false,
            seed: 0,
            train_per_class: 64,
            test_normal_per_class: 32,
            test_anomalous_per_class: 32,
            mask_scale: 4,
            force: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CrasError::Config(m));
        if self.n_classes == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("classes, channels and spatial dims must be positive".into());
        }
        if !(self.within_class_std > 0.0 && self.within_class_std.is_finite()) {
            return bad(format!("within_class_std must be positive, got {}", self.within_class_std));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad(format!("class_separation must be positive, got {}", self.class_separation));
        }
        if !(self.anomaly_shift >= 0.0 && self.anomaly_shift.is_finite()) {
            return bad(format!("anomaly_shift must be non-negative, got {}", self.anomaly_shift));
        }
        if self.anomaly_patch == 0 || self.anomaly_patch > self.height.min(self.width) {
            return bad(format!(
                "anomaly_patch {} must be in 1..={}",
                self.anomaly_patch,
                self.height.min(self.width)
            ));
        }
        if self.mask_scale == 0 || self.train_per_class == 0 {
            return bad("mask_scale and train_per_class must be positive".into());
        }
        if self.anomaly_shift == 0.0 && self.test_anomalous_per_class > 0 {
            if !self.force {
                return bad("anomaly_shift = 0 makes anomalies indistinguishable from normals; set force to generate anyway".into());
            }
            warn!("anomaly_shift = 0: anomalous samples are statistically identical to normal ones");
        }
        Ok(())
    }

    pub fn category_name(&self, k: usize) -> String {
        format!("class_{k:02}")
    }

    /// Jitter std at column `w`.
    pub fn std_at(&self, w: usize) -> f64 {
        if !self.heteroscedastic || self.width == 1 {
            return self.within_class_std;
        }
        let t = w as f64 / (self.width - 1) as f64;
        self.within_class_std * (0.2 + 1.6 * t)
    }
}

/// In-memory synthetic split with ground-truth categories.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub categories: Vec<String>,
    pub class_means: Vec<FeatureMap<f32>>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn jittered(spec: &SynthSpec, mean: &FeatureMap<f32>, rng: &mut ChaCha8Rng) -> FeatureMap<f32> {
    let stds: Vec<f64> = (0..spec.width).map(|w| spec.std_at(w)).collect();
    FeatureMap::from_fn(spec.channels, spec.height, spec.width, |c, h, w| {
        (mean.get(c, h, w) as f64 + stds[w] * normal(rng)) as f32
    })
}

/// Draws the whole dataset in a fixed order from `spec.seed`.
pub fn sample_dataset(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mean_scale = spec.class_separation * spec.within_class_std / std::f64::consts::SQRT_2;
    let categories: Vec<String> = (0..spec.n_classes).map(|k| spec.category_name(k)).collect();
    let class_means: Vec<FeatureMap<f32>> = (0..spec.n_classes)
        .map(|_| {
            FeatureMap::from_fn(spec.channels, spec.height, spec.width, |_, _, _| {
                (mean_scale * normal(&mut rng)) as f32
            })
        })
        .collect();
    let (mh, mw) = (spec.height * spec.mask_scale, spec.width * spec.mask_scale);
    let shift_norm = spec.anomaly_shift * spec.within_class_std * (spec.channels as f64).sqrt();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, cat) in categories.iter().enumerate() {
        let mean = &class_means[k];
        for i in 0..spec.train_per_class {
            train.push(Sample {
                sample_id: format!("{cat}/train/{i:04}"),
                category: cat.clone(),
                label: Label::Normal,
                features: jittered(spec, mean, &mut rng),
                mask: None,
            });
        }
        for i in 0..spec.test_normal_per_class {
            test.push(Sample {
                sample_id: format!("{cat}/test/good_{i:04}"),
                category: cat.clone(),
                label: Label::Normal,
                features: jittered(spec, mean, &mut rng),
                mask: Some(Mask::zeros(mh, mw)),
            });
        }
        for i in 0..spec.test_anomalous_per_class {
            let mut features = jittered(spec, mean, &mut rng);
            let top = rng.random_range(0..=spec.height - spec.anomaly_patch);
            let left = rng.random_range(0..=spec.width - spec.anomaly_patch);
            let mut dir: Vec<f64> = (0..spec.channels).map(|_| normal(&mut rng)).collect();
            let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|d| *d *= shift_norm / len);
            let mut mask = Mask::zeros(mh, mw);
            for h in top..top + spec.anomaly_patch {
                for w in left..left + spec.anomaly_patch {
                    for (c, d) in dir.iter().enumerate() {
                        features.set(c, h, w, (features.get(c, h, w) as f64 + d) as f32);
                    }
                    for mh_i in h * spec.mask_scale..(h + 1) * spec.mask_scale {
                        for mw_i in w * spec.mask_scale..(w + 1) * spec.mask_scale {
                            mask.set(mh_i, mw_i, 255);
                        }
                    }
                }
            }
            test.push(Sample {
                sample_id: format!("{cat}/test/defect_{i:04}"),
                category: cat.clone(),
                label: Label::Anomalous,
                features,
                mask: Some(mask),
            });
        }
    }
    Ok(SynthData {
        categories,
        class_means,
        train,
        test,
    })
}

/// Writes the dataset under `root` (CRFT features and masks plus
/// `manifest.jsonl` and `spec.json`) and returns the manifest path.
pub fn generate(spec: &SynthSpec, root: impl AsRef<Path>) -> Result<PathBuf> {
    let root = root.as_ref();
    let data = sample_dataset(spec)?;
    let mut entries = Vec::with_capacity(data.train.len() + data.test.len());
    for (split, samples) in [(Split::Train, &data.train), (Split::Test, &data.test)] {
        for s in samples {
            let path = format!("{}.crft", s.sample_id);
            write_feature_map(root.join(&path), &s.features)?;
            let mask_path = match &s.mask {
                Some(m) => {
                    let rel = format!("{}_mask.crft", s.sample_id);
                    write_mask(root.join(&rel), m)?;
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
    let manifest = DatasetManifest::from_entries(root, entries)?;
    let manifest_path = root.join(MANIFEST_NAME);
    write_manifest(&manifest_path, &manifest)?;
    write_atomic(&root.join("spec.json"), serde_json::to_string_pretty(spec)?.as_bytes())?;
    info!(
        "wrote {} train and {} test samples to {}",
        data.train.len(),
        data.test.len(),
        root.display()
    );
    Ok(manifest_path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub feature_mode: FeatureMode,
    pub beta: f64,
    pub refresh_policy: RefreshPolicy,
    pub center_mode: CenterMode,
}

impl Variant {
    /// The defaults of `cfg` under a name.
    pub fn baseline(name: impl Into<String>, cfg: &TrainConfig) -> Self {
        Variant {
            name: name.into(),
            feature_mode: cfg.feature_mode,
            beta: cfg.noise.beta,
            refresh_policy: cfg.refresh_policy,
            center_mode: cfg.center_mode,
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        out.feature_mode = self.feature_mode;
        out.noise.beta = self.beta;
        out.refresh_policy = self.refresh_policy;
        out.center_mode = self.center_mode;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub i_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub i_ap: Option<f64>,
    pub p_ap: Option<f64>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = format!("{:<24} {:>8} {:>8} {:>10}\n", "variant", "I-AUROC", "P-AUROC", "final loss");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>8} {:>8} {:>10.4}\n",
                r.variant.name,
                cell(r.i_auroc),
                cell(r.p_auroc),
                r.final_loss
            ));
        }
        out
    }
}

/// Trains and evaluates every variant with the same seed and budget.
pub fn run_ablation(
    train_samples: &[Sample],
    test_samples: &[Sample],
    categories: &[String],
    base: &TrainConfig,
    score: &ScoreConfig,
    variants: &[Variant],
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.apply(base);
        info!("ablation variant {}", v.name);
        let outcome = train(train_samples, categories, &cfg)?;
        let score_cfg = ScoreConfig {
            feature_mode: cfg.feature_mode,
            ..*score
        };
        let (report, _) = evaluate(test_samples, categories, &outcome.model, &outcome.centers, &score_cfg)?;
        rows.push(AblationRow {
            variant: v.clone(),
            i_auroc: report.mean.i_auroc,
            p_auroc: report.mean.p_auroc,
            i_ap: report.mean.i_ap,
            p_ap: report.mean.p_ap,
            final_loss: outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(AblationTable { rows })
}

/// The variants compared by the `ablate` command.
pub fn standard_variants(base: &TrainConfig) -> Vec<Variant> {
    let full = Variant::baseline("full", base);
    vec![
        full.clone(),
        Variant {
            name: "raw".into(),
            feature_mode: FeatureMode::Raw,
            ..full.clone()
        },
        Variant {
            name: "residual".into(),
            feature_mode: FeatureMode::Residual,
            ..full.clone()
        },
        Variant {
            name: "beta=0".into(),
            beta: 0.0,
            ..full.clone()
        },
        Variant {
            name: "single-sample-center".into(),
            center_mode: CenterMode::SingleSample,
            ..full.clone()
        },
        Variant {
            name: "centers-once".into(),
            refresh_policy: RefreshPolicy::Once,
            ..full
        },
    ]
}
