//! Anomaly maps, image scores and AUROC/AP evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centers::{adapt, recompose, CenterBank};
use crate::crd::{concat_center_aware, FeatureMode};
use crate::dataset::Sample;
use crate::error::{shape_err, CrasError, Result};
use crate::feature_prep::resize_bilinear;
use crate::nn::{sigmoid, DiscriminatorNet, ModelParams};
use crate::tensor::{FeatureMap, Mask};
use crate::tensor_store::{write_atomic, write_feature_map, Label};

pub const REPORT_VERSION: u32 = 1;

/// Per-pixel anomaly probabilities of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub sample_id: String,
    pub category: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn to_feature_map(&self) -> FeatureMap<f32> {
        FeatureMap::new(1, self.height, self.width, self.values.iter().map(|&v| v as f32).collect())
            .expect("score map dims nonzero")
    }

    /// Binary PGM with `round(score * 255)` gray levels.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

/// Normalized Gaussian taps for radius `ceil(4 sigma)`; `[1]` when
/// `sigma <= 0`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Maps an out-of-range index into `0..n` by mirror reflection with the edge
/// sample repeated (`d c b a | a b c d | d c b a`).
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_1d(src: &[f64], dst: &mut [f64], len: usize, stride: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as i64;
    for i in 0..len {
        let mut acc = 0.0;
        for (k, &tap) in kernel.iter().enumerate() {
            let j = reflect_index(i as i64 + k as i64 - radius, len);
            acc += tap * src[j * stride];
        }
        dst[i * stride] = acc;
    }
}

/// Separable Gaussian blur of an `h x w` plane with reflect padding.
pub fn gaussian_smooth(values: &[f64], height: usize, width: usize, sigma: f64) -> Result<Vec<f64>> {
    if values.len() != height * width {
        return Err(shape_err(format!(
            "plane of {} values is not {height}x{width}",
            values.len()
        )));
    }
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return Ok(values.to_vec());
    }
    let mut rows = vec![0.0; values.len()];
    for h in 0..height {
        let r = h * width..(h + 1) * width;
        convolve_1d(&values[r.clone()], &mut rows[r], width, 1, &kernel);
    }
    let mut out = vec![0.0; values.len()];
    for w in 0..width {
        convolve_1d(&rows[w..], &mut out[w..], height, width, &kernel);
    }
    Ok(out)
}

/// Discriminator logits of every position of `u` against its recomposed
/// center `p`, row-major `H x W`.
pub fn position_logits(
    u: &FeatureMap<f32>,
    p: &FeatureMap<f32>,
    disc: &DiscriminatorNet<f32>,
    mode: FeatureMode,
) -> Result<Vec<f32>> {
    let y = concat_center_aware(u, p, mode)?;
    disc.forward(&y.to_positions())
}

/// Probability map: logistic of the logits, bilinear resize to `out_dims`,
/// Gaussian smoothing with `smooth_sigma`.
pub fn score_map_from_logits(
    logits: &[f32],
    in_dims: (usize, usize),
    out_dims: (usize, usize),
    smooth_sigma: f64,
) -> Result<Vec<f64>> {
    let (oh, ow) = out_dims;
    if oh == 0 || ow == 0 {
        return Err(shape_err("output dims must be nonzero"));
    }
    if logits.len() != in_dims.0 * in_dims.1 || logits.is_empty() {
        return Err(shape_err(format!(
            "{} logits for a {}x{} grid",
            logits.len(),
            in_dims.0,
            in_dims.1
        )));
    }
    let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l as f64)).collect();
    let resized = resize_bilinear(&probs, in_dims.0, in_dims.1, oh, ow);
    gaussian_smooth(&resized, oh, ow, smooth_sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub feature_mode: FeatureMode,
    pub smooth_sigma: f64,
    /// Map size used for samples without a mask; defaults to the feature size.
    pub out_size: Option<(usize, usize)>,
    pub workers: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            feature_mode: FeatureMode::RawResidual,
            smooth_sigma: 4.0,
            out_size: None,
            workers: 1,
        }
    }
}

/// Full inference for one feature map: adapt, recompose, discriminate, map.
pub fn score_map(
    t: &FeatureMap<f32>,
    model: &ModelParams<f32>,
    bank: &CenterBank,
    out_dims: (usize, usize),
    cfg: &ScoreConfig,
) -> Result<(ScoreMap, usize)> {
    let u = adapt(&model.adapter, t)?;
    let (global, aligned) = recompose(&u, bank)?;
    let logits = position_logits(&u, &aligned.map, &model.disc, cfg.feature_mode)?;
    let values = score_map_from_logits(&logits, (u.height(), u.width()), out_dims, cfg.smooth_sigma)?;
    Ok((
        ScoreMap {
            sample_id: String::new(),
            category: bank.get(global.index).category().to_string(),
            height: out_dims.0,
            width: out_dims.1,
            values,
        },
        global.index,
    ))
}

/// Image-level score: the maximum of the map.
pub fn score_image(map: &ScoreMap) -> f64 {
    map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(CrasError::NonFinite { index: i });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

fn sorted_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Mann-Whitney AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(CrasError::Metric("AUROC needs both labels".into()));
    }
    let order = sorted_order(scores);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * positives as f64;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Step-wise average precision over descending thresholds, ties grouped.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_labels(scores, labels)?;
    if pos == 0 {
        return Err(CrasError::Metric("average precision needs a positive".into()));
    }
    let mut order = sorted_order(scores);
    order.reverse();
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_tp = order[i..=j].iter().filter(|&&k| labels[k]).count();
        tp += group_tp;
        seen += j - i + 1;
        if group_tp > 0 {
            ap += (group_tp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub sample_id: String,
    pub category: String,
    pub label: Label,
    pub score: f64,
    pub matched_category: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub i_auroc: Option<f64>,
    pub i_ap: Option<f64>,
    pub p_auroc: Option<f64>,
    pub p_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub metrics: Metrics,
    pub match_accuracy: f64,
    /// Reasons a metric is missing.
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub categories: Vec<CategoryReport>,
    /// Macro average over the categories where each metric is available.
    pub mean: Metrics,
    pub match_accuracy: f64,
    pub image_scores: Vec<ImageScore>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "n/a".into(), |x| format!("{:.2}", 100.0 * x))
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "category", "I-AUROC", "I-AP", "P-AUROC", "P-AP", "match%"
        );
        let rows = self
            .categories
            .iter()
            .map(|c| (c.category.as_str(), &c.metrics, c.match_accuracy))
            .chain(std::iter::once(("mean", &self.mean, self.match_accuracy)));
        for (name, m, acc) in rows {
            let _ = writeln!(
                out,
                "{:<20} {:>8} {:>8} {:>8} {:>8} {:>8.2}",
                name,
                cell(m.i_auroc),
                cell(m.i_ap),
                cell(m.p_auroc),
                cell(m.p_ap),
                100.0 * acc
            );
        }
        for c in &self.categories {
            for f in &c.flags {
                let _ = writeln!(out, "note: {}: {f}", c.category);
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// One scored test sample.
#[derive(Clone, Debug)]
pub struct ScoredSample {
    pub map: ScoreMap,
    pub score: f64,
    pub label: Label,
    pub matched: usize,
}

/// Scores every sample; map size follows the sample's mask when present.
pub fn score_samples(
    samples: &[Sample],
    model: &ModelParams<f32>,
    bank: &CenterBank,
    cfg: &ScoreConfig,
) -> Result<Vec<ScoredSample>> {
    let run = |s: &Sample| -> Result<ScoredSample> {
        let out_dims = match (&s.mask, cfg.out_size) {
            (Some(m), _) => (m.height(), m.width()),
            (None, Some(dims)) => dims,
            (None, None) => (s.features.height(), s.features.width()),
        };
        let (mut map, matched) = score_map(&s.features, model, bank, out_dims, cfg)?;
        map.sample_id = s.sample_id.clone();
        map.category = s.category.clone();
        let score = score_image(&map);
        Ok(ScoredSample {
            map,
            score,
            label: s.label,
            matched,
        })
    };
    if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| CrasError::Config(format!("thread pool: {e}")))?;
        pool.install(|| samples.par_iter().map(run).collect())
    } else {
        samples.iter().map(run).collect()
    }
}

fn metric_or_flag(
    result: Result<f64>,
    name: &str,
    flags: &mut Vec<String>,
) -> Option<f64> {
    match result {
        Ok(v) => Some(v),
        Err(e) => {
            flags.push(format!("{name} unavailable: {e}"));
            None
        }
    }
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Aggregates scored samples into per-category and macro-averaged metrics.
/// Pixel metrics pool all pixels of a category; normal samples without a mask
/// count as all-normal pixels.
pub fn build_report(
    samples: &[Sample],
    scored: &[ScoredSample],
    bank: &CenterBank,
    categories: &[String],
) -> Result<EvalReport> {
    if samples.len() != scored.len() {
        return Err(shape_err("one score per sample required"));
    }
    let mut reports = Vec::with_capacity(categories.len());
    let mut matched_total = 0usize;
    for cat in categories {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| &samples[i].category == cat).collect();
        let mut flags = Vec::new();
        let scores: Vec<f64> = idx.iter().map(|&i| scored[i].score).collect();
        let labels: Vec<bool> = idx.iter().map(|&i| samples[i].label == Label::Anomalous).collect();
        let n_anomalous = labels.iter().filter(|&&l| l).count();
        let matched = idx
            .iter()
            .filter(|&&i| bank.get(scored[i].matched).category() == cat)
            .count();
        matched_total += matched;

        let has_masks = idx.iter().any(|&i| samples[i].mask.is_some());
        let (p_auroc, p_ap) = if has_masks {
            let mut px_scores = Vec::new();
            let mut px_labels = Vec::new();
            for &i in &idx {
                let map = &scored[i].map;
                px_scores.extend_from_slice(&map.values);
                match &samples[i].mask {
                    Some(mask) => px_labels.extend(mask_labels(mask, map)?),
                    None if samples[i].label == Label::Normal => {
                        px_labels.extend(std::iter::repeat_n(false, map.values.len()))
                    }
                    None => {
                        return Err(CrasError::Manifest(format!(
                            "anomalous sample {} has no mask",
                            samples[i].sample_id
                        )))
                    }
                }
            }
            (
                metric_or_flag(auroc(&px_scores, &px_labels), "P-AUROC", &mut flags),
                metric_or_flag(average_precision(&px_scores, &px_labels), "P-AP", &mut flags),
            )
        } else {
            flags.push("pixel metrics unavailable: no masks".into());
            (None, None)
        };
        let metrics = Metrics {
            i_auroc: metric_or_flag(auroc(&scores, &labels), "I-AUROC", &mut flags),
            i_ap: metric_or_flag(average_precision(&scores, &labels), "I-AP", &mut flags),
            p_auroc,
            p_ap,
        };
        reports.push(CategoryReport {
            category: cat.clone(),
            n_normal: idx.len() - n_anomalous,
            n_anomalous,
            match_accuracy: if idx.is_empty() { 0.0 } else { matched as f64 / idx.len() as f64 },
            metrics,
            flags,
        });
    }
    let mean = Metrics {
        i_auroc: macro_mean(reports.iter().map(|r| r.metrics.i_auroc)),
        i_ap: macro_mean(reports.iter().map(|r| r.metrics.i_ap)),
        p_auroc: macro_mean(reports.iter().map(|r| r.metrics.p_auroc)),
        p_ap: macro_mean(reports.iter().map(|r| r.metrics.p_ap)),
    };
    let image_scores = samples
        .iter()
        .zip(scored)
        .map(|(s, sc)| ImageScore {
            sample_id: s.sample_id.clone(),
            category: s.category.clone(),
            label: s.label,
            score: sc.score,
            matched_category: bank.get(sc.matched).category().to_string(),
        })
        .collect();
    Ok(EvalReport {
        version: REPORT_VERSION,
        categories: reports,
        mean,
        match_accuracy: if samples.is_empty() { 0.0 } else { matched_total as f64 / samples.len() as f64 },
        image_scores,
    })
}

fn mask_labels(mask: &Mask, map: &ScoreMap) -> Result<Vec<bool>> {
    if (mask.height(), mask.width()) != (map.height, map.width) {
        return Err(shape_err(format!(
            "mask {}x{} vs score map {}x{} for {}",
            mask.height(),
            mask.width(),
            map.height,
            map.width,
            map.sample_id
        )));
    }
    Ok(mask.as_slice().iter().map(|&v| v > 0).collect())
}

/// Scores a test split and builds its report.
pub fn evaluate(
    samples: &[Sample],
    categories: &[String],
    model: &ModelParams<f32>,
    bank: &CenterBank,
    cfg: &ScoreConfig,
) -> Result<(EvalReport, Vec<ScoredSample>)> {
    let scored = score_samples(samples, model, bank, cfg)?;
    let report = build_report(samples, &scored, bank, categories)?;
    Ok((report, scored))
}

/// Writes each map as `<dir>/<sample_id>.crft` and, optionally, a PGM.
pub fn write_score_maps(dir: impl AsRef<Path>, scored: &[ScoredSample], heatmaps: bool) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CrasError::io(dir, e))?;
    for s in scored {
        let stem = s.map.sample_id.replace(['/', '\\'], "_");
        write_feature_map(dir.join(format!("{stem}.crft")), &s.map.to_feature_map())?;
        if heatmaps {
            write_atomic(&dir.join(format!("{stem}.pgm")), &s.map.to_pgm())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut won, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        won += 1.0;
                    } else if scores[i] == scores[j] {
                        won += 0.5;
                    }
                }
            }
        }
        won / pairs
    }

    #[test]
    fn auroc_examples() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(auroc(&s, &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(auroc(&s, &[true; 4]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..20).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
        let mut l: Vec<bool> = (0..20).map(|_| rng.random_bool(0.4)).collect();
        l[0] = true;
        l[1] = false;
        assert!((auroc(&s, &l).unwrap() - pair_count_auroc(&s, &l)).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1, 0.2], &[true, false, false]).unwrap(), 1.0);
        let n = 7;
        let s: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut l = vec![false; n];
        l[n - 1] = true;
        assert!((average_precision(&s, &l).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert!(average_precision(&s, &[false; 7]).is_err());
    }

    #[test]
    fn kernel_properties() {
        for sigma in [0.5, 1.0, 4.0, 2.3] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (4.0 * sigma as f64).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let v = vec![0.37; 6 * 5];
        for x in gaussian_smooth(&v, 6, 5, 4.0).unwrap() {
            assert!((x - 0.37).abs() < 1e-12);
        }
        let r = vec![1.0, 2.0, 3.0];
        assert_eq!(gaussian_smooth(&r, 1, 3, 0.0).unwrap(), r);
    }

    #[test]
    fn constant_logit_gives_constant_map() {
        let l = vec![0.7f32; 16];
        let m = score_map_from_logits(&l, (4, 4), (16, 16), 4.0).unwrap();
        let s = sigmoid(0.7f32 as f64);
        assert!(m.iter().all(|&x| (x - s).abs() < 1e-12));
        assert!(score_map_from_logits(&l, (4, 4), (0, 4), 4.0).is_err());
    }

    #[test]
    fn image_score_is_max() {
        let mut values = vec![0.1; 9];
        values[4] = 0.9;
        let map = ScoreMap {
            sample_id: "a".into(),
            category: "c".into(),
            height: 3,
            width: 3,
            values,
        };
        assert_eq!(score_image(&map), 0.9);
        let pgm = map.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 3\n255\n"));
        assert_eq!(pgm[pgm.len() - 5], 230);
    }
}
