//! Timing harness comparing global-to-local matching with exhaustive
//! per-position search over every center.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::centers::{align_exhaustive, align_patches, match_class, CenterBank, ClassCenter, RefreshPolicy};
use crate::error::Result;
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub classes: usize,
    /// Seconds per query, minimum over repetitions.
    pub global_secs: f64,
    pub local_secs: f64,
    pub exhaustive_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub channels: usize,
    pub size: usize,
    pub queries: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            channels: 16,
            size: 16,
            queries: 8,
            repetitions: 5,
            seed: 0,
        }
    }
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, s: usize) -> FeatureMap<f32> {
    FeatureMap::from_fn(c, s, s, |_, _, _| {
        let z: f64 = StandardNormal.sample(rng);
        z as f32
    })
}

fn min_time(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times the three matching stages for each bank size in `classes`.
pub fn bench_hpi(classes: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(classes.len());
    for &k in classes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ k as u64);
        let centers = (0..k.max(1))
            .map(|i| ClassCenter::new(format!("c{i:03}"), random_map(&mut rng, cfg.channels, cfg.size)))
            .collect::<Result<Vec<_>>>()?;
        let bank = CenterBank::new(centers, RefreshPolicy::Once)?;
        let queries: Vec<_> = (0..cfg.queries.max(1))
            .map(|_| random_map(&mut rng, cfg.channels, cfg.size))
            .collect();
        let matched = queries
            .iter()
            .map(|q| match_class(q, &bank).map(|g| g.index))
            .collect::<Result<Vec<_>>>()?;
        let n = queries.len() as f64;

        let global = min_time(cfg.repetitions, || {
            for q in &queries {
                std::hint::black_box(match_class(q, &bank)?);
            }
            Ok(())
        })?;
        let local = min_time(cfg.repetitions, || {
            for (q, &m) in queries.iter().zip(&matched) {
                std::hint::black_box(align_patches(q, bank.get(m))?);
            }
            Ok(())
        })?;
        let exhaustive = min_time(cfg.repetitions, || {
            for q in &queries {
                std::hint::black_box(align_exhaustive(q, &bank)?);
            }
            Ok(())
        })?;
        rows.push(BenchRow {
            classes: k,
            global_secs: global / n,
            local_secs: local / n,
            exhaustive_secs: exhaustive / n,
        });
    }
    Ok(rows)
}

pub fn format_rows(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:>8} {:>12} {:>12} {:>14} {:>9}\n",
        "classes", "global ms", "local ms", "exhaustive ms", "speedup"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>8} {:>12.4} {:>12.4} {:>14.4} {:>8.1}x\n",
            r.classes,
            1e3 * r.global_secs,
            1e3 * r.local_secs,
            1e3 * r.exhaustive_secs,
            r.exhaustive_secs / (r.global_secs + r.local_secs)
        ));
    }
    out
}
