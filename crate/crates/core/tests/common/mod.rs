//! Independent reference implementations used by the integration and
//! acceptance tests. Everything here is written from the definitions, in
//! f64, without calling the library routine under test.

#![allow(dead_code)]

use cras::centers::CenterBank;
use cras::FeatureMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f32> {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0f32..1.0))
}

/// p x p window average with edge replication, straight from the definition.
pub fn window_average(map: &FeatureMap<f32>, p: usize) -> Vec<f64> {
    let (c, h, w) = map.dims();
    let r = (p / 2) as i64;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                        acc += map.get(ch, yy, xx) as f64;
                    }
                }
                out.push(acc / (p * p) as f64);
            }
        }
    }
    out
}

/// Bilinear sample of one plane at output pixel (oy, ox) with pixel-center
/// alignment.
pub fn bilinear_at(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, oy: usize, ox: usize) -> f64 {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
        s.max(0.0).min((n_in - 1) as f64)
    };
    let sy = coord(oy, h, out_h);
    let sx = coord(ox, w, out_w);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let v = |y: usize, x: usize| plane[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

pub fn resize_plane(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            out.push(bilinear_at(plane, h, w, out_h, out_w, oy, ox));
        }
    }
    out
}

/// Reflect-about-the-edge index (edge sample repeated), for offsets smaller
/// than the length.
pub fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    let j = if i < 0 { -i - 1 } else if i >= n { 2 * n - i - 1 } else { i };
    j as usize
}

/// Full 2-D (not separable) Gaussian convolution with a normalized truncated
/// kernel.
pub fn blur_2d(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let mut weights = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let k = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            weights.push((dy, dx, k));
            total += k;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for &(dy, dx, k) in &weights {
                acc += k * values[mirror(y as i64 + dy, h) * w + mirror(x as i64 + dx, w)];
            }
            out[y * w + x] = acc / total;
        }
    }
    out
}

/// Fraction of (anomalous, normal) pairs ranked correctly, ties counting half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut won = 0.0;
    let mut pairs = 0.0;
    for (i, &a) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &n) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if a > n {
                won += 1.0;
            } else if a == n {
                won += 0.5;
            }
        }
    }
    won / pairs
}

/// Sum over distinct thresholds (descending) of recall step times precision.
pub fn ap_brute_force(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected = scores.iter().filter(|&&s| s >= t).count() as f64;
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= t).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / selected);
        prev_recall = recall;
    }
    ap
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn flat(map: &FeatureMap<f32>) -> Vec<f64> {
    map.as_slice().iter().map(|&v| v as f64).collect()
}

fn position(map: &FeatureMap<f32>, h: usize, w: usize) -> Vec<f64> {
    (0..map.channels()).map(|c| map.get(c, h, w) as f64).collect()
}

/// Exhaustive two-stage oracle: global cosine argmax over the bank, then the
/// nearest center vector per position. Returns the class and, per position,
/// the linear source index.
pub fn brute_force_recompose(u: &FeatureMap<f32>, bank: &CenterBank) -> (usize, Vec<usize>) {
    let uf = flat(u);
    let mut best = (0, f64::NEG_INFINITY);
    for (k, c) in bank.centers().iter().enumerate() {
        let s = cosine(&uf, &flat(c.map()));
        if s > best.1 {
            best = (k, s);
        }
    }
    let center = bank.get(best.0).map();
    let (_, h, w) = u.dims();
    let mut sources = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let q = position(u, y, x);
            let mut pick = (0, f64::NEG_INFINITY);
            for cy in 0..h {
                for cx in 0..w {
                    let s = cosine(&q, &position(center, cy, cx));
                    if s > pick.1 {
                        pick = (cy * w + cx, s);
                    }
                }
            }
            sources.push(pick.0);
        }
    }
    (best.0, sources)
}
