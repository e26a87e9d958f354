//! Local neighborhood aggregation and hierarchy merging of backbone features.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{shape_err, CrasError, Result};
use crate::tensor::{FeatureMap, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub patch_size: usize,
    pub levels_used: Vec<u32>,
    #[serde(
        serialize_with = "ser_target_channels",
        deserialize_with = "de_target_channels"
    )]
    pub target_channels: Option<usize>,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            patch_size: 3,
            levels_used: vec![2, 3],
            target_channels: None,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(CrasError::Config(format!(
                "patch_size must be odd and positive, got {}",
                self.patch_size
            )));
        }
        if self.levels_used.is_empty() {
            return Err(CrasError::Config("levels_used is empty".into()));
        }
        if self.target_channels == Some(0) {
            return Err(CrasError::Config("target_channels must be positive".into()));
        }
        Ok(())
    }
}

fn ser_target_channels<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(n) => s.serialize_u64(*n as u64),
        None => s.serialize_str("none"),
    }
}

fn de_target_channels<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Count(usize),
        Word(String),
        Null(()),
    }
    match Raw::deserialize(d)? {
        Raw::Count(n) => Ok(Some(n)),
        Raw::Null(()) => Ok(None),
        Raw::Word(w) if w == "none" => Ok(None),
        Raw::Word(w) => Err(serde::de::Error::custom(format!(
            "target_channels must be a count or \"none\", got {w:?}"
        ))),
    }
}

#[derive(Clone, Debug)]
pub struct HierarchyLevel {
    pub level: u32,
    pub map: FeatureMap<f32>,
}

/// Per-level backbone features of one sample, shallowest level first.
#[derive(Clone, Debug)]
pub struct HierarchyStack {
    levels: Vec<HierarchyLevel>,
}

impl HierarchyStack {
    pub fn new(mut levels: Vec<HierarchyLevel>) -> Result<Self> {
        levels.sort_by_key(|l| l.level);
        for pair in levels.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.level == b.level {
                return Err(shape_err(format!("level {} given twice", a.level)));
            }
            if b.map.height() > a.map.height() || b.map.width() > a.map.width() {
                return Err(shape_err(format!(
                    "level {} is spatially larger than level {}",
                    b.level, a.level
                )));
            }
        }
        Ok(HierarchyStack { levels })
    }

    pub fn levels(&self) -> &[HierarchyLevel] {
        &self.levels
    }

    pub fn get(&self, level: u32) -> Option<&FeatureMap<f32>> {
        self.levels.iter().find(|l| l.level == level).map(|l| &l.map)
    }
}

/// Mean over the `p x p` window centred at each position, replicating edge
/// values outside the map.
pub fn aggregate_neighborhood<T: Real>(map: &FeatureMap<T>, p: usize) -> Result<FeatureMap<T>> {
    if p == 0 || p % 2 == 0 {
        return Err(CrasError::Config(format!("patch size must be odd, got {p}")));
    }
    if p == 1 {
        return Ok(map.clone());
    }
    let (c, h, w) = map.dims();
    let half = (p / 2) as isize;
    let norm = T::of(1.0 / (p * p) as f64);
    let mut out = FeatureMap::zeros(c, h, w);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        let plane = map.plane(ch);
        // separable box sum: rows first, then columns
        let mut rows = vec![T::zero(); h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for dx in -half..=half {
                    acc += plane[y * w + clamp(x as isize + dx, w)];
                }
                rows[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for dy in -half..=half {
                    acc += rows[clamp(y as isize + dy, h) * w + x];
                }
                out.set(ch, y, x, acc * norm);
            }
        }
    }
    Ok(out)
}

/// Bilinear resize of one `h x w` plane with pixel-centre alignment:
/// `src = (dst + 0.5) * in / out - 0.5`, clamped to the valid range.
pub fn resize_bilinear<T: Real>(
    plane: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ys = interp_axis(h, out_h);
    let xs = interp_axis(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        let fy = T::of(fy);
        for &(x0, x1, fx) in &xs {
            let fx = T::of(fx);
            let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (T::one() - fy) + bottom * fy);
        }
    }
    out
}

fn interp_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_map<T: Real>(map: &FeatureMap<T>, out_h: usize, out_w: usize) -> FeatureMap<T> {
    let (c, h, w) = map.dims();
    if (h, w) == (out_h, out_w) {
        return map.clone();
    }
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        data.extend(resize_bilinear(map.plane(ch), h, w, out_h, out_w));
    }
    FeatureMap::new(c, out_h, out_w, data).expect("resize preserves element count")
}

/// Reduces the channel vector at each position to `target` values by
/// averaging contiguous channel groups (`[floor(i*D/T), ceil((i+1)*D/T))`).
pub fn group_channels<T: Real>(map: &FeatureMap<T>, target: usize) -> Result<FeatureMap<T>> {
    let (c, h, w) = map.dims();
    if target == 0 || target > c {
        return Err(CrasError::Config(format!(
            "target_channels {target} not in 1..={c}"
        )));
    }
    if target == c {
        return Ok(map.clone());
    }
    let hw = h * w;
    let mut data = vec![T::zero(); target * hw];
    for g in 0..target {
        let start = g * c / target;
        let end = ((g + 1) * c).div_ceil(target);
        let inv = T::of(1.0 / (end - start) as f64);
        let dst = &mut data[g * hw..(g + 1) * hw];
        for ch in start..end {
            for (d, &v) in dst.iter_mut().zip(map.plane(ch)) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    FeatureMap::new(target, h, w, data)
}

/// Produces the merged feature `t` from the selected hierarchy levels.
pub fn merge_hierarchies(stack: &HierarchyStack, cfg: &PrepConfig) -> Result<FeatureMap<f32>> {
    cfg.validate()?;
    let mut levels = cfg.levels_used.clone();
    levels.sort_unstable();
    levels.dedup();
    let mut selected = Vec::with_capacity(levels.len());
    for &lv in &levels {
        let map = stack
            .get(lv)
            .ok_or_else(|| CrasError::Config(format!("hierarchy level {lv} missing")))?;
        selected.push(aggregate_neighborhood(map, cfg.patch_size)?);
    }
    let (h, w) = (selected[0].height(), selected[0].width());
    let total: usize = selected.iter().map(|m| m.channels()).sum();
    let mut data = Vec::with_capacity(total * h * w);
    for m in &selected {
        data.extend_from_slice(resize_map(m, h, w).as_slice());
    }
    let merged = FeatureMap::new(total, h, w, data)?;
    match cfg.target_channels {
        None => Ok(merged),
        Some(t) => group_channels(&merged, t),
    }
}
