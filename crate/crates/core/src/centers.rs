//! Per-category contextual centers and global-to-local center matching.
//!
//! A class center is the positionwise mean of adapted normal features of one
//! category. At matching time a feature map is first assigned to the center
//! with the highest cosine similarity of the flattened maps; each position is
//! then replaced by the most similar position vector of that center only, so
//! the local stage does not depend on the number of categories.
//!
//! All similarities accumulate in `f64`. Ties resolve to the lowest index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, CrasError, Result};
use crate::nn::AdapterNet;
use crate::tensor::FeatureMap;
use crate::tensor_store::{read_feature_map, write_atomic, write_feature_map};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefreshPolicy {
    /// Centers computed once with the initial adapter.
    Once,
    /// Centers recomputed with the current (frozen) adapter each epoch.
    #[default]
    PerEpoch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterMode {
    #[default]
    Mean,
    /// First training sample of the category stands in for the center.
    SingleSample,
}

#[derive(Clone, Debug)]
pub struct ClassCenter {
    category: String,
    map: FeatureMap<f32>,
    flat: Vec<f64>,
    flat_norm: f64,
    positions: Vec<f64>,
    position_norms: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

impl ClassCenter {
    pub fn new(category: impl Into<String>, map: FeatureMap<f32>) -> Result<Self> {
        let category = category.into();
        let flat: Vec<f64> = map.as_slice().iter().map(|&v| v as f64).collect();
        let flat_norm = norm(&flat);
        if flat_norm <= 0.0 || !flat_norm.is_finite() {
            return Err(CrasError::ZeroNorm(format!(
                "center of category {category:?} has norm {flat_norm}"
            )));
        }
        let positions: Vec<f64> = map.to_positions().iter().map(|&v| v as f64).collect();
        let position_norms = positions.chunks_exact(map.channels()).map(norm).collect();
        Ok(ClassCenter {
            category,
            map,
            flat,
            flat_norm,
            positions,
            position_norms,
        })
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn map(&self) -> &FeatureMap<f32> {
        &self.map
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_norm(&self) -> f64 {
        self.flat_norm
    }
}

/// Adapts each sample with the (frozen) adapter and returns `A(t)`.
pub fn adapt(adapter: &AdapterNet<f32>, t: &FeatureMap<f32>) -> Result<FeatureMap<f32>> {
    let (c, h, w) = t.dims();
    if c != adapter.channels() {
        return Err(shape_err(format!(
            "adapter expects {} channels, feature has {c}",
            adapter.channels()
        )));
    }
    let rows = adapter.forward(&t.to_positions())?;
    FeatureMap::from_positions(c, h, w, &rows)
}

/// Positionwise mean of already adapted feature maps.
pub fn mean_center(category: impl Into<String>, adapted: &[FeatureMap<f32>]) -> Result<ClassCenter> {
    let category = category.into();
    let first = adapted
        .first()
        .ok_or_else(|| CrasError::Empty(format!("no samples for category {category:?}")))?;
    let mut acc = vec![0.0f64; first.as_slice().len()];
    for m in adapted {
        first.ensure_same_dims(m, "center samples")?;
        for (a, &v) in acc.iter_mut().zip(m.as_slice()) {
            *a += v as f64;
        }
    }
    let n = adapted.len() as f64;
    let (c, h, w) = first.dims();
    let map = FeatureMap::new(c, h, w, acc.iter().map(|&a| (a / n) as f32).collect())?;
    ClassCenter::new(category, map)
}

/// `c_k = (1/N_k) * sum_i A(t_i)` over the normal training samples of one
/// category.
pub fn init_center(
    category: impl Into<String>,
    samples: &[&FeatureMap<f32>],
    adapter: &AdapterNet<f32>,
) -> Result<ClassCenter> {
    let adapted = samples
        .iter()
        .map(|t| adapt(adapter, t))
        .collect::<Result<Vec<_>>>()?;
    mean_center(category, &adapted)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMatch {
    pub index: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// Recomposed center `p`.
    pub map: FeatureMap<f32>,
    /// For each position, the linear index `h*W + w` of the chosen center vector.
    pub source: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CenterBank {
    centers: Vec<ClassCenter>,
    pub refresh_policy: RefreshPolicy,
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    version: u32,
    refresh_policy: RefreshPolicy,
    centers: Vec<BankIndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct BankIndexEntry {
    category: String,
    file: String,
}

impl CenterBank {
    pub fn new(centers: Vec<ClassCenter>, refresh_policy: RefreshPolicy) -> Result<Self> {
        let first = centers
            .first()
            .ok_or_else(|| CrasError::Empty("center bank needs at least one center".into()))?;
        for (i, c) in centers.iter().enumerate() {
            first.map.ensure_same_dims(&c.map, "center bank")?;
            if centers[..i].iter().any(|o| o.category == c.category) {
                return Err(CrasError::Config(format!(
                    "category {:?} appears twice in the bank",
                    c.category
                )));
            }
        }
        Ok(CenterBank {
            centers,
            refresh_policy,
        })
    }

    /// Builds one center per category from its training samples.
    pub fn build(
        groups: &[(String, Vec<&FeatureMap<f32>>)],
        adapter: &AdapterNet<f32>,
        mode: CenterMode,
        refresh_policy: RefreshPolicy,
    ) -> Result<Self> {
        let centers = groups
            .iter()
            .map(|(category, samples)| match mode {
                CenterMode::Mean => init_center(category.clone(), samples, adapter),
                CenterMode::SingleSample => {
                    let first = samples.first().ok_or_else(|| {
                        CrasError::Empty(format!("no samples for category {category:?}"))
                    })?;
                    init_center(category.clone(), &[*first], adapter)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        CenterBank::new(centers, refresh_policy)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[ClassCenter] {
        &self.centers
    }

    pub fn get(&self, index: usize) -> &ClassCenter {
        &self.centers[index]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.centers[0].map.dims()
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.centers.iter().position(|c| c.category == category)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| CrasError::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.centers.len());
        for (i, c) in self.centers.iter().enumerate() {
            let file = format!("center_{i:03}.crft");
            write_feature_map(dir.join(&file), &c.map)?;
            entries.push(BankIndexEntry {
                category: c.category.clone(),
                file,
            });
        }
        let index = BankIndex {
            version: 1,
            refresh_policy: self.refresh_policy,
            centers: entries,
        };
        write_atomic(&dir.join("index.json"), serde_json::to_string_pretty(&index)?.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| CrasError::io(&path, e))?;
        let index: BankIndex = serde_json::from_str(&text)?;
        if index.version != 1 {
            return Err(CrasError::UnsupportedVersion(index.version as u16));
        }
        let centers = index
            .centers
            .into_iter()
            .map(|e| ClassCenter::new(e.category, read_feature_map(dir.join(&e.file))?))
            .collect::<Result<Vec<_>>>()?;
        CenterBank::new(centers, index.refresh_policy)
    }

    fn check_query(&self, u: &FeatureMap<f32>) -> Result<()> {
        let dims = self.dims();
        if u.dims() != dims {
            return Err(shape_err(format!(
                "feature {:?} vs centers {dims:?}",
                u.dims()
            )));
        }
        Ok(())
    }
}

/// Index of the center whose flattened map is most cosine-similar to `u`.
pub fn match_class(u: &FeatureMap<f32>, bank: &CenterBank) -> Result<GlobalMatch> {
    bank.check_query(u)?;
    let flat: Vec<f64> = u.as_slice().iter().map(|&v| v as f64).collect();
    let un = norm(&flat);
    if un <= 0.0 {
        return Err(CrasError::ZeroNorm("query feature map".into()));
    }
    let mut best = GlobalMatch {
        index: 0,
        similarity: f64::NEG_INFINITY,
    };
    for (k, c) in bank.centers.iter().enumerate() {
        let sim = dot(&flat, &c.flat) / (un * c.flat_norm);
        if sim > best.similarity {
            best = GlobalMatch {
                index: k,
                similarity: sim,
            };
        }
    }
    Ok(best)
}

fn nearest_position(
    query: &[f64],
    qn: f64,
    positions: &[f64],
    norms: &[f64],
    channels: usize,
) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, (cand, &cn)) in positions.chunks_exact(channels).zip(norms).enumerate() {
        let sim = dot(query, cand) / (qn * cn);
        if sim > best.1 {
            best = (j, sim);
        }
    }
    best
}

fn query_rows(u: &FeatureMap<f32>) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows: Vec<f64> = u.to_positions().iter().map(|&v| v as f64).collect();
    let norms: Vec<f64> = rows.chunks_exact(u.channels()).map(norm).collect();
    if let Some(pos) = norms.iter().position(|&n| n <= 0.0) {
        return Err(CrasError::ZeroNorm(format!(
            "query vector at position {pos}"
        )));
    }
    Ok((rows, norms))
}

/// Replaces every position of `u` by the most cosine-similar position vector
/// of `center`.
pub fn align_patches(u: &FeatureMap<f32>, center: &ClassCenter) -> Result<Alignment> {
    u.ensure_same_dims(&center.map, "align_patches")?;
    if let Some(pos) = center.position_norms.iter().position(|&n| n <= 0.0) {
        return Err(CrasError::ZeroNorm(format!(
            "center {:?} vector at position {pos}",
            center.category
        )));
    }
    let channels = u.channels();
    let (rows, norms) = query_rows(u)?;
    let center_rows = center.map.to_positions();
    let mut out = Vec::with_capacity(rows.len());
    let mut source = Vec::with_capacity(norms.len());
    for (q, &qn) in rows.chunks_exact(channels).zip(&norms) {
        let (j, _) = nearest_position(q, qn, &center.positions, &center.position_norms, channels);
        out.extend_from_slice(&center_rows[j * channels..(j + 1) * channels]);
        source.push(j);
    }
    let (c, h, w) = u.dims();
    Ok(Alignment {
        map: FeatureMap::from_positions(c, h, w, &out)?,
        source,
    })
}

/// Global match followed by local alignment against the matched center only.
pub fn recompose(u: &FeatureMap<f32>, bank: &CenterBank) -> Result<(GlobalMatch, Alignment)> {
    let global = match_class(u, bank)?;
    let aligned = align_patches(u, bank.get(global.index))?;
    Ok((global, aligned))
}

/// Per-position nearest vector over every center in the bank (direct 1-NN
/// against all categories). Returns the recomposed map and, per position,
/// the `(center, position)` pair chosen.
pub fn align_exhaustive(u: &FeatureMap<f32>, bank: &CenterBank) -> Result<(FeatureMap<f32>, Vec<(usize, usize)>)> {
    bank.check_query(u)?;
    let channels = u.channels();
    let (rows, norms) = query_rows(u)?;
    let center_rows: Vec<Vec<f32>> = bank.centers.iter().map(|c| c.map.to_positions()).collect();
    let mut out = Vec::with_capacity(rows.len());
    let mut source = Vec::with_capacity(norms.len());
    for (q, &qn) in rows.chunks_exact(channels).zip(&norms) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (k, c) in bank.centers.iter().enumerate() {
            let (j, sim) = nearest_position(q, qn, &c.positions, &c.position_norms, channels);
            if sim > best.2 {
                best = (k, j, sim);
            }
        }
        out.extend_from_slice(&center_rows[best.0][best.1 * channels..(best.1 + 1) * channels]);
        source.push((best.0, best.1));
    }
    let (c, h, w) = u.dims();
    Ok((FeatureMap::from_positions(c, h, w, &out)?, source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f32> {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn bank_of(maps: Vec<FeatureMap<f32>>) -> CenterBank {
        let centers = maps
            .into_iter()
            .enumerate()
            .map(|(i, m)| ClassCenter::new(format!("c{i}"), m).unwrap())
            .collect();
        CenterBank::new(centers, RefreshPolicy::Once).unwrap()
    }

    #[test]
    fn single_sample_center_is_adapted_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_map(&mut rng, 4, 3, 3);
        let adapter = AdapterNet::near_identity(4, &mut rng);
        let c = init_center("a", &[&t], &adapter).unwrap();
        assert_eq!(c.map(), &adapt(&adapter, &t).unwrap());
    }

    #[test]
    fn opposite_samples_give_zero_norm_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_map(&mut rng, 3, 2, 2);
        let neg = x.map(|v| -v);
        let adapter = AdapterNet::identity(3);
        let err = init_center("a", &[&x, &neg], &adapter).unwrap_err();
        assert!(matches!(err, CrasError::ZeroNorm(_)));
        assert!(init_center("a", &[], &adapter).is_err());
    }

    #[test]
    fn mean_center_matches_accumulate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<_> = (0..8).map(|_| random_map(&mut rng, 5, 4, 3)).collect();
        let refs: Vec<_> = samples.iter().collect();
        let c = init_center("a", &refs, &AdapterNet::identity(5)).unwrap();
        for i in 0..c.map().as_slice().len() {
            let mut acc = 0.0f64;
            for s in &samples {
                acc += s.as_slice()[i] as f64;
            }
            assert!((c.map().as_slice()[i] as f64 - acc / 8.0).abs() < 1e-6);
        }
    }

    #[test]
    fn match_exact_and_parallel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<_> = (0..3).map(|_| random_map(&mut rng, 3, 2, 2)).collect();
        let bank = bank_of(maps.clone());
        let m = match_class(&maps[2], &bank).unwrap();
        assert_eq!(m.index, 2);
        assert!((m.similarity - 1.0).abs() < 1e-12);

        // c0 = e0 everywhere, c1 = e1, c2 = e2; query along e2 scaled
        let axis = |k: usize| FeatureMap::<f32>::from_fn(3, 2, 2, move |c, _, _| (c == k) as u8 as f32);
        let bank = bank_of(vec![axis(0), axis(1), axis(2)]);
        let q = axis(2).map(|v| 3.5 * v);
        assert_eq!(match_class(&q, &bank).unwrap().index, 2);
        assert!(match_class(&FeatureMap::zeros(3, 2, 2), &bank).is_err());
    }

    #[test]
    fn align_self_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = random_map(&mut rng, 6, 3, 3);
        let c = ClassCenter::new("a", map.clone()).unwrap();
        let a = align_patches(&map, &c).unwrap();
        assert_eq!(a.map, map);
        assert_eq!(a.source, (0..9).collect::<Vec<_>>());

        let tiny = ClassCenter::new("b", random_map(&mut rng, 6, 1, 1)).unwrap();
        let u = random_map(&mut rng, 6, 1, 1);
        assert_eq!(align_patches(&u, &tiny).unwrap().map, *tiny.map());
    }

    #[test]
    fn align_ties_pick_lowest_index() {
        let v = [1.0f32, 2.0, 0.5];
        let center = FeatureMap::from_fn(3, 2, 2, |c, _, _| v[c]);
        let c = ClassCenter::new("a", center).unwrap();
        let u = FeatureMap::from_fn(3, 2, 2, |c, h, _| v[c] * (1 + h) as f32);
        assert_eq!(align_patches(&u, &c).unwrap().source, vec![0, 0, 0, 0]);
    }

    #[test]
    fn zero_center_vector_is_an_error() {
        let mut map = FeatureMap::<f32>::from_fn(2, 1, 2, |_, _, _| 1.0);
        map.set(0, 0, 1, 0.0);
        map.set(1, 0, 1, 0.0);
        let c = ClassCenter::new("a", map).unwrap();
        let u = FeatureMap::from_fn(2, 1, 2, |_, _, _| 1.0);
        assert!(matches!(align_patches(&u, &c), Err(CrasError::ZeroNorm(_))));
    }

    #[test]
    fn single_class_recompose_is_align() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = bank_of(vec![random_map(&mut rng, 4, 3, 3)]);
        let u = random_map(&mut rng, 4, 3, 3);
        let (g, a) = recompose(&u, &bank).unwrap();
        assert_eq!(g.index, 0);
        assert_eq!(a, align_patches(&u, bank.get(0)).unwrap());
    }

    #[test]
    fn bank_roundtrip_on_disk() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = bank_of((0..3).map(|_| random_map(&mut rng, 2, 2, 2)).collect());
        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path()).unwrap();
        let back = CenterBank::load(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.centers().iter().zip(bank.centers()) {
            assert_eq!(a.category(), b.category());
            assert_eq!(a.map(), b.map());
        }
    }
}
