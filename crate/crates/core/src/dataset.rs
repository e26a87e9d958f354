//! Loads manifest splits into merged feature samples.

use indexmap::IndexMap;

use crate::error::{shape_err, CrasError, Result};
use crate::feature_prep::{merge_hierarchies, HierarchyLevel, HierarchyStack, PrepConfig};
use crate::tensor::{FeatureMap, Mask};
use crate::tensor_store::{read_feature_map, read_mask, DatasetManifest, Label, ManifestEntry, Split};

#[derive(Clone, Debug)]
pub struct Sample {
    pub sample_id: String,
    pub category: String,
    pub label: Label,
    pub features: FeatureMap<f32>,
    pub mask: Option<Mask>,
}

/// Groups the entries of one split by sample, in manifest order.
pub fn sample_groups(manifest: &DatasetManifest, split: Split) -> Vec<Vec<&ManifestEntry>> {
    let mut groups: IndexMap<&str, Vec<&ManifestEntry>> = IndexMap::new();
    for e in manifest.split(split) {
        groups.entry(e.sample_id.as_str()).or_default().push(e);
    }
    groups.into_values().collect()
}

/// Reads and, for per-level entries, merges the features of one sample.
pub fn load_sample(manifest: &DatasetManifest, entries: &[&ManifestEntry], prep: &PrepConfig) -> Result<Sample> {
    let first = entries
        .first()
        .ok_or_else(|| CrasError::Empty("sample without entries".into()))?;
    for e in entries {
        if e.category != first.category || e.label != first.label || e.split != first.split {
            return Err(CrasError::Manifest(format!(
                "entries of sample {} disagree on category/label/split",
                first.sample_id
            )));
        }
    }
    let leveled = entries.iter().filter(|e| e.level.is_some()).count();
    let features = if leveled == 0 {
        if entries.len() != 1 {
            return Err(CrasError::Manifest(format!(
                "sample {} has {} unleveled entries",
                first.sample_id,
                entries.len()
            )));
        }
        read_feature_map(manifest.resolve(&first.path))?
    } else if leveled == entries.len() {
        let levels = entries
            .iter()
            .map(|e| {
                Ok(HierarchyLevel {
                    level: e.level.expect("checked"),
                    map: read_feature_map(manifest.resolve(&e.path))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        merge_hierarchies(&HierarchyStack::new(levels)?, prep)?
    } else {
        return Err(CrasError::Manifest(format!(
            "sample {} mixes leveled and unleveled entries",
            first.sample_id
        )));
    };
    let mask = match entries.iter().find_map(|e| e.mask_path.as_ref()) {
        Some(rel) => Some(read_mask(manifest.resolve(rel))?),
        None => None,
    };
    Ok(Sample {
        sample_id: first.sample_id.clone(),
        category: first.category.clone(),
        label: first.label,
        features,
        mask,
    })
}

/// All samples of a split with uniform feature dims.
pub fn load_split(manifest: &DatasetManifest, split: Split, prep: &PrepConfig) -> Result<Vec<Sample>> {
    let samples = sample_groups(manifest, split)
        .iter()
        .map(|g| load_sample(manifest, g, prep))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = samples.first() {
        for s in &samples {
            if s.features.dims() != first.features.dims() {
                return Err(shape_err(format!(
                    "sample {} has dims {:?}, expected {:?}",
                    s.sample_id,
                    s.features.dims(),
                    first.features.dims()
                )));
            }
        }
    }
    Ok(samples)
}

/// Training features grouped per category in `categories` order.
pub fn group_by_category<'a>(
    samples: &'a [Sample],
    categories: &[String],
) -> Result<Vec<(String, Vec<&'a FeatureMap<f32>>)>> {
    categories
        .iter()
        .map(|cat| {
            let maps: Vec<_> = samples
                .iter()
                .filter(|s| &s.category == cat)
                .map(|s| &s.features)
                .collect();
            if maps.is_empty() {
                Err(CrasError::Empty(format!(
                    "category {cat:?} has no training samples"
                )))
            } else {
                Ok((cat.clone(), maps))
            }
        })
        .collect()
}
