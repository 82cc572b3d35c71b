//! Seed expansion over ViT key similarities.

use std::collections::BTreeSet;

use crate::bundle::KeyMatrix;
use crate::error::{Error, Result};
use crate::gradcam::{dot, InitialSeed, SeedSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    GradCam,
    Expanded,
    Phrase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub kind: HeatmapKind,
}

impl Heatmap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest value; the lowest index wins ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, v) in self.values.iter().enumerate() {
            match best {
                Some(b) if self.values[b] >= *v => {}
                _ => best = Some(i),
            }
        }
        best
    }
}

/// Patches taken to belong to the object: the initial seed plus the
/// potential seeds whose key does not anti-correlate with the seed's key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectSet {
    pub seed: usize,
    pub patches: BTreeSet<usize>,
}

pub fn build_object_set(seed: &InitialSeed, potential: &SeedSet, keys: &KeyMatrix) -> Result<ObjectSet> {
    check_index(seed.patch_index, keys)?;
    let ks = keys.row(seed.patch_index);
    let mut patches = BTreeSet::from([seed.patch_index]);
    for f in potential.indices() {
        check_index(f, keys)?;
        if dot(ks, keys.row(f)) >= 0.0 {
            patches.insert(f);
        }
    }
    Ok(ObjectSet {
        seed: seed.patch_index,
        patches,
    })
}

/// `psi_i = k_p . k_i` for every patch `i`.
pub fn patch_heatmap(p: usize, keys: &KeyMatrix) -> Result<Heatmap> {
    check_index(p, keys)?;
    Ok(similarity_to(keys.row(p), keys))
}

/// Sum of the patch heatmaps over the object set, computed as the heatmap of the summed key.
pub fn object_heatmap(object: &ObjectSet, keys: &KeyMatrix) -> Result<Heatmap> {
    if object.patches.is_empty() {
        return Err(Error::Argument("empty object set".into()));
    }
    let mut summed = vec![0.0; keys.dim()];
    for &p in &object.patches {
        check_index(p, keys)?;
        for (s, k) in summed.iter_mut().zip(keys.row(p)) {
            *s += k;
        }
    }
    let mut h = similarity_to(&summed, keys);
    h.kind = HeatmapKind::Expanded;
    Ok(h)
}

fn similarity_to(query: &[f64], keys: &KeyMatrix) -> Heatmap {
    Heatmap {
        values: (0..keys.rows()).map(|i| dot(query, keys.row(i))).collect(),
        kind: HeatmapKind::Expanded,
    }
}

fn check_index(i: usize, keys: &KeyMatrix) -> Result<()> {
    if i >= keys.rows() {
        return Err(Error::Range {
            index: i,
            limit: keys.rows(),
        });
    }
    Ok(())
}
