//! Heatmap thresholding and box extraction.

use std::collections::VecDeque;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::expand::Heatmap;
use crate::geometry::{BoxPx, GridGeometry};
use crate::gmm::{crossover, fit_gmm_1d, mean_std, separation_test, GmmParams};
use crate::gradcam::InitialSeed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdSource {
    Crossover,
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub t: f64,
    pub source: ThresholdSource,
    /// Mixture estimate, when the fit succeeded.
    pub params: Option<GmmParams>,
    /// Heatmap mean and population std.
    pub mean: f64,
    pub std: f64,
}

/// `t = mean + gamma * std` with the population standard deviation.
pub fn fallback_threshold(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("empty heatmap".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite heatmap value".into()));
    }
    let (mean, std) = mean_std(values);
    Ok(mean + gamma * std)
}

/// Mixture crossover when the two components are separable, `mean + gamma * std` otherwise.
pub fn compute_threshold(h: &Heatmap, cfg: &PipelineConfig) -> Result<ThresholdResult> {
    if h.values.is_empty() {
        return Err(Error::Argument("empty heatmap".into()));
    }
    if let Some(i) = h.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite heatmap value at patch {i}")));
    }
    let (mean, std) = mean_std(&h.values);
    let params = fit_gmm_1d(&h.values, &cfg.em).ok().map(|fit| fit.params);
    if let Some(p) = params.filter(|p| separation_test(p, cfg.sep_factor)) {
        if let Ok(t) = crossover(&p, cfg.weighted_crossover) {
            return Ok(ThresholdResult {
                t,
                source: ThresholdSource::Crossover,
                params,
                mean,
                std,
            });
        }
    }
    Ok(ThresholdResult {
        t: mean + cfg.gamma * std,
        source: ThresholdSource::Fallback,
        params,
        mean,
        std,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

pub fn threshold_heatmap(h: &Heatmap, t: f64) -> Mask {
    Mask {
        bits: h.values.iter().map(|&v| v >= t).collect(),
    }
}

/// Cells of the 4-connected component of `mask` containing `seed`; the seed is forced on.
pub fn seed_component(mask: &Mask, seed: &InitialSeed, g: &GridGeometry) -> Result<Vec<usize>> {
    let np = g.num_patches();
    if mask.bits.len() != np {
        return Err(Error::Shape(format!(
            "mask of length {} for {np} patches",
            mask.bits.len()
        )));
    }
    g.patch_index_to_rc(seed.patch_index)?;
    let (gh, gw) = (g.grid_h(), g.grid_w());
    let mut seen = vec![false; np];
    let mut queue = VecDeque::from([seed.patch_index]);
    seen[seed.patch_index] = true;
    let mut cells = Vec::new();
    while let Some(i) = queue.pop_front() {
        cells.push(i);
        let (r, c) = (i / gw, i % gw);
        let mut visit = |j: usize| {
            if mask.bits[j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(i - gw);
        }
        if r + 1 < gh {
            visit(i + gw);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < gw {
            visit(i + 1);
        }
    }
    Ok(cells)
}

/// Pixel box enclosing the seed's connected segment.
pub fn extract_box(mask: &Mask, seed: &InitialSeed, g: &GridGeometry) -> Result<BoxPx> {
    let cells = seed_component(mask, seed, g)?;
    let gw = g.grid_w();
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for i in cells {
        let (r, c) = (i / gw, i % gw);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    g.patch_to_pixel_box(r0, c0, r1, c1)
}

/// Threshold a heatmap and box the segment containing `seed`.
pub fn segment(h: &Heatmap, seed: &InitialSeed, g: &GridGeometry, cfg: &PipelineConfig) -> Result<Segmentation> {
    if h.len() != g.num_patches() {
        return Err(Error::Shape(format!(
            "heatmap of length {} for {} patches",
            h.len(),
            g.num_patches()
        )));
    }
    let threshold = compute_threshold(h, cfg)?;
    let mask = threshold_heatmap(h, threshold.t);
    let bbox = extract_box(&mask, seed, g)?;
    Ok(Segmentation {
        threshold,
        mask,
        bbox,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub threshold: ThresholdResult,
    pub mask: Mask,
    pub bbox: BoxPx,
}
