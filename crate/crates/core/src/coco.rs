//! JSON schemas: COCO-style ground truth and predictions, phrase lines, grounding output.
//!
//! Boxes on disk are `[x, y, w, h]` in pixels; in memory they are half-open [`BoxPx`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxPx, Detection};
use crate::metrics::GroundTruthSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtAnnotation {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GtFile {
    pub images: Vec<GtImage>,
    pub annotations: Vec<GtAnnotation>,
    pub categories: Vec<GtCategory>,
}

impl GtFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Checks references and box shapes, then indexes annotations by image.
    pub fn to_set(&self) -> Result<GroundTruthSet> {
        let images: BTreeSet<u64> = self.images.iter().map(|i| i.id).collect();
        let cats: BTreeSet<u64> = self.categories.iter().map(|c| c.id).collect();
        let mut set = GroundTruthSet::default();
        for (k, a) in self.annotations.iter().enumerate() {
            if !images.contains(&a.image_id) {
                return Err(Error::Data(format!("annotation {k}: unknown image_id {}", a.image_id)));
            }
            if !cats.contains(&a.category_id) {
                return Err(Error::Data(format!(
                    "annotation {k}: unknown category_id {}",
                    a.category_id
                )));
            }
            let b = BoxPx::from_xywh(a.bbox).map_err(|e| Error::Data(format!("annotation {k}: {e}")))?;
            set.add(a.image_id, a.category_id, b);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn detections_from_json(text: &str) -> Result<Vec<Detection>> {
    let records: Vec<PredRecord> = serde_json::from_str(text)?;
    records
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            if !r.score.is_finite() {
                return Err(Error::Data(format!("prediction {k}: non-finite score")));
            }
            Ok(Detection {
                image_id: r.image_id,
                category_id: r.category_id,
                bbox: BoxPx::from_xywh(r.bbox).map_err(|e| Error::Data(format!("prediction {k}: {e}")))?,
                confidence: r.score,
            })
        })
        .collect()
}

/// One record per line inside a JSON array, in the given order.
pub fn detections_to_json(dets: &[Detection]) -> Result<String> {
    let mut out = String::from("[");
    for (k, d) in dets.iter().enumerate() {
        out.push_str(if k == 0 { "\n" } else { ",\n" });
        out.push_str(&serde_json::to_string(&PredRecord {
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: d.bbox.to_xywh(),
            score: d.confidence,
        })?);
    }
    out.push_str(if dets.is_empty() { "]\n" } else { "\n]\n" });
    Ok(out)
}

/// One line of the phrases file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseRecord {
    pub bundle: String,
    pub token_indices: Vec<usize>,
    pub phrase: String,
    #[serde(default)]
    pub gt_boxes: Vec<[f64; 4]>,
}

/// One line of `ground` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundRecord {
    pub bundle: String,
    pub token_indices: Vec<usize>,
    pub phrase: String,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Parses JSON lines, skipping blank lines; errors name the 1-based line.
pub fn read_json_lines<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_json_lines<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
