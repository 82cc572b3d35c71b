//! Per-image feature bundle: grid geometry, ViT keys and per-token attention/gradient rows.

use crate::error::{Error, Result};
use crate::geometry::GridGeometry;

/// Tolerance on the softmax sum of each attention row.
pub const ATTENTION_SUM_TOL: f64 = 1e-4;

/// How the exporter collapsed attention heads into one row per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadReduction {
    Mean,
    Max,
    Sum,
    Single,
}

impl HeadReduction {
    pub fn tag(self) -> u8 {
        match self {
            HeadReduction::Mean => 0,
            HeadReduction::Max => 1,
            HeadReduction::Sum => 2,
            HeadReduction::Single => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => HeadReduction::Mean,
            1 => HeadReduction::Max,
            2 => HeadReduction::Sum,
            3 => HeadReduction::Single,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    /// Cross-attention layer of the vision-language encoder.
    pub l_vl: u16,
    /// Self-attention layer the ViT keys come from.
    pub l_vit: u16,
    pub head_reduction: HeadReduction,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            l_vl: 8,
            l_vit: 11,
            head_reduction: HeadReduction::Mean,
        }
    }
}

/// One caption token. Row index 0 is the [CLS] slot; index `i + 1` is patch `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub text: String,
    pub char_start: u32,
    pub char_end: u32,
    pub attention_row: Vec<f64>,
    pub gradient_row: Vec<f64>,
}

/// Row-major `N_P x d` key matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl KeyMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "key data of length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged key rows".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub geometry: GridGeometry,
    pub caption: String,
    pub tokens: Vec<TokenRecord>,
    pub vit_keys: KeyMatrix,
    pub provenance: Provenance,
    /// Reserved header flags, carried through unchanged.
    pub flags: u8,
}

impl FeatureBundle {
    pub fn num_patches(&self) -> usize {
        self.geometry.num_patches()
    }

    pub fn validate(&self) -> Result<()> {
        let np = self.num_patches();
        if self.vit_keys.rows() != np {
            return Err(Error::Shape(format!(
                "vit_keys has {} rows, grid has {np} patches",
                self.vit_keys.rows()
            )));
        }
        if self.vit_keys.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite ViT key".into()));
        }
        for (t, tok) in self.tokens.iter().enumerate() {
            validate_token(t, tok, np, &self.caption)?;
        }
        Ok(())
    }
}

fn validate_token(t: usize, tok: &TokenRecord, np: usize, caption: &str) -> Result<()> {
    if tok.attention_row.len() != np + 1 || tok.gradient_row.len() != np + 1 {
        return Err(Error::Shape(format!(
            "token {t}: rows must have length {} (got {} / {})",
            np + 1,
            tok.attention_row.len(),
            tok.gradient_row.len()
        )));
    }
    let (start, end) = (tok.char_start as usize, tok.char_end as usize);
    if start >= end || end > caption.len() {
        return Err(Error::Data(format!(
            "token {t}: span {start}..{end} invalid for caption of {} bytes",
            caption.len()
        )));
    }
    if tok
        .attention_row
        .iter()
        .chain(&tok.gradient_row)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Data(format!("token {t}: non-finite row value")));
    }
    if tok.attention_row.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
        return Err(Error::Data(format!("token {t}: attention outside [0, 1]")));
    }
    let sum: f64 = tok.attention_row.iter().sum();
    if (sum - 1.0).abs() > ATTENTION_SUM_TOL {
        return Err(Error::Data(format!(
            "token {t}: attention row sums to {sum}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FeatureBundle {
        let geometry = GridGeometry::from_grid(1, 3, 16).unwrap();
        FeatureBundle {
            geometry,
            caption: "a dog".into(),
            tokens: vec![TokenRecord {
                text: "dog".into(),
                char_start: 2,
                char_end: 5,
                attention_row: vec![0.4, 0.1, 0.2, 0.3],
                gradient_row: vec![0.0, 1.0, -0.5, 2.0],
            }],
            vit_keys: KeyMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])
                .unwrap(),
            provenance: Provenance::default(),
            flags: 0,
        }
    }

    #[test]
    fn valid_bundle_passes() {
        tiny().validate().unwrap();
    }

    #[test]
    fn catches_bad_rows_and_spans() {
        let mut b = tiny();
        b.tokens[0].attention_row[0] = 0.5;
        assert!(matches!(b.validate(), Err(Error::Data(_))));

        let mut b = tiny();
        b.tokens[0].gradient_row.pop();
        assert!(matches!(b.validate(), Err(Error::Shape(_))));

        let mut b = tiny();
        b.tokens[0].char_end = 9;
        assert!(b.validate().is_err());

        let mut b = tiny();
        b.vit_keys = KeyMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(b.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn head_reduction_tags_roundtrip() {
        for tag in 0..4 {
            assert_eq!(HeadReduction::from_tag(tag).unwrap().tag(), tag);
        }
        assert!(HeadReduction::from_tag(4).is_none());
    }
}
