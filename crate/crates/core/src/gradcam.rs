//! Token-to-patch pointing: cross-attention weights, Grad-CAM scores, seed ranking.

use crate::bundle::TokenRecord;
use crate::error::{Error, Result};
use crate::geometry::GridGeometry;

/// Scaled dot-product attention weights `softmax(q . k_i / sqrt(d))`.
pub fn attention_weights(query: &[f64], keys: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = query.len();
    if d == 0 {
        return Err(Error::Shape("query has dimension 0".into()));
    }
    if keys.is_empty() {
        return Err(Error::Shape("no keys".into()));
    }
    if let Some((i, k)) = keys.iter().enumerate().find(|(_, k)| k.len() != d) {
        return Err(Error::Shape(format!(
            "key {i} has dimension {}, query has {d}",
            k.len()
        )));
    }
    let scale = (d as f64).sqrt();
    let logits: Vec<f64> = keys.iter().map(|k| dot(query, k) / scale).collect();
    Ok(softmax(&logits))
}

/// Attention weights plus the attended hidden vector `h = sum_i a_i v_i`.
pub fn attend(query: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != keys.len() {
        return Err(Error::Shape(format!(
            "{} values for {} keys",
            values.len(),
            keys.len()
        )));
    }
    let dv = values[0].len();
    if values.iter().any(|v| v.len() != dv) {
        return Err(Error::Shape("ragged value vectors".into()));
    }
    let weights = attention_weights(query, keys)?;
    let mut hidden = vec![0.0; dv];
    for (a, v) in weights.iter().zip(values) {
        for (h, x) in hidden.iter_mut().zip(v) {
            *h += a * x;
        }
    }
    Ok((weights, hidden))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-patch importance of one token, [CLS] removed.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCamMap {
    pub token_index: usize,
    pub scores: Vec<f64>,
}

/// `score_i = grad[i + 1] * attn[i + 1]`. No rectification: negative scores are kept.
pub fn gradcam_scores(token: &TokenRecord, token_index: usize, num_patches: usize) -> Result<GradCamMap> {
    let want = num_patches + 1;
    if token.attention_row.len() != want || token.gradient_row.len() != want {
        return Err(Error::Shape(format!(
            "token {token_index}: rows of length {} / {}, expected {want}",
            token.attention_row.len(),
            token.gradient_row.len()
        )));
    }
    let scores = token.attention_row[1..]
        .iter()
        .zip(&token.gradient_row[1..])
        .map(|(a, g)| g * a)
        .collect();
    Ok(GradCamMap {
        token_index,
        scores,
    })
}

/// Potential seeds ordered by descending score, ties by ascending patch index.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSet {
    pub seeds: Vec<(usize, f64)>,
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.seeds.iter().map(|&(i, _)| i)
    }
}

pub fn select_potential_seeds(map: &GradCamMap, m: usize) -> Result<SeedSet> {
    let np = map.scores.len();
    if m > np {
        return Err(Error::Argument(format!(
            "cannot select {m} seeds from {np} patches"
        )));
    }
    if let Some(i) = map.scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Data(format!("NaN Grad-CAM score at patch {i}")));
    }
    let mut order: Vec<usize> = (0..np).collect();
    order.sort_by(|&a, &b| map.scores[b].total_cmp(&map.scores[a]).then(a.cmp(&b)));
    Ok(SeedSet {
        seeds: order[..m].iter().map(|&i| (i, map.scores[i])).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitialSeed {
    pub patch_index: usize,
    pub row: usize,
    pub col: usize,
}

impl InitialSeed {
    pub fn at(g: &GridGeometry, patch_index: usize) -> Result<Self> {
        let (row, col) = g.patch_index_to_rc(patch_index)?;
        Ok(Self {
            patch_index,
            row,
            col,
        })
    }
}

/// Mean grid location of the top `n` seeds, rounded half up on each axis.
pub fn compute_initial_seed(seeds: &SeedSet, n: usize, g: &GridGeometry) -> Result<InitialSeed> {
    if n == 0 || n > seeds.len() {
        return Err(Error::Argument(format!(
            "cannot average {n} of {} seeds",
            seeds.len()
        )));
    }
    let (mut rows, mut cols) = (0usize, 0usize);
    for idx in seeds.indices().take(n) {
        let (r, c) = g.patch_index_to_rc(idx)?;
        rows += r;
        cols += c;
    }
    // floor(sum / n + 1/2) in integers
    let round = |sum: usize| (2 * sum + n) / (2 * n);
    let (row, col) = (round(rows), round(cols));
    Ok(InitialSeed {
        patch_index: g.rc_to_patch_index(row, col)?,
        row,
        col,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn token(attn: Vec<f64>, grad: Vec<f64>) -> TokenRecord {
        TokenRecord {
            text: "w".into(),
            char_start: 0,
            char_end: 1,
            attention_row: attn,
            gradient_row: grad,
        }
    }

    fn seedset(g: &GridGeometry, rcs: &[(usize, usize)]) -> SeedSet {
        SeedSet {
            seeds: rcs
                .iter()
                .enumerate()
                .map(|(k, &(r, c))| (g.rc_to_patch_index(r, c).unwrap(), 10.0 - k as f64))
                .collect(),
        }
    }

    #[test]
    fn softmax_examples() {
        let w = attention_weights(&[1.0, 2.0], &vec![vec![1.0, 1.0]; 4]).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));

        assert_eq!(attention_weights(&[3.0], &[vec![-7.0]]).unwrap(), vec![1.0]);

        let q = [2.0, 0.0, 0.0, 0.0];
        let w = attention_weights(&q, &[q.to_vec(), vec![0.0; 4]]).unwrap();
        // logits (4/2, 0)
        let e2 = 2f64.exp();
        assert!((w[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((w[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        assert!((w[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn softmax_shape_errors() {
        assert!(attention_weights(&[1.0, 2.0], &[vec![1.0]]).is_err());
        assert!(attention_weights(&[1.0], &[]).is_err());
        assert!(attention_weights(&[], &[vec![]]).is_err());
    }

    #[test]
    fn attend_mixes_values() {
        let keys = vec![vec![0.0], vec![0.0]];
        let values = vec![vec![2.0, 0.0], vec![0.0, 4.0]];
        let (w, h) = attend(&[1.0], &keys, &values).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        assert_eq!(h, vec![1.0, 2.0]);
    }

    #[test]
    fn gradcam_examples() {
        let t = token(vec![0.4, 0.1, 0.2, 0.3], vec![0.0, 1.0, -0.5, 2.0]);
        let map = gradcam_scores(&t, 0, 3).unwrap();
        assert_eq!(map.scores, vec![0.1, -0.1, 0.6]);

        let t = token(vec![0.25; 4], vec![0.0; 4]);
        assert_eq!(gradcam_scores(&t, 0, 3).unwrap().scores, vec![0.0; 3]);

        let t = token(vec![0.25; 4], vec![1.0; 4]);
        assert_eq!(gradcam_scores(&t, 0, 3).unwrap().scores, vec![0.25; 3]);

        assert!(matches!(gradcam_scores(&t, 0, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn seed_selection_examples() {
        let map = GradCamMap {
            token_index: 0,
            scores: vec![0.1, -0.1, 0.6],
        };
        let d = select_potential_seeds(&map, 2).unwrap();
        assert_eq!(d.seeds, vec![(2, 0.6), (0, 0.1)]);
        let all = select_potential_seeds(&map, 3).unwrap();
        assert_eq!(all.indices().collect::<Vec<_>>(), vec![2, 0, 1]);
        assert!(select_potential_seeds(&map, 4).is_err());

        let flat = GradCamMap {
            token_index: 0,
            scores: vec![1.0; 6],
        };
        let d = select_potential_seeds(&flat, 3).unwrap();
        assert_eq!(d.indices().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn initial_seed_examples() {
        let g = GridGeometry::from_grid(4, 4, 16).unwrap();
        let s = compute_initial_seed(&seedset(&g, &[(2, 3)]), 1, &g).unwrap();
        assert_eq!((s.row, s.col), (2, 3));

        let s = compute_initial_seed(&seedset(&g, &[(1, 1), (1, 2), (2, 1)]), 3, &g).unwrap();
        assert_eq!((s.row, s.col, s.patch_index), (1, 1, 5));

        let s = compute_initial_seed(&seedset(&g, &[(0, 0), (1, 1)]), 2, &g).unwrap();
        assert_eq!((s.row, s.col), (1, 1));

        assert!(compute_initial_seed(&seedset(&g, &[(0, 0)]), 2, &g).is_err());
    }

    #[test]
    fn initial_seed_may_leave_seed_set() {
        let g = GridGeometry::from_grid(4, 4, 16).unwrap();
        let s = compute_initial_seed(&seedset(&g, &[(0, 0), (0, 2), (2, 0), (2, 2)]), 4, &g).unwrap();
        assert_eq!((s.row, s.col), (1, 1));
    }

    proptest! {
        #[test]
        fn softmax_laws(logits in prop::collection::vec(-30.0f64..30.0, 1..40),
                        shift in -50.0f64..50.0,
                        rot in any::<usize>()) {
            // 1-d keys with query 1 make the logits exactly the key values.
            let keys: Vec<Vec<f64>> = logits.iter().map(|&l| vec![l]).collect();
            let w = attention_weights(&[1.0], &keys).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);

            let shifted: Vec<Vec<f64>> = logits.iter().map(|&l| vec![l + shift]).collect();
            let ws = attention_weights(&[1.0], &shifted).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-9);
            }

            let k = rot % keys.len();
            let mut rotated = keys.clone();
            rotated.rotate_left(k);
            let wr = attention_weights(&[1.0], &rotated).unwrap();
            let mut expect = w.clone();
            expect.rotate_left(k);
            for (a, b) in wr.iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn gradcam_linear_in_gradient(attn in prop::collection::vec(0.0f64..1.0, 5),
                                      g1 in prop::collection::vec(-3.0f64..3.0, 5),
                                      g2 in prop::collection::vec(-3.0f64..3.0, 5),
                                      alpha in -2.0f64..2.0) {
            let combo: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + alpha * b).collect();
            let m1 = gradcam_scores(&token(attn.clone(), g1), 0, 4).unwrap();
            let m2 = gradcam_scores(&token(attn.clone(), g2), 0, 4).unwrap();
            let mc = gradcam_scores(&token(attn, combo), 0, 4).unwrap();
            for i in 0..4 {
                prop_assert!((mc.scores[i] - (m1.scores[i] + alpha * m2.scores[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn selection_separates_scores(scores in prop::collection::vec(-5.0f64..5.0, 1..60),
                                      m_seed in any::<usize>(),
                                      scale in 0.01f64..100.0) {
            let m = m_seed % (scores.len() + 1);
            let map = GradCamMap { token_index: 0, scores: scores.clone() };
            let d = select_potential_seeds(&map, m).unwrap();
            prop_assert_eq!(d.len(), m);
            let chosen: std::collections::HashSet<usize> = d.indices().collect();
            prop_assert_eq!(chosen.len(), m);
            if m > 0 {
                let min_sel = d.seeds.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
                let max_rest = (0..scores.len()).filter(|i| !chosen.contains(i))
                    .map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(min_sel >= max_rest);
            }
            for w in d.seeds.windows(2) {
                prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            }

            let scaled = GradCamMap { token_index: 0, scores: scores.iter().map(|s| s * scale).collect() };
            let ds = select_potential_seeds(&scaled, m).unwrap();
            prop_assert_eq!(d.indices().collect::<Vec<_>>(), ds.indices().collect::<Vec<_>>());
        }

        #[test]
        fn initial_seed_with_one_is_top(scores in prop::collection::vec(-5.0f64..5.0, 16)) {
            let g = GridGeometry::from_grid(4, 4, 8).unwrap();
            let d = select_potential_seeds(&GradCamMap { token_index: 0, scores }, 5).unwrap();
            let s = compute_initial_seed(&d, 1, &g).unwrap();
            prop_assert_eq!(s.patch_index, d.seeds[0].0);
        }
    }
}
