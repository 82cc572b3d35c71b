//! Planted-object bundle generator.
//!
//! Every object gets its own key direction; together with the background
//! direction they form a regular simplex, so any two directions have a
//! negative dot product. Keys are the direction of the cell's owner plus
//! isotropic gaussian noise. Each object gets one caption token whose
//! attention concentrates on a few cells near the object's center.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bundle::{FeatureBundle, KeyMatrix, Provenance, TokenRecord};
use crate::error::{Error, Result};
use crate::geometry::{BoxPx, GridGeometry};

/// Inclusive patch rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl PatchRect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..=self.row_max).contains(&r) && (self.col_min..=self.col_max).contains(&c)
    }

    pub fn overlaps(&self, o: &PatchRect) -> bool {
        self.row_min <= o.row_max
            && o.row_min <= self.row_max
            && self.col_min <= o.col_max
            && o.col_min <= self.col_max
    }

    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub category: String,
    pub rect: PatchRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub grid_h: u16,
    pub grid_w: u16,
    #[serde(default = "default_patch_size")]
    pub patch_size: u16,
    #[serde(default = "default_d_vit")]
    pub d_vit: usize,
    pub objects: Vec<PlantedObject>,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

fn default_patch_size() -> u16 {
    16
}

fn default_d_vit() -> usize {
    32
}

/// Peak cells per token.
const PEAK_CELLS: usize = 4;

#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub bundle: FeatureBundle,
    /// Planted category and its pixel box, one per object, in token order.
    pub truth: Vec<(String, BoxPx)>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<GridGeometry> {
        let g = GridGeometry::from_grid(self.grid_h, self.grid_w, self.patch_size)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Argument("noise_sigma must be finite and >= 0".into()));
        }
        if self.d_vit < self.objects.len() + 1 {
            return Err(Error::Argument(format!(
                "d_vit {} too small for {} object directions plus background",
                self.d_vit,
                self.objects.len()
            )));
        }
        for (k, o) in self.objects.iter().enumerate() {
            let r = &o.rect;
            if r.row_min > r.row_max || r.col_min > r.col_max || r.row_max >= g.grid_h() || r.col_max >= g.grid_w() {
                return Err(Error::Argument(format!("object {k} rectangle {r:?} not inside the grid")));
            }
            if o.category.is_empty() || !o.category.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::Argument(format!(
                    "object {k} category {:?} must be a lowercase word",
                    o.category
                )));
            }
            for (j, other) in self.objects[..k].iter().enumerate() {
                if r.overlaps(&other.rect) {
                    return Err(Error::Argument(format!("objects {j} and {k} overlap")));
                }
            }
        }
        Ok(g)
    }
}

/// Deterministic in `spec` (seed included).
pub fn generate_synthetic_bundle(spec: &SynthSpec) -> Result<SynthBundle> {
    let g = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let n_obj = spec.objects.len();
    let directions = simplex_directions(n_obj + 1, spec.d_vit, &mut rng);
    let (background, object_dirs) = directions.split_first().expect("at least one direction");
    let np = g.num_patches();

    let owner: Vec<Option<usize>> = (0..np)
        .map(|i| {
            let (r, c) = (i / g.grid_w(), i % g.grid_w());
            spec.objects.iter().position(|o| o.rect.contains(r, c))
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut keys = Vec::with_capacity(np * spec.d_vit);
    for own in &owner {
        let dir = own.map_or(background, |j| &object_dirs[j]);
        for &x in dir {
            let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            keys.push(f64::from((x + n) as f32));
        }
    }

    let mut caption = String::new();
    let mut tokens = Vec::with_capacity(n_obj);
    let mut truth = Vec::with_capacity(n_obj);
    for (j, obj) in spec.objects.iter().enumerate() {
        if j > 0 {
            caption.push(' ');
        }
        let start = caption.len();
        caption.push_str(&obj.category);
        let peaks = peak_cells(&obj.rect, &g);
        let (attention_row, gradient_row) = token_rows(j, &owner, &peaks, spec.noise_sigma, &mut rng);
        tokens.push(TokenRecord {
            text: obj.category.clone(),
            char_start: start as u32,
            char_end: caption.len() as u32,
            attention_row,
            gradient_row,
        });
        let r = &obj.rect;
        truth.push((
            obj.category.clone(),
            g.patch_to_pixel_box(r.row_min, r.col_min, r.row_max, r.col_max)?,
        ));
    }

    let bundle = FeatureBundle {
        geometry: g,
        caption,
        tokens,
        vit_keys: KeyMatrix::new(spec.d_vit, keys)?,
        provenance: Provenance::default(),
        flags: 0,
    };
    bundle.validate()?;
    Ok(SynthBundle { bundle, truth })
}

/// `count` unit vectors in `dim` dimensions with pairwise dot `-1 / (count - 1)`,
/// randomly oriented.
fn simplex_directions(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let basis = random_orthonormal(count, dim, rng);
    if count == 1 {
        return basis;
    }
    let scale = (count as f64 / (count as f64 - 1.0)).sqrt();
    (0..count)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let centroid: f64 = basis.iter().map(|b| b[d]).sum::<f64>() / count as f64;
                    (basis[i][d] - centroid) * scale
                })
                .collect()
        })
        .collect()
}

fn random_orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Cells away from the rectangle border (when it has an interior), closest to its center first.
fn peak_cells(rect: &PatchRect, g: &GridGeometry) -> Vec<usize> {
    let shrink = |lo: usize, hi: usize| if hi - lo >= 2 { (lo + 1, hi - 1) } else { (lo, hi) };
    let (r0, r1) = shrink(rect.row_min, rect.row_max);
    let (c0, c1) = shrink(rect.col_min, rect.col_max);
    let (cr, cc) = (
        (rect.row_min + rect.row_max) as f64 / 2.0,
        (rect.col_min + rect.col_max) as f64 / 2.0,
    );
    let mut cells: Vec<(f64, usize)> = (r0..=r1)
        .flat_map(|r| (c0..=c1).map(move |c| (r, c)))
        .map(|(r, c)| {
            let d = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            (d, r * g.grid_w() + c)
        })
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cells.into_iter().take(PEAK_CELLS).map(|(_, i)| i).collect()
}

fn token_rows(
    object: usize,
    owner: &[Option<usize>],
    peaks: &[usize],
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let np = owner.len();
    let mut logits = Vec::with_capacity(np + 1);
    let mut grads = Vec::with_capacity(np + 1);
    logits.push(1.0);
    grads.push(0.0);
    for (i, own) in owner.iter().enumerate() {
        let jitter = if sigma > 0.0 { rng.random_range(-sigma..sigma) } else { 0.0 };
        let (logit, grad) = match peaks.iter().position(|&p| p == i) {
            Some(rank) => (3.0 - 0.25 * rank as f64, 1.0),
            None if *own == Some(object) => (1.5, 1.0),
            None => (0.0, -0.2),
        };
        logits.push(logit + jitter);
        grads.push(f64::from((grad + 0.1 * jitter) as f32));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let attention = exps.iter().map(|e| f64::from((e / total) as f32)).collect();
    (attention, grads)
}

/// Parameters for a random planted corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomCorpus {
    pub count: usize,
    pub seed: u64,
    pub grid_min: u16,
    pub grid_max: u16,
    pub max_objects: usize,
    pub sigma_max: f64,
    pub min_side: usize,
    pub d_vit: usize,
    pub patch_size: u16,
    pub categories: Vec<String>,
}

impl Default for RandomCorpus {
    fn default() -> Self {
        Self {
            count: 20,
            seed: 0,
            grid_min: 8,
            grid_max: 32,
            max_objects: 3,
            sigma_max: 0.1,
            min_side: 2,
            d_vit: 32,
            patch_size: 16,
            categories: ["dog", "frisbee", "person", "boat", "cat", "car", "ball", "kite", "horse", "bicycle"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Grids drawn from `[grid_min, grid_max]` per axis, 1 to `max_objects` distinct-category
/// objects with sides in `[min_side, grid/2]`, noise uniform in `[0, sigma_max]`.
pub fn random_specs(c: &RandomCorpus) -> Result<Vec<SynthSpec>> {
    if c.grid_min < 2 || c.grid_min > c.grid_max || c.max_objects == 0 || c.min_side == 0 {
        return Err(Error::Argument("invalid random corpus ranges".into()));
    }
    if c.categories.len() < c.max_objects {
        return Err(Error::Argument("fewer categories than max_objects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut specs = Vec::with_capacity(c.count);
    for _ in 0..c.count {
        let gh = rng.random_range(c.grid_min..=c.grid_max);
        let gw = rng.random_range(c.grid_min..=c.grid_max);
        let want = rng.random_range(1..=c.max_objects);
        let mut names = c.categories.clone();
        names.shuffle(&mut rng);
        let mut objects: Vec<PlantedObject> = Vec::new();
        for name in names.into_iter().take(want) {
            for _attempt in 0..50 {
                let side = |rng: &mut ChaCha8Rng, g: u16| {
                    let hi = (usize::from(g) / 2).max(c.min_side);
                    rng.random_range(c.min_side..=hi)
                };
                let (h, w) = (side(&mut rng, gh), side(&mut rng, gw));
                let r0 = rng.random_range(0..=usize::from(gh) - h);
                let c0 = rng.random_range(0..=usize::from(gw) - w);
                let rect = PatchRect {
                    row_min: r0,
                    col_min: c0,
                    row_max: r0 + h - 1,
                    col_max: c0 + w - 1,
                };
                if objects.iter().all(|o| !o.rect.overlaps(&rect)) {
                    objects.push(PlantedObject {
                        category: name.clone(),
                        rect,
                    });
                    break;
                }
            }
        }
        specs.push(SynthSpec {
            grid_h: gh,
            grid_w: gw,
            patch_size: c.patch_size,
            d_vit: c.d_vit,
            objects,
            noise_sigma: rng.random_range(0.0..=c.sigma_max),
            rng_seed: rng.random(),
        });
    }
    Ok(specs)
}
