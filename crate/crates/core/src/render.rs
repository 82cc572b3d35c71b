//! PPM overlay of a patch heatmap with box outlines.

use std::path::Path;

use crate::bundle::FeatureBundle;
use crate::error::{Error, Result};
use crate::expand::Heatmap;
use crate::geometry::{BoxPx, GridGeometry};

const OUTLINE: [u8; 3] = [0, 255, 0];
const OUTLINE_PX: u32 = 2;

/// Heatmap value normalized to [0, 1] mapped onto a gray-to-red ramp.
fn ramp(v: f64) -> [u8; 3] {
    let red = (128.0 + 127.0 * v).round() as u8;
    let rest = (128.0 * (1.0 - v)).round() as u8;
    [red, rest, rest]
}

/// Binary P6 bytes at the image resolution of `g`.
pub fn render_ppm(g: &GridGeometry, heatmap: &Heatmap, boxes: &[BoxPx]) -> Result<Vec<u8>> {
    if heatmap.len() != g.num_patches() {
        return Err(Error::Shape(format!(
            "heatmap has {} values, grid has {} patches",
            heatmap.len(),
            g.num_patches()
        )));
    }
    if heatmap.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("heatmap contains non-finite values".into()));
    }
    let (lo, hi) = heatmap
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let colors: Vec<[u8; 3]> = heatmap
        .values
        .iter()
        .map(|&v| ramp(if span > 0.0 { (v - lo) / span } else { 0.5 }))
        .collect();

    let (w, h) = (g.image_w(), g.image_h());
    let p = u32::from(g.patch_size());
    let header = format!("P6 {w} {h} 255\n");
    let mut out = Vec::with_capacity(header.len() + 3 * (w as usize) * (h as usize));
    out.extend_from_slice(header.as_bytes());
    for y in 0..h {
        for x in 0..w {
            let idx = (y / p) as usize * g.grid_w() + (x / p) as usize;
            let px = if boxes.iter().any(|b| on_outline(b, x, y)) {
                OUTLINE
            } else {
                colors[idx]
            };
            out.extend_from_slice(&px);
        }
    }
    Ok(out)
}

/// Whether pixel (x, y) lies in the band just inside the box edges.
fn on_outline(b: &BoxPx, x: u32, y: u32) -> bool {
    let (cx, cy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
    if cx < b.x_min || cx >= b.x_max || cy < b.y_min || cy >= b.y_max {
        return false;
    }
    let t = f64::from(OUTLINE_PX);
    cx < b.x_min + t || cx >= b.x_max - t || cy < b.y_min + t || cy >= b.y_max - t
}

pub fn render_overlay(bundle: &FeatureBundle, heatmap: &Heatmap, boxes: &[BoxPx], path: &Path) -> Result<()> {
    let bytes = render_ppm(&bundle.geometry, heatmap, boxes)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expand::HeatmapKind;

    fn map(values: Vec<f64>) -> Heatmap {
        Heatmap {
            values,
            kind: HeatmapKind::Expanded,
        }
    }

    fn pixel(img: &[u8], header: usize, w: usize, x: usize, y: usize) -> [u8; 3] {
        let o = header + 3 * (y * w + x);
        [img[o], img[o + 1], img[o + 2]]
    }

    #[test]
    fn header_and_size() {
        let g = GridGeometry::from_grid(4, 4, 16).unwrap();
        let img = render_ppm(&g, &map(vec![0.0; 16]), &[]).unwrap();
        let header = b"P6 64 64 255\n";
        assert!(img.starts_with(header));
        assert_eq!(img.len(), header.len() + 64 * 64 * 3);
    }

    #[test]
    fn constant_heatmap_is_mid_ramp_with_outline() {
        let g = GridGeometry::from_grid(4, 4, 16).unwrap();
        let b = BoxPx::new(16.0, 16.0, 48.0, 48.0).unwrap();
        let img = render_ppm(&g, &map(vec![3.0; 16]), &[b]).unwrap();
        let hl = b"P6 64 64 255\n".len();
        let mid = ramp(0.5);
        assert_eq!(mid, [192, 64, 64]);
        assert_eq!(pixel(&img, hl, 64, 0, 0), mid);
        assert_eq!(pixel(&img, hl, 64, 32, 32), mid);
        for (x, y) in [(16, 16), (17, 30), (47, 47), (30, 46)] {
            assert_eq!(pixel(&img, hl, 64, x, y), OUTLINE, "({x},{y})");
        }
        for (x, y) in [(15, 16), (18, 30), (48, 47), (30, 45)] {
            assert_eq!(pixel(&img, hl, 64, x, y), mid, "({x},{y})");
        }
    }

    #[test]
    fn one_hot_lights_single_block() {
        let g = GridGeometry::from_grid(4, 4, 16).unwrap();
        let mut v = vec![0.0; 16];
        v[5] = 1.0;
        let img = render_ppm(&g, &map(v), &[]).unwrap();
        let hl = b"P6 64 64 255\n".len();
        for y in 0..64 {
            for x in 0..64 {
                let hot = (16..32).contains(&x) && (16..32).contains(&y);
                let want = if hot { [255, 0, 0] } else { [128, 128, 128] };
                assert_eq!(pixel(&img, hl, 64, x, y), want);
            }
        }
    }

    #[test]
    fn partial_edge_patches_use_their_cell() {
        let g = GridGeometry::new(20, 10, 16).unwrap();
        let img = render_ppm(&g, &map(vec![0.0, 1.0]), &[]).unwrap();
        let header = b"P6 20 10 255\n";
        assert!(img.starts_with(header));
        assert_eq!(pixel(&img, header.len(), 20, 19, 9), [255, 0, 0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let g = GridGeometry::from_grid(2, 2, 4).unwrap();
        assert!(matches!(render_ppm(&g, &map(vec![0.0; 3]), &[]), Err(Error::Shape(_))));
    }
}
