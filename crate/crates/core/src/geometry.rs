//! Patch grid geometry and pixel-space boxes.
//!
//! Patches are indexed row-major: `i = row * grid_w + col`. Pixel boxes use
//! half-open edges `[min, max)` on both axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tessellation of an image into square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridGeometry {
    image_w: u32,
    image_h: u32,
    patch_size: u16,
    grid_h: u16,
    grid_w: u16,
}

impl GridGeometry {
    pub fn new(image_w: u32, image_h: u32, patch_size: u16) -> Result<Self> {
        if image_w == 0 || image_h == 0 || patch_size == 0 {
            return Err(Error::Argument(format!(
                "grid needs positive dimensions, got {image_w}x{image_h} / patch {patch_size}"
            )));
        }
        let p = u32::from(patch_size);
        let grid_h = image_h.div_ceil(p);
        let grid_w = image_w.div_ceil(p);
        let (Ok(grid_h), Ok(grid_w)) = (u16::try_from(grid_h), u16::try_from(grid_w)) else {
            return Err(Error::Argument(format!(
                "grid {grid_h}x{grid_w} exceeds u16 range"
            )));
        };
        Ok(Self {
            image_w,
            image_h,
            patch_size,
            grid_h,
            grid_w,
        })
    }

    /// Geometry for a `grid_h x grid_w` grid whose image dims are exact multiples of the patch size.
    pub fn from_grid(grid_h: u16, grid_w: u16, patch_size: u16) -> Result<Self> {
        let p = u32::from(patch_size);
        Self::new(u32::from(grid_w) * p, u32::from(grid_h) * p, patch_size)
    }

    pub fn image_w(&self) -> u32 {
        self.image_w
    }

    pub fn image_h(&self) -> u32 {
        self.image_h
    }

    pub fn patch_size(&self) -> u16 {
        self.patch_size
    }

    pub fn grid_h(&self) -> usize {
        usize::from(self.grid_h)
    }

    pub fn grid_w(&self) -> usize {
        usize::from(self.grid_w)
    }

    /// Number of patches, `N_P`.
    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_index_to_rc(&self, index: usize) -> Result<(usize, usize)> {
        if index >= self.num_patches() {
            return Err(Error::Range {
                index,
                limit: self.num_patches(),
            });
        }
        Ok((index / self.grid_w(), index % self.grid_w()))
    }

    pub fn rc_to_patch_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.grid_h() {
            return Err(Error::Range {
                index: row,
                limit: self.grid_h(),
            });
        }
        if col >= self.grid_w() {
            return Err(Error::Range {
                index: col,
                limit: self.grid_w(),
            });
        }
        Ok(row * self.grid_w() + col)
    }

    /// Pixel box covering the inclusive patch range, clipped to the image.
    pub fn patch_to_pixel_box(
        &self,
        row_min: usize,
        col_min: usize,
        row_max: usize,
        col_max: usize,
    ) -> Result<BoxPx> {
        if row_min > row_max || col_min > col_max {
            return Err(Error::Argument(format!(
                "inverted patch range rows {row_min}..={row_max}, cols {col_min}..={col_max}"
            )));
        }
        self.rc_to_patch_index(row_max, col_max)?;
        let p = f64::from(self.patch_size);
        let w = f64::from(self.image_w);
        let h = f64::from(self.image_h);
        Ok(BoxPx {
            x_min: col_min as f64 * p,
            y_min: row_min as f64 * p,
            x_max: ((col_max + 1) as f64 * p).min(w),
            y_max: ((row_max + 1) as f64 * p).min(h),
        })
    }
}

/// Axis-aligned pixel box with half-open edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPx {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxPx {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    /// From a COCO `[x, y, w, h]` box.
    pub fn from_xywh(xywh: [f64; 4]) -> Result<Self> {
        let [x, y, w, h] = xywh;
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Argument(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Smallest box enclosing both.
    pub fn union_hull(&self, other: &BoxPx) -> BoxPx {
        BoxPx {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn intersection_area(&self, other: &BoxPx) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// A labeled, scored box on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BoxPx,
    pub confidence: f64,
}
