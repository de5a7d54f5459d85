use super::matrix::Matrix;
use crate::error::{config_err, dim_err, Result};
use crate::tensor::Tensor4;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// A `rows x cols` partition of a feature map into equal spatial sub-regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
}

/// Pixel rectangle `[r0, r1) x [c0, c1)` of one region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionBounds {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl RegionBounds {
    pub fn pixels(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }
}

impl RegionGrid {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn divides(&self, h: usize, w: usize) -> bool {
        self.rows > 0 && self.cols > 0 && h % self.rows == 0 && w % self.cols == 0
    }

    /// Regions in row-major grid order. A map whose size is not a multiple
    /// of the grid is treated as zero-padded on the bottom and right, so
    /// trailing regions are clipped (possibly to nothing).
    pub fn bounds(&self, h: usize, w: usize) -> Vec<RegionBounds> {
        let rh = h.div_ceil(self.rows);
        let rw = w.div_ceil(self.cols);
        let mut out = Vec::with_capacity(self.count());
        for gr in 0..self.rows {
            for gc in 0..self.cols {
                let r0 = (gr * rh).min(h);
                let c0 = (gc * rw).min(w);
                out.push(RegionBounds {
                    r0,
                    r1: ((gr + 1) * rh).min(h),
                    c0,
                    c1: ((gc + 1) * rw).min(w),
                });
            }
        }
        out
    }
}

impl fmt::Display for RegionGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for RegionGrid {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| crate::Error::Config(format!("grid {s:?} is not of the form RxC")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| crate::Error::Config(format!("bad grid extent {t:?} in {s:?}")))
        };
        Ok(Self::new(parse(a)?, parse(b)?))
    }
}

/// Borrowed `(C, H, W)` feature map: one sample of a [`Tensor4`].
#[derive(Clone, Copy, Debug)]
pub struct FeatureView<'a> {
    pub data: &'a [f64],
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl<'a> FeatureView<'a> {
    pub fn of(t: &'a Tensor4, n: usize) -> Self {
        let s = t.shape();
        Self {
            data: t.sample(n),
            c: s.c,
            h: s.h,
            w: s.w,
        }
    }

    /// The whole map as a `C x (H*W)` matrix.
    pub fn flattened(&self) -> Matrix {
        Matrix::from_vec(self.c, self.h * self.w, self.data.to_vec()).expect("view size")
    }

    /// `C x pixels` matrix of one region, pixels flattened row-major.
    pub fn gather(&self, b: &RegionBounds) -> Matrix {
        let m = b.pixels();
        let mut data = Vec::with_capacity(self.c * m);
        let plane = self.h * self.w;
        for ch in 0..self.c {
            let p = &self.data[ch * plane..(ch + 1) * plane];
            for r in b.r0..b.r1 {
                data.extend_from_slice(&p[r * self.w + b.c0..r * self.w + b.c1]);
            }
        }
        Matrix::from_vec(self.c, m, data).expect("region size")
    }
}

/// Splits a `(C, H, W)` map into `C x (H'W')` matrices, one per region in
/// row-major grid order. The grid must divide the map exactly.
pub fn partition_regions(map: FeatureView<'_>, grid: RegionGrid) -> Result<Vec<Matrix>> {
    if grid.rows == 0 || grid.cols == 0 {
        return config_err("grid extents must be positive");
    }
    if !grid.divides(map.h, map.w) {
        return config_err(format!("grid {grid} does not divide a {}x{} map", map.h, map.w));
    }
    if map.data.len() != map.c * map.h * map.w {
        return dim_err("feature view length does not match its shape");
    }
    Ok(grid.bounds(map.h, map.w).iter().map(|b| map.gather(b)).collect())
}
