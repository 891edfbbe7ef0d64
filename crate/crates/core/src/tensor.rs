//! Coordinate spaces and the L×L×T activation tensor.
//!
//! Two lattices are in play: the feature grid (`GridBox`, cells on an L×L
//! lattice) and the pixel plane of the source image (`PixelRect`).
//! [`backproject`] maps the former onto the latter; [`truncate_and_resize`]
//! stretches a sub-grid of activations back over the whole lattice so a
//! classifier head can score it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer sub-grid `[x, y, w, h]` of an L×L feature lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl GridBox {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        GridBox { x, y, w, h }
    }

    /// The whole lattice, `[0, 0, L, L]`.
    pub const fn full(grid: usize) -> Self {
        GridBox::new(0, 0, grid, grid)
    }

    pub fn fits(&self, grid: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= grid && self.y + self.h <= grid
    }

    pub fn check(&self, grid: usize) -> Result<()> {
        if self.fits(grid) {
            Ok(())
        } else {
            Err(Error::BoxOutOfBounds { gbox: *self, grid })
        }
    }
}

/// Pixel rectangle. Field order makes the derived `Ord` the lexicographic
/// `(x, y, w, h)` order used for tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelRect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        PixelRect { x, y, w, h }
    }

    pub const fn image(width: usize, height: usize) -> Self {
        PixelRect::new(0, 0, width, height)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        !self.is_empty() && self.right() <= width && self.bottom() <= height
    }

    pub fn contains_rect(&self, other: &PixelRect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// Half-open pixel containment: `x <= px < x + w`.
    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn intersection(&self, other: &PixelRect) -> Option<PixelRect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| PixelRect::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Translates a rect expressed relative to `self` into `self`'s frame.
    pub fn offset_into(&self, local: PixelRect) -> PixelRect {
        PixelRect::new(self.x + local.x, self.y + local.y, local.w, local.h)
    }
}

/// L×L×T activations stored in `(row, col, channel)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(grid: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if grid < 2 {
            return Err(Error::InvalidGridSize(grid));
        }
        if channels == 0 {
            return Err(Error::invalid("feature map needs at least one channel"));
        }
        let expected = grid * grid * channels;
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{grid}x{grid}x{channels} ({expected} values)"),
                actual: format!("{} values", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(FeatureMap {
            grid,
            channels,
            values,
        })
    }

    pub fn zeros(grid: usize, channels: usize) -> Result<Self> {
        FeatureMap::new(grid, channels, vec![0.0; grid * grid * channels])
    }

    /// Builds a map from `f(row, col, channel)`.
    pub fn from_fn(
        grid: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(grid * grid * channels);
        for row in 0..grid {
            for col in 0..grid {
                for t in 0..channels {
                    values.push(f(row, col, t));
                }
            }
        }
        FeatureMap::new(grid, channels, values)
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.grid + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[self.index(row, col, channel)]
    }

    /// Mean over all cells of one channel.
    pub fn channel_mean(&self, channel: usize) -> f64 {
        let cells = self.grid * self.grid;
        let sum: f64 = self
            .values
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .sum();
        sum / cells as f64
    }
}

/// One axis of a corner-aligned bilinear sample.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Target index `a` of an `grid`-long axis maps to source coordinate
/// `origin + a * (extent - 1) / (grid - 1)`.
fn tap(origin: usize, extent: usize, a: usize, grid: usize) -> Tap {
    let den = grid - 1;
    let num = a * (extent - 1);
    let whole = num / den;
    let rem = num % den;
    if rem == 0 || whole + 1 >= extent {
        let i = origin + whole.min(extent - 1);
        Tap {
            lo: i,
            hi: i,
            frac: 0.0,
        }
    } else {
        Tap {
            lo: origin + whole,
            hi: origin + whole + 1,
            frac: rem as f64 / den as f64,
        }
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 || a == b {
        return a;
    }
    (a + (b - a) * t).clamp(a.min(b), a.max(b))
}

/// Crops `gbox` out of every channel and bilinearly stretches it back to L×L.
///
/// The full-grid box reproduces the input bit for bit; a source extent of 1
/// along an axis yields a constant along that axis.
pub fn truncate_and_resize(map: &FeatureMap, gbox: GridBox) -> Result<FeatureMap> {
    let grid = map.grid_size();
    gbox.check(grid)?;
    let cols: Vec<Tap> = (0..grid).map(|a| tap(gbox.x, gbox.w, a, grid)).collect();
    let rows: Vec<Tap> = (0..grid).map(|a| tap(gbox.y, gbox.h, a, grid)).collect();
    let channels = map.channels();
    let mut values = Vec::with_capacity(map.values.len());
    for ry in &rows {
        for cx in &cols {
            for t in 0..channels {
                let top = lerp(map.get(ry.lo, cx.lo, t), map.get(ry.lo, cx.hi, t), cx.frac);
                let v = if ry.frac == 0.0 {
                    top
                } else {
                    let bottom =
                        lerp(map.get(ry.hi, cx.lo, t), map.get(ry.hi, cx.hi, t), cx.frac);
                    lerp(top, bottom, ry.frac)
                };
                values.push(v);
            }
        }
    }
    Ok(FeatureMap {
        grid,
        channels,
        values,
    })
}

/// Maps a grid box onto an `image_w × image_h` pixel plane.
///
/// Origins use floor, extents round half up, then the rect is clamped into the
/// image with at least one pixel per side. The full grid maps to the full image.
pub fn backproject(gbox: GridBox, grid: usize, image_w: usize, image_h: usize) -> Result<PixelRect> {
    if grid < 2 {
        return Err(Error::InvalidGridSize(grid));
    }
    gbox.check(grid)?;
    if image_w == 0 || image_h == 0 {
        return Err(Error::invalid(format!(
            "image must be non-empty, got {image_w}x{image_h}"
        )));
    }
    let floor = |v: usize, dim: usize| v * dim / grid;
    let round = |v: usize, dim: usize| (2 * v * dim + grid) / (2 * grid);
    let x = floor(gbox.x, image_w).min(image_w - 1);
    let y = floor(gbox.y, image_h).min(image_h - 1);
    let w = round(gbox.w, image_w).clamp(1, image_w - x);
    let h = round(gbox.h, image_h).clamp(1, image_h - y);
    Ok(PixelRect::new(x, y, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(grid: usize, a: f64, b: f64, c: f64) -> FeatureMap {
        FeatureMap::from_fn(grid, 1, |row, col, _| a * col as f64 + b * row as f64 + c).unwrap()
    }

    #[test]
    fn full_box_is_identity() {
        let map = FeatureMap::from_fn(5, 3, |r, c, t| ((r * 7 + c * 3 + t) as f64).sin()).unwrap();
        let out = truncate_and_resize(&map, GridBox::full(5)).unwrap();
        let same = map
            .values()
            .iter()
            .zip(out.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn two_by_two_block_on_four_grid() {
        // [[0, 2], [4, 6]] at the top-left of a 4x4 grid.
        let map = plane(4, 2.0, 4.0, 0.0);
        let out = truncate_and_resize(&map, GridBox::new(0, 0, 2, 2)).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let expected = (2.0 * col as f64 + 4.0 * row as f64) / 3.0;
                assert!((out.get(row, col, 0) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_extent_is_constant_along_axis() {
        let map = plane(4, 1.0, 10.0, 0.0);
        let out = truncate_and_resize(&map, GridBox::new(2, 0, 1, 4)).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                assert_eq!(out.get(row, col, 0), 2.0 + 10.0 * row as f64);
            }
        }
    }

    #[test]
    fn constant_channel_stays_constant() {
        let map = FeatureMap::from_fn(6, 2, |_, _, t| if t == 0 { 0.3 } else { -1.7 }).unwrap();
        let out = truncate_and_resize(&map, GridBox::new(1, 2, 3, 4)).unwrap();
        for row in 0..6 {
            for col in 0..6 {
                assert_eq!(out.get(row, col, 0), 0.3);
                assert_eq!(out.get(row, col, 1), -1.7);
            }
        }
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let map = FeatureMap::zeros(4, 1).unwrap();
        for gbox in [
            GridBox::new(1, 0, 4, 4),
            GridBox::new(0, 0, 0, 1),
            GridBox::new(3, 3, 2, 1),
        ] {
            assert!(matches!(
                truncate_and_resize(&map, gbox),
                Err(Error::BoxOutOfBounds { .. })
            ));
        }
    }

    #[test]
    fn single_cell_grid_is_rejected() {
        assert!(matches!(FeatureMap::zeros(1, 4), Err(Error::InvalidGridSize(1))));
        assert!(backproject(GridBox::full(1), 1, 10, 10).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut v = vec![0.0; 8];
        v[5] = f64::NAN;
        assert!(matches!(FeatureMap::new(2, 2, v), Err(Error::NonFinite(5))));
    }

    #[test]
    fn backprojection_examples() {
        assert_eq!(
            backproject(GridBox::full(6), 6, 600, 360).unwrap(),
            PixelRect::new(0, 0, 600, 360)
        );
        assert_eq!(
            backproject(GridBox::new(1, 1, 5, 5), 6, 600, 360).unwrap(),
            PixelRect::new(100, 60, 500, 300)
        );
        assert_eq!(
            backproject(GridBox::new(2, 0, 4, 6), 6, 601, 360).unwrap(),
            PixelRect::new(200, 0, 401, 360)
        );
    }

    #[test]
    fn backprojection_clamps_tiny_images() {
        // 5/6 of one pixel rounds to one pixel; the origin stays inside.
        let r = backproject(GridBox::new(5, 5, 1, 1), 6, 1, 1).unwrap();
        assert_eq!(r, PixelRect::new(0, 0, 1, 1));
        // Extents that round to zero keep one pixel.
        let r = backproject(GridBox::new(0, 0, 1, 6), 6, 2, 2).unwrap();
        assert_eq!(r, PixelRect::new(0, 0, 1, 2));
        // Half-pixel extents round up.
        let r = backproject(GridBox::new(1, 0, 5, 6), 6, 9, 9).unwrap();
        assert_eq!(r, PixelRect::new(1, 0, 8, 9));
    }
}
