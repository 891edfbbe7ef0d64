//! Class heat maps built from beam survivors, and what is read off them.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format;
use crate::search::SearchNode;
use crate::tensor::PixelRect;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    width: usize,
    height: usize,
    class_id: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub rect: PixelRect,
    pub score: f64,
}

/// Location of maximal heat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointResponse {
    pub x: usize,
    pub y: usize,
    pub confidence: f64,
    /// The map was all zero; location and confidence carry no information.
    pub no_response: bool,
}

impl HeatMap {
    pub fn zeros(width: usize, height: usize, class_id: usize) -> Self {
        HeatMap {
            width,
            height,
            class_id,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, class_id: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height}"),
                actual: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("heat values must be finite and non-negative"));
        }
        Ok(HeatMap {
            width,
            height,
            class_id,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    fn add_rect(&mut self, rect: PixelRect, amount: f64) {
        for y in rect.y..rect.bottom() {
            let row = &mut self.values[y * self.width..(y + 1) * self.width];
            for v in &mut row[rect.x..rect.right()] {
                *v += amount;
            }
        }
    }

    /// Mean heat over a rectangle.
    pub fn mean_in(&self, rect: PixelRect) -> f64 {
        let mut sum = 0.0;
        for y in rect.y..rect.bottom() {
            sum += self.values[y * self.width + rect.x..y * self.width + rect.right()]
                .iter()
                .sum::<f64>();
        }
        sum / rect.area() as f64
    }

    /// 8-bit binary PGM scaled so the maximum maps to 255.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let max = self.max();
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        out.write_all(&bytes)?;
        out.flush()?;
        Ok(())
    }

    /// Raw float32 dump (`HMAP` header: width, height).
    pub fn write_raw<W: Write>(&self, out: W) -> Result<()> {
        format::write_heat(out, self.width, self.height, &self.values)
    }
}

/// Sums each survivor's score over the pixels of its crop.
pub fn accumulate<'a, I>(survivors: I, width: usize, height: usize, class_id: usize) -> Result<HeatMap>
where
    I: IntoIterator<Item = &'a SearchNode>,
{
    let mut map = HeatMap::zeros(width, height, class_id);
    for node in survivors {
        if !node.abs_rect.within(width, height) {
            return Err(Error::invalid(format!(
                "survivor rect {:?} outside {width}x{height} image",
                node.abs_rect
            )));
        }
        if !(node.score >= 0.0) || !node.score.is_finite() {
            return Err(Error::invalid(format!("survivor score {} is not a non-negative number", node.score)));
        }
        map.add_rect(node.abs_rect, node.score);
    }
    Ok(map)
}

/// Maximal heat; ties go to the smallest `(y, x)`.
pub fn point_response(map: &HeatMap) -> PointResponse {
    let mut best = (0, 0.0);
    for (i, &v) in map.values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    let (i, confidence) = best;
    let w = map.width.max(1);
    PointResponse {
        x: i % w,
        y: i / w,
        confidence,
        no_response: confidence <= 0.0,
    }
}

/// Thresholds the map (`heat >= theta` and `heat > 0`), labels 4-connected
/// blobs, and returns their bounding rectangles scored by mean enclosed heat.
pub fn extract_detections(map: &HeatMap, theta: f64) -> Result<Vec<Detection>> {
    if !(theta >= 0.0) {
        return Err(Error::invalid(format!("threshold must be >= 0, got {theta}")));
    }
    let (w, h) = (map.width, map.height);
    let active: Vec<bool> = map.values.iter().map(|&v| v >= theta && v > 0.0).collect();
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut out = Vec::new();
    for start in 0..w * h {
        if !active[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut push = |j: usize| {
                if active[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        let rect = PixelRect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1);
        out.push(Detection {
            class_id: map.class_id,
            rect,
            score: map.mean_in(rect),
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.rect.cmp(&b.rect)));
    Ok(out)
}
