//! Deterministic synthetic scenes and a head that is paired with them.
//!
//! A scene is a set of class-labelled rectangles. Its "feature map" for a crop
//! puts, in each channel owned by class `k`, the fraction of every lattice
//! cell covered by class-`k` objects. Overlap is computed on integer
//! coordinates scaled by L, so cell boundaries `x + i·w/L` are exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureProvider;
use crate::error::{Error, Result};
use crate::scoring::{softmax, ClassScores, ScoringHead};
use crate::tensor::{FeatureMap, PixelRect};

/// One planted object. Serialized as `[classId, x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 5]", into = "[usize; 5]")]
pub struct SceneObject {
    pub class: usize,
    pub rect: PixelRect,
}

impl From<[usize; 5]> for SceneObject {
    fn from([class, x, y, w, h]: [usize; 5]) -> Self {
        SceneObject {
            class,
            rect: PixelRect::new(x, y, w, h),
        }
    }
}

impl From<SceneObject> for [usize; 5] {
    fn from(o: SceneObject) -> Self {
        [o.class, o.rect.x, o.rect.y, o.rect.w, o.rect.h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default)]
    pub id: String,
    #[serde(rename = "imageW")]
    pub image_w: usize,
    #[serde(rename = "imageH")]
    pub image_h: usize,
    pub objects: Vec<SceneObject>,
    pub sigma: f64,
    pub seed: u64,
    #[serde(rename = "K")]
    pub classes: usize,
    #[serde(rename = "T")]
    pub channels: usize,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::invalid("scene image must be non-empty"));
        }
        if self.classes == 0 || self.channels < self.classes {
            return Err(Error::invalid(format!(
                "every class needs a channel: K={} T={}",
                self.classes, self.channels
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        for o in &self.objects {
            if o.class >= self.classes {
                return Err(Error::invalid(format!("object class {} >= K", o.class)));
            }
            if !o.rect.within(self.image_w, self.image_h) {
                return Err(Error::invalid(format!(
                    "object {:?} outside {}x{} image",
                    o.rect, self.image_w, self.image_h
                )));
            }
        }
        Ok(())
    }

    /// Channel `t` belongs to class `t mod K`.
    pub fn channel_owner(&self, channel: usize) -> usize {
        channel % self.classes
    }

    pub fn full_rect(&self) -> PixelRect {
        PixelRect::image(self.image_w, self.image_h)
    }

    pub fn labels(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.objects.iter().map(|o| o.class).collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

/// Half-open rectangle on the scaled integer plane.
type Span = (i64, i64, i64, i64);

fn union_area(rects: &[Span]) -> i64 {
    if rects.is_empty() {
        return 0;
    }
    if rects.len() == 1 {
        let (x0, y0, x1, y1) = rects[0];
        return (x1 - x0) * (y1 - y0);
    }
    let mut xs: Vec<i64> = rects.iter().flat_map(|r| [r.0, r.2]).collect();
    xs.sort_unstable();
    xs.dedup();
    let mut area = 0;
    let mut spans = Vec::new();
    for slab in xs.windows(2) {
        let (a, b) = (slab[0], slab[1]);
        spans.clear();
        spans.extend(
            rects
                .iter()
                .filter(|r| r.0 <= a && r.2 >= b)
                .map(|r| (r.1, r.3)),
        );
        spans.sort_unstable();
        let mut covered = 0;
        let mut cur: Option<(i64, i64)> = None;
        for &(lo, hi) in &spans {
            cur = match cur {
                Some((clo, chi)) if lo <= chi => Some((clo, chi.max(hi))),
                Some((clo, chi)) => {
                    covered += chi - clo;
                    Some((lo, hi))
                }
                None => Some((lo, hi)),
            };
        }
        if let Some((clo, chi)) = cur {
            covered += chi - clo;
        }
        area += covered * (b - a);
    }
    area
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Synthetic feature map of `crop` on an L×L lattice.
pub fn synth_extract(scene: &Scene, crop: PixelRect, grid: usize) -> Result<FeatureMap> {
    if grid < 2 {
        return Err(Error::InvalidGridSize(grid));
    }
    if !crop.within(scene.image_w, scene.image_h) {
        return Err(Error::invalid(format!(
            "crop {crop:?} outside {}x{} scene",
            scene.image_w, scene.image_h
        )));
    }
    let g = grid as i64;
    let (cx, cy, cw, ch) = (crop.x as i64, crop.y as i64, crop.w as i64, crop.h as i64);
    let cell_area = cw * ch;

    // Scaled by L: pixel coordinate p becomes p·L, cell (i, j) spans
    // [cx·L + i·cw, cx·L + (i+1)·cw) × [cy·L + j·ch, cy·L + (j+1)·ch).
    let per_class: Vec<Vec<Span>> = (0..scene.classes)
        .map(|k| {
            scene
                .objects
                .iter()
                .filter(|o| o.class == k)
                .map(|o| {
                    let r = o.rect;
                    (
                        r.x as i64 * g,
                        r.y as i64 * g,
                        r.right() as i64 * g,
                        r.bottom() as i64 * g,
                    )
                })
                .collect()
        })
        .collect();

    let mut coverage = vec![0.0; grid * grid * scene.classes];
    let mut clipped = Vec::new();
    for j in 0..grid {
        let y0 = cy * g + j as i64 * ch;
        let y1 = y0 + ch;
        for i in 0..grid {
            let x0 = cx * g + i as i64 * cw;
            let x1 = x0 + cw;
            for (k, rects) in per_class.iter().enumerate() {
                clipped.clear();
                clipped.extend(rects.iter().filter_map(|&(a0, b0, a1, b1)| {
                    let (ix0, iy0, ix1, iy1) = (a0.max(x0), b0.max(y0), a1.min(x1), b1.min(y1));
                    (ix1 > ix0 && iy1 > iy0).then_some((ix0, iy0, ix1, iy1))
                }));
                let covered = union_area(&clipped);
                coverage[(j * grid + i) * scene.classes + k] = covered as f64 / cell_area as f64;
            }
        }
    }

    let mut noise = (scene.sigma > 0.0).then(|| {
        let key = [crop.x, crop.y, crop.w, crop.h, grid]
            .iter()
            .fold(mix(0, scene.seed), |h, &v| mix(h, v as u64));
        (
            ChaCha8Rng::seed_from_u64(key),
            Normal::new(0.0, scene.sigma).expect("sigma validated"),
        )
    });

    FeatureMap::from_fn(grid, scene.channels, |row, col, t| {
        let base = coverage[(row * grid + col) * scene.classes + scene.channel_owner(t)];
        match noise.as_mut() {
            Some((rng, normal)) => (base + normal.sample(rng)).max(0.0),
            None => base,
        }
    })
}

/// Scene-backed provider. The image handle is the scene itself.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticProvider {
    grid: usize,
    channels: usize,
}

impl SyntheticProvider {
    pub fn new(grid: usize, channels: usize) -> Result<Self> {
        if grid < 2 {
            return Err(Error::InvalidGridSize(grid));
        }
        Ok(SyntheticProvider { grid, channels })
    }

    pub fn for_scene(scene: &Scene, grid: usize) -> Result<Self> {
        SyntheticProvider::new(grid, scene.channels)
    }
}

impl FeatureProvider for SyntheticProvider {
    type Image = Scene;

    fn grid_size(&self) -> usize {
        self.grid
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn extract(&self, scene: &Scene, crop: PixelRect) -> Result<FeatureMap> {
        if scene.channels != self.channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.channels),
                actual: format!("scene with {} channels", scene.channels),
            });
        }
        scene.validate()?;
        synth_extract(scene, crop, self.grid)
    }
}

/// `logit_k = beta · mean(class-k channels over all cells)`, then softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedHead {
    grid: usize,
    channels: usize,
    classes: usize,
    beta: f64,
}

pub const DEFAULT_BETA: f64 = 10.0;

impl PairedHead {
    pub fn new(grid: usize, channels: usize, classes: usize, beta: f64) -> Result<Self> {
        if classes == 0 || channels < classes {
            return Err(Error::invalid(format!(
                "paired head needs T >= K >= 1, got K={classes} T={channels}"
            )));
        }
        if !beta.is_finite() {
            return Err(Error::invalid("beta must be finite"));
        }
        Ok(PairedHead {
            grid,
            channels,
            classes,
            beta,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Mean activation of each class's channels.
    pub fn class_means(&self, map: &FeatureMap) -> Vec<f64> {
        let mut sums = vec![0.0; self.classes];
        let mut counts = vec![0usize; self.classes];
        for t in 0..self.channels {
            let k = t % self.classes;
            sums[k] += map.channel_mean(t);
            counts[k] += 1;
        }
        sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect()
    }
}

/// The head matched to `scene`'s channel ownership.
pub fn paired_head(scene: &Scene, grid: usize, beta: f64) -> Result<PairedHead> {
    PairedHead::new(grid, scene.channels, scene.classes, beta)
}

impl ScoringHead for PairedHead {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn score(&self, map: &FeatureMap) -> Result<ClassScores> {
        if map.grid_size() != self.grid || map.channels() != self.channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{0}x{0}x{1}", self.grid, self.channels),
                actual: format!("{0}x{0}x{1}", map.grid_size(), map.channels()),
            });
        }
        let logits: Vec<f64> = self
            .class_means(map)
            .into_iter()
            .map(|m| self.beta * m)
            .collect();
        softmax(&logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scene(w: usize, h: usize, objects: &[(usize, [usize; 4])], k: usize, t: usize) -> Scene {
        Scene {
            id: "s".into(),
            image_w: w,
            image_h: h,
            objects: objects
                .iter()
                .map(|&(class, [x, y, ow, oh])| SceneObject {
                    class,
                    rect: PixelRect::new(x, y, ow, oh),
                })
                .collect(),
            sigma: 0.0,
            seed: 7,
            classes: k,
            channels: t,
        }
    }

    /// Pixel-counting oracle; valid when crop extents are multiples of L.
    fn rasterized(scene: &Scene, crop: PixelRect, grid: usize, class: usize, i: usize, j: usize) -> f64 {
        let (cw, ch) = (crop.w / grid, crop.h / grid);
        let mut hit = 0;
        for py in crop.y + j * ch..crop.y + (j + 1) * ch {
            for px in crop.x + i * cw..crop.x + (i + 1) * cw {
                if scene
                    .objects
                    .iter()
                    .any(|o| o.class == class && o.rect.contains_pixel(px, py))
                {
                    hit += 1;
                }
            }
        }
        hit as f64 / (cw * ch) as f64
    }

    #[test]
    fn planted_object_fills_four_cells() {
        let s = scene(60, 60, &[(0, [10, 10, 20, 20])], 2, 4);
        let map = synth_extract(&s, s.full_rect(), 6).unwrap();
        for row in 0..6 {
            for col in 0..6 {
                let inside = (1..=2).contains(&row) && (1..=2).contains(&col);
                assert_eq!(map.get(row, col, 0), if inside { 1.0 } else { 0.0 });
                assert_eq!(map.get(row, col, 2), if inside { 1.0 } else { 0.0 });
                assert_eq!(map.get(row, col, 1), 0.0);
                assert_eq!(map.get(row, col, 3), 0.0);
            }
        }
    }

    #[test]
    fn empty_scene_is_all_zero() {
        let s = scene(50, 40, &[], 3, 3);
        for crop in [s.full_rect(), PixelRect::new(3, 4, 7, 5), PixelRect::new(49, 39, 1, 1)] {
            let map = synth_extract(&s, crop, 4).unwrap();
            assert!(map.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn crop_equal_to_object_is_all_ones() {
        let s = scene(64, 48, &[(1, [13, 7, 29, 17]), (0, [0, 0, 5, 5])], 2, 6);
        let map = synth_extract(&s, PixelRect::new(13, 7, 29, 17), 6).unwrap();
        for row in 0..6 {
            for col in 0..6 {
                for t in [1, 3, 5] {
                    assert_eq!(map.get(row, col, t), 1.0);
                }
            }
        }
    }

    #[test]
    fn overlapping_same_class_objects_are_not_double_counted() {
        let s = scene(12, 12, &[(0, [0, 0, 8, 8]), (0, [4, 4, 8, 8])], 1, 1);
        let map = synth_extract(&s, s.full_rect(), 2).unwrap();
        // Cell (0,0) = [0,6)² covered by the first object on [0,6)².
        assert_eq!(map.get(0, 0, 0), 1.0);
        // Cell (1,0) = [6,12)x[0,6): first covers [6,8)x[0,6) = 12, second [6,12)x[4,6) = 12, overlap [6,8)x[4,6) = 4.
        assert_eq!(map.get(0, 1, 0), 20.0 / 36.0);
    }

    #[test]
    fn matches_pixel_rasterization_on_aligned_crops() {
        let s = scene(
            48,
            48,
            &[(0, [3, 5, 17, 11]), (1, [20, 2, 9, 30]), (0, [10, 10, 30, 4])],
            2,
            2,
        );
        for crop in [s.full_rect(), PixelRect::new(6, 0, 24, 36), PixelRect::new(12, 12, 12, 12)] {
            let map = synth_extract(&s, crop, 6).unwrap();
            for j in 0..6 {
                for i in 0..6 {
                    for k in 0..2 {
                        let oracle = rasterized(&s, crop, 6, k, i, j);
                        assert!((map.get(j, i, k) - oracle).abs() < 1e-12, "cell ({i},{j}) class {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn fractional_cells_use_real_boundaries() {
        // 5-pixel crop over a 2-cell lattice: cells are [0,2.5) and [2.5,5).
        let s = scene(5, 5, &[(0, [2, 0, 1, 5])], 1, 1);
        let map = synth_extract(&s, s.full_rect(), 2).unwrap();
        assert_eq!(map.get(0, 0, 0), 0.2);
        assert_eq!(map.get(0, 1, 0), 0.2);
    }

    #[test]
    fn noise_is_deterministic_and_non_negative() {
        let mut s = scene(60, 60, &[(0, [10, 10, 20, 20])], 2, 4);
        s.sigma = 0.3;
        let a = synth_extract(&s, PixelRect::new(5, 5, 40, 40), 6).unwrap();
        let b = synth_extract(&s, PixelRect::new(5, 5, 40, 40), 6).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|&v| v >= 0.0));
        assert!(a.values().iter().any(|&v| v > 0.0 && v != 1.0));
        s.seed += 1;
        assert_ne!(synth_extract(&s, PixelRect::new(5, 5, 40, 40), 6).unwrap(), a);
    }

    #[test]
    fn crop_outside_scene_is_rejected() {
        let s = scene(10, 10, &[], 1, 1);
        assert!(synth_extract(&s, PixelRect::new(5, 5, 6, 5), 2).is_err());
        assert!(synth_extract(&s, PixelRect::new(0, 0, 0, 5), 2).is_err());
    }

    #[test]
    fn scene_json_uses_array_objects() {
        let s = scene(60, 60, &[(0, [10, 10, 20, 20])], 2, 4);
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["objects"][0], serde_json::json!([0, 10, 10, 20, 20]));
        assert_eq!(json["imageW"], 60);
        assert_eq!(json["K"], 2);
        let back: Scene = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn scene_validation() {
        assert!(scene(10, 10, &[(0, [5, 5, 6, 1])], 1, 1).validate().is_err());
        assert!(scene(10, 10, &[(2, [0, 0, 1, 1])], 2, 2).validate().is_err());
        assert!(scene(10, 10, &[], 3, 2).validate().is_err());
        assert!(scene(10, 10, &[(1, [0, 0, 10, 10])], 2, 2).validate().is_ok());
    }

    #[test]
    fn paired_head_examples() {
        let head = PairedHead::new(6, 8, 4, DEFAULT_BETA).unwrap();
        let s = head.score(&FeatureMap::zeros(6, 8).unwrap()).unwrap();
        assert_eq!(s.as_slice(), &[0.25; 4]);

        let sc = scene(60, 60, &[(0, [10, 10, 20, 20])], 2, 4);
        let map = synth_extract(&sc, sc.full_rect(), 6).unwrap();
        let head = paired_head(&sc, 6, 10.0).unwrap();
        // means 4/36 and 0, so p0 = 1 / (1 + exp(-10/9))
        let expected = 1.0 / (1.0 + (-10.0f64 / 9.0).exp());
        let p = head.score(&map).unwrap();
        assert!((p.as_slice()[0] - expected).abs() < 1e-12);
        assert!(p.as_slice()[0] > 0.75);

        let sym = scene(60, 60, &[(0, [0, 0, 30, 60]), (1, [30, 0, 30, 60])], 2, 4);
        let p = paired_head(&sym, 6, 10.0)
            .unwrap()
            .score(&synth_extract(&sym, sym.full_rect(), 6).unwrap())
            .unwrap();
        assert_eq!(p.as_slice()[0], p.as_slice()[1]);
    }

    #[test]
    fn paired_head_rejects_wrong_shape() {
        let head = PairedHead::new(6, 4, 2, 10.0).unwrap();
        assert!(head.score(&FeatureMap::zeros(5, 4).unwrap()).is_err());
        assert!(PairedHead::new(6, 1, 2, 10.0).is_err());
    }

    fn arb_scene() -> impl Strategy<Value = Scene> {
        (20usize..80, 20usize..80).prop_flat_map(|(w, h)| {
            let obj = (0usize..3, 0..w, 0..h).prop_flat_map(move |(c, x, y)| {
                (Just(c), Just(x), Just(y), 1..=w - x, 1..=h - y)
            });
            (Just(w), Just(h), prop::collection::vec(obj, 0..4)).prop_map(|(w, h, objs)| {
                let objs: Vec<(usize, [usize; 4])> =
                    objs.into_iter().map(|(c, x, y, ow, oh)| (c, [x, y, ow, oh])).collect();
                scene(w, h, &objs, 3, 3)
            })
        })
    }

    proptest! {
        #[test]
        fn translation_consistent(s in arb_scene(), dx in 0usize..30, dy in 0usize..30, grid in 2usize..7) {
            let crop = PixelRect::new(s.image_w / 5, s.image_h / 7, s.image_w / 2 + 1, s.image_h / 2 + 1);
            let mut moved = s.clone();
            moved.image_w += dx;
            moved.image_h += dy;
            for o in &mut moved.objects {
                o.rect.x += dx;
                o.rect.y += dy;
            }
            let shifted = PixelRect::new(crop.x + dx, crop.y + dy, crop.w, crop.h);
            prop_assert_eq!(synth_extract(&s, crop, grid).unwrap(), synth_extract(&moved, shifted, grid).unwrap());
        }

        #[test]
        fn overlap_mass_is_conserved(s in arb_scene(), grid in 2usize..7) {
            // Disjoint same-class objects only, so union area = sum of areas.
            let crop = PixelRect::new(s.image_w / 4, s.image_h / 5, s.image_w - s.image_w / 4, s.image_h - s.image_h / 5);
            let map = synth_extract(&s, crop, grid).unwrap();
            let cell_area = crop.area() as f64 / (grid * grid) as f64;
            for k in 0..3 {
                let rects: Vec<PixelRect> = s.objects.iter().filter(|o| o.class == k).map(|o| o.rect).collect();
                let disjoint = rects.iter().enumerate().all(|(a, ra)| rects[a + 1..].iter().all(|rb| ra.intersection(rb).is_none()));
                prop_assume!(disjoint);
                let inside: usize = rects.iter().filter_map(|r| r.intersection(&crop)).map(|r| r.area()).sum();
                let mass: f64 = (0..grid).flat_map(|r| (0..grid).map(move |c| (r, c))).map(|(r, c)| map.get(r, c, k)).sum();
                prop_assert!((mass - inside as f64 / cell_area).abs() < 1e-9);
            }
        }
    }
}
