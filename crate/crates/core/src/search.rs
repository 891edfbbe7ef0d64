//! Tree search over localization candidates.
//!
//! Every node owns a crop of the original image. Its children are the four
//! one-cell-smaller sub-grids of the crop's own L×L feature lattice; a child
//! is scored by truncating and resizing the parent's feature map, and only
//! the beam survivors have features re-extracted from their crops.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provider::FeatureProvider;
use crate::scoring::{rescore, CooccurrenceMatrix, ScoringHead};
use crate::tensor::{backproject, truncate_and_resize, FeatureMap, GridBox, PixelRect};

pub const DEFAULT_BEAM_WIDTH: usize = 8;
pub const DEFAULT_BEAM_DEPTH: usize = 10;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub beam_depth: usize,
    pub target_class: usize,
    pub use_rescoring: bool,
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: DEFAULT_BEAM_WIDTH,
            beam_depth: DEFAULT_BEAM_DEPTH,
            target_class: 0,
            use_rescoring: true,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl BeamConfig {
    pub fn for_class(target_class: usize) -> Self {
        BeamConfig {
            target_class,
            ..BeamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::invalid("beam width must be at least 1"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SearchNode {
    /// Box in the parent's feature lattice; the full grid for the root.
    pub grid_box: GridBox,
    /// Crop in original-image pixels.
    pub abs_rect: PixelRect,
    pub level: usize,
    pub score: f64,
    /// Index of the parent within the previous level's survivors.
    pub parent: Option<usize>,
}

/// Ranking: higher score first, then the lexicographically smaller rect.
pub fn rank(a: &SearchNode, b: &SearchNode) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.abs_rect.cmp(&b.abs_rect))
}

/// Survivors of every level, root first.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamTrace {
    pub levels: Vec<Vec<SearchNode>>,
    /// Provider `extract` calls made for this search.
    pub extractions: usize,
}

impl BeamTrace {
    pub fn root(&self) -> &SearchNode {
        &self.levels[0][0]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SearchNode> {
        self.levels.iter().flatten()
    }

    /// Best node over all levels.
    pub fn best(&self) -> &SearchNode {
        self.nodes().min_by(|a, b| rank(a, b)).expect("root always present")
    }

    pub fn final_level(&self) -> &[SearchNode] {
        self.levels.last().expect("root always present")
    }

    /// Best node of the deepest level reached.
    pub fn deepest_best(&self) -> &SearchNode {
        &self.final_level()[0]
    }

    /// Walks parent links from `node` at `level` back to the root.
    pub fn path_to(&self, level: usize, index: usize) -> Vec<SearchNode> {
        let mut out = Vec::with_capacity(level + 1);
        let mut cur = Some((level, index));
        while let Some((l, i)) = cur {
            let node = self.levels[l][i];
            out.push(node);
            cur = node.parent.map(|p| (l - 1, p));
        }
        out.reverse();
        out
    }
}

/// Sub-grids one cell narrower or one cell shorter (never both).
///
/// Width-reduced boxes come first, then height-reduced, each left/top first.
pub fn children(gbox: GridBox) -> Vec<GridBox> {
    let GridBox { x, y, w, h } = gbox;
    let mut out = Vec::with_capacity(4);
    if w >= 2 {
        out.push(GridBox::new(x, y, w - 1, h));
        out.push(GridBox::new(x + 1, y, w - 1, h));
    }
    if h >= 2 {
        out.push(GridBox::new(x, y, w, h - 1));
        out.push(GridBox::new(x, y + 1, w, h - 1));
    }
    out
}

/// Provider + head (+ optional co-occurrence prior) driving a search.
pub struct Localizer<'a, P: ?Sized, H: ?Sized> {
    provider: &'a P,
    head: &'a H,
    cooccurrence: Option<&'a CooccurrenceMatrix>,
}

impl<'a, P, H> Localizer<'a, P, H>
where
    P: FeatureProvider + ?Sized,
    H: ScoringHead + ?Sized,
{
    pub fn new(provider: &'a P, head: &'a H) -> Self {
        Localizer {
            provider,
            head,
            cooccurrence: None,
        }
    }

    pub fn with_cooccurrence(mut self, matrix: Option<&'a CooccurrenceMatrix>) -> Self {
        self.cooccurrence = matrix;
        self
    }

    /// Ranking score of `cfg.target_class` for one map.
    pub fn target_score(&self, map: &FeatureMap, cfg: &BeamConfig) -> Result<f64> {
        let scores = self.head.score(map)?;
        let target = cfg.target_class;
        if target >= scores.len() {
            return Err(Error::invalid(format!(
                "target class {target} >= {} classes",
                scores.len()
            )));
        }
        match (cfg.use_rescoring, self.cooccurrence) {
            (true, Some(matrix)) => Ok(rescore(&scores, matrix, cfg.alpha)?[target]),
            _ => Ok(scores.as_slice()[target]),
        }
    }

    fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image must be non-empty"));
        }
        if self.head.num_classes() == 0 {
            return Err(Error::invalid("head has no classes"));
        }
        Ok(())
    }

    /// Scores the children of a crop whose feature map is `map`.
    fn expand(
        &self,
        parent: &SearchNode,
        parent_index: usize,
        map: &FeatureMap,
        cfg: &BeamConfig,
    ) -> Result<Vec<SearchNode>> {
        let grid = map.grid_size();
        children(GridBox::full(grid))
            .into_iter()
            .map(|gbox| {
                let score = self.target_score(&truncate_and_resize(map, gbox)?, cfg)?;
                let local = backproject(gbox, grid, parent.abs_rect.w, parent.abs_rect.h)?;
                Ok(SearchNode {
                    grid_box: gbox,
                    abs_rect: parent.abs_rect.offset_into(local),
                    level: parent.level + 1,
                    score,
                    parent: Some(parent_index),
                })
            })
            .collect()
    }

    fn root(&self, image: &P::Image, width: usize, height: usize, cfg: &BeamConfig) -> Result<(SearchNode, FeatureMap)> {
        self.check_dims(width, height)?;
        let full = PixelRect::image(width, height);
        let map = self.provider.extract(image, full)?;
        let root = SearchNode {
            grid_box: GridBox::full(map.grid_size()),
            abs_rect: full,
            level: 0,
            score: self.target_score(&map, cfg)?,
            parent: None,
        };
        Ok((root, map))
    }

    /// Level-synchronous beam search keeping the top `beam_width` candidates.
    pub fn beam(&self, image: &P::Image, width: usize, height: usize, cfg: &BeamConfig) -> Result<BeamTrace> {
        cfg.validate()?;
        let (root, root_map) = self.root(image, width, height, cfg)?;
        let mut extractions = 1;
        let mut levels = vec![vec![root]];
        let mut maps = vec![root_map];

        for depth in 1..=cfg.beam_depth {
            if depth > 1 {
                maps = levels[depth - 1]
                    .iter()
                    .map(|n| self.provider.extract(image, n.abs_rect))
                    .collect::<Result<_>>()?;
                extractions += maps.len();
            }
            let mut pool: Vec<SearchNode> = Vec::new();
            let mut seen: HashMap<PixelRect, usize> = HashMap::new();
            for (i, (parent, map)) in levels[depth - 1].iter().zip(&maps).enumerate() {
                for child in self.expand(parent, i, map, cfg)? {
                    match seen.get(&child.abs_rect) {
                        Some(&at) => {
                            if child.score > pool[at].score {
                                pool[at] = child;
                            }
                        }
                        None => {
                            seen.insert(child.abs_rect, pool.len());
                            pool.push(child);
                        }
                    }
                }
            }
            if pool.is_empty() {
                break;
            }
            pool.sort_by(rank);
            pool.truncate(cfg.beam_width);
            levels.push(pool);
        }
        Ok(BeamTrace { levels, extractions })
    }

    /// Follows the single best child at every level.
    pub fn greedy(&self, image: &P::Image, width: usize, height: usize, cfg: &BeamConfig) -> Result<Vec<SearchNode>> {
        let cfg = BeamConfig {
            beam_width: 1,
            ..*cfg
        };
        let trace = self.beam(image, width, height, &cfg)?;
        Ok(trace.levels.into_iter().map(|mut l| l.remove(0)).collect())
    }

    /// Scores every node of the tree down to `depth` and returns the best.
    ///
    /// Cost grows as 4^depth; meant for small test instances.
    pub fn exhaustive(&self, image: &P::Image, width: usize, height: usize, cfg: &BeamConfig, depth: usize) -> Result<SearchNode> {
        let (root, map) = self.root(image, width, height, cfg)?;
        let mut best = root;
        self.visit(image, &root, &map, depth, cfg, &mut best)?;
        Ok(best)
    }

    fn visit(
        &self,
        image: &P::Image,
        node: &SearchNode,
        map: &FeatureMap,
        remaining: usize,
        cfg: &BeamConfig,
        best: &mut SearchNode,
    ) -> Result<()> {
        if remaining == 0 {
            return Ok(());
        }
        for child in self.expand(node, 0, map, cfg)? {
            if rank(&child, best) == Ordering::Less {
                *best = child;
            }
            if remaining > 1 {
                let child_map = self.provider.extract(image, child.abs_rect)?;
                self.visit(image, &child, &child_map, remaining - 1, cfg, best)?;
            }
        }
        Ok(())
    }
}

pub fn beam_localize<P, H>(
    provider: &P,
    head: &H,
    image: &P::Image,
    width: usize,
    height: usize,
    cfg: &BeamConfig,
) -> Result<BeamTrace>
where
    P: FeatureProvider + ?Sized,
    H: ScoringHead + ?Sized,
{
    Localizer::new(provider, head).beam(image, width, height, cfg)
}

pub fn greedy_localize<P, H>(
    provider: &P,
    head: &H,
    image: &P::Image,
    width: usize,
    height: usize,
    cfg: &BeamConfig,
) -> Result<Vec<SearchNode>>
where
    P: FeatureProvider + ?Sized,
    H: ScoringHead + ?Sized,
{
    Localizer::new(provider, head).greedy(image, width, height, cfg)
}

pub fn exhaustive_oracle<P, H>(
    provider: &P,
    head: &H,
    image: &P::Image,
    width: usize,
    height: usize,
    target_class: usize,
    depth: usize,
) -> Result<SearchNode>
where
    P: FeatureProvider + ?Sized,
    H: ScoringHead + ?Sized,
{
    let cfg = BeamConfig {
        target_class,
        use_rescoring: false,
        ..BeamConfig::default()
    };
    Localizer::new(provider, head).exhaustive(image, width, height, &cfg, depth)
}
