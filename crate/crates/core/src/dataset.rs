//! Seeded synthetic datasets and their on-disk layout.
//!
//! ```text
//! <dir>/scenes/<id>.json   one Scene per file
//! <dir>/gt.jsonl           one BoxRecord per object
//! ```

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{read_jsonl, write_jsonl, BoxRecord, GroundTruth};
use crate::provider::{Scene, SceneObject};
use crate::tensor::PixelRect;

const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub classes: usize,
    pub channels: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side lengths are drawn uniformly from `min_size..=max_size`.
    pub min_size: usize,
    pub max_size: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Objects may overlap each other.
    pub allow_overlap: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 50,
            classes: 4,
            channels: 32,
            image_w: 120,
            image_h: 120,
            min_objects: 1,
            max_objects: 1,
            min_size: 50,
            max_size: 90,
            sigma: 0.0,
            seed: 0,
            allow_overlap: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.channels < self.classes {
            return Err(Error::invalid(format!(
                "need T >= K >= 1, got K={} T={}",
                self.classes, self.channels
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::invalid("min objects exceeds max objects"));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::invalid("object sizes must satisfy 1 <= min <= max"));
        }
        if self.max_size > self.image_w.min(self.image_h) {
            return Err(Error::invalid(format!(
                "objects up to {} px do not fit a {}x{} image",
                self.max_size, self.image_w, self.image_h
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Scene ids are zero-padded so lexicographic and generation order agree.
pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

fn place(rng: &mut ChaCha8Rng, cfg: &SynthConfig, placed: &[SceneObject]) -> Result<PixelRect> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let w = rng.random_range(cfg.min_size..=cfg.max_size);
        let h = rng.random_range(cfg.min_size..=cfg.max_size);
        let x = rng.random_range(0..=cfg.image_w - w);
        let y = rng.random_range(0..=cfg.image_h - h);
        let rect = PixelRect::new(x, y, w, h);
        if cfg.allow_overlap || placed.iter().all(|o| o.rect.intersection(&rect).is_none()) {
            return Ok(rect);
        }
    }
    Err(Error::invalid(format!(
        "could not place {} non-overlapping objects in {}x{}",
        placed.len() + 1,
        cfg.image_w,
        cfg.image_h
    )))
}

/// Generates `cfg.count` scenes from one ChaCha stream seeded by `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.random_range(0..cfg.classes);
            let rect = place(&mut rng, cfg, &objects)?;
            objects.push(SceneObject { class, rect });
        }
        scenes.push(Scene {
            id: scene_id(index),
            image_w: cfg.image_w,
            image_h: cfg.image_h,
            objects,
            sigma: cfg.sigma,
            seed: rng.next_u64(),
            classes: cfg.classes,
            channels: cfg.channels,
        });
    }
    Ok(scenes)
}

pub fn ground_truth(scenes: &[Scene]) -> Result<GroundTruth> {
    let mut gt = GroundTruth::new();
    for s in scenes {
        gt.add_image(s.id.clone());
        for o in &s.objects {
            gt.add(s.id.clone(), o.class, o.rect)?;
        }
    }
    Ok(gt)
}

pub fn scenes_dir(dir: &Path) -> PathBuf {
    dir.join("scenes")
}

pub fn gt_path(dir: &Path) -> PathBuf {
    dir.join("gt.jsonl")
}

pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    let sdir = scenes_dir(dir);
    fs::create_dir_all(&sdir)?;
    for s in scenes {
        if s.id.is_empty() || s.id.contains(['/', '\\']) {
            return Err(Error::invalid(format!("scene id {:?} is not a file name", s.id)));
        }
        let mut json = serde_json::to_vec(s)?;
        json.push(b'\n');
        fs::write(sdir.join(format!("{}.json", s.id)), json)?;
    }
    let gt = ground_truth(scenes)?;
    write_jsonl(BufWriter::new(fs::File::create(gt_path(dir))?), &gt.to_records())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let mut scene: Scene = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
    if scene.id.is_empty() {
        scene.id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    scene.validate()?;
    Ok(scene)
}

/// Scene files under `<dir>/scenes`, in file-name order.
pub fn scene_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(scenes_dir(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    Ok(paths)
}

pub fn read_scenes(dir: &Path) -> Result<Vec<Scene>> {
    scene_paths(dir)?.iter().map(|p| read_scene(p)).collect()
}

/// Reads `gt.jsonl`. Every scene listed is registered even if it has no
/// objects, so empty scenes still count as known images.
pub fn read_ground_truth(path: &Path, images: impl IntoIterator<Item = String>) -> Result<GroundTruth> {
    let records: Vec<BoxRecord> = read_jsonl(BufReader::new(fs::File::open(path)?))?;
    let mut gt = GroundTruth::from_records(records)?;
    for image in images {
        gt.add_image(image);
    }
    Ok(gt)
}
