//! Dataset-level runs: localize every (image, class), write artifacts,
//! evaluate, and sweep thresholds or alpha.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{detection_metric, point_metric, write_jsonl, ApMethod, BoxRecord, GroundTruth, MetricReport, PointRecord};
use crate::heatmap::{accumulate, extract_detections, point_response, HeatMap, PointResponse};
use crate::provider::{FeatureProvider, PairedHead, Scene, SyntheticProvider};
use crate::scoring::{CooccurrenceMatrix, ScoringHead};
use crate::search::{BeamConfig, Localizer, SearchNode, DEFAULT_ALPHA, DEFAULT_BEAM_DEPTH, DEFAULT_BEAM_WIDTH};
use crate::tensor::PixelRect;

pub const DEFAULT_GRID: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Synthetic,
    Bridge,
}

/// Which classes get a search per image.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSelection {
    #[default]
    All,
    /// Classes whose image-level score exceeds `1/K`.
    Present,
    List(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub provider: ProviderKind,
    /// Feature lattice size for the synthetic provider.
    pub grid: usize,
    /// Paired-head sharpness for the synthetic provider.
    pub beta: f64,
    pub beam_width: usize,
    pub beam_depth: usize,
    pub alpha: f64,
    pub use_rescoring: bool,
    /// Per-class heat thresholds; classes not listed use `default_theta`.
    pub thresholds: BTreeMap<usize, f64>,
    pub default_theta: f64,
    pub classes: ClassSelection,
    /// When set, replaces every scene's noise seed (see [`reseed_scenes`]).
    pub seed: Option<u64>,
    /// Parallel images; 0 lets the thread pool decide.
    pub workers: usize,
    pub heatmaps: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            provider: ProviderKind::Synthetic,
            grid: DEFAULT_GRID,
            beta: crate::provider::synthetic::DEFAULT_BETA,
            beam_width: DEFAULT_BEAM_WIDTH,
            beam_depth: DEFAULT_BEAM_DEPTH,
            alpha: DEFAULT_ALPHA,
            use_rescoring: true,
            thresholds: BTreeMap::new(),
            default_theta: 0.0,
            classes: ClassSelection::All,
            seed: None,
            workers: 0,
            heatmaps: false,
        }
    }
}

impl RunConfig {
    pub fn beam_config(&self, target_class: usize) -> BeamConfig {
        BeamConfig {
            beam_width: self.beam_width,
            beam_depth: self.beam_depth,
            target_class,
            use_rescoring: self.use_rescoring,
            alpha: self.alpha,
        }
    }

    pub fn theta(&self, class_id: usize) -> f64 {
        self.thresholds.get(&class_id).copied().unwrap_or(self.default_theta)
    }
}

/// Parses `class=value,class=value`.
pub fn parse_thresholds(spec: &str) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("threshold {part:?} is not class=value")))?;
        let class: usize = k
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad class id {k:?}")))?;
        let theta: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad threshold {v:?}")))?;
        if !(theta >= 0.0) {
            return Err(Error::invalid(format!("threshold for class {class} must be >= 0")));
        }
        out.insert(class, theta);
    }
    Ok(out)
}

/// `all`, `present`, or a comma-separated list of class ids.
pub fn parse_class_selection(spec: &str) -> Result<ClassSelection> {
    match spec.trim() {
        "all" => Ok(ClassSelection::All),
        "present" => Ok(ClassSelection::Present),
        list => list
            .split(',')
            .map(|c| {
                c.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad class id {c:?}")))
            })
            .collect::<Result<Vec<usize>>>()
            .map(ClassSelection::List),
    }
}

/// Search outcome for one (image, class).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub class_id: usize,
    pub levels: Vec<Vec<SearchNode>>,
    pub extractions: usize,
    pub heat: HeatMap,
    pub response: PointResponse,
}

impl ClassResult {
    pub fn detections(&self, theta: f64) -> Result<Vec<crate::heatmap::Detection>> {
        extract_detections(&self.heat, theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageError {
    pub image: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    /// Successful images in input order.
    pub results: Vec<ImageResult>,
    pub errors: Vec<ImageError>,
}

impl RunOutput {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn point_records(&self) -> Vec<PointRecord> {
        self.results
            .iter()
            .flat_map(|r| {
                r.classes.iter().map(move |c| PointRecord {
                    image: r.image.clone(),
                    class: c.class_id,
                    x: c.response.x,
                    y: c.response.y,
                    confidence: c.response.confidence,
                    no_response: c.response.no_response,
                })
            })
            .collect()
    }

    pub fn detection_records(&self, theta: impl Fn(usize) -> f64) -> Result<Vec<BoxRecord>> {
        let mut out = Vec::new();
        for r in &self.results {
            for c in &r.classes {
                for d in c.detections(theta(c.class_id))? {
                    out.push(BoxRecord {
                        image: r.image.clone(),
                        class: d.class_id,
                        x: d.rect.x,
                        y: d.rect.y,
                        w: d.rect.w,
                        h: d.rect.h,
                        score: Some(d.score),
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn max_heat(&self) -> f64 {
        self.results
            .iter()
            .flat_map(|r| &r.classes)
            .map(|c| c.heat.max())
            .fold(0.0, f64::max)
    }
}

/// One image to localize.
pub struct ImageJob<'a, I: ?Sized> {
    pub id: &'a str,
    pub image: &'a I,
    pub width: usize,
    pub height: usize,
}

fn selected_classes<P, H>(
    localizer: &Localizer<'_, P, H>,
    provider: &P,
    head: &H,
    job: &ImageJob<'_, P::Image>,
    cfg: &RunConfig,
) -> Result<Vec<usize>>
where
    P: FeatureProvider + ?Sized,
    H: ScoringHead + ?Sized,
{
    let k = head.num_classes();
    match &cfg.classes {
        ClassSelection::All => Ok((0..k).collect()),
        ClassSelection::List(list) => {
            if let Some(bad) = list.iter().find(|&&c| c >= k) {
                return Err(Error::invalid(format!("class {bad} >= {k} classes")));
            }
            Ok(list.clone())
        }
        ClassSelection::Present => {
            let map = provider.extract(job.image, PixelRect::image(job.width, job.height))?;
            let floor = 1.0 / k as f64;
            let mut out = Vec::new();
            for c in 0..k {
                if localizer.target_score(&map, &cfg.beam_config(c))? > floor {
                    out.push(c);
                }
            }
            Ok(out)
        }
    }
}

fn localize_image<P, H>(
    provider: &P,
    head: &H,
    cooccurrence: Option<&CooccurrenceMatrix>,
    job: &ImageJob<'_, P::Image>,
    cfg: &RunConfig,
) -> Result<ImageResult>
where
    P: FeatureProvider + ?Sized,
    H: ScoringHead + ?Sized,
{
    let localizer = Localizer::new(provider, head).with_cooccurrence(cooccurrence);
    let classes = selected_classes(&localizer, provider, head, job, cfg)?;
    let mut out = Vec::with_capacity(classes.len());
    for class_id in classes {
        let trace = localizer.beam(job.image, job.width, job.height, &cfg.beam_config(class_id))?;
        let heat = accumulate(trace.nodes(), job.width, job.height, class_id)?;
        let response = point_response(&heat);
        out.push(ClassResult {
            class_id,
            levels: trace.levels,
            extractions: trace.extractions,
            heat,
            response,
        });
    }
    Ok(ImageResult {
        image: job.id.to_string(),
        width: job.width,
        height: job.height,
        classes: out,
    })
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Localizes every job; failures are collected per image and the run goes on.
pub fn localize_jobs<P, H>(
    provider: &P,
    head: &H,
    cooccurrence: Option<&CooccurrenceMatrix>,
    jobs: &[ImageJob<'_, P::Image>],
    cfg: &RunConfig,
) -> Result<RunOutput>
where
    P: FeatureProvider + Sync + ?Sized,
    H: ScoringHead + Sync + ?Sized,
    P::Image: Sync,
{
    cfg.beam_config(0).validate()?;
    let outcomes: Vec<Result<ImageResult>> = thread_pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|job| localize_image(provider, head, cooccurrence, job, cfg))
            .collect()
    });
    let mut run = RunOutput::default();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(r) => run.results.push(r),
            Err(e) => run.errors.push(ImageError {
                image: job.id.to_string(),
                message: e.to_string(),
            }),
        }
    }
    Ok(run)
}

/// Draws a fresh noise seed for every scene, in order, from one generator.
pub fn reseed_scenes(scenes: &mut [Scene], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in scenes {
        s.seed = rng.next_u64();
    }
}

/// Synthetic run: every scene must share `K` and `T`.
pub fn localize_scenes(scenes: &[Scene], cooccurrence: Option<&CooccurrenceMatrix>, cfg: &RunConfig) -> Result<RunOutput> {
    if let Some(seed) = cfg.seed {
        let mut owned = scenes.to_vec();
        reseed_scenes(&mut owned, seed);
        return localize_scenes(&owned, cooccurrence, &RunConfig { seed: None, ..cfg.clone() });
    }
    let Some(first) = scenes.first() else {
        return Ok(RunOutput::default());
    };
    if let Some(s) = scenes
        .iter()
        .find(|s| s.classes != first.classes || s.channels != first.channels)
    {
        return Err(Error::invalid(format!(
            "scene {} has K={} T={}, expected K={} T={}",
            s.id, s.classes, s.channels, first.classes, first.channels
        )));
    }
    let provider = SyntheticProvider::new(cfg.grid, first.channels)?;
    let head = PairedHead::new(cfg.grid, first.channels, first.classes, cfg.beta)?;
    let jobs: Vec<ImageJob<'_, Scene>> = scenes
        .iter()
        .map(|s| ImageJob {
            id: &s.id,
            image: s,
            width: s.image_w,
            height: s.image_h,
        })
        .collect();
    localize_jobs(&provider, &head, cooccurrence, &jobs, cfg)
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    image: &'a str,
    class: usize,
    extractions: usize,
    levels: &'a [Vec<SearchNode>],
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    images: usize,
    failed: usize,
    errors: &'a [ImageError],
}

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const ERRORS_FILE: &str = "errors.json";
pub const CONFIG_FILE: &str = "run.json";

/// Writes detections, point responses, traces, the error report, the
/// config echo and (optionally) heat-map PGMs under `out`.
pub fn write_run(out: &Path, run: &RunOutput, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    let create = |name: &str| -> Result<BufWriter<fs::File>> { Ok(BufWriter::new(fs::File::create(out.join(name))?)) };

    write_jsonl(create(DETECTIONS_FILE)?, &run.detection_records(|c| cfg.theta(c))?)?;
    write_jsonl(create(RESPONSES_FILE)?, &run.point_records())?;

    let traces: Vec<TraceRecord<'_>> = run
        .results
        .iter()
        .flat_map(|r| {
            r.classes.iter().map(move |c| TraceRecord {
                image: &r.image,
                class: c.class_id,
                extractions: c.extractions,
                levels: &c.levels,
            })
        })
        .collect();
    write_jsonl(create(TRACES_FILE)?, &traces)?;

    let mut w = create(ERRORS_FILE)?;
    serde_json::to_writer_pretty(
        &mut w,
        &ErrorReport {
            images: run.results.len() + run.errors.len(),
            failed: run.errors.len(),
            errors: &run.errors,
        },
    )?;
    w.write_all(b"\n")?;
    w.flush()?;

    let mut w = create(CONFIG_FILE)?;
    serde_json::to_writer_pretty(&mut w, cfg)?;
    w.write_all(b"\n")?;
    w.flush()?;

    if cfg.heatmaps {
        let dir = out.join("heatmaps");
        fs::create_dir_all(&dir)?;
        for r in &run.results {
            for c in &r.classes {
                let f = fs::File::create(dir.join(format!("{}_c{}.pgm", r.image, c.class_id)))?;
                c.heat.write_pgm(BufWriter::new(f))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Point,
    Detection,
}

pub fn evaluate(run: &RunOutput, gt: &GroundTruth, metric: Metric, cfg: &RunConfig, iou_thresh: f64) -> Result<MetricReport> {
    match metric {
        Metric::Point => point_metric(&run.point_records(), gt, ApMethod::AllPoint),
        Metric::Detection => detection_metric(
            &run.detection_records(|c| cfg.theta(c))?,
            gt,
            iou_thresh,
            ApMethod::AllPoint,
        ),
    }
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub map: f64,
    pub detections: usize,
    /// Pixels with `heat >= theta` and `heat > 0`, over all maps.
    pub active_pixels: usize,
    /// AP per class in ascending class order.
    pub ap: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub parameter: &'static str,
    pub rows: Vec<SweepRow>,
}

impl Sweep {
    /// Best value per class: the middle of the longest run of consecutive
    /// grid values that reach the class's maximum AP.
    pub fn best_per_class(&self) -> BTreeMap<usize, f64> {
        let classes: std::collections::BTreeSet<usize> =
            self.rows.iter().flat_map(|r| r.ap.keys().copied()).collect();
        let mut out = BTreeMap::new();
        for c in classes {
            let aps: Vec<Option<f64>> = self.rows.iter().map(|r| r.ap.get(&c).copied()).collect();
            let max = aps.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let (mut best, mut run_start) = ((0, 0), None);
            for (i, ap) in aps.iter().chain(std::iter::once(&None)).enumerate() {
                match (ap.is_some_and(|v| v == max), run_start) {
                    (true, None) => run_start = Some(i),
                    (false, Some(start)) => {
                        if i - start > best.1 - best.0 {
                            best = (start, i);
                        }
                        run_start = None;
                    }
                    _ => {}
                }
            }
            if best.1 > best.0 {
                out.insert(c, self.rows[(best.0 + best.1 - 1) / 2].value);
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let classes: Vec<usize> = self
            .rows
            .iter()
            .flat_map(|r| r.ap.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![self.parameter.to_string(), "map".into(), "detections".into(), "active_pixels".into()];
        header.extend(classes.iter().map(|c| format!("ap_{c}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.value.to_string(),
                format!("{:.4}", row.map),
                row.detections.to_string(),
                row.active_pixels.to_string(),
            ];
            rec.extend(
                classes
                    .iter()
                    .map(|c| row.ap.get(c).map_or(String::new(), |ap| format!("{ap:.4}"))),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn report_row(value: f64, report: &MetricReport, detections: usize, active_pixels: usize) -> SweepRow {
    SweepRow {
        value,
        map: report.map,
        detections,
        active_pixels,
        ap: report.curves.iter().map(|c| (c.class_id, c.ap)).collect(),
    }
}

/// Re-thresholds the heat maps of one run at every `theta` (applied to all
/// classes) and scores the detections.
pub fn sweep_theta(run: &RunOutput, gt: &GroundTruth, thetas: &[f64], iou_thresh: f64) -> Result<Sweep> {
    if thetas.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let mut rows = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let dets = run.detection_records(|_| theta)?;
        let report = detection_metric(&dets, gt, iou_thresh, ApMethod::AllPoint)?;
        let active = run
            .results
            .iter()
            .flat_map(|r| &r.classes)
            .map(|c| c.heat.values().iter().filter(|&&v| v >= theta && v > 0.0).count())
            .sum();
        rows.push(report_row(theta, &report, dets.len(), active));
    }
    Ok(Sweep {
        parameter: "theta",
        rows,
    })
}

/// Reruns a synthetic localization for every alpha.
pub fn sweep_alpha(
    scenes: &[Scene],
    cooccurrence: Option<&CooccurrenceMatrix>,
    gt: &GroundTruth,
    alphas: &[f64],
    metric: Metric,
    cfg: &RunConfig,
    iou_thresh: f64,
) -> Result<Sweep> {
    if alphas.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = RunConfig { alpha, ..cfg.clone() };
        let run = localize_scenes(scenes, cooccurrence, &cfg)?;
        if let Some(e) = run.errors.first() {
            return Err(Error::invalid(format!("{}: {}", e.image, e.message)));
        }
        let report = evaluate(&run, gt, metric, &cfg, iou_thresh)?;
        let dets = run.detection_records(|c| cfg.theta(c))?.len();
        rows.push(report_row(alpha, &report, dets, 0));
    }
    Ok(Sweep {
        parameter: "alpha",
        rows,
    })
}

/// `n` evenly spaced thresholds from 0 to the run's largest heat value.
pub fn theta_grid(run: &RunOutput, n: usize) -> Vec<f64> {
    let max = run.max_heat();
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, ground_truth, SynthConfig};
    use crate::provider::SceneObject;

    fn scene(id: &str, objects: Vec<SceneObject>) -> Scene {
        Scene {
            id: id.into(),
            image_w: 60,
            image_h: 60,
            objects,
            sigma: 0.0,
            seed: 1,
            classes: 4,
            channels: 8,
        }
    }

    #[test]
    fn parse_flags() {
        let t = parse_thresholds("0=1.5, 3=0").unwrap();
        assert_eq!(t.get(&0), Some(&1.5));
        assert_eq!(t.get(&3), Some(&0.0));
        assert!(parse_thresholds("0:1").is_err());
        assert!(parse_thresholds("0=-1").is_err());
        assert_eq!(parse_class_selection("all").unwrap(), ClassSelection::All);
        assert_eq!(parse_class_selection("present").unwrap(), ClassSelection::Present);
        assert_eq!(parse_class_selection("2, 0").unwrap(), ClassSelection::List(vec![2, 0]));
        assert!(parse_class_selection("x").is_err());
    }

    #[test]
    fn empty_scene_gives_flagged_responses() {
        let cfg = RunConfig {
            beam_depth: 3,
            ..RunConfig::default()
        };
        let run = localize_scenes(&[scene("e", vec![])], None, &cfg).unwrap();
        let responses = run.point_records();
        assert_eq!(responses.len(), 4);
        // Uniform scores 1/K are positive, so the heat map is not zero; the
        // detections for any threshold above the whole-map heat are empty.
        for c in &run.results[0].classes {
            assert!(c.detections(c.heat.max() + 1.0).unwrap().is_empty());
        }
    }

    #[test]
    fn planted_object_is_detected() {
        let obj = SceneObject {
            class: 2,
            rect: PixelRect::new(10, 10, 20, 20),
        };
        let cfg = RunConfig {
            classes: ClassSelection::List(vec![2]),
            ..RunConfig::default()
        };
        let run = localize_scenes(&[scene("s", vec![obj])], None, &cfg).unwrap();
        let c = &run.results[0].classes[0];
        assert!(point_in(c.response, obj.rect));
        assert!(c.extractions <= 1 + cfg.beam_width * cfg.beam_depth);
        let dets = c.detections(c.heat.max() / 2.0).unwrap();
        assert!(!dets.is_empty());
    }

    fn point_in(p: PointResponse, r: PixelRect) -> bool {
        crate::eval::point_in_box(p.x, p.y, r)
    }

    #[test]
    fn present_selection_skips_absent_classes() {
        let obj = SceneObject {
            class: 1,
            rect: PixelRect::new(0, 0, 30, 30),
        };
        let cfg = RunConfig {
            classes: ClassSelection::Present,
            beam_depth: 2,
            ..RunConfig::default()
        };
        let run = localize_scenes(&[scene("s", vec![obj]), scene("e", vec![])], None, &cfg).unwrap();
        assert_eq!(run.results[0].classes.len(), 1);
        assert_eq!(run.results[0].classes[0].class_id, 1);
        assert!(run.results[1].classes.is_empty());
    }

    #[test]
    fn bad_scenes_are_isolated() {
        let mut bad = scene("bad", vec![]);
        bad.objects.push(SceneObject {
            class: 0,
            rect: PixelRect::new(50, 50, 20, 20),
        });
        let cfg = RunConfig {
            beam_depth: 1,
            ..RunConfig::default()
        };
        let run = localize_scenes(&[bad, scene("good", vec![])], None, &cfg).unwrap();
        assert_eq!(run.errors.len(), 1);
        assert_eq!(run.errors[0].image, "bad");
        assert_eq!(run.results.len(), 1);
        assert_eq!(run.results[0].image, "good");

        let unknown_class = RunConfig {
            classes: ClassSelection::List(vec![9]),
            ..cfg
        };
        let run = localize_scenes(&[scene("good", vec![])], None, &unknown_class).unwrap();
        assert_eq!(run.errors.len(), 1);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let scenes = generate(&SynthConfig {
            count: 6,
            min_objects: 1,
            max_objects: 2,
            min_size: 20,
            max_size: 40,
            seed: 3,
            sigma: 0.05,
            ..SynthConfig::default()
        })
        .unwrap();
        let one = localize_scenes(&scenes, None, &RunConfig { workers: 1, beam_depth: 4, ..RunConfig::default() }).unwrap();
        let four = localize_scenes(&scenes, None, &RunConfig { workers: 4, beam_depth: 4, ..RunConfig::default() }).unwrap();
        assert_eq!(one, four);
        let ids: Vec<&str> = one.results.iter().map(|r| r.image.as_str()).collect();
        let expected: Vec<&str> = scenes.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn theta_sweep_rows() {
        let scenes = generate(&SynthConfig {
            count: 4,
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap();
        let gt = ground_truth(&scenes).unwrap();
        let cfg = RunConfig {
            beam_depth: 4,
            ..RunConfig::default()
        };
        let run = localize_scenes(&scenes, None, &cfg).unwrap();
        let grid = theta_grid(&run, 6);
        assert_eq!(grid[0], 0.0);
        let sweep = sweep_theta(&run, &gt, &grid, 0.5).unwrap();
        assert_eq!(sweep.rows.len(), 6);
        for pair in sweep.rows.windows(2) {
            assert!(pair[1].active_pixels <= pair[0].active_pixels);
        }
        assert!(sweep.rows.last().unwrap().active_pixels >= 1);
        let beyond = sweep_theta(&run, &gt, &[run.max_heat() * 2.0], 0.5).unwrap();
        assert_eq!((beyond.rows[0].active_pixels, beyond.rows[0].detections), (0, 0));

        // A one-value sweep matches a plain evaluation at that threshold.
        let theta = grid[2];
        let single = sweep_theta(&run, &gt, &[theta], 0.5).unwrap();
        let plain = evaluate(
            &run,
            &gt,
            Metric::Detection,
            &RunConfig {
                default_theta: theta,
                ..cfg
            },
            0.5,
        )
        .unwrap();
        assert_eq!(single.rows[0].map, plain.map);
        assert!(sweep_theta(&run, &gt, &[], 0.5).is_err());
    }

    #[test]
    fn alpha_zero_matches_no_rescoring() {
        let scenes = generate(&SynthConfig {
            count: 3,
            min_objects: 1,
            max_objects: 2,
            min_size: 20,
            max_size: 40,
            seed: 21,
            ..SynthConfig::default()
        })
        .unwrap();
        let labels: Vec<Vec<usize>> = scenes.iter().map(|s| s.labels()).collect();
        let cooc = crate::scoring::build_cooccurrence(labels.iter().map(|l| l.iter().copied()), 4).unwrap();
        let gt = ground_truth(&scenes).unwrap();
        let cfg = RunConfig {
            beam_depth: 3,
            ..RunConfig::default()
        };
        let sweep = sweep_alpha(&scenes, Some(&cooc), &gt, &[0.0], Metric::Point, &cfg, 0.5).unwrap();
        let plain = localize_scenes(
            &scenes,
            Some(&cooc),
            &RunConfig {
                use_rescoring: false,
                ..cfg.clone()
            },
        )
        .unwrap();
        let report = evaluate(&plain, &gt, Metric::Point, &cfg, 0.5).unwrap();
        assert_eq!(sweep.rows[0].map, report.map);
        let zero = localize_scenes(&scenes, Some(&cooc), &RunConfig { alpha: 0.0, ..cfg }).unwrap();
        assert_eq!(zero, plain);
    }

    #[test]
    fn run_files_are_written() {
        let scenes = generate(&SynthConfig {
            count: 2,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = RunConfig {
            beam_depth: 2,
            heatmaps: true,
            ..RunConfig::default()
        };
        let run = localize_scenes(&scenes, None, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &run, &cfg).unwrap();
        for f in [DETECTIONS_FILE, RESPONSES_FILE, TRACES_FILE, ERRORS_FILE, CONFIG_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let responses = fs::read_to_string(dir.path().join(RESPONSES_FILE)).unwrap();
        assert_eq!(responses.lines().count(), 8);
        let trace: serde_json::Value =
            serde_json::from_str(fs::read_to_string(dir.path().join(TRACES_FILE)).unwrap().lines().next().unwrap()).unwrap();
        assert!(trace["levels"][1][0]["absRect"].is_object());
        assert_eq!(fs::read_dir(dir.path().join("heatmaps")).unwrap().count(), 8);
    }
}
