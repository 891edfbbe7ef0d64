//! Point-localization and IoU-detection average precision.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PixelRect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    pub rect: PixelRect,
}

/// Ground-truth boxes keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    images: BTreeMap<String, Vec<GtBox>>,
}

/// One JSON line of ground truth or detections:
/// `{"image", "class", "x", "y", "w", "h", "score"?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image: String,
    pub class: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn rect(&self) -> PixelRect {
        PixelRect::new(self.x, self.y, self.w, self.h)
    }
}

/// One JSON line of point responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub image: String,
    pub class: usize,
    pub x: usize,
    pub y: usize,
    pub confidence: f64,
    #[serde(default)]
    pub no_response: bool,
}

impl GroundTruth {
    pub fn new() -> Self {
        GroundTruth::default()
    }

    /// Registers an image, possibly with no objects.
    pub fn add_image(&mut self, image: impl Into<String>) {
        self.images.entry(image.into()).or_default();
    }

    pub fn add(&mut self, image: impl Into<String>, class_id: usize, rect: PixelRect) -> Result<()> {
        if rect.is_empty() {
            return Err(Error::invalid(format!("empty ground-truth rect {rect:?}")));
        }
        self.images
            .entry(image.into())
            .or_default()
            .push(GtBox { class_id, rect });
        Ok(())
    }

    pub fn boxes(&self, image: &str) -> Option<&[GtBox]> {
        self.images.get(image).map(Vec::as_slice)
    }

    pub fn images(&self) -> impl Iterator<Item = (&str, &[GtBox])> {
        self.images.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.images.values().flatten().map(|b| b.class_id).collect()
    }

    pub fn positives(&self, class_id: usize) -> usize {
        self.images
            .values()
            .flatten()
            .filter(|b| b.class_id == class_id)
            .count()
    }

    pub fn from_records(records: impl IntoIterator<Item = BoxRecord>) -> Result<Self> {
        let mut gt = GroundTruth::new();
        for r in records {
            gt.add(r.image.clone(), r.class, r.rect())?;
        }
        Ok(gt)
    }

    pub fn to_records(&self) -> Vec<BoxRecord> {
        self.images
            .iter()
            .flat_map(|(image, boxes)| {
                boxes.iter().map(move |b| BoxRecord {
                    image: image.clone(),
                    class: b.class_id,
                    x: b.rect.x,
                    y: b.rect.y,
                    w: b.rect.w,
                    h: b.rect.h,
                    score: None,
                })
            })
            .collect()
    }
}

/// Reads JSON lines, skipping blank lines.
pub fn read_jsonl<T, R>(input: R) -> Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format("JSON lines", format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl<T, W>(mut out: W, items: &[T]) -> Result<()>
where
    T: Serialize,
    W: Write,
{
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Intersection over union of two pixel rectangles.
pub fn iou(a: PixelRect, b: PixelRect) -> f64 {
    let inter = a.intersection(&b).map_or(0, |r| r.area());
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Boundary-inclusive containment of a point in a box.
pub fn point_in_box(x: usize, y: usize, rect: PixelRect) -> bool {
    x >= rect.x && x <= rect.right() && y >= rect.y && y <= rect.bottom()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ApMethod {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub class_id: usize,
    /// `(confidence, is_true_positive)` in rank order.
    pub ranked: Vec<(f64, bool)>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Ground-truth instances of this class.
    pub positives: usize,
    /// In `[0, 100]`.
    pub ap: f64,
}

impl PrCurve {
    pub fn from_ranked(class_id: usize, ranked: Vec<(f64, bool)>, positives: usize, method: ApMethod) -> Self {
        let mut tp = 0usize;
        let mut precision = Vec::with_capacity(ranked.len());
        let mut recall = Vec::with_capacity(ranked.len());
        for (i, &(_, hit)) in ranked.iter().enumerate() {
            tp += hit as usize;
            precision.push(tp as f64 / (i + 1) as f64);
            recall.push(if positives == 0 { 0.0 } else { tp as f64 / positives as f64 });
        }
        let ap = average_precision(&ranked, &precision, &recall, positives, method);
        PrCurve {
            class_id,
            ranked,
            precision,
            recall,
            positives,
            ap,
        }
    }

    pub fn true_positives(&self) -> usize {
        self.ranked.iter().filter(|r| r.1).count()
    }

    /// CSV with columns `rank, confidence, precision, recall`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "confidence", "precision", "recall"])?;
        for (i, ((conf, _), (p, r))) in self
            .ranked
            .iter()
            .zip(self.precision.iter().zip(&self.recall))
            .enumerate()
        {
            w.write_record([
                (i + 1).to_string(),
                conf.to_string(),
                p.to_string(),
                r.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn envelope(precision: &[f64]) -> Vec<f64> {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    env
}

fn average_precision(
    ranked: &[(f64, bool)],
    precision: &[f64],
    recall: &[f64],
    positives: usize,
    method: ApMethod,
) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let env = envelope(precision);
    match method {
        // Recall grows by exactly 1/positives at each true positive, so the
        // area is the envelope summed over true-positive ranks.
        ApMethod::AllPoint => {
            let sum = ranked
                .iter()
                .zip(&env)
                .filter(|((_, hit), _)| *hit)
                .map(|(_, p)| *p)
                .fold(0.0, |a, b| a + b);
            100.0 * sum / positives as f64
        }
        ApMethod::ElevenPoint => {
            let total = (0..=10)
                .map(|t| {
                    let level = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&env)
                        .find(|(r, _)| **r >= level - 1e-12)
                        .map_or(0.0, |(_, p)| *p)
                })
                .fold(0.0, |a, b| a + b);
            100.0 * total / 11.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// One curve per class with ground truth, ascending class id.
    pub curves: Vec<PrCurve>,
    /// Classes that received predictions but have no ground truth.
    pub unscored_classes: Vec<usize>,
    pub map: f64,
}

impl MetricReport {
    fn from_curves(curves: Vec<PrCurve>, unscored_classes: Vec<usize>) -> Self {
        let map = if curves.is_empty() {
            0.0
        } else {
            curves.iter().map(|c| c.ap).sum::<f64>() / curves.len() as f64
        };
        MetricReport {
            curves,
            unscored_classes,
            map,
        }
    }

    pub fn ap(&self, class_id: usize) -> Option<f64> {
        self.curves.iter().find(|c| c.class_id == class_id).map(|c| c.ap)
    }

    /// CSV `class, ap, positives, predictions, true_positives` plus a `mAP` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "ap", "positives", "predictions", "true_positives"])?;
        for c in &self.curves {
            w.write_record([
                c.class_id.to_string(),
                format!("{:.4}", c.ap),
                c.positives.to_string(),
                c.ranked.len().to_string(),
                c.true_positives().to_string(),
            ])?;
        }
        w.write_record(["mAP".to_string(), format!("{:.4}", self.map), String::new(), String::new(), String::new()])?;
        w.flush()?;
        Ok(())
    }

    pub fn write_table<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{:>8}  {:>8}  {:>9}  {:>11}", "class", "AP", "positives", "predictions")?;
        for c in &self.curves {
            writeln!(out, "{:>8}  {:>8.2}  {:>9}  {:>11}", c.class_id, c.ap, c.positives, c.ranked.len())?;
        }
        writeln!(out, "{:>8}  {:>8.2}", "mAP", self.map)?;
        Ok(())
    }
}

/// Score-descending order with a deterministic tie-break on the key.
fn sort_ranked<K: Ord>(items: &mut [(f64, K, bool)]) {
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
}

fn collect_report(
    classes: BTreeSet<usize>,
    gt: &GroundTruth,
    mut ranked_for: impl FnMut(usize) -> Vec<(f64, bool)>,
    method: ApMethod,
) -> MetricReport {
    let mut curves = Vec::new();
    let mut unscored = Vec::new();
    for class in classes {
        let ranked = ranked_for(class);
        let positives = gt.positives(class);
        if positives == 0 {
            unscored.push(class);
            continue;
        }
        curves.push(PrCurve::from_ranked(class, ranked, positives, method));
    }
    MetricReport::from_curves(curves, unscored)
}

/// A response is correct when its location lies inside a not-yet-claimed
/// same-class box of its image. Every other response is a false positive;
/// every box never claimed is a false negative. Flagged no-response records
/// are not predictions.
pub fn point_metric(responses: &[PointRecord], gt: &GroundTruth, method: ApMethod) -> Result<MetricReport> {
    for r in responses {
        if gt.boxes(&r.image).is_none() {
            return Err(Error::UnknownImage(r.image.clone()));
        }
        if !r.confidence.is_finite() {
            return Err(Error::invalid(format!("non-finite confidence for {}", r.image)));
        }
    }
    let mut classes = gt.classes();
    classes.extend(responses.iter().filter(|r| !r.no_response).map(|r| r.class));

    Ok(collect_report(
        classes,
        gt,
        |class| {
            let mut items: Vec<(f64, (&str, usize, usize), bool)> = responses
                .iter()
                .filter(|r| r.class == class && !r.no_response)
                .map(|r| (r.confidence, (r.image.as_str(), r.y, r.x), false))
                .collect();
            sort_ranked(&mut items);
            let mut claimed: BTreeSet<(&str, usize)> = BTreeSet::new();
            for item in &mut items {
                let (image, y, x) = item.1;
                let boxes = gt.boxes(image).unwrap_or(&[]);
                let hit = boxes.iter().enumerate().find(|(i, b)| {
                    b.class_id == class && !claimed.contains(&(image, *i)) && point_in_box(x, y, b.rect)
                });
                if let Some((i, _)) = hit {
                    claimed.insert((image, i));
                    item.2 = true;
                }
            }
            items.into_iter().map(|(c, _, hit)| (c, hit)).collect()
        },
        method,
    ))
}

/// Greedy matching in score order: each detection takes the unmatched
/// same-class box of its image with the highest IoU and is a true positive
/// iff that IoU exceeds `iou_thresh`.
pub fn detection_metric(
    detections: &[BoxRecord],
    gt: &GroundTruth,
    iou_thresh: f64,
    method: ApMethod,
) -> Result<MetricReport> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::invalid(format!("IoU threshold {iou_thresh} outside [0, 1]")));
    }
    let score_of = |d: &BoxRecord| {
        d.score
            .filter(|s| s.is_finite())
            .ok_or_else(|| Error::invalid(format!("detection in {} lacks a finite score", d.image)))
    };
    for d in detections {
        score_of(d)?;
    }
    let mut classes = gt.classes();
    classes.extend(detections.iter().map(|d| d.class));

    Ok(collect_report(
        classes,
        gt,
        |class| {
            let mut items: Vec<(f64, (&str, PixelRect), bool)> = detections
                .iter()
                .filter(|d| d.class == class)
                .map(|d| (d.score.unwrap(), (d.image.as_str(), d.rect()), false))
                .collect();
            sort_ranked(&mut items);
            let mut matched: BTreeSet<(&str, usize)> = BTreeSet::new();
            for item in &mut items {
                let (image, rect) = item.1;
                let boxes = gt.boxes(image).unwrap_or(&[]);
                let mut best: Option<(usize, f64)> = None;
                for (i, b) in boxes.iter().enumerate() {
                    if b.class_id != class || matched.contains(&(image, i)) {
                        continue;
                    }
                    let o = iou(rect, b.rect);
                    if best.is_none_or(|(_, bo)| o > bo) {
                        best = Some((i, o));
                    }
                }
                if let Some((i, o)) = best {
                    if o > iou_thresh {
                        matched.insert((image, i));
                        item.2 = true;
                    }
                }
            }
            items.into_iter().map(|(c, _, hit)| (c, hit)).collect()
        },
        method,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(image: &str, class: usize, x: usize, y: usize, confidence: f64) -> PointRecord {
        PointRecord {
            image: image.into(),
            class,
            x,
            y,
            confidence,
            no_response: false,
        }
    }

    fn det(image: &str, class: usize, r: [usize; 4], score: f64) -> BoxRecord {
        BoxRecord {
            image: image.into(),
            class,
            x: r[0],
            y: r[1],
            w: r[2],
            h: r[3],
            score: Some(score),
        }
    }

    fn gt(boxes: &[(&str, usize, [usize; 4])]) -> GroundTruth {
        let mut g = GroundTruth::new();
        for (image, class, r) in boxes {
            g.add(*image, *class, PixelRect::new(r[0], r[1], r[2], r[3])).unwrap();
        }
        g
    }

    #[test]
    fn iou_examples() {
        let a = PixelRect::new(0, 0, 10, 10);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, PixelRect::new(10, 0, 5, 5)), 0.0);
        assert_eq!(iou(a, PixelRect::new(5, 0, 10, 10)), 50.0 / 150.0);
    }

    #[test]
    fn point_metric_examples() {
        let g = gt(&[("a", 0, [0, 0, 10, 10])]);
        assert_eq!(point_metric(&[resp("a", 0, 5, 5, 0.9)], &g, ApMethod::AllPoint).unwrap().map, 100.0);
        assert_eq!(point_metric(&[resp("a", 0, 15, 5, 0.9)], &g, ApMethod::AllPoint).unwrap().map, 0.0);

        let g = gt(&[("a", 0, [0, 0, 10, 10]), ("b", 0, [0, 0, 10, 10])]);
        let report = point_metric(
            &[resp("a", 0, 5, 5, 0.9), resp("b", 0, 50, 50, 0.8)],
            &g,
            ApMethod::AllPoint,
        )
        .unwrap();
        let c = &report.curves[0];
        assert_eq!(c.precision, vec![1.0, 0.5]);
        assert_eq!(c.recall, vec![0.5, 0.5]);
        assert_eq!(c.ap, 50.0);
        assert_eq!(report.map, 50.0);
    }

    #[test]
    fn point_boundary_is_inclusive() {
        let g = gt(&[("a", 0, [0, 0, 10, 10])]);
        assert_eq!(point_metric(&[resp("a", 0, 10, 10, 1.0)], &g, ApMethod::AllPoint).unwrap().map, 100.0);
        assert_eq!(point_metric(&[resp("a", 0, 11, 10, 1.0)], &g, ApMethod::AllPoint).unwrap().map, 0.0);
    }

    #[test]
    fn point_metric_rejects_unknown_images() {
        let g = gt(&[("a", 0, [0, 0, 10, 10])]);
        assert!(matches!(
            point_metric(&[resp("zzz", 0, 1, 1, 1.0)], &g, ApMethod::AllPoint),
            Err(Error::UnknownImage(_))
        ));
    }

    #[test]
    fn unmatched_instances_count_as_misses() {
        // Two same-class objects, one response: recall tops out at 1/2.
        let g = gt(&[("a", 1, [0, 0, 10, 10]), ("a", 1, [20, 20, 10, 10])]);
        let r = point_metric(&[resp("a", 1, 25, 25, 0.7)], &g, ApMethod::AllPoint).unwrap();
        assert_eq!(r.curves[0].ap, 50.0);
    }

    #[test]
    fn no_response_records_are_ignored() {
        let g = gt(&[("a", 0, [0, 0, 10, 10])]);
        let mut r = resp("a", 0, 0, 0, 0.0);
        r.no_response = true;
        assert_eq!(point_metric(&[r], &g, ApMethod::AllPoint).unwrap().curves[0].ranked.len(), 0);
    }

    #[test]
    fn absent_class_predictions_are_unscored() {
        let g = gt(&[("a", 0, [0, 0, 10, 10])]);
        let r = point_metric(&[resp("a", 0, 1, 1, 0.5), resp("a", 3, 1, 1, 0.9)], &g, ApMethod::AllPoint).unwrap();
        assert_eq!(r.unscored_classes, vec![3]);
        assert_eq!(r.map, 100.0);
    }

    #[test]
    fn detection_metric_examples() {
        let g = gt(&[("a", 0, [0, 0, 10, 10])]);
        let r = detection_metric(&[det("a", 0, [0, 0, 10, 10], 0.3)], &g, 0.5, ApMethod::AllPoint).unwrap();
        assert_eq!(r.map, 100.0);

        let r = detection_metric(&[det("a", 0, [5, 0, 10, 10], 0.3)], &g, 0.5, ApMethod::AllPoint).unwrap();
        assert_eq!(r.curves[0].ranked, vec![(0.3, false)]);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn duplicate_detections_match_once() {
        let g = gt(&[("a", 0, [0, 0, 100, 100])]);
        // IoU 0.9 and 0.8
        let high = det("a", 0, [0, 0, 100, 90], 0.9);
        let low = det("a", 0, [0, 0, 100, 80], 0.8);
        assert!((iou(high.rect(), g.boxes("a").unwrap()[0].rect) - 0.9).abs() < 1e-12);
        let r = detection_metric(&[low.clone(), high.clone()], &g, 0.5, ApMethod::AllPoint).unwrap();
        assert_eq!(r.curves[0].ranked, vec![(0.9, true), (0.8, false)]);
        assert_eq!(r.curves[0].ap, 100.0);

        // The same pair with scores swapped: the lower-IoU box ranks first and wins.
        let mut high2 = high;
        high2.score = Some(0.1);
        let r = detection_metric(&[low, high2], &g, 0.5, ApMethod::AllPoint).unwrap();
        assert_eq!(r.curves[0].ranked, vec![(0.8, true), (0.1, false)]);
    }

    #[test]
    fn threshold_is_strict() {
        // IoU exactly 0.5: 100x100 GT vs 100x50 detection.
        let g = gt(&[("a", 0, [0, 0, 100, 100])]);
        let d = det("a", 0, [0, 0, 100, 50], 1.0);
        assert_eq!(iou(d.rect(), g.boxes("a").unwrap()[0].rect), 0.5);
        assert_eq!(detection_metric(&[d], &g, 0.5, ApMethod::AllPoint).unwrap().map, 0.0);
    }

    #[test]
    fn zero_threshold_accepts_any_overlap() {
        let g = gt(&[("a", 0, [0, 0, 10, 10]), ("b", 0, [0, 0, 10, 10])]);
        let dets = [det("a", 0, [9, 9, 30, 30], 0.4), det("b", 0, [0, 0, 1, 1], 0.2)];
        assert_eq!(detection_metric(&dets, &g, 0.0, ApMethod::AllPoint).unwrap().map, 100.0);
    }

    #[test]
    fn detection_requires_scores() {
        let g = gt(&[("a", 0, [0, 0, 10, 10])]);
        let mut d = det("a", 0, [0, 0, 10, 10], 1.0);
        d.score = None;
        assert!(detection_metric(&[d], &g, 0.5, ApMethod::AllPoint).is_err());
    }

    #[test]
    fn eleven_point_variant() {
        let g = gt(&[("a", 0, [0, 0, 10, 10]), ("b", 0, [0, 0, 10, 10])]);
        let r = point_metric(
            &[resp("a", 0, 5, 5, 0.9), resp("b", 0, 50, 50, 0.8)],
            &g,
            ApMethod::ElevenPoint,
        )
        .unwrap();
        // envelope precision 1 for recall levels 0..=0.5 (6 levels), 0 after
        assert!((r.map - 600.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip_and_csv() {
        let g = gt(&[("a", 0, [0, 0, 10, 10]), ("b", 2, [1, 2, 3, 4])]);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &g.to_records()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"image":"a","class":0,"x":0,"y":0,"w":10,"h":10}"#));
        let back = GroundTruth::from_records(read_jsonl::<BoxRecord, _>(&buf[..]).unwrap()).unwrap();
        assert_eq!(back, g);

        let r = point_metric(&[resp("a", 0, 5, 5, 0.9)], &g, ApMethod::AllPoint).unwrap();
        let mut csv_out = Vec::new();
        r.write_csv(&mut csv_out).unwrap();
        let csv_text = String::from_utf8(csv_out).unwrap();
        assert_eq!(csv_text, "class,ap,positives,predictions,true_positives\n0,100.0000,1,1,1\n2,0.0000,1,0,0\nmAP,50.0000,,,\n");
        let mut pr = Vec::new();
        r.curves[0].write_csv(&mut pr).unwrap();
        assert_eq!(String::from_utf8(pr).unwrap(), "rank,confidence,precision,recall\n1,0.9,1,1\n");
    }
}
