//! Classifier heads and label co-occurrence rescoring.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format;
use crate::tensor::FeatureMap;

/// Per-class probabilities produced by a head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores(Vec<f64>);

impl ClassScores {
    /// Wraps raw scores. Each value must lie in `[0, 1]`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("class scores cannot be empty"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("class score {v} outside [0, 1]")));
        }
        Ok(ClassScores(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.0.get(class).copied()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ClassScores> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax logits must be finite"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ClassScores(exps.into_iter().map(|e| e / total).collect()))
}

/// Maps a feature map to class scores. Implementations must be deterministic.
pub trait ScoringHead {
    fn num_classes(&self) -> usize;

    fn score(&self, map: &FeatureMap) -> Result<ClassScores>;
}

impl<H: ScoringHead + ?Sized> ScoringHead for &H {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn score(&self, map: &FeatureMap) -> Result<ClassScores> {
        (**self).score(map)
    }
}

impl<H: ScoringHead + ?Sized> ScoringHead for Box<H> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn score(&self, map: &FeatureMap) -> Result<ClassScores> {
        (**self).score(map)
    }
}

fn check_map_shape(map: &FeatureMap, grid: usize, channels: usize) -> Result<()> {
    if map.grid_size() != grid || map.channels() != channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{grid}x{grid}x{channels}"),
            actual: format!(
                "{0}x{0}x{1}",
                map.grid_size(),
                map.channels()
            ),
        });
    }
    Ok(())
}

/// `softmax(W · flatten(map) + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxHead {
    grid: usize,
    channels: usize,
    /// K rows of `grid * grid * channels` weights.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadManifest {
    classes: usize,
    grid: usize,
    channels: usize,
    weights: PathBuf,
    bias: PathBuf,
}

impl LinearSoftmaxHead {
    pub fn new(grid: usize, channels: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let inputs = grid * grid * channels;
        if bias.is_empty() {
            return Err(Error::invalid("head needs at least one class"));
        }
        if weights.len() != bias.len() * inputs {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{inputs} weights", bias.len()),
                actual: format!("{} weights", weights.len()),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("head parameters must be finite"));
        }
        Ok(LinearSoftmaxHead {
            grid,
            channels,
            weights,
            bias,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn logits(&self, map: &FeatureMap) -> Result<Vec<f64>> {
        check_map_shape(map, self.grid, self.channels)?;
        let x = map.values();
        Ok(self
            .weights
            .chunks_exact(x.len())
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    /// Writes `manifest` (JSON) plus two FBLB blobs next to it.
    pub fn save(&self, manifest: impl AsRef<Path>) -> Result<()> {
        let manifest = manifest.as_ref();
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let stem = manifest
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("head");
        let desc = HeadManifest {
            classes: self.bias.len(),
            grid: self.grid,
            channels: self.channels,
            weights: PathBuf::from(format!("{stem}.weights.fblb")),
            bias: PathBuf::from(format!("{stem}.bias.fblb")),
        };
        let inputs = self.grid * self.grid * self.channels;
        format::write_blob(
            BufWriter::new(File::create(dir.join(&desc.weights))?),
            desc.classes,
            inputs,
            &self.weights,
        )?;
        format::write_blob(
            BufWriter::new(File::create(dir.join(&desc.bias))?),
            desc.classes,
            1,
            &self.bias,
        )?;
        let mut out = BufWriter::new(File::create(manifest)?);
        serde_json::to_writer_pretty(&mut out, &desc)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let desc: HeadManifest = serde_json::from_reader(BufReader::new(File::open(manifest)?))?;
        let inputs = desc.grid * desc.grid * desc.channels;
        let (wr, wc, weights) =
            format::read_blob(BufReader::new(File::open(dir.join(&desc.weights))?))?;
        let (br, bc, bias) = format::read_blob(BufReader::new(File::open(dir.join(&desc.bias))?))?;
        if (wr, wc) != (desc.classes, inputs) || (br, bc) != (desc.classes, 1) {
            return Err(Error::format(
                "head manifest",
                format!(
                    "blob shapes {wr}x{wc} / {br}x{bc} disagree with K={} L={} T={}",
                    desc.classes, desc.grid, desc.channels
                ),
            ));
        }
        LinearSoftmaxHead::new(desc.grid, desc.channels, weights, bias)
    }
}

impl ScoringHead for LinearSoftmaxHead {
    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn score(&self, map: &FeatureMap) -> Result<ClassScores> {
        softmax(&self.logits(map)?)
    }
}

/// Pairwise label prior: entry `(i, j)` is `p(i | j)`, the fraction of
/// training images labelled `j` that also carry `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix {
    classes: usize,
    values: Vec<f64>,
}

impl CooccurrenceMatrix {
    pub fn new(classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != classes * classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{classes}x{classes}"),
                actual: format!("{} values", values.len()),
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "co-occurrence entry {v} outside [0, 1]"
            )));
        }
        Ok(CooccurrenceMatrix { classes, values })
    }

    /// No pairwise coupling: `p(i|j) = 0` for `i != j`.
    pub fn identity(classes: usize) -> Self {
        let mut values = vec![0.0; classes * classes];
        for i in 0..classes {
            values[i * classes + i] = 1.0;
        }
        CooccurrenceMatrix { classes, values }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    /// `p(class | given)`.
    pub fn get(&self, class: usize, given: usize) -> f64 {
        self.values[class * self.classes + given]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for row in self.values.chunks_exact(self.classes.max(1)) {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut values = Vec::new();
        let mut rows = 0;
        for record in r.records() {
            let record = record?;
            for field in record.iter() {
                values.push(field.parse::<f64>().map_err(|e| {
                    Error::format("co-occurrence CSV", format!("`{field}`: {e}"))
                })?);
            }
            rows += 1;
        }
        if rows * rows != values.len() {
            return Err(Error::format(
                "co-occurrence CSV",
                format!("{rows} rows but {} entries; expected a square matrix", values.len()),
            ));
        }
        CooccurrenceMatrix::new(rows, values)
    }
}

/// Counts label co-occurrence over per-image label sets.
pub fn build_cooccurrence<I, S>(label_sets: I, classes: usize) -> Result<CooccurrenceMatrix>
where
    I: IntoIterator<Item = S>,
    S: IntoIterator<Item = usize>,
{
    let mut joint = vec![0u64; classes * classes];
    for set in label_sets {
        let labels: BTreeSet<usize> = set.into_iter().collect();
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        for &i in &labels {
            for &j in &labels {
                joint[i * classes + j] += 1;
            }
        }
    }
    let values = (0..classes * classes)
        .map(|idx| {
            let (i, j) = (idx / classes, idx % classes);
            let given = joint[j * classes + j];
            if given == 0 {
                0.0
            } else {
                joint[i * classes + j] as f64 / given as f64
            }
        })
        .collect();
    CooccurrenceMatrix::new(classes, values)
}

/// `s[i] = unary[i] + alpha * Σ_{j≠i} p(i|j) · unary[j]`.
///
/// The result ranks classes; it is not renormalized.
pub fn rescore(unary: &ClassScores, cooc: &CooccurrenceMatrix, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be a finite value >= 0, got {alpha}")));
    }
    let k = unary.len();
    if cooc.num_classes() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{k}x{k} co-occurrence"),
            actual: format!("{0}x{0}", cooc.num_classes()),
        });
    }
    let u = unary.as_slice();
    Ok((0..k)
        .map(|i| {
            let pair: f64 = (0..k)
                .filter(|&j| j != i)
                .map(|j| cooc.get(i, j) * u[j])
                .sum();
            u[i] + alpha * pair
        })
        .collect())
}
