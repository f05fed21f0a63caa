//! Dataset plumbing: synthetic 2D families for mechanism tests, an IDX
//! loader for small real-data runs, stratified splits, z-score
//! normalization, and CSV export.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Stream, Tensor};

/// Per-feature affine normalization `x' = (x - mean) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureNorm {
    /// Zero-mean unit-variance transform fitted on `features`; constant
    /// features get scale 1 so the transform stays invertible.
    pub fn fit(features: &Tensor) -> Result<FeatureNorm> {
        let (n, d) = (features.rows()?, features.cols()?);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += features.row(i)?[j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in var.iter_mut().enumerate() {
                let c = features.row(i)?[j] - mean[j];
                *v += c * c;
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureNorm { mean, scale })
    }

    fn check_dim(&self, features: &Tensor) -> Result<()> {
        if features.cols()? != self.mean.len() {
            return Err(Error::Shape {
                op: "normalize",
                lhs: features.shape().to_vec(),
                rhs: vec![self.mean.len()],
            });
        }
        Ok(())
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        self.check_dim(features)?;
        let d = self.mean.len();
        let mut out = features.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.scale[j];
        }
        Ok(out)
    }

    pub fn invert(&self, features: &Tensor) -> Result<Tensor> {
        self.check_dim(features)?;
        let d = self.mean.len();
        let mut out = features.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = *v * self.scale[j] + self.mean[j];
        }
        Ok(out)
    }
}

/// Feature matrix with integer class labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    norm: Option<FeatureNorm>,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<LabeledDataset> {
        let n = features.rows()?;
        if n == 0 {
            return Err(Error::contract("dataset: no samples"));
        }
        if labels.len() != n {
            return Err(Error::Consistency(format!(
                "dataset: {} feature rows but {} labels",
                n,
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::numeric("dataset: non-finite feature"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!(
                "dataset: label {} out of range for {} classes",
                bad, classes
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            classes,
            norm: None,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols().expect("validated rank-2 features")
    }

    pub fn norm(&self) -> Option<&FeatureNorm> {
        self.norm.as_ref()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Batch view: features and labels at `indices` (repeats allowed).
    pub fn rows(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let feats = self.features.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((feats, labels))
    }

    /// Fit a z-score transform on this data and return the normalized copy
    /// (with the transform recorded for later inversion).
    pub fn normalize(&self) -> Result<LabeledDataset> {
        let norm = FeatureNorm::fit(&self.features)?;
        self.normalize_with(norm)
    }

    /// Apply an existing transform (e.g. the training set's) to this data.
    pub fn normalize_with(&self, norm: FeatureNorm) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            features: norm.apply(&self.features)?,
            labels: self.labels.clone(),
            classes: self.classes,
            norm: Some(norm),
        })
    }

    /// Union of two datasets with identical dimension and class count.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.classes != other.classes {
            return Err(Error::Consistency(format!(
                "concat: class counts differ ({} vs {})",
                self.classes, other.classes
            )));
        }
        let features = self.features.concat_rows(&other.features)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(LabeledDataset {
            features,
            labels,
            classes: self.classes,
            norm: self.norm.clone(),
        })
    }

    /// CSV export with header `f0..f{d-1},label`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d).map(|j| format!("f{}", j)).collect();
        writeln!(w, "{},label", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.features.row(i)?.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", row.join(","), self.labels[i])?;
        }
        Ok(())
    }

    /// Seed-deterministic (train, validation, test) split, stratified by
    /// class when every class has at least as many samples as there are
    /// nonzero parts; otherwise falls back to an unstratified split with a
    /// warning.
    pub fn split(
        &self,
        fractions: (f64, f64, f64),
        seed: u64,
    ) -> Result<(Option<LabeledDataset>, Option<LabeledDataset>, Option<LabeledDataset>)> {
        let fr = [fractions.0, fractions.1, fractions.2];
        if fr.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::contract("split: fractions must be nonnegative"));
        }
        let total: f64 = fr.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "split: fractions sum to {}, expected 1",
                total
            )));
        }
        let parts_used = fr.iter().filter(|f| **f > 0.0).count();
        let mut rng = SeededRng::new(seed).stream(Stream::Data);

        let counts = self.class_counts();
        let stratified = counts.iter().all(|&c| c >= parts_used);
        let mut part_indices: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];

        if stratified {
            for class in 0..self.classes {
                let mut idx: Vec<usize> = (0..self.len())
                    .filter(|&i| self.labels[i] == class)
                    .collect();
                rng.shuffle(&mut idx);
                let alloc = largest_remainder(idx.len(), &fr);
                let mut start = 0;
                for (part, &take) in alloc.iter().enumerate() {
                    part_indices[part].extend_from_slice(&idx[start..start + take]);
                    start += take;
                }
            }
        } else {
            log::warn!(
                "split: some class has fewer samples than split parts; falling back to an unstratified split"
            );
            let mut idx: Vec<usize> = (0..self.len()).collect();
            rng.shuffle(&mut idx);
            let alloc = largest_remainder(idx.len(), &fr);
            let mut start = 0;
            for (part, &take) in alloc.iter().enumerate() {
                part_indices[part].extend_from_slice(&idx[start..start + take]);
                start += take;
            }
        }

        let mut out: Vec<Option<LabeledDataset>> = Vec::with_capacity(3);
        for indices in &mut part_indices {
            if indices.is_empty() {
                out.push(None);
                continue;
            }
            indices.sort_unstable();
            let (features, labels) = self.rows(indices)?;
            out.push(Some(LabeledDataset {
                features,
                labels,
                classes: self.classes,
                norm: self.norm.clone(),
            }));
        }
        let test = out.pop().unwrap();
        let val = out.pop().unwrap();
        let train = out.pop().unwrap();
        Ok((train, val, test))
    }
}

/// Integer allocation of `n` items to parts proportional to `fractions`,
/// exact total, largest-remainder rounding (ties to the earlier part).
fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let targets: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut alloc: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for k in 0..(n - assigned) {
        alloc[order[k % fractions.len()]] += 1;
    }
    alloc
}

/// Synthetic 2D dataset families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticFamily {
    /// Class means on a regular K-gon of circumradius 2, isotropic noise.
    GaussianMixture,
    /// Two interleaved half-circles (exactly 2 classes).
    Moons,
    /// Concentric circles, one radius per class.
    Rings,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub family: SyntheticFamily,
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            family: SyntheticFamily::GaussianMixture,
            classes: 3,
            per_class: 100,
            noise: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.classes == 0 {
            problems.push("dataset.classes must be positive".to_string());
        }
        if self.per_class == 0 {
            problems.push("dataset.per_class must be positive".to_string());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            problems.push(format!("dataset.noise must be >= 0, got {}", self.noise));
        }
        if self.family == SyntheticFamily::Moons && self.classes != 2 {
            problems.push(format!(
                "dataset.family moons requires exactly 2 classes, got {}",
                self.classes
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// Build a deterministic 2D dataset from `spec`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate().map_err(Error::Validation)?;
    let mut rng = SeededRng::new(spec.seed).stream(Stream::Data);
    let n = spec.classes * spec.per_class;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for _ in 0..spec.per_class {
            let (x, y) = match spec.family {
                SyntheticFamily::GaussianMixture => {
                    let angle = 2.0 * std::f64::consts::PI * class as f64 / spec.classes as f64;
                    (
                        2.0 * angle.cos() + spec.noise * rng.normal(),
                        2.0 * angle.sin() + spec.noise * rng.normal(),
                    )
                }
                SyntheticFamily::Moons => {
                    let t = std::f64::consts::PI * rng.next_f64();
                    let (cx, cy) = if class == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    (cx + spec.noise * rng.normal(), cy + spec.noise * rng.normal())
                }
                SyntheticFamily::Rings => {
                    let t = 2.0 * std::f64::consts::PI * rng.next_f64();
                    let radius = (class + 1) as f64;
                    (
                        radius * t.cos() + spec.noise * rng.normal(),
                        radius * t.sin() + spec.noise * rng.normal(),
                    )
                }
            };
            rows.push(vec![x, y]);
            labels.push(class);
        }
    }
    LabeledDataset::new(Tensor::from_rows(&rows)?, labels, spec.classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> IdxReader<R> {
    fn read_exact_or(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Length(format!(
                "idx file truncated while reading {} at byte {}",
                what, self.offset
            ))),
            Err(e) => Err(e.into()),
        }
    }

    fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact_or(&mut buf, what)?;
        Ok(u32::from_be_bytes(buf))
    }
}

/// Load an IDX image/label file pair (the MNIST container format) into a
/// dataset with pixel features scaled to `[0, 1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut img = IdxReader {
        inner: BufReader::new(File::open(images.as_ref())?),
        offset: 0,
    };
    let magic = img.read_u32_be("images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "images file magic {:#010x}, expected {:#010x}",
                magic, IDX_IMAGES_MAGIC
            ),
        });
    }
    let n = img.read_u32_be("image count")? as usize;
    let rows = img.read_u32_be("image rows")? as usize;
    let cols = img.read_u32_be("image cols")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            offset: 4,
            detail: format!("degenerate image dimensions {}x{}x{}", n, rows, cols),
        });
    }
    let d = rows * cols;
    let mut pixels = vec![0u8; n * d];
    img.read_exact_or(&mut pixels, "pixel data")?;
    let mut probe = [0u8; 1];
    if img.inner.read(&mut probe)? != 0 {
        return Err(Error::Length(format!(
            "images file has trailing bytes after {} declared pixels",
            n * d
        )));
    }

    let mut lab = IdxReader {
        inner: BufReader::new(File::open(labels.as_ref())?),
        offset: 0,
    };
    let magic = lab.read_u32_be("labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "labels file magic {:#010x}, expected {:#010x}",
                magic, IDX_LABELS_MAGIC
            ),
        });
    }
    let n_labels = lab.read_u32_be("label count")? as usize;
    if n_labels != n {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            n, n_labels
        )));
    }
    let mut raw_labels = vec![0u8; n_labels];
    lab.read_exact_or(&mut raw_labels, "label data")?;

    let features = Tensor::new(
        vec![n, d],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    LabeledDataset::new(features, labels, classes)
}
