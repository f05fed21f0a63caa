//! Evaluation harness: macro F-scores, the augmentation experiment
//! (retrain on real vs. real + generated data), margin-distribution
//! statistics, and 2-D projections for scatter export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierHp, ProbClassifier};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::numerics::{matmul, SeededRng, Stream, Tensor};
use crate::training::{train_activegan, TrainConfig};
use crate::uncertainty::{smallest_margin, GeneratedSample};

/// Outcome of one augmentation experiment. Field names are a stable JSON
/// interface.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Macro F of the classifier trained on real data only.
    pub baseline_f: f64,
    /// Macro F of the classifier trained on real + generated data.
    pub augmented_f: f64,
    /// Per-class F difference, augmented minus baseline; length K.
    pub per_class_delta: Vec<f64>,
    /// Mean smallest-margin of the generated set (null when empty).
    pub mean_margin: Option<f64>,
    /// Median smallest-margin of the generated set (null when empty).
    pub median_margin: Option<f64>,
    /// Fraction of generated samples with margin <= the truncation
    /// threshold (null when empty).
    pub frac_below_eps: Option<f64>,
    pub real_count: usize,
    pub generated_count: usize,
    pub test_count: usize,
    pub seed: u64,
    /// Echo of the configuration that produced this report.
    pub config: serde_json::Value,
}

/// Macro and per-class F-scores (`2PR/(P+R)` per class, unweighted mean).
///
/// Degenerate class conventions: a class absent from both `predictions`
/// and `truth` scores 1; a class with no predictions but real occurrences
/// (or predictions but no occurrences) scores 0.
pub fn f_score(predictions: &[usize], truth: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    if predictions.is_empty() {
        return Err(Error::contract("f_score: empty input"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::Length(format!(
            "f_score: {} predictions vs {} truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    if classes < 2 {
        return Err(Error::contract("f_score: need at least 2 classes"));
    }
    if let Some(bad) = predictions.iter().chain(truth).find(|&&y| y >= classes) {
        return Err(Error::Contract(format!(
            "f_score: label {} out of range for {} classes",
            bad, classes
        )));
    }

    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fname = vec![0usize; classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fname[t] += 1;
        }
    }

    let mut per_class = Vec::with_capacity(classes);
    for k in 0..classes {
        let predicted = tp[k] + fp[k];
        let actual = tp[k] + fname[k];
        let f = if predicted == 0 && actual == 0 {
            1.0
        } else if tp[k] == 0 {
            0.0
        } else {
            let p = tp[k] as f64 / predicted as f64;
            let r = tp[k] as f64 / actual as f64;
            2.0 * p * r / (p + r)
        };
        per_class.push(f);
    }
    let macro_f = per_class.iter().sum::<f64>() / classes as f64;
    Ok((macro_f, per_class))
}

/// Convert generated samples into a dataset compatible with `like`.
fn generated_dataset(s_g: &[GeneratedSample], like: &LabeledDataset) -> Result<LabeledDataset> {
    let dim = like.dim();
    for (i, g) in s_g.iter().enumerate() {
        if g.sample.len() != dim {
            return Err(Error::Shape {
                op: "evaluate_augmentation",
                lhs: vec![i, g.sample.len()],
                rhs: vec![i, dim],
            });
        }
        if g.label >= like.classes() {
            return Err(Error::Contract(format!(
                "generated sample {} has label {} outside {} classes",
                i,
                g.label,
                like.classes()
            )));
        }
    }
    let rows: Vec<Vec<f64>> = s_g.iter().map(|g| g.sample.clone()).collect();
    let labels: Vec<usize> = s_g.iter().map(|g| g.label).collect();
    LabeledDataset::new(Tensor::from_rows(&rows)?, labels, like.classes())
}

/// Retrain the classifier on `s_l` and on `s_l` plus the generated samples
/// (same hyperparameters, same seed), and score both on the untouched test
/// set. Margin statistics come from the margins stored on the generated
/// samples at generation time.
pub fn evaluate_augmentation(
    s_l: &LabeledDataset,
    s_g: &[GeneratedSample],
    test: &LabeledDataset,
    hp: &ClassifierHp,
    eps: f64,
    seed: u64,
) -> Result<EvalReport> {
    if test.dim() != s_l.dim() {
        return Err(Error::Shape {
            op: "evaluate_augmentation",
            lhs: vec![test.len(), test.dim()],
            rhs: vec![test.len(), s_l.dim()],
        });
    }

    let baseline = classifier::train(s_l, hp, &mut SeededRng::new(seed).stream(Stream::Classifier))?;
    let augmented_model = if s_g.is_empty() {
        baseline.clone()
    } else {
        let gen = generated_dataset(s_g, s_l)?;
        let combined = s_l.concat(&gen)?;
        classifier::train(&combined, hp, &mut SeededRng::new(seed).stream(Stream::Classifier))?
    };

    let base_preds = baseline.predict_batch(test.features())?;
    let aug_preds = augmented_model.predict_batch(test.features())?;
    let (baseline_f, base_per_class) = f_score(&base_preds, test.labels(), test.classes())?;
    let (augmented_f, aug_per_class) = f_score(&aug_preds, test.labels(), test.classes())?;
    let per_class_delta = aug_per_class
        .iter()
        .zip(&base_per_class)
        .map(|(a, b)| a - b)
        .collect();

    let margins: Vec<f64> = s_g.iter().map(|g| g.margin).collect();
    let (mean_margin, median_margin, frac_below_eps) = if margins.is_empty() {
        (None, None, None)
    } else {
        (
            Some(margins.iter().sum::<f64>() / margins.len() as f64),
            Some(median(&margins)),
            Some(margins.iter().filter(|&&m| m <= eps).count() as f64 / margins.len() as f64),
        )
    };

    Ok(EvalReport {
        baseline_f,
        augmented_f,
        per_class_delta,
        mean_margin,
        median_margin,
        frac_below_eps,
        real_count: s_l.len(),
        generated_count: s_g.len(),
        test_count: test.len(),
        seed,
        config: serde_json::json!({ "classifier": hp, "eps": eps }),
    })
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Hyperparameter sweeps
// ---------------------------------------------------------------------------

/// Which reward hyperparameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Epsilon,
    Alpha,
    Lambda,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepAxis::Epsilon => write!(f, "epsilon"),
            SweepAxis::Alpha => write!(f, "alpha"),
            SweepAxis::Lambda => write!(f, "lambda"),
        }
    }
}

impl SweepAxis {
    /// Returns the base configuration with the swept parameter replaced.
    pub fn apply(&self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Epsilon => cfg.reward.epsilon = value,
            SweepAxis::Alpha => cfg.reward.alpha = value,
            SweepAxis::Lambda => cfg.reward.lambda = value,
        }
        cfg
    }
}

/// One sweep row: either a full report or the error that stopped this
/// value (never both).
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Full train-plus-evaluate for one swept value. Training data, test data,
/// and every seed are shared across sweep values; only the swept parameter
/// differs.
pub fn sweep_one(
    axis: SweepAxis,
    value: f64,
    train_data: &LabeledDataset,
    test: &LabeledDataset,
    base: &TrainConfig,
) -> Result<EvalReport> {
    let cfg = axis.apply(base, value);
    let artifacts = train_activegan(train_data, &cfg)?;
    let mut report = evaluate_augmentation(
        train_data,
        &artifacts.final_samples,
        test,
        artifacts.classifier.hp(),
        cfg.reward.epsilon,
        cfg.seed,
    )?;
    report.config = serde_json::json!({
        "axis": axis,
        "value": value,
        "reward": cfg.reward,
        "classifier": artifacts.classifier.hp(),
    });
    Ok(report)
}

/// Run [`sweep_one`] for every value, recording per-row errors instead of
/// aborting: an invalid value yields a row with `error` set and the sweep
/// continues. Rows are pairwise independent, so permuting `values` merely
/// permutes the rows.
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    train_data: &LabeledDataset,
    test: &LabeledDataset,
    base: &TrainConfig,
) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&value| match sweep_one(axis, value, train_data, test, base) {
            Ok(report) => SweepRow {
                value,
                report: Some(report),
                error: None,
            },
            Err(e) => SweepRow {
                value,
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

/// CSV field quoting for free-form error messages; newlines are flattened
/// so the table stays one line per row.
fn csv_escape(s: &str) -> String {
    let s = s.replace('\n', "; ");
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

/// Header of the sweep CSV emitted by [`write_sweep_csv`].
pub const SWEEP_HEADER: &str =
    "axis,value,baseline_f,augmented_f,mean_margin,median_margin,frac_below_eps,error";

/// Serialize sweep rows as CSV, one line per swept value; report fields of
/// failed rows are left empty.
pub fn write_sweep_csv(mut w: impl Write, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{}", SWEEP_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in rows {
        match (&row.report, &row.error) {
            (Some(r), _) => writeln!(
                w,
                "{},{},{},{},{},{},{},",
                axis,
                row.value,
                r.baseline_f,
                r.augmented_f,
                opt(r.mean_margin),
                opt(r.median_margin),
                opt(r.frac_below_eps)
            )?,
            (None, Some(e)) => {
                writeln!(w, "{},{},,,,,,{}", axis, row.value, csv_escape(e))?
            }
            (None, None) => {
                return Err(Error::contract("sweep row carries neither report nor error"))
            }
        }
    }
    Ok(())
}

/// Number of histogram bins in [`MarginStats`].
pub const MARGIN_BINS: usize = 20;

/// Distribution summary of smallest margins over a sample pool.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginStats {
    pub mean: f64,
    pub median: f64,
    /// Fraction of samples with margin <= `eps`.
    pub frac_below: f64,
    pub eps: f64,
    pub count: usize,
    /// Counts over [`MARGIN_BINS`] uniform bins on [0, 1].
    pub histogram: Vec<usize>,
}

/// Margin statistics of `features` under `model`'s posteriors.
pub fn margin_stats(features: &Tensor, model: &ProbClassifier, eps: f64) -> Result<MarginStats> {
    let n = features.rows()?;
    if n == 0 {
        return Err(Error::contract("margin_stats: empty sample pool"));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Domain(format!(
            "margin_stats: eps must lie in [0,1], got {}",
            eps
        )));
    }
    let probs = model.predict_proba_batch(features)?;
    let mut margins = Vec::with_capacity(n);
    for i in 0..n {
        margins.push(smallest_margin(probs.row(i)?)?);
    }
    let mut histogram = vec![0usize; MARGIN_BINS];
    for &m in &margins {
        let bin = ((m * MARGIN_BINS as f64) as usize).min(MARGIN_BINS - 1);
        histogram[bin] += 1;
    }
    Ok(MarginStats {
        mean: margins.iter().sum::<f64>() / n as f64,
        median: median(&margins),
        frac_below: margins.iter().filter(|&&m| m <= eps).count() as f64 / n as f64,
        eps,
        count: n,
        histogram,
    })
}

/// Project rows to 2-D for scatter plots: identity for 2-D inputs, top-2
/// principal components (deterministic power iteration) otherwise.
pub fn project_2d(features: &Tensor) -> Result<Tensor> {
    let (n, d) = (features.rows()?, features.cols()?);
    if n == 0 {
        return Err(Error::contract("project_2d: empty input"));
    }
    if d == 2 {
        return Ok(features.clone());
    }
    if d < 2 {
        return Err(Error::Contract(format!(
            "project_2d: need at least 2 feature dimensions, got {}",
            d
        )));
    }

    // Center, form the d x d scatter matrix, extract two eigenvectors by
    // power iteration with deflation.
    let mut centered = features.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| features.data()[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered.data_mut()[i * d + j] -= mean;
        }
    }
    let mut cov = matmul(&centered.transpose2d()?, &centered)?;
    for v in cov.data_mut().iter_mut() {
        *v /= n as f64;
    }

    let mut basis = Tensor::zeros(vec![d, 2]);
    for comp in 0..2 {
        // Deterministic start: a ramp is unlikely to be orthogonal to the
        // leading eigenvector, and keeps repeated runs identical.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 1e-3).collect();
        normalize(&mut v);
        for _ in 0..200 {
            let mut next = mat_vec(&cov, &v);
            let norm = normalize(&mut next);
            if norm < 1e-12 {
                // No variance left in this direction.
                next = vec![0.0; d];
                v = next;
                break;
            }
            v = next;
        }
        let cv = mat_vec(&cov, &v);
        let lambda: f64 = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
        for (j, &vj) in v.iter().enumerate() {
            basis.data_mut()[j * 2 + comp] = vj;
        }
        // Deflate: cov <- cov - lambda v v^T
        for a in 0..d {
            for b in 0..d {
                cov.data_mut()[a * d + b] -= lambda * v[a] * v[b];
            }
        }
    }
    matmul(&centered, &basis)
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut out = vec![0.0; d];
    for i in 0..d {
        let row = &m.data()[i * d..(i + 1) * d];
        out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Write a scatter CSV (`x,y,source`) of several tagged groups, projected
/// into a shared 2-D basis fit on their union.
pub fn export_scatter(path: &Path, groups: &[(&str, &Tensor)]) -> Result<()> {
    let non_empty: Vec<&(&str, &Tensor)> =
        groups.iter().filter(|(_, t)| t.rows().unwrap_or(0) > 0).collect();
    if non_empty.is_empty() {
        return Err(Error::contract("export_scatter: no samples in any group"));
    }
    let mut union = non_empty[0].1.clone();
    for (_, t) in non_empty.iter().skip(1) {
        union = union.concat_rows(t)?;
    }
    let projected = project_2d(&union)?;

    let mut file = std::fs::File::create(path)?;
    writeln!(file, "x,y,source")?;
    let mut offset = 0;
    for (tag, t) in &non_empty {
        let rows = t.rows()?;
        for i in 0..rows {
            let row = projected.row(offset + i)?;
            writeln!(file, "{},{},{}", row[0], row[1], tag)?;
        }
        offset += rows;
    }
    Ok(())
}
