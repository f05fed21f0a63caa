//! The pre-trained probabilistic classifier that scores generated samples,
//! and is retrained during evaluation. Default: multinomial logistic
//! regression (convex, natively probabilistic). Optional: one-vs-rest hinge
//! models with Platt-style sigmoid calibration, normalized per sample.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_rows, SeededRng, Tape, Tensor};

/// Above this sample count, training switches from full-batch gradient
/// descent to mini-batches of [`MINI_BATCH`].
const FULL_BATCH_LIMIT: usize = 10_000;
const MINI_BATCH: usize = 128;
/// Probability floor before logs.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierMode {
    /// Multinomial logistic regression.
    Multinomial,
    /// One-vs-rest hinge-loss linear models with sigmoid calibration.
    SvmPlatt,
}

/// Training hyperparameters for one classifier fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierHp {
    /// L2 penalty on the weights (biases unregularized).
    pub reg: f64,
    pub lr: f64,
    pub epochs: usize,
    pub mode: ClassifierMode,
}

impl Default for ClassifierHp {
    fn default() -> ClassifierHp {
        ClassifierHp {
            reg: 1e-3,
            lr: 0.5,
            epochs: 150,
            mode: ClassifierMode::Multinomial,
        }
    }
}

impl ClassifierHp {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if !(self.reg.is_finite() && self.reg >= 0.0) {
            problems.push(format!("classifier.reg must be >= 0, got {}", self.reg));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("classifier.lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            problems.push("classifier.epochs must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// Candidate grid for hyperparameter search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSearchSpec {
    pub regs: Vec<f64>,
    pub lrs: Vec<f64>,
    pub folds: usize,
    pub epochs: usize,
    pub mode: ClassifierMode,
}

impl Default for GridSearchSpec {
    fn default() -> GridSearchSpec {
        GridSearchSpec {
            regs: vec![1e-4, 1e-3, 1e-2, 1e-1],
            lrs: vec![0.1, 0.5],
            folds: 3,
            epochs: 150,
            mode: ClassifierMode::Multinomial,
        }
    }
}

impl GridSearchSpec {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.regs.is_empty() {
            problems.push("classifier.regs must have at least one candidate".to_string());
        }
        if self.lrs.is_empty() {
            problems.push("classifier.lrs must have at least one candidate".to_string());
        }
        if self.regs.iter().any(|r| !r.is_finite() || *r < 0.0) {
            problems.push("classifier.regs entries must be finite and >= 0".to_string());
        }
        if self.lrs.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            problems.push("classifier.lrs entries must be finite and > 0".to_string());
        }
        if self.folds < 2 {
            problems.push(format!("classifier.folds must be >= 2, got {}", self.folds));
        }
        if self.epochs == 0 {
            problems.push("classifier.epochs must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// Linear probabilistic classifier over K classes.
#[derive(Clone, Debug)]
pub struct ProbClassifier {
    /// `[dim, classes]` weight matrix.
    weights: Tensor,
    /// `[classes]` bias vector.
    bias: Tensor,
    /// Per-class sigmoid calibration `(a, b)`: `p = 1 / (1 + exp(a*s + b))`.
    /// Present only in [`ClassifierMode::SvmPlatt`].
    platt: Option<Vec<(f64, f64)>>,
    hp: ClassifierHp,
    dim: usize,
    classes: usize,
}

impl ProbClassifier {
    /// Assemble a classifier from raw parameters (e.g. from a checkpoint).
    /// `weights` must be `[dim, classes]`, `bias` `[classes]`, and a
    /// calibration table, when present, must have one `(a, b)` pair per
    /// class.
    pub fn from_parts(
        weights: Tensor,
        bias: Tensor,
        platt: Option<Vec<(f64, f64)>>,
        hp: ClassifierHp,
    ) -> Result<ProbClassifier> {
        let (dim, classes) = (weights.rows()?, weights.cols()?);
        if bias.numel() != classes {
            return Err(Error::Shape {
                op: "classifier_from_parts",
                lhs: weights.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        if classes < 2 {
            return Err(Error::contract("classifier: need at least 2 classes"));
        }
        if !(weights.is_finite() && bias.is_finite()) {
            return Err(Error::numeric("classifier: non-finite parameters"));
        }
        if let Some(p) = &platt {
            if p.len() != classes {
                return Err(Error::Length(format!(
                    "calibration table has {} entries for {} classes",
                    p.len(),
                    classes
                )));
            }
            if p.iter().any(|(a, b)| !(a.is_finite() && b.is_finite())) {
                return Err(Error::numeric("classifier: non-finite calibration"));
            }
        }
        Ok(ProbClassifier {
            weights,
            bias,
            platt,
            hp,
            dim,
            classes,
        })
    }

    pub fn platt(&self) -> Option<&[(f64, f64)]> {
        self.platt.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn hp(&self) -> &ClassifierHp {
        &self.hp
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Posterior distribution for one feature vector.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.predict_proba_batch(&xt)?.into_data())
    }

    /// Row-wise posterior distributions, `[n, classes]`.
    pub fn predict_proba_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols()? != self.dim {
            return Err(Error::Shape {
                op: "predict_proba",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows()?, self.dim],
            });
        }
        if !x.is_finite() {
            return Err(Error::numeric("predict_proba: non-finite input"));
        }
        let scores = scores(&self.weights, &self.bias, x)?;
        match &self.platt {
            None => softmax_rows(&scores),
            Some(platt) => {
                let (n, k) = (scores.rows()?, scores.cols()?);
                let mut out = Tensor::zeros(vec![n, k]);
                for i in 0..n {
                    let row = scores.row(i)?.to_vec();
                    let mut ps: Vec<f64> = row
                        .iter()
                        .zip(platt)
                        .map(|(s, (a, b))| 1.0 / (1.0 + (a * s + b).exp()))
                        .collect();
                    let total: f64 = ps.iter().sum();
                    for p in &mut ps {
                        *p /= total;
                    }
                    out.data_mut()[i * k..(i + 1) * k].copy_from_slice(&ps);
                }
                Ok(out)
            }
        }
    }

    /// Predicted label: argmax of the posterior (first index on ties).
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let probs = self.predict_proba(x)?;
        Ok(argmax(&probs))
    }

    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let probs = self.predict_proba_batch(x)?;
        let k = probs.cols()?;
        Ok((0..probs.rows()?)
            .map(|i| argmax(&probs.data()[i * k..(i + 1) * k]))
            .collect())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn scores(weights: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut s = matmul(x, weights)?;
    let k = bias.numel();
    for (i, v) in s.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % k];
    }
    Ok(s)
}

/// Cross-entropy of the multinomial model plus the weight penalty,
/// evaluated without a tape (used for line search and traces).
fn multinomial_loss(
    weights: &Tensor,
    bias: &Tensor,
    x: &Tensor,
    labels: &[usize],
    reg: f64,
) -> Result<f64> {
    let probs = softmax_rows(&scores(weights, bias, x)?)?;
    let k = probs.cols()?;
    let mut nll = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        nll -= probs.data()[i * k + y].max(PROB_FLOOR).ln();
    }
    let penalty: f64 = weights.data().iter().map(|w| w * w).sum();
    Ok(nll / labels.len() as f64 + reg * penalty)
}

/// Gradient of [`multinomial_loss`] via the tape.
fn multinomial_grads(
    weights: &Tensor,
    bias: &Tensor,
    x: &Tensor,
    labels: &[usize],
    reg: f64,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let w = tape.param(weights.clone())?;
    let b = tape.param(bias.clone())?;
    let xv = tape.constant(x.clone())?;
    let onehot = tape.constant(Tensor::one_hot(labels, bias.numel())?)?;

    let logits = tape.matmul(xv, w)?;
    let logits = tape.add(logits, b)?;
    let probs = tape.softmax(logits)?;
    let probs = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.log(probs)?;
    let picked = tape.mul(logp, onehot)?;
    let per_row = tape.sum_axis(picked, 1)?;
    let mean = tape.mean_all(per_row)?;
    let nll = tape.neg(mean)?;

    let w2 = tape.mul(w, w)?;
    let pen_sum = tape.sum_all(w2)?;
    let penalty = tape.scale(pen_sum, reg)?;
    let loss = tape.add(nll, penalty)?;

    let grads = tape.backward(loss)?;
    Ok((
        grads.get(w).expect("tracked").clone(),
        grads.get(b).expect("tracked").clone(),
    ))
}

/// Train a classifier on `data`. Deterministic for a given `rng` state; the
/// default multinomial mode consumes randomness only above the full-batch
/// size limit.
pub fn train(data: &LabeledDataset, hp: &ClassifierHp, rng: &mut SeededRng) -> Result<ProbClassifier> {
    train_traced(data, hp, rng).map(|(c, _)| c)
}

/// Like [`train`], also returning the per-epoch objective values (the
/// full-batch trace is non-increasing by construction).
pub fn train_traced(
    data: &LabeledDataset,
    hp: &ClassifierHp,
    rng: &mut SeededRng,
) -> Result<(ProbClassifier, Vec<f64>)> {
    hp.validate().map_err(Error::Validation)?;
    let distinct = data.class_counts().iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(Error::contract(
            "classifier: training data must contain at least 2 classes",
        ));
    }
    if !data.features().is_finite() {
        return Err(Error::numeric("classifier: non-finite features"));
    }
    match hp.mode {
        ClassifierMode::Multinomial => train_multinomial(data, hp, rng),
        ClassifierMode::SvmPlatt => train_svm_platt(data, hp),
    }
}

fn train_multinomial(
    data: &LabeledDataset,
    hp: &ClassifierHp,
    rng: &mut SeededRng,
) -> Result<(ProbClassifier, Vec<f64>)> {
    let (d, k) = (data.dim(), data.classes());
    let mut weights = Tensor::zeros(vec![d, k]);
    let mut bias = Tensor::zeros(vec![k]);
    let x = data.features();
    let labels = data.labels();
    let mut trace = Vec::with_capacity(hp.epochs);

    if data.len() <= FULL_BATCH_LIMIT {
        // Full batch with a halving line search: the objective is convex, so
        // insisting on non-increase per epoch costs little and buys the
        // monotonicity contract.
        let mut current = multinomial_loss(&weights, &bias, x, labels, hp.reg)?;
        for _ in 0..hp.epochs {
            let (gw, gb) = multinomial_grads(&weights, &bias, x, labels, hp.reg)?;
            let mut step = hp.lr;
            let mut accepted = None;
            for _ in 0..40 {
                let cand_w = step_param(&weights, &gw, step);
                let cand_b = step_param(&bias, &gb, step);
                let cand_loss = multinomial_loss(&cand_w, &cand_b, x, labels, hp.reg)?;
                if cand_loss <= current + 1e-12 {
                    accepted = Some((cand_w, cand_b, cand_loss));
                    break;
                }
                step *= 0.5;
            }
            let Some((w, b, loss)) = accepted else {
                // Gradient step cannot improve further at any tried scale;
                // we are at numerical convergence.
                trace.push(current);
                break;
            };
            let improved = current - loss;
            weights = w;
            bias = b;
            current = loss;
            trace.push(current);
            if improved.abs() < 1e-14 {
                break;
            }
        }
    } else {
        let n = data.len();
        for _ in 0..hp.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            for chunk in order.chunks(MINI_BATCH) {
                let (bx, by) = data.rows(chunk)?;
                let (gw, gb) = multinomial_grads(&weights, &bias, &bx, &by, hp.reg)?;
                weights = step_param(&weights, &gw, hp.lr);
                bias = step_param(&bias, &gb, hp.lr);
            }
            trace.push(multinomial_loss(&weights, &bias, x, labels, hp.reg)?);
        }
    }

    Ok((
        ProbClassifier {
            weights,
            bias,
            platt: None,
            hp: *hp,
            dim: d,
            classes: k,
        },
        trace,
    ))
}

fn step_param(p: &Tensor, g: &Tensor, lr: f64) -> Tensor {
    let mut out = p.clone();
    for (v, gr) in out.data_mut().iter_mut().zip(g.data()) {
        *v -= lr * gr;
    }
    out
}

/// One-vs-rest hinge models plus per-class sigmoid calibration. Fully
/// deterministic (zero init, full-batch subgradient descent).
fn train_svm_platt(
    data: &LabeledDataset,
    hp: &ClassifierHp,
) -> Result<(ProbClassifier, Vec<f64>)> {
    let (d, k, n) = (data.dim(), data.classes(), data.len());
    let x = data.features();
    let mut weights = Tensor::zeros(vec![d, k]);
    let mut bias = Tensor::zeros(vec![k]);
    let mut trace = vec![0.0; 0];

    for class in 0..k {
        let targets: Vec<f64> = data
            .labels()
            .iter()
            .map(|&y| if y == class { 1.0 } else { -1.0 })
            .collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..hp.epochs {
            // Subgradient of mean hinge + L2.
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for i in 0..n {
                let row = x.row(i)?;
                let s: f64 = row.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
                if targets[i] * s < 1.0 {
                    for (g, xi) in gw.iter_mut().zip(row) {
                        *g -= targets[i] * xi;
                    }
                    gb -= targets[i];
                }
            }
            for (g, wi) in gw.iter_mut().zip(&w) {
                *g = *g / n as f64 + 2.0 * hp.reg * wi;
            }
            gb /= n as f64;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= hp.lr * g;
            }
            b -= hp.lr * gb;
        }
        for (j, wi) in w.iter().enumerate() {
            weights.data_mut()[j * k + class] = *wi;
        }
        bias.data_mut()[class] = b;
    }

    // Per-class Platt calibration on the training scores.
    let s = scores(&weights, &bias, x)?;
    let mut platt = Vec::with_capacity(k);
    for class in 0..k {
        let scores_k: Vec<f64> = (0..n).map(|i| s.data()[i * k + class]).collect();
        let positives = data.labels().iter().filter(|&&y| y == class).count();
        let negatives = n - positives;
        // Smoothed targets as in Platt's original recipe.
        let t_pos = (positives as f64 + 1.0) / (positives as f64 + 2.0);
        let t_neg = 1.0 / (negatives as f64 + 2.0);
        let targets: Vec<f64> = data
            .labels()
            .iter()
            .map(|&y| if y == class { t_pos } else { t_neg })
            .collect();
        platt.push(fit_platt(&scores_k, &targets));
    }
    trace.push(0.0);

    Ok((
        ProbClassifier {
            weights,
            bias,
            platt: Some(platt),
            hp: *hp,
            dim: d,
            classes: k,
        },
        trace,
    ))
}

/// Fit `p = 1 / (1 + exp(a*s + b))` to smoothed targets by cross-entropy
/// descent with halving line search.
fn fit_platt(scores: &[f64], targets: &[f64]) -> (f64, f64) {
    let n = scores.len() as f64;
    let loss = |a: f64, b: f64| -> f64 {
        scores
            .iter()
            .zip(targets)
            .map(|(s, t)| {
                let p = (1.0 / (1.0 + (a * s + b).exp())).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n
    };
    let (mut a, mut b) = (-1.0, 0.0);
    let mut current = loss(a, b);
    for _ in 0..200 {
        // dL/d(a,b): with p = sigmoid(-(a s + b)), dL/dz = (p - t) * dz where
        // z = a*s + b enters negatively.
        let (mut ga, mut gb) = (0.0, 0.0);
        for (s, t) in scores.iter().zip(targets) {
            let p = 1.0 / (1.0 + (a * s + b).exp());
            let dz = t - p; // derivative of loss w.r.t. z = a*s + b
            ga += dz * s;
            gb += dz;
        }
        ga /= n;
        gb /= n;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let (ca, cb) = (a - step * ga, b - step * gb);
            let cl = loss(ca, cb);
            if cl <= current + 1e-12 {
                a = ca;
                b = cb;
                let improved = current - cl;
                current = cl;
                accepted = improved.abs() >= 1e-14;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (a, b)
}

/// Cross-validated grid search over `spec`, scored by mean macro F on the
/// held-out folds. Ties break toward lower regularization, then lower
/// learning rate.
pub fn grid_search(
    data: &LabeledDataset,
    spec: &GridSearchSpec,
    rng: &mut SeededRng,
) -> Result<ClassifierHp> {
    spec.validate().map_err(Error::Validation)?;
    if data.len() < spec.folds {
        return Err(Error::Contract(format!(
            "grid_search: {} samples cannot form {} folds",
            data.len(),
            spec.folds
        )));
    }

    // Stratified fold assignment: deal each class round-robin after a
    // seeded shuffle.
    let mut fold_of = vec![0usize; data.len()];
    for class in 0..data.classes() {
        let mut idx: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels()[i] == class)
            .collect();
        rng.shuffle(&mut idx);
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = pos % spec.folds;
        }
    }

    let mut candidates: Vec<(f64, f64)> = Vec::new();
    for &reg in &spec.regs {
        for &lr in &spec.lrs {
            candidates.push((reg, lr));
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut best: Option<(ClassifierHp, f64)> = None;
    for (reg, lr) in candidates {
        let hp = ClassifierHp {
            reg,
            lr,
            epochs: spec.epochs,
            mode: spec.mode,
        };
        let mut total_f = 0.0;
        for fold in 0..spec.folds {
            let train_idx: Vec<usize> =
                (0..data.len()).filter(|&i| fold_of[i] != fold).collect();
            let val_idx: Vec<usize> = (0..data.len()).filter(|&i| fold_of[i] == fold).collect();
            if train_idx.is_empty() || val_idx.is_empty() {
                return Err(Error::contract("grid_search: empty fold"));
            }
            let (tf, tl) = data.rows(&train_idx)?;
            let train_part = LabeledDataset::new(tf, tl, data.classes())?;
            let (vf, vl) = data.rows(&val_idx)?;
            let model = train(&train_part, &hp, rng)?;
            let preds = model.predict_batch(&vf)?;
            let (macro_f, _) = crate::evaluation::f_score(&preds, &vl, data.classes())?;
            total_f += macro_f;
        }
        let mean_f = total_f / spec.folds as f64;
        if best.as_ref().map_or(true, |(_, f)| mean_f > *f) {
            best = Some((hp, mean_f));
        }
    }
    Ok(best.expect("at least one candidate validated").0)
}
