//! Uncertainty measures over class posteriors, the reward schedule built on
//! them, and the reward-weighted log-likelihood loss whose gradient is the
//! score-function (REINFORCE) estimator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Hyperparameters of the reward schedule and its weight in the generator
/// objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Margin truncation threshold; margins above it earn `trunc_constant`.
    pub epsilon: f64,
    /// Blend between margin reward (alpha) and entropy reward (1 - alpha).
    pub alpha: f64,
    /// Reward assigned to truncated margins.
    pub trunc_constant: f64,
    /// Weight of the uncertainty loss in the generator objective.
    pub lambda: f64,
}

impl Default for RewardConfig {
    fn default() -> RewardConfig {
        RewardConfig {
            epsilon: 0.2,
            alpha: 0.5,
            trunc_constant: 0.0,
            lambda: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.epsilon) {
            problems.push(format!("reward.epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("reward.alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            problems.push(format!("reward.lambda must be >= 0, got {}", self.lambda));
        }
        if !self.trunc_constant.is_finite() || self.trunc_constant < 0.0 {
            problems.push(format!(
                "reward.trunc_constant must be a finite value >= 0, got {}",
                self.trunc_constant
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// One generated sample with everything the training loop and evaluation
/// need to reason about it later.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    /// Latent vector that produced the sample.
    pub latent: Vec<f64>,
    /// Class label the generator was conditioned on.
    pub label: usize,
    /// The generated feature vector.
    pub sample: Vec<f64>,
    /// Smallest margin of the classifier posterior at the sample.
    pub margin: f64,
    /// Label entropy of the classifier posterior at the sample.
    pub entropy: f64,
    /// Combined reward at generation time.
    pub reward: f64,
    /// Log density of `latent` under the policy at generation time.
    pub log_lik: f64,
}

/// Slack for verifying that a posterior sums to one; classifier softmax
/// output is exact to far better than this.
const DIST_TOL: f64 = 1e-6;

fn check_distribution(op: &str, probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Contract(format!("{}: empty distribution", op)));
    }
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < -1e-12 || p > 1.0 + 1e-12 {
            return Err(Error::Contract(format!(
                "{}: {} is not a probability",
                op, p
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(Error::Contract(format!(
            "{}: distribution sums to {}, not 1",
            op, sum
        )));
    }
    Ok(())
}

/// Difference between the two largest posterior probabilities. Small values
/// mean the classifier is torn between two labels.
pub fn smallest_margin(probs: &[f64]) -> Result<f64> {
    check_distribution("smallest_margin", probs)?;
    if probs.len() < 2 {
        return Err(Error::contract("smallest_margin: need at least 2 classes"));
    }
    let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > top {
            second = top;
            top = p;
        } else if p > second {
            second = p;
        }
    }
    Ok((top - second).clamp(0.0, 1.0))
}

/// Shannon entropy of the posterior in nats, with the 0 * ln 0 = 0 convention.
pub fn label_entropy(probs: &[f64]) -> Result<f64> {
    check_distribution("label_entropy", probs)?;
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h.max(0.0))
}

/// Truncated margin reward: `e^{-u_m}` for margins up to `epsilon`
/// (inclusive), the truncation constant beyond it.
pub fn margin_reward(u_m: f64, cfg: &RewardConfig) -> Result<f64> {
    if !(-1e-12..=1.0 + 1e-12).contains(&u_m) || !u_m.is_finite() {
        return Err(Error::Contract(format!(
            "margin_reward: margin {} outside [0, 1]",
            u_m
        )));
    }
    let u_m = u_m.clamp(0.0, 1.0);
    if u_m <= cfg.epsilon {
        Ok((-u_m).exp())
    } else {
        Ok(cfg.trunc_constant)
    }
}

/// Entropy reward `e^{u_le}`; lies in `[1, K]` for a K-class posterior.
pub fn entropy_reward(u_le: f64) -> Result<f64> {
    if !u_le.is_finite() || u_le < 0.0 {
        return Err(Error::Contract(format!(
            "entropy_reward: entropy {} is negative",
            u_le
        )));
    }
    Ok(u_le.exp())
}

/// Alpha-blend of the two rewards.
pub fn combined_reward(r_m: f64, r_le: f64, cfg: &RewardConfig) -> Result<f64> {
    if r_m < 0.0 || r_le < 0.0 {
        return Err(Error::Contract(format!(
            "combined_reward: rewards must be nonnegative, got {} and {}",
            r_m, r_le
        )));
    }
    Ok(cfg.alpha * r_m + (1.0 - cfg.alpha) * r_le)
}

/// Margin, entropy, and combined reward of one posterior in a single call.
pub fn sample_reward(probs: &[f64], cfg: &RewardConfig) -> Result<(f64, f64, f64)> {
    let u_m = smallest_margin(probs)?;
    let u_le = label_entropy(probs)?;
    let r_m = margin_reward(u_m, cfg)?;
    let r_le = entropy_reward(u_le)?;
    let r = combined_reward(r_m, r_le, cfg)?;
    Ok((u_m, u_le, r))
}

/// Reward-weighted mean log likelihood on the tape:
/// `(1/B) * sum_i r_i * log_lik_i`, to be maximized.
///
/// Rewards enter as constants, so backward() yields exactly the batch
/// score-function estimator `(1/B) * sum_i r_i * grad(log_lik_i)`.
pub fn uncertainty_loss(tape: &mut Tape, log_liks: Var, rewards: &[f64]) -> Result<Var> {
    let n = tape.value(log_liks).numel();
    if rewards.is_empty() || n == 0 {
        return Err(Error::contract("uncertainty_loss: empty batch"));
    }
    if n != rewards.len() {
        return Err(Error::Contract(format!(
            "uncertainty_loss: {} log-likelihoods but {} rewards",
            n,
            rewards.len()
        )));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite() || **r < 0.0) {
        return Err(Error::Contract(format!(
            "uncertainty_loss: invalid reward {}",
            bad
        )));
    }
    let r = tape.constant(Tensor::from_vec(rewards.to_vec()))?;
    let weighted = tape.mul(log_liks, r)?;
    tape.mean_all(weighted)
}

/// Value-level uncertainty loss over already-recorded samples.
pub fn uncertainty_loss_value(batch: &[GeneratedSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("uncertainty_loss: empty batch"));
    }
    let total: f64 = batch.iter().map(|s| s.reward * s.log_lik).sum();
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GaussianPolicy;
    use crate::numerics::{numerical_gradient, SeededRng};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg() -> RewardConfig {
        RewardConfig::default()
    }

    #[test]
    fn margin_of_one_hot_is_one() {
        assert_eq!(smallest_margin(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn margin_of_uniform_is_zero() {
        let u = [1.0 / 3.0; 3];
        assert_relative_eq!(smallest_margin(&u).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn margin_is_top_two_difference() {
        assert_relative_eq!(
            smallest_margin(&[0.5, 0.3, 0.2]).unwrap(),
            0.2,
            max_relative = 1e-12
        );
        // Order must not matter.
        assert_relative_eq!(
            smallest_margin(&[0.2, 0.5, 0.3]).unwrap(),
            0.2,
            max_relative = 1e-12
        );
    }

    #[test]
    fn margin_requires_two_classes_and_a_distribution() {
        assert!(smallest_margin(&[1.0]).is_err());
        assert!(smallest_margin(&[0.9, 0.3]).is_err());
        assert!(smallest_margin(&[]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(label_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_relative_eq!(
            label_entropy(&[0.1; 10]).unwrap(),
            10.0f64.ln(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            label_entropy(&[0.5, 0.5, 0.0]).unwrap(),
            2.0f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn margin_reward_examples() {
        assert_eq!(margin_reward(0.0, &cfg()).unwrap(), 1.0);
        assert_eq!(margin_reward(0.5, &cfg()).unwrap(), 0.0);
        // Boundary is inclusive.
        assert_relative_eq!(
            margin_reward(0.2, &cfg()).unwrap(),
            (-0.2f64).exp(),
            max_relative = 1e-12
        );
        assert!(margin_reward(1.5, &cfg()).is_err());
    }

    #[test]
    fn entropy_reward_examples() {
        assert_eq!(entropy_reward(0.0).unwrap(), 1.0);
        assert_relative_eq!(entropy_reward(10.0f64.ln()).unwrap(), 10.0, max_relative = 1e-12);
        assert_relative_eq!(entropy_reward(2.0f64.ln()).unwrap(), 2.0, max_relative = 1e-12);
        assert!(entropy_reward(-0.1).is_err());
    }

    #[test]
    fn combined_reward_blends() {
        let mut c = cfg();
        c.alpha = 1.0;
        assert_eq!(combined_reward(0.7, 3.0, &c).unwrap(), 0.7);
        c.alpha = 0.0;
        assert_eq!(combined_reward(0.7, 3.0, &c).unwrap(), 3.0);
        c.alpha = 0.5;
        assert_eq!(combined_reward(1.0, 10.0, &c).unwrap(), 5.5);
    }

    #[test]
    fn validate_flags_every_bad_field() {
        let bad = RewardConfig {
            epsilon: 2.0,
            alpha: -1.0,
            trunc_constant: f64::NAN,
            lambda: -0.5,
        };
        let problems = bad.validate().unwrap_err();
        assert_eq!(problems.len(), 4);
    }

    #[test]
    fn all_zero_rewards_give_zero_loss_and_zero_gradient() {
        let mut rng = SeededRng::new(3);
        let pol = GaussianPolicy::init(2, 2, &[4], &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = pol.bind(&mut tape, true).unwrap();
        let x = tape.constant(rng.uniform_tensor(vec![3, 2], -1.0, 1.0)).unwrap();
        let z = tape.constant(rng.normal_tensor(vec![3, 2])).unwrap();
        let ll = pol.log_likelihood(&mut tape, &vars, x, z).unwrap();
        let loss = uncertainty_loss(&mut tape, ll, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
        let grads = tape.backward(loss).unwrap();
        for v in vars.all_vars() {
            assert!(grads.get(v).unwrap().data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn single_sample_unit_reward_is_its_log_likelihood() {
        let mut rng = SeededRng::new(4);
        let pol = GaussianPolicy::init(2, 3, &[4], &mut rng).unwrap();
        let xv = rng.uniform_tensor(vec![1, 2], -1.0, 1.0);
        let zv = rng.normal_tensor(vec![1, 3]);
        let want = pol.log_likelihood_values(&xv, &zv).unwrap()[0];

        let mut tape = Tape::new();
        let vars = pol.bind(&mut tape, true).unwrap();
        let x = tape.constant(xv).unwrap();
        let z = tape.constant(zv).unwrap();
        let ll = pol.log_likelihood(&mut tape, &vars, x, z).unwrap();
        let loss = uncertainty_loss(&mut tape, ll, &[1.0]).unwrap();
        assert_relative_eq!(tape.value(loss).item().unwrap(), want, max_relative = 1e-12);
    }

    #[test]
    fn batch_gradient_is_mean_of_per_sample_gradients() {
        // Eq. consistency: grad of the batch loss == average of r_i * grad ll_i.
        let mut rng = SeededRng::new(5);
        let pol = GaussianPolicy::init(2, 2, &[5], &mut rng).unwrap();
        let xs = rng.uniform_tensor(vec![4, 2], -1.0, 1.0);
        let zs = rng.normal_tensor(vec![4, 2]);
        let rewards = [0.3, 1.7, 0.0, 2.5];

        let mut tape = Tape::new();
        let vars = pol.bind(&mut tape, true).unwrap();
        let x = tape.constant(xs.clone()).unwrap();
        let z = tape.constant(zs.clone()).unwrap();
        let ll = pol.log_likelihood(&mut tape, &vars, x, z).unwrap();
        let loss = uncertainty_loss(&mut tape, ll, &rewards).unwrap();
        let batch_grads = tape.backward(loss).unwrap();
        let batch_vars = vars.all_vars();

        // Accumulate per-sample gradients independently.
        let n_params = batch_vars.len();
        let mut accum: Vec<Tensor> = pol
            .net()
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        for i in 0..4 {
            let mut t = Tape::new();
            let vars_i = pol.bind(&mut t, true).unwrap();
            let xi = t
                .constant(Tensor::new(vec![1, 2], xs.row(i).unwrap().to_vec()).unwrap())
                .unwrap();
            let zi = t
                .constant(Tensor::new(vec![1, 2], zs.row(i).unwrap().to_vec()).unwrap())
                .unwrap();
            let lli = pol.log_likelihood(&mut t, &vars_i, xi, zi).unwrap();
            let li = t.mean_all(lli).unwrap();
            let gi = t.backward(li).unwrap();
            for (k, v) in vars_i.all_vars().into_iter().enumerate() {
                let g = gi.get(v).unwrap();
                for (a, b) in accum[k].data_mut().iter_mut().zip(g.data()) {
                    *a += rewards[i] * b / 4.0;
                }
            }
        }
        for k in 0..n_params {
            let got = batch_grads.get(batch_vars[k]).unwrap();
            for (g, w) in got.data().iter().zip(accum[k].data()) {
                assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{} vs {}", g, w);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_through_policy() {
        let mut rng = SeededRng::new(6);
        let pol = GaussianPolicy::init(2, 2, &[4], &mut rng).unwrap();
        let xs = rng.uniform_tensor(vec![3, 2], -1.0, 1.0);
        let zs = rng.normal_tensor(vec![3, 2]);
        let rewards = [0.5, 2.0, 1.25];

        let mut tape = Tape::new();
        let vars = pol.bind(&mut tape, true).unwrap();
        let x = tape.constant(xs.clone()).unwrap();
        let z = tape.constant(zs.clone()).unwrap();
        let ll = pol.log_likelihood(&mut tape, &vars, x, z).unwrap();
        let loss = uncertainty_loss(&mut tape, ll, &rewards).unwrap();
        let grads = tape.backward(loss).unwrap();

        let params: Vec<Tensor> = pol.net().params().into_iter().cloned().collect();
        let fd = numerical_gradient(&params, 1e-5, |ps| {
            let mut p2 = pol.clone();
            for (dst, src) in p2.net_mut().params_mut().into_iter().zip(ps) {
                *dst = src.clone();
            }
            let mut t = Tape::new();
            let vars = p2.bind(&mut t, true)?;
            let x = t.constant(xs.clone())?;
            let z = t.constant(zs.clone())?;
            let ll = p2.log_likelihood(&mut t, &vars, x, z)?;
            let loss = uncertainty_loss(&mut t, ll, &rewards)?;
            t.value(loss).item()
        })
        .unwrap();

        for (v, want) in vars.all_vars().into_iter().zip(&fd) {
            let got = grads.get(v).unwrap();
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!(
                    (g - w).abs() / (1e-6 + w.abs()) < 1e-4,
                    "autodiff {} vs fd {}",
                    g,
                    w
                );
            }
        }
    }

    proptest! {
        #[test]
        fn rewards_respect_bounds(
            seed in any::<u64>(), k in 2usize..8,
            eps in 0.0f64..=1.0, alpha in 0.0f64..=1.0,
        ) {
            let mut rng = SeededRng::new(seed);
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform(0.0, 1.0) + 1e-9).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / sum).collect();
            let cfg = RewardConfig { epsilon: eps, alpha, ..RewardConfig::default() };

            let (u_m, u_le, r) = sample_reward(&probs, &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&u_m));
            prop_assert!(u_le >= 0.0 && u_le <= (k as f64).ln() + 1e-9);
            let r_m = margin_reward(u_m, &cfg).unwrap();
            let r_le = entropy_reward(u_le).unwrap();
            prop_assert!(r_m == cfg.trunc_constant || ((-eps).exp()..=1.0).contains(&r_m));
            prop_assert!((1.0..=k as f64 + 1e-9).contains(&r_le));
            prop_assert!((r - (cfg.alpha * r_m + (1.0 - cfg.alpha) * r_le)).abs() < 1e-15);
        }

        #[test]
        fn margin_and_entropy_are_permutation_invariant(
            seed in any::<u64>(), k in 2usize..7,
        ) {
            let mut rng = SeededRng::new(seed);
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform(0.0, 1.0) + 1e-9).collect();
            let sum: f64 = raw.iter().sum();
            let mut probs: Vec<f64> = raw.iter().map(|p| p / sum).collect();
            let m0 = smallest_margin(&probs).unwrap();
            let h0 = label_entropy(&probs).unwrap();
            rng.shuffle(&mut probs);
            prop_assert!((smallest_margin(&probs).unwrap() - m0).abs() < 1e-12);
            prop_assert!((label_entropy(&probs).unwrap() - h0).abs() < 1e-12);
        }

        #[test]
        fn margin_reward_is_non_increasing_below_epsilon(
            a in 0.0f64..=1.0, b in 0.0f64..=1.0,
        ) {
            let cfg = RewardConfig { epsilon: 1.0, ..RewardConfig::default() };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(margin_reward(lo, &cfg).unwrap() >= margin_reward(hi, &cfg).unwrap());
        }

        #[test]
        fn best_candidate_is_scale_invariant(seed in any::<u64>()) {
            // Positive scaling of all rewards must not change the argmax.
            let mut rng = SeededRng::new(seed);
            let rewards: Vec<f64> = (0..10).map(|_| rng.uniform(0.0, 3.0)).collect();
            let scale = rng.uniform(0.1, 50.0);
            let argmax = |rs: &[f64]| {
                rs.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
            };
            let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
            prop_assert_eq!(argmax(&rewards), argmax(&scaled));
        }
    }
}
