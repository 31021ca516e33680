//! Categorical machinery over network depth.
//!
//! Depth `d` ranges over `0..=D`. The prior decays geometrically, the
//! variational posterior is a softmax over free logits, and because both are
//! categorical the exact posterior for fixed weights is available in closed
//! form, which the tests use as an oracle for the variational fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{log_sum_exp, softmax};
use crate::tensor::Tensor;

/// Default decay rate of the depth prior.
pub const DEFAULT_GAMMA: f64 = 0.85;

/// Geometric prior `β_i ∝ γ^(1+i)` over depths `0..=D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPrior {
    gamma: f64,
    probs: Vec<f64>,
}

impl DepthPrior {
    pub fn new(max_depth: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Parameter(format!("prior decay {gamma} not in (0, 1)")));
        }
        let logs: Vec<f64> = (0..=max_depth).map(|i| (1 + i) as f64 * gamma.ln()).collect();
        Ok(Self {
            gamma,
            probs: softmax(&logs),
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn max_depth(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }
}

/// Variational posterior `q(d) = softmax(ρ)_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LogitsRepr", into = "LogitsRepr")]
pub struct DepthPosterior {
    logits: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LogitsRepr {
    logits: Vec<f64>,
}

impl TryFrom<LogitsRepr> for DepthPosterior {
    type Error = Error;

    fn try_from(r: LogitsRepr) -> Result<Self> {
        Self::from_logits(r.logits)
    }
}

impl From<DepthPosterior> for LogitsRepr {
    fn from(p: DepthPosterior) -> Self {
        Self { logits: p.logits }
    }
}

impl DepthPosterior {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Input("posterior needs at least one depth".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("posterior logits".into()));
        }
        let probs = softmax(&logits);
        Ok(Self { logits, probs })
    }

    /// All-zero logits.
    pub fn uniform(max_depth: usize) -> Self {
        Self::from_logits(vec![0.0; max_depth + 1]).expect("finite logits")
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn max_depth(&self) -> usize {
        self.logits.len() - 1
    }

    pub fn expected_depth(&self) -> f64 {
        self.probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum()
    }
}

/// `KL(q ‖ p) = Σ q_i ln(q_i / p_i)` in nats, with `0 ln 0 = 0`.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::Dimension {
            op: "kl_categorical",
            detail: format!("{} vs {} categories", q.len(), p.len()),
        });
    }
    let mut kl = 0.0;
    for (i, (&qi, &pi)) in q.iter().zip(p).enumerate() {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Err(Error::InfiniteDivergence { index: i, q: qi });
        }
        kl += qi * (qi / pi).ln();
    }
    Ok(kl.max(0.0))
}

/// Column sums of a per-example, per-depth log-likelihood table.
fn depth_totals(loglik: &Tensor) -> Vec<f64> {
    let cols = loglik.cols();
    let mut totals = vec![0.0; cols];
    for row in loglik.data().chunks(cols) {
        for (t, v) in totals.iter_mut().zip(row) {
            *t += v;
        }
    }
    totals
}

/// Minibatch ELBO estimate
/// `(N/N') Σ_n Σ_i L[n,i] α_i − KL(α ‖ β)` for an `N'×(D+1)` table `loglik`
/// drawn from a dataset of `n_total` examples.
pub fn elbo_minibatch(
    loglik: &Tensor,
    alpha: &[f64],
    prior: &DepthPrior,
    n_total: usize,
) -> Result<f64> {
    let batch = loglik.rows();
    if loglik.cols() != alpha.len() || alpha.len() != prior.probs().len() {
        return Err(Error::Dimension {
            op: "elbo_minibatch",
            detail: format!(
                "table has {} depths, posterior {}, prior {}",
                loglik.cols(),
                alpha.len(),
                prior.probs().len()
            ),
        });
    }
    if batch == 0 || n_total < batch {
        return Err(Error::Input(format!(
            "minibatch of {batch} rows from a dataset of {n_total}"
        )));
    }
    if !loglik.is_finite() {
        return Err(Error::Numeric("per-depth log-likelihoods".into()));
    }
    let fit: f64 = depth_totals(loglik)
        .iter()
        .zip(alpha)
        .map(|(s, a)| s * a)
        .sum();
    Ok(n_total as f64 / batch as f64 * fit - kl_categorical(alpha, prior.probs())?)
}

/// `ln p(Y|X) = ln Σ_j β_j exp(Σ_n L[n,j])` over the full dataset.
pub fn log_marginal_likelihood(loglik_full: &Tensor, prior: &DepthPrior) -> Result<f64> {
    Ok(log_sum_exp(&joint_log_scores(loglik_full, prior)?))
}

fn joint_log_scores(loglik_full: &Tensor, prior: &DepthPrior) -> Result<Vec<f64>> {
    if loglik_full.cols() != prior.probs().len() {
        return Err(Error::Dimension {
            op: "exact_posterior",
            detail: format!(
                "table has {} depths, prior {}",
                loglik_full.cols(),
                prior.probs().len()
            ),
        });
    }
    Ok(depth_totals(loglik_full)
        .iter()
        .zip(prior.probs())
        .map(|(s, b)| s + b.ln())
        .collect())
}

/// Exact posterior over depth for fixed weights, normalized in log space.
pub fn exact_posterior(loglik_full: &Tensor, prior: &DepthPrior) -> Result<DepthPosterior> {
    let mut scores = joint_log_scores(loglik_full, prior)?;
    let lse = log_sum_exp(&scores);
    scores.iter_mut().for_each(|s| *s -= lse);
    DepthPosterior::from_logits(scores)
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Gradient of the full-data ELBO with respect to the logits for a fixed
/// likelihood table: `α_k (g_k − Σ_i α_i g_i)` with
/// `g_i = Σ_n L[n,i] − ln(α_i / β_i)`.
pub fn elbo_logit_gradient(totals: &[f64], logits: &[f64], log_prior: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    let log_alpha: Vec<f64> = logits.iter().map(|r| r - lse).collect();
    let g: Vec<f64> = totals
        .iter()
        .zip(&log_alpha)
        .zip(log_prior)
        .map(|((s, la), lb)| s - la + lb)
        .collect();
    let alpha: Vec<f64> = log_alpha.iter().map(|la| la.exp()).collect();
    let mean: f64 = g.iter().zip(&alpha).map(|(gi, a)| gi * a).sum();
    g.iter().zip(&alpha).map(|(gi, a)| a * (gi - mean)).collect()
}

/// Settings for [`fit_posterior_logits`].
#[derive(Debug, Clone, Copy)]
pub struct LogitFit {
    pub max_steps: usize,
    pub initial_step: f64,
    /// Stop once the gradient's max-norm falls below this.
    pub grad_tol: f64,
}

impl Default for LogitFit {
    fn default() -> Self {
        Self {
            max_steps: 200_000,
            initial_step: 1.0,
            grad_tol: 1e-12,
        }
    }
}

/// Gradient ascent on the logits alone for a fixed full-data likelihood
/// table, with backtracking so each accepted step increases the ELBO.
pub fn fit_posterior_logits(
    loglik_full: &Tensor,
    prior: &DepthPrior,
    init: &DepthPosterior,
    settings: LogitFit,
) -> Result<DepthPosterior> {
    let totals = depth_totals(loglik_full);
    let log_prior = prior.log_probs();
    let objective = |post: &DepthPosterior| -> Result<f64> {
        let fit: f64 = totals.iter().zip(post.probs()).map(|(s, a)| s * a).sum();
        Ok(fit - kl_categorical(post.probs(), prior.probs())?)
    };
    if init.logits().len() != totals.len() {
        return Err(Error::Dimension {
            op: "fit_posterior_logits",
            detail: format!("{} logits for {} depths", init.logits().len(), totals.len()),
        });
    }
    let mut current = init.clone();
    let mut value = objective(&current)?;
    let mut step = settings.initial_step;
    for _ in 0..settings.max_steps {
        let grad = elbo_logit_gradient(&totals, current.logits(), &log_prior);
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < settings.grad_tol {
            break;
        }
        loop {
            let logits: Vec<f64> = current
                .logits()
                .iter()
                .zip(&grad)
                .map(|(r, g)| r + step * g)
                .collect();
            let candidate = DepthPosterior::from_logits(logits)?;
            let cand_value = objective(&candidate)?;
            if cand_value >= value {
                current = candidate;
                value = cand_value;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                return Ok(current);
            }
        }
    }
    Ok(current)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    /// Most probable depth.
    Argmax,
    /// Shallowest depth whose probability is within 95% of the maximum.
    P95,
    /// Rounded expected depth.
    Expected,
}

impl Heuristic {
    pub const ALL: [Heuristic; 3] = [Heuristic::Argmax, Heuristic::P95, Heuristic::Expected];

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::Argmax => "argmax",
            Heuristic::P95 => "p95",
            Heuristic::Expected => "expected",
        }
    }
}

impl std::str::FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Heuristic::Argmax),
            "p95" => Ok(Heuristic::P95),
            "expected" => Ok(Heuristic::Expected),
            other => Err(Error::Input(format!("unknown pruning heuristic {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub d_opt: usize,
    pub heuristic: Heuristic,
    /// Posterior over `0..=d_opt` with the tail mass folded onto `d_opt`.
    pub truncated: Vec<f64>,
}

/// Smallest index attaining the maximum.
pub fn prune_argmax(alpha: &[f64]) -> PruneResult {
    let mut best = 0;
    for (i, &a) in alpha.iter().enumerate() {
        if a > alpha[best] {
            best = i;
        }
    }
    pruned(alpha, best, Heuristic::Argmax)
}

/// `min { i : α_i ≥ 0.95 max α }`.
pub fn prune_95(alpha: &[f64]) -> PruneResult {
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = 0.95 * max;
    let d = alpha.iter().position(|&a| a >= threshold).unwrap_or(0);
    pruned(alpha, d, Heuristic::P95)
}

/// `round(Σ i α_i)`, halves rounding away from zero.
pub fn prune_expected(alpha: &[f64]) -> PruneResult {
    let mean: f64 = alpha.iter().enumerate().map(|(i, a)| i as f64 * a).sum();
    let d = (mean.round() as usize).min(alpha.len().saturating_sub(1));
    pruned(alpha, d, Heuristic::Expected)
}

pub fn prune(alpha: &[f64], heuristic: Heuristic) -> PruneResult {
    match heuristic {
        Heuristic::Argmax => prune_argmax(alpha),
        Heuristic::P95 => prune_95(alpha),
        Heuristic::Expected => prune_expected(alpha),
    }
}

fn pruned(alpha: &[f64], d_opt: usize, heuristic: Heuristic) -> PruneResult {
    PruneResult {
        d_opt,
        heuristic,
        truncated: truncate_posterior(alpha, d_opt).expect("index within range"),
    }
}

/// Keeps `α_0..α_{d-1}` and moves all mass at depths `≥ d` onto `d`.
pub fn truncate_posterior(alpha: &[f64], d_opt: usize) -> Result<Vec<f64>> {
    if alpha.is_empty() || d_opt >= alpha.len() {
        return Err(Error::Range {
            what: "cutoff depth",
            value: d_opt,
            max: alpha.len().saturating_sub(1),
        });
    }
    let mut out = alpha[..d_opt].to_vec();
    out.push(alpha[d_opt..].iter().sum());
    Ok(out)
}

/// `p(y|x) = Σ_i p(y|x, d=i) α'_i` from per-depth probability tables.
pub fn predict_marginal(per_depth_probs: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if per_depth_probs.len() != weights.len() || weights.is_empty() {
        return Err(Error::Dimension {
            op: "predict_marginal",
            detail: format!(
                "{} depth tables for {} weights",
                per_depth_probs.len(),
                weights.len()
            ),
        });
    }
    let shape = per_depth_probs[0].shape().to_vec();
    let mut out = vec![0.0; per_depth_probs[0].len()];
    for (table, &w) in per_depth_probs.iter().zip(weights) {
        if table.shape() != shape.as_slice() {
            return Err(Error::Dimension {
                op: "predict_marginal",
                detail: format!("table shape {:?} vs {:?}", table.shape(), shape),
            });
        }
        for (o, p) in out.iter_mut().zip(table.data()) {
            *o += w * p;
        }
    }
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn prior_single_depth() {
        assert_eq!(DepthPrior::new(0, 0.3).unwrap().probs(), &[1.0]);
    }

    #[test]
    fn prior_half_decay() {
        let p = DepthPrior::new(1, 0.5).unwrap();
        assert!(close(p.probs()[0], 2.0 / 3.0, 1e-15));
        assert!(close(p.probs()[1], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn prior_default_decay_three_depths() {
        let raw = [0.85, 0.7225, 0.614125];
        let z: f64 = raw.iter().sum();
        let p = DepthPrior::new(2, 0.85).unwrap();
        for (a, r) in p.probs().iter().zip(raw) {
            assert!(close(*a, r / z, 1e-15));
        }
    }

    #[test]
    fn prior_rejects_bad_gamma() {
        for g in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(DepthPrior::new(3, g), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn prior_is_strictly_decreasing() {
        let p = DepthPrior::new(50, DEFAULT_GAMMA).unwrap();
        assert!(p.probs().windows(2).all(|w| w[0] > w[1]));
        assert!(close(p.probs().iter().sum(), 1.0, 1e-12));
    }

    #[test]
    fn posterior_from_zero_logits_is_uniform() {
        let q = DepthPosterior::uniform(3);
        assert!(q.probs().iter().all(|&p| close(p, 0.25, 1e-16)));
    }

    #[test]
    fn posterior_large_logits_do_not_overflow() {
        let q = DepthPosterior::from_logits(vec![1000.0, 0.0]).unwrap();
        assert_eq!(q.probs()[0], 1.0);
        assert!(q.probs()[1] < 1e-300);
    }

    #[test]
    fn posterior_rejects_non_finite() {
        assert!(matches!(
            DepthPosterior::from_logits(vec![0.0, f64::INFINITY]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_point_mass_against_uniform() {
        let kl = kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(close(kl, std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn kl_infinite_when_support_missing() {
        assert!(matches!(
            kl_categorical(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::InfiniteDivergence { index: 1, .. })
        ));
    }

    #[test]
    fn elbo_point_mass_and_constant_table() {
        let prior = DepthPrior::new(2, 0.85).unwrap();
        let l = Tensor::from_rows(&[[-0.1, -0.2, -0.3], [-1.0, -2.0, -0.5]]).unwrap();
        let alpha = [0.0, 1.0, 0.0];
        let got = elbo_minibatch(&l, &alpha, &prior, 10).unwrap();
        let want = 5.0 * (-0.2 - 2.0) - (-prior.probs()[1].ln());
        assert!(close(got, want, 1e-12));

        let c = Tensor::filled(&[4, 3], -0.7);
        let alpha = [0.2, 0.5, 0.3];
        let kl = kl_categorical(&alpha, prior.probs()).unwrap();
        let got = elbo_minibatch(&c, &alpha, &prior, 40).unwrap();
        assert!(close(got, 40.0 * -0.7 - kl, 1e-12));
    }

    #[test]
    fn elbo_rejects_bad_inputs() {
        let prior = DepthPrior::new(1, 0.85).unwrap();
        let l = Tensor::filled(&[3, 2], -1.0);
        assert!(elbo_minibatch(&l, &[0.5, 0.5], &prior, 2).is_err());
        let mut bad = l.clone();
        bad.data_mut()[0] = f64::NEG_INFINITY;
        assert!(matches!(
            elbo_minibatch(&bad, &[0.5, 0.5], &prior, 3),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn exact_posterior_uniform_likelihood_is_prior() {
        let prior = DepthPrior::new(4, 0.85).unwrap();
        let post = exact_posterior(&Tensor::zeros(&[7, 5]), &prior).unwrap();
        for (a, b) in post.probs().iter().zip(prior.probs()) {
            assert!(close(*a, *b, 1e-15));
        }
    }

    #[test]
    fn exact_posterior_hand_bayes() {
        let uniform = DepthPrior {
            gamma: 0.5,
            probs: vec![0.5, 0.5],
        };
        let l = Tensor::from_rows(&[[0.9f64.ln(), 0.1f64.ln()]]).unwrap();
        let post = exact_posterior(&l, &uniform).unwrap();
        assert!(close(post.probs()[0], 0.9, 1e-15));
        assert!(close(post.probs()[1], 0.1, 1e-15));
    }

    #[test]
    fn exact_posterior_extreme_dominance() {
        let prior = DepthPrior::new(3, 0.85).unwrap();
        let rows: Vec<[f64; 4]> = (0..10).map(|_| [-60.0, -55.0, -5.0, -58.0]).collect();
        let post = exact_posterior(&Tensor::from_rows(&rows).unwrap(), &prior).unwrap();
        assert!(post.probs()[2] >= 1.0 - 1e-10);
        assert!(post.probs().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(prune_argmax(&[0.1, 0.8, 0.1]).d_opt, 1);
        assert_eq!(prune_argmax(&[0.25; 4]).d_opt, 0);
        assert_eq!(prune_argmax(&[0.2, 0.4, 0.4]).d_opt, 1);
    }

    #[test]
    fn p95_examples() {
        let alpha = [0.01, 0.32, 0.33, 0.34];
        // threshold 0.95 * 0.34 = 0.323: 0.32 fails, 0.33 passes
        assert_eq!(prune_95(&alpha).d_opt, 2);
        assert_eq!(prune_95(&[0.0, 0.0, 1.0, 0.0]).d_opt, 2);
        assert_eq!(prune_95(&[0.5, 0.5]).d_opt, 0);
    }

    #[test]
    fn expected_examples() {
        assert_eq!(prune_expected(&[0.0, 0.0, 0.0, 1.0]).d_opt, 3);
        assert_eq!(prune_expected(&[0.5, 0.5]).d_opt, 1);
        assert_eq!(prune_expected(&[0.25, 0.5, 0.25]).d_opt, 1);
    }

    #[test]
    fn truncation_examples() {
        let t = truncate_posterior(&[0.2, 0.3, 0.5], 1).unwrap();
        assert!(close(t[0], 0.2, 1e-16) && close(t[1], 0.8, 1e-16));
        assert_eq!(truncate_posterior(&[0.2, 0.3, 0.5], 2).unwrap(), vec![0.2, 0.3, 0.5]);
        assert_eq!(truncate_posterior(&[0.2, 0.3, 0.5], 0).unwrap(), vec![1.0]);
        assert!(matches!(
            truncate_posterior(&[0.2, 0.3, 0.5], 3),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn marginal_examples() {
        let a = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let mix = predict_marginal(&[a.clone(), b.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(mix.data(), &[0.5, 0.5]);
        let only = predict_marginal(&[a, b.clone()], &[0.0, 1.0]).unwrap();
        assert_eq!(only.data(), b.data());
        assert!(predict_marginal(&[b], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn heuristic_names_round_trip() {
        for h in Heuristic::ALL {
            assert_eq!(h.name().parse::<Heuristic>().unwrap(), h);
        }
    }
}
