//! Joint optimization of network weights and the depth posterior.
//!
//! Both are updated by the same SGD-with-momentum step on the negative
//! minibatch ELBO. The step is taken on `−ELBO / N`, the per-example scale,
//! so the learning rate means the same thing for every dataset size.
//! Progress is judged by the full-train ELBO in eval mode; the best snapshot
//! is kept and training stops after `patience` evaluations without
//! improvement.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::inference::{
    elbo_minibatch, predict_marginal, prune, truncate_posterior, DepthPosterior, DepthPrior,
    Heuristic, PruneResult,
};
use crate::model::{
    exp_tensor, per_depth_loglik, BoundParams, LdnNetwork, NetworkConfig, Readout,
};
use crate::ops::{BatchStats, Mode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    /// Number of evaluations after which the rate is multiplied by `factor`.
    pub after: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_iterations: usize,
    pub lr_drop: Option<LrDrop>,
    pub eval_every: usize,
    pub seed: u64,
    /// Print a progress line every this many iterations; 0 is silent.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.5,
            batch_size: 512,
            patience: 500,
            max_iterations: 20_000,
            lr_drop: None,
            eval_every: 1,
            seed: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "learning rate {} must be positive and momentum {} in [0, 1)",
                self.learning_rate, self.momentum
            )));
        }
        if self.batch_size == 0 || self.patience == 0 || self.eval_every == 0 {
            return Err(Error::Parameter(
                "batch size, patience and eval interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Heavy-ball update `v ← μ v + g`, `p ← p − lr v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Dimension {
            op: "sgd_momentum_step",
            detail: format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("gradient".into()));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    /// Learnt depth: posterior over `0..=D`.
    Ldn,
    /// Fixed depth equal to the network's block count.
    Ddn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    /// Full-train ELBO for LDNs, full-train log-likelihood for DDNs.
    pub objective: f64,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStopped,
    #[default]
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EvalPoint>,
    pub best_iteration: usize,
    pub best_objective: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub step_seconds: f64,
    pub eval_seconds: f64,
}

impl TrainHistory {
    /// Best objective seen up to each evaluation.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.max(r.objective);
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub network: LdnNetwork,
    /// Present for LDNs.
    pub posterior: Option<DepthPosterior>,
    pub prior: Option<DepthPrior>,
    pub history: TrainHistory,
    pub config: TrainConfig,
}

impl TrainedModel {
    /// Pruning decision; a DDN always keeps all of its blocks.
    pub fn prune(&self, heuristic: Heuristic) -> PruneResult {
        match &self.posterior {
            Some(p) => prune(p.probs(), heuristic),
            None => {
                let d = self.network.max_depth();
                PruneResult {
                    d_opt: d,
                    heuristic,
                    truncated: vec![1.0],
                }
            }
        }
    }

    /// Class probabilities, marginalized over depths `0..=cutoff` with the
    /// truncated posterior. `None` uses every depth. DDNs ignore the cutoff.
    pub fn predict(&self, x: &Tensor, cutoff: Option<usize>) -> Result<Tensor> {
        match &self.posterior {
            Some(post) => {
                let d = cutoff.unwrap_or(self.network.max_depth());
                let weights = truncate_posterior(post.probs(), d)?;
                let log_probs = self.network.forward_truncated(x, d, Mode::Eval)?;
                let probs: Vec<Tensor> = log_probs.iter().map(exp_tensor).collect();
                predict_marginal(&probs, &weights)
            }
            None => {
                let lp = self.network.forward_final(x, Mode::Eval)?;
                Ok(exp_tensor(&lp))
            }
        }
    }

    /// Per-depth class probabilities for every depth of the network.
    pub fn predict_per_depth(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.network.forward_all_depths(x, Mode::Eval)?.probs())
    }
}

/// A differentiable ELBO built on a fresh graph.
pub struct ElboGraph {
    pub graph: Graph,
    pub params: BoundParams,
    pub logits: Option<Var>,
    /// Minibatch ELBO estimate (unnormalized).
    pub elbo: Var,
    /// `−elbo / N`, the quantity the optimizer descends.
    pub loss: Var,
    pub batch_stats: Vec<BatchStats>,
}

/// Builds `−ELBO/N` for a minibatch `(x, labels)` drawn from `n_total` examples.
pub fn build_elbo_graph(
    net: &LdnNetwork,
    logits: &[f64],
    x: &Tensor,
    labels: &[usize],
    prior: &DepthPrior,
    n_total: usize,
    mode: Mode,
) -> Result<ElboGraph> {
    let depth = net.max_depth();
    if logits.len() != depth + 1 || prior.probs().len() != depth + 1 {
        return Err(Error::Dimension {
            op: "build_elbo_graph",
            detail: format!(
                "{} logits and {} prior entries for max depth {depth}",
                logits.len(),
                prior.probs().len()
            ),
        });
    }
    let n = x.rows();
    if n == 0 || n > n_total || labels.len() != n {
        return Err(Error::Input(format!(
            "batch of {n} rows with {} labels from {n_total} examples",
            labels.len()
        )));
    }
    let mut g = Graph::new();
    let params = net.bind(&mut g);
    let xv = g.constant(x.clone());
    let fwd = net.forward_graph(&mut g, &params, xv, depth, mode, Readout::AllDepths)?;
    let repeated: Vec<usize> = (0..=depth).flat_map(|_| labels.iter().copied()).collect();
    let ll = g.nll_gather(fwd.log_probs, &repeated)?;
    let ll = g.reshape(ll, &[depth + 1, n])?;
    let ones = g.constant(Tensor::filled(&[n, 1], 1.0));
    let totals = g.matmul(ll, ones)?;
    let totals = g.reshape(totals, &[1, depth + 1])?;
    let scale = n_total as f64 / n as f64;

    let (elbo, logits_var) = if depth == 0 {
        let fit = g.sum(totals);
        (g.scale(fit, scale), None)
    } else {
        let rho = g.param(Tensor::new(vec![1, depth + 1], logits.to_vec())?);
        let log_alpha = g.log_softmax(rho)?;
        let alpha = g.exp(log_alpha);
        let weighted = g.mul(alpha, totals)?;
        let fit = g.sum(weighted);
        let fit = g.scale(fit, scale);
        let neg_log_prior: Vec<f64> = prior.log_probs().iter().map(|v| -v).collect();
        let neg_log_prior = g.constant(Tensor::new(vec![1, depth + 1], neg_log_prior)?);
        let log_ratio = g.add(log_alpha, neg_log_prior)?;
        let kl_terms = g.mul(alpha, log_ratio)?;
        let kl = g.sum(kl_terms);
        let neg_kl = g.scale(kl, -1.0);
        (g.add(fit, neg_kl)?, Some(rho))
    };
    let loss = g.scale(elbo, -1.0 / n_total as f64);
    Ok(ElboGraph {
        graph: g,
        params,
        logits: logits_var,
        elbo,
        loss,
        batch_stats: fwd.batch_stats,
    })
}

/// Mean negative log-likelihood at the network's final depth.
pub fn build_ddn_graph(net: &LdnNetwork, x: &Tensor, labels: &[usize], mode: Mode) -> Result<(Graph, BoundParams, Var, Vec<BatchStats>)> {
    let n = x.rows();
    if n == 0 || labels.len() != n {
        return Err(Error::Input(format!("batch of {n} rows with {} labels", labels.len())));
    }
    let mut g = Graph::new();
    let params = net.bind(&mut g);
    let xv = g.constant(x.clone());
    let fwd = net.forward_graph(&mut g, &params, xv, net.max_depth(), mode, Readout::FinalOnly)?;
    let ll = g.nll_gather(fwd.log_probs, labels)?;
    let total = g.sum(ll);
    let loss = g.scale(total, -1.0 / n as f64);
    Ok((g, params, loss, fwd.batch_stats))
}

/// Full-train ELBO with eval-mode batch norm.
pub fn evaluate_elbo_full(
    net: &LdnNetwork,
    posterior: &DepthPosterior,
    dataset: &Dataset,
    prior: &DepthPrior,
) -> Result<f64> {
    let trace = net.forward_all_depths(&dataset.inputs, Mode::Eval)?;
    let l = per_depth_loglik(&trace, &dataset.labels)?;
    elbo_minibatch(&l, posterior.probs(), prior, dataset.len())
}

/// Full-train log-likelihood of a fixed-depth network, eval mode.
pub fn evaluate_loglik_full(net: &LdnNetwork, dataset: &Dataset) -> Result<f64> {
    let lp = net.forward_final(&dataset.inputs, Mode::Eval)?;
    Ok(crate::ops::gather(&lp, &dataset.labels)?.sum())
}

fn select_rows(dataset: &Dataset, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let cols = dataset.inputs.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(dataset.inputs.row(i));
    }
    let labels = idx.iter().map(|&i| dataset.labels[i]).collect();
    (Tensor::new(vec![idx.len(), cols], data).expect("shape"), labels)
}

struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: 0,
            batch: batch.min(n),
        }
    }

    fn is_full(&self) -> bool {
        self.batch == self.order.len()
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.is_full() {
            return self.order.clone();
        }
        if self.cursor == 0 || self.cursor + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

fn flat_step(
    tensors: &mut [&mut Tensor],
    grads: &[Tensor],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for ((t, g), v) in tensors.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        sgd_momentum_step(t.data_mut(), g.data(), v, lr, momentum)?;
    }
    Ok(())
}

fn diverged(iteration: usize, err: Error) -> Error {
    match err {
        Error::Divergence { .. } => err,
        other => Error::Divergence {
            iteration,
            detail: other.to_string(),
        },
    }
}

/// Trains a learnt-depth network from a fresh seeded initialization.
pub fn train_ldn(
    dataset: &Dataset,
    net_config: NetworkConfig,
    prior: &DepthPrior,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if prior.max_depth() != net_config.max_depth {
        return Err(Error::Parameter(format!(
            "prior covers depth {} but network has {}",
            prior.max_depth(),
            net_config.max_depth
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = LdnNetwork::init(net_config, &mut rng)?;
    continue_ldn(dataset, net, DepthPosterior::uniform(net_config.max_depth), prior, config, rng)
}

fn continue_ldn(
    dataset: &Dataset,
    mut net: LdnNetwork,
    posterior: DepthPosterior,
    prior: &DepthPrior,
    config: &TrainConfig,
    mut rng: ChaCha8Rng,
) -> Result<TrainedModel> {
    let n = dataset.len();
    let mut logits = posterior.logits().to_vec();
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut logit_velocity = vec![0.0; logits.len()];
    let mut batcher = Batcher::new(n, config.batch_size);
    let mut lr = config.learning_rate;

    let mut step_seconds = 0.0;
    let mut eval_seconds = 0.0;
    let t = Instant::now();
    let first = evaluate_elbo_full(&net, &posterior, dataset, prior).map_err(|e| diverged(0, e))?;
    eval_seconds += t.elapsed().as_secs_f64();
    let mut records = vec![EvalPoint {
        iteration: 0,
        objective: first,
        alpha: posterior.probs().to_vec(),
    }];
    let mut best = (first, 0, net.clone(), posterior);
    let mut stale = 0;
    let mut evaluations = 0;
    let mut stop_reason = StopReason::MaxIterations;
    let mut iteration = 0;

    while iteration < config.max_iterations {
        iteration += 1;
        let t = Instant::now();
        let idx = batcher.next(&mut rng);
        let (x, labels) = if batcher.is_full() {
            (dataset.inputs.clone(), dataset.labels.clone())
        } else {
            select_rows(dataset, &idx)
        };
        let eg = build_elbo_graph(&net, &logits, &x, &labels, prior, n, Mode::Train)
            .map_err(|e| diverged(iteration, e))?;
        let loss = eg.graph.value(eg.loss).data()[0];
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration,
                detail: format!("loss {loss}"),
            });
        }
        let mut grads = eg.graph.backward(eg.loss).map_err(|e| diverged(iteration, e))?;
        let param_grads: Vec<Tensor> = eg.params.vars.iter().map(|&v| grads.take(v)).collect();
        {
            let mut tensors = net.params_mut();
            flat_step(&mut tensors, &param_grads, &mut velocity, lr, config.momentum)
                .map_err(|e| diverged(iteration, e))?;
        }
        if let Some(rho) = eg.logits {
            let g = grads.take(rho);
            sgd_momentum_step(&mut logits, g.data(), &mut logit_velocity, lr, config.momentum)
                .map_err(|e| diverged(iteration, e))?;
        }
        net.commit_batch_stats(&eg.batch_stats);
        step_seconds += t.elapsed().as_secs_f64();

        if iteration % config.eval_every != 0 {
            continue;
        }
        let t = Instant::now();
        let posterior = DepthPosterior::from_logits(logits.clone()).map_err(|e| diverged(iteration, e))?;
        let elbo = evaluate_elbo_full(&net, &posterior, dataset, prior)
            .map_err(|e| diverged(iteration, e))?;
        eval_seconds += t.elapsed().as_secs_f64();
        evaluations += 1;
        if config.log_every > 0 && iteration % config.log_every == 0 {
            let d = crate::inference::prune_argmax(posterior.probs()).d_opt;
            println!("iter {iteration} elbo {elbo:.6} argmax_depth {d}");
        }
        records.push(EvalPoint {
            iteration,
            objective: elbo,
            alpha: posterior.probs().to_vec(),
        });
        if elbo > best.0 {
            best = (elbo, iteration, net.clone(), posterior);
            stale = 0;
        } else {
            stale += 1;
        }
        if let Some(drop) = config.lr_drop {
            if evaluations == drop.after {
                lr *= drop.factor;
            }
        }
        if stale >= config.patience {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }

    let (best_objective, best_iteration, network, posterior) = best;
    Ok(TrainedModel {
        kind: ModelKind::Ldn,
        network,
        posterior: Some(posterior),
        prior: Some(prior.clone()),
        history: TrainHistory {
            records,
            best_iteration,
            best_objective,
            iterations: iteration,
            stop_reason,
            step_seconds,
            eval_seconds,
        },
        config: config.clone(),
    })
}

/// Trains a plain residual network with exactly `depth` blocks on
/// cross-entropy, early-stopping on the full-train log-likelihood.
pub fn train_ddn(
    dataset: &Dataset,
    depth: usize,
    net_config: NetworkConfig,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    let net_config = NetworkConfig {
        max_depth: depth,
        ..net_config
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = LdnNetwork::init(net_config, &mut rng)?;
    let n = dataset.len();
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut batcher = Batcher::new(n, config.batch_size);
    let mut lr = config.learning_rate;

    let mut step_seconds = 0.0;
    let mut eval_seconds = 0.0;
    let t = Instant::now();
    let first = evaluate_loglik_full(&net, dataset).map_err(|e| diverged(0, e))?;
    eval_seconds += t.elapsed().as_secs_f64();
    let mut records = vec![EvalPoint {
        iteration: 0,
        objective: first,
        alpha: Vec::new(),
    }];
    let mut best = (first, 0, net.clone());
    let mut stale = 0;
    let mut evaluations = 0;
    let mut stop_reason = StopReason::MaxIterations;
    let mut iteration = 0;

    while iteration < config.max_iterations {
        iteration += 1;
        let t = Instant::now();
        let idx = batcher.next(&mut rng);
        let (x, labels) = if batcher.is_full() {
            (dataset.inputs.clone(), dataset.labels.clone())
        } else {
            select_rows(dataset, &idx)
        };
        let (graph, params, loss, stats) =
            build_ddn_graph(&net, &x, &labels, Mode::Train).map_err(|e| diverged(iteration, e))?;
        let value = graph.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration,
                detail: format!("loss {value}"),
            });
        }
        let mut grads = graph.backward(loss).map_err(|e| diverged(iteration, e))?;
        let param_grads: Vec<Tensor> = params.vars.iter().map(|&v| grads.take(v)).collect();
        {
            let mut tensors = net.params_mut();
            flat_step(&mut tensors, &param_grads, &mut velocity, lr, config.momentum)
                .map_err(|e| diverged(iteration, e))?;
        }
        net.commit_batch_stats(&stats);
        step_seconds += t.elapsed().as_secs_f64();

        if iteration % config.eval_every != 0 {
            continue;
        }
        let t = Instant::now();
        let ll = evaluate_loglik_full(&net, dataset).map_err(|e| diverged(iteration, e))?;
        eval_seconds += t.elapsed().as_secs_f64();
        evaluations += 1;
        if config.log_every > 0 && iteration % config.log_every == 0 {
            println!("iter {iteration} loglik {ll:.6} depth {depth}");
        }
        records.push(EvalPoint {
            iteration,
            objective: ll,
            alpha: Vec::new(),
        });
        if ll > best.0 {
            best = (ll, iteration, net.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        if let Some(drop) = config.lr_drop {
            if evaluations == drop.after {
                lr *= drop.factor;
            }
        }
        if stale >= config.patience {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }

    let (best_objective, best_iteration, network) = best;
    Ok(TrainedModel {
        kind: ModelKind::Ddn,
        network,
        posterior: None,
        prior: None,
        history: TrainHistory {
            records,
            best_iteration,
            best_objective,
            iterations: iteration,
            stop_reason,
            step_seconds,
            eval_seconds,
        },
        config: config.clone(),
    })
}
