//! Residual network whose every depth is read out by one shared output block.
//!
//! `a_0 = f_0(x)`, `a_i = a_{i-1} + f_i(a_{i-1})` with
//! `f_i = batchnorm(relu(affine(·)))`, and the class log-probabilities at
//! depth `i` are `log_softmax(f_{D+1}(a_i))`. A network of depth `d` is the
//! prefix that stops at `a_d`, so one forward pass yields all `D + 1`
//! predictions.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{BatchNormState, BatchStats, Mode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub max_depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub classes: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.input_dim == 0 {
            return Err(Error::Parameter(format!(
                "width {} and input dim {} must be positive",
                self.width, self.input_dim
            )));
        }
        if self.classes < 2 {
            return Err(Error::Parameter(format!("{} classes, need at least 2", self.classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        let bias = (0..fan_out).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], weight).expect("shape"),
            bias: Tensor::vector(bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub linear: Linear,
    pub bn_scale: Tensor,
    pub bn_shift: Tensor,
    pub bn_state: BatchNormState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdnNetwork {
    config: NetworkConfig,
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub output: Linear,
}

/// Per-depth activations and class log-probabilities from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Tensor>,
    /// `log_probs[i]` is `n × C` for depth `i`.
    pub log_probs: Vec<Tensor>,
    /// Times each residual block ran during the pass.
    pub block_calls: Vec<usize>,
}

impl ForwardTrace {
    pub fn depths(&self) -> usize {
        self.log_probs.len()
    }

    pub fn probs(&self) -> Vec<Tensor> {
        self.log_probs.iter().map(exp_tensor).collect()
    }
}

pub(crate) fn exp_tensor(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.exp()).collect()).expect("shape")
}

/// Graph handles of every network parameter, in [`LdnNetwork::params`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Which depths the output block reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    AllDepths,
    FinalOnly,
}

/// Result of building the network on a graph.
#[derive(Debug)]
pub struct GraphForward {
    pub activations: Vec<Var>,
    /// `(d+1)·n × C` log-probabilities, depth-major; just `n × C` for
    /// [`Readout::FinalOnly`].
    pub log_probs: Var,
    pub batch_stats: Vec<BatchStats>,
    pub block_calls: Vec<usize>,
}

impl LdnNetwork {
    pub fn init<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let input = Linear::init(config.input_dim, w, rng);
        let blocks = (0..config.max_depth)
            .map(|_| ResidualBlock {
                linear: Linear::init(w, w, rng),
                bn_scale: Tensor::filled(&[w], 1.0),
                bn_shift: Tensor::zeros(&[w]),
                bn_state: BatchNormState::new(w),
            })
            .collect();
        let output = Linear::init(w, config.classes, rng);
        Ok(Self {
            config,
            input,
            blocks,
            output,
        })
    }

    /// Assembles a network from parts, checking every shape against `config`.
    pub fn from_parts(
        config: NetworkConfig,
        input: Linear,
        blocks: Vec<ResidualBlock>,
        output: Linear,
    ) -> Result<Self> {
        config.validate()?;
        let net = Self {
            config,
            input,
            blocks,
            output,
        };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = self.config;
        let w = c.width;
        let mismatch = |what: &str, got: &[usize], want: &[usize]| -> Result<()> {
            if got == want {
                Ok(())
            } else {
                Err(Error::Dimension {
                    op: "network",
                    detail: format!("{what} has shape {got:?}, expected {want:?}"),
                })
            }
        };
        mismatch("input weight", self.input.weight.shape(), &[c.input_dim, w])?;
        mismatch("input bias", self.input.bias.shape(), &[w])?;
        if self.blocks.len() != c.max_depth {
            return Err(Error::Dimension {
                op: "network",
                detail: format!("{} blocks for max depth {}", self.blocks.len(), c.max_depth),
            });
        }
        for b in &self.blocks {
            mismatch("block weight", b.linear.weight.shape(), &[w, w])?;
            mismatch("block bias", b.linear.bias.shape(), &[w])?;
            mismatch("bn scale", b.bn_scale.shape(), &[w])?;
            mismatch("bn shift", b.bn_shift.shape(), &[w])?;
            mismatch("running mean", b.bn_state.running_mean.shape(), &[w])?;
            mismatch("running var", b.bn_state.running_var.shape(), &[w])?;
            if b.bn_state.running_var.data().iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Parameter("running variance must be positive".into()));
            }
        }
        mismatch("output weight", self.output.weight.shape(), &[w, c.classes])?;
        mismatch("output bias", self.output.bias.shape(), &[c.classes])?;
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn max_depth(&self) -> usize {
        self.config.max_depth
    }

    /// Trainable tensors in a fixed order: input block, then per block
    /// (weight, bias, bn scale, bn shift), then output block.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input.weight, &self.input.bias];
        for b in &self.blocks {
            out.extend([&b.linear.weight, &b.linear.bias, &b.bn_scale, &b.bn_shift]);
        }
        out.extend([&self.output.weight, &self.output.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input.weight, &mut self.input.bias];
        for b in &mut self.blocks {
            out.extend([
                &mut b.linear.weight,
                &mut b.linear.bias,
                &mut b.bn_scale,
                &mut b.bn_shift,
            ]);
        }
        out.extend([&mut self.output.weight, &mut self.output.bias]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.params().into_iter().map(|t| graph.param(t.clone())).collect(),
        }
    }

    /// Builds the forward pass up to `depth` (inclusive) on `graph`.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        params: &BoundParams,
        x: Var,
        depth: usize,
        mode: Mode,
        readout: Readout,
    ) -> Result<GraphForward> {
        if depth > self.config.max_depth {
            return Err(Error::Range {
                what: "depth",
                value: depth,
                max: self.config.max_depth,
            });
        }
        if !graph.value(x).is_finite() {
            return Err(Error::Numeric("network input".into()));
        }
        let v = &params.vars;
        let mut a = graph.affine(x, v[0], v[1])?;
        check_activation(graph, a, 0)?;
        let mut activations = vec![a];
        let mut batch_stats = Vec::new();
        let mut block_calls = vec![0; self.config.max_depth];
        for (i, block) in self.blocks.iter().take(depth).enumerate() {
            let base = 2 + 4 * i;
            let h = graph.affine(a, v[base], v[base + 1])?;
            let h = graph.relu(h);
            let (h, stats) =
                graph.batch_norm(h, v[base + 2], v[base + 3], &block.bn_state, mode)?;
            block_calls[i] += 1;
            if let Some(stats) = stats {
                batch_stats.push(stats);
            }
            a = graph.add(a, h)?;
            check_activation(graph, a, i + 1)?;
            activations.push(a);
        }
        let out = 2 + 4 * self.config.max_depth;
        let stacked = match readout {
            Readout::AllDepths => graph.concat_rows(&activations)?,
            Readout::FinalOnly => a,
        };
        let logits = graph.affine(stacked, v[out], v[out + 1])?;
        let log_probs = graph.log_softmax(logits)?;
        Ok(GraphForward {
            activations,
            log_probs,
            batch_stats,
            block_calls,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn commit_batch_stats(&mut self, stats: &[BatchStats]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.bn_state.update(s);
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.config.input_dim || x.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "forward",
                detail: format!(
                    "input shape {:?}, network expects {} columns",
                    x.shape(),
                    self.config.input_dim
                ),
            });
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, depth: usize, mode: Mode) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut graph = Graph::new();
        let params = self.bind(&mut graph);
        let xv = graph.constant(x.clone());
        let fwd = self.forward_graph(&mut graph, &params, xv, depth, mode, Readout::AllDepths)?;
        let n = x.rows();
        let c = self.config.classes;
        let all = graph.value(fwd.log_probs).data();
        let log_probs = (0..=depth)
            .map(|i| Tensor::new(vec![n, c], all[i * n * c..(i + 1) * n * c].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardTrace {
            activations: fwd
                .activations
                .iter()
                .map(|&v| graph.value(v).clone())
                .collect(),
            log_probs,
            block_calls: fwd.block_calls,
        })
    }

    /// Every depth's prediction from one pass through all `D` blocks.
    ///
    /// Running statistics are not touched; train-mode statistics are
    /// discarded here and are committed only by the trainer.
    pub fn forward_all_depths(&self, x: &Tensor, mode: Mode) -> Result<ForwardTrace> {
        self.run(x, self.config.max_depth, mode)
    }

    /// Log-probabilities for depths `0..=d_opt`, running only blocks `1..=d_opt`.
    pub fn forward_truncated(&self, x: &Tensor, d_opt: usize, mode: Mode) -> Result<Vec<Tensor>> {
        if d_opt > self.config.max_depth {
            return Err(Error::Range {
                what: "cutoff depth",
                value: d_opt,
                max: self.config.max_depth,
            });
        }
        Ok(self.run(x, d_opt, mode)?.log_probs)
    }

    /// Log-probabilities at the deepest depth only, as a fixed-depth network.
    pub fn forward_final(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let mut graph = Graph::new();
        let params = self.bind(&mut graph);
        let xv = graph.constant(x.clone());
        let depth = self.config.max_depth;
        let fwd = self.forward_graph(&mut graph, &params, xv, depth, mode, Readout::FinalOnly)?;
        Ok(graph.value(fwd.log_probs).clone())
    }
}

fn check_activation(graph: &Graph, a: Var, depth: usize) -> Result<()> {
    if graph.value(a).is_finite() {
        Ok(())
    } else {
        Err(Error::ActivationDivergence(depth))
    }
}

/// `L[n, i] = log p(y_n | depth i)` gathered from a trace.
pub fn per_depth_loglik(trace: &ForwardTrace, labels: &[usize]) -> Result<Tensor> {
    let depths = trace.depths();
    let n = labels.len();
    let mut out = vec![0.0; n * depths];
    for (i, lp) in trace.log_probs.iter().enumerate() {
        if lp.rows() != n {
            return Err(Error::Dimension {
                op: "per_depth_loglik",
                detail: format!("{n} labels for {} rows", lp.rows()),
            });
        }
        let c = lp.cols();
        for (row, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Input(format!("label {y} at row {row} with {c} classes")));
            }
            out[row * depths + i] = lp.get(row, y);
        }
    }
    Tensor::new(vec![n, depths], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(max_depth: usize) -> NetworkConfig {
        NetworkConfig {
            max_depth,
            width: 5,
            input_dim: 2,
            classes: 3,
        }
    }

    fn net(max_depth: usize, seed: u64) -> LdnNetwork {
        LdnNetwork::init(config(max_depth), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn inputs(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(vec![n, 2], data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(net(3, 9), net(3, 9));
        assert_ne!(net(3, 9), net(3, 10));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let cfg = NetworkConfig {
            max_depth: 4,
            width: 20,
            input_dim: 2,
            classes: 2,
        };
        let n = LdnNetwork::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bound = 1.0 / 2f64.sqrt();
        assert!(n.input.weight.max_abs() <= bound);
        assert!(n.input.weight.max_abs() > 0.5 * bound);
        for b in &n.blocks {
            assert!(b.linear.weight.max_abs() <= 1.0 / 20f64.sqrt());
            assert!(b.bn_scale.data().iter().all(|&v| v == 1.0));
            assert!(b.bn_shift.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = config(1);
        c.classes = 1;
        assert!(LdnNetwork::init(c, &mut rng).is_err());
        let mut c = config(1);
        c.width = 0;
        assert!(LdnNetwork::init(c, &mut rng).is_err());
    }

    #[test]
    fn depth_zero_is_linear() {
        let n = net(0, 3);
        assert!(n.blocks.is_empty());
        let x = inputs(4, 1);
        let trace = n.forward_all_depths(&x, Mode::Eval).unwrap();
        assert_eq!(trace.depths(), 1);
        // f_1(f_0(x)) collapsed to one affine map
        let w = crate::ops::matmul(&n.input.weight, &n.output.weight).unwrap();
        let b = crate::ops::affine(
            &Tensor::new(vec![1, 5], n.input.bias.data().to_vec()).unwrap(),
            &n.output.weight,
            &n.output.bias,
        )
        .unwrap();
        let logits = crate::ops::affine(&x, &w, &Tensor::vector(b.into_data())).unwrap();
        let want = crate::ops::log_softmax(&logits).unwrap();
        for (a, b) in trace.log_probs[0].data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residuals_give_identical_depths() {
        let mut n = net(4, 5);
        for b in &mut n.blocks {
            b.linear.weight = Tensor::zeros(b.linear.weight.shape());
            b.bn_scale = Tensor::zeros(b.bn_scale.shape());
        }
        let trace = n.forward_all_depths(&inputs(6, 2), Mode::Train).unwrap();
        for lp in &trace.log_probs[1..] {
            assert_eq!(lp.data(), trace.log_probs[0].data());
        }
        for a in &trace.activations[1..] {
            assert_eq!(a.data(), trace.activations[0].data());
        }
    }

    #[test]
    fn trace_matches_sequential_application() {
        let n = net(3, 11);
        let x = inputs(4, 12);
        for mode in [Mode::Train, Mode::Eval] {
            let trace = n.forward_all_depths(&x, mode).unwrap();
            let mut a = crate::ops::affine(&x, &n.input.weight, &n.input.bias).unwrap();
            for b in &n.blocks {
                let h = crate::ops::affine(&a, &b.linear.weight, &b.linear.bias).unwrap();
                let h = crate::ops::relu(&h);
                let h = crate::ops::batch_norm(&h, &b.bn_scale, &b.bn_shift, &b.bn_state, mode)
                    .unwrap()
                    .y;
                let sum = a.data().iter().zip(h.data()).map(|(p, q)| p + q).collect();
                a = Tensor::new(a.shape().to_vec(), sum).unwrap();
            }
            for (p, q) in trace.activations[3].data().iter().zip(a.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_block_runs_once() {
        let n = net(6, 1);
        let trace = n.forward_all_depths(&inputs(5, 1), Mode::Train).unwrap();
        assert_eq!(trace.block_calls, vec![1; 6]);
    }

    #[test]
    fn log_prob_rows_normalize() {
        let trace = net(3, 4).forward_all_depths(&inputs(7, 3), Mode::Eval).unwrap();
        for lp in &trace.log_probs {
            for r in 0..lp.rows() {
                let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncated_is_bitwise_prefix() {
        let n = net(10, 21);
        let x = inputs(9, 22);
        let full = n.forward_all_depths(&x, Mode::Eval).unwrap();
        let cut = n.forward_truncated(&x, 3, Mode::Eval).unwrap();
        assert_eq!(cut.len(), 4);
        for (a, b) in cut.iter().zip(&full.log_probs) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(n.forward_truncated(&x, 10, Mode::Eval).unwrap().len(), 11);
        assert_eq!(n.forward_truncated(&x, 0, Mode::Eval).unwrap().len(), 1);
        assert!(matches!(
            n.forward_truncated(&x, 11, Mode::Eval),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn non_finite_activation_names_depth() {
        let mut n = net(3, 2);
        n.blocks[1].bn_shift.data_mut()[0] = f64::INFINITY;
        assert!(matches!(
            n.forward_all_depths(&inputs(3, 0), Mode::Eval),
            Err(Error::ActivationDivergence(2))
        ));
    }

    #[test]
    fn per_depth_loglik_examples() {
        let uniform = ForwardTrace {
            activations: vec![],
            log_probs: vec![Tensor::filled(&[3, 4], -(4f64.ln())); 2],
            block_calls: vec![1],
        };
        let l = per_depth_loglik(&uniform, &[0, 3, 1]).unwrap();
        assert!(l.data().iter().all(|&v| (v + 4f64.ln()).abs() < 1e-15));

        let two = ForwardTrace {
            activations: vec![],
            log_probs: vec![Tensor::from_rows(&[[0.9f64.ln(), 0.1f64.ln()]]).unwrap()],
            block_calls: vec![],
        };
        assert_eq!(per_depth_loglik(&two, &[0]).unwrap().data(), &[0.9f64.ln()]);
        assert!(matches!(per_depth_loglik(&two, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn per_depth_loglik_matches_lookup() {
        let n = net(4, 8);
        let x = inputs(6, 9);
        let labels = [0, 2, 1, 1, 0, 2];
        let trace = n.forward_all_depths(&x, Mode::Eval).unwrap();
        let l = per_depth_loglik(&trace, &labels).unwrap();
        for (row, &y) in labels.iter().enumerate() {
            for d in 0..=4 {
                assert_eq!(l.get(row, d), trace.log_probs[d].get(row, y));
            }
        }
    }
}
