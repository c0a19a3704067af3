//! Mutual information neural estimation.
//!
//! A statistics network `T(x, y)` is trained by gradient ascent on the
//! Donsker–Varadhan bound
//!
//! ```text
//! I(X;Y) ≥ E_joint[T] − ln E_marginal[e^T]
//! ```
//!
//! where product-of-marginals samples come from shuffling the `y` rows of the
//! batch. The gradient of the log-denominator uses an exponential moving
//! average of `E[e^T]` to reduce its minibatch bias.

use std::f64::consts::LN_2;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Optimizer, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Network, NetworkSpec};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    /// EMA decay for the denominator; `1.0` disables the correction.
    pub ema_decay: f64,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig { hidden: vec![128, 128], activation: Activation::Elu, learning_rate: 1e-3, ema_decay: 0.99 }
    }
}

impl MineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("mine_hidden", "widths must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("lr_mine", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A lower-bound MI estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value_nats: f64,
    pub value_bits: f64,
    pub batch_size: usize,
    pub iteration: usize,
}

impl MiEstimate {
    pub fn from_nats(value_nats: f64, batch_size: usize, iteration: usize) -> Self {
        MiEstimate { value_nats, value_bits: value_nats / LN_2, batch_size, iteration }
    }
}

/// Tape handles of one DV evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DvTerms {
    /// `mean T(x, y)` over joint pairs.
    pub joint_mean: Var,
    /// `ln mean exp T(x, y_shuffled)`.
    pub marginal_log_mean_exp: Var,
    /// `joint_mean − marginal_log_mean_exp`.
    pub objective: Var,
}

#[derive(Clone, Debug)]
pub struct MineEstimator {
    config: MineConfig,
    x_width: usize,
    y_width: usize,
    net: Network,
    opt: Optimizer,
    log_ema: Option<f64>,
    rng: ChaCha8Rng,
    clip_nats: Option<f64>,
    history: Vec<MiEstimate>,
}

/// Permutation matrix `P` with `(P·y)[i] = y[perm[i]]`.
fn permutation_matrix(perm: &[usize]) -> Tensor {
    let b = perm.len();
    let mut p = Tensor::zeros(&[b, b]);
    for (i, &j) in perm.iter().enumerate() {
        p.data_mut()[i * b + j] = 1.0;
    }
    p
}

impl MineEstimator {
    /// Statistics network over `[x | y]` rows, seeded from `seed`.
    pub fn new(x_width: usize, y_width: usize, config: MineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = NetworkSpec::mlp(
            x_width + y_width,
            &config.hidden,
            1,
            config.activation,
            rng::derive_seed(seed, rng::streams::MINE_INIT),
        );
        let net = Network::new(spec)?;
        let opt = Optimizer::adam(config.learning_rate);
        Ok(MineEstimator {
            x_width,
            y_width,
            net,
            opt,
            log_ema: None,
            rng: rng::stream(seed, rng::streams::MINE_SHUFFLE),
            clip_nats: None,
            history: Vec::new(),
            config,
        })
    }

    /// Caps reported [`estimate_mi`](Self::estimate_mi) values at `bits`.
    pub fn with_clip_bits(mut self, bits: f64) -> Self {
        self.clip_nats = Some(bits * LN_2);
        self
    }

    pub fn config(&self) -> &MineConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Step size used by subsequent [`train_step`](Self::train_step) calls.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    pub fn history(&self) -> &[MiEstimate] {
        &self.history
    }

    pub fn steps(&self) -> usize {
        self.history.len()
    }

    /// Current EMA of `mean exp T` on marginal samples, once initialized.
    pub fn ema(&self) -> Option<f64> {
        self.log_ema.map(f64::exp)
    }

    /// Fresh uniform permutation of `0..b` from the estimator's stream.
    pub fn permutation(&mut self, b: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut self.rng);
        perm
    }

    /// Binds `T`'s parameters; frozen when `trainable` is false.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.net.bind(tape, trainable)
    }

    /// Records the DV objective for row-aligned joint samples `(x, y)`;
    /// marginal samples pair `x[i]` with `y[perm[i]]`.
    pub fn dv_objective(&self, tape: &mut Tape, bound: &Bound, x: Var, y: Var, perm: &[usize]) -> Result<DvTerms> {
        let (xv, yv) = (tape.value(x), tape.value(y));
        let b = xv.rows();
        if b < 2 {
            return Err(Error::input("DV objective needs a batch of at least 2 rows"));
        }
        if yv.rows() != b || perm.len() != b || xv.cols() != self.x_width || yv.cols() != self.y_width {
            return Err(Error::Shape {
                op: "dv_objective",
                shapes: vec![xv.shape().to_vec(), yv.shape().to_vec(), vec![perm.len()]],
            });
        }
        let p = tape.constant(permutation_matrix(perm));
        let y_shuffled = tape.matmul(p, y)?;
        let joint = tape.concat(&[x, y], 1)?;
        let marginal = tape.concat(&[x, y_shuffled], 1)?;
        let both = tape.concat(&[joint, marginal], 0)?;
        let t = self.net.forward(tape, bound, both)?;
        let t_joint = tape.slice(t, 0, 0, b)?;
        let t_marg = tape.slice(t, 0, b, 2 * b)?;
        let joint_mean = tape.mean(t_joint)?;
        let t_marg = tape.reshape(t_marg, &[1, b])?;
        let lse = tape.log_sum_exp_rows(t_marg)?;
        let lse = tape.reshape(lse, &[1])?;
        let ln_b = tape.constant(Tensor::scalar((b as f64).ln()));
        let marginal_log_mean_exp = tape.sub(lse, ln_b)?;
        let objective = tape.sub(joint_mean, marginal_log_mean_exp)?;
        Ok(DvTerms { joint_mean, marginal_log_mean_exp, objective })
    }

    fn check_batch(&self, x: &Tensor, y: &Tensor) -> Result<()> {
        if x.rows() != y.rows() {
            return Err(Error::Shape { op: "mine", shapes: vec![x.shape().to_vec(), y.shape().to_vec()] });
        }
        if x.rows() < 2 {
            return Err(Error::input("MINE needs a batch of at least 2 rows"));
        }
        Ok(())
    }

    /// One ascent step on `T`. Returns the uncorrected objective of the batch.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor) -> Result<MiEstimate> {
        self.check_batch(x, y)?;
        let perm = self.permutation(x.rows());
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let dv = self.dv_objective(&mut tape, &bound, xv, yv, &perm)?;
        let value = tape.value(dv.objective).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("MINE objective".into()));
        }

        let alpha = self.config.ema_decay;
        let loss = if alpha >= 1.0 {
            tape.scale(dv.objective, -1.0)?
        } else {
            let batch_lme = tape.value(dv.marginal_log_mean_exp).item();
            let log_ema = match self.log_ema {
                None => batch_lme,
                Some(prev) if alpha == 0.0 => {
                    let _ = prev;
                    batch_lme
                }
                Some(prev) => log_sum_exp(&[alpha.ln() + prev, (1.0 - alpha).ln() + batch_lme]),
            };
            self.log_ema = Some(log_ema);
            // ∇ of exp(lme − ln ema) is E[e^T ∇T] / ema, the corrected denominator gradient.
            let shift = tape.constant(Tensor::scalar(log_ema));
            let ratio = tape.sub(dv.marginal_log_mean_exp, shift)?;
            let ratio = tape.exp(ratio)?;
            let surrogate = tape.sub(dv.joint_mean, ratio)?;
            tape.scale(surrogate, -1.0)?
        };

        let grads = tape.backward(loss)?;
        let grads = bound.gradients(&grads, &self.net.params);
        self.opt.step(&mut self.net.params, &grads)?;

        let est = MiEstimate::from_nats(value, x.rows(), self.history.len());
        self.history.push(est);
        Ok(est)
    }

    /// DV objective of one batch without updating `T`.
    pub fn evaluate_batch(&mut self, x: &Tensor, y: &Tensor) -> Result<f64> {
        self.check_batch(x, y)?;
        let perm = self.permutation(x.rows());
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let dv = self.dv_objective(&mut tape, &bound, xv, yv, &perm)?;
        Ok(tape.value(dv.objective).item())
    }

    /// Averages the DV objective over `n_eval_batches` equal slices of the
    /// given joint samples, without training. Clipped if configured.
    pub fn estimate_mi(&mut self, x: &Tensor, y: &Tensor, n_eval_batches: usize) -> Result<MiEstimate> {
        if n_eval_batches == 0 || x.rows() == 0 {
            return Err(Error::input("estimate_mi needs at least one evaluation batch"));
        }
        let batch = x.rows() / n_eval_batches;
        if batch < 2 {
            return Err(Error::input("too few samples for the requested evaluation batches"));
        }
        let mut total = 0.0;
        for i in 0..n_eval_batches {
            let (s, e) = (i * batch, (i + 1) * batch);
            total += self.evaluate_batch(&x.row_range(s, e), &y.row_range(s, e))?;
        }
        let mut nats = total / n_eval_batches as f64;
        if let Some(c) = self.clip_nats {
            nats = nats.min(c);
        }
        Ok(MiEstimate::from_nats(nats, batch, self.history.len()))
    }
}
