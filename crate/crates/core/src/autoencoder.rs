//! The rate-approaching autoencoder: encoder, channel and decoder trained on
//! `CE − β·I(X;Y)`, with the MI term supplied by a jointly trained MINE
//! statistics network.

use std::f64::consts::LN_2;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Optimizer, ParamSet, Tape, Tensor, Var};
use crate::channels::{apply_realization, ChannelKind, ChannelModel, NoiseParams};
use crate::error::{Error, Result};
use crate::mine::{MiEstimate, MineConfig, MineEstimator};
use crate::nn::{self, Activation, LayerSpec, Network, NetworkSpec, ParamDocument};
use crate::rng::{self, streams};

/// Largest supported `k`; the decoder's output layer has `2^k` units.
pub const MAX_K: u32 = 16;
/// Rows per batch used by [`AutoencoderSystem::evaluate_mi`].
pub const MI_EVAL_BATCH: usize = 1024;
const BLER_CHUNK: usize = 4096;
const WILSON_Z: f64 = 1.959964;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Bits per message.
    pub k: u32,
    /// Complex channel uses per message.
    pub n: usize,
    pub beta: f64,
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_ae: f64,
    pub lr_mine: f64,
    pub seed: u64,
    /// Hidden widths shared by encoder and decoder.
    pub hidden: Vec<usize>,
    pub mine_hidden: Vec<usize>,
    pub mine_steps_per_iter: usize,
    pub ema_decay: f64,
    /// Trials for the report's final BLER; 0 skips it.
    pub eval_trials: usize,
    /// Samples for the report's final MI; 0 skips it.
    pub mi_eval_samples: usize,
    /// MINE refinement steps before each MI evaluation.
    pub mi_finetune_steps: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            k: 4,
            n: 2,
            beta: 0.2,
            channel: ChannelKind::Awgn,
            snr_db: 7.0,
            batch_size: 256,
            iterations: 10_000,
            lr_ae: 1e-3,
            lr_mine: 1e-3,
            seed: 0,
            hidden: vec![64, 64],
            mine_hidden: vec![128, 128],
            mine_steps_per_iter: 1,
            ema_decay: 0.99,
            eval_trials: 10_000,
            mi_eval_samples: 32_768,
            mi_finetune_steps: 500,
        }
    }
}

impl SystemConfig {
    pub fn new(k: u32, n: usize) -> Self {
        SystemConfig { k, n, ..Default::default() }
    }

    /// Alphabet size `M = 2^k`.
    pub fn m(&self) -> usize {
        1usize << self.k
    }

    /// `k / n` bits per channel use.
    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    pub fn mine_config(&self) -> MineConfig {
        MineConfig {
            hidden: self.mine_hidden.clone(),
            activation: Activation::Elu,
            learning_rate: self.lr_mine,
            ema_decay: self.ema_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > MAX_K {
            return Err(Error::config("k", format!("must lie in 1..={MAX_K}")));
        }
        if self.n == 0 {
            return Err(Error::config("n", "must be positive"));
        }
        if !(self.beta > -1.0) || !self.beta.is_finite() {
            return Err(Error::config("beta", "must be finite and greater than -1"));
        }
        if self.snr_db.is_nan() {
            return Err(Error::config("snr_db", "must be a number"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        for (field, lr) in [("lr_ae", self.lr_ae), ("lr_mine", self.lr_mine)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "needs at least one positive width"));
        }
        self.mine_config().validate()
    }
}

pub fn encoder_spec(cfg: &SystemConfig) -> NetworkSpec {
    let mut layers = vec![LayerSpec::embedding(cfg.m(), cfg.hidden[0], Activation::Elu)];
    for w in cfg.hidden.windows(2) {
        layers.push(LayerSpec::dense(w[0], w[1], Activation::Elu));
    }
    layers.push(LayerSpec::dense(*cfg.hidden.last().unwrap(), 2 * cfg.n, Activation::Linear));
    layers.push(LayerSpec::power_norm(2 * cfg.n));
    NetworkSpec::new(layers, rng::derive_seed(cfg.seed, streams::ENCODER_INIT))
}

pub fn decoder_spec(cfg: &SystemConfig) -> NetworkSpec {
    let mut layers = vec![LayerSpec::dense(2 * cfg.n, cfg.hidden[0], Activation::Elu)];
    for w in cfg.hidden.windows(2) {
        layers.push(LayerSpec::dense(w[0], w[1], Activation::Elu));
    }
    layers.push(LayerSpec::dense(*cfg.hidden.last().unwrap(), cfg.m(), Activation::Linear));
    layers.push(LayerSpec::softmax(cfg.m()));
    NetworkSpec::new(layers, rng::derive_seed(cfg.seed, streams::DECODER_INIT))
}

/// One row of the training curves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub ce_nats: f64,
    pub mi_bits: f64,
    pub loss: f64,
}

/// Monte-Carlo block error rate at one SNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlerPoint {
    pub snr_db: f64,
    pub bler: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub trials: usize,
}

impl BlerPoint {
    pub fn from_counts(snr_db: f64, errors: usize, trials: usize) -> Self {
        let (ci_low, ci_high) = wilson_interval(errors, trials);
        BlerPoint { snr_db, bler: errors as f64 / trials as f64, ci_low, ci_high, trials }
    }
}

/// Wilson score 95% interval for `errors / trials`.
pub fn wilson_interval(errors: usize, trials: usize) -> (f64, f64) {
    let n = trials as f64;
    let p = errors as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let low = if errors == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if errors == trials { 1.0 } else { (center + half).min(1.0) };
    (low, high)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub curves: Vec<CurvePoint>,
    /// Alphabet-normalized `M × 2n` codebook after training.
    pub constellation: Tensor,
    pub final_bler: Option<BlerPoint>,
    pub final_mi: Option<MiEstimate>,
}

/// Tape handles of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cross_entropy: Var,
    pub mi_nats: Var,
    pub loss: Var,
}

#[derive(Clone, Debug)]
pub struct AutoencoderSystem {
    config: SystemConfig,
    encoder: Network,
    decoder: Network,
    mine: MineEstimator,
    enc_opt: Optimizer,
    dec_opt: Optimizer,
    messages: ChaCha8Rng,
    channel: ChannelModel,
    iterations_done: usize,
}

/// Checkpoint layout: the resolved config plus prefixed parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: SystemConfig,
    pub params: ParamDocument,
}

impl AutoencoderSystem {
    pub fn new(config: SystemConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Network::new(encoder_spec(&config))?;
        let decoder = Network::new(decoder_spec(&config))?;
        let mine = MineEstimator::new(2 * config.n, 2 * config.n, config.mine_config(), config.seed)?;
        Ok(AutoencoderSystem {
            enc_opt: Optimizer::adam(config.lr_ae),
            dec_opt: Optimizer::adam(config.lr_ae),
            messages: rng::stream(config.seed, streams::MESSAGES),
            channel: ChannelModel::with_rng(config.channel, config.snr_db, rng::stream(config.seed, streams::CHANNEL)),
            iterations_done: 0,
            encoder,
            decoder,
            mine,
            config,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    pub fn mine(&self) -> &MineEstimator {
        &self.mine
    }

    pub fn iterations_done(&self) -> usize {
        self.iterations_done
    }

    /// Codewords for a message batch, normalized to unit power over the batch.
    pub fn encode(&self, s: &[usize]) -> Result<Tensor> {
        self.encoder.infer(&nn::embed_messages(s, self.config.m())?)
    }

    /// Posterior rows `q(s | y)`.
    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        if y.shape().len() != 2 || y.cols() != 2 * self.config.n {
            return Err(Error::Shape { op: "decode", shapes: vec![y.shape().to_vec(), vec![2 * self.config.n]] });
        }
        self.decoder.infer(y)
    }

    /// All `M` codewords as one batch, so the power constraint holds over the
    /// alphabet.
    pub fn export_constellation(&self) -> Tensor {
        let all: Vec<usize> = (0..self.config.m()).collect();
        self.encode(&all).expect("validated encoder")
    }

    /// Received samples reach MINE as `y / sqrt(1 + σ²)`, which keeps the
    /// statistics network's inputs at unit scale for any SNR and leaves the
    /// mutual information unchanged.
    pub fn mine_input_scale(&self, snr_db: f64) -> f64 {
        (1.0 + NoiseParams::from_snr_db(snr_db).sigma2).sqrt().recip()
    }

    fn sample_messages(&mut self, b: usize) -> Vec<usize> {
        let m = self.config.m();
        (0..b).map(|_| self.messages.random_range(0..m)).collect()
    }

    /// Records `CE − β·I` for messages `s` on `tape`. The channel draw comes
    /// from the system's stream and MINE parameters enter as constants.
    pub fn combined_loss(&mut self, tape: &mut Tape, s: &[usize]) -> Result<LossTerms> {
        let enc = self.encoder.bind(tape, true);
        let dec = self.decoder.bind(tape, true);
        let (x, y) = self.forward_to_channel(tape, &enc, s)?;
        self.loss_from(tape, &dec, s, x, y)
    }

    fn forward_to_channel(&mut self, tape: &mut Tape, enc: &nn::Bound, s: &[usize]) -> Result<(Var, Var)> {
        let onehot = tape.constant(nn::embed_messages(s, self.config.m())?);
        let x = self.encoder.forward(tape, enc, onehot)?;
        let real = self.channel.sample(s.len(), 2 * self.config.n)?;
        let y = apply_realization(tape, x, &real)?;
        Ok((x, y))
    }

    fn loss_from(&mut self, tape: &mut Tape, dec: &nn::Bound, s: &[usize], x: Var, y: Var) -> Result<LossTerms> {
        let b = s.len();
        let logits = self.decoder.forward_logits(tape, dec, y)?;
        let log_q = tape.log_softmax_rows(logits)?;
        let onehot = tape.constant(nn::embed_messages(s, self.config.m())?);
        let picked = tape.mul(log_q, onehot)?;
        let total = tape.sum(picked)?;
        let cross_entropy = tape.scale(total, -1.0 / b as f64)?;

        let frozen = self.mine.bind(tape, false);
        let perm = self.mine.permutation(b);
        let y_scaled = tape.scale(y, self.mine_input_scale(self.config.snr_db))?;
        let mi_nats = self.mine.dv_objective(tape, &frozen, x, y_scaled, &perm)?.objective;
        let loss = if self.config.beta == 0.0 {
            cross_entropy
        } else {
            let weighted = tape.scale(mi_nats, self.config.beta)?;
            tape.sub(cross_entropy, weighted)?
        };
        Ok(LossTerms { cross_entropy, mi_nats, loss })
    }

    /// Runs `config.iterations` alternating MINE ascent and autoencoder
    /// descent steps.
    pub fn train(&mut self) -> Result<TrainReport> {
        let iterations = self.config.iterations;
        let b = self.config.batch_size;
        let mut curves = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let it = self.iterations_done;
            let s = self.sample_messages(b);
            let mut tape = Tape::new();
            let enc = self.encoder.bind(&mut tape, true);
            let dec = self.decoder.bind(&mut tape, true);
            let (x, y) = self.forward_to_channel(&mut tape, &enc, &s)?;
            if !tape.value(y).is_finite() {
                return Err(Error::Diverged { iteration: it, what: "channel output" });
            }

            let y_scale = self.mine_input_scale(self.config.snr_db);
            for _ in 0..self.config.mine_steps_per_iter {
                let (xv, yv) = (tape.value(x).clone(), tape.value(y).map(|v| v * y_scale));
                self.mine.train_step(&xv, &yv).map_err(|_| Error::Diverged { iteration: it, what: "MINE objective" })?;
            }

            // Encoder parameters are unchanged since the forward pass, so x
            // and y on this tape are the recomputed forward.
            let terms = self.loss_from(&mut tape, &dec, &s, x, y)?;
            let ce = tape.value(terms.cross_entropy).item();
            let mi = tape.value(terms.mi_nats).item();
            let loss = tape.value(terms.loss).item();
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: it, what: "loss" });
            }
            let grads = tape.backward(terms.loss)?;
            let enc_grads = enc.gradients(&grads, &self.encoder.params);
            let dec_grads = dec.gradients(&grads, &self.decoder.params);
            self.enc_opt.step(&mut self.encoder.params, &enc_grads)?;
            self.dec_opt.step(&mut self.decoder.params, &dec_grads)?;

            curves.push(CurvePoint { iteration: it, ce_nats: ce, mi_bits: mi / LN_2, loss });
            self.iterations_done += 1;
        }

        let final_bler = match self.config.eval_trials {
            0 => None,
            t => Some(self.evaluate_bler(&[self.config.snr_db], t)?[0]),
        };
        let final_mi = match self.config.mi_eval_samples {
            0 => None,
            samples => Some(self.evaluate_mi(self.config.snr_db, samples)?),
        };
        Ok(TrainReport { curves, constellation: self.export_constellation(), final_bler, final_mi })
    }

    fn count_errors(&self, codebook: &Tensor, snr_db: f64, trials: usize, seed: u64) -> Result<usize> {
        let m = self.config.m();
        let mut msg_rng = rng::stream(seed, streams::MESSAGES);
        let mut channel = ChannelModel::with_rng(self.config.channel, snr_db, rng::stream(seed, streams::CHANNEL));
        let mut errors = 0;
        let mut remaining = trials;
        while remaining > 0 {
            let rows = remaining.min(BLER_CHUNK);
            remaining -= rows;
            let s: Vec<usize> = (0..rows).map(|_| msg_rng.random_range(0..m)).collect();
            let (y, _) = channel.transmit_values(&codebook.select_rows(&s))?;
            let post = self.decoder.infer(&y)?;
            errors += s.iter().enumerate().filter(|&(r, &sr)| argmax(post.row(r)) != sr).count();
        }
        Ok(errors)
    }

    /// Monte-Carlo `P[argmax q(s|y) ≠ s]` at each SNR with the codebook fixed.
    /// SNR points run in parallel on independent streams.
    pub fn evaluate_bler(&self, snrs_db: &[f64], trials: usize) -> Result<Vec<BlerPoint>> {
        if trials == 0 {
            return Err(Error::input("BLER evaluation needs at least one trial"));
        }
        let codebook = self.export_constellation();
        let base = rng::derive_seed(self.config.seed, streams::EVAL_BLER);
        snrs_db
            .par_iter()
            .enumerate()
            .map(|(i, &snr)| {
                let errors = self.count_errors(&codebook, snr, trials, rng::derive_seed(base, i as u64))?;
                Ok(BlerPoint::from_counts(snr, errors, trials))
            })
            .collect()
    }

    /// MI between codewords and channel outputs at `snr_db`, in bits per
    /// message and clipped to `[0, k]`. A copy of the statistics network is first
    /// refined on fresh samples at that SNR, then evaluated on another fresh
    /// set in batches of [`MI_EVAL_BATCH`].
    pub fn evaluate_mi(&self, snr_db: f64, n_samples: usize) -> Result<MiEstimate> {
        let n_batches = n_samples / MI_EVAL_BATCH;
        if n_batches == 0 {
            return Err(Error::input(format!("evaluate_mi needs at least {MI_EVAL_BATCH} samples")));
        }
        let seed = rng::derive_path(self.config.seed, &[streams::EVAL_MI, snr_db.to_bits()]);
        let codebook = self.export_constellation();
        let m = self.config.m();
        let mut msg_rng = rng::stream(seed, streams::MESSAGES);
        let mut channel = ChannelModel::with_rng(self.config.channel, snr_db, rng::stream(seed, streams::CHANNEL));
        let y_scale = self.mine_input_scale(snr_db);
        let mut draw = |rows: usize| -> Result<(Tensor, Tensor)> {
            let s: Vec<usize> = (0..rows).map(|_| msg_rng.random_range(0..m)).collect();
            let x = codebook.select_rows(&s);
            let (y, _) = channel.transmit_values(&x)?;
            Ok((x, y.map(|v| v * y_scale)))
        };

        let mut mine = self.mine.clone().with_clip_bits(self.config.k as f64);
        for _ in 0..self.config.mi_finetune_steps {
            let (x, y) = draw(self.config.batch_size)?;
            mine.train_step(&x, &y)?;
        }
        let (x, y) = draw(n_batches * MI_EVAL_BATCH)?;
        let est = mine.estimate_mi(&x, &y, n_batches)?;
        // MI is non-negative, so flooring the bound at zero keeps it a bound.
        Ok(MiEstimate::from_nats(est.value_nats.max(0.0), est.batch_size, est.iteration))
    }

    /// True iff the BLER at the training SNR is below `p_star`.
    pub fn is_achievable(&self, p_star: f64, trials: usize) -> Result<bool> {
        Ok(self.evaluate_bler(&[self.config.snr_db], trials)?[0].bler < p_star)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = ParamSet::new();
        for (prefix, net) in [("encoder", &self.encoder), ("decoder", &self.decoder), ("mine", self.mine.network())] {
            for (name, t) in &net.params {
                params.insert(format!("{prefix}.{name}"), t.clone());
            }
        }
        Checkpoint { config: self.config.clone(), params: nn::params_to_document(&params) }
    }

    /// Rebuilds a system from a checkpoint. Optimizer moments and generator
    /// positions start fresh.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut sys = AutoencoderSystem::new(ck.config.clone())?;
        let all = nn::params_from_document(&ck.params)?;
        let take = |prefix: &str| -> ParamSet {
            all.iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
                .collect()
        };
        sys.encoder = Network::with_params(sys.encoder.spec.clone(), take("encoder."))?;
        sys.decoder = Network::with_params(sys.decoder.spec.clone(), take("decoder."))?;
        let mine_spec = sys.mine.network().spec.clone();
        *sys.mine.network_mut() = Network::with_params(mine_spec, take("mine."))?;
        Ok(sys)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ck)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `iteration,ce_nats,mi_bits,loss`.
pub fn write_curves_csv(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    write_rows(path, curves)
}

/// `snr_db,bler,ci_low,ci_high,trials`.
pub fn write_bler_csv(path: &Path, points: &[BlerPoint]) -> Result<()> {
    write_rows(path, points)
}

/// `message,re_1,im_1,...,re_n,im_n`.
pub fn write_constellation_csv(path: &Path, constellation: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = constellation.cols() / 2;
    let mut header = vec!["message".to_string()];
    for j in 1..=n {
        header.push(format!("re_{j}"));
        header.push(format!("im_{j}"));
    }
    w.write_record(&header)?;
    for r in 0..constellation.rows() {
        let mut rec = vec![r.to_string()];
        rec.extend(constellation.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
