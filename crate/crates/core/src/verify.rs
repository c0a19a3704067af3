//! Self-check suites run by `capae verify`.

use std::f64::consts::LN_2;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::analytic::{self, DiscreteSystem, EnumerableSystem};
use crate::autodiff::{check_all_ops, Tensor};
use crate::channels::{ChannelKind, ChannelModel};
use crate::error::{Error, Result};
use crate::mine::{MineConfig, MineEstimator};
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Lemma1,
    Gradcheck,
    MineGaussian,
    ChannelStats,
    Baseline,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Lemma1, Suite::Gradcheck, Suite::MineGaussian, Suite::ChannelStats, Suite::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Gradcheck => "gradcheck",
            Suite::MineGaussian => "mine-gaussian",
            Suite::ChannelStats => "channel-stats",
            Suite::Baseline => "baseline",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::Unknown { what: "verification suite", name: s.to_string() })
    }
}

/// One measured quantity against its acceptance band.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    /// Human-readable band, e.g. `< 1e-12`.
    pub expected: String,
    pub passed: bool,
}

impl Check {
    fn below(suite: Suite, name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check { suite: suite.name(), name: name.into(), value, expected: format!("< {limit:e}"), passed: value < limit }
    }

    fn within(suite: Suite, name: impl Into<String>, value: f64, target: f64, tol: f64) -> Self {
        Check {
            suite: suite.name(),
            name: name.into(),
            value,
            expected: format!("{target} ± {tol}"),
            passed: (value - target).abs() <= tol,
        }
    }
}

/// Budgets for the stochastic suites.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub lemma1_instances: usize,
    pub gradcheck_seeds: u64,
    pub mine_steps: usize,
    pub mine_batch: usize,
    pub channel_samples: usize,
    pub oracle_samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            lemma1_instances: 100,
            gradcheck_seeds: 10,
            mine_steps: 5000,
            mine_batch: 256,
            channel_samples: 1_000_000,
            oracle_samples: 100_000,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<Check>> {
    match suite {
        Suite::Lemma1 => lemma1(opts),
        Suite::Gradcheck => gradcheck(opts),
        Suite::MineGaussian => mine_gaussian(opts),
        Suite::ChannelStats => channel_stats(opts),
        Suite::Baseline => baseline(opts),
    }
}

fn lemma1(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = rng::stream(opts.seed, streams::ORACLE);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.lemma1_instances {
        let s = rng.random_range(2..=6);
        let nx = rng.random_range(s..=8);
        let ny = rng.random_range(2..=8);
        let sys = EnumerableSystem::random(&mut rng, s, nx, ny);
        worst = worst.max(analytic::verify_lemma1(&sys)?.gap);
    }
    let mut checks = vec![Check::below(Suite::Lemma1, format!("max gap over {} systems", opts.lemma1_instances), worst, 1e-12)];
    for beta in [-1.5, -0.5, 0.2] {
        let slope = analytic::regularized_loss_slope(beta);
        checks.push(Check::within(Suite::Lemma1, format!("d(loss)/d(MI) at beta={beta}"), slope, -(1.0 + beta), 1e-9));
    }
    Ok(checks)
}

fn gradcheck(opts: &VerifyOptions) -> Result<Vec<Check>> {
    Ok(check_all_ops(opts.gradcheck_seeds)?
        .into_iter()
        .map(|g| Check::below(Suite::Gradcheck, format!("{} ({} seeds)", g.op, g.seeds), g.max_rel_error, 1e-4))
        .collect())
}

/// Trains MINE on `(X, ρX + sqrt(1 − ρ²)Z)` and returns its estimate in bits.
pub fn mine_gaussian_estimate(rho: f64, steps: usize, batch: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, streams::ORACLE);
    let mut draw = |rows: usize| {
        let mut x = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(rows);
        for _ in 0..rows {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            x.push(a);
            y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        (Tensor::matrix(rows, 1, x).expect("shape"), Tensor::matrix(rows, 1, y).expect("shape"))
    };
    let mut mine = MineEstimator::new(1, 1, MineConfig::default(), seed)?;
    for _ in 0..steps {
        let (x, y) = draw(batch);
        mine.train_step(&x, &y)?;
    }
    let eval_batches = 64;
    let (x, y) = draw(eval_batches * 1024);
    Ok(mine.estimate_mi(&x, &y, eval_batches)?.value_bits)
}

/// `−½ ln(1 − ρ²)` in bits.
pub fn gaussian_mi_bits(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln() / LN_2
}

fn mine_gaussian(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let rho = 0.9;
    let corr = mine_gaussian_estimate(rho, opts.mine_steps, opts.mine_batch, opts.seed)?;
    let indep = mine_gaussian_estimate(0.0, opts.mine_steps, opts.mine_batch, opts.seed)?;
    Ok(vec![
        Check::within(Suite::MineGaussian, "rho=0.9 estimate (bits)", corr, gaussian_mi_bits(rho), 0.1),
        Check::below(Suite::MineGaussian, "independent |estimate| (bits)", indep.abs(), 0.05),
    ])
}

fn channel_stats(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let snr_db = 10.0;
    let symbols = opts.channel_samples;
    let mut checks = Vec::new();
    for (i, kind) in [ChannelKind::Awgn, ChannelKind::Uniform, ChannelKind::Rayleigh].into_iter().enumerate() {
        let mut ch = ChannelModel::with_rng(kind, snr_db, rng::stream(rng::derive_seed(opts.seed, i as u64), streams::CHANNEL));
        let real = ch.sample(symbols, 2)?;
        let sigma2 = ch.noise_params().sigma2;
        let power = real.noise.data().iter().map(|v| v * v).sum::<f64>() / symbols as f64;
        checks.push(Check::below(Suite::ChannelStats, format!("{kind} noise power relative error"), (power / sigma2 - 1.0).abs(), 0.01));
        if let Some(h) = &real.fading {
            let gain = h.data().iter().map(|v| v * v).sum::<f64>() / symbols as f64;
            checks.push(Check::below(Suite::ChannelStats, "rayleigh E|h|^2 relative error", (gain - 1.0).abs(), 0.01));
        }
    }
    Ok(checks)
}

fn baseline(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let qam = analytic::qam_constellation(16)?;
    let mi = analytic::discrete_input_mi(&DiscreteSystem::uniform(
        qam.codebook(),
        ChannelKind::Awgn,
        25.0,
        opts.oracle_samples,
        opts.seed,
    ))?;
    let awgn = analytic::awgn_capacity(10.0);
    let ray = analytic::rayleigh_ergodic_capacity(10.0, opts.oracle_samples, opts.seed)?;
    Ok(vec![
        Check::within(Suite::Baseline, "16-QAM MI at 25 dB (bits)", mi.bits, 4.0, 0.01),
        Check {
            suite: Suite::Baseline.name(),
            name: "rayleigh ergodic capacity at 10 dB (bits)".into(),
            value: ray.mean,
            expected: format!("< {awgn:.4}"),
            passed: ray.mean < awgn,
        },
        Check::below(Suite::Baseline, "rayleigh capacity standard error", ray.stderr, 0.01),
    ])
}
