//! Reference values: closed-form and Monte-Carlo capacities, QAM baselines,
//! discrete-input mutual information, and an exact check of the
//! cross-entropy decomposition `CE = H(S) − I(X;Y) + E_y[KL(p(x|y) ‖ q(x|y))]`.

use std::f64::consts::LN_2;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tensor};
use crate::channels::{log_likelihood, snr_linear, ChannelKind, ChannelModel, NoiseParams};
use crate::error::{Error, Result};
use crate::rng;

/// `log2(1 + SNR)` bits per channel use.
pub fn awgn_capacity(snr_db: f64) -> f64 {
    (1.0 + snr_linear(snr_db)).log2()
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl McEstimate {
    fn from_values(values: impl Iterator<Item = f64>) -> Self {
        // Welford
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            let d = v - mean;
            mean += d / n as f64;
            m2 += d * (v - mean);
        }
        let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        McEstimate { mean, stderr: (var / n as f64).sqrt(), samples: n }
    }
}

pub const MIN_RAYLEIGH_SAMPLES: usize = 10_000;

/// `E[log2(1 + α²·SNR)]` with `α² = (a² + b²)/2`, `a, b ~ N(0, 1)`.
pub fn rayleigh_ergodic_capacity(snr_db: f64, mc_samples: usize, seed: u64) -> Result<McEstimate> {
    if mc_samples < MIN_RAYLEIGH_SAMPLES {
        return Err(Error::input(format!("rayleigh capacity needs at least {MIN_RAYLEIGH_SAMPLES} samples")));
    }
    let snr = snr_linear(snr_db);
    let mut rng = rng::stream(seed, rng::streams::ORACLE);
    Ok(McEstimate::from_values((0..mc_samples).map(|_| {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        (1.0 + 0.5 * (a * a + b * b) * snr).log2()
    })))
}

/// Unit-average-power QAM alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct QamConstellation {
    pub m: usize,
    /// `(re, im)` points.
    pub points: Vec<[f64; 2]>,
}

impl QamConstellation {
    /// `M × 2` codebook for n = 1.
    pub fn codebook(&self) -> Tensor {
        Tensor::matrix(self.m, 2, self.points.iter().flat_map(|p| p.iter().copied()).collect()).expect("shape")
    }

    pub fn average_power(&self) -> f64 {
        self.points.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>() / self.m as f64
    }
}

/// Square QAM for M ∈ {4, 16, 64}; the 6×6-minus-corners cross for M = 32.
pub fn qam_constellation(m: usize) -> Result<QamConstellation> {
    let side = match m {
        4 => 2,
        16 => 4,
        64 => 8,
        32 => 6,
        _ => return Err(Error::input(format!("unsupported QAM order {m} (expected 4, 16, 32 or 64)"))),
    };
    let levels: Vec<f64> = (0..side).map(|i| (2 * i) as f64 - (side - 1) as f64).collect();
    let mut points = Vec::with_capacity(m);
    for &re in &levels {
        for &im in &levels {
            let corner = re.abs() == 5.0 && im.abs() == 5.0;
            if m == 32 && corner {
                continue;
            }
            points.push([re, im]);
        }
    }
    debug_assert_eq!(points.len(), m);
    let power = points.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>() / m as f64;
    let scale = power.sqrt().recip();
    for p in &mut points {
        p[0] *= scale;
        p[1] *= scale;
    }
    Ok(QamConstellation { m, points })
}

/// A finite-alphabet input over one of the simulated channels.
#[derive(Clone, Debug)]
pub struct DiscreteSystem {
    pub prior: Vec<f64>,
    /// `M × 2n` codebook.
    pub codebook: Tensor,
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub samples: usize,
    pub seed: u64,
}

impl DiscreteSystem {
    pub fn uniform(codebook: Tensor, channel: ChannelKind, snr_db: f64, samples: usize, seed: u64) -> Self {
        let m = codebook.rows();
        DiscreteSystem { prior: vec![1.0 / m as f64; m], codebook, channel, snr_db, samples, seed }
    }

    fn validate(&self) -> Result<()> {
        let m = self.codebook.rows();
        if self.prior.len() != m || self.codebook.shape().len() != 2 || self.codebook.cols() % 2 != 0 {
            return Err(Error::input("codebook must be M × 2n with an M-entry prior"));
        }
        if self.prior.iter().any(|&p| !(p >= 0.0)) || (self.prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::input("prior must be a probability vector"));
        }
        let n = (self.codebook.cols() / 2) as f64;
        let power: f64 = (0..m)
            .map(|i| self.prior[i] * self.codebook.row(i).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / n;
        if (power - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!("codebook average power {power} is not 1")));
        }
        if self.samples == 0 {
            return Err(Error::input("samples must be positive"));
        }
        Ok(())
    }
}

/// Discrete-input MI in bits per channel use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMi {
    pub bits: f64,
    pub stderr: f64,
    /// Set when two codewords coincide.
    pub degenerate: bool,
}

/// `I(X;Y) = Σ_x p(x) E[log2 p(y|x)/p(y)]` by Monte Carlo. Rayleigh is
/// evaluated conditionally on the drawn fading and averaged.
pub fn discrete_input_mi(sys: &DiscreteSystem) -> Result<DiscreteMi> {
    sys.validate()?;
    let m = sys.codebook.rows();
    let width = sys.codebook.cols();
    let n = width / 2;
    let degenerate = (0..m).any(|i| {
        (i + 1..m).any(|j| {
            sys.codebook.row(i).iter().zip(sys.codebook.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>() < 1e-24
        })
    });
    let noise = NoiseParams::from_snr_db(sys.snr_db);
    let log_prior: Vec<f64> = sys.prior.iter().map(|p| p.ln()).collect();
    let pick = WeightedIndex::new(&sys.prior).map_err(|e| Error::input(e.to_string()))?;
    let mut rng = rng::stream(sys.seed, rng::streams::ORACLE);
    let mut channel = ChannelModel::with_rng(sys.channel, sys.snr_db, rng::stream(sys.seed, rng::streams::CHANNEL));

    const CHUNK: usize = 1024;
    let mut values = Vec::with_capacity(sys.samples);
    let mut scratch = vec![0.0; m];
    let mut remaining = sys.samples;
    while remaining > 0 {
        let rows = remaining.min(CHUNK);
        remaining -= rows;
        let idx: Vec<usize> = (0..rows).map(|_| pick.sample(&mut rng)).collect();
        let x = sys.codebook.select_rows(&idx);
        let (y, real) = channel.transmit_values(&x)?;
        for r in 0..rows {
            let h = real.fading.as_ref().map(|f| f.row(r));
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = log_prior[j] + log_likelihood(sys.channel, &noise, y.row(r), sys.codebook.row(j), h)?;
            }
            let own = scratch[idx[r]] - log_prior[idx[r]];
            values.push((own - log_sum_exp(&scratch)) / LN_2 / n as f64);
        }
    }
    let est = McEstimate::from_values(values.into_iter());
    Ok(DiscreteMi { bits: est.mean, stderr: est.stderr, degenerate })
}

/// A fully enumerable source → encoder → channel → decoder chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerableSystem {
    /// `p(s)`.
    pub source: Vec<f64>,
    /// Encoder table `s ↦ x`.
    pub encoder: Vec<usize>,
    /// Channel matrix, `channel[x][y] = p(y|x)`.
    pub channel: Vec<Vec<f64>>,
    /// Decoder posterior, `decoder[y][s] = q(s|y)`.
    pub decoder: Vec<Vec<f64>>,
}

/// Terms of the cross-entropy decomposition, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Check {
    pub cross_entropy: f64,
    pub source_entropy: f64,
    pub mutual_information: f64,
    pub expected_kl: f64,
    /// `H(S) − I(X;Y) + E[KL]`.
    pub rhs: f64,
    pub gap: f64,
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

impl EnumerableSystem {
    fn validate(&self) -> Result<()> {
        let s = self.source.len();
        let nx = self.channel.len();
        let ny = self.channel.first().map_or(0, Vec::len);
        let stochastic = |row: &[f64]| row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12;
        if s == 0 || nx == 0 || ny == 0 || self.encoder.len() != s || self.decoder.len() != ny {
            return Err(Error::input("inconsistent alphabet sizes"));
        }
        if !stochastic(&self.source) {
            return Err(Error::input("source is not a distribution"));
        }
        if self.channel.iter().any(|r| r.len() != ny || !stochastic(r)) {
            return Err(Error::input("channel rows must be distributions over Y"));
        }
        if self.decoder.iter().any(|r| r.len() != s || !stochastic(r) || r.iter().any(|&q| q <= 0.0)) {
            return Err(Error::input("decoder rows must be strictly positive distributions over S"));
        }
        let mut seen = vec![false; nx];
        for &x in &self.encoder {
            if x >= nx {
                return Err(Error::input(format!("encoder maps to unknown symbol {x}")));
            }
            if seen[x] {
                return Err(Error::input("encoder table is not injective"));
            }
            seen[x] = true;
        }
        Ok(())
    }

    fn marginal_y(&self) -> Vec<f64> {
        let ny = self.channel[0].len();
        let mut py = vec![0.0; ny];
        for (s, &ps) in self.source.iter().enumerate() {
            for (y, p) in py.iter_mut().enumerate() {
                *p += ps * self.channel[self.encoder[s]][y];
            }
        }
        py
    }

    /// `−Σ p(s) p(y|f(s)) ln q(s|y)`.
    pub fn cross_entropy(&self) -> f64 {
        let mut ce = 0.0;
        for (s, &ps) in self.source.iter().enumerate() {
            for (y, &w) in self.channel[self.encoder[s]].iter().enumerate() {
                ce -= xlogy(ps * w, self.decoder[y][s]);
            }
        }
        ce
    }

    pub fn source_entropy(&self) -> f64 {
        -self.source.iter().map(|&p| xlogy(p, p)).sum::<f64>()
    }

    pub fn mutual_information(&self) -> f64 {
        let py = self.marginal_y();
        let mut mi = 0.0;
        for (s, &ps) in self.source.iter().enumerate() {
            for (y, &w) in self.channel[self.encoder[s]].iter().enumerate() {
                if ps * w > 0.0 {
                    mi += ps * w * (w / py[y]).ln();
                }
            }
        }
        mi
    }

    /// `Σ_y p(y) KL(p(x|y) ‖ q(x|y))` over the encoder's image.
    pub fn expected_kl(&self) -> f64 {
        let py = self.marginal_y();
        let mut kl = 0.0;
        for (y, &pyv) in py.iter().enumerate() {
            if pyv == 0.0 {
                continue;
            }
            for (s, &ps) in self.source.iter().enumerate() {
                let post = ps * self.channel[self.encoder[s]][y] / pyv;
                if post > 0.0 {
                    kl += pyv * post * (post / self.decoder[y][s]).ln();
                }
            }
        }
        kl
    }

    /// Decoder replaced by the exact posterior `p(s|y)`. Outputs never
    /// reached get a uniform row.
    pub fn with_bayes_decoder(&self) -> Self {
        let py = self.marginal_y();
        let s_count = self.source.len();
        let decoder = py
            .iter()
            .enumerate()
            .map(|(y, &pyv)| {
                if pyv == 0.0 {
                    return vec![1.0 / s_count as f64; s_count];
                }
                (0..s_count).map(|s| self.source[s] * self.channel[self.encoder[s]][y] / pyv).collect()
            })
            .collect();
        EnumerableSystem { decoder, ..self.clone() }
    }

    /// Random instance with strictly positive tables.
    pub fn random(rng: &mut ChaCha8Rng, s: usize, nx: usize, ny: usize) -> Self {
        let mut dist = |len: usize| {
            let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / total).collect::<Vec<f64>>()
        };
        let source = dist(s);
        let channel = (0..nx).map(|_| dist(ny)).collect();
        let decoder = (0..ny).map(|_| dist(s)).collect();
        let mut xs: Vec<usize> = (0..nx).collect();
        xs.shuffle(rng);
        xs.truncate(s);
        EnumerableSystem { source, encoder: xs, channel, decoder }
    }
}

/// Evaluates both sides of the decomposition by exact summation.
pub fn verify_lemma1(sys: &EnumerableSystem) -> Result<Lemma1Check> {
    sys.validate()?;
    let cross_entropy = sys.cross_entropy();
    let source_entropy = sys.source_entropy();
    let mutual_information = sys.mutual_information();
    let expected_kl = sys.expected_kl();
    let rhs = source_entropy - mutual_information + expected_kl;
    Ok(Lemma1Check {
        cross_entropy,
        source_entropy,
        mutual_information,
        expected_kl,
        rhs,
        gap: (cross_entropy - rhs).abs(),
    })
}

/// Slope `d(CE − β·I)/dI` measured across a family of binary channels with
/// Bayes decoders (zero KL term) and a fixed uniform source. Equals
/// `−(1 + β)`, so it changes sign at `β = −1`.
pub fn regularized_loss_slope(beta: f64) -> f64 {
    let system = |flip: f64| EnumerableSystem {
        source: vec![0.5, 0.5],
        encoder: vec![0, 1],
        channel: vec![vec![1.0 - flip, flip], vec![flip, 1.0 - flip]],
        decoder: vec![vec![0.5, 0.5]; 2],
    }
    .with_bayes_decoder();
    let loss = |s: &EnumerableSystem| s.cross_entropy() - beta * s.mutual_information();
    let (a, b) = (system(0.1), system(0.2));
    (loss(&a) - loss(&b)) / (a.mutual_information() - b.mutual_information())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn awgn_capacity_values() {
        assert_eq!(awgn_capacity(0.0), 1.0);
        assert!((awgn_capacity(13.0) - (1.0 + 10f64.powf(1.3)).log2()).abs() < 1e-12);
        assert!((awgn_capacity(13.0) - 4.389).abs() < 1e-3);
        assert_eq!(awgn_capacity(f64::NEG_INFINITY), 0.0);
        assert!((awgn_capacity(10.0) - 3.459).abs() < 1e-3);
    }

    #[test]
    fn rayleigh_capacity_properties() {
        let low = rayleigh_ergodic_capacity(-200.0, 10_000, 1).unwrap();
        assert!(low.mean.abs() < 1e-12);
        let c = rayleigh_ergodic_capacity(10.0, 100_000, 1).unwrap();
        assert!(c.mean < awgn_capacity(10.0));
        assert!(c.stderr < 0.01);
        let a = rayleigh_ergodic_capacity(10.0, 20_000, 2).unwrap();
        let b = rayleigh_ergodic_capacity(10.0, 80_000, 3).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
        assert!(rayleigh_ergodic_capacity(10.0, 100, 1).is_err());
    }

    #[test]
    fn qam_alphabets() {
        let q4 = qam_constellation(4).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for p in &q4.points {
            assert!((p[0].abs() - r).abs() < 1e-15 && (p[1].abs() - r).abs() < 1e-15);
        }
        for m in [4, 16, 32, 64] {
            let q = qam_constellation(m).unwrap();
            assert_eq!(q.points.len(), m);
            assert!((q.average_power() - 1.0).abs() < 1e-12);
        }
        let q16 = qam_constellation(16).unwrap();
        let mut re: Vec<f64> = q16.points.iter().map(|p| p[0]).collect();
        re.sort_by(f64::total_cmp);
        re.dedup();
        assert_eq!(re.len(), 4);
        assert!(qam_constellation(8).is_err());
    }

    #[test]
    fn antipodal_noiseless_is_one_bit() {
        let cb = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let mi = discrete_input_mi(&DiscreteSystem::uniform(cb, ChannelKind::Awgn, 60.0, 2000, 1)).unwrap();
        assert!((mi.bits - 1.0).abs() < 1e-9, "{mi:?}");
        assert!(!mi.degenerate);
    }

    #[test]
    fn duplicate_codewords_are_flagged() {
        let cb = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let mi = discrete_input_mi(&DiscreteSystem::uniform(cb, ChannelKind::Awgn, 10.0, 500, 1)).unwrap();
        assert!(mi.degenerate);
        assert!(mi.bits.abs() < 1e-9);
    }

    #[test]
    fn discrete_mi_respects_entropy_and_capacity() {
        let cb = qam_constellation(16).unwrap().codebook();
        for snr in [0.0, 6.0, 12.0] {
            for kind in [ChannelKind::Awgn, ChannelKind::Rayleigh, ChannelKind::Uniform] {
                let mi = discrete_input_mi(&DiscreteSystem::uniform(cb.clone(), kind, snr, 5000, 7)).unwrap();
                assert!(mi.bits <= 4.0 + 3.0 * mi.stderr, "{kind} {snr}: {mi:?}");
                if kind == ChannelKind::Awgn {
                    assert!(mi.bits <= awgn_capacity(snr) + 3.0 * mi.stderr);
                }
            }
        }
    }

    #[test]
    fn codebook_power_is_checked() {
        let cb = Tensor::matrix(2, 2, vec![2.0, 0.0, -2.0, 0.0]).unwrap();
        assert!(discrete_input_mi(&DiscreteSystem::uniform(cb, ChannelKind::Awgn, 0.0, 10, 1)).is_err());
    }

    #[test]
    fn lemma1_perfect_decoder() {
        let mut rng = rng::stream(1, 0);
        let sys = EnumerableSystem::random(&mut rng, 4, 4, 4).with_bayes_decoder();
        let c = verify_lemma1(&sys).unwrap();
        assert!(c.expected_kl.abs() < 1e-14);
        assert!((c.cross_entropy - (c.source_entropy - c.mutual_information)).abs() < 1e-12);
    }

    #[test]
    fn lemma1_uniform_source_entropy() {
        let mut rng = rng::stream(2, 0);
        let mut sys = EnumerableSystem::random(&mut rng, 4, 5, 3);
        sys.source = vec![0.25; 4];
        let c = verify_lemma1(&sys).unwrap();
        assert!((c.source_entropy - 2.0 * LN_2).abs() < 1e-15);
        assert!(c.gap < 1e-12);
    }

    #[test]
    fn lemma1_rejects_non_injective_encoder() {
        let mut rng = rng::stream(3, 0);
        let mut sys = EnumerableSystem::random(&mut rng, 3, 3, 3);
        sys.encoder = vec![0, 1, 1];
        assert!(verify_lemma1(&sys).is_err());
    }

    #[test]
    fn loss_slope_flips_at_minus_one() {
        for beta in [-3.0, -1.5, -1.0, -0.5, 0.0, 0.2, 2.0] {
            let slope = regularized_loss_slope(beta);
            assert!((slope + (1.0 + beta)).abs() < 1e-9, "β={beta}: {slope}");
        }
        assert!(regularized_loss_slope(-1.5) > 0.0);
        assert!(regularized_loss_slope(-0.5) < 0.0);
    }
}
