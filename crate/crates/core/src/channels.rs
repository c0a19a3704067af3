//! Channel simulators.
//!
//! Codewords are `B × 2n` matrices of interleaved `(re, im)` pairs at unit
//! average power per complex symbol, so `SNR = 1/σ²` where `σ²` is the total
//! complex noise power. All channel draws enter the tape as constants; the
//! gradient flows to `x` only.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Uniform,
    Rayleigh,
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(ChannelKind::Awgn),
            "uniform" => Ok(ChannelKind::Uniform),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            _ => Err(Error::Unknown { what: "channel", name: s.to_string() }),
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Uniform => "uniform",
            ChannelKind::Rayleigh => "rayleigh",
        })
    }
}

/// Noise scales derived from an SNR in dB.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// Total complex noise power per symbol.
    pub sigma2: f64,
    /// Variance of each real component, `σ²/2`.
    pub component_variance: f64,
    /// Half-width `Δ/2` of the uniform noise, `Δ = sqrt(6σ²)` so `Δ²/12 = σ²/2`.
    pub uniform_half_width: f64,
}

impl NoiseParams {
    pub fn from_snr_db(snr_db: f64) -> Self {
        let sigma2 = 10f64.powf(-snr_db / 10.0);
        NoiseParams {
            sigma2,
            component_variance: sigma2 / 2.0,
            uniform_half_width: (6.0 * sigma2).sqrt() / 2.0,
        }
    }

    pub fn uniform_width(&self) -> f64 {
        2.0 * self.uniform_half_width
    }
}

pub fn snr_linear(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0)
}

/// One draw of the channel's randomness for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub noise: Tensor,
    /// Per-symbol fading `(h_re, h_im)` pairs, Rayleigh only.
    pub fading: Option<Tensor>,
}

/// A seeded stochastic channel.
#[derive(Clone, Debug)]
pub struct ChannelModel {
    kind: ChannelKind,
    snr_db: f64,
    noise: NoiseParams,
    rng: ChaCha8Rng,
}

impl ChannelModel {
    pub fn new(kind: ChannelKind, snr_db: f64, seed: u64) -> Self {
        Self::with_rng(kind, snr_db, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(kind: ChannelKind, snr_db: f64, rng: ChaCha8Rng) -> Self {
        ChannelModel { kind, snr_db, noise: NoiseParams::from_snr_db(snr_db), rng }
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }

    pub fn noise_params(&self) -> NoiseParams {
        self.noise
    }

    /// Draws fading (Rayleigh) then noise for a `rows × width` batch.
    pub fn sample(&mut self, rows: usize, width: usize) -> Result<Realization> {
        if width % 2 != 0 {
            return Err(Error::Shape { op: "transmit", shapes: vec![vec![rows, width]] });
        }
        let count = rows * width;
        let fading = match self.kind {
            ChannelKind::Rayleigh => {
                let h: Vec<f64> = (0..count)
                    .map(|_| {
                        let z: f64 = self.rng.sample(StandardNormal);
                        z * FRAC_1_SQRT_2
                    })
                    .collect();
                Some(Tensor::matrix(rows, width, h)?)
            }
            _ => None,
        };
        let noise: Vec<f64> = match self.kind {
            ChannelKind::Awgn | ChannelKind::Rayleigh => {
                let std = self.noise.component_variance.sqrt();
                (0..count)
                    .map(|_| {
                        let z: f64 = self.rng.sample(StandardNormal);
                        z * std
                    })
                    .collect()
            }
            ChannelKind::Uniform => {
                let width = self.noise.uniform_width();
                (0..count).map(|_| (self.rng.random::<f64>() - 0.5) * width).collect()
            }
        };
        Ok(Realization { noise: Tensor::matrix(rows, width, noise)?, fading })
    }

    /// `y = x + n` (additive kinds) or `y = h·x + n` (Rayleigh), on the tape.
    pub fn transmit(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xv = tape.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite("transmit input".into()));
        }
        let real = self.sample(xv.rows(), xv.cols())?;
        apply_realization(tape, x, &real)
    }

    /// Untracked transmit; returns `y` and the draw that produced it.
    pub fn transmit_values(&mut self, x: &Tensor) -> Result<(Tensor, Realization)> {
        let real = self.sample(x.rows(), x.cols())?;
        let y = apply_values(x, &real);
        Ok((y, real))
    }
}

/// Applies a fixed draw to `x` on the tape.
pub fn apply_realization(tape: &mut Tape, x: Var, real: &Realization) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let noise = tape.constant(real.noise.clone());
    let faded = match &real.fading {
        None => x,
        Some(h) => {
            let width = shape[1];
            let (h_re, h_im) = fading_factors(h);
            let h_re = tape.constant(h_re);
            let h_im = tape.constant(h_im);
            let swap = tape.constant(pair_swap(width));
            let direct = tape.mul(x, h_re)?;
            let swapped = tape.matmul(x, swap)?;
            let cross = tape.mul(swapped, h_im)?;
            tape.add(direct, cross)?
        }
    };
    tape.add(faded, noise)
}

fn apply_values(x: &Tensor, real: &Realization) -> Tensor {
    let mut y = x.clone();
    if let Some(h) = &real.fading {
        for ((yp, xp), hp) in y.data_mut().chunks_mut(2).zip(x.data().chunks(2)).zip(h.data().chunks(2)) {
            yp[0] = hp[0] * xp[0] - hp[1] * xp[1];
            yp[1] = hp[1] * xp[0] + hp[0] * xp[1];
        }
    }
    y.add_assign(&real.noise);
    y
}

/// Splits `(h_re, h_im)` pairs into the elementwise factors of
/// `h·x = x ⊙ [h_re, h_re] + swap(x) ⊙ [−h_im, h_im]`.
fn fading_factors(h: &Tensor) -> (Tensor, Tensor) {
    let mut re = h.clone();
    let mut im = h.clone();
    for (r, i) in re.data_mut().chunks_mut(2).zip(im.data_mut().chunks_mut(2)) {
        let (hr, hi) = (r[0], r[1]);
        r[1] = hr;
        i[0] = -hi;
        i[1] = hi;
    }
    (re, im)
}

/// Permutation exchanging the two entries of each `(re, im)` pair.
fn pair_swap(width: usize) -> Tensor {
    let mut p = Tensor::zeros(&[width, width]);
    for k in (0..width).step_by(2) {
        p.data_mut()[k * width + k + 1] = 1.0;
        p.data_mut()[(k + 1) * width + k] = 1.0;
    }
    p
}

/// `ln p(y | x)` in nats for one codeword (`2n` reals). Rayleigh requires the
/// fading `h` as `(h_re, h_im)` pairs; the uniform density is `−∞` outside
/// its support box.
pub fn log_likelihood(kind: ChannelKind, noise: &NoiseParams, y: &[f64], x: &[f64], h: Option<&[f64]>) -> Result<f64> {
    if y.len() != x.len() || y.len() % 2 != 0 {
        return Err(Error::Shape { op: "log_likelihood", shapes: vec![vec![y.len()], vec![x.len()]] });
    }
    let symbols = y.len() / 2;
    match kind {
        ChannelKind::Uniform => {
            let half = noise.uniform_half_width;
            if y.iter().zip(x).any(|(a, b)| (a - b).abs() > half) {
                return Ok(f64::NEG_INFINITY);
            }
            Ok(-((2 * symbols) as f64) * noise.uniform_width().ln())
        }
        ChannelKind::Awgn | ChannelKind::Rayleigh => {
            let h = match (kind, h) {
                (ChannelKind::Rayleigh, Some(h)) if h.len() == x.len() => Some(h),
                (ChannelKind::Rayleigh, _) => {
                    return Err(Error::input("rayleigh log-likelihood needs the fading realization"))
                }
                _ => None,
            };
            let s2 = noise.sigma2;
            let mut ll = -(symbols as f64) * (PI * s2).ln();
            for k in 0..symbols {
                let (xr, xi) = (x[2 * k], x[2 * k + 1]);
                let (mr, mi) = match h {
                    Some(h) => (h[2 * k] * xr - h[2 * k + 1] * xi, h[2 * k + 1] * xr + h[2 * k] * xi),
                    None => (xr, xi),
                };
                let d = (y[2 * k] - mr).powi(2) + (y[2 * k + 1] - mi).powi(2);
                ll -= d / s2;
            }
            Ok(ll)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_convention() {
        assert_eq!(NoiseParams::from_snr_db(0.0).sigma2, 1.0);
        let p = NoiseParams::from_snr_db(10.0);
        assert!((p.sigma2 - 0.1).abs() < 1e-15);
        // Δ²/12 = σ²/2
        assert!((p.uniform_width().powi(2) / 12.0 - p.component_variance).abs() < 1e-15);
        assert_eq!(NoiseParams::from_snr_db(f64::INFINITY).sigma2, 0.0);
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!("rician".parse::<ChannelKind>(), Err(Error::Unknown { .. })));
        assert_eq!("AWGN".parse::<ChannelKind>().unwrap(), ChannelKind::Awgn);
    }

    #[test]
    fn noiseless_awgn_is_identity() {
        let x = Tensor::matrix(2, 4, vec![0.5, -1.0, 0.2, 0.3, 1.0, 1.0, -0.7, 0.0]).unwrap();
        let mut ch = ChannelModel::new(ChannelKind::Awgn, f64::INFINITY, 1);
        let (y, _) = ch.transmit_values(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn seeded_transmit_is_reproducible() {
        let x = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        for kind in [ChannelKind::Awgn, ChannelKind::Uniform, ChannelKind::Rayleigh] {
            let a = ChannelModel::new(kind, 5.0, 42).transmit_values(&x).unwrap();
            let b = ChannelModel::new(kind, 5.0, 42).transmit_values(&x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tape_and_untracked_paths_agree() {
        let x = Tensor::matrix(2, 4, vec![0.5, -1.0, 0.2, 0.3, 1.0, 1.0, -0.7, 0.1]).unwrap();
        for kind in [ChannelKind::Awgn, ChannelKind::Uniform, ChannelKind::Rayleigh] {
            let (y_direct, _) = ChannelModel::new(kind, 3.0, 7).transmit_values(&x).unwrap();
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let yv = ChannelModel::new(kind, 3.0, 7).transmit(&mut tape, xv).unwrap();
            for (a, b) in tape.value(yv).data().iter().zip(y_direct.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rayleigh_gradient_is_scaled_by_fading() {
        // d Σ y / d x for y = h·x + n, one symbol: [h_re + h_im, h_re − h_im].
        let x = Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap();
        let mut ch = ChannelModel::new(ChannelKind::Rayleigh, 10.0, 3);
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let real = ch.sample(1, 2).unwrap();
        let y = apply_realization(&mut tape, xv, &real).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        let h = real.fading.unwrap();
        let (hr, hi) = (h.data()[0], h.data()[1]);
        let got = g.get(xv).unwrap().data().to_vec();
        assert!((got[0] - (hr + hi)).abs() < 1e-15);
        assert!((got[1] - (hr - hi)).abs() < 1e-15);
    }

    #[test]
    fn awgn_density_at_mode() {
        let p = NoiseParams::from_snr_db(0.0);
        let ll = log_likelihood(ChannelKind::Awgn, &p, &[0.3, -0.2], &[0.3, -0.2], None).unwrap();
        assert!((ll + PI.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_outside_support() {
        let p = NoiseParams::from_snr_db(0.0);
        let far = p.uniform_half_width + 0.01;
        let ll = log_likelihood(ChannelKind::Uniform, &p, &[far, 0.0], &[0.0, 0.0], None).unwrap();
        assert_eq!(ll, f64::NEG_INFINITY);
        assert!(log_likelihood(ChannelKind::Rayleigh, &p, &[0.0, 0.0], &[0.0, 0.0], None).is_err());
    }

    /// Midpoint-rule integral of `exp(ll)` over a square grid for n = 1.
    fn integrate(kind: ChannelKind, p: &NoiseParams, x: [f64; 2], h: Option<[f64; 2]>, half: f64, cells: usize) -> f64 {
        let step = 2.0 * half / cells as f64;
        let mut total = 0.0;
        for i in 0..cells {
            for j in 0..cells {
                let y = [-half + (i as f64 + 0.5) * step, -half + (j as f64 + 0.5) * step];
                let ll = log_likelihood(kind, p, &y, &x, h.as_ref().map(|v| &v[..])).unwrap();
                total += ll.exp() * step * step;
            }
        }
        total
    }

    #[test]
    fn densities_integrate_to_one() {
        let p = NoiseParams::from_snr_db(0.0);
        let awgn = integrate(ChannelKind::Awgn, &p, [0.4, -0.3], None, 8.0, 800);
        assert!((awgn - 1.0).abs() < 1e-3, "{awgn}");
        let ray = integrate(ChannelKind::Rayleigh, &p, [0.4, -0.3], Some([0.8, -1.1]), 8.0, 800);
        assert!((ray - 1.0).abs() < 1e-3, "{ray}");
        // Grid aligned with the uniform support box (x at the origin).
        let half = p.uniform_half_width;
        let uni = integrate(ChannelKind::Uniform, &p, [0.0, 0.0], None, 2.0 * half, 400);
        assert!((uni - 1.0).abs() < 1e-3, "{uni}");
    }
}
