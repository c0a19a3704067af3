//! Capacity learning by rate escalation: at each SNR, train autoencoders at
//! increasing rates `k/n`, lengthening the code whenever a rate is not
//! achievable, until the relative MI gain per channel use drops below `ε`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderSystem, SystemConfig, MAX_K};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Strictly increasing SNR points.
    pub snr_db: Vec<f64>,
    pub epsilon: f64,
    pub k0: u32,
    pub n0: usize,
    /// BLER threshold below which a rate counts as achievable.
    pub p_star: f64,
    pub trials: usize,
    pub max_n: usize,
    /// Attempts per SNR, the initial one included.
    pub max_attempts: usize,
    pub mi_samples: usize,
    pub seed: u64,
    /// Template for every trained system; `k`, `n`, `snr_db` and `seed` are
    /// overwritten per attempt.
    pub system: SystemConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            snr_db: vec![5.0],
            epsilon: 0.05,
            k0: 1,
            n0: 1,
            p_star: 1e-2,
            trials: 100_000,
            max_n: 8,
            max_attempts: 12,
            mi_samples: 32_768,
            seed: 0,
            system: SystemConfig { eval_trials: 0, mi_eval_samples: 0, ..SystemConfig::default() },
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if !(self.p_star > 0.0 && self.p_star < 1.0) {
            return Err(Error::config("p_star", "must lie in (0, 1)"));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("snr_db", "needs at least one finite SNR"));
        }
        if self.snr_db.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("snr_db", "must be strictly increasing"));
        }
        if self.k0 == 0 || self.k0 > MAX_K || self.n0 == 0 {
            return Err(Error::config("k0", "k0 and n0 must be positive and k0 at most 16"));
        }
        if self.max_n < self.n0 {
            return Err(Error::config("max_n", "must be at least n0"));
        }
        if self.trials == 0 || self.max_attempts == 0 {
            return Err(Error::config("trials", "trials and max_attempts must be positive"));
        }
        self.attempt_config(self.k0, self.n0, self.snr_db[0], 0).validate()
    }

    fn attempt_config(&self, k: u32, n: usize, snr_db: f64, seed: u64) -> SystemConfig {
        SystemConfig { k, n, snr_db, seed, eval_trials: 0, mi_eval_samples: 0, ..self.system.clone() }
    }
}

/// One trained system in the search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub snr_db: f64,
    pub attempt: usize,
    pub k: u32,
    pub n: usize,
    #[serde(rename = "R")]
    pub rate: f64,
    pub achievable: bool,
    /// MI estimate per channel use.
    pub mi_bits: f64,
    /// Relative MI gain over the previous achievable attempt.
    pub delta: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrResult {
    pub snr_db: f64,
    /// Last achievable MI per channel use, or the initial one if nothing was
    /// achievable.
    pub capacity_bits: f64,
    /// Search stopped on the `max_n` or `max_attempts` bound.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub attempts: Vec<Attempt>,
    pub results: Vec<SnrResult>,
}

/// True iff the trained system's BLER at its SNR is below `p_star`.
pub fn is_achievable(system: &AutoencoderSystem, p_star: f64, trials: usize) -> Result<bool> {
    system.is_achievable(p_star, trials)
}

fn run_attempt(cfg: &SearchConfig, snr_seed: u64, index: usize, k: u32, n: usize, snr: f64) -> Result<(bool, f64)> {
    let seed = rng::derive_seed(snr_seed, index as u64);
    let mut sys = AutoencoderSystem::new(cfg.attempt_config(k, n, snr, seed))?;
    sys.train()?;
    let achievable = sys.is_achievable(cfg.p_star, cfg.trials)?;
    let mi = sys.evaluate_mi(snr, cfg.mi_samples)?.value_bits / n as f64;
    log::info!("snr {snr} dB: k={k} n={n} achievable={achievable} mi={mi:.4} bits/use");
    Ok((achievable, mi))
}

fn search_one(cfg: &SearchConfig, snr_index: usize) -> Result<(Vec<Attempt>, SnrResult)> {
    let snr = cfg.snr_db[snr_index];
    let snr_seed = rng::derive_path(cfg.seed, &[streams::SEARCH, snr_index as u64]);
    let mut attempts = Vec::new();
    let mut record = |k: u32, n: usize, achievable: bool, mi_bits: f64, delta: Option<f64>| {
        let a = Attempt { snr_db: snr, attempt: attempts.len(), k, n, rate: k as f64 / n as f64, achievable, mi_bits, delta };
        attempts.push(a);
    };

    let (k0, mut n) = (cfg.k0, cfg.n0);
    let (ok0, mi0) = run_attempt(cfg, snr_seed, 0, k0, n, snr)?;
    record(k0, n, ok0, mi0, None);
    let mut rate = k0 as f64 / n as f64;
    let mut prev_mi = mi0;
    let mut last_achievable = ok0.then_some(mi0);
    let mut truncated = true;

    for index in 1..cfg.max_attempts {
        // Smallest integer k with k/n above the current rate.
        let k = (rate * n as f64 + 1e-9).floor() as u32 + 1;
        if k > MAX_K {
            break;
        }
        let (ok, mi) = run_attempt(cfg, snr_seed, index, k, n, snr)?;
        if !ok {
            record(k, n, false, mi, None);
            n += 1;
            if n > cfg.max_n {
                break;
            }
            continue;
        }
        let delta = if prev_mi == 0.0 { f64::INFINITY } else { ((mi - prev_mi) / prev_mi).abs() };
        record(k, n, true, mi, Some(delta));
        rate = k as f64 / n as f64;
        prev_mi = mi;
        last_achievable = Some(mi);
        if delta <= cfg.epsilon {
            truncated = false;
            break;
        }
    }
    if truncated {
        log::warn!("search at {snr} dB stopped on its bounds");
    }
    let capacity_bits = last_achievable.unwrap_or(mi0);
    Ok((attempts, SnrResult { snr_db: snr, capacity_bits, truncated }))
}

/// Runs the escalation independently at every SNR (in parallel); the trace
/// depends only on the config.
pub fn capacity_search(cfg: &SearchConfig) -> Result<SearchTrace> {
    cfg.validate()?;
    let per_snr: Vec<(Vec<Attempt>, SnrResult)> =
        (0..cfg.snr_db.len()).into_par_iter().map(|i| search_one(cfg, i)).collect::<Result<_>>()?;
    let mut trace = SearchTrace { attempts: Vec::new(), results: Vec::new() };
    for (a, r) in per_snr {
        trace.attempts.extend(a);
        trace.results.push(r);
    }
    Ok(trace)
}

/// `snr_db,attempt,k,n,R,achievable,mi_bits,delta`.
pub fn write_trace_csv(path: &Path, trace: &SearchTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for a in &trace.attempts {
        w.serialize(a)?;
    }
    w.flush()?;
    Ok(())
}

/// `snr_db,capacity_bits,truncated`.
pub fn write_summary_csv(path: &Path, trace: &SearchTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &trace.results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SearchConfig {
        SearchConfig {
            snr_db: vec![10.0],
            trials: 2000,
            max_n: 2,
            max_attempts: 4,
            mi_samples: 2048,
            system: SystemConfig {
                hidden: vec![16],
                mine_hidden: vec![16],
                batch_size: 64,
                iterations: 150,
                mi_finetune_steps: 50,
                ..SearchConfig::default().system
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        for bad in [
            SearchConfig { epsilon: 0.0, ..Default::default() },
            SearchConfig { p_star: 1.0, ..Default::default() },
            SearchConfig { p_star: 0.0, ..Default::default() },
            SearchConfig { snr_db: vec![5.0, 5.0], ..Default::default() },
            SearchConfig { snr_db: vec![], ..Default::default() },
            SearchConfig { max_n: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn untrained_system_is_not_achievable() {
        let sys = AutoencoderSystem::new(SystemConfig { k: 3, n: 1, snr_db: 0.0, ..tiny().system }).unwrap();
        assert!(!is_achievable(&sys, 1e-2, 2000).unwrap());
    }

    #[test]
    fn search_invariants_and_replay() {
        let cfg = tiny();
        let trace = capacity_search(&cfg).unwrap();
        assert_eq!(trace.results.len(), 1);
        assert!(trace.attempts.len() <= cfg.max_attempts);
        for w in trace.attempts.windows(2) {
            if w[0].n == w[1].n {
                assert!(w[1].rate > w[0].rate || !w[0].achievable);
            }
        }
        let r = trace.results[0];
        assert!(r.capacity_bits <= crate::analytic::awgn_capacity(10.0) + 0.1);
        assert_eq!(trace, capacity_search(&cfg).unwrap());
    }

    #[test]
    fn huge_epsilon_stops_at_first_achievable_escalation() {
        let cfg = SearchConfig { epsilon: 10.0, p_star: 0.999, ..tiny() };
        let trace = capacity_search(&cfg).unwrap();
        assert_eq!(trace.attempts.len(), 2);
        assert!(trace.attempts[1].achievable);
        assert!(!trace.results[0].truncated);
        assert_eq!(trace.results[0].capacity_bits, trace.attempts[1].mi_bits);
    }

    #[test]
    fn csv_headers() {
        let trace = SearchTrace {
            attempts: vec![Attempt {
                snr_db: 5.0,
                attempt: 0,
                k: 1,
                n: 1,
                rate: 1.0,
                achievable: true,
                mi_bits: 0.9,
                delta: None,
            }],
            results: vec![SnrResult { snr_db: 5.0, capacity_bits: 0.9, truncated: false }],
        };
        let dir = tempfile::tempdir().unwrap();
        write_trace_csv(&dir.path().join("t.csv"), &trace).unwrap();
        write_summary_csv(&dir.path().join("s.csv"), &trace).unwrap();
        let t = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(t, "snr_db,attempt,k,n,R,achievable,mi_bits,delta\n5.0,0,1,1,1.0,true,0.9,\n");
        let s = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert!(s.starts_with("snr_db,capacity_bits,truncated\n"));
    }
}
