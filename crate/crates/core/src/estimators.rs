//! Correlations, CHSH, visibility and the fidelity bound from coincidence
//! counts.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantum::OutcomeProbabilities;
use crate::rng::SeedTree;
use crate::timesync::CoincidenceRecord;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("no coincidences for setting ({0}, {1})")]
    EmptySetting(u8, u8),
    #[error("setting ({0}, {1}) missing from the data")]
    MissingSetting(u8, u8),
    #[error("effective time must be positive, got {0} s")]
    BadTime(f64),
}

/// Outcome counts for one pair of analyzer settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SettingCounts {
    pub basis1: u8,
    pub basis2: u8,
    pub n_pp: u64,
    pub n_pm: u64,
    pub n_mp: u64,
    pub n_mm: u64,
}

impl SettingCounts {
    pub fn new(basis1: u8, basis2: u8, [n_pp, n_pm, n_mp, n_mm]: [u64; 4]) -> Self {
        SettingCounts {
            basis1,
            basis2,
            n_pp,
            n_pm,
            n_mp,
            n_mm,
        }
    }

    /// Counts proportional to exact probabilities, scaled to `n` and rounded.
    pub fn from_probabilities(basis1: u8, basis2: u8, p: &OutcomeProbabilities, n: u64) -> Self {
        let scale = |x: f64| (x * n as f64).round() as u64;
        Self::new(basis1, basis2, [scale(p.pp), scale(p.pm), scale(p.mp), scale(p.mm)])
    }

    pub fn total(&self) -> u64 {
        self.n_pp + self.n_pm + self.n_mp + self.n_mm
    }

    pub fn as_array(&self) -> [u64; 4] {
        [self.n_pp, self.n_pm, self.n_mp, self.n_mm]
    }

    fn add(&mut self, o1: i8, o2: i8) {
        match (o1 > 0, o2 > 0) {
            (true, true) => self.n_pp += 1,
            (true, false) => self.n_pm += 1,
            (false, true) => self.n_mp += 1,
            (false, false) => self.n_mm += 1,
        }
    }

    fn nonempty(&self) -> Result<f64, EstimatorError> {
        match self.total() {
            0 => Err(EstimatorError::EmptySetting(self.basis1, self.basis2)),
            n => Ok(n as f64),
        }
    }
}

/// Value with a one-standard-deviation uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

/// `E = (n++ + n−− − n+− − n−+)/N` with first-order Poisson error
/// propagation, which reduces to `σ² = (1 − E²)/N`.
pub fn correlation(c: &SettingCounts) -> Result<Estimate, EstimatorError> {
    let n = c.nonempty()?;
    let same = (c.n_pp + c.n_mm) as f64;
    let diff = (c.n_pm + c.n_mp) as f64;
    let e = (same - diff) / n;
    let var = (same * (1.0 - e).powi(2) + diff * (1.0 + e).powi(2)) / (n * n);
    Ok(Estimate {
        value: e,
        sigma: var.max(0.0).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BellResult {
    /// Correlations in the order `(a,b), (a,b′), (a′,b), (a′,b′)`.
    pub correlations: [Estimate; 4],
    pub s: f64,
    pub sigma_s: f64,
    pub violation_sigmas: f64,
}

/// `S = |E(a,b) − E(a,b′) + E(a′,b) + E(a′,b′)|` for counts given in that
/// order.
pub fn chsh(counts: &[SettingCounts; 4]) -> Result<BellResult, EstimatorError> {
    let mut e = [Estimate { value: 0.0, sigma: 0.0 }; 4];
    for (k, c) in counts.iter().enumerate() {
        e[k] = correlation(c)?;
    }
    let s = (e[0].value - e[1].value + e[2].value + e[3].value).abs();
    let sigma_s = e.iter().map(|x| x.sigma * x.sigma).sum::<f64>().sqrt();
    Ok(BellResult {
        correlations: e,
        s,
        sigma_s,
        violation_sigmas: (s - 2.0) / sigma_s,
    })
}

/// Correlated-minus-anticorrelated fraction in one basis.
pub fn visibility(c: &SettingCounts) -> Result<f64, EstimatorError> {
    Ok(correlation(c)?.value)
}

/// Visibility corresponding to a `contrast:1` count ratio.
pub fn visibility_from_contrast(contrast: f64) -> f64 {
    (contrast - 1.0) / (contrast + 1.0)
}

/// Lower bound on the fidelity with `(|HV⟩ + |VH⟩)/√2`:
/// `(P_HV + P_VH)/2 + V_X/2 − √(P_HH·P_VV)`.
///
/// `hv` holds H/V-basis counts with `+` = H; `diag` holds counts where both
/// analyzers project on the physical `|±⟩` states.
pub fn fidelity_lower_bound(hv: &SettingCounts, diag: &SettingCounts) -> Result<Estimate, EstimatorError> {
    let nz = hv.nonempty()?;
    let x = correlation(diag)?;
    let [hh, hv_, vh, vv] = hv.as_array().map(|n| n as f64);
    let anti = (hv_ + vh) / nz;
    let cross = (hh * vv).sqrt() / nz;
    let value = 0.5 * anti + 0.5 * x.value - cross;

    // Each term is (∂F/∂n_k)·√n_k, written so that empty cells stay finite.
    let term_anti = |n: f64| (0.5 / nz - 0.5 * anti / nz + cross / nz) * n.sqrt();
    let term_hh = -0.5 * vv.sqrt() / nz - (0.5 * anti - cross) / nz * hh.sqrt();
    let term_vv = -0.5 * hh.sqrt() / nz - (0.5 * anti - cross) / nz * vv.sqrt();
    let var_z = term_anti(hv_).powi(2) + term_anti(vh).powi(2) + term_hh.powi(2) + term_vv.powi(2);
    let var = var_z + 0.25 * x.sigma * x.sigma;
    Ok(Estimate { value, sigma: var.sqrt() })
}

/// Coincidence tallies keyed by `(basis1, basis2)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tally {
    pub settings: BTreeMap<(u8, u8), SettingCounts>,
    /// Records with an outcome that is neither `+1` nor `−1`.
    pub malformed: u64,
}

impl Tally {
    pub fn from_records(records: &[CoincidenceRecord]) -> Self {
        let mut t = Tally::default();
        for r in records {
            if !matches!(r.outcome1, 1 | -1) || !matches!(r.outcome2, 1 | -1) {
                t.malformed += 1;
                continue;
            }
            t.settings
                .entry((r.basis1, r.basis2))
                .or_insert_with(|| SettingCounts {
                    basis1: r.basis1,
                    basis2: r.basis2,
                    ..Default::default()
                })
                .add(r.outcome1, r.outcome2);
        }
        t
    }

    pub fn get(&self, basis1: u8, basis2: u8) -> Result<SettingCounts, EstimatorError> {
        self.settings
            .get(&(basis1, basis2))
            .copied()
            .ok_or(EstimatorError::MissingSetting(basis1, basis2))
    }

    pub fn total(&self) -> u64 {
        self.settings.values().map(SettingCounts::total).sum()
    }

    /// Coincidences whose setting pair is not in `used`.
    pub fn excluded(&self, used: &[(u8, u8)]) -> u64 {
        self.settings
            .iter()
            .filter(|(k, _)| !used.contains(k))
            .map(|(_, c)| c.total())
            .sum::<u64>()
            + self.malformed
    }
}

/// Index pairs of the four CHSH terms for two settings per station.
pub const CHSH_INDEX_ORDER: [(u8, u8); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// CHSH from a tally whose station settings are `[a, a′]` and `[b, b′]`.
pub fn chsh_from_tally(t: &Tally) -> Result<BellResult, EstimatorError> {
    let counts = CHSH_INDEX_ORDER.map(|(i, j)| t.get(i, j));
    let mut out = [SettingCounts::default(); 4];
    for (k, c) in counts.into_iter().enumerate() {
        out[k] = c?;
    }
    chsh(&out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingRate {
    pub basis1: u8,
    pub basis2: u8,
    pub count: u64,
    pub rate_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub count: u64,
    pub effective_time_s: f64,
    pub rate_hz: f64,
    pub per_setting: Vec<SettingRate>,
}

pub fn coincidence_rate_report(records: &[CoincidenceRecord], effective_time_s: f64) -> Result<RateReport, EstimatorError> {
    if !(effective_time_s > 0.0) {
        return Err(EstimatorError::BadTime(effective_time_s));
    }
    let mut per: BTreeMap<(u8, u8), u64> = BTreeMap::new();
    for r in records {
        *per.entry((r.basis1, r.basis2)).or_default() += 1;
    }
    Ok(RateReport {
        count: records.len() as u64,
        effective_time_s,
        rate_hz: records.len() as f64 / effective_time_s,
        per_setting: per
            .into_iter()
            .map(|((basis1, basis2), count)| SettingRate {
                basis1,
                basis2,
                count,
                rate_hz: count as f64 / effective_time_s,
            })
            .collect(),
    })
}

fn resample<R: Rng>(c: &SettingCounts, rng: &mut R) -> SettingCounts {
    let n = c.total();
    let p = c.as_array().map(|x| x as f64 / n as f64);
    let mut left = n;
    let mut rest = 1.0;
    let mut out = [0u64; 4];
    for k in 0..3 {
        let q = if rest > 0.0 { (p[k] / rest).clamp(0.0, 1.0) } else { 0.0 };
        out[k] = if left == 0 || q == 0.0 {
            0
        } else if q >= 1.0 {
            left
        } else {
            Binomial::new(left, q).expect("valid binomial").sample(rng)
        };
        left -= out[k];
        rest -= p[k];
    }
    out[3] = left;
    SettingCounts::new(c.basis1, c.basis2, out)
}

/// Multinomial bootstrap of S: mean and standard deviation over `reps`
/// resamplings of each setting's counts.
pub fn bootstrap_chsh(counts: &[SettingCounts; 4], reps: usize, seed: u64) -> Result<Estimate, EstimatorError> {
    chsh(counts)?;
    let mut rng = SeedTree::new(seed).substream("bootstrap", 0);
    let mut values = Vec::with_capacity(reps);
    for _ in 0..reps {
        let r = counts.map(|c| resample(&c, &mut rng));
        if let Ok(b) = chsh(&r) {
            values.push(b.s);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Estimate {
        value: mean,
        sigma: var.sqrt(),
    })
}
