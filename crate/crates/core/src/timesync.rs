//! Clock recovery from sync pulses and windowed coincidence matching.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventsim::TimeTag;

pub const MIN_SYNC_TAGS: usize = 10;
/// Pulse association needs the pulse period to exceed this multiple of the
/// timing jitter.
pub const AMBIGUITY_FACTOR: f64 = 4.0;
pub const COINCIDENCE_HEADER: [&str; 6] = ["t1_ps", "t2_ps", "basis1", "basis2", "outcome1", "outcome2"];

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("stream {stream} has {found} sync tags, at least {MIN_SYNC_TAGS} needed")]
    TooFewSyncTags { stream: usize, found: usize },
    #[error("sync pulse association is ambiguous: period {period_ps:.1} ps vs jitter {jitter_ps:.1} ps")]
    Ambiguous { period_ps: f64, jitter_ps: f64 },
    #[error("stream {stream} is not sorted at index {index}")]
    Unsorted { stream: usize, index: usize },
    #[error("coincidence window must be positive, got {0} ps")]
    BadWindow(f64),
}

/// Linear relation between the two station clocks:
/// `t2 = t1 + offset_ps + drift_ps_per_s · t1[s]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncFit {
    pub offset_ps: f64,
    pub drift_ps_per_s: f64,
    pub residual_rms_ps: f64,
    pub pulses: usize,
}

impl SyncFit {
    pub fn identity() -> Self {
        SyncFit {
            offset_ps: 0.0,
            drift_ps_per_s: 0.0,
            residual_rms_ps: 0.0,
            pulses: 0,
        }
    }

    /// Station-2 time expressed on the station-1 clock.
    pub fn to_first_clock(&self, t2_ps: f64) -> f64 {
        (t2_ps - self.offset_ps) / (1.0 + self.drift_ps_per_s * 1e-12)
    }

    /// Fit of the reverse relation `t1 = t2 + offset' + drift'·t2`.
    pub fn inverse(&self) -> Self {
        let k = 1.0 + self.drift_ps_per_s * 1e-12;
        SyncFit {
            offset_ps: -self.offset_ps / k,
            drift_ps_per_s: (1.0 / k - 1.0) * 1e12,
            residual_rms_ps: self.residual_rms_ps,
            pulses: self.pulses,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pulse numbers for one stream: estimates the period from the median
/// spacing, then refines it by least squares on progressively longer
/// prefixes so rounding never slips by a whole pulse.
fn pulse_indices(times: &[f64]) -> Result<Vec<i64>, SyncError> {
    let head = times.len().min(17);
    let mut period = median(times[..head].windows(2).map(|w| w[1] - w[0]).collect());
    if !(period > 0.0) {
        return Err(SyncError::Ambiguous {
            period_ps: period,
            jitter_ps: f64::INFINITY,
        });
    }
    let t0 = times[0];
    let mut len = head;
    let mut idx: Vec<i64>;
    loop {
        idx = times[..len].iter().map(|t| ((t - t0) / period).round() as i64).collect();
        let (slope, _) = line_fit(&idx.iter().map(|&k| k as f64).collect::<Vec<_>>(), &times[..len]);
        if slope > 0.0 {
            period = slope;
        }
        if len == times.len() {
            break;
        }
        len = (len * 2).min(times.len());
    }
    idx = times.iter().map(|t| ((t - t0) / period).round() as i64).collect();
    // Robust per-stream jitter estimate from the residuals of the index fit.
    let x: Vec<f64> = idx.iter().map(|&k| k as f64).collect();
    let (slope, intercept) = line_fit(&x, times);
    let resid: Vec<f64> = x.iter().zip(times).map(|(k, t)| (t - (intercept + slope * k)).abs()).collect();
    let jitter = 1.4826 * median(resid);
    if period < AMBIGUITY_FACTOR * jitter || idx.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SyncError::Ambiguous {
            period_ps: period,
            jitter_ps: jitter,
        });
    }
    Ok(idx)
}

/// Least squares `y = intercept + slope·x` with centred sums.
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Fits the inter-station clock relation from the channel-2 tags of both
/// streams. Other channels are ignored.
pub fn fit_clock(tags1: &[TimeTag], tags2: &[TimeTag]) -> Result<SyncFit, SyncError> {
    let s1: Vec<f64> = tags1.iter().filter(|t| t.is_sync()).map(|t| t.time_ps).collect();
    let s2: Vec<f64> = tags2.iter().filter(|t| t.is_sync()).map(|t| t.time_ps).collect();
    for (k, s) in [&s1, &s2].into_iter().enumerate() {
        if s.len() < MIN_SYNC_TAGS {
            return Err(SyncError::TooFewSyncTags {
                stream: k + 1,
                found: s.len(),
            });
        }
    }
    let i1 = pulse_indices(&s1)?;
    let i2 = pulse_indices(&s2)?;

    // The first tags of the two streams may belong to different pulses; the
    // pulse-number offset is whatever brings the first sync tag of stream 2
    // closest to stream 1's pulse grid. Clock offsets beyond half a period
    // are therefore not identifiable, as for any periodic sync signal.
    let shift = {
        let (slope1, icpt1) = line_fit(&i1.iter().map(|&k| k as f64).collect::<Vec<_>>(), &s1);
        ((s2[0] - icpt1) / slope1).round() as i64
    };

    let mut x = Vec::new();
    let mut y = Vec::new();
    let (mut a, mut b) = (0usize, 0usize);
    while a < i1.len() && b < i2.len() {
        let pa = i1[a];
        let pb = i2[b] + shift;
        match pa.cmp(&pb) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                x.push(s1[a]);
                y.push(s2[b] - s1[a]);
                a += 1;
                b += 1;
            }
        }
    }
    let n = x.len();
    if n < MIN_SYNC_TAGS {
        return Err(SyncError::TooFewSyncTags { stream: 0, found: n });
    }
    let (slope, intercept) = line_fit(&x, &y);
    let ss: f64 = x
        .iter()
        .zip(&y)
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    Ok(SyncFit {
        offset_ps: intercept,
        drift_ps_per_s: slope * 1e12,
        residual_rms_ps: (ss / (n as f64 - 2.0)).sqrt(),
        pulses: n,
    })
}

/// How the configured window width maps to the accepted time difference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowConvention {
    /// `|Δt| ≤ w`.
    #[default]
    PlusMinus,
    /// `|Δt| ≤ w/2`: the width is the full extent of the window.
    Total,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoincidenceWindow {
    pub width_ps: f64,
    #[serde(default)]
    pub convention: WindowConvention,
}

impl CoincidenceWindow {
    pub fn new(width_ps: f64) -> Self {
        CoincidenceWindow {
            width_ps,
            convention: WindowConvention::PlusMinus,
        }
    }

    /// Largest accepted `|Δt|`.
    pub fn max_delta_ps(&self) -> f64 {
        match self.convention {
            WindowConvention::PlusMinus => self.width_ps,
            WindowConvention::Total => 0.5 * self.width_ps,
        }
    }

    /// Total length of the acceptance interval, the `τ` of accidental
    /// coincidences.
    pub fn acceptance_width_ps(&self) -> f64 {
        2.0 * self.max_delta_ps()
    }
}

/// A matched detection pair on the station-1 clock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceRecord {
    pub t1_ps: f64,
    pub t2_ps: f64,
    pub basis1: u8,
    pub basis2: u8,
    pub outcome1: i8,
    pub outcome2: i8,
}

/// Index pairs `(i, j)` into the non-sync tags of each stream.
pub type Pairing = Vec<(usize, usize)>;

fn check_sorted(tags: &[TimeTag], stream: usize) -> Result<(), SyncError> {
    match tags.windows(2).position(|w| w[1].time_ps < w[0].time_ps) {
        Some(i) => Err(SyncError::Unsorted { stream, index: i + 1 }),
        None => Ok(()),
    }
}

/// Matches detections of the two streams.
///
/// Stream 2 is mapped onto stream 1's clock, sync tags are skipped, and all
/// candidate pairs with `|Δt|` inside the window are collected by a
/// two-cursor sweep. Candidates are then accepted greedily in order of
/// increasing `|Δt|`, ties going to the earlier tag (then lower indices),
/// and each tag is used at most once.
pub fn match_coincidences(
    tags1: &[TimeTag],
    tags2: &[TimeTag],
    fit: &SyncFit,
    window: &CoincidenceWindow,
) -> Result<Vec<CoincidenceRecord>, SyncError> {
    let (d1, d2, pairs) = match_indices(tags1, tags2, fit, window)?;
    Ok(pairs
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = (&d1[i], &d2[j]);
            CoincidenceRecord {
                t1_ps: a.0,
                t2_ps: b.0,
                basis1: a.1.basis_index,
                basis2: b.1.basis_index,
                outcome1: a.1.outcome().unwrap_or(0),
                outcome2: b.1.outcome().unwrap_or(0),
            }
        })
        .collect())
}

type Detections<'a> = Vec<(f64, &'a TimeTag)>;

/// Core of [`match_coincidences`]: returns the mapped detections and the
/// accepted pairs sorted by the station-1 index.
pub fn match_indices<'a>(
    tags1: &'a [TimeTag],
    tags2: &'a [TimeTag],
    fit: &SyncFit,
    window: &CoincidenceWindow,
) -> Result<(Detections<'a>, Detections<'a>, Pairing), SyncError> {
    if !(window.width_ps > 0.0) {
        return Err(SyncError::BadWindow(window.width_ps));
    }
    check_sorted(tags1, 1)?;
    check_sorted(tags2, 2)?;
    let d1: Detections = tags1.iter().filter(|t| !t.is_sync()).map(|t| (t.time_ps, t)).collect();
    let d2: Detections = tags2
        .iter()
        .filter(|t| !t.is_sync())
        .map(|t| (fit.to_first_clock(t.time_ps), t))
        .collect();
    let w = window.max_delta_ps();

    let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
    let mut lo = 0usize;
    for (i, (t1, _)) in d1.iter().enumerate() {
        while lo < d2.len() && d2[lo].0 < t1 - w {
            lo += 1;
        }
        let mut j = lo;
        while j < d2.len() && d2[j].0 <= t1 + w {
            let dt = (d2[j].0 - t1).abs();
            if dt <= w {
                candidates.push((dt, t1.min(d2[j].0), i, j));
            }
            j += 1;
        }
    }
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut used1 = vec![false; d1.len()];
    let mut used2 = vec![false; d2.len()];
    let mut pairs = Vec::new();
    for (_, _, i, j) in candidates {
        if !used1[i] && !used2[j] {
            used1[i] = true;
            used2[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    Ok((d1, d2, pairs))
}

/// Expected rate of chance coincidences, `R1·R2·τ`.
pub fn accidental_rate(singles1_hz: f64, singles2_hz: f64, window_ps: f64) -> f64 {
    singles1_hz * singles2_hz * window_ps * 1e-12
}

pub fn write_coincidences<W: Write>(w: W, records: &[CoincidenceRecord]) -> io::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(COINCIDENCE_HEADER)?;
    for r in records {
        wr.write_record(&[
            format!("{}", r.t1_ps.round() as i64),
            format!("{}", r.t2_ps.round() as i64),
            r.basis1.to_string(),
            r.basis2.to_string(),
            r.outcome1.to_string(),
            r.outcome2.to_string(),
        ])?;
    }
    wr.flush()
}

pub fn read_coincidences(bytes: &[u8]) -> Result<Vec<CoincidenceRecord>, csv::Error> {
    let mut rd = csv::Reader::from_reader(bytes);
    rd.deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventsim::CHANNEL_SYNC;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sync_stream(n: usize, period: f64, f: impl Fn(f64) -> f64) -> Vec<TimeTag> {
        (0..n).map(|k| TimeTag::new(f(k as f64 * period), CHANNEL_SYNC, 0)).collect()
    }

    #[test]
    fn identical_streams_fit_to_zero() {
        let s = sync_stream(100, 1e7, |t| t + 5e6);
        let fit = fit_clock(&s, &s).unwrap();
        assert_eq!(fit.offset_ps, 0.0);
        assert_eq!(fit.drift_ps_per_s, 0.0);
        assert_eq!(fit.residual_rms_ps, 0.0);
    }

    #[test]
    fn injected_offset_and_drift_are_recovered() {
        let s1 = sync_stream(10_000, 1e7, |t| t + 1e6);
        let s2 = sync_stream(10_000, 1e7, |t| {
            let t1 = t + 1e6;
            t1 + 12345.0 + 3.0 * t1 * 1e-12
        });
        let fit = fit_clock(&s1, &s2).unwrap();
        assert!((fit.offset_ps - 12345.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.drift_ps_per_s - 3.0).abs() < 1e-6);
        assert!(fit.residual_rms_ps < 1e-3);
    }

    #[test]
    fn too_few_and_ambiguous() {
        let s = sync_stream(5, 1e7, |t| t);
        assert_eq!(fit_clock(&s, &s), Err(SyncError::TooFewSyncTags { stream: 1, found: 5 }));
        // Jitter comparable to the period.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 300.0).unwrap();
        let noisy: Vec<TimeTag> = (0..200)
            .map(|k| TimeTag::new(1e5 + k as f64 * 1000.0 + normal.sample(&mut rng), CHANNEL_SYNC, 0))
            .collect();
        let mut sorted = noisy.clone();
        sorted.sort_by(|a, b| a.time_ps.total_cmp(&b.time_ps));
        assert!(matches!(fit_clock(&sorted, &sorted), Err(SyncError::Ambiguous { .. })));
    }

    #[test]
    fn inverse_fit_round_trips() {
        let f = SyncFit {
            offset_ps: 1234.0,
            drift_ps_per_s: 50.0,
            residual_rms_ps: 0.0,
            pulses: 0,
        };
        let t1 = 3.3e12;
        let t2 = t1 + f.offset_ps + f.drift_ps_per_s * t1 * 1e-12;
        assert!((f.to_first_clock(t2) - t1).abs() < 1e-3);
        let g = f.inverse();
        assert!((t2 + g.offset_ps + g.drift_ps_per_s * t2 * 1e-12 - t1).abs() < 1e-3);
    }

    fn det(t: f64) -> TimeTag {
        TimeTag::new(t, 0, 0)
    }

    #[test]
    fn matching_examples() {
        let fit = SyncFit::identity();
        let w = CoincidenceWindow::new(2500.0);
        assert!(match_coincidences(&[], &[det(1.0)], &fit, &w).unwrap().is_empty());
        assert_eq!(match_coincidences(&[det(0.0)], &[det(2400.0)], &fit, &w).unwrap().len(), 1);
        assert_eq!(match_coincidences(&[det(0.0)], &[det(2500.0)], &fit, &w).unwrap().len(), 1);
        assert!(match_coincidences(&[det(0.0)], &[det(2501.0)], &fit, &w).unwrap().is_empty());
        let half = CoincidenceWindow {
            width_ps: 2500.0,
            convention: WindowConvention::Total,
        };
        assert!(match_coincidences(&[det(0.0)], &[det(2400.0)], &fit, &half).unwrap().is_empty());
        assert_eq!(half.acceptance_width_ps(), 2500.0);
        assert_eq!(w.acceptance_width_ps(), 5000.0);
    }

    #[test]
    fn greedy_prefers_smaller_delta_then_earlier() {
        let fit = SyncFit::identity();
        let w = CoincidenceWindow::new(100.0);
        // 50 is closer to 60 than 0 is.
        let r = match_coincidences(&[det(0.0), det(50.0)], &[det(60.0)], &fit, &w).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].t1_ps, 50.0);
        // Exact tie: |0-50| = |100-50|; the earlier tag wins.
        let r = match_coincidences(&[det(0.0), det(100.0)], &[det(50.0)], &fit, &w).unwrap();
        assert_eq!(r[0].t1_ps, 0.0);
    }

    #[test]
    fn sync_tags_are_ignored_and_unsorted_rejected() {
        let fit = SyncFit::identity();
        let w = CoincidenceWindow::new(100.0);
        let s = TimeTag::new(0.0, CHANNEL_SYNC, 0);
        assert!(match_coincidences(&[s], &[s], &fit, &w).unwrap().is_empty());
        assert_eq!(
            match_coincidences(&[det(5.0), det(1.0)], &[], &fit, &w),
            Err(SyncError::Unsorted { stream: 1, index: 1 })
        );
        assert!(match_coincidences(&[], &[], &fit, &CoincidenceWindow::new(0.0)).is_err());
    }

    #[test]
    fn accidental_rate_examples() {
        assert_eq!(accidental_rate(3000.0, 3000.0, 0.0), 0.0);
        assert!((accidental_rate(3000.0, 3000.0, 2500.0) - 2.25e-2).abs() < 1e-15);
        assert_eq!(accidental_rate(10.0, 20.0, 10.0) * 2.0, accidental_rate(10.0, 20.0, 20.0));
    }

    #[test]
    fn coincidence_csv_round_trip() {
        let r = vec![CoincidenceRecord {
            t1_ps: 10.0,
            t2_ps: 12.0,
            basis1: 0,
            basis2: 1,
            outcome1: 1,
            outcome2: -1,
        }];
        let mut buf = Vec::new();
        write_coincidences(&mut buf, &r).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "t1_ps,t2_ps,basis1,basis2,outcome1,outcome2\n10,12,0,1,1,-1\n"
        );
        assert_eq!(read_coincidences(&buf).unwrap(), r);
    }
}
