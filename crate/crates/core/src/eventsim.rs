//! Monte Carlo time-tag generation for the two ground stations.
//!
//! Simulated time is cut into fixed slices. Each slice draws from its own
//! substream `("slice", k)` of the run's [`SeedTree`], so slices can run on any
//! number of threads and the concatenated result is always the same.
//!
//! Inside a slice the pair emissions are never materialised one by one: the
//! number of pairs is Poisson, and the split into "both photons detected",
//! "only the first", "only the second" and "neither" follows from binomial
//! thinning, which is exact for a Poisson process. Only the survivors get
//! times, bases and outcomes.

use std::io::{self, Read, Write};
use std::num::NonZeroU32;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Downlink, Pass};
use crate::linkbudget::{downlink_loss, LinkError, LinkParams};
use crate::quantum::{measurement_probabilities, AnalyzerSetting, TwoQubitState};
use crate::rng::SeedTree;

pub const CHANNEL_PLUS: u8 = 0;
pub const CHANNEL_MINUS: u8 = 1;
pub const CHANNEL_SYNC: u8 = 2;

/// Loss above which a link is treated as dark.
pub const OPAQUE_LOSS_DB: f64 = 200.0;
pub const MAX_DARK_RATE_HZ: f64 = 20.0;
pub const MAX_BACKGROUND_RATE_HZ: f64 = 1e5;

pub const TAG_MAGIC: &[u8; 4] = b"ETT1";
pub const TAG_HEADER_BYTES: usize = 8;
pub const TAG_RECORD_BYTES: usize = 12;
pub const TAG_CSV_HEADER: [&str; 3] = ["time_ps", "channel", "basis_index"];
pub const GROUND_TRUTH_HEADER: [&str; 7] = ["pair_id", "t1_ps", "t2_ps", "outcome1", "outcome2", "basis1", "basis2"];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameter {field} = {value}")]
    InvalidParameter { field: String, value: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Link(#[from] LinkError),
}

fn invalid(field: &str, value: f64) -> SimError {
    SimError::InvalidParameter {
        field: field.to_string(),
        value,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    pub efficiency: f64,
    pub dark_rate_hz: f64,
    pub background_rate_hz: f64,
    pub time_jitter_sigma_ps: f64,
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(invalid("efficiency", self.efficiency));
        }
        if !(0.0..=MAX_DARK_RATE_HZ).contains(&self.dark_rate_hz) {
            return Err(invalid("dark_rate_hz", self.dark_rate_hz));
        }
        if !(0.0..=MAX_BACKGROUND_RATE_HZ).contains(&self.background_rate_hz) {
            return Err(invalid("background_rate_hz", self.background_rate_hz));
        }
        if !(self.time_jitter_sigma_ps >= 0.0 && self.time_jitter_sigma_ps.is_finite()) {
            return Err(invalid("time_jitter_sigma_ps", self.time_jitter_sigma_ps));
        }
        Ok(())
    }

    pub fn noise_rate_hz(&self) -> f64 {
        self.dark_rate_hz + self.background_rate_hz
    }
}

/// Random basis switching: a new choice every `1/decision_rate_hz`, applied
/// after a delay drawn uniformly from `[output_delay_min_s, output_delay_max_s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QrngParams {
    pub decision_rate_hz: f64,
    pub output_delay_min_s: f64,
    pub output_delay_max_s: f64,
}

impl QrngParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.decision_rate_hz > 0.0 && self.decision_rate_hz.is_finite()) {
            return Err(invalid("decision_rate_hz", self.decision_rate_hz));
        }
        if !(self.output_delay_min_s >= 0.0) {
            return Err(invalid("output_delay_min_s", self.output_delay_min_s));
        }
        if !(self.output_delay_max_s >= self.output_delay_min_s && self.output_delay_max_s.is_finite()) {
            return Err(invalid("output_delay_max_s", self.output_delay_max_s));
        }
        Ok(())
    }

    /// Range of the time between a setting becoming certain (its random
    /// number is output) and a measurement using it: at least the maximum
    /// output delay, at most that plus one decision period.
    pub fn setting_to_measurement_range_s(&self) -> (f64, f64) {
        (self.output_delay_max_s, self.output_delay_max_s + 1.0 / self.decision_rate_hz)
    }
}

/// Station clock relative to true time: `local = t + offset + drift·t[s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockModel {
    pub offset_ps: f64,
    pub drift_ps_per_s: f64,
    pub sync_pulse_rate_hz: f64,
    pub sync_jitter_sigma_ps: f64,
}

impl ClockModel {
    pub fn ideal(sync_pulse_rate_hz: f64) -> Self {
        ClockModel {
            offset_ps: 0.0,
            drift_ps_per_s: 0.0,
            sync_pulse_rate_hz,
            sync_jitter_sigma_ps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sync_pulse_rate_hz > 0.0 && self.sync_pulse_rate_hz.is_finite()) {
            return Err(invalid("sync_pulse_rate_hz", self.sync_pulse_rate_hz));
        }
        if !(self.sync_jitter_sigma_ps >= 0.0 && self.sync_jitter_sigma_ps.is_finite()) {
            return Err(invalid("sync_jitter_sigma_ps", self.sync_jitter_sigma_ps));
        }
        if !(self.offset_ps.is_finite() && self.drift_ps_per_s.is_finite()) {
            return Err(SimError::Invalid("clock offset and drift must be finite".into()));
        }
        Ok(())
    }

    pub fn to_local(&self, true_ps: f64) -> f64 {
        true_ps + self.offset_ps + self.drift_ps_per_s * true_ps * 1e-12
    }
}

/// One detection event as seen by a station's time tagger.
///
/// Times are kept as `f64` picoseconds in memory; the file formats round
/// them to integers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeTag {
    pub time_ps: f64,
    pub channel: u8,
    pub basis_index: u8,
    /// Ground-truth pair label; never written to tag files.
    pub pair_id: Option<NonZeroU32>,
}

impl TimeTag {
    pub fn new(time_ps: f64, channel: u8, basis_index: u8) -> Self {
        TimeTag {
            time_ps,
            channel,
            basis_index,
            pair_id: None,
        }
    }

    pub fn is_sync(&self) -> bool {
        self.channel == CHANNEL_SYNC
    }

    /// `+1` for channel 0, `−1` for channel 1, `None` for sync.
    pub fn outcome(&self) -> Option<i8> {
        match self.channel {
            CHANNEL_PLUS => Some(1),
            CHANNEL_MINUS => Some(-1),
            _ => None,
        }
    }
}

/// Label of a pair whose two photons were both detected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub pair_id: u32,
    pub t1_ps: u64,
    pub t2_ps: u64,
    pub outcome1: i8,
    pub outcome2: i8,
    pub basis1: u8,
    pub basis2: u8,
}

/// Everything one station needs to turn photons into tags.
#[derive(Clone, Debug, PartialEq)]
pub struct StationSetup {
    /// Detectors behind the `+` and `−` ports.
    pub detectors: [DetectorParams; 2],
    pub qrng: QrngParams,
    /// Analyzer settings selectable by the QRNG; the tag's basis index is
    /// the position in this list.
    pub settings: Vec<AnalyzerSetting>,
    pub clock: ClockModel,
    /// Constant link delay placeholder.
    pub propagation_delay_ps: f64,
}

impl StationSetup {
    pub fn validate(&self) -> Result<(), SimError> {
        for d in &self.detectors {
            d.validate()?;
        }
        self.qrng.validate()?;
        self.clock.validate()?;
        if self.settings.is_empty() || self.settings.len() > 256 {
            return Err(SimError::Invalid(format!(
                "a station needs 1..=256 analyzer settings, got {}",
                self.settings.len()
            )));
        }
        if !(self.propagation_delay_ps >= 0.0 && self.propagation_delay_ps.is_finite()) {
            return Err(invalid("propagation_delay_ps", self.propagation_delay_ps));
        }
        Ok(())
    }

    /// Detection probability factor of the station's detectors (mean of the
    /// two ports).
    pub fn mean_efficiency(&self) -> f64 {
        0.5 * (self.detectors[0].efficiency + self.detectors[1].efficiency)
    }

    fn noise_rate_hz(&self) -> f64 {
        self.detectors.iter().map(DetectorParams::noise_rate_hz).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub state: TwoQubitState,
    pub pair_rate_hz: f64,
    pub stations: [StationSetup; 2],
    pub slice_s: f64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.state.validate().map_err(|e| SimError::Invalid(format!("source state: {e}")))?;
        if !(self.pair_rate_hz >= 0.0 && self.pair_rate_hz.is_finite()) {
            return Err(invalid("pair_rate_hz", self.pair_rate_hz));
        }
        if !(self.slice_s > 0.0 && self.slice_s.is_finite()) {
            return Err(invalid("slice_s", self.slice_s));
        }
        for s in &self.stations {
            s.validate()?;
        }
        Ok(())
    }
}

/// Channel loss of both links as a function of time since the start of the
/// simulated interval; linear interpolation between knots, constant outside.
#[derive(Clone, Debug, PartialEq)]
pub struct LossProfile {
    knots: Vec<(f64, [f64; 2])>,
}

impl LossProfile {
    pub fn constant(loss1_db: f64, loss2_db: f64) -> Self {
        LossProfile {
            knots: vec![(0.0, [loss1_db, loss2_db])],
        }
    }

    pub fn from_knots(knots: Vec<(f64, [f64; 2])>) -> Result<Self, SimError> {
        if knots.is_empty() {
            return Err(SimError::Invalid("loss profile needs at least one knot".into()));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(SimError::Invalid("loss profile times must increase strictly".into()));
        }
        if knots.iter().any(|(_, l)| l.iter().any(|x| x.is_nan() || *x < 0.0)) {
            return Err(SimError::Invalid("losses must be non-negative".into()));
        }
        Ok(LossProfile { knots })
    }

    /// Channel losses (everything except the detectors) along a pass, with
    /// time measured from the first sample.
    pub fn from_pass(pass: &Pass, links: [&LinkParams; 2]) -> Result<Self, SimError> {
        let t0 = pass
            .samples
            .first()
            .ok_or_else(|| SimError::Invalid("pass has no samples".into()))?
            .t_s;
        let mut knots = Vec::with_capacity(pass.samples.len());
        for s in &pass.samples {
            let l1 = downlink_loss(s, Downlink::First, links[0])?.channel_db();
            let l2 = downlink_loss(s, Downlink::Second, links[1])?.channel_db();
            knots.push((s.t_s - t0, [l1, l2]));
        }
        Self::from_knots(knots)
    }

    pub fn span_s(&self) -> f64 {
        self.knots.last().map_or(0.0, |k| k.0) - self.knots[0].0
    }

    pub fn loss_at(&self, t_s: f64) -> [f64; 2] {
        let k = &self.knots;
        let i = k.partition_point(|(t, _)| *t <= t_s);
        if i == 0 {
            return k[0].1;
        }
        if i == k.len() {
            return k[k.len() - 1].1;
        }
        let (ta, la) = k[i - 1];
        let (tb, lb) = k[i];
        let f = (t_s - ta) / (tb - ta);
        [la[0] + f * (lb[0] - la[0]), la[1] + f * (lb[1] - la[1])]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SimulationStats {
    pub emitted_pairs: u64,
    pub both_detected: u64,
    pub only_first: u64,
    pub only_second: u64,
    pub noise_tags: [u64; 2],
    pub sync_tags: [u64; 2],
    pub dropped_negative_time: u64,
}

impl SimulationStats {
    fn add(&mut self, o: &SimulationStats) {
        self.emitted_pairs += o.emitted_pairs;
        self.both_detected += o.both_detected;
        self.only_first += o.only_first;
        self.only_second += o.only_second;
        for i in 0..2 {
            self.noise_tags[i] += o.noise_tags[i];
            self.sync_tags[i] += o.sync_tags[i];
        }
        self.dropped_negative_time += o.dropped_negative_time;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimulationOutput {
    pub tags: [Vec<TimeTag>; 2],
    pub ground_truth: Vec<GroundTruthRecord>,
    pub stats: SimulationStats,
}

/// Homogeneous Poisson arrival times in picoseconds over `[0, duration)`.
pub fn emit_pairs(rate_hz: f64, duration_s: f64, seed: u64) -> Vec<f64> {
    if !(rate_hz > 0.0) || !(duration_s > 0.0) {
        return Vec::new();
    }
    let mut rng = SeedTree::new(seed).substream("emission", 0);
    let gap = Exp::new(rate_hz).expect("positive rate");
    let mut out = Vec::with_capacity((rate_hz * duration_s * 1.01) as usize + 16);
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        if t >= duration_s {
            break;
        }
        out.push(t * 1e12);
    }
    out
}

/// Expected count rate at one detector port pair: signal after loss and
/// efficiency, plus dark and background.
pub fn singles_rate_estimate(pair_rate_hz: f64, loss_db: f64, det: &DetectorParams) -> f64 {
    pair_rate_hz * 10f64.powf(-loss_db / 10.0) * det.efficiency + det.dark_rate_hz + det.background_rate_hz
}

/// Photon survival probability: channel loss times detector efficiency.
pub fn survival_probability(loss_db: f64, efficiency: f64) -> f64 {
    if loss_db >= OPAQUE_LOSS_DB {
        0.0
    } else {
        10f64.powf(-loss_db / 10.0) * efficiency
    }
}

/// Precomputed Born-rule tables for every setting pair.
struct OutcomeTables {
    n2: usize,
    joint: Vec<[f64; 4]>,
    first_plus: Vec<f64>,
    second_plus: Vec<f64>,
}

impl OutcomeTables {
    fn new(state: &TwoQubitState, s1: &[AnalyzerSetting], s2: &[AnalyzerSetting]) -> Self {
        let mut joint = Vec::with_capacity(s1.len() * s2.len());
        for a in s1 {
            for b in s2 {
                let p = measurement_probabilities(state, a, b);
                let total = p.total();
                joint.push(p.as_array().map(|x| x / total));
            }
        }
        // Marginals do not depend on the partner's setting.
        let first_plus = (0..s1.len()).map(|i| joint[i * s2.len()][0] + joint[i * s2.len()][1]).collect();
        let second_plus = (0..s2.len()).map(|j| joint[j][0] + joint[j][2]).collect();
        OutcomeTables {
            n2: s2.len(),
            joint,
            first_plus,
            second_plus,
        }
    }

    fn sample_joint<R: Rng>(&self, b1: u8, b2: u8, rng: &mut R) -> (i8, i8) {
        let p = &self.joint[b1 as usize * self.n2 + b2 as usize];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                return OUTCOMES[k];
            }
        }
        OUTCOMES[3]
    }
}

const OUTCOMES: [(i8, i8); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

fn channel_of(outcome: i8) -> u8 {
    if outcome > 0 {
        CHANNEL_PLUS
    } else {
        CHANNEL_MINUS
    }
}

/// Per-run context shared by all slices.
struct Engine<'a> {
    config: &'a SimulationConfig,
    tree: SeedTree,
    tables: OutcomeTables,
}

struct SliceOutput {
    tags: [Vec<TimeTag>; 2],
    truth: Vec<GroundTruthRecord>,
    stats: SimulationStats,
}

impl<'a> Engine<'a> {
    fn new(config: &'a SimulationConfig, seed: u64) -> Result<Self, SimError> {
        config.validate()?;
        let tables = OutcomeTables::new(&config.state, &config.stations[0].settings, &config.stations[1].settings);
        Ok(Engine {
            config,
            tree: SeedTree::new(seed),
            tables,
        })
    }

    /// Basis index in force at station `i` at true time `t_s`.
    fn active_basis(&self, i: usize, t_s: f64) -> u8 {
        let st = &self.config.stations[i];
        let q = &st.qrng;
        let mut k = (t_s * q.decision_rate_hz).floor() as i64;
        let delay = |k: i64| {
            q.output_delay_min_s + (q.output_delay_max_s - q.output_delay_min_s) * self.tree.unit("qrng-delay", i as u64, k as u64)
        };
        if t_s < k as f64 / q.decision_rate_hz + delay(k) {
            k -= 1;
        }
        (self.tree.hash("qrng-choice", i as u64, k as u64) % st.settings.len() as u64) as u8
    }

    fn detection_time<R: Rng>(&self, i: usize, t_emit_s: f64, outcome: i8, rng: &mut R) -> f64 {
        let st = &self.config.stations[i];
        let det = &st.detectors[channel_of(outcome) as usize];
        let jitter = gaussian(rng, det.time_jitter_sigma_ps);
        st.clock.to_local(t_emit_s * 1e12 + st.propagation_delay_ps + jitter)
    }

    fn single_outcome<R: Rng>(&self, i: usize, basis: u8, rng: &mut R) -> i8 {
        let p_plus = if i == 0 {
            self.tables.first_plus[basis as usize]
        } else {
            self.tables.second_plus[basis as usize]
        };
        if rng.gen::<f64>() < p_plus {
            1
        } else {
            -1
        }
    }

    fn arrival_s(&self, i: usize, t_emit_s: f64) -> f64 {
        t_emit_s + self.config.stations[i].propagation_delay_ps * 1e-12
    }

    /// Photons of one pair that reached the detectors. `survived` says which
    /// arms made it.
    fn detect_pair<R: Rng>(&self, t_s: f64, survived: [bool; 2], pair_id: u32, rng: &mut R, out: &mut SliceOutput) {
        let b = [0, 1].map(|i| self.active_basis(i, self.arrival_s(i, t_s)));
        match survived {
            [true, true] => {
                let (o1, o2) = self.tables.sample_joint(b[0], b[1], rng);
                let t1 = self.detection_time(0, t_s, o1, rng);
                let t2 = self.detection_time(1, t_s, o2, rng);
                let id = NonZeroU32::new(pair_id);
                out.tags[0].push(TimeTag {
                    time_ps: t1,
                    channel: channel_of(o1),
                    basis_index: b[0],
                    pair_id: id,
                });
                out.tags[1].push(TimeTag {
                    time_ps: t2,
                    channel: channel_of(o2),
                    basis_index: b[1],
                    pair_id: id,
                });
                out.truth.push(GroundTruthRecord {
                    pair_id,
                    t1_ps: t1.round().max(0.0) as u64,
                    t2_ps: t2.round().max(0.0) as u64,
                    outcome1: o1,
                    outcome2: o2,
                    basis1: b[0],
                    basis2: b[1],
                });
                out.stats.both_detected += 1;
            }
            [true, false] | [false, true] => {
                let i = if survived[0] { 0 } else { 1 };
                let o = self.single_outcome(i, b[i], rng);
                let t = self.detection_time(i, t_s, o, rng);
                out.tags[i].push(TimeTag::new(t, channel_of(o), b[i]));
                if i == 0 {
                    out.stats.only_first += 1;
                } else {
                    out.stats.only_second += 1;
                }
            }
            [false, false] => {}
        }
    }

    /// Dark/background counts and sync pulses in `[a, b)` (true time, s).
    fn add_noise_and_sync<R: Rng>(&self, a: f64, b: f64, rng: &mut R, out: &mut SliceOutput) {
        let rate = self.config.stations[0].clock.sync_pulse_rate_hz;
        let first = (a * rate).ceil() as u64;
        let end = (b * rate).ceil() as u64;
        for i in 0..2 {
            let st = &self.config.stations[i];
            let n = poisson(rng, st.noise_rate_hz() * (b - a));
            out.tags[i].reserve_exact((n + end.saturating_sub(first)) as usize);
            for _ in 0..n {
                let t = rng.gen_range(a..b);
                let ch = if rng.gen::<bool>() { CHANNEL_PLUS } else { CHANNEL_MINUS };
                let basis = self.active_basis(i, t);
                out.tags[i].push(TimeTag::new(st.clock.to_local(t * 1e12), ch, basis));
            }
            out.stats.noise_tags[i] += n;
        }
        for k in first..end {
            let t_ps = k as f64 / rate * 1e12;
            for i in 0..2 {
                let st = &self.config.stations[i];
                let jitter = gaussian(rng, st.clock.sync_jitter_sigma_ps);
                let local = st.clock.to_local(t_ps + st.propagation_delay_ps + jitter);
                out.tags[i].push(TimeTag::new(local, CHANNEL_SYNC, 0));
                out.stats.sync_tags[i] += 1;
            }
        }
    }

    fn run_slice(&self, k: u64, duration_s: f64, losses: &LossProfile) -> SliceOutput {
        let slice = self.config.slice_s;
        let a = k as f64 * slice;
        let b = ((k + 1) as f64 * slice).min(duration_s);
        let mut rng = self.tree.substream("slice", k);
        let mut out = SliceOutput {
            tags: [Vec::new(), Vec::new()],
            truth: Vec::new(),
            stats: SimulationStats::default(),
        };
        let loss = losses.loss_at(0.5 * (a + b));
        let eta = [0, 1].map(|i| survival_probability(loss[i], self.config.stations[i].mean_efficiency()));

        let n = poisson(&mut rng, self.config.pair_rate_hz * (b - a));
        out.stats.emitted_pairs = n;
        let p_first = eta[0];
        let first = binomial(&mut rng, n, p_first);
        let both = binomial(&mut rng, first, eta[1]);
        let only_second = binomial(&mut rng, n - first, eta[1]);
        let mut events: Vec<(f64, [bool; 2])> = Vec::with_capacity((first + only_second) as usize);
        for tags in out.tags.iter_mut() {
            tags.reserve_exact(events.capacity());
        }
        for _ in 0..both {
            events.push((rng.gen_range(a..b), [true, true]));
        }
        for _ in 0..first - both {
            events.push((rng.gen_range(a..b), [true, false]));
        }
        for _ in 0..only_second {
            events.push((rng.gen_range(a..b), [false, true]));
        }
        events.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut next_id = 1u32;
        for (t, survived) in events {
            let id = if survived == [true, true] {
                next_id += 1;
                next_id - 1
            } else {
                0
            };
            self.detect_pair(t, survived, id, &mut rng, &mut out);
        }
        self.add_noise_and_sync(a, b, &mut rng, &mut out);
        out
    }
}

fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean > 0.0 {
        Poisson::new(mean).expect("positive mean").sample(rng) as u64
    } else {
        0
    }
}

fn binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p).expect("valid binomial").sample(rng)
    }
}

/// Stitches slice outputs in slice order: pair ids become global, streams
/// are sorted (stable, so equal times keep slice order) and tags before the
/// clock origin are dropped together with their ground-truth rows.
#[derive(Default)]
struct Assembler {
    out: SimulationOutput,
    offset: u32,
}

impl Assembler {
    fn push(&mut self, mut s: SliceOutput) {
        let offset = self.offset;
        if offset > 0 {
            for tags in s.tags.iter_mut() {
                for t in tags.iter_mut() {
                    if let Some(id) = t.pair_id {
                        t.pair_id = NonZeroU32::new(id.get() + offset);
                    }
                }
            }
            for r in s.truth.iter_mut() {
                r.pair_id += offset;
            }
        }
        self.offset += s.truth.len() as u32;
        let out = &mut self.out;
        out.stats.add(&s.stats);
        for i in 0..2 {
            out.tags[i].append(&mut s.tags[i]);
        }
        out.ground_truth.append(&mut s.truth);
    }

    fn finish(self) -> SimulationOutput {
        let mut out = self.out;
        let mut dropped_pairs = Vec::new();
        for tags in out.tags.iter_mut() {
            let before = tags.len();
            tags.retain(|t| {
                let keep = t.time_ps >= 0.0;
                if !keep {
                    if let Some(id) = t.pair_id {
                        dropped_pairs.push(id.get());
                    }
                }
                keep
            });
            out.stats.dropped_negative_time += (before - tags.len()) as u64;
            tags.sort_by(|x, y| x.time_ps.total_cmp(&y.time_ps));
        }
        if !dropped_pairs.is_empty() {
            dropped_pairs.sort_unstable();
            out.ground_truth.retain(|r| dropped_pairs.binary_search(&r.pair_id).is_err());
        }
        out
    }
}

/// Slices simulated concurrently before their output is stitched in; bounds
/// the memory held in per-slice buffers.
const SLICES_PER_BATCH: u64 = 256;

/// Full simulation of `duration_s` seconds with time-varying link losses.
///
/// Deterministic for a fixed `seed`, independent of the rayon thread count.
pub fn simulate(config: &SimulationConfig, losses: &LossProfile, duration_s: f64, seed: u64) -> Result<SimulationOutput, SimError> {
    if !(duration_s >= 0.0 && duration_s.is_finite()) {
        return Err(invalid("duration_s", duration_s));
    }
    let engine = Engine::new(config, seed)?;
    let n_slices = (duration_s / config.slice_s).ceil() as u64;
    let mut asm = Assembler::default();
    let mut start = 0;
    while start < n_slices {
        let end = (start + SLICES_PER_BATCH).min(n_slices);
        let batch: Vec<SliceOutput> = (start..end)
            .into_par_iter()
            .map(|k| engine.run_slice(k, duration_s, losses))
            .collect();
        for s in batch {
            asm.push(s);
        }
        start = end;
    }
    Ok(asm.finish())
}

/// Per-photon version of the detection stage for explicit emission times
/// (ps, sorted or not): each photon survives independently with
/// [`survival_probability`]. Noise and sync cover `[0, duration_s)`.
pub fn transmit_and_detect(
    emissions_ps: &[f64],
    config: &SimulationConfig,
    loss_db: [f64; 2],
    duration_s: f64,
    seed: u64,
) -> Result<SimulationOutput, SimError> {
    let engine = Engine::new(config, seed)?;
    let eta = [0, 1].map(|i| survival_probability(loss_db[i], config.stations[i].mean_efficiency()));
    let mut rng: ChaCha8Rng = engine.tree.substream("photons", 0);
    let mut out = SliceOutput {
        tags: [Vec::new(), Vec::new()],
        truth: Vec::new(),
        stats: SimulationStats::default(),
    };
    let mut next_id = 1u32;
    for &t_ps in emissions_ps {
        let survived = [rng.gen::<f64>() < eta[0], rng.gen::<f64>() < eta[1]];
        let id = if survived == [true, true] {
            next_id += 1;
            next_id - 1
        } else {
            0
        };
        engine.detect_pair(t_ps * 1e-12, survived, id, &mut rng, &mut out);
    }
    out.stats.emitted_pairs = emissions_ps.len() as u64;
    if duration_s > 0.0 {
        engine.add_noise_and_sync(0.0, duration_s, &mut rng, &mut out);
    }
    let mut asm = Assembler::default();
    asm.push(out);
    Ok(asm.finish())
}

/// Malformed tag or ground-truth data, located by byte offset.
#[derive(Debug, Error, PartialEq)]
#[error("byte {offset}: {message}")]
pub struct FormatError {
    pub offset: u64,
    pub message: String,
}

fn format_error(offset: u64, message: impl Into<String>) -> FormatError {
    FormatError {
        offset,
        message: message.into(),
    }
}

fn wire_time(tag: &TimeTag) -> io::Result<u64> {
    if !(tag.time_ps >= 0.0 && tag.time_ps < u64::MAX as f64) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("tag time {} ps cannot be stored", tag.time_ps),
        ));
    }
    Ok(tag.time_ps.round() as u64)
}

/// `ETT1` binary stream: 8-byte header then 12-byte little-endian records.
pub fn write_tags_binary<W: Write>(mut w: W, tags: &[TimeTag]) -> io::Result<()> {
    let count = u32::try_from(tags.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "more than u32::MAX tags"))?;
    w.write_all(TAG_MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    let mut buf = Vec::with_capacity(TAG_RECORD_BYTES * tags.len().min(1 << 20));
    for chunk in tags.chunks(1 << 20) {
        buf.clear();
        for t in chunk {
            buf.extend_from_slice(&wire_time(t)?.to_le_bytes());
            buf.push(t.channel);
            buf.push(t.basis_index);
            buf.extend_from_slice(&0u16.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn read_tags_binary(bytes: &[u8]) -> Result<Vec<TimeTag>, FormatError> {
    if bytes.len() < TAG_HEADER_BYTES {
        return Err(format_error(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != TAG_MAGIC {
        return Err(format_error(0, "missing ETT1 magic"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[TAG_HEADER_BYTES..];
    if body.len() != count * TAG_RECORD_BYTES {
        let complete = body.len() / TAG_RECORD_BYTES;
        let offset = if complete < count {
            TAG_HEADER_BYTES + complete * TAG_RECORD_BYTES
        } else {
            TAG_HEADER_BYTES + count * TAG_RECORD_BYTES
        };
        return Err(format_error(
            offset as u64,
            format!("header announces {count} records but body holds {} bytes", body.len()),
        ));
    }
    let mut tags = Vec::with_capacity(count);
    for (k, rec) in body.chunks_exact(TAG_RECORD_BYTES).enumerate() {
        let offset = (TAG_HEADER_BYTES + k * TAG_RECORD_BYTES) as u64;
        let time = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let channel = rec[8];
        if channel > CHANNEL_SYNC {
            return Err(format_error(offset + 8, format!("channel {channel} not in 0..=2")));
        }
        if rec[10] != 0 || rec[11] != 0 {
            return Err(format_error(offset + 10, "reserved field is not zero"));
        }
        tags.push(TimeTag::new(time as f64, channel, rec[9]));
    }
    Ok(tags)
}

pub fn write_tags_csv<W: Write>(w: W, tags: &[TimeTag]) -> io::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(TAG_CSV_HEADER)?;
    for t in tags {
        wr.write_record(&[wire_time(t)?.to_string(), t.channel.to_string(), t.basis_index.to_string()])?;
    }
    wr.flush()
}

fn csv_error(e: csv::Error) -> FormatError {
    let offset = e.position().map_or(0, |p| p.byte());
    format_error(offset, e.to_string())
}

fn check_header(rd: &mut csv::Reader<&[u8]>, expected: &[&str]) -> Result<(), FormatError> {
    let header = rd.headers().map_err(csv_error)?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(format_error(
            0,
            format!(
                "expected header `{}`, found `{}`",
                expected.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, k: usize, name: &str) -> Result<T, FormatError> {
    let offset = rec.position().map_or(0, |p| p.byte());
    let raw = rec.get(k).ok_or_else(|| format_error(offset, format!("missing field {name}")))?;
    raw.trim()
        .parse()
        .map_err(|_| format_error(offset, format!("cannot parse {name} from `{raw}`")))
}

pub fn read_tags_csv(bytes: &[u8]) -> Result<Vec<TimeTag>, FormatError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    check_header(&mut rd, &TAG_CSV_HEADER)?;
    let mut tags = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_error)?;
        let time: u64 = field(&rec, 0, "time_ps")?;
        let channel: u8 = field(&rec, 1, "channel")?;
        if channel > CHANNEL_SYNC {
            let offset = rec.position().map_or(0, |p| p.byte());
            return Err(format_error(offset, format!("channel {channel} not in 0..=2")));
        }
        tags.push(TimeTag::new(time as f64, channel, field(&rec, 2, "basis_index")?));
    }
    Ok(tags)
}

/// Reads either format, recognising the binary one by its magic.
pub fn read_tags(bytes: &[u8]) -> Result<Vec<TimeTag>, FormatError> {
    if bytes.starts_with(TAG_MAGIC) {
        read_tags_binary(bytes)
    } else {
        read_tags_csv(bytes)
    }
}

pub fn write_ground_truth<W: Write>(w: W, records: &[GroundTruthRecord]) -> io::Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(GROUND_TRUTH_HEADER)?;
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()
}

pub fn read_ground_truth(bytes: &[u8]) -> Result<Vec<GroundTruthRecord>, FormatError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    check_header(&mut rd, &GROUND_TRUTH_HEADER)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_error)?;
        out.push(GroundTruthRecord {
            pair_id: field(&rec, 0, "pair_id")?,
            t1_ps: field(&rec, 1, "t1_ps")?,
            t2_ps: field(&rec, 2, "t2_ps")?,
            outcome1: field(&rec, 3, "outcome1")?,
            outcome2: field(&rec, 4, "outcome2")?,
            basis1: field(&rec, 5, "basis1")?,
            basis2: field(&rec, 6, "basis2")?,
        });
    }
    Ok(out)
}

/// Reads a whole stream into memory; convenience for file inputs.
pub fn read_all<R: Read>(mut r: R) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    Ok(buf)
}
