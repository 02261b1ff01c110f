//! Space-time separation of source emission, setting choices and
//! measurements.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::eventsim::QrngParams;
use crate::geometry::{GroundStation, PassSample};

/// Speed of light, km/s.
pub const C_KM_S: f64 = 299_792.458;
/// Earth's sidereal rotation rate, rad/s.
pub const EARTH_ROTATION_RAD_S: f64 = 7.292_115_9e-5;
/// Margins within this distance of zero classify as lightlike.
pub const LIGHTLIKE_TOL_KM: f64 = 1e-9;
/// Setting-to-measurement durations the reference experiment covers, s.
pub const REFERENCE_DELAY_RANGE_S: (f64, f64) = (0.2e-6, 200.2e-6);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Spacelike,
    Lightlike,
    Timelike,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventLabel {
    S,
    R1,
    R2,
    M1,
    M2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacetimeEvent {
    pub label: EventLabel,
    pub position_km: Vector3<f64>,
    pub time_s: f64,
}

/// Separation of two events: spacelike iff `|Δx| > c·|Δt|`; the margin is
/// `|Δx| − c·|Δt|` in km.
pub fn interval_classify(a: &SpacetimeEvent, b: &SpacetimeEvent) -> (Classification, f64) {
    let dx = (a.position_km - b.position_km).norm();
    let margin = dx - C_KM_S * (a.time_s - b.time_s).abs();
    let class = if margin.abs() <= LIGHTLIKE_TOL_KM {
        Classification::Lightlike
    } else if margin > 0.0 {
        Classification::Spacelike
    } else {
        Classification::Timelike
    };
    (class, margin)
}

/// Events `[S, R1, R2, M1, M2]` for one pass sample.
///
/// Times are measured from the emission `S`, so margins keep sub-micrometre
/// precision late in the pass. Each measurement happens `lag_s` after the
/// photon's light-cone arrival; the setting used was fixed `delays_s[i]`
/// before the measurement.
pub fn build_events(sample: &PassSample, stations: &[GroundStation; 2], delays_s: [f64; 2], lag_s: f64) -> [SpacetimeEvent; 5] {
    let t_s = 0.0;
    let ranges = [sample.range1_km, sample.range2_km];
    let m = [0, 1].map(|i| t_s + ranges[i] / C_KM_S + lag_s);
    let pos = [0, 1].map(|i| stations[i].position_km());
    [
        SpacetimeEvent {
            label: EventLabel::S,
            position_km: sample.satellite_km,
            time_s: t_s,
        },
        SpacetimeEvent {
            label: EventLabel::R1,
            position_km: pos[0],
            time_s: m[0] - delays_s[0],
        },
        SpacetimeEvent {
            label: EventLabel::R2,
            position_km: pos[1],
            time_s: m[1] - delays_s[1],
        },
        SpacetimeEvent {
            label: EventLabel::M1,
            position_km: pos[0],
            time_s: m[0],
        },
        SpacetimeEvent {
            label: EventLabel::M2,
            position_km: pos[1],
            time_s: m[1],
        },
    ]
}

/// Event pairs examined by [`loophole_report`], as indices into
/// [`build_events`]' output.
pub const PAIRS: [(&str, usize, usize); 6] = [
    ("R1-R2", 1, 2),
    ("R1-M2", 1, 4),
    ("M1-R2", 3, 2),
    ("M1-M2", 3, 4),
    ("R1-S", 1, 0),
    ("R2-S", 2, 0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair: String,
    pub classification: Classification,
    pub worst_margin_km: f64,
    pub worst_sample_t_s: f64,
    pub worst_delays_s: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopholeReport {
    pub pairs: Vec<PairReport>,
    pub all_spacelike: bool,
    pub max_path_difference_km: f64,
    pub delay_range_s: (f64, f64),
    pub measurement_lag_s: f64,
    /// Largest station displacement from Earth rotation over the pass.
    pub earth_rotation_error_km: f64,
    pub warnings: Vec<String>,
    pub assumptions: Vec<String>,
}

pub fn max_path_difference(samples: &[PassSample]) -> f64 {
    samples.iter().map(|s| (s.range1_km - s.range2_km).abs()).fold(0.0, f64::max)
}

/// Displacement of a station by Earth rotation during `duration_s`.
pub fn earth_rotation_displacement_km(station: &GroundStation, duration_s: f64) -> f64 {
    EARTH_ROTATION_RAD_S * (crate::geometry::EARTH_RADIUS_KM + station.altitude_km) * station.latitude_deg.to_radians().cos() * duration_s
}

fn worst_case(samples: &[PassSample], stations: &[GroundStation; 2], delays: &[f64], lag_s: f64) -> Vec<PairReport> {
    let mut out: Vec<PairReport> = PAIRS
        .iter()
        .map(|(name, _, _)| PairReport {
            pair: name.to_string(),
            classification: Classification::Spacelike,
            worst_margin_km: f64::INFINITY,
            worst_sample_t_s: f64::NAN,
            worst_delays_s: [f64::NAN; 2],
        })
        .collect();
    for s in samples {
        for &d1 in delays {
            for &d2 in delays {
                let ev = build_events(s, stations, [d1, d2], lag_s);
                for (k, (_, a, b)) in PAIRS.iter().enumerate() {
                    let (class, margin) = interval_classify(&ev[*a], &ev[*b]);
                    if margin < out[k].worst_margin_km {
                        out[k] = PairReport {
                            pair: out[k].pair.clone(),
                            classification: class,
                            worst_margin_km: margin,
                            worst_sample_t_s: s.t_s,
                            worst_delays_s: [d1, d2],
                        };
                    }
                }
            }
        }
    }
    out
}

/// Worst case (smallest margin) for every event pair over all samples and
/// over the setting-to-measurement delay range derived from `qrng`.
///
/// Margins are concave in the delays, so the endpoints of the range give
/// the minimum; [`worst_case_on_grid`] checks this numerically.
pub fn loophole_report(samples: &[PassSample], stations: &[GroundStation; 2], qrng: &QrngParams, lag_s: f64) -> LoopholeReport {
    let range = qrng.setting_to_measurement_range_s();
    let mut warnings = Vec::new();
    let (lo, hi) = REFERENCE_DELAY_RANGE_S;
    let tol = 1e-15;
    if range.0 < lo - tol || range.1 > hi + tol {
        let msg = format!(
            "setting-to-measurement range [{:.4}, {:.4}] us lies outside the reference [{:.1}, {:.1}] us",
            range.0 * 1e6,
            range.1 * 1e6,
            lo * 1e6,
            hi * 1e6
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if samples.is_empty() {
        warnings.push("pass has no samples".into());
    }
    let pairs = worst_case(samples, stations, &[range.0, range.1], lag_s);
    let duration = match (samples.first(), samples.last()) {
        (Some(a), Some(b)) => b.t_s - a.t_s,
        _ => 0.0,
    };
    LoopholeReport {
        all_spacelike: !samples.is_empty() && pairs.iter().all(|p| p.classification == Classification::Spacelike),
        pairs,
        max_path_difference_km: max_path_difference(samples),
        delay_range_s: range,
        measurement_lag_s: lag_s,
        earth_rotation_error_km: stations
            .iter()
            .map(|s| earth_rotation_displacement_km(s, duration))
            .fold(0.0, f64::max),
        warnings,
        assumptions: vec![
            "stations fixed in an Earth-centred frame; Earth rotation during the pass is neglected".into(),
            "satellite emission event S at the sample time and satellite position".into(),
            "measurement events trail light-cone arrival by the configured lag".into(),
            "setting-to-measurement duration spans [max output delay, max output delay + 1/decision rate]".into(),
            "hidden variables are assumed to originate with the photon pair at S".into(),
        ],
    }
}

/// Same worst case as [`loophole_report`] but scanning `points` delays per
/// station across the range.
pub fn worst_case_on_grid(
    samples: &[PassSample],
    stations: &[GroundStation; 2],
    range_s: (f64, f64),
    lag_s: f64,
    points: usize,
) -> Vec<PairReport> {
    let n = points.max(2);
    let delays: Vec<f64> = (0..n)
        .map(|k| range_s.0 + (range_s.1 - range_s.0) * k as f64 / (n - 1) as f64)
        .collect();
    worst_case(samples, stations, &delays, lag_s)
}
