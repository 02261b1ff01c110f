//! Scenario files: one JSON document holding every parameter of a run.
//!
//! Unknown keys are rejected and errors name the offending key path.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, PI};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventsim::{ClockModel, DetectorParams, LossProfile, QrngParams, SimulationConfig, StationSetup};
use crate::geometry::{load_ephemeris, propagate_pass, GroundStation, OrbitModel, Pass};
use crate::linkbudget::LinkParams;
use crate::quantum::{apply_residual, calibrate_handedness, AnalyzerSetting, Handedness, ResidualModel, SourceParams, TwoQubitState};
use crate::timesync::CoincidenceWindow;

pub const SCHEMA: &str = "entdist-scenario/1";

/// Reference two-station scenario (1203 km ground separation).
pub const REFERENCE_JSON: &str = include_str!("../scenarios/micius-1203km.json");
/// Same scenario set up for the H/V and diagonal-basis fidelity run.
pub const REFERENCE_FIDELITY_JSON: &str = include_str!("../scenarios/micius-1203km-fidelity.json");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario key `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("scenario key `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("ephemeris {path}: {message}")]
    Ephemeris { path: PathBuf, message: String },
}

fn invalid(key: impl Into<String>, message: impl ToString) -> ScenarioError {
    ScenarioError::Invalid {
        key: key.into(),
        message: message.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orbit: Option<OrbitModel>,
    /// Ephemeris CSV, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ephemeris: Option<PathBuf>,
    pub stations: [GroundStation; 2],
    pub dt_s: f64,
    pub elevation_cutoff_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensationConfig {
    pub residual_model: ResidualModel,
    /// Single-arm extinction ratio reached by the compensation, `C:1`.
    pub contrast: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// CHSH angles: station 1 `{0, π/4}`, station 2 `{π/8, 3π/8}`.
    Bell,
    /// H/V and diagonal bases at both stations.
    Fidelity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HandednessChoice {
    Calibrate,
    Direct,
    Mirrored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementConfig {
    pub experiment: Experiment,
    /// Frame orientation of station 2's analyzer relative to station 1.
    pub handedness: HandednessChoice,
    /// Measurement time after light-cone arrival of the photon, s.
    pub lag_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationParams {
    pub slice_s: f64,
    /// Defaults to the full pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    /// Placeholder link delay applied to photons and sync pulses alike.
    pub propagation_delay_ps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub links: [LinkParams; 2],
    pub source: SourceParams,
    pub compensation: CompensationConfig,
    /// `[station][port]`, port 0 = `+`, port 1 = `−`.
    pub detectors: [[DetectorParams; 2]; 2],
    pub qrng: [QrngParams; 2],
    pub clocks: [ClockModel; 2],
    pub measurement: MeasurementConfig,
    pub window: CoincidenceWindow,
    pub simulation: SimulationParams,
    pub output_dir: PathBuf,
    /// Where each constant comes from, keyed by parameter path.
    #[serde(default)]
    pub citations: BTreeMap<String, String>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn reference() -> Self {
        Self::from_json(REFERENCE_JSON).expect("reference scenario is valid")
    }

    pub fn reference_fidelity() -> Self {
        Self::from_json(REFERENCE_FIDELITY_JSON).expect("reference fidelity scenario is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCHEMA {
            return Err(invalid("schema", format!("expected `{SCHEMA}`, found `{}`", self.schema)));
        }
        let g = &self.geometry;
        match (&g.orbit, &g.ephemeris) {
            (Some(o), None) => o.validate().map_err(|e| invalid("geometry.orbit", e))?,
            (None, Some(_)) => {}
            _ => return Err(invalid("geometry", "exactly one of `orbit` and `ephemeris` is required")),
        }
        for (i, s) in g.stations.iter().enumerate() {
            s.validate().map_err(|e| invalid(format!("geometry.stations[{i}]"), e))?;
        }
        if !(g.dt_s > 0.0 && g.dt_s.is_finite()) {
            return Err(invalid("geometry.dt_s", format!("{} must be positive", g.dt_s)));
        }
        if !(0.0..90.0).contains(&g.elevation_cutoff_deg) {
            return Err(invalid(
                "geometry.elevation_cutoff_deg",
                format!("{} not in [0, 90)", g.elevation_cutoff_deg),
            ));
        }
        for (i, l) in self.links.iter().enumerate() {
            l.validate().map_err(|e| invalid(format!("links[{i}]"), e))?;
        }
        self.source.validate().map_err(|e| invalid("source", e))?;
        if !(self.compensation.contrast > 1.0) {
            return Err(invalid(
                "compensation.contrast",
                format!("{} must exceed 1", self.compensation.contrast),
            ));
        }
        for (i, ds) in self.detectors.iter().enumerate() {
            for (j, d) in ds.iter().enumerate() {
                d.validate().map_err(|e| invalid(format!("detectors[{i}][{j}]"), e))?;
            }
        }
        for (i, q) in self.qrng.iter().enumerate() {
            q.validate().map_err(|e| invalid(format!("qrng[{i}]"), e))?;
        }
        for (i, c) in self.clocks.iter().enumerate() {
            c.validate().map_err(|e| invalid(format!("clocks[{i}]"), e))?;
        }
        if self.clocks[0].sync_pulse_rate_hz != self.clocks[1].sync_pulse_rate_hz {
            return Err(invalid(
                "clocks[1].sync_pulse_rate_hz",
                "both stations receive the same sync pulses",
            ));
        }
        if !(self.measurement.lag_s >= 0.0) {
            return Err(invalid(
                "measurement.lag_s",
                format!("{} must be non-negative", self.measurement.lag_s),
            ));
        }
        if !(self.window.width_ps > 0.0) {
            return Err(invalid("window.width_ps", format!("{} must be positive", self.window.width_ps)));
        }
        let sim = &self.simulation;
        if !(sim.slice_s > 0.0 && sim.slice_s.is_finite()) {
            return Err(invalid("simulation.slice_s", format!("{} must be positive", sim.slice_s)));
        }
        if let Some(d) = sim.duration_s {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(invalid("simulation.duration_s", format!("{d} must be non-negative")));
            }
        }
        if !(sim.propagation_delay_ps >= 0.0 && sim.propagation_delay_ps.is_finite()) {
            return Err(invalid(
                "simulation.propagation_delay_ps",
                format!("{} must be non-negative", sim.propagation_delay_ps),
            ));
        }
        Ok(())
    }

    /// Pass geometry; `base_dir` resolves a relative ephemeris path.
    pub fn pass(&self, base_dir: &Path) -> Result<Pass, ScenarioError> {
        let g = &self.geometry;
        if let Some(orbit) = &g.orbit {
            return propagate_pass(orbit, &g.stations, g.dt_s, g.elevation_cutoff_deg).map_err(|e| invalid("geometry", e));
        }
        let rel = g.ephemeris.as_ref().expect("validated");
        let path = base_dir.join(rel);
        let file = fs::File::open(&path).map_err(|source| ScenarioError::Io {
            path: path.clone(),
            source,
        })?;
        let samples = load_ephemeris(file).map_err(|e| ScenarioError::Ephemeris {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let window_s = match (samples.first(), samples.last()) {
            (Some(a), Some(b)) => Some((a.t_s, b.t_s)),
            _ => None,
        };
        Ok(Pass { samples, window_s })
    }

    /// Handedness of station 2's analyzer frame.
    pub fn handedness(&self) -> Handedness {
        match self.measurement.handedness {
            HandednessChoice::Direct => Handedness::Direct,
            HandednessChoice::Mirrored => Handedness::Mirrored,
            HandednessChoice::Calibrate => calibrate_handedness(BELL_ANGLES[0], BELL_ANGLES[1]),
        }
    }

    /// Analyzer settings of both stations; the basis index in the tags is
    /// the position in these lists.
    pub fn analyzer_settings(&self) -> [Vec<AnalyzerSetting>; 2] {
        let h = self.handedness();
        let (first, second) = match self.measurement.experiment {
            Experiment::Bell => (BELL_ANGLES[0], BELL_ANGLES[1]),
            // Station 2's nominal angle is chosen so that it projects on the
            // physical diagonal whatever the frame orientation.
            Experiment::Fidelity => ([0.0, FRAC_PI_4], [0.0, (h.sign() * FRAC_PI_4).rem_euclid(PI)]),
        };
        [
            first.iter().map(|&a| AnalyzerSetting::new(a)).collect(),
            second.iter().map(|&a| AnalyzerSetting::with_handedness(a, h)).collect(),
        ]
    }

    /// Source state after the residual of polarization compensation.
    pub fn state(&self) -> Result<TwoQubitState, ScenarioError> {
        let s = self.source.state().map_err(|e| invalid("source", e))?;
        apply_residual(&s, self.compensation.residual_model, self.compensation.contrast).map_err(|e| invalid("compensation", e))
    }

    pub fn simulation_config(&self) -> Result<SimulationConfig, ScenarioError> {
        let settings = self.analyzer_settings();
        let station = |i: usize| StationSetup {
            detectors: self.detectors[i].clone(),
            qrng: self.qrng[i].clone(),
            settings: settings[i].clone(),
            clock: self.clocks[i].clone(),
            propagation_delay_ps: self.simulation.propagation_delay_ps,
        };
        Ok(SimulationConfig {
            state: self.state()?,
            pair_rate_hz: self.source.pair_rate_hz,
            stations: [station(0), station(1)],
            slice_s: self.simulation.slice_s,
        })
    }

    pub fn loss_profile(&self, pass: &Pass) -> Result<LossProfile, ScenarioError> {
        LossProfile::from_pass(pass, [&self.links[0], &self.links[1]]).map_err(|e| invalid("links", e))
    }

    /// Simulated time: the configured duration or the pass length.
    pub fn duration_s(&self, pass: &Pass) -> f64 {
        let span = match (pass.samples.first(), pass.samples.last()) {
            (Some(a), Some(b)) => b.t_s - a.t_s,
            _ => 0.0,
        };
        self.simulation.duration_s.unwrap_or(span)
    }
}

/// Nominal CHSH analyzer angles `[station 1, station 2]`.
pub const BELL_ANGLES: [[f64; 2]; 2] = [[0.0, FRAC_PI_4], [FRAC_PI_8, 3.0 * FRAC_PI_8]];
