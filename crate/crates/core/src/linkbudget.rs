//! Downlink attenuation model and the fiber comparison.
//!
//! Each downlink loss is the sum, in dB, of
//!
//! * far-field Gaussian-beam truncation by the receiving aperture,
//! * the mean loss from residual pointing jitter,
//! * plane-parallel atmospheric extinction scaled by airmass `1/sin(e)`,
//! * the fixed optical and detector efficiencies.
//!
//! Turbulence beam wander and scintillation are not modelled.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Downlink, PassSample};

/// Lowest elevation at which the airmass model is used, degrees.
pub const MIN_ELEVATION_DEG: f64 = 5.0;

pub const ATTENUATION_HEADER: [&str; 4] = ["t_s", "loss1_db", "loss2_db", "total_db"];

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("elevation {elevation_deg:.3} deg is below the {MIN_ELEVATION_DEG} deg validity limit of the atmospheric model")]
    ElevationTooLow { elevation_deg: f64 },
    #[error("invalid link parameter {field} = {value}")]
    InvalidParameter { field: &'static str, value: f64 },
}

/// Optical constants of one downlink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    /// Far-field divergence, full angle at the e⁻² intensity radius, rad.
    pub divergence_full_angle_rad: f64,
    pub tx_optics_efficiency: f64,
    pub rx_aperture_diameter_m: f64,
    pub rx_optics_efficiency: f64,
    pub detector_efficiency: f64,
    /// Radial RMS pointing error, rad (`sqrt(E[ρ²])`).
    pub pointing_jitter_sigma_rad: f64,
    pub zenith_atmospheric_transmission: f64,
    pub filter_transmission: f64,
}

impl LinkParams {
    pub fn validate(&self) -> Result<(), LinkError> {
        let fractions = [
            ("tx_optics_efficiency", self.tx_optics_efficiency),
            ("rx_optics_efficiency", self.rx_optics_efficiency),
            ("detector_efficiency", self.detector_efficiency),
            ("zenith_atmospheric_transmission", self.zenith_atmospheric_transmission),
            ("filter_transmission", self.filter_transmission),
        ];
        for (field, value) in fractions {
            if !(value > 0.0 && value <= 1.0) {
                return Err(LinkError::InvalidParameter { field, value });
            }
        }
        for (field, value) in [
            ("divergence_full_angle_rad", self.divergence_full_angle_rad),
            ("rx_aperture_diameter_m", self.rx_aperture_diameter_m),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(LinkError::InvalidParameter { field, value });
            }
        }
        let sigma = self.pointing_jitter_sigma_rad;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(LinkError::InvalidParameter {
                field: "pointing_jitter_sigma_rad",
                value: sigma,
            });
        }
        Ok(())
    }
}

fn to_db(fraction: f64) -> f64 {
    -10.0 * fraction.log10()
}

/// Fraction of a Gaussian beam collected by a circular aperture at `range_km`,
/// expressed as a loss in dB.
///
/// The beam radius is `w = (θ/2)·L` and the collected fraction
/// `1 − exp(−2r²/w²)` for aperture radius `r`.
pub fn diffraction_loss(range_km: f64, divergence_full_angle_rad: f64, rx_aperture_diameter_m: f64) -> f64 {
    debug_assert!(range_km > 0.0);
    let w = 0.5 * divergence_full_angle_rad * range_km * 1e3;
    let r = 0.5 * rx_aperture_diameter_m;
    // -expm1 keeps precision when the aperture is tiny compared with the beam
    let collected = -(-2.0 * r * r / (w * w)).exp_m1();
    to_db(collected)
}

/// Mean loss from isotropic Gaussian pointing error of radial RMS `sigma`
/// against a beam of full divergence `θ`: `1 / (1 + 8σ²/θ²)`.
pub fn pointing_loss(jitter_sigma_rad: f64, divergence_full_angle_rad: f64) -> f64 {
    let ratio = jitter_sigma_rad / divergence_full_angle_rad;
    10.0 * (8.0 * ratio * ratio).ln_1p() / std::f64::consts::LN_10
}

/// Atmospheric extinction at `elevation_deg` for zenith transmission `T`:
/// `T^(1/sin e)` in dB.
pub fn atmospheric_loss(elevation_deg: f64, zenith_transmission: f64) -> Result<f64, LinkError> {
    if !(elevation_deg >= MIN_ELEVATION_DEG) {
        return Err(LinkError::ElevationTooLow { elevation_deg });
    }
    let airmass = 1.0 / elevation_deg.to_radians().sin();
    Ok(airmass * to_db(zenith_transmission))
}

/// Per-effect contributions to one downlink loss, all in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diffraction_db: f64,
    pub pointing_db: f64,
    pub atmospheric_db: f64,
    /// Transmitter, receiver and filter throughput.
    pub optics_db: f64,
    pub detector_db: f64,
}

impl LossBreakdown {
    pub fn total_db(&self) -> f64 {
        self.diffraction_db + self.pointing_db + self.atmospheric_db + self.optics_db + self.detector_db
    }

    /// Everything except the detector efficiency.
    pub fn channel_db(&self) -> f64 {
        self.total_db() - self.detector_db
    }
}

pub fn downlink_loss(sample: &PassSample, which: Downlink, params: &LinkParams) -> Result<LossBreakdown, LinkError> {
    params.validate()?;
    Ok(LossBreakdown {
        diffraction_db: diffraction_loss(
            sample.range_km(which),
            params.divergence_full_angle_rad,
            params.rx_aperture_diameter_m,
        ),
        pointing_db: pointing_loss(params.pointing_jitter_sigma_rad, params.divergence_full_angle_rad),
        atmospheric_db: atmospheric_loss(sample.elevation_deg(which), params.zenith_atmospheric_transmission)?,
        optics_db: to_db(params.tx_optics_efficiency) + to_db(params.rx_optics_efficiency) + to_db(params.filter_transmission),
        detector_db: to_db(params.detector_efficiency),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttenuationSample {
    pub t_s: f64,
    pub loss1_db: f64,
    pub loss2_db: f64,
    pub total_db: f64,
}

pub fn two_downlink_attenuation(
    pass: &[PassSample],
    params1: &LinkParams,
    params2: &LinkParams,
) -> Result<Vec<AttenuationSample>, LinkError> {
    pass.iter()
        .map(|s| {
            let loss1_db = downlink_loss(s, Downlink::First, params1)?.total_db();
            let loss2_db = downlink_loss(s, Downlink::Second, params2)?.total_db();
            Ok(AttenuationSample {
                t_s: s.t_s,
                loss1_db,
                loss2_db,
                total_db: loss1_db + loss2_db,
            })
        })
        .collect()
}

/// Orders of magnitude by which the satellite link beats sending both photons
/// through fiber from the midpoint (two arms of `ground_separation/2`).
pub fn fiber_comparison(ground_separation_km: f64, fiber_loss_db_per_km: f64, satellite_total_db: f64) -> f64 {
    (fiber_loss_db_per_km * ground_separation_km - satellite_total_db) / 10.0
}

pub fn write_attenuation<W: Write>(writer: W, samples: &[AttenuationSample]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(ATTENUATION_HEADER)?;
    for s in samples {
        wtr.write_record([s.t_s, s.loss1_db, s.loss2_db, s.total_db].iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_attenuation<R: Read>(reader: R) -> Result<Vec<AttenuationSample>, csv::Error> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().collect()
}
