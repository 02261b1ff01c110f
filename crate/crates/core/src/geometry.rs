//! Satellite pass geometry over two ground stations.
//!
//! The Earth is a sphere of radius [`EARTH_RADIUS_KM`] and does not rotate
//! during a pass. The satellite flies a circular orbit whose sub-satellite
//! point moves along a great circle at constant angular rate; the great circle
//! is pinned by an anchor point and the heading there. Passes can also be
//! read from an ephemeris table, bypassing the analytic model.

use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Highest ground station altitude accepted, km.
pub const MAX_STATION_ALTITUDE_KM: f64 = 9.0;

/// Step of the coarse visibility scan in [`propagate_pass`], s. Windows of
/// common visibility shorter than this can be missed.
pub const VISIBILITY_SCAN_STEP_S: f64 = 0.5;

pub const EPHEMERIS_HEADER: [&str; 8] = ["t_s", "range1_km", "range2_km", "elev1_deg", "elev2_deg", "x_km", "y_km", "z_km"];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("satellite position lies inside the Earth ({radius_km:.3} km from the centre, surface at {surface_km:.3} km)")]
    InsideEarth { radius_km: f64, surface_km: f64 },
    #[error("invalid ground station `{station}`: {field} = {value} is out of range")]
    InvalidStation { station: String, field: &'static str, value: f64 },
    #[error("invalid orbit: {field} = {value} must be positive and finite")]
    InvalidOrbit { field: &'static str, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error)]
pub enum EphemerisError {
    #[error("ephemeris header must be `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("ephemeris row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("ephemeris I/O: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStation {
    pub name: String,
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub altitude_km: f64,
}

impl GroundStation {
    pub fn new(name: impl Into<String>, latitude_deg: f64, longitude_deg: f64, altitude_km: f64) -> Result<Self, GeometryError> {
        let station = GroundStation {
            name: name.into(),
            latitude_deg,
            longitude_deg,
            altitude_km,
        };
        station.validate()?;
        Ok(station)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |field, value| GeometryError::InvalidStation {
            station: self.name.clone(),
            field,
            value,
        };
        if !(-90.0..=90.0).contains(&self.latitude_deg) {
            return Err(bad("latitude_deg", self.latitude_deg));
        }
        if !(-180.0..=180.0).contains(&self.longitude_deg) {
            return Err(bad("longitude_deg", self.longitude_deg));
        }
        if !(0.0..=MAX_STATION_ALTITUDE_KM).contains(&self.altitude_km) {
            return Err(bad("altitude_km", self.altitude_km));
        }
        Ok(())
    }

    /// Local vertical (unit vector) in the Earth-centred frame.
    pub fn up(&self) -> Vector3<f64> {
        unit_vector(self.latitude_deg, self.longitude_deg)
    }

    /// Earth-centred position, km.
    pub fn position_km(&self) -> Vector3<f64> {
        self.up() * (EARTH_RADIUS_KM + self.altitude_km)
    }
}

/// Unit vector pointing at geodetic (spherical) latitude/longitude.
pub fn unit_vector(latitude_deg: f64, longitude_deg: f64) -> Vector3<f64> {
    let (lat, lon) = (latitude_deg.to_radians(), longitude_deg.to_radians());
    Vector3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())
}

/// Great circle traced by the sub-satellite point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTrack {
    pub anchor_latitude_deg: f64,
    pub anchor_longitude_deg: f64,
    /// Heading of the track at the anchor, clockwise from north.
    pub azimuth_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitModel {
    pub altitude_km: f64,
    /// Orbital speed at the orbit radius, km/s.
    pub speed_km_s: f64,
    pub track: GroundTrack,
    /// Time at which the satellite is over the anchor point, s.
    pub epoch_s: f64,
}

impl OrbitModel {
    pub fn validate(&self) -> Result<(), GeometryError> {
        for (field, value) in [("altitude_km", self.altitude_km), ("speed_km_s", self.speed_km_s)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(GeometryError::InvalidOrbit { field, value });
            }
        }
        for (field, value) in [
            ("track.anchor_latitude_deg", self.track.anchor_latitude_deg),
            ("track.anchor_longitude_deg", self.track.anchor_longitude_deg),
            ("track.azimuth_deg", self.track.azimuth_deg),
            ("epoch_s", self.epoch_s),
        ] {
            if !value.is_finite() {
                return Err(GeometryError::InvalidOrbit { field, value });
            }
        }
        Ok(())
    }

    pub fn radius_km(&self) -> f64 {
        EARTH_RADIUS_KM + self.altitude_km
    }

    pub fn period_s(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.radius_km() / self.speed_km_s
    }

    /// Earth-centred satellite position at time `t_s`.
    pub fn position_at(&self, t_s: f64) -> Vector3<f64> {
        let anchor = unit_vector(self.track.anchor_latitude_deg, self.track.anchor_longitude_deg);
        let (lat, lon) = (
            self.track.anchor_latitude_deg.to_radians(),
            self.track.anchor_longitude_deg.to_radians(),
        );
        let east = Vector3::new(-lon.sin(), lon.cos(), 0.0);
        let north = Vector3::new(-lat.sin() * lon.cos(), -lat.sin() * lon.sin(), lat.cos());
        let az = self.track.azimuth_deg.to_radians();
        let heading = north * az.cos() + east * az.sin();
        let angle = self.speed_km_s / self.radius_km() * (t_s - self.epoch_s);
        (anchor * angle.cos() + heading * angle.sin()) * self.radius_km()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassSample {
    /// Seconds since the start of the pass.
    pub t_s: f64,
    pub range1_km: f64,
    pub range2_km: f64,
    pub elevation1_deg: f64,
    pub elevation2_deg: f64,
    /// Earth-centred satellite position, km.
    pub satellite_km: Vector3<f64>,
}

impl PassSample {
    pub fn range_km(&self, which: Downlink) -> f64 {
        match which {
            Downlink::First => self.range1_km,
            Downlink::Second => self.range2_km,
        }
    }

    pub fn elevation_deg(&self, which: Downlink) -> f64 {
        match which {
            Downlink::First => self.elevation1_deg,
            Downlink::Second => self.elevation2_deg,
        }
    }

    pub fn sum_range_km(&self) -> f64 {
        self.range1_km + self.range2_km
    }
}

/// Selects one of the two downlinks (station 1 or station 2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Downlink {
    First,
    Second,
}

impl Downlink {
    pub const BOTH: [Downlink; 2] = [Downlink::First, Downlink::Second];

    pub fn index(self) -> usize {
        match self {
            Downlink::First => 0,
            Downlink::Second => 1,
        }
    }
}

/// Result of [`propagate_pass`].
#[derive(Clone, Debug, PartialEq)]
pub struct Pass {
    pub samples: Vec<PassSample>,
    /// `(start, end)` of common visibility in orbit time, `None` when the
    /// satellite never clears the cutoff at both stations.
    pub window_s: Option<(f64, f64)>,
}

impl Pass {
    pub fn is_visible(&self) -> bool {
        self.window_s.is_some()
    }

    pub fn duration_s(&self) -> f64 {
        self.window_s.map_or(0.0, |(a, b)| b - a)
    }
}

/// Straight-line distance from satellite to station, km.
pub fn slant_range(satellite_km: &Vector3<f64>, station: &GroundStation) -> Result<f64, GeometryError> {
    let surface_km = EARTH_RADIUS_KM + station.altitude_km;
    let radius_km = satellite_km.norm();
    if radius_km <= surface_km {
        return Err(GeometryError::InsideEarth { radius_km, surface_km });
    }
    Ok((satellite_km - station.position_km()).norm())
}

/// Angle of the station-to-satellite line above the local horizontal, degrees.
pub fn elevation_angle(satellite_km: &Vector3<f64>, station: &GroundStation) -> Result<f64, GeometryError> {
    let range = slant_range(satellite_km, station)?;
    let los = satellite_km - station.position_km();
    let sin_el = (los.dot(&station.up()) / range).clamp(-1.0, 1.0);
    Ok(sin_el.asin().to_degrees())
}

fn sample_at(orbit: &OrbitModel, stations: &[GroundStation; 2], t_orbit: f64, t_pass: f64) -> Result<PassSample, GeometryError> {
    let sat = orbit.position_at(t_orbit);
    Ok(PassSample {
        t_s: t_pass,
        range1_km: slant_range(&sat, &stations[0])?,
        range2_km: slant_range(&sat, &stations[1])?,
        elevation1_deg: elevation_angle(&sat, &stations[0])?,
        elevation2_deg: elevation_angle(&sat, &stations[1])?,
        satellite_km: sat,
    })
}

/// Samples the interval in which both stations see the satellite at or above
/// `cutoff_deg`, every `dt_s` seconds from the exact start of that interval.
///
/// Only the visibility window closest to the orbit epoch is returned. Sample
/// times are multiples of `dt_s` measured from the window start, so halving
/// `dt_s` reproduces every other sample exactly.
pub fn propagate_pass(orbit: &OrbitModel, stations: &[GroundStation; 2], dt_s: f64, cutoff_deg: f64) -> Result<Pass, GeometryError> {
    orbit.validate()?;
    for s in stations {
        s.validate()?;
    }
    if !(dt_s > 0.0 && dt_s.is_finite()) {
        return Err(GeometryError::InvalidArgument(format!("dt_s = {dt_s} must be positive")));
    }
    if !(0.0..90.0).contains(&cutoff_deg) {
        return Err(GeometryError::InvalidArgument(format!(
            "elevation cutoff {cutoff_deg} deg must lie in [0, 90)"
        )));
    }

    let margin = |t: f64| -> Result<f64, GeometryError> {
        let sat = orbit.position_at(t);
        let e1 = elevation_angle(&sat, &stations[0])?;
        let e2 = elevation_angle(&sat, &stations[1])?;
        Ok(e1.min(e2) - cutoff_deg)
    };

    // Coarse scan over one orbit centred on the epoch.
    let half = orbit.period_s() / 2.0;
    let steps = (2.0 * half / VISIBILITY_SCAN_STEP_S).ceil() as i64;
    let mut windows: Vec<(f64, f64)> = Vec::new();
    let mut open: Option<f64> = None;
    let mut prev_t = orbit.epoch_s - half;
    let mut prev_up = margin(prev_t)? >= 0.0;
    if prev_up {
        open = Some(prev_t);
    }
    for k in 1..=steps {
        let t = orbit.epoch_s - half + k as f64 * VISIBILITY_SCAN_STEP_S;
        let up = margin(t)? >= 0.0;
        match (prev_up, up) {
            (false, true) => open = Some(bisect(&margin, prev_t, t, true)?),
            (true, false) => {
                let end = bisect(&margin, prev_t, t, false)?;
                windows.push((open.take().unwrap_or(prev_t), end));
            }
            _ => {}
        }
        prev_t = t;
        prev_up = up;
    }
    if let Some(start) = open {
        windows.push((start, prev_t));
    }

    let distance = |w: &(f64, f64)| {
        if (w.0..=w.1).contains(&orbit.epoch_s) {
            0.0
        } else {
            (w.0 - orbit.epoch_s).abs().min((w.1 - orbit.epoch_s).abs())
        }
    };
    let Some(&(start, end)) = windows.iter().min_by(|a, b| distance(a).total_cmp(&distance(b))) else {
        log::warn!("satellite never clears {cutoff_deg} deg at both stations");
        return Ok(Pass {
            samples: Vec::new(),
            window_s: None,
        });
    };

    let count = ((end - start) / dt_s).floor() as usize;
    let samples = (0..=count)
        .map(|k| {
            let t_pass = k as f64 * dt_s;
            sample_at(orbit, stations, start + t_pass, t_pass)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Pass {
        samples,
        window_s: Some((start, end)),
    })
}

/// Locates the elevation crossing between `lo` and `hi`. `rising` tells which
/// side is visible; the returned time is always on the visible side.
fn bisect(margin: &impl Fn(f64) -> Result<f64, GeometryError>, mut lo: f64, mut hi: f64, rising: bool) -> Result<f64, GeometryError> {
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let up = margin(mid)? >= 0.0;
        if up == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(if rising { hi } else { lo })
}

/// Reads an ephemeris CSV (see [`EPHEMERIS_HEADER`]). Rows are numbered from 1
/// for the first data row.
pub fn load_ephemeris<R: Read>(reader: R) -> Result<Vec<PassSample>, EphemerisError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(EPHEMERIS_HEADER.iter().copied()) {
        return Err(EphemerisError::Header {
            expected: EPHEMERIS_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut samples: Vec<PassSample> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let fail = |message: String| EphemerisError::Row { row, message };
        if record.len() != EPHEMERIS_HEADER.len() {
            return Err(fail(format!("expected {} columns, found {}", EPHEMERIS_HEADER.len(), record.len())));
        }
        let mut v = [0.0f64; 8];
        for (k, field) in record.iter().enumerate() {
            v[k] = field
                .parse()
                .map_err(|_| fail(format!("column `{}`: cannot parse `{field}`", EPHEMERIS_HEADER[k])))?;
            if !v[k].is_finite() {
                return Err(fail(format!("column `{}` is not finite", EPHEMERIS_HEADER[k])));
            }
        }
        let sample = PassSample {
            t_s: v[0],
            range1_km: v[1],
            range2_km: v[2],
            elevation1_deg: v[3],
            elevation2_deg: v[4],
            satellite_km: Vector3::new(v[5], v[6], v[7]),
        };
        if let Some(prev) = samples.last() {
            if sample.t_s <= prev.t_s {
                return Err(fail(format!("t_s = {} does not increase (previous {})", sample.t_s, prev.t_s)));
            }
        }
        let altitude = sample.satellite_km.norm() - EARTH_RADIUS_KM;
        if altitude <= 0.0 {
            return Err(fail("satellite position is inside the Earth".into()));
        }
        for (name, r) in [("range1_km", sample.range1_km), ("range2_km", sample.range2_km)] {
            if r < altitude - MAX_STATION_ALTITUDE_KM {
                return Err(fail(format!(
                    "{name} = {r} is shorter than the satellite altitude {altitude:.3} km allows"
                )));
            }
        }
        for (name, e) in [("elev1_deg", sample.elevation1_deg), ("elev2_deg", sample.elevation2_deg)] {
            if !(-90.0..=90.0).contains(&e) {
                return Err(fail(format!("{name} = {e} outside [-90, 90]")));
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes samples in the ephemeris CSV layout. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_ephemeris<W: Write>(writer: W, samples: &[PassSample]) -> Result<(), EphemerisError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(EPHEMERIS_HEADER)?;
    for s in samples {
        wtr.write_record(
            [
                s.t_s,
                s.range1_km,
                s.range2_km,
                s.elevation1_deg,
                s.elevation2_deg,
                s.satellite_km.x,
                s.satellite_km.y,
                s.satellite_km.z,
            ]
            .iter()
            .map(|v| v.to_string()),
        )?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}
