use std::path::Path;

use entdist::geometry::{
    load_ephemeris, propagate_pass, write_ephemeris, GroundStation, GroundTrack, OrbitModel, PassSample, EARTH_RADIUS_KM,
};
use entdist::scenario::Scenario;
use proptest::prelude::*;

fn reference() -> (Scenario, entdist::geometry::Pass) {
    let s = Scenario::reference();
    let p = s.pass(Path::new(".")).unwrap();
    (s, p)
}

/// Central angle from latitude/longitude pairs (haversine).
fn central_angle(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * h.sqrt().asin()
}

#[test]
fn reference_pass_duration_and_ranges() {
    let (_, pass) = reference();
    let d = pass.duration_s();
    assert!((d - 275.0).abs() <= 0.2 * 275.0, "duration {d}");
    let min = pass.samples.iter().map(|s| s.range1_km).fold(f64::MAX, f64::min);
    let max = pass.samples.iter().map(|s| s.range1_km).fold(f64::MIN, f64::max);
    assert!((min - 545.0).abs() <= 54.5, "min range1 {min}");
    assert!((max - 1680.0).abs() <= 168.0, "max range1 {max}");
}

#[test]
fn slant_ranges_obey_law_of_cosines() {
    let (s, pass) = reference();
    let orbit = s.geometry.orbit.as_ref().unwrap();
    let rs = EARTH_RADIUS_KM + orbit.altitude_km;
    for sample in &pass.samples {
        let p = sample.satellite_km;
        let lat = (p.z / p.norm()).asin().to_degrees();
        let lon = p.y.atan2(p.x).to_degrees();
        for (k, st) in s.geometry.stations.iter().enumerate() {
            let g = central_angle(lat, lon, st.latitude_deg, st.longitude_deg);
            let rg = EARTH_RADIUS_KM + st.altitude_km;
            let want = (rs * rs + rg * rg - 2.0 * rs * rg * g.cos()).sqrt();
            let got = [sample.range1_km, sample.range2_km][k];
            assert!((got - want).abs() < 1e-6, "t = {}: {got} vs {want}", sample.t_s);
        }
    }
}

#[test]
fn elevation_falls_as_range_grows() {
    let (_, pass) = reference();
    type Field = fn(&PassSample) -> f64;
    let legs: [(Field, Field); 2] = [(|s| s.range1_km, |s| s.elevation1_deg), (|s| s.range2_km, |s| s.elevation2_deg)];
    for w in pass.samples.windows(2) {
        for (r, e) in legs {
            let dr = r(&w[1]) - r(&w[0]);
            let de = e(&w[1]) - e(&w[0]);
            if dr != 0.0 {
                assert!(dr * de < 0.0, "range step {dr} with elevation step {de}");
            }
        }
    }
}

#[test]
fn halving_the_step_reproduces_shared_samples() {
    let s = Scenario::reference();
    let g = &s.geometry;
    let orbit = g.orbit.as_ref().unwrap();
    let coarse = propagate_pass(orbit, &g.stations, 1.0, g.elevation_cutoff_deg).unwrap();
    let fine = propagate_pass(orbit, &g.stations, 0.5, g.elevation_cutoff_deg).unwrap();
    assert!(fine.samples.len() >= 2 * coarse.samples.len() - 1);
    for (k, c) in coarse.samples.iter().enumerate() {
        let f = &fine.samples[2 * k];
        assert!((c.t_s - f.t_s).abs() < 1e-9);
        assert!((c.range1_km - f.range1_km).abs() < 1e-9);
        assert!((c.range2_km - f.range2_km).abs() < 1e-9);
        assert!((c.satellite_km - f.satellite_km).norm() < 1e-9);
    }
}

#[test]
fn ephemeris_round_trip_is_identical() {
    let (_, pass) = reference();
    let mut buf = Vec::new();
    write_ephemeris(&mut buf, &pass.samples).unwrap();
    let header = std::str::from_utf8(&buf).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "t_s,range1_km,range2_km,elev1_deg,elev2_deg,x_km,y_km,z_km");
    assert_eq!(load_ephemeris(buf.as_slice()).unwrap(), pass.samples);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_passes_keep_invariants(
        anchor_lat in -60.0f64..60.0,
        anchor_lon in -170.0f64..170.0,
        azimuth in 0.0f64..360.0,
        altitude in 300.0f64..1200.0,
        d_lat in -6.0f64..6.0,
        d_lon in -6.0f64..6.0,
        cutoff in 0.0f64..30.0,
    ) {
        let orbit = OrbitModel {
            altitude_km: altitude,
            speed_km_s: 7.6,
            track: GroundTrack { anchor_latitude_deg: anchor_lat, anchor_longitude_deg: anchor_lon, azimuth_deg: azimuth },
            epoch_s: 0.0,
        };
        let st = [
            GroundStation::new("a", anchor_lat + d_lat, anchor_lon, 1.0).unwrap(),
            GroundStation::new("b", anchor_lat - d_lat, anchor_lon + d_lon, 0.5).unwrap(),
        ];
        let pass = propagate_pass(&orbit, &st, 1.0, cutoff).unwrap();
        for w in pass.samples.windows(2) {
            prop_assert!(w[1].t_s > w[0].t_s);
        }
        for s in &pass.samples {
            prop_assert!(s.range1_km >= altitude - st[0].altitude_km - 1e-6 && s.range2_km >= altitude - st[1].altitude_km - 1e-6);
            prop_assert!(s.elevation1_deg >= cutoff - 1e-9 && s.elevation2_deg >= cutoff - 1e-9);
            prop_assert!(s.elevation1_deg <= 90.0 && s.elevation2_deg <= 90.0);
        }
        let mut buf = Vec::new();
        write_ephemeris(&mut buf, &pass.samples).unwrap();
        prop_assert_eq!(load_ephemeris(buf.as_slice()).unwrap(), pass.samples);
    }
}
