use std::path::Path;

use entdist::scenario::Scenario;
use entdist::spacetime::{
    build_events, interval_classify, loophole_report, worst_case_on_grid, Classification, EventLabel, SpacetimeEvent, C_KM_S, PAIRS,
    REFERENCE_DELAY_RANGE_S,
};
use nalgebra::Vector3;
use proptest::prelude::*;

fn reference() -> (Scenario, entdist::geometry::Pass) {
    let s = Scenario::reference();
    let p = s.pass(Path::new(".")).unwrap();
    (s, p)
}

#[test]
fn reference_pass_closes_the_locality_loophole() {
    let (s, pass) = reference();
    let r = loophole_report(&pass.samples, &s.geometry.stations, &s.qrng[0], s.measurement.lag_s);
    assert!(r.all_spacelike);
    assert_eq!(r.pairs.len(), 6);
    assert!(r.max_path_difference_km <= 944.0);
    assert!((r.delay_range_s.0 - REFERENCE_DELAY_RANGE_S.0).abs() < 1e-15 && (r.delay_range_s.1 - REFERENCE_DELAY_RANGE_S.1).abs() < 1e-15);
    assert!(r.warnings.is_empty());
    // Earth rotation over the pass stays well below the smallest station-pair margin.
    let rr = r.pairs.iter().find(|p| p.pair == "R1-R2").unwrap();
    assert!(r.earth_rotation_error_km < rr.worst_margin_km);
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<entdist::spacetime::LoopholeReport>(&json).unwrap(), r);
}

#[test]
fn endpoint_worst_case_agrees_with_dense_grid() {
    let (s, pass) = reference();
    let r = loophole_report(&pass.samples, &s.geometry.stations, &s.qrng[0], s.measurement.lag_s);
    let grid = worst_case_on_grid(&pass.samples, &s.geometry.stations, r.delay_range_s, s.measurement.lag_s, 41);
    for (g, e) in grid.iter().zip(&r.pairs) {
        assert_eq!(g.pair, e.pair);
        assert!(
            (g.worst_margin_km - e.worst_margin_km).abs() < 1e-9,
            "{}: {} vs {}",
            g.pair,
            g.worst_margin_km,
            e.worst_margin_km
        );
    }
}

#[test]
fn station_pair_margin_bound() {
    let (s, pass) = reference();
    let d = (s.geometry.stations[0].position_km() - s.geometry.stations[1].position_km()).norm();
    let (lo, hi) = REFERENCE_DELAY_RANGE_S;
    let r = loophole_report(&pass.samples, &s.geometry.stations, &s.qrng[0], s.measurement.lag_s);
    // Largest setting-time offset between the two events of each pair.
    for (name, dt) in [("R1-R2", hi - lo), ("R1-M2", hi), ("M1-R2", hi), ("M1-M2", 0.0)] {
        let bound = d - r.max_path_difference_km - C_KM_S * dt;
        assert!(bound > 0.0);
        let p = r.pairs.iter().find(|p| p.pair == name).unwrap();
        assert!(p.worst_margin_km >= bound - 1e-9, "{name}: {} < {bound}", p.worst_margin_km);
    }
}

#[test]
fn light_cone_and_lag() {
    let (s, pass) = reference();
    let st = &s.geometry.stations;
    for sample in pass.samples.iter().step_by(25) {
        let ev = build_events(sample, st, [REFERENCE_DELAY_RANGE_S.0; 2], 0.0);
        for m in [3, 4] {
            let (class, margin) = interval_classify(&ev[0], &ev[m]);
            assert!(margin.abs() <= 1e-9 || class == Classification::Lightlike, "margin {margin}");
        }
        let ev = build_events(sample, st, [REFERENCE_DELAY_RANGE_S.0; 2], 100e-9);
        for m in [3, 4] {
            let (class, margin) = interval_classify(&ev[0], &ev[m]);
            assert_eq!(class, Classification::Timelike);
            assert!((margin + C_KM_S * 100e-9).abs() < 1e-6);
        }
        assert_eq!(
            ev.map(|e| e.label),
            [EventLabel::S, EventLabel::R1, EventLabel::R2, EventLabel::M1, EventLabel::M2]
        );
    }
}

#[test]
fn margins_vary_continuously_along_the_pass() {
    let (s, pass) = reference();
    let orbit = s.geometry.orbit.as_ref().unwrap();
    let delays = [REFERENCE_DELAY_RANGE_S.1, REFERENCE_DELAY_RANGE_S.0];
    let margins: Vec<Vec<f64>> = pass
        .samples
        .iter()
        .map(|x| {
            let ev = build_events(x, &s.geometry.stations, delays, s.measurement.lag_s);
            PAIRS.iter().map(|(_, a, b)| interval_classify(&ev[*a], &ev[*b]).1).collect()
        })
        .collect();
    for (w, t) in margins.windows(2).zip(pass.samples.windows(2)) {
        let dt = t[1].t_s - t[0].t_s;
        for (a, b) in w[0].iter().zip(&w[1]) {
            assert!((b - a).abs() <= (orbit.speed_km_s + C_KM_S) * dt);
            // Tighter: path lengths change by at most the orbital speed per second.
            assert!((b - a).abs() <= 2.0 * orbit.speed_km_s * dt + 1e-9);
        }
    }
}

#[test]
fn arithmetic_example() {
    let a = SpacetimeEvent {
        label: EventLabel::R1,
        position_km: Vector3::zeros(),
        time_s: 0.0,
    };
    let b = SpacetimeEvent {
        label: EventLabel::R2,
        position_km: Vector3::new(1203.0, 0.0, 0.0),
        time_s: 1e-3,
    };
    let (class, margin) = interval_classify(&a, &b);
    assert_eq!(class, Classification::Spacelike);
    assert!((margin - (1203.0 - 299.792458)).abs() < 1e-9);
}

proptest! {
    #[test]
    fn classification_is_symmetric(x in prop::array::uniform3(-1e4f64..1e4), t in -0.1f64..0.1) {
        let a = SpacetimeEvent { label: EventLabel::S, position_km: Vector3::zeros(), time_s: 0.0 };
        let b = SpacetimeEvent { label: EventLabel::M1, position_km: Vector3::from(x), time_s: t };
        let (c1, m1) = interval_classify(&a, &b);
        let (c2, m2) = interval_classify(&b, &a);
        prop_assert_eq!(c1, c2);
        prop_assert_eq!(m1, m2);
        prop_assert_eq!(m1 > 1e-9, c1 == Classification::Spacelike);
        prop_assert_eq!(m1 < -1e-9, c1 == Classification::Timelike);
    }
}
