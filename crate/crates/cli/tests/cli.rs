use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use entdist::estimators::{chsh, fidelity_lower_bound, SettingCounts, CHSH_INDEX_ORDER};
use entdist::eventsim::{read_ground_truth, read_tags, singles_rate_estimate, TAG_MAGIC};
use entdist::geometry::load_ephemeris;
use entdist::linkbudget::read_attenuation;
use entdist::quantum::measurement_probabilities;
use entdist::scenario::{Scenario, REFERENCE_FIDELITY_JSON, REFERENCE_JSON};
use entdist::spacetime::LoopholeReport;
use entdist::timesync::read_coincidences;
use serde_json::{json, Value};
use tempfile::TempDir;

fn entdist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entdist"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_scenario(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn reference_value() -> Value {
    serde_json::from_str(REFERENCE_JSON).unwrap()
}

/// Reference hardware with bright, nearly lossless links and a short run, so
/// that estimators land close to their exact-probability values.
fn low_loss(mut v: Value, duration_s: f64) -> Value {
    v["source"]["pair_rate_hz"] = json!(1e6);
    for l in v["links"].as_array_mut().unwrap() {
        l["divergence_full_angle_rad"] = json!(2e-6);
        l["rx_optics_efficiency"] = json!(1.0);
        l["zenith_atmospheric_transmission"] = json!(0.95);
    }
    v["simulation"]["duration_s"] = json!(duration_s);
    v
}

fn summary_value(out: &str, key: &str) -> f64 {
    let line = out
        .lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("no `{key}` in\n{out}"));
    line[key.len()..]
        .trim_start_matches(':')
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn pass_reports_reference_loss_window() {
    let dir = TempDir::new().unwrap();
    let o = ok(entdist(&[
        "pass",
        "--scenario",
        "../core/scenarios/micius-1203km.json",
        "--out",
        s(dir.path()),
    ]));
    let text = stdout(&o);
    let (min, max) = (summary_value(&text, "min_total_db"), summary_value(&text, "max_total_db"));
    assert!((min - 64.0).abs() <= 3.0 && (max - 82.0).abs() <= 3.0, "{text}");
    let eph = load_ephemeris(fs::File::open(dir.path().join("ephemeris.csv")).unwrap()).unwrap();
    let att = read_attenuation(fs::File::open(dir.path().join("attenuation.csv")).unwrap()).unwrap();
    assert_eq!(eph.len(), att.len());
    assert_eq!(eph.len() as f64, summary_value(&text, "samples"));
    for (e, a) in eph.iter().zip(&att) {
        assert_eq!(e.t_s, a.t_s);
        assert!((a.loss1_db + a.loss2_db - a.total_db).abs() < 1e-9);
    }
}

#[test]
fn zenith_toy_matches_hand_computed_loss() {
    let dir = TempDir::new().unwrap();
    // One sample with the satellite 500 km straight above both receivers.
    fs::write(
        dir.path().join("zenith.csv"),
        "t_s,range1_km,range2_km,elev1_deg,elev2_deg,x_km,y_km,z_km\n0,500,500,90,90,6871,0,0\n",
    )
    .unwrap();
    let mut v = reference_value();
    let g = v["geometry"].as_object_mut().unwrap();
    g.remove("orbit");
    g.insert("ephemeris".into(), json!("zenith.csv"));
    let sc = write_scenario(dir.path(), "zenith.json", &v);
    let out = dir.path().join("out");
    let text = stdout(&ok(entdist(&["pass", "--scenario", s(&sc), "--out", s(&out)])));
    let att = read_attenuation(fs::File::open(out.join("attenuation.csv")).unwrap()).unwrap();
    assert_eq!(att.len(), 1);

    let db = |x: f64| -10.0 * x.log10();
    // Beam radius 2.5 m at 500 km for a 10 µrad full divergence.
    let w: f64 = 2.5;
    let link = |aperture_m: f64, zenith_t: f64| {
        let r = aperture_m / 2.0;
        let diffraction = db(1.0 - (-2.0 * r * r / (w * w)).exp());
        let pointing = db(1.0 / (1.0 + 8.0 * 0.058f64.powi(2)));
        diffraction + pointing + db(zenith_t) + db(0.5 * 0.107 * 0.9) + db(0.5)
    };
    let (l1, l2) = (link(1.2, 0.7), link(1.8, 0.5));
    assert!((att[0].loss1_db - l1).abs() < 1e-9, "{} vs {l1}", att[0].loss1_db);
    assert!((att[0].loss2_db - l2).abs() < 1e-9, "{} vs {l2}", att[0].loss2_db);
    assert!((summary_value(&text, "min_total_db") - (l1 + l2)).abs() < 5e-3);
    assert_eq!(summary_value(&text, "min_total_db"), summary_value(&text, "max_total_db"));
}

#[test]
fn configuration_errors_name_the_key() {
    let dir = TempDir::new().unwrap();
    let mut missing = reference_value();
    missing["geometry"].as_object_mut().unwrap().remove("stations");
    let mut unknown = reference_value();
    unknown["source"]["pair_rate"] = json!(1.0);
    let mut bad_value = reference_value();
    bad_value["window"]["width_ps"] = json!(-1.0);
    let mut schema = reference_value();
    schema["schema"] = json!("entdist-scenario/0");
    for (name, v, needles) in [
        ("missing", missing, vec!["geometry", "stations"]),
        ("unknown", unknown, vec!["source", "pair_rate"]),
        ("value", bad_value, vec!["window.width_ps"]),
        ("schema", schema, vec!["schema"]),
    ] {
        let sc = write_scenario(dir.path(), &format!("{name}.json"), &v);
        for cmd in ["pass", "simulate", "spacetime"] {
            let o = entdist(&[cmd, "--scenario", s(&sc), "--out", s(dir.path())]);
            assert_eq!(o.status.code(), Some(2), "{name}/{cmd}: {}", stderr(&o));
            for n in &needles {
                assert!(stderr(&o).contains(n), "{name}/{cmd}: `{n}` missing from {}", stderr(&o));
            }
        }
    }
    let o = entdist(&["pass", "--scenario", s(&dir.path().join("absent.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.json"));
}

fn short_reference(dir: &Path, duration_s: f64) -> PathBuf {
    let mut v = reference_value();
    v["simulation"]["duration_s"] = json!(duration_s);
    write_scenario(dir, "short.json", &v)
}

const OUTPUTS: [&str; 4] = ["station1.ett", "station2.ett", "ground_truth.csv", "manifest.json"];

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let sc = short_reference(dir.path(), 3.0);
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        ok(entdist(&["simulate", "--scenario", s(&sc), "--seed", seed, "--out", s(&out)]));
        OUTPUTS.map(|f| fs::read(out.join(f)).unwrap())
    };
    let (a, b, c) = (run("7", "a"), run("7", "b"), run("8", "c"));
    assert_eq!(a, b);
    assert_ne!(a[0], c[0]);
    assert_ne!(a[1], c[1]);
    let manifest = |bytes: &[u8]| serde_json::from_slice::<Value>(bytes).unwrap();
    let (ma, mc) = (manifest(&a[3]), manifest(&c[3]));
    assert_eq!((ma["seed"].as_u64(), mc["seed"].as_u64()), (Some(7), Some(8)));
    for key in ["parameters", "duration_s", "pass_window_s", "files", "tag_format", "version"] {
        assert_eq!(ma[key], mc[key], "{key}");
    }
    // The manifest replays: its parameters are a valid scenario.
    let replay = Scenario::from_json(&ma["parameters"].to_string()).unwrap();
    assert_eq!(replay, Scenario::from_file(&sc).unwrap());

    let tags = [read_tags(&a[0]).unwrap(), read_tags(&a[1]).unwrap()];
    let truth = read_ground_truth(&a[2]).unwrap();
    assert_eq!(ma["stats"]["both_detected"].as_u64(), Some(truth.len() as u64));
    for (i, t) in tags.iter().enumerate() {
        let sync = t.iter().filter(|x| x.is_sync()).count() as u64;
        assert_eq!(ma["stats"]["sync_tags"][i].as_u64(), Some(sync));
    }
}

#[test]
fn simulate_can_write_csv_tags() {
    let dir = TempDir::new().unwrap();
    let sc = short_reference(dir.path(), 0.2);
    let (bin, csv) = (dir.path().join("bin"), dir.path().join("csv"));
    ok(entdist(&["simulate", "--scenario", s(&sc), "--out", s(&bin)]));
    ok(entdist(&["simulate", "--scenario", s(&sc), "--out", s(&csv), "--format", "csv"]));
    for i in 1..=2 {
        let b = read_tags(&fs::read(bin.join(format!("station{i}.ett"))).unwrap()).unwrap();
        let c = fs::read(csv.join(format!("station{i}.csv"))).unwrap();
        assert!(c.starts_with(b"time_ps,channel,basis_index\n"));
        assert_eq!(read_tags(&c).unwrap(), b);
    }
}

#[test]
fn tag_counts_follow_singles_estimate() {
    let dir = TempDir::new().unwrap();
    let duration = 20.0;
    let sc = short_reference(dir.path(), duration);
    let out = dir.path().join("out");
    ok(entdist(&["simulate", "--scenario", s(&sc), "--out", s(&out)]));

    let scenario = Scenario::from_file(&sc).unwrap();
    let losses = scenario.loss_profile(&scenario.pass(dir.path()).unwrap()).unwrap();
    let steps = 20_000;
    let dt = duration / steps as f64;
    for i in 0..2 {
        let [plus, minus] = &scenario.detectors[i];
        let expected: f64 = (0..steps)
            .map(|k| {
                let loss = losses.loss_at((k as f64 + 0.5) * dt)[i];
                // The estimate covers the signal and one port's noise; add the other port's noise.
                (singles_rate_estimate(scenario.source.pair_rate_hz, loss, plus) + minus.noise_rate_hz()) * dt
            })
            .sum();
        let tags = read_tags(&fs::read(out.join(format!("station{}.ett", i + 1))).unwrap()).unwrap();
        let got = tags.iter().filter(|t| !t.is_sync()).count() as f64;
        assert!(
            (got - expected).abs() <= 3.0 * expected.sqrt(),
            "station {}: {got} vs {expected:.0}",
            i + 1
        );
    }
}

fn empty_tags(dir: &Path) -> (PathBuf, PathBuf) {
    let mut bytes = TAG_MAGIC.to_vec();
    bytes.extend_from_slice(&0u32.to_le_bytes());
    let (a, b) = (dir.join("e1.ett"), dir.join("e2.ett"));
    fs::write(&a, &bytes).unwrap();
    fs::write(&b, &bytes).unwrap();
    (a, b)
}

#[test]
fn empty_tag_files_give_zero_rate_and_no_bell_test() {
    let dir = TempDir::new().unwrap();
    let (a, b) = empty_tags(dir.path());
    let out = dir.path().join("out");
    let o = ok(entdist(&["analyze", s(&a), s(&b), "--mode", "rates", "--out", s(&out)]));
    assert_eq!(summary_value(&stdout(&o), "rate_hz"), 0.0);
    let report: Value = serde_json::from_slice(&fs::read(out.join("analysis.json")).unwrap()).unwrap();
    assert_eq!(report["rates"]["rate_hz"].as_f64(), Some(0.0));
    assert_eq!(report["rates"]["count"].as_u64(), Some(0));
    assert_eq!(read_coincidences(&fs::read(out.join("coincidences.csv")).unwrap()).unwrap(), vec![]);
    for mode in ["bell", "fidelity"] {
        let o = entdist(&["analyze", s(&a), s(&b), "--mode", mode, "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(3), "{mode}: {}", stderr(&o));
    }
}

#[test]
fn malformed_tag_files_report_byte_offsets() {
    let dir = TempDir::new().unwrap();
    let (good, _) = empty_tags(dir.path());
    let csv = dir.path().join("bad.csv");
    // Header is 28 bytes and the first row 7, so the bad row starts at 35.
    fs::write(&csv, "time_ps,channel,basis_index\n10,0,0\n20,x,0\n").unwrap();
    let truncated = dir.path().join("bad.ett");
    let mut bytes = TAG_MAGIC.to_vec();
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&[0; 15]);
    fs::write(&truncated, &bytes).unwrap();
    let reserved = dir.path().join("reserved.ett");
    let mut bytes = TAG_MAGIC.to_vec();
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 7, 0]);
    fs::write(&reserved, &bytes).unwrap();
    for (bad, needle) in [(&csv, "byte 35"), (&truncated, "byte 20"), (&reserved, "byte 18")] {
        for (a, b) in [(bad, &good), (&good, bad)] {
            let o = entdist(&["analyze", s(a), s(b), "--out", s(dir.path())]);
            assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
            assert!(stderr(&o).contains(needle) && stderr(&o).contains(s(bad)), "{}", stderr(&o));
        }
    }
    let o = entdist(&["analyze", s(&dir.path().join("none.ett")), s(&good)]);
    assert_eq!(o.status.code(), Some(3));
}

/// Counts with exact Born-rule proportions for the scenario's own settings.
fn exact_counts(sc: &Scenario, settings: &[(u8, u8)]) -> Vec<SettingCounts> {
    let state = sc.state().unwrap();
    let [a, b] = sc.analyzer_settings();
    settings
        .iter()
        .map(|&(i, j)| {
            let p = measurement_probabilities(&state, &a[i as usize], &b[j as usize]);
            SettingCounts::from_probabilities(i, j, &p, 1 << 40)
        })
        .collect()
}

#[test]
fn bright_bell_run_matches_exact_chsh() {
    let dir = TempDir::new().unwrap();
    let sc_path = write_scenario(dir.path(), "bright.json", &low_loss(reference_value(), 1.0));
    let sc = Scenario::from_file(&sc_path).unwrap();
    let out = dir.path().join("out");
    ok(entdist(&["simulate", "--scenario", s(&sc_path), "--out", s(&out)]));
    let (t1, t2) = (out.join("station1.ett"), out.join("station2.ett"));
    let o = ok(entdist(&[
        "analyze",
        s(&t1),
        s(&t2),
        "--mode",
        "bell",
        "--scenario",
        s(&sc_path),
        "--bootstrap",
        "200",
    ]));
    let report: Value = serde_json::from_slice(&fs::read(out.join("analysis.json")).unwrap()).unwrap();
    let bell = &report["bell"]["result"];
    let (s_hat, sigma) = (bell["s"].as_f64().unwrap(), bell["sigma_s"].as_f64().unwrap());
    let exact = chsh(&exact_counts(&sc, &CHSH_INDEX_ORDER).try_into().unwrap()).unwrap().s;
    assert!(report["rates"]["count"].as_u64().unwrap() > 2000);
    assert!((s_hat - exact).abs() <= 4.0 * sigma, "S = {s_hat} ± {sigma}, exact {exact}");
    assert!(s_hat - 2.0 > 5.0 * sigma);
    assert!((summary_value(&stdout(&o), "S") - s_hat).abs() < 1e-4);
    let boot = report["bell"]["bootstrap"]["sigma"].as_f64().unwrap();
    assert!((boot - sigma).abs() < 0.3 * sigma, "bootstrap {boot} vs {sigma}");
    // Coincidences written next to the tags round-trip with the reported count.
    let recs = read_coincidences(&fs::read(out.join("coincidences.csv")).unwrap()).unwrap();
    assert_eq!(recs.len() as u64, report["rates"]["count"].as_u64().unwrap());
    let fit = &report["sync"];
    for (i, key) in ["offset_ps", "drift_ps_per_s"].iter().enumerate() {
        let injected = [
            sc.clocks[1].offset_ps - sc.clocks[0].offset_ps,
            sc.clocks[1].drift_ps_per_s - sc.clocks[0].drift_ps_per_s,
        ][i];
        assert!((fit[key].as_f64().unwrap() - injected).abs() < 50.0, "{key}: {fit}");
    }
}

#[test]
fn bright_fidelity_run_matches_exact_bound() {
    let dir = TempDir::new().unwrap();
    let v = low_loss(serde_json::from_str(REFERENCE_FIDELITY_JSON).unwrap(), 1.0);
    let sc_path = write_scenario(dir.path(), "bright-fidelity.json", &v);
    let sc = Scenario::from_file(&sc_path).unwrap();
    let out = dir.path().join("out");
    ok(entdist(&["simulate", "--scenario", s(&sc_path), "--out", s(&out)]));
    let (t1, t2) = (out.join("station1.ett"), out.join("station2.ett"));
    ok(entdist(&["analyze", s(&t1), s(&t2), "--mode", "fidelity", "--window-ps", "2500"]));
    let report: Value = serde_json::from_slice(&fs::read(out.join("analysis.json")).unwrap()).unwrap();
    let f = &report["fidelity"]["fidelity_lower_bound"];
    let (value, sigma) = (f["value"].as_f64().unwrap(), f["sigma"].as_f64().unwrap());
    let c = exact_counts(&sc, &[(0, 0), (1, 1)]);
    let exact = fidelity_lower_bound(&c[0], &c[1]).unwrap().value;
    assert!((value - exact).abs() <= 4.0 * sigma, "F_low = {value} ± {sigma}, exact {exact}");
    assert!(value <= entdist::quantum::exact_fidelity(&sc.state().unwrap()) + 4.0 * sigma);
}

#[test]
fn spacetime_report_round_trips() {
    let dir = TempDir::new().unwrap();
    let o = ok(entdist(&[
        "spacetime",
        "--scenario",
        "../core/scenarios/micius-1203km.json",
        "--out",
        s(dir.path()),
    ]));
    let report: LoopholeReport = serde_json::from_slice(&fs::read(dir.path().join("spacetime.json")).unwrap()).unwrap();
    assert!(report.all_spacelike && report.max_path_difference_km <= 944.0);
    assert_eq!(report.pairs.len(), 6);
    assert!(stdout(&o).contains("all_spacelike: true"));
}

#[test]
fn usage_errors_exit_with_config_code() {
    assert_eq!(entdist(&["analyze", "a", "b", "--mode", "chsh"]).status.code(), Some(2));
    assert_eq!(entdist(&["simulate"]).status.code(), Some(2));
    assert_eq!(entdist(&["frobnicate"]).status.code(), Some(2));
}
