//! Command implementations behind the `entdist` binary.
//!
//! Each command reads a scenario (and, for `analyze`, two tag files), writes
//! its outputs atomically into the output directory and returns a short
//! human-readable summary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use entdist::estimators::{
    bootstrap_chsh, chsh_from_tally, coincidence_rate_report, correlation, fidelity_lower_bound, visibility, BellResult, Estimate,
    EstimatorError, RateReport, SettingCounts, Tally, CHSH_INDEX_ORDER,
};
use entdist::eventsim::{read_tags, simulate, write_ground_truth, write_tags_binary, write_tags_csv, SimulationStats, TimeTag};
use entdist::geometry::write_ephemeris;
use entdist::linkbudget::{two_downlink_attenuation, write_attenuation};
use entdist::scenario::{Scenario, ScenarioError};
use entdist::spacetime::loophole_report;
use entdist::timesync::{
    accidental_rate, fit_clock, match_coincidences, write_coincidences, CoincidenceRecord, CoincidenceWindow, SyncFit,
};
use serde::Serialize;
use thiserror::Error;

/// Window used by `analyze` when neither `--window-ps` nor a scenario is given.
pub const DEFAULT_WINDOW_PS: u64 = 2500;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Data { path: PathBuf, message: String },
    #[error("analysis failed: {0}")]
    Analysis(String),
    #[error("cannot write {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// Process exit code: 2 for configuration problems, 3 for bad or
    /// insufficient data, 1 for output failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Scenario(_) | CliError::Config(_) => 2,
            CliError::Data { .. } | CliError::Analysis(_) => 3,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        CliError::Analysis(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "entdist",
    version,
    about = "Satellite entanglement distribution: geometry, simulation and analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pass geometry and two-downlink attenuation.
    Pass(ScenarioArgs),
    /// Time-tag streams for both stations plus ground truth.
    Simulate(SimulateArgs),
    /// Sync fit, coincidence matching and estimators on two tag files.
    Analyze(AnalyzeArgs),
    /// Space-time separation of the measurement events along the pass.
    Spacetime(ScenarioArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory; defaults to the scenario's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TagFormat {
    Bin,
    Csv,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: ScenarioArgs,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = TagFormat::Bin)]
    pub format: TagFormat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bell,
    Fidelity,
    Rates,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Station 1 tags (binary or CSV).
    pub tags1: PathBuf,
    /// Station 2 tags (binary or CSV).
    pub tags2: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Rates)]
    pub mode: Mode,
    /// Supplies the window when `--window-ps` is absent.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Coincidence window half-width, ps.
    #[arg(long)]
    pub window_ps: Option<u64>,
    /// Defaults to the directory holding the first tag file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Effective measurement time for rates; defaults to the span of stream 1.
    #[arg(long)]
    pub effective_time_s: Option<f64>,
    /// Bootstrap replicas for S in bell mode (0 disables).
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    /// Seed of the bootstrap resampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Pass(a) => cmd_pass(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Spacetime(a) => cmd_spacetime(&a),
    }
}

/// Fills `dir/name` through a temporary file in the same directory, then renames it into place.
pub fn write_atomic(dir: &Path, name: &str, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let io = |source| CliError::Io {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let mut builder = tempfile::Builder::new();
    // Final files get ordinary permissions rather than the private temp-file mode.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o666));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(io)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf).map_err(io)?;
        buf.flush().map_err(io)?;
    }
    tmp.persist(&path).map_err(|e| io(e.error))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    write_atomic(dir, name, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

fn load_scenario(path: &Path) -> Result<(Scenario, PathBuf), CliError> {
    let s = Scenario::from_file(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((s, base))
}

fn out_dir(arg: &Option<PathBuf>, scenario: &Scenario) -> PathBuf {
    arg.clone().unwrap_or_else(|| scenario.output_dir.clone())
}

fn pass_of(s: &Scenario, base: &Path) -> Result<entdist::geometry::Pass, CliError> {
    let pass = s.pass(base)?;
    if pass.samples.is_empty() {
        return Err(CliError::Config("geometry: no sample above the elevation cutoff".into()));
    }
    Ok(pass)
}

pub fn cmd_pass(a: &ScenarioArgs) -> Result<String, CliError> {
    let (s, base) = load_scenario(&a.scenario)?;
    let pass = pass_of(&s, &base)?;
    let att = two_downlink_attenuation(&pass.samples, &s.links[0], &s.links[1]).map_err(|e| CliError::Config(format!("links: {e}")))?;
    let dir = out_dir(&a.out, &s);
    write_atomic(&dir, "ephemeris.csv", |w| {
        write_ephemeris(w, &pass.samples).map_err(std::io::Error::other)
    })?;
    write_atomic(&dir, "attenuation.csv", |w| {
        write_attenuation(w, &att).map_err(std::io::Error::other)
    })?;
    let min = att.iter().min_by(|x, y| x.total_db.total_cmp(&y.total_db)).expect("non-empty pass");
    let max = att.iter().max_by(|x, y| x.total_db.total_cmp(&y.total_db)).expect("non-empty pass");
    Ok(format!(
        "samples: {}\nduration_s: {:.1}\nmin_total_db: {:.2} at t_s {:.1}\nmax_total_db: {:.2} at t_s {:.1}\n",
        att.len(),
        pass.duration_s(),
        min.total_db,
        min.t_s,
        max.total_db,
        max.t_s
    ))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    scenario_file: String,
    seed: u64,
    duration_s: f64,
    pass_window_s: Option<(f64, f64)>,
    tag_format: &'static str,
    files: [String; 4],
    stats: SimulationStats,
    /// Scenario with every default filled in; the seed field holds the
    /// scenario's own seed, `seed` above is the one used.
    parameters: &'a Scenario,
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<String, CliError> {
    let (s, base) = load_scenario(&a.common.scenario)?;
    let pass = pass_of(&s, &base)?;
    let seed = a.seed.unwrap_or(s.seed);
    let cfg = s.simulation_config()?;
    let losses = s.loss_profile(&pass)?;
    let duration = s.duration_s(&pass);
    log::info!("simulating {duration:.1} s with seed {seed}");
    let out = simulate(&cfg, &losses, duration, seed).map_err(|e| CliError::Config(format!("simulation: {e}")))?;
    let dir = out_dir(&a.common.out, &s);
    let (ext, format) = match a.format {
        TagFormat::Bin => ("ett", "bin"),
        TagFormat::Csv => ("csv", "csv"),
    };
    let names = [
        format!("station1.{ext}"),
        format!("station2.{ext}"),
        "ground_truth.csv".to_string(),
        "manifest.json".to_string(),
    ];
    for (i, tags) in out.tags.iter().enumerate() {
        write_atomic(&dir, &names[i], |w| match a.format {
            TagFormat::Bin => write_tags_binary(w, tags),
            TagFormat::Csv => write_tags_csv(w, tags),
        })?;
    }
    write_atomic(&dir, &names[2], |w| write_ground_truth(w, &out.ground_truth))?;
    let manifest = Manifest {
        tool: "entdist",
        version: env!("CARGO_PKG_VERSION"),
        scenario_file: a.common.scenario.display().to_string(),
        seed,
        duration_s: duration,
        pass_window_s: pass.window_s,
        tag_format: format,
        files: names.clone(),
        stats: out.stats,
        parameters: &s,
    };
    write_json(&dir, &names[3], &manifest)?;
    Ok(format!(
        "seed: {seed}\nduration_s: {duration:.3}\ntags: {} / {}\nground_truth_pairs: {}\nout: {}\n",
        out.tags[0].len(),
        out.tags[1].len(),
        out.ground_truth.len(),
        dir.display()
    ))
}

fn read_tag_file(path: &Path) -> Result<Vec<TimeTag>, CliError> {
    let data = |message: String| CliError::Data {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| data(e.to_string()))?;
    read_tags(&bytes).map_err(|e| data(e.to_string()))
}

#[derive(Debug, Serialize)]
struct BellSection {
    counts: Vec<SettingCounts>,
    result: BellResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<Estimate>,
    excluded: u64,
}

#[derive(Debug, Serialize)]
struct FidelitySection {
    hv: SettingCounts,
    diagonal: SettingCounts,
    correlation_hv: Estimate,
    correlation_diagonal: Estimate,
    visibility_hv: f64,
    visibility_diagonal: f64,
    fidelity_lower_bound: Estimate,
    excluded: u64,
}

#[derive(Debug, Serialize)]
struct Singles {
    rate_hz: [f64; 2],
    accidental_rate_hz: f64,
}

#[derive(Debug, Serialize)]
struct Analysis {
    mode: Mode,
    window: CoincidenceWindow,
    sync: Option<SyncFit>,
    rates: RateReport,
    singles: Singles,
    #[serde(skip_serializing_if = "Option::is_none")]
    bell: Option<BellSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fidelity: Option<FidelitySection>,
}

fn detection_span_s(tags: &[TimeTag]) -> f64 {
    match (tags.first(), tags.last()) {
        (Some(a), Some(b)) => (b.time_ps - a.time_ps) * 1e-12,
        _ => 0.0,
    }
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<String, CliError> {
    let window = match (a.window_ps, &a.scenario) {
        (Some(w), Some(p)) => CoincidenceWindow {
            width_ps: w as f64,
            ..load_scenario(p)?.0.window
        },
        (Some(w), None) => CoincidenceWindow::new(w as f64),
        (None, Some(p)) => load_scenario(p)?.0.window,
        (None, None) => CoincidenceWindow::new(DEFAULT_WINDOW_PS as f64),
    };
    if !(window.width_ps > 0.0) {
        return Err(CliError::Config("--window-ps must be positive".into()));
    }
    if let Some(t) = a.effective_time_s {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CliError::Config("--effective-time-s must be positive".into()));
        }
    }
    let tags = [read_tag_file(&a.tags1)?, read_tag_file(&a.tags2)?];
    let detections = tags.each_ref().map(|t| t.iter().filter(|x| !x.is_sync()).count());
    // Without detections on either side there is nothing to synchronise.
    let (sync, records) = if detections.contains(&0) {
        (None, Vec::<CoincidenceRecord>::new())
    } else {
        let fit = fit_clock(&tags[0], &tags[1]).map_err(|e| CliError::Analysis(format!("clock sync: {e}")))?;
        let recs = match_coincidences(&tags[0], &tags[1], &fit, &window).map_err(|e| CliError::Analysis(format!("matching: {e}")))?;
        (Some(fit), recs)
    };
    let time_s = a.effective_time_s.unwrap_or_else(|| detection_span_s(&tags[0]));
    let rates = if time_s > 0.0 {
        coincidence_rate_report(&records, time_s)?
    } else {
        RateReport {
            count: 0,
            effective_time_s: 0.0,
            rate_hz: 0.0,
            per_setting: Vec::new(),
        }
    };
    let singles_hz = detections.map(|n| if time_s > 0.0 { n as f64 / time_s } else { 0.0 });
    let singles = Singles {
        rate_hz: singles_hz,
        accidental_rate_hz: accidental_rate(singles_hz[0], singles_hz[1], window.acceptance_width_ps()),
    };
    let tally = Tally::from_records(&records);
    let mut analysis = Analysis {
        mode: a.mode,
        window,
        sync,
        rates,
        singles,
        bell: None,
        fidelity: None,
    };
    let mut summary = format!("coincidences: {}\nrate_hz: {:.4}\n", analysis.rates.count, analysis.rates.rate_hz);
    match a.mode {
        Mode::Rates => {}
        Mode::Bell => {
            let mut counts = [SettingCounts::default(); 4];
            for (c, (i, j)) in counts.iter_mut().zip(CHSH_INDEX_ORDER) {
                *c = tally.get(i, j)?;
            }
            let result = chsh_from_tally(&tally)?;
            let bootstrap = if a.bootstrap > 0 {
                Some(bootstrap_chsh(&counts, a.bootstrap, a.seed)?)
            } else {
                None
            };
            summary += &format!(
                "S: {:.4} ± {:.4} ({:.2} sigma above 2)\n",
                result.s, result.sigma_s, result.violation_sigmas
            );
            analysis.bell = Some(BellSection {
                counts: counts.to_vec(),
                result,
                bootstrap,
                excluded: tally.excluded(&CHSH_INDEX_ORDER),
            });
        }
        Mode::Fidelity => {
            let (hv, diagonal) = (tally.get(0, 0)?, tally.get(1, 1)?);
            let f = fidelity_lower_bound(&hv, &diagonal)?;
            summary += &format!("fidelity_lower_bound: {:.4} ± {:.4}\n", f.value, f.sigma);
            analysis.fidelity = Some(FidelitySection {
                hv,
                diagonal,
                correlation_hv: correlation(&hv)?,
                correlation_diagonal: correlation(&diagonal)?,
                visibility_hv: visibility(&hv)?,
                visibility_diagonal: visibility(&diagonal)?,
                fidelity_lower_bound: f,
                excluded: tally.excluded(&[(0, 0), (1, 1)]),
            });
        }
    }
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| a.tags1.parent().map(Path::to_path_buf).unwrap_or_default());
    write_atomic(&dir, "coincidences.csv", |w| write_coincidences(w, &records))?;
    write_json(&dir, "analysis.json", &analysis)?;
    Ok(summary)
}

pub fn cmd_spacetime(a: &ScenarioArgs) -> Result<String, CliError> {
    let (s, base) = load_scenario(&a.scenario)?;
    let pass = pass_of(&s, &base)?;
    let report = loophole_report(&pass.samples, &s.geometry.stations, &s.qrng[0], s.measurement.lag_s);
    let dir = out_dir(&a.out, &s);
    write_json(&dir, "spacetime.json", &report)?;
    let mut summary = format!(
        "all_spacelike: {}\nmax_path_difference_km: {:.1}\n",
        report.all_spacelike, report.max_path_difference_km
    );
    for p in &report.pairs {
        summary += &format!("{}: {:?}, worst margin {:.2} km\n", p.pair, p.classification, p.worst_margin_km);
    }
    for w in &report.warnings {
        summary += &format!("warning: {w}\n");
    }
    Ok(summary)
}
