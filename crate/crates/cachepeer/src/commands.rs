//! The subcommands, independent of argument parsing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cachepeer_core::config::{ScenarioConfig, Severity};
use cachepeer_core::ids::TenantId;
use cachepeer_core::interception::{derive_rules, MissPredictorConfig};
use cachepeer_core::report::{DeltaReport, MetricsReport};
use cachepeer_core::sim::{self, SimError, SimOutput};
use cachepeer_core::time::{SimDuration, SimTime};
use log::{info, warn};

use crate::error::CliError;
use crate::scenario::{load_report, load_scenario, to_json, write_file};
use crate::traces::{self, RequestRow};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Format {
    Csv,
    #[default]
    Json,
}

impl Format {
    fn report_name(self, stem: &str) -> String {
        match self {
            Format::Csv => format!("{stem}.csv"),
            Format::Json => format!("{stem}.json"),
        }
    }
}

pub struct RunArgs {
    pub scenario: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub format: Format,
}

pub struct CompareArgs {
    pub scenario: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub format: Format,
}

pub struct DeriveRulesArgs {
    pub log: PathBuf,
    pub tenant: TenantId,
    pub window_s: f64,
    pub threshold: f64,
    pub min_samples: u64,
    pub out: PathBuf,
}

pub struct ReportArgs {
    pub input: PathBuf,
    pub format: Format,
    pub out: Option<PathBuf>,
}

fn issues_to_error(issues: &[cachepeer_core::config::Issue], path: &Path) -> CliError {
    let lines: Vec<String> = issues
        .iter()
        .filter(|i| i.severity == Severity::Error)
        .map(|i| i.to_string())
        .collect();
    CliError::Config(format!(
        "{}: invalid scenario\n  {}",
        path.display(),
        lines.join("\n  ")
    ))
}

/// Loads and validates a scenario, printing warnings to stderr.
pub fn checked_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let mut cfg = load_scenario(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let issues = cfg.validate();
    for i in issues.iter().filter(|i| i.severity == Severity::Warning) {
        warn!("{}: {i}", path.display());
        eprintln!("{i}");
    }
    if ScenarioConfig::has_errors(&issues) {
        return Err(issues_to_error(&issues, path));
    }
    Ok(cfg)
}

fn simulate(cfg: &ScenarioConfig, path: &Path) -> Result<SimOutput, CliError> {
    sim::run(cfg).map_err(|e| match e {
        SimError::ConfigInvalid(issues) => issues_to_error(&issues, path),
        other => CliError::Config(format!("{}: {other}", path.display())),
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn report_bytes(report: &MetricsReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => to_json(report).into_bytes(),
        Format::Csv => {
            let mut rows = vec![("global".to_string(), &report.global)];
            rows.extend(report.tenants.iter().map(|(t, m)| (t.to_string(), m)));
            traces::table_csv(&rows)
        }
    }
}

pub fn delta_bytes(delta: &DeltaReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => to_json(delta).into_bytes(),
        Format::Csv => {
            let mut rows = vec![("global".to_string(), &delta.global)];
            rows.extend(delta.tenants.iter().map(|(t, d)| (t.to_string(), d)));
            traces::table_csv(&rows)
        }
    }
}

/// Writes the report, the request and ICP traces, one access log per cache
/// and the final rule tables into `dir`.
pub fn write_outputs(dir: &Path, out: &SimOutput, format: Format) -> Result<(), CliError> {
    create_dir(dir)?;
    write_file(
        &dir.join(format.report_name("report")),
        &report_bytes(&out.report, format),
    )?;
    write_file(
        &dir.join("requests.csv"),
        &traces::requests_csv(out.requests.iter().map(RequestRow::from)),
    )?;
    write_file(&dir.join("icp.csv"), &traces::icp_csv(&out.icp_trace))?;
    for (cache, log) in &out.access_logs {
        write_file(
            &dir.join(format!("access_log_{cache}.csv")),
            &traces::access_log_csv(log),
        )?;
    }
    write_file(
        &dir.join("rules.csv"),
        &traces::rules_csv(out.rules.values()),
    )?;
    Ok(())
}

fn summary_line(label: &str, r: &MetricsReport) -> String {
    let g = &r.global;
    let ms = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    format!(
        "{label}requests={} local={} peer={} origin={} bypassed={} mean_latency_ms={} wan_bytes={} peering_bytes={}",
        g.requests,
        g.served_local,
        g.served_peer,
        g.served_origin,
        g.served_origin_bypassed,
        ms(g.latency_mean_ms),
        g.wan_bytes,
        g.peering_bytes
    )
}

pub fn run(args: &RunArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = checked_scenario(&args.scenario, args.seed)?;
    info!("running {} with seed {}", args.scenario.display(), cfg.seed);
    let out = simulate(&cfg, &args.scenario)?;
    write_outputs(&args.out, &out, args.format)?;
    let _ = writeln!(stdout, "{}", summary_line("", &out.report));
    Ok(())
}

/// Runs a scenario with its peering links and again without them.
pub fn compare_runs(cfg: &ScenarioConfig) -> Result<(SimOutput, SimOutput), SimError> {
    let mut off = cfg.clone();
    off.peering.links.clear();
    std::thread::scope(|s| {
        let on = s.spawn(|| sim::run(cfg));
        let off = s.spawn(|| sim::run(&off));
        let on = on.join().expect("simulation thread panicked")?;
        let off = off.join().expect("simulation thread panicked")?;
        Ok((on, off))
    })
}

pub fn compare(args: &CompareArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = checked_scenario(&args.scenario, args.seed)?;
    if cfg.peering.links.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no peering defined; compare needs at least one peering link",
            args.scenario.display()
        )));
    }
    let (on, off) = compare_runs(&cfg)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.scenario.display())))?;
    let delta = DeltaReport::new(&on.report, &off.report);
    create_dir(&args.out)?;
    write_outputs(&args.out.join("peering-on"), &on, args.format)?;
    write_outputs(&args.out.join("peering-off"), &off, args.format)?;
    write_file(
        &args.out.join(args.format.report_name("delta")),
        &delta_bytes(&delta, args.format),
    )?;
    let _ = writeln!(stdout, "{}", summary_line("on:  ", &on.report));
    let _ = writeln!(stdout, "{}", summary_line("off: ", &off.report));
    let _ = writeln!(
        stdout,
        "delta: latency_mean_ms={} wan_bytes={} vi_traversals={} peering_bytes={}",
        delta
            .global
            .latency_mean_ms
            .map_or("-".to_string(), |v| format!("{v:.3}")),
        delta.global.wan_bytes,
        delta
            .global
            .mean_vi_traversals
            .map_or("-".to_string(), |v| format!("{v:.4}")),
        delta.global.peering_bytes
    );
    Ok(())
}

pub fn derive(args: &DeriveRulesArgs) -> Result<(), CliError> {
    if !(args.window_s.is_finite() && args.window_s > 0.0) {
        return Err(CliError::Usage(
            "--window must be a positive number of seconds".into(),
        ));
    }
    if args.threshold.is_nan() {
        return Err(CliError::Usage("--threshold must be a number".into()));
    }
    let text = fs::read_to_string(&args.log).map_err(|e| CliError::io(&args.log, e))?;
    let log = traces::parse_access_log(&args.log, &text)?;
    let now = log.records().last().map_or(SimTime::ZERO, |r| r.time);
    let cfg = MissPredictorConfig {
        window: SimDuration::from_secs_f64(args.window_s),
        min_samples: args.min_samples,
        miss_threshold: args.threshold,
    };
    let table = derive_rules(args.tenant, &log, &cfg, now);
    info!(
        "derived {} rule(s) from {} record(s)",
        table.len(),
        log.len()
    );
    write_file(&args.out, &traces::rules_csv([&table]))
}

pub fn validate(scenario: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_scenario(scenario)?;
    let issues = cfg.validate();
    for i in &issues {
        let _ = writeln!(stdout, "{i}");
    }
    if ScenarioConfig::has_errors(&issues) {
        return Err(issues_to_error(&issues, scenario));
    }
    let _ = writeln!(stdout, "ok");
    Ok(())
}

pub fn report(args: &ReportArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let report = load_report(&args.input)?;
    let bytes = report_bytes(&report, args.format);
    match &args.out {
        Some(p) => write_file(p, &bytes),
        None => stdout
            .write_all(&bytes)
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}
