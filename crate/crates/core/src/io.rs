//! Run configuration, on-disk formats and the commands behind the `babenko`
//! binary. Tables are CSV with a versioned first line; everything else is
//! JSON. A traced branch is written twice: a table for plotting and a state
//! file holding the coefficients, which `profile`, `rcurve` and `verify` read.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continuation::{
    continue_branch, navigate, start_branch, trivial_bifurcation_mu, BifurcationData, Branch, BranchEvent,
    BranchOrigin, BranchPoint, ContinuationConfig, EventDiagnostics, EventKind,
};
use crate::geometry::{self, CrestAngle, GeometryWarning, RMax};
use crate::solver::{
    point_row, residual_fixed_r, residual_modified, solve_bordered, Closure, ModifiedSystem, SolutionPoint,
};
use crate::spectral::{CosineGrid, DepthParams, SpectralField};

pub const TABLE_HEADER: &str = "# babenko branch table v1";
pub const BIFPOINTS_HEADER: &str = "# babenko bifpoints v1";
pub const PROFILE_HEADER: &str = "# babenko profile v1";
pub const RCURVE_HEADER: &str = "# babenko rcurve v1";
pub const STATE_FORMAT: &str = "babenko-branch-state";
pub const STATE_VERSION: u32 = 1;

pub const ENV_OUT_DIR: &str = "BABENKO_OUT_DIR";
pub const ENV_WORKERS: &str = "BABENKO_WORKERS";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: serde_json::Error },
}

impl RunError {
    /// 2 for bad input, 3 for a numerical hard failure, 4 for a failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io { .. } | RunError::Parse { .. } => 2,
            RunError::Numerical(_) => 3,
            RunError::Verification(_) => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Shortest-form floats round-trip too, but tables promise a fixed width.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(format!("unknown format {s:?}; expected csv or json")),
        }
    }
}

/// One primary branch to trace, optionally followed by every branch that
/// bifurcates from it. On the command line: `5` or `5+`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchSpec {
    pub mode: usize,
    pub seed_amplitude: f64,
    pub amplitude_max: Option<f64>,
    pub navigate: bool,
}

impl Default for BranchSpec {
    fn default() -> Self {
        Self { mode: 1, seed_amplitude: 0.01, amplitude_max: None, navigate: false }
    }
}

impl FromStr for BranchSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (body, navigate) = match s.strip_suffix('+') {
            Some(b) => (b, true),
            None => (s, false),
        };
        let body = body.strip_prefix('C').or_else(|| body.strip_prefix('c')).unwrap_or(body);
        let mode = body
            .parse::<usize>()
            .map_err(|_| format!("bad branch {s:?}; expected a mode number such as 1, C2 or 5+ (with secondaries)"))?;
        Ok(Self { mode, navigate, ..Self::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub depth: f64,
    pub modes: usize,
    pub branches: Vec<BranchSpec>,
    /// Step and tolerance settings; its `modes` is overridden by the top level.
    pub continuation: ContinuationConfig,
    pub out_dir: PathBuf,
    pub format: OutputFormat,
    /// Worker threads for tracing; 0 lets rayon decide.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            depth: std::f64::consts::PI / 5.0,
            modes: 256,
            branches: Vec::new(),
            continuation: ContinuationConfig::default(),
            out_dir: PathBuf::from("out"),
            format: OutputFormat::Csv,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(format!("config file: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `BABENKO_OUT_DIR` and `BABENKO_WORKERS` through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), RunError> {
        if let Some(dir) = lookup(ENV_OUT_DIR).filter(|s| !s.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
        if let Some(w) = lookup(ENV_WORKERS).filter(|s| !s.is_empty()) {
            self.workers = w
                .trim()
                .parse()
                .map_err(|_| RunError::Config(format!("{ENV_WORKERS}={w:?} is not a non-negative integer")))?;
        }
        Ok(())
    }

    pub fn continuation_config(&self) -> ContinuationConfig {
        ContinuationConfig { modes: self.modes, ..self.continuation }
    }

    pub fn depth_params(&self) -> Result<DepthParams, RunError> {
        DepthParams::new(self.depth).map_err(|e| RunError::Config(format!("depth: {e}")))
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return bad(format!("depth must be positive and finite, got {}", self.depth));
        }
        if !(self.modes.is_power_of_two() && (16..=4096).contains(&self.modes)) {
            return bad(format!("modes must be a power of two between 16 and 4096, got {}", self.modes));
        }
        self.continuation_config().validate().map_err(RunError::Config)?;
        if let Some(a) = self.continuation.amplitude_max {
            if !(a > 0.0) {
                return bad(format!("amplitude_max must be positive, got {a}"));
            }
        }
        for b in &self.branches {
            if b.mode == 0 || 2 * b.mode >= self.modes {
                return bad(format!("branch mode {} needs 1 <= n < modes/2 = {}", b.mode, self.modes / 2));
            }
            if !(b.seed_amplitude != 0.0 && b.seed_amplitude.abs() <= 0.05) {
                return bad(format!("branch C{}: seed amplitude must satisfy 0 < |s| <= 0.05", b.mode));
            }
            if let Some(a) = b.amplitude_max {
                if !(a > b.seed_amplitude.abs()) {
                    return bad(format!("branch C{}: amplitude_max {a} is below the seed amplitude", b.mode));
                }
            }
        }
        Ok(())
    }
}

/// μ_n for n = 1..=n_max on the flat state at depth h.
pub fn bifpoints(depth: DepthParams, n_max: usize) -> Vec<(usize, f64)> {
    (1..=n_max).map(|n| (n, trivial_bifurcation_mu(n, depth))).collect()
}

pub fn bifpoints_text(depth: DepthParams, rows: &[(usize, f64)], format: OutputFormat) -> String {
    match format {
        OutputFormat::Csv => {
            let mut s = format!("{BIFPOINTS_HEADER}\nn,mu\n");
            for (n, mu) in rows {
                let _ = writeln!(s, "{n},{}", num(*mu));
            }
            s
        }
        OutputFormat::Json => {
            #[derive(Serialize)]
            struct Row {
                n: usize,
                mu: f64,
            }
            #[derive(Serialize)]
            struct Doc {
                h: f64,
                r: f64,
                points: Vec<Row>,
            }
            let doc = Doc {
                h: depth.h(),
                r: (-depth.h()).exp(),
                points: rows.iter().map(|&(n, mu)| Row { n, mu }).collect(),
            };
            json_text(&doc)
        }
    }
}

fn json_text<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// Branch state files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePoint {
    pub a_target: f64,
    pub node: usize,
    pub sign: f64,
    pub mu: f64,
    pub sup_norm: f64,
    pub surface_max: f64,
    pub mean: f64,
    pub r: f64,
    pub h: f64,
    pub residual: f64,
    pub iterations: usize,
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventDetail {
    Turning { mu_fit: f64, sup_norm_fit: f64 },
    Bifurcation { sector: usize, period: usize, sigma_min: f64, null_vector: Vec<f64>, mu: f64, coeffs: Vec<f64> },
    Extreme { stop_ratio: f64, surface_max: f64, gap: f64, reason: String },
    Failure { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub kind: EventKind,
    pub mu: f64,
    pub sup_norm: f64,
    pub bracket: (usize, usize),
    pub detail: EventDetail,
}

impl EventRecord {
    pub fn from_event(e: &BranchEvent) -> Self {
        let detail = match &e.diagnostics {
            EventDiagnostics::Turning { mu_fit, sup_norm_fit } => {
                EventDetail::Turning { mu_fit: *mu_fit, sup_norm_fit: *sup_norm_fit }
            }
            EventDiagnostics::Bifurcation(d) => EventDetail::Bifurcation {
                sector: d.sector,
                period: d.period,
                sigma_min: d.sigma_min,
                null_vector: d.null_vector.clone(),
                mu: d.point.mu,
                coeffs: d.point.coeffs().to_vec(),
            },
            EventDiagnostics::Extreme { stop_ratio, surface_max, gap, reason } => EventDetail::Extreme {
                stop_ratio: *stop_ratio,
                surface_max: *surface_max,
                gap: *gap,
                reason: reason.clone(),
            },
            EventDiagnostics::Failure { message } => EventDetail::Failure { message: message.clone() },
        };
        Self { kind: e.kind, mu: e.mu, sup_norm: e.sup_norm, bracket: e.bracket, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchState {
    pub format: String,
    pub version: u32,
    pub label: String,
    pub origin: BranchOrigin,
    pub symmetry: usize,
    pub parent_symmetry: usize,
    pub depth: f64,
    pub modes: usize,
    pub points: Vec<StatePoint>,
    pub events: Vec<EventRecord>,
}

impl BranchState {
    pub fn from_branch(b: &Branch) -> Self {
        let points = b
            .points
            .iter()
            .map(|p| StatePoint {
                a_target: p.a_target,
                node: p.node,
                sign: p.sign,
                mu: p.point.mu,
                sup_norm: p.point.sup_norm,
                surface_max: p.surface_max,
                mean: p.point.mean,
                r: p.point.r,
                h: p.point.h,
                residual: p.point.residual_norm,
                iterations: p.point.iterations,
                coeffs: p.point.coeffs().to_vec(),
            })
            .collect();
        Self {
            format: STATE_FORMAT.to_string(),
            version: STATE_VERSION,
            label: b.label.clone(),
            origin: b.origin.clone(),
            symmetry: b.symmetry,
            parent_symmetry: b.parent_symmetry,
            depth: b.depth.h(),
            modes: b.points.first().map_or(0, |p| p.point.w.n()),
            points,
            events: b.events.iter().map(EventRecord::from_event).collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let s: Self = serde_json::from_str(&text).map_err(|source| RunError::Parse { path: path.to_path_buf(), source })?;
        if s.format != STATE_FORMAT || s.version != STATE_VERSION {
            return Err(RunError::Config(format!(
                "{}: expected {STATE_FORMAT} v{STATE_VERSION}, found {} v{}",
                path.display(),
                s.format,
                s.version
            )));
        }
        Ok(s)
    }

    fn grid(&self) -> Result<Arc<CosineGrid>, RunError> {
        CosineGrid::shared(self.modes).map_err(|e| RunError::Config(format!("branch {}: {e}", self.label)))
    }

    fn field(&self, grid: &Arc<CosineGrid>, coeffs: &[f64]) -> Result<SpectralField, RunError> {
        SpectralField::from_coeffs(grid.clone(), coeffs.to_vec())
            .map_err(|e| RunError::Config(format!("branch {}: {e}", self.label)))
    }

    /// Rebuilds the in-memory branch with the stored values taken as given.
    pub fn to_branch(&self) -> Result<Branch, RunError> {
        let grid = self.grid()?;
        let depth = DepthParams::new(self.depth).map_err(|e| RunError::Config(format!("branch {}: {e}", self.label)))?;
        let solution = |mu: f64, w: SpectralField, p: Option<&StatePoint>| SolutionPoint {
            mu,
            h: self.depth,
            r: p.map_or_else(|| (-self.depth - w.mean()).exp(), |p| p.r),
            sup_norm: p.map_or_else(|| w.sup_norm(), |p| p.sup_norm),
            mean: p.map_or_else(|| w.mean(), |p| p.mean),
            residual_norm: p.map_or(0.0, |p| p.residual),
            iterations: p.map_or(0, |p| p.iterations),
            residual_history: Vec::new(),
            w,
        };
        let mut points = Vec::with_capacity(self.points.len());
        for p in &self.points {
            let w = self.field(&grid, &p.coeffs)?;
            points.push(BranchPoint {
                a_target: p.a_target,
                node: p.node,
                sign: p.sign,
                surface_max: p.surface_max,
                point: solution(p.mu, w, Some(p)),
            });
        }
        let mut events = Vec::with_capacity(self.events.len());
        for e in &self.events {
            let diagnostics = match &e.detail {
                EventDetail::Turning { mu_fit, sup_norm_fit } => {
                    EventDiagnostics::Turning { mu_fit: *mu_fit, sup_norm_fit: *sup_norm_fit }
                }
                EventDetail::Bifurcation { sector, period, sigma_min, null_vector, mu, coeffs } => {
                    let w = self.field(&grid, coeffs)?;
                    EventDiagnostics::Bifurcation(Box::new(BifurcationData {
                        sector: *sector,
                        period: *period,
                        point: solution(*mu, w, None),
                        null_vector: null_vector.clone(),
                        sigma_min: *sigma_min,
                    }))
                }
                EventDetail::Extreme { stop_ratio, surface_max, gap, reason } => EventDiagnostics::Extreme {
                    stop_ratio: *stop_ratio,
                    surface_max: *surface_max,
                    gap: *gap,
                    reason: reason.clone(),
                },
                EventDetail::Failure { message } => EventDiagnostics::Failure { message: message.clone() },
            };
            events.push(BranchEvent { kind: e.kind, mu: e.mu, sup_norm: e.sup_norm, bracket: e.bracket, diagnostics });
        }
        Ok(Branch {
            label: self.label.clone(),
            origin: self.origin.clone(),
            symmetry: self.symmetry,
            parent_symmetry: self.parent_symmetry,
            depth,
            points,
            events,
        })
    }
}

/// Accepts either a state file or a table whose sibling state file exists.
pub fn state_path(path: &Path) -> PathBuf {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    if name.ends_with(".state.json") {
        return path.to_path_buf();
    }
    let stem = name.strip_suffix(".csv").or_else(|| name.strip_suffix(".json"));
    match stem {
        Some(stem) => path.with_file_name(format!("{stem}.state.json")),
        None => path.to_path_buf(),
    }
}

fn event_flags(b: &Branch, index: usize) -> String {
    let names: Vec<&str> = b
        .events
        .iter()
        .filter(|e| e.bracket.1 == index)
        .map(|e| match e.kind {
            EventKind::TurningPoint => "turning_point",
            EventKind::SecondaryBifurcation => "secondary_bifurcation",
            EventKind::ExtremeTermination => "extreme_termination",
            EventKind::HardFailure => "hard_failure",
        })
        .collect();
    names.join(";")
}

pub fn branch_table(b: &Branch, format: OutputFormat) -> String {
    match format {
        OutputFormat::Csv => {
            let mut s = format!("{TABLE_HEADER}\nindex,a_target,mu,sup_norm,mean,r,residual,event_flags\n");
            for (i, p) in b.points.iter().enumerate() {
                let q = &p.point;
                let _ = writeln!(
                    s,
                    "{i},{},{},{},{},{},{},{}",
                    num(p.a_target),
                    num(q.mu),
                    num(q.sup_norm),
                    num(q.mean),
                    num(q.r),
                    num(q.residual_norm),
                    event_flags(b, i)
                );
            }
            s
        }
        OutputFormat::Json => {
            #[derive(Serialize)]
            struct Row {
                index: usize,
                a_target: f64,
                mu: f64,
                sup_norm: f64,
                mean: f64,
                r: f64,
                residual: f64,
                event_flags: String,
            }
            #[derive(Serialize)]
            struct Doc<'a> {
                label: &'a str,
                h: f64,
                rows: Vec<Row>,
            }
            let rows = b
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| Row {
                    index: i,
                    a_target: p.a_target,
                    mu: p.point.mu,
                    sup_norm: p.point.sup_norm,
                    mean: p.point.mean,
                    r: p.point.r,
                    residual: p.point.residual_norm,
                    event_flags: event_flags(b, i),
                })
                .collect();
            json_text(&Doc { label: &b.label, h: b.depth.h(), rows })
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn ext(format: OutputFormat) -> &'static str {
    match format {
        OutputFormat::Csv => "csv",
        OutputFormat::Json => "json",
    }
}

/// Writes `<label>.csv|json` and `<label>.state.json`; returns both paths.
pub fn write_branch(b: &Branch, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>, RunError> {
    let table = dir.join(format!("{}.{}", b.label, ext(format)));
    write_file(&table, &branch_table(b, format))?;
    let state = dir.join(format!("{}.state.json", b.label));
    write_file(&state, &json_text(&BranchState::from_branch(b)))?;
    Ok(vec![table, state])
}

// ---------------------------------------------------------------------------
// trace

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchStatus {
    Ok,
    HardFailure,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub label: String,
    pub status: BranchStatus,
    pub points: usize,
    pub error: Option<String>,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventsFile {
    pub version: u32,
    pub depth: f64,
    pub modes: usize,
    pub branches: Vec<BranchReport>,
}

#[derive(Debug)]
pub struct TraceOutcome {
    pub branches: Vec<Branch>,
    pub reports: Vec<BranchReport>,
    pub files: Vec<PathBuf>,
}

impl TraceOutcome {
    pub fn hard_failures(&self) -> usize {
        self.reports.iter().filter(|r| r.status != BranchStatus::Ok).count()
    }
}

fn report_for(b: &Branch) -> BranchReport {
    let failed = b.events.iter().any(|e| e.kind == EventKind::HardFailure);
    BranchReport {
        label: b.label.clone(),
        status: if failed { BranchStatus::HardFailure } else { BranchStatus::Ok },
        points: b.points.len(),
        error: None,
        events: b.events.iter().map(EventRecord::from_event).collect(),
    }
}

fn trace_spec(spec: &BranchSpec, depth: DepthParams, base: &ContinuationConfig) -> Vec<Result<Branch, BranchReport>> {
    let cfg = ContinuationConfig { amplitude_max: spec.amplitude_max.or(base.amplitude_max), ..*base };
    let fail = |label: String, e: String| BranchReport {
        label,
        status: BranchStatus::Error,
        points: 0,
        error: Some(e),
        events: Vec::new(),
    };
    let label = format!("C{}", spec.mode);
    let primary = match start_branch(spec.mode, spec.seed_amplitude, depth, &cfg).and_then(|b| continue_branch(b, &cfg)) {
        Ok(b) => b,
        Err(e) => return vec![Err(fail(label, e.to_string()))],
    };
    if !spec.navigate {
        return vec![Ok(primary)];
    }
    let secondaries = navigate(&primary, &cfg);
    let mut out = vec![Ok(primary)];
    match secondaries {
        Ok(list) => out.extend(list.into_iter().map(|s| Ok(s.branch))),
        Err(e) => out.push(Err(fail(format!("{label}-secondary"), e.to_string()))),
    }
    out
}

/// Traces every branch spec on a pool of `workers` threads and writes one
/// table and one state file per branch plus `events.json`. An empty spec list
/// writes nothing.
pub fn cmd_trace(cfg: &RunConfig) -> Result<TraceOutcome, RunError> {
    cfg.validate()?;
    if cfg.branches.is_empty() {
        return Ok(TraceOutcome { branches: Vec::new(), reports: Vec::new(), files: Vec::new() });
    }
    let depth = cfg.depth_params()?;
    let ccfg = cfg.continuation_config();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| RunError::Config(format!("worker pool: {e}")))?;
    let results: Vec<Vec<Result<Branch, BranchReport>>> =
        pool.install(|| cfg.branches.par_iter().map(|s| trace_spec(s, depth, &ccfg)).collect());

    let mut branches = Vec::new();
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(b) => {
                files.extend(write_branch(&b, &cfg.out_dir, cfg.format)?);
                reports.push(report_for(&b));
                branches.push(b);
            }
            Err(rep) => reports.push(rep),
        }
    }
    let events = EventsFile { version: 1, depth: cfg.depth, modes: cfg.modes, branches: reports.clone() };
    let path = cfg.out_dir.join("events.json");
    write_file(&path, &json_text(&events))?;
    files.push(path);
    Ok(TraceOutcome { branches, reports, files })
}

// ---------------------------------------------------------------------------
// profile

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointSelector {
    Index(usize),
    Endpoint,
    NearestMu(f64),
}

impl FromStr for PointSelector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if matches!(s, "endpoint" | "end" | "last") {
            return Ok(Self::Endpoint);
        }
        if let Some(v) = s.strip_prefix("mu=").or_else(|| s.strip_prefix("mu:")) {
            return v.parse().map(Self::NearestMu).map_err(|_| format!("bad μ value in {s:?}"));
        }
        s.parse()
            .map(Self::Index)
            .map_err(|_| format!("bad point selector {s:?}; use endpoint, an index, or mu=<value>"))
    }
}

fn available_points(s: &BranchState) -> String {
    if s.points.is_empty() {
        return format!("branch {} has no points", s.label);
    }
    let (lo, hi) = s
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.mu), hi.max(p.mu)));
    format!(
        "branch {} has points 0..={} with μ in [{lo:.6}, {hi:.6}]; select with endpoint, an index, or mu=<value>",
        s.label,
        s.points.len() - 1
    )
}

pub fn select_point(s: &BranchState, sel: Option<PointSelector>) -> Result<usize, RunError> {
    let missing = || RunError::Config(format!("no point selected: {}", available_points(s)));
    let n = s.points.len();
    match sel.ok_or_else(missing)? {
        _ if n == 0 => Err(missing()),
        PointSelector::Endpoint => Ok(n - 1),
        PointSelector::Index(i) if i < n => Ok(i),
        PointSelector::Index(i) => Err(RunError::Config(format!("index {i} out of range: {}", available_points(s)))),
        PointSelector::NearestMu(mu) => Ok((0..n)
            .min_by(|&a, &b| (s.points[a].mu - mu).abs().total_cmp(&(s.points[b].mu - mu).abs()))
            .expect("non-empty")),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CrestRecord {
    pub t: f64,
    pub x: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileMeta {
    pub label: String,
    pub index: usize,
    pub mu: f64,
    pub sup_norm: f64,
    pub r: f64,
    pub h: f64,
    pub crests: Vec<CrestRecord>,
    pub highest_crests: usize,
    pub crest_angle: Option<CrestAngle>,
    pub mean_residual: f64,
    pub warnings: Vec<GeometryWarning>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileDoc {
    #[serde(flatten)]
    pub meta: ProfileMeta,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Surface (x(t), y(t)) over one period, sampled at `m` points.
pub fn profile_of(s: &BranchState, index: usize, m: usize) -> Result<ProfileDoc, RunError> {
    let p = &s.points[index];
    let grid = s.grid()?;
    let w = s.field(&grid, &p.coeffs)?;
    let depth = DepthParams::new(s.depth).map_err(|e| RunError::Config(e.to_string()))?;
    let prof = geometry::surface_curve(&w, p.mu, depth, m).map_err(|e| RunError::Numerical(e.to_string()))?;
    let crest_angle = if prof.census.crests.is_empty() { None } else { geometry::crest_angle_estimate(&prof).ok() };
    let meta = ProfileMeta {
        label: s.label.clone(),
        index,
        mu: p.mu,
        sup_norm: p.sup_norm,
        r: prof.r,
        h: s.depth,
        crests: prof.census.crests.iter().map(|c| CrestRecord { t: c.t, x: c.x, height: c.height }).collect(),
        highest_crests: prof.census.highest,
        crest_angle,
        mean_residual: prof.mean_residual,
        warnings: prof.warnings.clone(),
    };
    Ok(ProfileDoc { meta, t: prof.t, x: prof.x, y: prof.y })
}

/// Writes `<label>.profile-<index>.csv` plus a `.json` sidecar, or only the
/// `.json` with the samples inlined.
pub fn cmd_profile(
    branch_file: &Path,
    selector: Option<PointSelector>,
    samples: usize,
    out_dir: &Path,
    format: OutputFormat,
) -> Result<(ProfileDoc, Vec<PathBuf>), RunError> {
    if samples < 4 {
        return Err(RunError::Config(format!("need at least 4 profile samples, got {samples}")));
    }
    let s = BranchState::read(&state_path(branch_file))?;
    let index = select_point(&s, selector)?;
    let doc = profile_of(&s, index, samples)?;
    let stem = format!("{}.profile-{index}", s.label);
    let named = |e: &str| out_dir.join(format!("{stem}.{e}"));
    let mut files = Vec::new();
    match format {
        OutputFormat::Csv => {
            let mut text = format!("{PROFILE_HEADER}\nt,x,y\n");
            for i in 0..doc.t.len() {
                let _ = writeln!(text, "{},{},{}", num(doc.t[i]), num(doc.x[i]), num(doc.y[i]));
            }
            let csv = named("csv");
            write_file(&csv, &text)?;
            let meta = named("json");
            write_file(&meta, &json_text(&doc.meta))?;
            files.extend([csv, meta]);
        }
        OutputFormat::Json => {
            let path = named("json");
            write_file(&path, &json_text(&doc))?;
            files.push(path);
        }
    }
    Ok((doc, files))
}

// ---------------------------------------------------------------------------
// rcurve

#[derive(Debug, Clone, Serialize)]
pub struct RCurveDoc {
    pub label: String,
    pub h: f64,
    /// r at the flat state, e^{-h}.
    pub trivial_limit: f64,
    pub maximum: Option<RMax>,
    pub interior_maxima: usize,
    pub sup_norm: Vec<f64>,
    pub r: Vec<f64>,
}

pub fn cmd_rcurve(branch_file: &Path, out_dir: &Path, format: OutputFormat) -> Result<(RCurveDoc, Vec<PathBuf>), RunError> {
    let s = BranchState::read(&state_path(branch_file))?;
    let b = s.to_branch()?;
    let rc = geometry::r_curve(&b);
    let doc = RCurveDoc {
        label: s.label.clone(),
        h: s.depth,
        trivial_limit: (-s.depth).exp(),
        maximum: rc.maximum,
        interior_maxima: rc.interior_maxima,
        sup_norm: rc.points.iter().map(|p| p.0).collect(),
        r: rc.points.iter().map(|p| p.1).collect(),
    };
    let stem = format!("{}.rcurve", s.label);
    let named = |e: &str| out_dir.join(format!("{stem}.{e}"));
    let mut files = Vec::new();
    match format {
        OutputFormat::Csv => {
            let mut text = format!("{RCURVE_HEADER}\nindex,sup_norm,r\n");
            for (i, (a, r)) in rc.points.iter().enumerate() {
                let _ = writeln!(text, "{i},{},{}", num(*a), num(*r));
            }
            let csv = named("csv");
            write_file(&csv, &text)?;
            #[derive(Serialize)]
            struct Meta<'a> {
                label: &'a str,
                h: f64,
                trivial_limit: f64,
                maximum: Option<RMax>,
                interior_maxima: usize,
            }
            let meta = named("json");
            let m = Meta {
                label: &doc.label,
                h: doc.h,
                trivial_limit: doc.trivial_limit,
                maximum: doc.maximum,
                interior_maxima: doc.interior_maxima,
            };
            write_file(&meta, &json_text(&m))?;
            files.extend([csv, meta]);
        }
        OutputFormat::Json => {
            let path = named("json");
            write_file(&path, &json_text(&doc))?;
            files.push(path);
        }
    }
    Ok((doc, files))
}

// ---------------------------------------------------------------------------
// verify

/// Thresholds of the invariant suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyTolerances {
    pub residual: f64,
    pub stored_fields: f64,
    pub constraint: f64,
    pub mean_integral: f64,
    pub grid_doubling: f64,
    /// At most this many points per branch are checked, evenly spaced.
    pub max_points: usize,
}

impl Default for VerifyTolerances {
    fn default() -> Self {
        Self {
            residual: 1e-9,
            stored_fields: 1e-12,
            constraint: 1e-10,
            mean_integral: 1e-8,
            grid_doubling: 1e-8,
            max_points: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub branch: String,
    pub point: Option<usize>,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub version: u32,
    pub pass: bool,
    pub files: Vec<String>,
    pub checks_run: usize,
    pub checks_failed: usize,
    /// Names of the invariants with at least one failure.
    pub violated: Vec<&'static str>,
    pub warnings: Vec<String>,
    pub checks: Vec<Check>,
}

fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = (0..max).map(|i| (i * (n - 1) + (max - 1) / 2) / (max - 1)).collect();
    v.dedup();
    v
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Re-solves a point on a grid of 2N modes with the amplitude pinned at the
/// same t and returns |Δμ|.
pub fn grid_doubling_delta(s: &BranchState, index: usize) -> Result<f64, String> {
    let p = &s.points[index];
    let n = s.modes;
    let depth = DepthParams::new(s.depth).map_err(|e| e.to_string())?;
    let fine = CosineGrid::shared(2 * n).map_err(|e| e.to_string())?;
    let coarse = CosineGrid::shared(n).map_err(|e| e.to_string())?;
    let t = coarse.nodes()[p.node];
    let mut c = p.coeffs.clone();
    c.resize(2 * n, 0.0);
    let sys = ModifiedSystem::new(fine.clone(), depth);
    let closure = Closure::Amplitude { row: point_row(t, p.sign, 2 * n), target: p.a_target };
    let cfg = crate::solver::NewtonConfig { residual_tol: 1e-12, ..Default::default() };
    let sol = solve_bordered(&sys, &c, p.mu, &closure, &cfg, s.symmetry.max(1)).map_err(|e| e.to_string())?;
    Ok((sol.mu - p.mu).abs())
}

fn verify_branch(s: &BranchState, tol: &VerifyTolerances, checks: &mut Vec<Check>, warnings: &mut Vec<String>) {
    let mut add = |name: &'static str, point: Option<usize>, value: f64, tolerance: f64, pass: bool| {
        checks.push(Check { name, branch: s.label.clone(), point, value, tolerance, pass });
    };
    let Ok(grid) = s.grid() else {
        add("grid", None, s.modes as f64, 0.0, false);
        return;
    };
    let Ok(depth) = DepthParams::new(s.depth) else {
        add("depth", None, s.depth, 0.0, false);
        return;
    };
    if s.points.is_empty() {
        warnings.push(format!("branch {} has no points", s.label));
    }
    for i in sample_indices(s.points.len(), tol.max_points) {
        let p = &s.points[i];
        let Ok(w) = s.field(&grid, &p.coeffs) else {
            add("coefficient_count", Some(i), p.coeffs.len() as f64, s.modes as f64, false);
            continue;
        };
        let r_expect = (-s.depth - w.mean()).exp();
        let stored = rel(p.mean, w.mean()).max(rel(p.sup_norm, w.sup_norm())).max(rel(p.r, r_expect));
        add("stored_fields", Some(i), stored, tol.stored_fields, stored <= tol.stored_fields);

        let c = p.sign * w.eval(grid.nodes()[p.node.min(s.modes - 1)]) - p.a_target;
        add("constraint", Some(i), c.abs(), tol.constraint, c.abs() <= tol.constraint);

        let res = residual_modified(&w, p.mu, depth).map(|f| max_abs(f.coeffs())).unwrap_or(f64::INFINITY);
        add("residual_modified", Some(i), res, tol.residual, res <= tol.residual);

        // The fixed-r equation at r = exp(-h - P0 w), and back again.
        let fixed = residual_fixed_r(&w, p.mu, p.r).map(|f| max_abs(f.coeffs())).unwrap_or(f64::INFINITY);
        add("fixed_r_residual", Some(i), fixed, tol.residual, fixed <= tol.residual);
        let h_back = -p.r.ln() - w.mean();
        let back = DepthParams::new(h_back)
            .ok()
            .and_then(|d| residual_modified(&w, p.mu, d).ok())
            .map_or(f64::INFINITY, |f| max_abs(f.coeffs()));
        let back = back.max((h_back - s.depth).abs());
        add("fixed_r_reverse", Some(i), back, tol.residual, back <= tol.residual);

        add("mean_nonpositive", Some(i), p.mean, 0.0, p.mean <= 0.0);
        add("radius_in_unit_interval", Some(i), p.r, 1.0, p.r > 0.0 && p.r < 1.0);

        match geometry::surface_curve(&w, p.mu, depth, 4 * s.modes) {
            Ok(prof) => {
                let m = prof.mean_residual.abs();
                add("zero_mean_surface", Some(i), m, tol.mean_integral, m <= tol.mean_integral);
                let top = prof.census.max_height.max(prof.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                add("below_half_mu", Some(i), top - 0.5 * p.mu, 0.0, top < 0.5 * p.mu);
            }
            Err(_) => add("zero_mean_surface", Some(i), f64::INFINITY, tol.mean_integral, false),
        }
    }
    if s.points.len() >= 3 {
        let mid = s.points.len() / 2;
        let (value, pass) = match grid_doubling_delta(s, mid) {
            Ok(d) => (d, d <= tol.grid_doubling),
            Err(e) => {
                warnings.push(format!("branch {}: grid doubling at point {mid} failed: {e}", s.label));
                (f64::INFINITY, false)
            }
        };
        add("grid_doubling", Some(mid), value, tol.grid_doubling, pass);
    }
}

/// Runs the invariant suite over the given states. No input at all is a
/// vacuous pass that carries a warning.
pub fn verify_states(states: &[(String, BranchState)], tol: &VerifyTolerances) -> VerifyReport {
    let per: Vec<(Vec<Check>, Vec<String>)> = states
        .par_iter()
        .map(|(_, s)| {
            let mut c = Vec::new();
            let mut w = Vec::new();
            verify_branch(s, tol, &mut c, &mut w);
            (c, w)
        })
        .collect();
    let mut checks = Vec::new();
    let mut warnings = Vec::new();
    for (c, w) in per {
        checks.extend(c);
        warnings.extend(w);
    }
    if checks.is_empty() {
        warnings.push("no branch points to verify; nothing was checked".into());
    }
    let mut violated: Vec<&'static str> = Vec::new();
    for c in checks.iter().filter(|c| !c.pass) {
        if !violated.contains(&c.name) {
            violated.push(c.name);
        }
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    VerifyReport {
        version: 1,
        pass: failed == 0,
        files: states.iter().map(|(f, _)| f.clone()).collect(),
        checks_run: checks.len(),
        checks_failed: failed,
        violated,
        warnings,
        checks,
    }
}

/// State files under `dir`, sorted by name.
pub fn find_states(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".state.json")))
        .collect();
    v.sort();
    Ok(v)
}

/// Verifies `files` (or every state file in the output directory) and writes
/// `verify.json`. A corrupt or unreadable file is a failed check, not an abort.
pub fn cmd_verify(cfg: &RunConfig, files: &[PathBuf]) -> Result<(VerifyReport, PathBuf), RunError> {
    cfg.validate()?;
    let files = if files.is_empty() { find_states(&cfg.out_dir)? } else { files.iter().map(|f| state_path(f)).collect() };
    let mut states = Vec::new();
    let mut unreadable = Vec::new();
    for f in &files {
        match BranchState::read(f) {
            Ok(s) => states.push((f.display().to_string(), s)),
            Err(e) => unreadable.push((f.display().to_string(), e.to_string())),
        }
    }
    let mut report = verify_states(&states, &VerifyTolerances::default());
    for (f, e) in unreadable {
        report.checks.push(Check { name: "readable", branch: f.clone(), point: None, value: f64::NAN, tolerance: 0.0, pass: false });
        report.files.push(f);
        report.warnings.push(e);
        report.checks_run += 1;
        report.checks_failed += 1;
        report.pass = false;
        if !report.violated.contains(&"readable") {
            report.violated.push("readable");
        }
    }
    if report.checks_run > 0 {
        report.warnings.retain(|w| !w.starts_with("no branch points"));
    }
    let path = cfg.out_dir.join("verify.json");
    write_file(&path, &json_text(&report))?;
    Ok((report, path))
}
