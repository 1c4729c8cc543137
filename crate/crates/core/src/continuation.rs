//! Branches of nontrivial solutions: seeding from the trivial solution, step
//! control in the (μ, a) plane, turning points, secondary bifurcations,
//! branch switching, and termination at the extreme wave.
//!
//! Each step predicts along the secant and corrects on the line through the
//! predicted (μ, a) point normal to the secant. When the branch is nearly flat
//! in μ this is plain amplitude stepping; it also passes turning points in
//! either variable and the kinks in max|w| where the highest crest changes.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, parabola_peak};
use crate::solver::{
    argmax_node, point_row, solve_bordered, Closure, ModifiedSystem,
    NewtonConfig, SolutionPoint, SolveError, WaveSystem,
};
use crate::spectral::{mu_k, CosineGrid, DepthParams, SpectralError, SpectralField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContinuationError {
    #[error("could not seed branch C{mode}: {source}")]
    Seed { mode: usize, source: SolveError },
    #[error("branch switching failed: {0}")]
    Switch(String),
    #[error("invalid continuation setting: {0}")]
    Config(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuationConfig {
    pub amplitude_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    /// Bisection stops when the bracket is this short in the (μ, a) plane.
    pub bifurcation_monitor_tol: f64,
    pub extreme_stop_ratio: f64,
    pub max_points: usize,
    pub modes: usize,
    pub amplitude_max: Option<f64>,
    pub detect_bifurcations: bool,
    /// Radius of the switching circle in coefficient space.
    pub switch_radius: f64,
    /// Bifurcations closer than this in ‖w‖∞ are switched from jointly.
    pub cluster_tol: f64,
    /// Also trace the half of each cluster branch that ascends in μ.
    pub ascending_halves: bool,
    pub newton: NewtonConfig,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            amplitude_step: 5e-3,
            min_step: 1e-5,
            max_step: 2e-2,
            bifurcation_monitor_tol: 1e-10,
            extreme_stop_ratio: 1e-3,
            max_points: 5000,
            modes: 256,
            amplitude_max: None,
            detect_bifurcations: true,
            switch_radius: 1e-3,
            cluster_tol: 2e-3,
            ascending_halves: false,
            newton: NewtonConfig::default(),
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.newton.validate()?;
        let positive = [
            ("amplitude_step", self.amplitude_step),
            ("min_step", self.min_step),
            ("max_step", self.max_step),
            ("bifurcation_monitor_tol", self.bifurcation_monitor_tol),
            ("extreme_stop_ratio", self.extreme_stop_ratio),
            ("switch_radius", self.switch_radius),
            ("cluster_tol", self.cluster_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("continuation.{name} must be positive, got {v}"));
            }
        }
        if !(self.min_step <= self.amplitude_step && self.amplitude_step <= self.max_step) {
            return Err("continuation step bounds must satisfy min_step <= amplitude_step <= max_step".into());
        }
        if self.max_points < 2 {
            return Err("continuation.max_points must be at least 2".into());
        }
        if self.modes == 0 {
            return Err("continuation.modes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BranchOrigin {
    Primary { mode: usize },
    Secondary { parent: String, index: usize },
}

#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub a_target: f64,
    pub node: usize,
    pub sign: f64,
    /// Highest elevation of the reconstructed surface, refined between nodes.
    pub surface_max: f64,
    pub point: SolutionPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TurningPoint,
    SecondaryBifurcation,
    ExtremeTermination,
    HardFailure,
}

#[derive(Debug, Clone)]
pub struct BifurcationData {
    /// Symmetry sector in which the test function changed sign: modes k with
    /// k mod m ∈ {j, m - j} for a branch of period 2π/m.
    pub sector: usize,
    pub period: usize,
    pub point: SolutionPoint,
    /// Unit null vector of the sector block, embedded in all N modes.
    pub null_vector: Vec<f64>,
    pub sigma_min: f64,
}

#[derive(Debug, Clone)]
pub enum EventDiagnostics {
    Turning { mu_fit: f64, sup_norm_fit: f64 },
    Bifurcation(Box<BifurcationData>),
    Extreme { stop_ratio: f64, surface_max: f64, gap: f64, reason: String },
    Failure { message: String },
}

#[derive(Debug, Clone)]
pub struct BranchEvent {
    pub kind: EventKind,
    pub mu: f64,
    pub sup_norm: f64,
    /// Indices of the recorded points bracketing the event.
    pub bracket: (usize, usize),
    pub diagnostics: EventDiagnostics,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub label: String,
    pub origin: BranchOrigin,
    /// The branch is 2π/symmetry periodic; only multiples of it are carried.
    pub symmetry: usize,
    /// Period of the parent, used to detect collapse back onto it.
    pub parent_symmetry: usize,
    pub depth: DepthParams,
    pub points: Vec<BranchPoint>,
    pub events: Vec<BranchEvent>,
}

impl Branch {
    pub fn grid(&self) -> Arc<CosineGrid> {
        self.points[0].point.w.grid().clone()
    }

    pub fn is_terminated(&self) -> bool {
        self.events
            .iter()
            .any(|e| matches!(e.kind, EventKind::ExtremeTermination | EventKind::HardFailure))
    }

    pub fn termination(&self) -> Option<&BranchEvent> {
        self.events
            .iter()
            .find(|e| matches!(e.kind, EventKind::ExtremeTermination | EventKind::HardFailure))
    }

    pub fn bifurcations(&self) -> impl Iterator<Item = &BranchEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::SecondaryBifurcation)
    }

    pub fn turning_points(&self) -> impl Iterator<Item = &BranchEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::TurningPoint)
    }
}

/// μ_n at the trivial solution: (1 - q)/(n(1 + q)) with q = e^{-2nh}.
pub fn trivial_bifurcation_mu(n: usize, depth: DepthParams) -> f64 {
    mu_k(n, depth.h())
}

fn oversample(n: usize) -> usize {
    4 * n
}

fn make_point(
    sys: &ModifiedSystem,
    point: SolutionPoint,
) -> Result<BranchPoint, ContinuationError> {
    let (node, sign) = argmax_node(point.w.nodal());
    let a_target = sign * point.w.nodal()[node];
    let surface_max = geometry::surface_max(&point.w, sys.depth(), oversample(point.w.n()))
        .map_err(|e| ContinuationError::Switch(e.to_string()))?;
    Ok(BranchPoint { a_target, node, sign, surface_max, point })
}

fn stop_ratio(p: &BranchPoint) -> f64 {
    let half = 0.5 * p.point.mu;
    (half - p.surface_max) / half
}

/// Newton from the predictor (μ_n, s cos nt) with the amplitude pinned at |s|;
/// halves s up to four times on failure.
pub fn start_branch(
    n: usize,
    s: f64,
    depth: DepthParams,
    cfg: &ContinuationConfig,
) -> Result<Branch, ContinuationError> {
    if n == 0 || n >= cfg.modes {
        return Err(ContinuationError::Config(format!("mode {n} outside 1..{}", cfg.modes)));
    }
    if !(s != 0.0 && s.abs() <= 0.05) {
        return Err(ContinuationError::Config(format!("seed amplitude {s} outside 0 < |s| <= 0.05")));
    }
    let grid = CosineGrid::shared(cfg.modes)?;
    let sys = ModifiedSystem::new(grid.clone(), depth);
    let mu_n = trivial_bifurcation_mu(n, depth);
    let mut s = s;
    let mut last_err = None;
    for _ in 0..5 {
        let w = SpectralField::cosine(grid.clone(), n, s);
        // Pin the crest so that s and -s give the same wave up to a shift.
        let node = w
            .nodal()
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > w.nodal()[best] * (1.0 + 1e-12) { i } else { best });
        let closure = Closure::Amplitude {
            row: point_row(grid.nodes()[node], 1.0, grid.n()),
            target: s.abs(),
        };
        match solve_bordered(&sys, w.coeffs(), mu_n, &closure, &cfg.newton, n) {
            Ok(p) => {
                let bp = make_point(&sys, p)?;
                return Ok(Branch {
                    label: format!("C{n}"),
                    origin: BranchOrigin::Primary { mode: n },
                    symmetry: n,
                    parent_symmetry: n,
                    depth,
                    points: vec![bp],
                    events: Vec::new(),
                });
            }
            Err(e) => {
                last_err = Some(e);
                s *= 0.5;
            }
        }
    }
    Err(ContinuationError::Seed { mode: n, source: last_err.expect("at least one attempt") })
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn off_lattice_norm(c: &[f64], period: usize) -> f64 {
    if period <= 1 {
        return f64::INFINITY;
    }
    c.iter()
        .enumerate()
        .filter(|(k, _)| k % period != 0)
        .map(|(_, v)| v * v)
        .sum::<f64>()
        .sqrt()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Mode indices of sector j for a 2π/m periodic branch.
pub fn sector_modes(n: usize, period: usize, sector: usize) -> Vec<usize> {
    let m = period.max(1);
    (0..n)
        .filter(|k| {
            let r = k % m;
            r == sector || (sector != 0 && r == m - sector)
        })
        .collect()
}

fn submatrix(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| a[(idx[i], idx[j])])
}

/// Sign of det(a) without forming the (possibly under- or overflowing)
/// product.
fn det_sign(a: DMatrix<f64>) -> i8 {
    let lu = a.lu();
    let mut sign = lu.p().determinant::<f64>();
    let u = lu.u();
    for i in 0..u.nrows() {
        let d = u[(i, i)];
        if d == 0.0 {
            return 0;
        }
        if d < 0.0 {
            sign = -sign;
        }
    }
    if sign > 0.0 {
        1
    } else {
        -1
    }
}

/// Sector-0 matrix bordered by F_μ and a tangent row, so that its determinant
/// keeps its sign through folds.
fn bordered_sector0(jac: &DMatrix<f64>, fmu: &[f64], tangent: &[f64], idx: &[usize]) -> DMatrix<f64> {
    let m = idx.len();
    let n = fmu.len();
    let mut a = DMatrix::zeros(m + 1, m + 1);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = jac[(idx[i], idx[j])];
        }
        a[(i, m)] = fmu[idx[i]];
        a[(m, i)] = tangent[idx[i]];
    }
    a[(m, m)] = tangent[n];
    a
}

/// Test-function signs per sector at a point: sector 0 uses the bordered
/// determinant; sectors j ≥ 1 use det of the Jacobian block.
fn test_signs(
    sys: &ModifiedSystem,
    p: &SolutionPoint,
    tangent: &[f64],
    period: usize,
    cfg: &NewtonConfig,
) -> Option<Vec<i8>> {
    let c = p.coeffs();
    let (jac, fmu) = sys.jacobian(c, p.mu, cfg).ok()?;
    let n = c.len();
    let mut out = Vec::new();
    for j in 0..=(period / 2) {
        let idx = sector_modes(n, period, j);
        let s = if j == 0 {
            det_sign(bordered_sector0(&jac, &fmu, tangent, &idx))
        } else {
            det_sign(submatrix(&jac, &idx))
        };
        out.push(s);
    }
    Some(out)
}

fn tangent_between(a: &SolutionPoint, b: &SolutionPoint) -> Vec<f64> {
    let mut t: Vec<f64> = b.coeffs().iter().zip(a.coeffs()).map(|(x, y)| x - y).collect();
    t.push(b.mu - a.mu);
    let nrm = norm2(&t);
    t.iter_mut().for_each(|v| *v /= nrm);
    t
}

struct Stepper<'a> {
    sys: ModifiedSystem,
    cfg: &'a ContinuationConfig,
    symmetry: usize,
}

impl Stepper<'_> {
    /// Solves on the line through (mu0, a0) normal to `dir`, re-anchoring the
    /// constraint node until it sits at the argmax of the solution.
    fn solve_on_line(
        &self,
        pred_c: &[f64],
        pred_mu: f64,
        mu0: f64,
        a0: f64,
        dir: (f64, f64),
    ) -> Result<SolutionPoint, SolveError> {
        let grid = self.sys.grid();
        let pred = SpectralField::from_coeffs(grid.clone(), pred_c.to_vec())?;
        let (mut node, mut sign) = argmax_node(pred.nodal());
        let mut start_c = pred_c.to_vec();
        let mut start_mu = pred_mu;
        let mut last = None;
        for _ in 0..4 {
            let closure = Closure::NormalLine {
                row: point_row(grid.nodes()[node], sign, grid.n()),
                mu0,
                a0,
                dir_mu: dir.0,
                dir_a: dir.1,
            };
            let p = solve_bordered(&self.sys, &start_c, start_mu, &closure, &self.cfg.newton, self.symmetry)?;
            let (n2, s2) = argmax_node(p.w.nodal());
            let held = sign * p.w.nodal()[node];
            if (n2 == node && s2 == sign) || held >= p.sup_norm - 1e-10 {
                return Ok(p);
            }
            node = n2;
            sign = s2;
            start_c = p.coeffs().to_vec();
            start_mu = p.mu;
            last = Some(p);
        }
        Ok(last.expect("loop ran"))
    }

    /// First step from a lone seed: pure amplitude increase.
    fn amplitude_step(&self, from: &BranchPoint, ds: f64) -> Result<SolutionPoint, SolveError> {
        let a1 = from.a_target + ds;
        let scale = a1 / from.a_target;
        let pred: Vec<f64> = from.point.coeffs().iter().map(|v| v * scale).collect();
        self.solve_on_line(&pred, from.point.mu, from.point.mu, a1, (0.0, 1.0))
    }

    fn secant_step(&self, p0: &BranchPoint, p1: &BranchPoint, ds: f64) -> Result<SolutionPoint, SolveError> {
        let dmu = p1.point.mu - p0.point.mu;
        let da = p1.a_target - p0.a_target;
        let len = dmu.hypot(da);
        let dir = (dmu / len, da / len);
        let t = ds / len;
        let c0 = p0.point.coeffs();
        let c1 = p1.point.coeffs();
        let pred: Vec<f64> = c1.iter().zip(c0).map(|(b, a)| b + t * (b - a)).collect();
        let pred_mu = p1.point.mu + t * dmu;
        self.solve_on_line(&pred, pred_mu, p1.point.mu + ds * dir.0, p1.a_target + ds * dir.1, dir)
    }
}

fn turning_event(points: &[BranchPoint], i: usize) -> Option<BranchEvent> {
    let (a, b, c) = (&points[i - 1], &points[i], &points[i + 1]);
    if !(b.point.mu > a.point.mu && b.point.mu >= c.point.mu) {
        return None;
    }
    let s1 = (b.point.mu - a.point.mu).hypot(b.a_target - a.a_target);
    let s2 = s1 + (c.point.mu - b.point.mu).hypot(c.a_target - b.a_target);
    let (s_peak, mu_fit) = parabola_peak(0.0, a.point.mu, s1, b.point.mu, s2, c.point.mu)
        .unwrap_or((s1, b.point.mu));
    let sup_norm_fit = if s_peak <= s1 {
        a.point.sup_norm + (b.point.sup_norm - a.point.sup_norm) * s_peak / s1
    } else {
        b.point.sup_norm + (c.point.sup_norm - b.point.sup_norm) * (s_peak - s1) / (s2 - s1)
    };
    Some(BranchEvent {
        kind: EventKind::TurningPoint,
        mu: mu_fit,
        sup_norm: sup_norm_fit,
        bracket: (i - 1, i + 1),
        diagnostics: EventDiagnostics::Turning { mu_fit, sup_norm_fit },
    })
}

/// Extends a branch until the extreme-wave stop, a hard failure,
/// `amplitude_max`, or `max_points`. Turning points and secondary
/// bifurcations are recorded as they are bracketed.
pub fn continue_branch(mut branch: Branch, cfg: &ContinuationConfig) -> Result<Branch, ContinuationError> {
    if branch.points.is_empty() || branch.is_terminated() {
        return Ok(branch);
    }
    if branch.points[0].point.sup_norm == 0.0 && branch.points.len() == 1 {
        return Ok(branch);
    }
    let grid = branch.grid();
    let sys = ModifiedSystem::new(grid, branch.depth);
    let stepper = Stepper { sys: sys.clone(), cfg, symmetry: branch.symmetry };
    let mut ds = cfg.amplitude_step;
    let mut prev_signs: Option<Vec<i8>> = None;
    if branch.points.len() >= 2 && cfg.detect_bifurcations {
        let k = branch.points.len();
        let t = tangent_between(&branch.points[k - 2].point, &branch.points[k - 1].point);
        prev_signs = test_signs(&sys, &branch.points[k - 1].point, &t, branch.symmetry, &cfg.newton);
    }
    while branch.points.len() < cfg.max_points {
        let k = branch.points.len();
        let last = &branch.points[k - 1];
        if let Some(amax) = cfg.amplitude_max {
            if last.a_target >= amax {
                break;
            }
        }
        let attempt = if k == 1 {
            stepper.amplitude_step(last, ds)
        } else {
            stepper.secant_step(&branch.points[k - 2], last, ds)
        };
        let candidate = attempt
            .map_err(|e| e.to_string())
            .and_then(|p| make_point(&sys, p).map_err(|e| e.to_string()))
            .and_then(|bp| {
                if off_lattice_norm(bp.point.coeffs(), branch.parent_symmetry)
                    < 0.5 * off_lattice_norm(last.point.coeffs(), branch.parent_symmetry)
                {
                    return Err("step collapsed onto the parent branch".to_string());
                }
                if stop_ratio(&bp) < 0.0 {
                    return Err("surface crossed the Stokes bound mu/2".to_string());
                }
                Ok(bp)
            });
        let bp = match candidate {
            Ok(bp) => bp,
            Err(msg) => {
                ds *= 0.5;
                if ds < cfg.min_step {
                    branch.events.push(final_event(&branch, &msg));
                    break;
                }
                continue;
            }
        };
        let iterations = bp.point.iterations;
        let ratio = stop_ratio(&bp);
        branch.points.push(bp);
        let k = branch.points.len();
        if k >= 3 {
            if let Some(ev) = turning_event(&branch.points, k - 2) {
                branch.events.push(ev);
            }
        }
        if cfg.detect_bifurcations && k >= 2 {
            let t = tangent_between(&branch.points[k - 2].point, &branch.points[k - 1].point);
            let signs = test_signs(&sys, &branch.points[k - 1].point, &t, branch.symmetry, &cfg.newton);
            if let (Some(a), Some(b)) = (&prev_signs, &signs) {
                for (j, (sa, sb)) in a.iter().zip(b).enumerate() {
                    if sa * sb < 0 {
                        if let Some(ev) = locate_bifurcation(&branch, &stepper, k - 2, j, cfg) {
                            branch.events.push(ev);
                        }
                    }
                }
            }
            prev_signs = signs;
        }
        if ratio < cfg.extreme_stop_ratio {
            let last = branch.points.last().expect("just pushed");
            branch.events.push(BranchEvent {
                kind: EventKind::ExtremeTermination,
                mu: last.point.mu,
                sup_norm: last.surface_max,
                bracket: (k - 1, k - 1),
                diagnostics: EventDiagnostics::Extreme {
                    stop_ratio: ratio,
                    surface_max: last.surface_max,
                    gap: last.point.mu - 2.0 * last.surface_max,
                    reason: "stop ratio reached".into(),
                },
            });
            break;
        }
        if iterations <= 3 {
            ds = (ds * 2.0).min(cfg.max_step);
        } else if iterations > 6 {
            ds = (ds * 0.5).max(cfg.min_step);
        }
    }
    branch.events.sort_by_key(|e| e.bracket);
    Ok(branch)
}

/// Event recorded when Newton keeps failing at the minimum step. Close to the
/// Stokes bound this is the extreme wave; elsewhere it is a hard failure.
fn final_event(branch: &Branch, msg: &str) -> BranchEvent {
    let k = branch.points.len();
    let last = &branch.points[k - 1];
    let ratio = stop_ratio(last);
    if ratio < 0.05 {
        BranchEvent {
            kind: EventKind::ExtremeTermination,
            mu: last.point.mu,
            sup_norm: last.surface_max,
            bracket: (k - 1, k - 1),
            diagnostics: EventDiagnostics::Extreme {
                stop_ratio: ratio,
                surface_max: last.surface_max,
                gap: last.point.mu - 2.0 * last.surface_max,
                reason: format!("minimum step reached: {msg}"),
            },
        }
    } else {
        BranchEvent {
            kind: EventKind::HardFailure,
            mu: last.point.mu,
            sup_norm: last.point.sup_norm,
            bracket: (k - 1, k - 1),
            diagnostics: EventDiagnostics::Failure { message: format!("minimum step reached: {msg}") },
        }
    }
}

/// Bisects a sign change of sector `sector` between points ia and ia + 1.
fn locate_bifurcation(
    branch: &Branch,
    stepper: &Stepper<'_>,
    ia: usize,
    sector: usize,
    cfg: &ContinuationConfig,
) -> Option<BranchEvent> {
    let sys = &stepper.sys;
    let (pa, pb) = (&branch.points[ia], &branch.points[ia + 1]);
    let dmu = pb.point.mu - pa.point.mu;
    let da = pb.a_target - pa.a_target;
    let len = dmu.hypot(da);
    let dir = (dmu / len, da / len);
    let tangent = tangent_between(&pa.point, &pb.point);
    let period = branch.symmetry;
    let sign_at = |p: &SolutionPoint| test_signs(sys, p, &tangent, period, &cfg.newton).map(|s| s[sector]);
    let sa = sign_at(&pa.point)?;
    let sb = sign_at(&pb.point)?;
    if sa * sb >= 0 {
        return None;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut best = pa.point.clone();
    while (hi - lo) * len > cfg.bifurcation_monitor_tol {
        let tau = 0.5 * (lo + hi);
        let pred = lerp(pa.point.coeffs(), pb.point.coeffs(), tau);
        let pred_mu = pa.point.mu + tau * dmu;
        let p = stepper
            .solve_on_line(&pred, pred_mu, pa.point.mu + tau * dmu, pa.a_target + tau * da, dir)
            .ok()?;
        let s = sign_at(&p)?;
        if s == sa {
            lo = tau;
        } else {
            hi = tau;
        }
        best = p;
    }
    let (jac, _) = sys.jacobian(best.coeffs(), best.mu, &cfg.newton).ok()?;
    let n = best.coeffs().len();
    let idx = sector_modes(n, period, sector);
    let block = submatrix(&jac, &idx);
    let svd = block.svd(false, true);
    let v_t = svd.v_t.as_ref()?;
    let (imin, sigma_min) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
    let mut null_vector = vec![0.0; n];
    for (r, &k) in idx.iter().enumerate() {
        null_vector[k] = v_t[(imin, r)];
    }
    if sector == 0 {
        // Remove the component along the branch tangent.
        let t = &tangent[..n];
        let tt: f64 = t.iter().map(|x| x * x).sum();
        if tt > 0.0 {
            let proj: f64 = null_vector.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / tt;
            null_vector.iter_mut().zip(t).for_each(|(a, b)| *a -= proj * b);
        }
    }
    normalise_sign(&mut null_vector);
    Some(BranchEvent {
        kind: EventKind::SecondaryBifurcation,
        mu: best.mu,
        sup_norm: best.sup_norm,
        bracket: (ia, ia + 1),
        diagnostics: EventDiagnostics::Bifurcation(Box::new(BifurcationData {
            sector,
            period,
            point: best,
            null_vector,
            sigma_min,
        })),
    })
}

/// Unit length, largest component positive.
fn normalise_sign(v: &mut [f64]) {
    let nrm = norm2(v);
    if nrm == 0.0 {
        return;
    }
    let big = v.iter().cloned().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
    let s = if big < 0.0 { -1.0 / nrm } else { 1.0 / nrm };
    v.iter_mut().for_each(|x| *x *= s);
}

/// Re-scans a finished branch for secondary bifurcations.
pub fn detect_secondary_bifurcations(branch: &Branch, cfg: &ContinuationConfig) -> Vec<BranchEvent> {
    if branch.points.len() < 3 {
        return Vec::new();
    }
    let sys = ModifiedSystem::new(branch.grid(), branch.depth);
    let stepper = Stepper { sys: sys.clone(), cfg, symmetry: branch.symmetry };
    let mut events = Vec::new();
    let mut prev: Option<Vec<i8>> = None;
    for k in 1..branch.points.len() {
        let t = tangent_between(&branch.points[k - 1].point, &branch.points[k].point);
        let signs = test_signs(&sys, &branch.points[k].point, &t, branch.symmetry, &cfg.newton);
        if let (Some(a), Some(b)) = (&prev, &signs) {
            for (j, (sa, sb)) in a.iter().zip(b).enumerate() {
                if sa * sb < 0 {
                    events.extend(locate_bifurcation(branch, &stepper, k - 1, j, cfg));
                }
            }
        }
        prev = signs;
    }
    events
}

fn event_data(event: &BranchEvent) -> Result<&BifurcationData, ContinuationError> {
    match &event.diagnostics {
        EventDiagnostics::Bifurcation(d) => Ok(d),
        _ => Err(ContinuationError::Switch("event is not a secondary bifurcation".into())),
    }
}

fn gram_schmidt(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut u = v.clone();
        for q in &out {
            let p: f64 = u.iter().zip(q).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        let n = norm2(&u);
        if n > 1e-8 {
            u.iter_mut().for_each(|a| *a /= n);
            out.push(u);
        }
    }
    out
}

/// Two points of a new branch leaving (center, mu) along `offset`, on spheres
/// of radius |offset| and 2|offset| in the span of `basis`.
fn seed_pair(
    sys: &ModifiedSystem,
    basis: &[Vec<f64>],
    center: &[f64],
    mu: f64,
    offset: &[f64],
    symmetry: usize,
    cfg: &NewtonConfig,
) -> Result<(SolutionPoint, SolutionPoint), SolveError> {
    let radius_of = |x: &[f64]| -> f64 {
        if basis.len() == 1 {
            basis[0].iter().zip(x).map(|(p, v)| p * v).sum()
        } else {
            norm2(&basis.iter().map(|p| p.iter().zip(x).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>())
        }
    };
    let c1: Vec<f64> = center.iter().zip(offset).map(|(a, b)| a + b).collect();
    let closure = Closure::Sphere { basis: basis.to_vec(), center: center.to_vec(), radius: radius_of(offset) };
    let p1 = solve_bordered(sys, &c1, mu, &closure, cfg, symmetry)?;
    let d1: Vec<f64> = p1.coeffs().iter().zip(center).map(|(a, b)| a - b).collect();
    let c2: Vec<f64> = center.iter().zip(&d1).map(|(a, b)| a + 2.0 * b).collect();
    let closure = Closure::Sphere { basis: basis.to_vec(), center: center.to_vec(), radius: 2.0 * radius_of(offset) };
    let p2 = solve_bordered(sys, &c2, mu + 2.0 * (p1.mu - mu), &closure, cfg, symmetry)?;
    Ok((p1, p2))
}

fn secondary_from_seed(
    parent: &Branch,
    label: String,
    index: usize,
    symmetry: usize,
    sys: &ModifiedSystem,
    seeds: (SolutionPoint, SolutionPoint),
) -> Result<Branch, ContinuationError> {
    Ok(Branch {
        label,
        origin: BranchOrigin::Secondary { parent: parent.label.clone(), index },
        symmetry,
        parent_symmetry: parent.symmetry,
        depth: parent.depth,
        points: vec![make_point(sys, seeds.0)?, make_point(sys, seeds.1)?],
        events: Vec::new(),
    })
}

/// Leaves the parent at a simple bifurcation along ±(null vector) and traces
/// the new branch to its end.
pub fn switch_branch(
    parent: &Branch,
    event: &BranchEvent,
    direction: f64,
    cfg: &ContinuationConfig,
) -> Result<Branch, ContinuationError> {
    let data = event_data(event)?;
    let sys = ModifiedSystem::new(parent.grid(), parent.depth);
    let symmetry = gcd(data.period, data.sector);
    let center = data.point.coeffs();
    let index = parent.bifurcations().position(|e| std::ptr::eq(e, event)).map_or(1, |i| i + 1);
    if direction == 0.0 || !direction.is_finite() || cfg.switch_radius == 0.0 {
        return Err(ContinuationError::Switch("zero switching radius reproduces the parent".into()));
    }
    let mut eps = cfg.switch_radius * direction.signum();
    let mut last_err = String::new();
    for _ in 0..4 {
        let offset: Vec<f64> = data.null_vector.iter().map(|v| v * eps).collect();
        match seed_pair(&sys, std::slice::from_ref(&data.null_vector), center, data.point.mu, &offset, symmetry, &cfg.newton) {
            Ok(seeds) => {
                if data.sector != 0 && off_lattice_norm(seeds.0.coeffs(), data.period) < 0.1 * eps.abs() {
                    last_err = "seed collapsed onto the parent".into();
                } else {
                    let label = format!("{}{}", parent.label, index);
                    let b = secondary_from_seed(parent, label, index, symmetry, &sys, seeds)?;
                    return continue_branch(b, cfg);
                }
            }
            Err(e) => last_err = e.to_string(),
        }
        eps *= 0.5;
    }
    Err(ContinuationError::Switch(format!("no secondary branch found: {last_err}")))
}

/// Groups of bifurcation events closer than `cluster_tol` in ‖w‖∞.
pub fn cluster_events<'a>(parent: &'a Branch, cfg: &ContinuationConfig) -> Vec<Vec<&'a BranchEvent>> {
    let mut groups: Vec<Vec<&BranchEvent>> = Vec::new();
    for e in parent.bifurcations() {
        match groups.last_mut() {
            Some(g) if (e.sup_norm - g[g.len() - 1].sup_norm).abs() < cfg.cluster_tol => g.push(e),
            _ => groups.push(vec![e]),
        }
    }
    groups
}

/// Distinct branches found on a circle around a cluster of bifurcations.
#[derive(Debug, Clone)]
pub struct ClusterDirection {
    pub angle_deg: f64,
    pub seeds: (SolutionPoint, SolutionPoint),
}

/// Scans the circle of radius `switch_radius` in the span of the cluster's
/// null vectors and keeps each distinct converged direction.
pub fn scan_cluster(
    parent: &Branch,
    events: &[&BranchEvent],
    cfg: &ContinuationConfig,
) -> Result<(Vec<ClusterDirection>, usize), ContinuationError> {
    let data: Vec<&BifurcationData> = events.iter().map(|e| event_data(e)).collect::<Result<_, _>>()?;
    let n = parent.grid().n();
    let sys = ModifiedSystem::new(parent.grid(), parent.depth);
    let mut center = vec![0.0; n];
    let mut mu = 0.0;
    for d in &data {
        center.iter_mut().zip(d.point.coeffs()).for_each(|(a, b)| *a += b / data.len() as f64);
        mu += d.point.mu / data.len() as f64;
    }
    let basis = gram_schmidt(&data.iter().map(|d| d.null_vector.clone()).collect::<Vec<_>>());
    let symmetry = data.iter().fold(parent.symmetry, |g, d| gcd(g, d.sector));
    if basis.len() < 2 {
        return Err(ContinuationError::Switch("cluster null vectors are parallel".into()));
    }
    let eps = cfg.switch_radius;
    let count = 24;
    let found: Vec<Option<ClusterDirection>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let offset: Vec<f64> =
                (0..n).map(|k| eps * (th.cos() * basis[0][k] + th.sin() * basis[1][k])).collect();
            let seeds = seed_pair(&sys, &basis, &center, mu, &offset, symmetry, &cfg.newton).ok()?;
            let d: Vec<f64> = seeds.1.coeffs().iter().zip(&center).map(|(a, b)| a - b).collect();
            let x: Vec<f64> = basis.iter().map(|p| p.iter().zip(&d).map(|(a, b)| a * b).sum()).collect();
            Some(ClusterDirection { angle_deg: x[1].atan2(x[0]).to_degrees(), seeds })
        })
        .collect();
    let mut dirs: Vec<ClusterDirection> = Vec::new();
    for d in found.into_iter().flatten() {
        let dup = dirs.iter().any(|e| {
            let diff = (e.angle_deg - d.angle_deg).rem_euclid(360.0);
            diff.min(360.0 - diff) < 2.0
        });
        if !dup {
            dirs.push(d);
        }
    }
    dirs.sort_by(|a, b| a.angle_deg.total_cmp(&b.angle_deg));
    Ok((dirs, symmetry))
}

/// A traced secondary branch together with the crest census at its end.
#[derive(Debug, Clone)]
pub struct SecondaryBranch {
    pub branch: Branch,
    pub angle_deg: Option<f64>,
    pub highest_crests: usize,
    /// Spread of crest heights inside each level at the endpoint.
    pub level_spread: f64,
    /// Set on the ascending half of a branch whose other half carries the
    /// plain label.
    pub reverse_half: bool,
}

/// Pairs directions on the switching circle that sit roughly opposite each
/// other: the two halves of one branch through the bifurcation point.
fn pair_halves(angles: &[f64]) -> Vec<Option<usize>> {
    let n = angles.len();
    let mut partner = vec![None; n];
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let off = ((angles[i] - angles[j]).rem_euclid(360.0) - 180.0).abs();
            if off < 25.0 {
                cand.push((off, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, i, j) in cand {
        if partner[i].is_none() && partner[j].is_none() {
            partner[i] = Some(j);
            partner[j] = Some(i);
        }
    }
    partner
}

/// 0 when the branch reached the extreme stop, 1 when it stalled near it,
/// 2 otherwise.
fn termination_rank(b: &Branch, cfg: &ContinuationConfig) -> u8 {
    match b.events.last().map(|e| &e.diagnostics) {
        Some(EventDiagnostics::Extreme { stop_ratio, .. }) if *stop_ratio <= cfg.extreme_stop_ratio => 0,
        Some(EventDiagnostics::Extreme { .. }) => 1,
        _ => 2,
    }
}

fn endpoint_census(b: &Branch) -> (usize, f64) {
    let last = b.points.last().expect("non-empty branch");
    let Ok(c) = geometry::crest_census(&last.point.w, b.depth, oversample(last.point.w.n())) else {
        return (0, f64::INFINITY);
    };
    let mut h: Vec<f64> = c.crests.iter().map(|c| c.height).collect();
    h.sort_by(|a, b| b.total_cmp(a));
    let k = c.highest.min(h.len());
    let spread = |s: &[f64]| if s.is_empty() { 0.0 } else { s[0] - s[s.len() - 1] };
    (c.highest, spread(&h[..k]) + spread(&h[k..]))
}

/// Switches from every bifurcation event of `parent` and traces the new
/// branches. Simple events yield one branch labelled parent + index. A cluster
/// yields one direction per distinct converged point on the switching circle.
/// Opposite directions are the two halves of one branch; the half that
/// descends in μ is traced and named parent + (number of highest crests at its
/// endpoint). With `ascending_halves` the other half is traced too and gets an
/// `r` suffix. When several branches share a count
/// the one that reached the extreme stop with the most nearly equal crest
/// levels keeps the plain label and the others get a letter suffix.
pub fn navigate(parent: &Branch, cfg: &ContinuationConfig) -> Result<Vec<SecondaryBranch>, ContinuationError> {
    let mut out = Vec::new();
    let mut index = 0;
    for group in cluster_events(parent, cfg) {
        if group.len() == 1 {
            index += 1;
            let mut b = switch_branch(parent, group[0], 1.0, cfg)?;
            b.label = format!("{}{}", parent.label, index);
            if let BranchOrigin::Secondary { index: i, .. } = &mut b.origin {
                *i = index;
            }
            let (highest, spread) = endpoint_census(&b);
            out.push(SecondaryBranch { branch: b, angle_deg: None, highest_crests: highest, level_spread: spread, reverse_half: false });
            continue;
        }
        let (dirs, symmetry) = scan_cluster(parent, &group, cfg)?;
        let angles: Vec<f64> = dirs.iter().map(|d| d.angle_deg).collect();
        let partner = pair_halves(&angles);
        // The half that descends in mu names the branch; its partner is the
        // ascending continuation through the same bifurcation point.
        let descends = |d: &ClusterDirection| d.seeds.1.mu < d.seeds.0.mu;
        let lead: Vec<bool> = (0..dirs.len())
            .map(|i| match partner[i] {
                None => true,
                Some(j) => descends(&dirs[i]) || (!descends(&dirs[j]) && i < j),
            })
            .collect();
        let keep: Vec<usize> = (0..dirs.len()).filter(|&i| lead[i] || cfg.ascending_halves).collect();
        let sys = ModifiedSystem::new(parent.grid(), parent.depth);
        let traced: Vec<Result<SecondaryBranch, ContinuationError>> = keep
            .par_iter()
            .map(|&i| {
                let d = &dirs[i];
                let b = secondary_from_seed(parent, String::new(), 0, symmetry, &sys, d.seeds.clone())?;
                let b = continue_branch(b, cfg)?;
                let (highest, spread) = endpoint_census(&b);
                Ok(SecondaryBranch {
                    branch: b,
                    angle_deg: Some(d.angle_deg),
                    highest_crests: highest,
                    level_spread: spread,
                    reverse_half: !lead[i],
                })
            })
            .collect();
        let mut group_out: Vec<SecondaryBranch> = traced.into_iter().collect::<Result<_, _>>()?;
        // Positions in group_out of each kept direction's partner.
        let slot = |dir: usize| keep.iter().position(|&k| k == dir);
        let partner: Vec<Option<usize>> = keep.iter().map(|&i| partner[i].and_then(slot)).collect();
        let leads: Vec<usize> = (0..group_out.len()).filter(|&i| !group_out[i].reverse_half).collect();
        let mut order = leads.clone();
        order.sort_by(|&a, &b| {
            let (x, y) = (&group_out[a], &group_out[b]);
            x.highest_crests
                .cmp(&y.highest_crests)
                .then(termination_rank(&x.branch, cfg).cmp(&termination_rank(&y.branch, cfg)))
                .then(x.level_spread.total_cmp(&y.level_spread))
                .then(x.angle_deg.unwrap_or(0.0).total_cmp(&y.angle_deg.unwrap_or(0.0)))
        });
        let mut seen: Vec<(usize, usize)> = Vec::new();
        for i in order {
            let k = group_out[i].highest_crests;
            let n = match seen.iter_mut().find(|(c, _)| *c == k) {
                Some(e) => {
                    e.1 += 1;
                    e.1
                }
                None => {
                    seen.push((k, 1));
                    1
                }
            };
            let suffix = if n == 1 { String::new() } else { ((b'a' + n as u8 - 1) as char).to_string() };
            let label = format!("{}{}{}", parent.label, k, suffix);
            group_out[i].branch.label = label.clone();
            group_out[i].branch.origin = BranchOrigin::Secondary { parent: parent.label.clone(), index: k };
            if let Some(j) = partner[i] {
                group_out[j].branch.label = format!("{label}r");
                group_out[j].branch.origin = BranchOrigin::Secondary { parent: parent.label.clone(), index: k };
            }
        }
        group_out.sort_by(|a, b| a.branch.label.cmp(&b.branch.label));
        out.extend(group_out);
    }
    Ok(out)
}

/// Continues to the extreme-wave stop and returns the terminating event.
pub fn trace_to_extreme(branch: Branch, cfg: &ContinuationConfig) -> Result<(Branch, Option<BranchEvent>), ContinuationError> {
    let cfg = ContinuationConfig { amplitude_max: None, ..*cfg };
    let b = continue_branch(branch, &cfg)?;
    let ev = b.termination().cloned();
    Ok((b, ev))
}
