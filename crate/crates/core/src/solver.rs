//! Discrete modified Babenko system, its Jacobian, and Newton's method with a
//! bordering equation that closes the system.
//!
//! Unknowns are the N cosine coefficients of w plus μ. The residual is also
//! taken in coefficient space; since the DCT is a fixed invertible map this is
//! the collocation system up to a linear change of variables, and Newton's
//! iterates are identical.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{
    admissible_depth, dlambda_k, dmu_k, lambda_k, mu_k, product_matrix, CosineGrid, DepthParams,
    SpectralError, SpectralField,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("Newton iteration diverged after {iterations} steps (residual {residual:e})")]
    Diverged { iterations: usize, residual: f64 },
    #[error("no convergence in {iterations} iterations (residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("singular Jacobian at iteration {iterations}")]
    SingularJacobian { iterations: usize },
    #[error("iterate left the operator domain at iteration {iterations} after step halving")]
    Inadmissible { iterations: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub residual_tol: f64,
    pub max_iter: usize,
    pub jacobian_mode: JacobianMode,
    pub fd_step: f64,
    /// Step halvings allowed when an iterate leaves the domain P₀w > -h.
    pub max_halvings: u32,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            residual_tol: 1e-10,
            max_iter: 50,
            jacobian_mode: JacobianMode::Analytic,
            fd_step: 1e-7,
            max_halvings: 8,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.residual_tol > 0.0) {
            return Err("newton.residual_tol must be positive".into());
        }
        if self.max_iter == 0 {
            return Err("newton.max_iter must be at least 1".into());
        }
        if !(self.fd_step > 0.0) {
            return Err("newton.fd_step must be positive".into());
        }
        Ok(())
    }
}

/// A residual map F(c, μ) on cosine coefficients with its derivatives.
pub trait WaveSystem: Sync {
    fn grid(&self) -> &Arc<CosineGrid>;

    fn residual(&self, c: &[f64], mu: f64) -> Result<Vec<f64>, SolveError>;

    /// (∂F/∂c, ∂F/∂μ).
    fn analytic_jacobian(&self, c: &[f64], mu: f64) -> Result<(DMatrix<f64>, Vec<f64>), SolveError>;

    fn admissible(&self, c: &[f64]) -> bool;

    /// Mean depth h and conformal radius r attached to a solution.
    fn depth_and_radius(&self, c: &[f64]) -> (f64, f64);

    fn jacobian(
        &self,
        c: &[f64],
        mu: f64,
        cfg: &NewtonConfig,
    ) -> Result<(DMatrix<f64>, Vec<f64>), SolveError> {
        match cfg.jacobian_mode {
            JacobianMode::Analytic => self.analytic_jacobian(c, mu),
            JacobianMode::FiniteDifference => fd_jacobian(self, c, mu, cfg.fd_step),
        }
    }
}

/// Central differences, column by column.
pub fn fd_jacobian<S: WaveSystem + ?Sized>(
    sys: &S,
    c: &[f64],
    mu: f64,
    step: f64,
) -> Result<(DMatrix<f64>, Vec<f64>), SolveError> {
    let n = c.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut x = c.to_vec();
    for j in 0..n {
        let orig = x[j];
        x[j] = orig + step;
        let fp = sys.residual(&x, mu)?;
        x[j] = orig - step;
        let fm = sys.residual(&x, mu)?;
        x[j] = orig;
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    let fp = sys.residual(c, mu + step)?;
    let fm = sys.residual(c, mu - step)?;
    let fmu = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * step)).collect();
    Ok((jac, fmu))
}

/// The modified equation at fixed mean depth h. The multipliers depend on w
/// through d = h + P₀w, and those of the middle term through h + P₀(-w·J_h w).
#[derive(Debug, Clone)]
pub struct ModifiedSystem {
    grid: Arc<CosineGrid>,
    depth: DepthParams,
}

impl ModifiedSystem {
    pub fn new(grid: Arc<CosineGrid>, depth: DepthParams) -> Self {
        Self { grid, depth }
    }

    pub fn depth(&self) -> DepthParams {
        self.depth
    }
}

/// The fixed-r equation L_r w + L_r(w·J_r w) + ½(1-P₀)w² - μ(1-P₀)w = 0.
#[derive(Debug, Clone)]
pub struct FixedRSystem {
    grid: Arc<CosineGrid>,
    r: f64,
    d: f64,
}

impl FixedRSystem {
    pub fn new(grid: Arc<CosineGrid>, r: f64) -> Result<Self, SolveError> {
        let d = crate::spectral::mu_seq(r, 1).map(|_| -r.ln())?;
        Ok(Self { grid, r, d })
    }
}

fn scaled(c: &[f64], d: f64) -> Vec<f64> {
    c.iter()
        .enumerate()
        .map(|(k, v)| if k == 0 { 0.0 } else { lambda_k(k, d) * v })
        .collect()
}

// Shared assembly for both equations. `d2` is the depth used by the middle L
// term; `chain` turns on the derivatives through P₀w and P₀(w·Jw).
fn assemble(
    c: &[f64],
    mu: f64,
    d: f64,
    d2: f64,
    p: &[f64],
    g: &[f64],
    chain: bool,
) -> (DMatrix<f64>, Vec<f64>) {
    let n = c.len();
    let mc = product_matrix(c);
    let mg = product_matrix(g);
    // dP = M[g] + M[c]·dg/dc with dg/dc = diag(λ) (+ λ'⊙c in column 0).
    let mut dp = mg;
    for j in 1..n {
        let lj = lambda_k(j, d);
        for i in 0..n {
            dp[(i, j)] += mc[(i, j)] * lj;
        }
    }
    if chain {
        let dl: Vec<f64> =
            (0..n).map(|k| if k == 0 { 0.0 } else { dlambda_k(k, d) * c[k] }).collect();
        for i in 0..n {
            let mut s = 0.0;
            for (l, v) in dl.iter().enumerate().skip(1) {
                s += mc[(i, l)] * v;
            }
            dp[(i, 0)] += s;
        }
    }
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        jac[(0, j)] = dp[(0, j)];
    }
    jac[(0, 0)] += 1.0;
    for k in 1..n {
        let m2 = mu_k(k, d2);
        let dm2 = if chain { -dmu_k(k, d2) * p[k] } else { 0.0 };
        for j in 0..n {
            jac[(k, j)] = m2 * dp[(k, j)] + dm2 * dp[(0, j)] + mc[(k, j)];
        }
        jac[(k, k)] += mu_k(k, d) - mu;
        if chain {
            jac[(k, 0)] += dmu_k(k, d) * c[k];
        }
    }
    let fmu = (0..n).map(|k| if k == 0 { 0.0 } else { -c[k] }).collect();
    (jac, fmu)
}

fn residual_from(c: &[f64], mu: f64, d: f64, d2: f64, p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(c.len());
    f.push(c[0] + p[0]);
    for k in 1..c.len() {
        f.push((mu_k(k, d) - mu) * c[k] + mu_k(k, d2) * p[k] + 0.5 * q[k]);
    }
    f
}

impl WaveSystem for ModifiedSystem {
    fn grid(&self) -> &Arc<CosineGrid> {
        &self.grid
    }

    fn residual(&self, c: &[f64], mu: f64) -> Result<Vec<f64>, SolveError> {
        let d = admissible_depth(c[0], self.depth)?;
        let g = scaled(c, d);
        let p = self.grid.product(c, &g)?;
        let q = self.grid.product(c, c)?;
        Ok(residual_from(c, mu, d, self.depth.h() - p[0], &p, &q))
    }

    fn analytic_jacobian(&self, c: &[f64], mu: f64) -> Result<(DMatrix<f64>, Vec<f64>), SolveError> {
        let d = admissible_depth(c[0], self.depth)?;
        let g = scaled(c, d);
        let p = self.grid.product(c, &g)?;
        Ok(assemble(c, mu, d, self.depth.h() - p[0], &p, &g, true))
    }

    fn admissible(&self, c: &[f64]) -> bool {
        admissible_depth(c[0], self.depth).is_ok()
    }

    fn depth_and_radius(&self, c: &[f64]) -> (f64, f64) {
        (self.depth.h(), (-self.depth.h() - c[0]).exp())
    }
}

impl WaveSystem for FixedRSystem {
    fn grid(&self) -> &Arc<CosineGrid> {
        &self.grid
    }

    fn residual(&self, c: &[f64], mu: f64) -> Result<Vec<f64>, SolveError> {
        let g = scaled(c, self.d);
        let p = self.grid.product(c, &g)?;
        let q = self.grid.product(c, c)?;
        Ok(residual_from(c, mu, self.d, self.d, &p, &q))
    }

    fn analytic_jacobian(&self, c: &[f64], mu: f64) -> Result<(DMatrix<f64>, Vec<f64>), SolveError> {
        let g = scaled(c, self.d);
        let p = self.grid.product(c, &g)?;
        Ok(assemble(c, mu, self.d, self.d, &p, &g, false))
    }

    fn admissible(&self, _c: &[f64]) -> bool {
        true
    }

    fn depth_and_radius(&self, c: &[f64]) -> (f64, f64) {
        (-self.r.ln() - c[0], self.r)
    }
}

pub fn residual_modified(
    w: &SpectralField,
    mu: f64,
    depth: DepthParams,
) -> Result<SpectralField, SolveError> {
    let sys = ModifiedSystem::new(w.grid().clone(), depth);
    let f = sys.residual(w.coeffs(), mu)?;
    Ok(SpectralField::from_coeffs(w.grid().clone(), f)?)
}

pub fn residual_fixed_r(w: &SpectralField, mu: f64, r: f64) -> Result<SpectralField, SolveError> {
    let sys = FixedRSystem::new(w.grid().clone(), r)?;
    let f = sys.residual(w.coeffs(), mu)?;
    Ok(SpectralField::from_coeffs(w.grid().clone(), f)?)
}

/// Row closing the system: sign·w(x_node) = target, with the node frozen for
/// the duration of one solve. `node_index` is zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub node_index: usize,
    pub sign: f64,
    pub target_amplitude: f64,
}

impl ConstraintSpec {
    /// Anchors the constraint at the argmax of |w| over the nodes.
    pub fn at_max(w: &SpectralField, target_amplitude: f64) -> Self {
        let (node_index, sign) = argmax_node(w.nodal());
        Self { node_index, sign, target_amplitude }
    }
}

/// Index and sign of the largest |value|; near-ties (relative 1e-12) go to the
/// smallest index.
pub fn argmax_node(nodal: &[f64]) -> (usize, f64) {
    let max = nodal.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * max.max(1e-300);
    let i = nodal.iter().position(|v| v.abs() >= max - tol).unwrap_or(0);
    let sign = if nodal.get(i).copied().unwrap_or(0.0) < 0.0 { -1.0 } else { 1.0 };
    (i, sign)
}

/// Row r with r·c = sign·w(t).
pub fn point_row(t: f64, sign: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| sign * (k as f64 * t).cos()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The extra scalar equation G(c, μ) = 0 bordering F(c, μ) = 0.
#[derive(Debug, Clone, PartialEq)]
pub enum Closure {
    /// row·c = target.
    Amplitude { row: Vec<f64>, target: f64 },
    /// The point (μ, row·c) lies on the line through (mu0, a0) normal to
    /// (dir_mu, dir_a).
    NormalLine { row: Vec<f64>, mu0: f64, a0: f64, dir_mu: f64, dir_a: f64 },
    /// With one basis vector φ: φ·(c - center) = radius. With several:
    /// Σ_j (φ_j·(c - center))² = radius².
    Sphere { basis: Vec<Vec<f64>>, center: Vec<f64>, radius: f64 },
    /// tangent·((c, μ) - base) = ds.
    Arclength { tangent: Vec<f64>, base: Vec<f64>, ds: f64 },
}

impl Closure {
    pub fn from_constraint(spec: &ConstraintSpec, grid: &CosineGrid) -> Self {
        let t = grid.nodes()[spec.node_index];
        Closure::Amplitude {
            row: point_row(t, spec.sign, grid.n()),
            target: spec.target_amplitude,
        }
    }

    pub fn value(&self, c: &[f64], mu: f64) -> f64 {
        match self {
            Closure::Amplitude { row, target } => dot(row, c) - target,
            Closure::NormalLine { row, mu0, a0, dir_mu, dir_a } => {
                dir_mu * (mu - mu0) + dir_a * (dot(row, c) - a0)
            }
            Closure::Sphere { basis, center, radius } => {
                let proj: Vec<f64> = basis.iter().map(|phi| projected(phi, c, center)).collect();
                if proj.len() == 1 {
                    proj[0] - radius
                } else {
                    proj.iter().map(|x| x * x).sum::<f64>() - radius * radius
                }
            }
            Closure::Arclength { tangent, base, ds } => {
                let n = c.len();
                dot(&tangent[..n], &vec_sub(c, &base[..n])) + tangent[n] * (mu - base[n]) - ds
            }
        }
    }

    pub fn gradient(&self, c: &[f64], _mu: f64) -> (Vec<f64>, f64) {
        match self {
            Closure::Amplitude { row, .. } => (row.clone(), 0.0),
            Closure::NormalLine { row, dir_mu, dir_a, .. } => {
                (row.iter().map(|v| v * dir_a).collect(), *dir_mu)
            }
            Closure::Sphere { basis, center, .. } => {
                if basis.len() == 1 {
                    return (basis[0].clone(), 0.0);
                }
                let mut g = vec![0.0; c.len()];
                for phi in basis {
                    let x = 2.0 * projected(phi, c, center);
                    for (gi, p) in g.iter_mut().zip(phi) {
                        *gi += x * p;
                    }
                }
                (g, 0.0)
            }
            Closure::Arclength { tangent, .. } => {
                let n = c.len();
                (tangent[..n].to_vec(), tangent[n])
            }
        }
    }
}

fn projected(phi: &[f64], c: &[f64], center: &[f64]) -> f64 {
    phi.iter().zip(c).zip(center).map(|((p, x), y)| p * (x - y)).sum()
}

fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Zeroes every mode that is not a multiple of `period`.
pub fn project_symmetry(v: &mut [f64], period: usize) {
    if period > 1 {
        for (k, x) in v.iter_mut().enumerate() {
            if k % period != 0 {
                *x = 0.0;
            }
        }
    }
}

/// Stacked (N+1)×(N+1) Jacobian of [F; G].
pub fn bordered_jacobian<S: WaveSystem + ?Sized>(
    sys: &S,
    c: &[f64],
    mu: f64,
    closure: &Closure,
    cfg: &NewtonConfig,
) -> Result<DMatrix<f64>, SolveError> {
    let n = c.len();
    let (jac, fmu) = sys.jacobian(c, mu, cfg)?;
    let (gc, gmu) = closure.gradient(c, mu);
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(&jac);
    for i in 0..n {
        a[(i, n)] = fmu[i];
        a[(n, i)] = gc[i];
    }
    a[(n, n)] = gmu;
    Ok(a)
}

pub fn assemble_jacobian(
    w: &SpectralField,
    mu: f64,
    depth: DepthParams,
    constraint: &ConstraintSpec,
    cfg: &NewtonConfig,
) -> Result<DMatrix<f64>, SolveError> {
    let sys = ModifiedSystem::new(w.grid().clone(), depth);
    let closure = Closure::from_constraint(constraint, w.grid());
    bordered_jacobian(&sys, w.coeffs(), mu, &closure, cfg)
}

#[derive(Debug, Clone)]
pub struct SolutionPoint {
    pub mu: f64,
    pub w: SpectralField,
    pub h: f64,
    pub r: f64,
    pub sup_norm: f64,
    pub mean: f64,
    pub residual_norm: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

impl SolutionPoint {
    pub fn from_coeffs<S: WaveSystem + ?Sized>(
        sys: &S,
        c: Vec<f64>,
        mu: f64,
        residual_norm: f64,
        residual_history: Vec<f64>,
    ) -> Result<Self, SolveError> {
        let (h, r) = sys.depth_and_radius(&c);
        let w = SpectralField::from_coeffs(sys.grid().clone(), c)?;
        Ok(Self {
            mu,
            h,
            r,
            sup_norm: w.sup_norm(),
            mean: w.mean(),
            residual_norm,
            iterations: residual_history.len().saturating_sub(1),
            residual_history,
            w,
        })
    }

    pub fn coeffs(&self) -> &[f64] {
        self.w.coeffs()
    }
}

/// Newton's method on [F; G] = 0. Iterates are projected onto the modes that
/// are multiples of `symmetry` (1 means no projection).
pub fn solve_bordered<S: WaveSystem + ?Sized>(
    sys: &S,
    c0: &[f64],
    mu0: f64,
    closure: &Closure,
    cfg: &NewtonConfig,
    symmetry: usize,
) -> Result<SolutionPoint, SolveError> {
    let n = c0.len();
    let mut c = c0.to_vec();
    project_symmetry(&mut c, symmetry);
    let mut mu = mu0;
    if !sys.admissible(&c) {
        return Err(SolveError::Inadmissible { iterations: 0 });
    }
    let mut history = Vec::new();
    let eval = |c: &[f64], mu: f64| -> Result<(Vec<f64>, f64), SolveError> {
        let mut f = sys.residual(c, mu)?;
        project_symmetry(&mut f, symmetry);
        let g = closure.value(c, mu);
        let norm = f.iter().fold(g.abs(), |m, v| m.max(v.abs()));
        f.push(g);
        Ok((f, norm))
    };
    let (mut f, mut norm) = eval(&c, mu)?;
    for iter in 0..=cfg.max_iter {
        history.push(norm);
        if !norm.is_finite() || norm > 1e8 {
            return Err(SolveError::Diverged { iterations: iter, residual: norm });
        }
        if norm <= cfg.residual_tol {
            return SolutionPoint::from_coeffs(sys, c, mu, norm, history);
        }
        if iter == cfg.max_iter {
            break;
        }
        let a = bordered_jacobian(sys, &c, mu, closure, cfg)?;
        let rhs = DVector::from_iterator(n + 1, f.iter().map(|v| -v));
        let mut step = a
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or(SolveError::SingularJacobian { iterations: iter })?;
        project_symmetry(&mut step.as_mut_slice()[..n], symmetry);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<f64> = c.iter().zip(step.iter()).map(|(x, d)| x + t * d).collect();
            let trial_mu = mu + t * step[n];
            if sys.admissible(&trial) {
                if let Ok((tf, tn)) = eval(&trial, trial_mu) {
                    if tn.is_finite() {
                        accepted = Some((trial, trial_mu, tf, tn));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((nc, nmu, nf, nn)) => {
                c = nc;
                mu = nmu;
                f = nf;
                norm = nn;
            }
            None => return Err(SolveError::Inadmissible { iterations: iter + 1 }),
        }
    }
    Err(SolveError::MaxIterations { iterations: cfg.max_iter, residual: norm })
}

pub fn newton_solve(
    initial_w: &SpectralField,
    initial_mu: f64,
    depth: DepthParams,
    constraint: &ConstraintSpec,
    cfg: &NewtonConfig,
) -> Result<SolutionPoint, SolveError> {
    let sys = ModifiedSystem::new(initial_w.grid().clone(), depth);
    let closure = Closure::from_constraint(constraint, initial_w.grid());
    solve_bordered(&sys, initial_w.coeffs(), initial_mu, &closure, cfg, 1)
}

/// Newton on the fixed-r equation; the returned point carries h = -log r - P₀w.
pub fn newton_solve_fixed_r(
    initial_w: &SpectralField,
    initial_mu: f64,
    r: f64,
    constraint: &ConstraintSpec,
    cfg: &NewtonConfig,
) -> Result<SolutionPoint, SolveError> {
    let sys = FixedRSystem::new(initial_w.grid().clone(), r)?;
    let closure = Closure::from_constraint(constraint, initial_w.grid());
    solve_bordered(&sys, initial_w.coeffs(), initial_mu, &closure, cfg, 1)
}

/// P₀(w + w·J_h w), which vanishes on solutions.
pub fn mean_identity(w: &SpectralField, depth: DepthParams) -> Result<f64, SolveError> {
    let d = admissible_depth(w.mean(), depth)?;
    let g = scaled(w.coeffs(), d);
    let p = w.grid().product(w.coeffs(), &g)?;
    Ok(w.mean() + p[0])
}
