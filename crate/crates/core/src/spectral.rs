//! Cosine collocation grid, transforms, projectors, dealiased products and the
//! Fourier multipliers of the finite-depth Babenko operators.
//!
//! Functions are even and 2π-periodic, so they are held on (0, π) as
//! `w(t) = Σ c_k cos(kt)`, k = 0..N-1, with `c_0` the mean value.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rustdct::{DctPlanner, TransformType2And3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("grid needs at least one node")]
    EmptyGrid,
    #[error("fields live on different grids ({0} vs {1} modes)")]
    GridMismatch(usize, usize),
    #[error("conformal radius r = {0} outside (0, 1)")]
    RadiusOutOfRange(f64),
    #[error("operator undefined at this mean value: P0 w = {mean} <= -h = {neg_h}")]
    MeanBelowBottom { mean: f64, neg_h: f64 },
    #[error("depth must be positive and finite, got {0}")]
    InvalidDepth(f64),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Radii this close to one are rejected: the annulus degenerates and the
/// J-type symbols blow up.
pub const RADIUS_CEILING: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthParams {
    h: f64,
}

impl DepthParams {
    pub fn new(h: f64) -> Result<Self> {
        if h.is_finite() && h > 0.0 {
            Ok(Self { h })
        } else {
            Err(SpectralError::InvalidDepth(h))
        }
    }

    pub fn h(&self) -> f64 {
        self.h
    }
}

/// Collocation nodes x_n = π(2n-1)/(2N), n = 1..N, together with cached DCT
/// plans for N and 2N points. Plans are immutable and `Sync`.
#[derive(Clone)]
pub struct CosineGrid {
    n: usize,
    nodes: Vec<f64>,
    dct: Arc<dyn TransformType2And3<f64>>,
    dct_fine: Arc<dyn TransformType2And3<f64>>,
}

impl fmt::Debug for CosineGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CosineGrid").field("n", &self.n).finish()
    }
}

impl PartialEq for CosineGrid {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
    }
}

impl CosineGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(SpectralError::EmptyGrid);
        }
        let mut planner = DctPlanner::new();
        let dct = planner.plan_dct2(n);
        let dct_fine = planner.plan_dct2(2 * n);
        Ok(Self { n, nodes: nodes(n), dct, dct_fine })
    }

    pub fn shared(n: usize) -> Result<Arc<Self>> {
        Self::new(n).map(Arc::new)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn forward(&self, nodal: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, nodal.len())?;
        Ok(forward_with(&*self.dct, nodal))
    }

    pub fn inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, coeffs.len())?;
        Ok(inverse_with(&*self.dct, coeffs))
    }

    /// Cosine coefficients of `a·b` truncated to N modes. The product is
    /// formed on 2N nodes, which is exact for the retained modes since both
    /// factors have degree below N.
    pub fn product(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, a.len())?;
        check_len(self.n, b.len())?;
        let m = 2 * self.n;
        let mut pa = a.to_vec();
        pa.resize(m, 0.0);
        let mut pb = b.to_vec();
        pb.resize(m, 0.0);
        let va = inverse_with(&*self.dct_fine, &pa);
        let vb = inverse_with(&*self.dct_fine, &pb);
        let prod: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x * y).collect();
        let mut c = forward_with(&*self.dct_fine, &prod);
        c.truncate(self.n);
        Ok(c)
    }
}

fn nodes(n: usize) -> Vec<f64> {
    let nf = n as f64;
    (1..=n)
        .map(|j| std::f64::consts::PI * (2 * j - 1) as f64 / (2.0 * nf))
        .collect()
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(SpectralError::LengthMismatch { expected, found })
    }
}

// rustdct's unnormalised DCT-II is Σ_n x_n cos(πk(n+½)/N), which is exactly
// Σ_n w(x_n) cos(k x_n) on our grid.
fn forward_with(plan: &dyn TransformType2And3<f64>, nodal: &[f64]) -> Vec<f64> {
    let n = nodal.len();
    let mut buf = nodal.to_vec();
    plan.process_dct2(&mut buf);
    let scale = 2.0 / n as f64;
    buf[0] *= 0.5 * scale;
    for v in buf.iter_mut().skip(1) {
        *v *= scale;
    }
    buf
}

// DCT-III halves its first input, hence the doubled mean.
fn inverse_with(plan: &dyn TransformType2And3<f64>, coeffs: &[f64]) -> Vec<f64> {
    let mut buf = coeffs.to_vec();
    buf[0] *= 2.0;
    plan.process_dct3(&mut buf);
    buf
}

pub fn transform_forward(nodal: &[f64], grid: &CosineGrid) -> Result<Vec<f64>> {
    grid.forward(nodal)
}

pub fn transform_inverse(coeffs: &[f64], grid: &CosineGrid) -> Result<Vec<f64>> {
    grid.inverse(coeffs)
}

/// An even periodic function held by its cosine coefficients. Nodal values
/// are computed on first request and cached.
#[derive(Clone)]
pub struct SpectralField {
    grid: Arc<CosineGrid>,
    coeffs: Vec<f64>,
    nodal: OnceLock<Vec<f64>>,
}

impl fmt::Debug for SpectralField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralField")
            .field("n", &self.grid.n)
            .field("coeffs", &self.coeffs)
            .finish()
    }
}

impl SpectralField {
    pub fn from_coeffs(grid: Arc<CosineGrid>, coeffs: Vec<f64>) -> Result<Self> {
        check_len(grid.n, coeffs.len())?;
        Ok(Self { grid, coeffs, nodal: OnceLock::new() })
    }

    pub fn from_nodal(grid: Arc<CosineGrid>, nodal: Vec<f64>) -> Result<Self> {
        let coeffs = grid.forward(&nodal)?;
        let cell = OnceLock::new();
        let _ = cell.set(nodal);
        Ok(Self { grid, coeffs, nodal: cell })
    }

    pub fn zeros(grid: Arc<CosineGrid>) -> Self {
        let n = grid.n;
        Self { grid, coeffs: vec![0.0; n], nodal: OnceLock::new() }
    }

    /// `amplitude · cos(mode·t)`; modes at or above N are dropped.
    pub fn cosine(grid: Arc<CosineGrid>, mode: usize, amplitude: f64) -> Self {
        let mut f = Self::zeros(grid);
        if mode < f.coeffs.len() {
            f.coeffs[mode] = amplitude;
        }
        f
    }

    pub fn grid(&self) -> &Arc<CosineGrid> {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.n
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn nodal(&self) -> &[f64] {
        self.nodal.get_or_init(|| inverse_with(&*self.grid.dct, &self.coeffs))
    }

    pub fn mean(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn sup_norm(&self) -> f64 {
        self.nodal().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Value of the cosine series at an arbitrary t.
    pub fn eval(&self, t: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| c * (k as f64 * t).cos())
            .sum()
    }

    fn same_grid(&self, other: &SpectralField) -> Result<()> {
        if self.grid.n == other.grid.n {
            Ok(())
        } else {
            Err(SpectralError::GridMismatch(self.grid.n, other.grid.n))
        }
    }
}

pub fn project_mean(w: &SpectralField) -> f64 {
    w.mean()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MultiplierKind {
    /// Symbol (1 + r^{2k})/(1 - r^{2k}) of B_r, paired with sin(kt).
    Hilbert,
    /// Eigenvalues λ_k of J_r.
    J,
    /// Eigenvalues μ_k of L_r.
    L,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierSpec {
    pub symbol: Vec<f64>,
    pub kind: MultiplierKind,
    pub r: f64,
}

// The symbols only depend on r through d = -log r, the "conformal depth".
// With s = r^{2k} = exp(-2kd):
//   λ_k = k(1+s)/(1-s) = k coth(kd),  μ_k = (1-s)/(k(1+s)) = tanh(kd)/k.

/// λ_k = k coth(kd) for k ≥ 1, d > 0.
pub fn lambda_k(k: usize, d: f64) -> f64 {
    let kf = k as f64;
    let s = (-2.0 * kf * d).exp();
    kf * (1.0 + s) / (1.0 - s)
}

/// μ_k = tanh(kd)/k for k ≥ 1; finite for every real d.
pub fn mu_k(k: usize, d: f64) -> f64 {
    let kf = k as f64;
    (kf * d).tanh() / kf
}

/// dλ_k/dd = -k² csch²(kd).
pub fn dlambda_k(k: usize, d: f64) -> f64 {
    let kf = k as f64;
    let s = (-2.0 * kf * d).exp();
    -4.0 * kf * kf * s / ((1.0 - s) * (1.0 - s))
}

/// dμ_k/dd = sech²(kd).
pub fn dmu_k(k: usize, d: f64) -> f64 {
    let kf = k as f64;
    let s = (-2.0 * kf * d.abs()).exp();
    4.0 * s / ((1.0 + s) * (1.0 + s))
}

fn check_radius(r: f64) -> Result<f64> {
    if r > 0.0 && r <= RADIUS_CEILING {
        Ok(-r.ln())
    } else {
        Err(SpectralError::RadiusOutOfRange(r))
    }
}

pub fn lambda_seq(r: f64, n: usize) -> Result<MultiplierSpec> {
    let d = check_radius(r)?;
    let symbol = (0..n).map(|k| if k == 0 { 0.0 } else { lambda_k(k, d) }).collect();
    Ok(MultiplierSpec { symbol, kind: MultiplierKind::J, r })
}

pub fn mu_seq(r: f64, n: usize) -> Result<MultiplierSpec> {
    let d = check_radius(r)?;
    let symbol = (0..n).map(|k| if k == 0 { 1.0 } else { mu_k(k, d) }).collect();
    Ok(MultiplierSpec { symbol, kind: MultiplierKind::L, r })
}

pub fn hilbert_seq(r: f64, n: usize) -> Result<MultiplierSpec> {
    let d = check_radius(r)?;
    let symbol = (0..n)
        .map(|k| if k == 0 { 0.0 } else { lambda_k(k, d) / k as f64 })
        .collect();
    Ok(MultiplierSpec { symbol, kind: MultiplierKind::Hilbert, r })
}

/// r_h(w) = exp(-h - P₀w). Total; callers check r < 1 where it matters.
pub fn r_of_w(w: &SpectralField, depth: DepthParams) -> f64 {
    (-depth.h - w.mean()).exp()
}

pub fn apply_multiplier(spec: &MultiplierSpec, u: &SpectralField) -> Result<SpectralField> {
    check_len(spec.symbol.len(), u.n())?;
    let coeffs = spec.symbol.iter().zip(u.coeffs()).map(|(m, c)| m * c).collect();
    SpectralField::from_coeffs(u.grid.clone(), coeffs)
}

/// Conformal depth d = h + P₀w of a field, or an error when the J-type
/// operators are undefined there.
pub fn admissible_depth(mean: f64, depth: DepthParams) -> Result<f64> {
    let d = depth.h + mean;
    if d > 0.0 && (-d).exp() <= RADIUS_CEILING {
        Ok(d)
    } else {
        Err(SpectralError::MeanBelowBottom { mean, neg_h: -depth.h })
    }
}

/// J_h w: the multipliers depend on w only through P₀w.
pub fn apply_jh(w: &SpectralField, depth: DepthParams) -> Result<SpectralField> {
    let d = admissible_depth(w.mean(), depth)?;
    let coeffs = w
        .coeffs()
        .iter()
        .enumerate()
        .map(|(k, c)| if k == 0 { 0.0 } else { lambda_k(k, d) * c })
        .collect();
    SpectralField::from_coeffs(w.grid.clone(), coeffs)
}

/// L_h u, defined for every u.
pub fn apply_lh(u: &SpectralField, depth: DepthParams) -> SpectralField {
    let d = depth.h + u.mean();
    let coeffs = u
        .coeffs()
        .iter()
        .enumerate()
        .map(|(k, c)| if k == 0 { *c } else { mu_k(k, d) * c })
        .collect();
    SpectralField { grid: u.grid.clone(), coeffs, nodal: OnceLock::new() }
}

pub fn dealiased_product(u: &SpectralField, v: &SpectralField) -> Result<SpectralField> {
    u.same_grid(v)?;
    let coeffs = u.grid.product(u.coeffs(), v.coeffs())?;
    SpectralField::from_coeffs(u.grid.clone(), coeffs)
}

/// Matrix of u ↦ P_N(f·u) on cosine coefficients, from
/// cos(lt)cos(jt) = ½cos((l-j)t) + ½cos((l+j)t).
pub fn product_matrix(f: &[f64]) -> nalgebra::DMatrix<f64> {
    let n = f.len();
    let mut m = nalgebra::DMatrix::zeros(n, n);
    for j in 0..n {
        for (l, &fl) in f.iter().enumerate() {
            if fl == 0.0 {
                continue;
            }
            let half = 0.5 * fl;
            m[(l.abs_diff(j), j)] += half;
            if l + j < n {
                m[(l + j, j)] += half;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Arc<CosineGrid> {
        CosineGrid::shared(n).unwrap()
    }

    #[test]
    fn nodes_are_shifted_grid() {
        let g = grid(8);
        assert!((g.nodes()[0] - std::f64::consts::PI / 16.0).abs() < 1e-15);
        assert!(g.nodes().windows(2).all(|p| p[0] < p[1]));
        assert!(*g.nodes().last().unwrap() < std::f64::consts::PI);
    }

    #[test]
    fn constant_and_basis_transforms() {
        let g = grid(8);
        let c = g.forward(&[1.0; 8]).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-15));
        let nodal: Vec<f64> = g.nodes().iter().map(|x| x.cos()).collect();
        let c = g.forward(&nodal).unwrap();
        assert!((c[1] - 1.0).abs() < 1e-14);
        assert!(c.iter().enumerate().filter(|(k, _)| *k != 1).all(|(_, v)| v.abs() < 1e-14));
    }

    #[test]
    fn length_mismatch_is_reported() {
        let g = grid(8);
        assert_eq!(
            g.forward(&[0.0; 7]),
            Err(SpectralError::LengthMismatch { expected: 8, found: 7 })
        );
    }

    #[test]
    fn mean_projection() {
        let g = grid(16);
        let w = SpectralField::from_coeffs(g.clone(), {
            let mut c = vec![0.0; 16];
            c[0] = -0.1;
            c[1] = 0.2;
            c
        })
        .unwrap();
        assert_eq!(project_mean(&w), -0.1);
        assert_eq!(project_mean(&SpectralField::cosine(g, 2, 1.0)), 0.0);
    }

    #[test]
    fn symbols_at_pi_over_five() {
        let r = (-std::f64::consts::PI / 5.0).exp();
        let mu = mu_seq(r, 6).unwrap();
        assert!((mu.symbol[1] - 0.55689).abs() < 1e-5);
        assert!((mu.symbol[2] - 0.42507).abs() < 1e-5);
        assert!((mu.symbol[5] - 0.19925).abs() < 1e-5);
        let lam = lambda_seq(r, 6).unwrap();
        assert!((lam.symbol[1] - 1.0 / mu.symbol[1]).abs() < 1e-14);
    }

    #[test]
    fn direct_symbol_values() {
        let lam = lambda_seq(0.5, 3).unwrap();
        assert!((lam.symbol[2] - 2.0 * 1.0625 / 0.9375).abs() < 1e-14);
        let mu = mu_seq(0.9, 4).unwrap();
        let q = 0.9f64.powi(6);
        assert!((mu.symbol[3] - (1.0 - q) / (3.0 * (1.0 + q))).abs() < 1e-15);
        assert!((mu.symbol[3] - 0.10199).abs() < 1e-5);
    }

    #[test]
    fn radius_domain() {
        assert!(lambda_seq(1.0, 4).is_err());
        assert!(lambda_seq(1.0 - 1e-13, 4).is_err());
        assert!(mu_seq(0.0, 4).is_err());
        assert!(lambda_seq(-0.2, 4).is_err());
        let lam = lambda_seq(1e-9, 64).unwrap();
        for (k, v) in lam.symbol.iter().enumerate().skip(1) {
            assert!((v - k as f64).abs() < 1e-14 * k as f64);
        }
    }

    #[test]
    fn r_of_w_values() {
        let g = grid(16);
        let depth = DepthParams::new(std::f64::consts::PI / 5.0).unwrap();
        assert!((r_of_w(&SpectralField::zeros(g.clone()), depth) - 0.533488).abs() < 1e-6);
        let mut c = vec![0.0; 16];
        c[0] = -0.05;
        c[1] = 0.1;
        let w = SpectralField::from_coeffs(g, c).unwrap();
        let r = r_of_w(&w, DepthParams::new(1.0).unwrap());
        assert!((r - (-0.95f64).exp()).abs() < 1e-15);
        assert!((r - 0.386741).abs() < 1e-6);
    }

    #[test]
    fn jh_and_lh_on_basis() {
        let g = grid(16);
        let depth = DepthParams::new(std::f64::consts::PI / 5.0).unwrap();
        let w = SpectralField::cosine(g.clone(), 1, 0.3);
        let jw = apply_jh(&w, depth).unwrap();
        assert!((jw.coeffs()[1] - 0.3 / 0.556_893).abs() < 1e-5);
        let lw = apply_lh(&SpectralField::cosine(g.clone(), 2, 1.0), depth);
        assert!((lw.coeffs()[2] - 0.42507).abs() < 1e-5);
        let one = apply_lh(&SpectralField::cosine(g.clone(), 0, 1.0), depth);
        assert_eq!(one.coeffs()[0], 1.0);
        let constant = apply_jh(&SpectralField::cosine(g, 0, 0.2), depth).unwrap();
        assert!(constant.coeffs().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn jh_rejects_mean_below_bottom() {
        let g = grid(8);
        let depth = DepthParams::new(0.5).unwrap();
        let w = SpectralField::cosine(g, 0, -0.5);
        assert!(matches!(apply_jh(&w, depth), Err(SpectralError::MeanBelowBottom { .. })));
    }

    #[test]
    fn lh_is_total() {
        let g = grid(8);
        let depth = DepthParams::new(0.5).unwrap();
        let mut c = vec![0.0; 8];
        c[0] = -0.9;
        c[3] = 1.0;
        let u = SpectralField::from_coeffs(g, c).unwrap();
        let lu = apply_lh(&u, depth);
        assert!(lu.coeffs().iter().all(|v| v.is_finite()));
        assert!(lu.coeffs()[3] < 0.0);
    }

    #[test]
    fn square_of_cosine() {
        let g = grid(8);
        let u = SpectralField::cosine(g.clone(), 1, 1.0);
        let p = dealiased_product(&u, &u).unwrap();
        assert!((p.coeffs()[0] - 0.5).abs() < 1e-15);
        assert!((p.coeffs()[2] - 0.5).abs() < 1e-15);
        let z = dealiased_product(&u, &SpectralField::zeros(g)).unwrap();
        assert!(z.coeffs().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn product_matrix_matches_transform_product() {
        let g = grid(16);
        let a: Vec<f64> = (0..16).map(|k| ((k * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let b: Vec<f64> = (0..16).map(|k| ((k * 5 + 1) % 13) as f64 / 13.0 - 0.5).collect();
        let fast = g.product(&a, &b).unwrap();
        let m = product_matrix(&a) * nalgebra::DVector::from_column_slice(&b);
        for k in 0..16 {
            assert!((fast[k] - m[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn derivative_formulas() {
        let d = 0.7;
        for k in [1usize, 3, 9] {
            let e = 1e-6;
            let fd = (lambda_k(k, d + e) - lambda_k(k, d - e)) / (2.0 * e);
            assert!((fd - dlambda_k(k, d)).abs() < 1e-6 * (1.0 + fd.abs()));
            let fd = (mu_k(k, d + e) - mu_k(k, d - e)) / (2.0 * e);
            assert!((fd - dmu_k(k, d)).abs() < 1e-8);
            let fd = (mu_k(k, -d + e) - mu_k(k, -d - e)) / (2.0 * e);
            assert!((fd - dmu_k(k, -d)).abs() < 1e-8);
        }
    }
}
