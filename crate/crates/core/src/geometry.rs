//! Physical wave data from a converged (μ, w, h): modified coefficients, the
//! parametric surface, conformal map samples, crest census, crest angle, and
//! the r-curve of a branch.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continuation::Branch;
use crate::spectral::{lambda_k, DepthParams, SpectralError, SpectralField, RADIUS_CEILING};

use std::f64::consts::PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("profile has no crest")]
    NoCrest,
    #[error("need at least {0} samples")]
    TooFewSamples(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crest {
    pub t: f64,
    pub x: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrestCensus {
    /// Crests over one 2π period ordered by t.
    pub crests: Vec<Crest>,
    /// Size of the group of highest crests.
    pub highest: usize,
    pub max_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometryWarning {
    NonMonotoneX { sample: usize },
    AboveStokesBound { max_y: f64, half_mu: f64 },
}

#[derive(Debug, Clone)]
pub struct WaveProfile {
    pub r: f64,
    pub h: f64,
    pub mu: f64,
    pub b: Vec<f64>,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub census: CrestCensus,
    /// Trapezoidal ∫ y·x'(t) dt over one period.
    pub mean_residual: f64,
    pub warnings: Vec<GeometryWarning>,
}

/// b_0 = c_0, b_k = c_k/(1 - r^{2k}).
pub fn modified_coefficients(w: &SpectralField, r: f64) -> Result<Vec<f64>, GeometryError> {
    if !(r > 0.0 && r <= RADIUS_CEILING) {
        return Err(SpectralError::RadiusOutOfRange(r).into());
    }
    let two_log_r = 2.0 * r.ln();
    Ok(w.coeffs()
        .iter()
        .enumerate()
        .map(|(k, c)| if k == 0 { *c } else { c / (1.0 - (k as f64 * two_log_r).exp()) })
        .collect())
}

/// Σ a_k cos(kt) and Σ s_k sin(kt) together, by rotation recurrence.
fn cos_sin_sums(a: &[f64], s: &[f64], t: f64) -> (f64, f64) {
    let (sn, cs) = t.sin_cos();
    let (mut ck, mut sk) = (1.0, 0.0);
    let (mut yc, mut ys) = (a[0], 0.0);
    for k in 1..a.len() {
        let c2 = ck * cs - sk * sn;
        sk = sk * cs + ck * sn;
        ck = c2;
        yc += a[k] * ck;
        ys += s[k] * sk;
    }
    (yc, ys)
}

struct Series {
    c: Vec<f64>,
    /// Coefficients of x(t) + t in sin(kt): -λ_k c_k / k.
    xs: Vec<f64>,
    /// Coefficients of x'(t) + 1 in cos(kt): -λ_k c_k.
    xc: Vec<f64>,
    dy: Vec<f64>,
    ddy: Vec<f64>,
}

impl Series {
    fn new(c: &[f64], d: f64) -> Self {
        let n = c.len();
        let mut xs = vec![0.0; n];
        let mut xc = vec![0.0; n];
        let mut dy = vec![0.0; n];
        let mut ddy = vec![0.0; n];
        for k in 1..n {
            let kf = k as f64;
            let l = lambda_k(k, d);
            xs[k] = -l * c[k] / kf;
            xc[k] = -l * c[k];
            dy[k] = -kf * c[k];
            ddy[k] = -kf * kf * c[k];
        }
        Self { c: c.to_vec(), xs, xc, dy, ddy }
    }

    fn xy(&self, t: f64) -> (f64, f64) {
        let (y, xo) = cos_sin_sums(&self.c, &self.xs, t);
        (-t + xo, y)
    }

    fn dxdt(&self, t: f64) -> f64 {
        let zero = vec![0.0; self.c.len()];
        -1.0 + cos_sin_sums(&self.xc, &zero, t).0
    }

    fn crest_newton(&self, mut t: f64, dt: f64) -> f64 {
        let t0 = t;
        let zero = vec![0.0; self.c.len()];
        for _ in 0..4 {
            let d1 = cos_sin_sums(&zero, &self.dy, t).1;
            let d2 = cos_sin_sums(&self.ddy, &zero, t).0;
            if d2 >= 0.0 {
                return t0;
            }
            t -= d1 / d2;
        }
        if (t - t0).abs() <= dt {
            t
        } else {
            t0
        }
    }
}

fn wrap_pi(t: f64) -> f64 {
    let mut u = (t + PI).rem_euclid(2.0 * PI) - PI;
    if u >= PI {
        u -= 2.0 * PI;
    }
    u
}

/// Local maxima of y over a uniform periodic sampling. Maxima below the mid
/// level (max y + min y)/2 are trough ripples, not crests.
fn find_crests(series: &Series, t: &[f64], y: &[f64]) -> Vec<Crest> {
    let m = y.len();
    if m < 3 {
        return Vec::new();
    }
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if hi - lo <= 1e-14 * hi.abs().max(1.0) {
        return Vec::new();
    }
    let mid = 0.5 * (lo + hi);
    let dt = 2.0 * PI / m as f64;
    let mut out = Vec::new();
    for j in 0..m {
        let yp = y[(j + m - 1) % m];
        let yn = y[(j + 1) % m];
        if y[j] > yp && y[j] >= yn && y[j] > mid {
            let curv = yp - 2.0 * y[j] + yn;
            let shift = if curv < 0.0 { 0.5 * (yp - yn) / curv } else { 0.0 };
            let guess = t[j] + shift * dt;
            let tc = wrap_pi(series.crest_newton(guess, dt));
            let (x, height) = series.xy(tc);
            out.push(Crest { t: tc, x, height });
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    out
}

/// Number of strictly highest crests. Heights within `tol` of each other are
/// one level; otherwise the levels are split at the largest gap.
pub fn highest_group(heights: &[f64], tol: f64) -> usize {
    if heights.is_empty() {
        return 0;
    }
    let mut h = heights.to_vec();
    h.sort_by(|a, b| b.total_cmp(a));
    if h[0] - h[h.len() - 1] <= tol {
        return h.len();
    }
    let mut best = (0.0, h.len());
    for i in 1..h.len() {
        let gap = h[i - 1] - h[i];
        if gap > best.0 {
            best = (gap, i);
        }
    }
    best.1
}

fn census(crests: Vec<Crest>, sup: f64) -> CrestCensus {
    let heights: Vec<f64> = crests.iter().map(|c| c.height).collect();
    let highest = highest_group(&heights, 1e-6 * sup);
    let max_height = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    CrestCensus { crests, highest, max_height }
}

pub fn surface_curve(
    w: &SpectralField,
    mu: f64,
    depth: DepthParams,
    m: usize,
) -> Result<WaveProfile, GeometryError> {
    if m < 4 {
        return Err(GeometryError::TooFewSamples(4));
    }
    let d = crate::spectral::admissible_depth(w.mean(), depth)?;
    let r = (-d).exp();
    let b = modified_coefficients(w, r)?;
    let series = Series::new(w.coeffs(), d);
    let t: Vec<f64> = (0..m).map(|j| -PI + 2.0 * PI * j as f64 / m as f64).collect();
    let mut x = Vec::with_capacity(m);
    let mut y = Vec::with_capacity(m);
    let mut quad = 0.0;
    for &tj in &t {
        let (xj, yj) = series.xy(tj);
        x.push(xj);
        y.push(yj);
        quad += yj * series.dxdt(tj);
    }
    let mean_residual = quad * 2.0 * PI / m as f64;
    let mut warnings = Vec::new();
    if let Some(j) = (1..m).find(|&j| x[j] >= x[j - 1]) {
        warnings.push(GeometryWarning::NonMonotoneX { sample: j });
    }
    let crests = find_crests(&series, &t, &y);
    let census = census(crests, w.sup_norm());
    let max_y = census.max_height.max(y.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    if max_y >= 0.5 * mu {
        warnings.push(GeometryWarning::AboveStokesBound { max_y, half_mu: 0.5 * mu });
    }
    Ok(WaveProfile { r, h: depth.h(), mu, b, t, x, y, census, mean_residual, warnings })
}

/// Crest census of w alone; x is not needed to locate maxima in t.
pub fn crest_census(w: &SpectralField, depth: DepthParams, m: usize) -> Result<CrestCensus, GeometryError> {
    let d = crate::spectral::admissible_depth(w.mean(), depth)?;
    let series = Series::new(w.coeffs(), d);
    let t: Vec<f64> = (0..m).map(|j| -PI + 2.0 * PI * j as f64 / m as f64).collect();
    let y: Vec<f64> = t.iter().map(|&tj| w.eval(tj)).collect();
    Ok(census(find_crests(&series, &t, &y), w.sup_norm()))
}

/// Largest surface elevation, refined between samples.
pub fn surface_max(w: &SpectralField, depth: DepthParams, m: usize) -> Result<f64, GeometryError> {
    let c = crest_census(w, depth, m)?;
    Ok(if c.crests.is_empty() { w.eval(0.0) } else { c.max_height })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalSample {
    pub rho: f64,
    pub t: f64,
    pub z: Complex64,
}

/// z(u) = i[log u + b_0 + Σ b_k(u^k - r^{2k}u^{-k})] on `radial` circles
/// r ≤ |u| ≤ 1 and `angular` angles in [-π, π).
pub fn conformal_map_sample(b: &[f64], r: f64, radial: usize, angular: usize) -> Vec<ConformalSample> {
    let mut out = Vec::with_capacity(radial * angular);
    let i = Complex64::i();
    for a in 0..radial {
        let rho = if radial == 1 { 1.0 } else { r + (1.0 - r) * a as f64 / (radial - 1) as f64 };
        for j in 0..angular {
            let t = -PI + 2.0 * PI * j as f64 / angular as f64;
            let u = Complex64::from_polar(rho, t);
            let v = Complex64::from_polar(r * r / rho, -t);
            let (mut uk, mut vk) = (Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0));
            let mut s = Complex64::new(rho.ln() + b[0], t);
            for bk in &b[1..] {
                uk *= u;
                vk *= v;
                s += *bk * (uk - vk);
            }
            out.push(ConformalSample { rho, t, z: i * s });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrestAngle {
    pub degrees: f64,
    pub left_slope: f64,
    pub right_slope: f64,
    /// False when either side of the fit window holds fewer than three samples.
    pub confident: bool,
}

fn slope_fit(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Interior angle at the highest crest from straight-line fits to each flank
/// over |x - x_crest| in [0.005, 0.03] of the crest-to-crest spacing. The
/// inner cut skips the rounded tip that any finite truncation produces.
pub fn crest_angle_estimate(profile: &WaveProfile) -> Result<CrestAngle, GeometryError> {
    let crest = profile
        .census
        .crests
        .iter()
        .max_by(|a, b| a.height.total_cmp(&b.height))
        .ok_or(GeometryError::NoCrest)?;
    let period = 2.0 * PI / profile.census.crests.len() as f64;
    let (inner, outer) = (0.005 * period, 0.03 * period);
    let m = profile.x.len();
    let mut left = Vec::new();
    let mut right = Vec::new();
    for j in 0..m {
        // Shift by whole periods so the crest neighbourhood is contiguous.
        let mut dx = profile.x[j] - crest.x;
        dx -= 2.0 * PI * (dx / (2.0 * PI)).round();
        let ad = dx.abs();
        if ad >= inner && ad <= outer {
            let p = (dx, profile.y[j]);
            if dx < 0.0 {
                left.push(p);
            } else {
                right.push(p);
            }
        }
    }
    let confident = left.len() >= 3 && right.len() >= 3;
    let (ls, rs) = match (slope_fit(&left), slope_fit(&right)) {
        (Some(l), Some(r)) => (l, r),
        _ => return Err(GeometryError::TooFewSamples(2)),
    };
    let degrees = 180.0 - (ls.abs().atan() + rs.abs().atan()).to_degrees();
    Ok(CrestAngle { degrees, left_slope: ls, right_slope: rs, confident })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RMax {
    pub sup_norm: f64,
    pub r: f64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RCurve {
    pub points: Vec<(f64, f64)>,
    /// Largest interior maximum, refined by a parabola through its neighbours.
    pub maximum: Option<RMax>,
    pub interior_maxima: usize,
}

pub fn r_curve(branch: &Branch) -> RCurve {
    let points: Vec<(f64, f64)> = branch.points.iter().map(|p| (p.point.sup_norm, p.point.r)).collect();
    let mut maxima = Vec::new();
    for i in 1..points.len().saturating_sub(1) {
        if points[i].1 > points[i - 1].1 && points[i].1 >= points[i + 1].1 {
            maxima.push(i);
        }
    }
    let maximum = maxima
        .iter()
        .max_by(|a, b| points[**a].1.total_cmp(&points[**b].1))
        .map(|&i| {
            let (x0, y0) = points[i - 1];
            let (x1, y1) = points[i];
            let (x2, y2) = points[i + 1];
            parabola_peak(x0, y0, x1, y1, x2, y2)
                .map(|(x, y)| RMax { sup_norm: x, r: y, index: i })
                .unwrap_or(RMax { sup_norm: x1, r: y1, index: i })
        });
    RCurve { points, maximum, interior_maxima: maxima.len() }
}

/// Vertex of the parabola through three points, if it opens downward and lies
/// within their span.
pub fn parabola_peak(x0: f64, y0: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> Option<(f64, f64)> {
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let a = (d12 - d01) / (x2 - x0);
    if !(a < 0.0) || !a.is_finite() {
        return None;
    }
    let b = d01 - a * (x0 + x1);
    let xv = -b / (2.0 * a);
    let (lo, hi) = (x0.min(x2), x0.max(x2));
    if xv < lo || xv > hi {
        return None;
    }
    let yv = y1 + (xv - x1) * (d01 + a * (xv - x0));
    Some((xv, yv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::CosineGrid;

    fn depth() -> DepthParams {
        DepthParams::new(PI / 5.0).unwrap()
    }

    #[test]
    fn flat_surface() {
        let g = CosineGrid::shared(16).unwrap();
        let w = SpectralField::zeros(g);
        let p = surface_curve(&w, 0.5, depth(), 64).unwrap();
        assert!(p.y.iter().all(|v| *v == 0.0));
        for (t, x) in p.t.iter().zip(&p.x) {
            assert!((x + t).abs() < 1e-15);
        }
        assert!(p.census.crests.is_empty());
        assert_eq!(crest_angle_estimate(&p).unwrap_err(), GeometryError::NoCrest);
    }

    #[test]
    fn constant_field_coefficients() {
        let g = CosineGrid::shared(8).unwrap();
        let w = SpectralField::cosine(g, 0, 0.3);
        let b = modified_coefficients(&w, 0.5).unwrap();
        assert_eq!(b[0], 0.3);
        assert!(b[1..].iter().all(|v| *v == 0.0));
        assert!(modified_coefficients(&SpectralField::zeros(CosineGrid::shared(8).unwrap()), 1.0).is_err());
    }

    #[test]
    fn groups() {
        assert_eq!(highest_group(&[0.1, 0.1, 0.1], 1e-9), 3);
        assert_eq!(highest_group(&[0.12, 0.085, 0.085, 0.0855, 0.0855], 1e-9), 1);
        assert_eq!(highest_group(&[0.117, 0.1172, 0.117, 0.089, 0.089], 1e-9), 3);
        assert_eq!(highest_group(&[], 1e-9), 0);
    }

    #[test]
    fn parabola_vertex() {
        let (x, y) = parabola_peak(-1.0, 0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        assert!(x.abs() < 1e-15 && (y - 1.0).abs() < 1e-15);
        assert!(parabola_peak(-1.0, 0.0, 0.0, -1.0, 1.0, 0.0).is_none());
    }

    #[test]
    fn sinusoid_crest_is_smooth() {
        let g = CosineGrid::shared(32).unwrap();
        let w = SpectralField::cosine(g, 1, 0.01);
        let p = surface_curve(&w, 0.56, depth(), 128).unwrap();
        assert_eq!(p.census.crests.len(), 1);
        assert!(p.census.crests[0].t.abs() < 1e-12);
        let a = crest_angle_estimate(&p).unwrap();
        assert!(a.degrees > 179.0);
    }
}
