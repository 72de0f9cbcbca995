//! Thin-plate spline over (moneyness, maturity).
//!
//! Coordinates are standardized to unit range over the knot cloud before
//! the kernel `phi(r) = r^2 log r` is applied. The fitted function minimizes
//! `sum (f(x_i) - y_i)^2 + lambda * J(f)` where `J` is the bending energy;
//! with this kernel normalization that amounts to adding `8 pi lambda` to the
//! kernel diagonal.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Dyn, LU};

use super::{IvPoint, SurfaceError};

/// Margin, in unit-scaled coordinates, by which evaluation may leave the
/// knots' convex hull.
pub const EXTRAPOLATION_MARGIN: f64 = 0.05;

/// Tolerance for treating two standardized knot layouts as the same system.
const LAYOUT_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaling {
    pub m_offset: f64,
    pub m_span: f64,
    pub tau_offset: f64,
    pub tau_span: f64,
}

impl Scaling {
    fn from_points(points: &[IvPoint]) -> Option<Self> {
        let (mut m_lo, mut m_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut t_lo, mut t_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            m_lo = m_lo.min(p.moneyness);
            m_hi = m_hi.max(p.moneyness);
            t_lo = t_lo.min(p.maturity);
            t_hi = t_hi.max(p.maturity);
        }
        let (m_span, tau_span) = (m_hi - m_lo, t_hi - t_lo);
        (m_span > 0.0 && tau_span > 0.0 && m_span.is_finite() && tau_span.is_finite()).then_some(
            Scaling {
                m_offset: m_lo,
                m_span,
                tau_offset: t_lo,
                tau_span,
            },
        )
    }

    pub fn apply(&self, moneyness: f64, maturity: f64) -> [f64; 2] {
        [
            (moneyness - self.m_offset) / self.m_span,
            (maturity - self.tau_offset) / self.tau_span,
        ]
    }
}

#[inline]
fn kernel(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let r2 = dx * dx + dy * dy;
    if r2 > 0.0 {
        0.5 * r2 * r2.ln()
    } else {
        0.0
    }
}

/// A fitted surface. Immutable once built.
#[derive(Clone, Debug)]
pub struct TpsModel {
    centers: Vec<[f64; 2]>,
    weights: Vec<f64>,
    affine: [f64; 3],
    lambda: f64,
    scaling: Scaling,
    hull: Vec<[f64; 2]>,
}

impl TpsModel {
    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn affine(&self) -> [f64; 3] {
        self.affine
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    /// `(sum w, sum w m, sum w tau)` in scaled coordinates; all zero for a
    /// well-posed fit.
    pub fn side_conditions(&self) -> [f64; 3] {
        self.centers
            .iter()
            .zip(&self.weights)
            .fold([0.0; 3], |acc, (c, w)| {
                [acc[0] + w, acc[1] + w * c[0], acc[2] + w * c[1]]
            })
    }

    /// Whether `(m, tau)` lies within the hull guard.
    pub fn covers(&self, moneyness: f64, maturity: f64) -> bool {
        let p = self.scaling.apply(moneyness, maturity);
        if !(p[0].is_finite() && p[1].is_finite()) {
            return false;
        }
        let n = self.hull.len();
        (0..n).all(|i| {
            let a = self.hull[i];
            let b = self.hull[(i + 1) % n];
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len = (ex * ex + ey * ey).sqrt();
            let cross = ex * (p[1] - a[1]) - ey * (p[0] - a[0]);
            cross / len >= -EXTRAPOLATION_MARGIN
        })
    }

    /// Evaluates without the extrapolation guard.
    pub fn value(&self, moneyness: f64, maturity: f64) -> f64 {
        let p = self.scaling.apply(moneyness, maturity);
        let radial: f64 = self
            .centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * kernel(p, *c))
            .sum();
        self.affine[0] + self.affine[1] * p[0] + self.affine[2] * p[1] + radial
    }

    pub fn eval(&self, moneyness: f64, maturity: f64) -> Result<f64, SurfaceError> {
        if !self.covers(moneyness, maturity) {
            return Err(SurfaceError::ExtrapolationOutOfRange {
                moneyness,
                maturity,
            });
        }
        Ok(self.value(moneyness, maturity))
    }
}

/// Sorts by (maturity, moneyness) and averages the iv of coincident knots.
fn merge_duplicates(points: &[IvPoint]) -> Vec<IvPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.maturity
            .total_cmp(&b.maturity)
            .then(a.moneyness.total_cmp(&b.moneyness))
    });
    let mut out: Vec<IvPoint> = Vec::with_capacity(sorted.len());
    let mut run = 0usize;
    for p in sorted {
        match out.last_mut() {
            Some(last) if last.moneyness == p.moneyness && last.maturity == p.maturity => {
                run += 1;
                last.iv += (p.iv - last.iv) / run as f64;
            }
            _ => {
                run = 1;
                out.push(p);
            }
        }
    }
    out
}

/// Counter-clockwise convex hull (monotone chain). Expects >= 3 points not
/// all collinear.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() + 1);
    // Lower chain on the forward pass, upper chain on the way back.
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn check_spread(centers: &[[f64; 2]]) -> Result<(), SurfaceError> {
    if centers.len() < 3 {
        return Err(SurfaceError::SingularSystem("fewer than 3 distinct knots".into()));
    }
    let n = centers.len() as f64;
    let (mx, my) = centers
        .iter()
        .fold((0.0, 0.0), |(x, y), c| (x + c[0] / n, y + c[1] / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for c in centers {
        let (dx, dy) = (c[0] - mx, c[1] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let det = sxx * syy - sxy * sxy;
    let trace = sxx + syy;
    if det <= 1e-12 * trace * trace {
        return Err(SurfaceError::SingularSystem("knots are collinear".into()));
    }
    Ok(())
}

fn system_matrix(centers: &[[f64; 2]], lambda: f64) -> DMatrix<f64> {
    let n = centers.len();
    let mut a = DMatrix::<f64>::zeros(n + 3, n + 3);
    let ridge = 8.0 * PI * lambda;
    for i in 0..n {
        a[(i, i)] = ridge;
        for j in (i + 1)..n {
            let k = kernel(centers[i], centers[j]);
            a[(i, j)] = k;
            a[(j, i)] = k;
        }
        let row = [1.0, centers[i][0], centers[i][1]];
        for (c, v) in row.into_iter().enumerate() {
            a[(i, n + c)] = v;
            a[(n + c, i)] = v;
        }
    }
    a
}

fn solve(lu: &LU<f64, Dyn, Dyn>, values: &[f64]) -> Result<(Vec<f64>, [f64; 3]), SurfaceError> {
    let n = values.len();
    let mut rhs = DVector::<f64>::zeros(n + 3);
    rhs.rows_mut(0, n).copy_from_slice(values);
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| SurfaceError::SingularSystem("spline system is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(SurfaceError::SingularSystem("non-finite spline coefficients".into()));
    }
    Ok((
        sol.rows(0, n).iter().copied().collect(),
        [sol[n], sol[n + 1], sol[n + 2]],
    ))
}

struct Prepared {
    centers: Vec<[f64; 2]>,
    values: Vec<f64>,
    scaling: Scaling,
}

fn prepare(points: &[IvPoint], lambda: f64) -> Result<Prepared, SurfaceError> {
    if !(lambda >= 0.0) {
        return Err(SurfaceError::SingularSystem(format!("invalid smoothing {lambda}")));
    }
    let merged = merge_duplicates(points);
    let scaling = Scaling::from_points(&merged)
        .ok_or_else(|| SurfaceError::SingularSystem("degenerate coordinate range".into()))?;
    let centers: Vec<[f64; 2]> = merged
        .iter()
        .map(|p| scaling.apply(p.moneyness, p.maturity))
        .collect();
    check_spread(&centers)?;
    Ok(Prepared {
        centers,
        values: merged.iter().map(|p| p.iv).collect(),
        scaling,
    })
}

/// Fits a thin-plate spline with smoothing `lambda` (0 interpolates).
/// Coincident knots are merged by averaging their iv first.
pub fn fit_surface(points: &[IvPoint], lambda: f64) -> Result<TpsModel, SurfaceError> {
    let prep = prepare(points, lambda)?;
    let lu = system_matrix(&prep.centers, lambda).lu();
    let (weights, affine) = solve(&lu, &prep.values)?;
    let hull = convex_hull(&prep.centers);
    Ok(TpsModel {
        centers: prep.centers,
        weights,
        affine,
        lambda,
        scaling: prep.scaling,
        hull,
    })
}

struct CachedSystem {
    centers: Vec<[f64; 2]>,
    lambda: f64,
    lu: LU<f64, Dyn, Dyn>,
    hull: Vec<[f64; 2]>,
}

/// Repeated fitting that reuses the factorized system while the
/// standardized knot layout stays the same. A fixed strike ladder observed
/// under a moving spot keeps the same layout minute after minute, since
/// standardizing `K / S` removes the spot.
#[derive(Default)]
pub struct TpsFitter {
    cached: Option<CachedSystem>,
    reuses: usize,
}

impl TpsFitter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of fits served from the cached factorization.
    pub fn reuses(&self) -> usize {
        self.reuses
    }

    pub fn fit(&mut self, points: &[IvPoint], lambda: f64) -> Result<TpsModel, SurfaceError> {
        let prep = prepare(points, lambda)?;
        let hit = self.cached.as_ref().is_some_and(|c| {
            c.lambda == lambda
                && c.centers.len() == prep.centers.len()
                && c.centers.iter().zip(&prep.centers).all(|(a, b)| {
                    (a[0] - b[0]).abs() <= LAYOUT_TOLERANCE && (a[1] - b[1]).abs() <= LAYOUT_TOLERANCE
                })
        });
        if !hit {
            let lu = system_matrix(&prep.centers, lambda).lu();
            let hull = convex_hull(&prep.centers);
            self.cached = Some(CachedSystem {
                centers: prep.centers,
                lambda,
                lu,
                hull,
            });
        } else {
            self.reuses += 1;
        }
        let cached = self.cached.as_ref().expect("populated above");
        let (weights, affine) = solve(&cached.lu, &prep.values)?;
        Ok(TpsModel {
            centers: cached.centers.clone(),
            weights,
            affine,
            lambda,
            scaling: prep.scaling,
            hull: cached.hull.clone(),
        })
    }
}
