//! Least-squares polynomial lane centerlines.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_LANE_DEGREE: usize = 5;

/// Relative singular-value cutoff for the column-scaled Vandermonde matrix.
const RANK_TOLERANCE: f64 = 1e-10;

/// Coefficients in increasing power order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialFit {
    pub polynomial: Polynomial,
    /// Sum of squared residuals.
    pub residual: f64,
    /// Lower than requested when the design matrix was rank deficient.
    pub degree: usize,
}

fn vandermonde(s: &[f64], degree: usize) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), degree + 1, |r, c| s[r].powi(c as i32))
}

fn numerical_rank(a: &DMatrix<f64>) -> usize {
    // scale columns so the cutoff does not depend on the magnitude of s
    let mut scaled = a.clone();
    for mut col in scaled.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    let sv = scaled.singular_values();
    let max = sv.max();
    sv.iter().filter(|v| **v > RANK_TOLERANCE * max).count()
}

/// Least-squares fit of `y(s)`; the degree drops (with a warning) until the fit is full rank.
pub fn fit_polynomial(s: &[f64], y: &[f64], degree: usize) -> Result<PolynomialFit> {
    if s.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} abscissae for {} values",
            s.len(),
            y.len()
        )));
    }
    if degree > MAX_LANE_DEGREE {
        return Err(Error::Parameter(format!(
            "degree {degree} exceeds {MAX_LANE_DEGREE}"
        )));
    }
    if s.len() < degree + 1 {
        return Err(Error::Parameter(format!(
            "degree {degree} needs at least {} points, got {}",
            degree + 1,
            s.len()
        )));
    }
    if s.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("polynomial fit data"));
    }
    let mut d = degree;
    loop {
        let a = vandermonde(s, d);
        if numerical_rank(&a) == d + 1 {
            let b = DVector::from_column_slice(y);
            let coeffs = a
                .clone()
                .svd(true, true)
                .solve(&b, 0.0)
                .map_err(|e| Error::Parameter(format!("least-squares solve failed: {e}")))?;
            let residual = (&a * &coeffs - &b).norm_squared();
            return Ok(PolynomialFit {
                polynomial: Polynomial {
                    coeffs: coeffs.as_slice().to_vec(),
                },
                residual,
                degree: d,
            });
        }
        if d == 0 {
            return Err(Error::Parameter("polynomial fit has no usable data".into()));
        }
        warn!(
            "polynomial fit of degree {d} is rank deficient; reducing to {}",
            d - 1
        );
        d -= 1;
    }
}

/// Centerline `(x(u), y(u))` over normalized arc length `u ∈ [0, 1]`, sampled at `T + 1` uniform `u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneCenterline {
    pub x: Polynomial,
    pub y: Polynomial,
    /// Chord length of the input points (meters).
    pub length: f64,
    pub samples: Vec<[f64; 2]>,
}

impl LaneCenterline {
    pub fn point(&self, u: f64) -> [f64; 2] {
        [self.x.eval(u), self.y.eval(u)]
    }
}

pub fn fit_lane_centerline(
    points: &[[f64; 2]],
    degree: usize,
    horizon: usize,
) -> Result<LaneCenterline> {
    if points.len() < degree + 1 {
        return Err(Error::Parameter(format!(
            "lane fit of degree {degree} needs {} points, got {}",
            degree + 1,
            points.len()
        )));
    }
    let mut s = vec![0.0; points.len()];
    for k in 1..points.len() {
        let (a, b) = (points[k - 1], points[k]);
        s[k] = s[k - 1] + ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    }
    let length = s[points.len() - 1];
    if !(length > 0.0) {
        return Err(Error::Parameter("lane points have zero extent".into()));
    }
    let u: Vec<f64> = s.iter().map(|v| v / length).collect();
    let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let fx = fit_polynomial(&u, &xs, degree)?;
    let fy = fit_polynomial(&u, &ys, degree)?;
    let mut lane = LaneCenterline {
        x: fx.polynomial,
        y: fy.polynomial,
        length,
        samples: Vec::with_capacity(horizon + 1),
    };
    for t in 0..=horizon {
        let p = lane.point(t as f64 / horizon.max(1) as f64);
        lane.samples.push(p);
    }
    Ok(lane)
}
