//! Strongly convex quadratic client objectives
//! `f(w) = 1/2 (w - c)^T A (w - c)` with sphere-noise stochastic gradients.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{LayeredParams, Shape};
use crate::rng::Stream;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    matrix: DMatrix<f64>,
    center: DVector<f64>,
    noise_sigma: f64,
    radius: f64,
    shape: Shape,
    lambda_min: f64,
    lambda_max: f64,
}

impl QuadraticObjective {
    /// `matrix` is dense row-major `d x d`; `shape` maps the `d` coordinates
    /// onto layers and filters.
    pub fn new(
        matrix_row_major: &[f64],
        center: &[f64],
        noise_sigma: f64,
        radius: f64,
        shape: Shape,
    ) -> Result<Self> {
        let d = center.len();
        if d == 0 || shape.num_scalars() != d {
            return Err(Error::Dimension {
                expected: shape.num_scalars(),
                got: d,
            });
        }
        if matrix_row_major.len() != d * d {
            return Err(Error::Dimension {
                expected: d * d,
                got: matrix_row_major.len(),
            });
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "noise sigma {noise_sigma} must be >= 0"
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParams(format!("radius {radius} must be > 0")));
        }
        if let Some(bad) = matrix_row_major
            .iter()
            .chain(center)
            .find(|v| !v.is_finite())
        {
            return Err(Error::InvalidParams(format!("non-finite entry {bad}")));
        }
        let matrix = DMatrix::from_row_slice(d, d, matrix_row_major);
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (matrix[(i, j)], matrix[(j, i)]);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::NotSpd(format!(
                        "asymmetric entries ({i},{j}) = {a} vs ({j},{i}) = {b}"
                    )));
                }
            }
        }
        let eig = SymmetricEigen::new(matrix.clone()).eigenvalues;
        let lambda_min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let lambda_max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lambda_min <= 0.0 {
            return Err(Error::NotSpd(format!(
                "smallest eigenvalue {lambda_min} <= 0"
            )));
        }
        Ok(QuadraticObjective {
            matrix,
            center: DVector::from_column_slice(center),
            noise_sigma,
            radius,
            shape,
            lambda_min,
            lambda_max,
        })
    }

    /// Random SPD objective: `A = Q diag(lambda) Q^T` with a Haar-ish rotation
    /// from the QR of a Gaussian matrix, eigenvalues spread evenly over
    /// `[min_eig, max_eig]` (both included when `d > 1`), and a Gaussian
    /// center scaled by `center_scale`.
    pub fn random(
        shape: Shape,
        min_eig: f64,
        max_eig: f64,
        center_scale: f64,
        noise_sigma: f64,
        radius: f64,
        stream: Stream,
    ) -> Result<Self> {
        if !(min_eig > 0.0 && max_eig >= min_eig) {
            return Err(Error::InvalidParams(format!(
                "eigenvalue range [{min_eig}, {max_eig}] must be positive and ordered"
            )));
        }
        let d = shape.num_scalars();
        let mut rng = stream.rng();
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let lambdas = DVector::from_fn(d, |i, _| {
            if d == 1 {
                min_eig
            } else {
                min_eig + (max_eig - min_eig) * i as f64 / (d - 1) as f64
            }
        });
        let a = &q * DMatrix::from_diagonal(&lambdas) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let center: Vec<f64> = (0..d)
            .map(|_| center_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let row_major: Vec<f64> = (0..d * d).map(|k| a[(k / d, k % d)]).collect();
        QuadraticObjective::new(&row_major, &center, noise_sigma, radius, shape)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn center_vec(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn center(&self) -> LayeredParams {
        LayeredParams::from_flat(&self.shape, self.center.as_slice()).expect("shape validated")
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Smoothness constant L.
    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Strong-convexity constant mu.
    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    fn offset(&self, w: &LayeredParams) -> Result<DVector<f64>> {
        if w.shape() != self.shape {
            return Err(shape_error(&self.shape, &w.shape()));
        }
        Ok(DVector::from_vec(w.to_flat()) - &self.center)
    }

    pub fn loss(&self, w: &LayeredParams) -> Result<f64> {
        let e = self.offset(w)?;
        Ok(0.5 * e.dot(&(&self.matrix * &e)))
    }

    pub fn loss_flat(&self, w: &DVector<f64>) -> f64 {
        let e = w - &self.center;
        0.5 * e.dot(&(&self.matrix * &e))
    }

    pub fn grad(&self, w: &LayeredParams) -> Result<LayeredParams> {
        let e = self.offset(w)?;
        let g = &self.matrix * e;
        LayeredParams::from_flat(&self.shape, g.as_slice())
    }

    /// `A (w - c) + xi` where `xi` is uniform on the sphere of radius sigma.
    pub fn stochastic_grad<R: Rng + ?Sized>(
        &self,
        w: &LayeredParams,
        rng: &mut R,
    ) -> Result<LayeredParams> {
        let e = self.offset(w)?;
        let distance = e.norm();
        if distance > self.radius * (1.0 + 1e-12) {
            return Err(Error::OutsideBall {
                distance,
                radius: self.radius,
            });
        }
        let mut g = &self.matrix * e;
        if self.noise_sigma > 0.0 {
            g += sphere_sample(self.dim(), self.noise_sigma, rng);
        }
        LayeredParams::from_flat(&self.shape, g.as_slice())
    }
}

/// Uniform sample from the sphere of radius `r` in `d` dimensions.
pub fn sphere_sample<R: Rng + ?Sized>(d: usize, r: f64, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-300 {
            return v * (r / n);
        }
    }
}

fn shape_error(expected: &Shape, got: &Shape) -> Error {
    let layer = expected
        .layers
        .iter()
        .zip(&got.layers)
        .position(|(a, b)| a != b)
        .unwrap_or(expected.layers.len().min(got.layers.len()));
    Error::ShapeMismatch {
        layer,
        filter: None,
        detail: format!(
            "expected {} scalars, got {}",
            expected.num_scalars(),
            got.num_scalars()
        ),
    }
}
