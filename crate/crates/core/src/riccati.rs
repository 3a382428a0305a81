//! Discrete-time algebraic Riccati equation and the tracking gain used by
//! the rollout sampler.

use nalgebra::{DMatrix, Matrix6, SMatrix, Vector3, Vector6};
use thiserror::Error;

use crate::real::{real, to_f64, Real};
use crate::vehicle::{linearize, Input, ModelError, RoadPoint, State, VehicleParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("riccati iteration hit max_iter with residual {residual:.3e}")]
    MaxIter { residual: f64 },
    #[error("R + B'PB became singular")]
    SingularGain,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Fixed-point residual `|P - (Q + A'PA - A'PB (R + B'PB)^-1 B'PA)|_inf`.
pub fn dare_residual<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    p: &DMatrix<T>,
) -> Option<T> {
    let next = dare_step(a, b, q, r, p)?;
    Some((&next - p).amax())
}

fn dare_step<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    p: &DMatrix<T>,
) -> Option<DMatrix<T>> {
    let at_p = a.transpose() * p;
    let bt_p_b = r + b.transpose() * p * b;
    let inv = bt_p_b.try_inverse()?;
    let at_p_b = &at_p * b;
    Some(q + &at_p * a - &at_p_b * inv * at_p_b.transpose())
}

/// Solve the DARE by fixed-point iteration from `P = Q`.
pub fn dare_solve<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    tol: T,
    max_iter: usize,
) -> Result<DMatrix<T>, RiccatiError> {
    let mut p = q.clone();
    let mut residual = T::from_f64(f64::INFINITY).unwrap();
    for _ in 0..max_iter {
        let next = dare_step(a, b, q, r, &p).ok_or(RiccatiError::SingularGain)?;
        residual = (&next - &p).amax();
        // Keep symmetry exact against rounding drift.
        p = (&next + next.transpose()) * real::<T>(0.5);
        if residual <= tol {
            return Ok(p);
        }
    }
    Err(RiccatiError::MaxIter {
        residual: to_f64(residual),
    })
}

/// Gain from a solved DARE: `K = (R + B'PB)^-1 B'PA`.
pub fn dare_gain<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    r: &DMatrix<T>,
    p: &DMatrix<T>,
) -> Result<DMatrix<T>, RiccatiError> {
    let bt_p = b.transpose() * p;
    let m = r + &bt_p * b;
    let inv = m.try_inverse().ok_or(RiccatiError::SingularGain)?;
    Ok(inv * bt_p * a)
}

/// Weights for the linear-quadratic tracking gain.
///
/// Deviations in `d` and `vx` dominate; the progress coordinate carries no
/// weight at all (its reference is the current position, and pulling the
/// vehicle back toward it would fight forward motion). Force weights act
/// on inputs normalized by `m * g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqtConfig<T> {
    pub q_diag: Vector6<T>,
    pub r_diag: Vector3<T>,
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for LqtConfig<T> {
    fn default() -> Self {
        Self {
            q_diag: Vector6::new(
                T::zero(),
                real(40.0),
                real(1.0),
                real(1.0),
                real(10.0),
                real(1.0),
            ),
            r_diag: Vector3::from_element(real(1e-7)),
            tol: real(1e-9),
            max_iter: 20_000,
        }
    }
}

/// Tracking gain in physical force units, with its Riccati solution and
/// the spectral radius of the closed tracking loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LqtGain<T> {
    /// `u = -K (x - x_ref)`, forces in newtons.
    pub k: SMatrix<T, 3, 6>,
    pub p: Matrix6<T>,
    /// Largest closed-loop eigenvalue magnitude over the tracking states
    /// (the progress coordinate is a structural unit eigenvalue: nothing
    /// in the model depends on `s` and it carries no weight).
    pub tracking_radius: T,
    pub residual: T,
}

/// Compute the tracking gain by linearizing the planning model at the
/// current state with zero force input and solving the DARE.
pub fn lqt_gain<T: Real>(
    x: &State<T>,
    rp: &RoadPoint<T>,
    mu: T,
    params: &VehicleParams<T>,
    cfg: &LqtConfig<T>,
    ts: T,
) -> Result<LqtGain<T>, RiccatiError> {
    let (a6, b6) = linearize(x, &Input::zero(), rp, mu, params, ts)?;
    let scale = params.m * params.g;
    let n = 6;
    let a = DMatrix::from_fn(n, n, |i, j| a6[(i, j)]);
    // Normalize forces so R is well conditioned.
    let b = DMatrix::from_fn(n, 3, |i, j| b6[(i, j)] * scale);
    // The DARE is homogeneous in (Q, R): scaling both by the same factor
    // scales P but leaves the gain unchanged. Normalizing by the largest
    // weight keeps the fixed-point residual away from its rounding floor.
    let gamma = cfg
        .q_diag
        .iter()
        .chain(cfg.r_diag.iter())
        .fold(real::<T>(1e-12), |acc: T, v| acc.max(*v));
    let q = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            cfg.q_diag[i] / gamma
        } else {
            T::zero()
        }
    });
    let r = DMatrix::from_fn(3, 3, |i, j| {
        if i == j {
            cfg.r_diag[i] / gamma
        } else {
            T::zero()
        }
    });
    let p = dare_solve(&a, &b, &q, &r, cfg.tol, cfg.max_iter)?;
    let residual = dare_residual(&a, &b, &q, &r, &p).ok_or(RiccatiError::SingularGain)?;
    let k_norm = dare_gain(&a, &b, &r, &p)?;

    // Closed loop and its tracking spectral radius. Deleting the progress
    // row and column removes exactly the structural unit eigenvalue.
    let closed = &a - &b * &k_norm;
    let reduced = closed.view((1, 1), (5, 5)).into_owned();
    let tracking_radius = reduced
        .complex_eigenvalues()
        .iter()
        .map(|c| (c.re * c.re + c.im * c.im).sqrt())
        .fold(T::zero(), |acc, v| acc.max(v));

    let mut k = SMatrix::<T, 3, 6>::zeros();
    for i in 0..3 {
        for j in 0..6 {
            k[(i, j)] = k_norm[(i, j)] * scale;
        }
    }
    let mut p6 = Matrix6::zeros();
    for i in 0..6 {
        for j in 0..6 {
            p6[(i, j)] = p[(i, j)] * gamma;
        }
    }
    Ok(LqtGain {
        k,
        p: p6,
        tracking_radius,
        residual,
    })
}
