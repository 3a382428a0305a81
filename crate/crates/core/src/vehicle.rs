//! Single-track vehicle model in road-aligned coordinates.
//!
//! States are expressed relative to the lane centerline: progress `s`,
//! lateral deviation `d` (positive to the left), relative heading `dpsi`,
//! plus yaw rate and body velocities. Control inputs are tire forces:
//! front lateral, front longitudinal and rear longitudinal. The rear
//! lateral force is not an input; it comes from a time-varying linear tire
//! model whose cornering stiffness is the zero-slip slope of a Magic
//! Formula fit parameterized by the friction coefficient.

use nalgebra::{Matrix6, SMatrix, Vector3, Vector6};
use thiserror::Error;

use crate::real::{real, to_f64, Real};

/// Minimum allowed |1 - d*kappa| before the road-aligned frame degenerates.
pub const FRENET_GUARD: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("road frame singularity: |1 - d*kappa| = {margin:.4} < {FRENET_GUARD}")]
    FrenetSingularity { margin: f64 },
    #[error("longitudinal velocity {vx:.3} m/s outside validity band (vx > 0)")]
    NonPositiveSpeed { vx: f64 },
    #[error("friction coefficient {mu:.3} outside tire table range [0, {max:.3}]")]
    FrictionOutOfRange { mu: f64, max: f64 },
}

/// Magic Formula coefficient set for one road surface.
///
/// The peak force is `d_scale * mu * fz`, so with `d_scale = 1` the tire
/// saturates exactly on the friction circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TireCoeffs<T> {
    pub b: T,
    pub c: T,
    pub d_scale: T,
    pub e: T,
}

/// Lookup table associating friction coefficients with Magic Formula
/// coefficients, interpolated linearly in `mu` between anchor rows.
///
/// Queries below the lowest anchor reuse the lowest row (the peak force
/// still scales with `mu`, so `mu = 0` yields a zero-force tire); queries
/// above the highest anchor are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct TireTable<T> {
    rows: Vec<(T, TireCoeffs<T>)>,
}

impl<T: Real> TireTable<T> {
    pub fn new(mut rows: Vec<(T, TireCoeffs<T>)>) -> Self {
        assert!(!rows.is_empty(), "tire table must have at least one row");
        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite mu keys"));
        Self { rows }
    }

    /// Default anchors for dry / wet / snow surfaces.
    ///
    /// Stiffness factors are tuned for a heavy vehicle so that the rear
    /// axle slip dynamics remain stable under the forward-Euler planning
    /// discretization at 0.1 s in the operating band (vx >= 5 m/s,
    /// mu <= 1.0); see the stability bound B*C*mu*Fz*lr^2/(Iz*vx) < 2/Ts.
    pub fn default_anchors() -> Self {
        let row = |mu: f64, b: f64, c: f64, e: f64| {
            (
                real::<T>(mu),
                TireCoeffs {
                    b: real(b),
                    c: real(c),
                    d_scale: real(1.0),
                    e: real(e),
                },
            )
        };
        Self::new(vec![
            row(0.1, 3.3, 2.0, 1.0),
            row(0.3, 3.3, 2.0, 1.0),
            row(0.5, 3.0, 2.2, 1.0),
            row(0.8, 3.5, 1.9, 0.97),
            row(1.0, 3.5, 1.9, 0.97),
        ])
    }

    pub fn mu_max(&self) -> T {
        self.rows.last().expect("nonempty").0
    }

    pub fn rows(&self) -> impl Iterator<Item = (T, TireCoeffs<T>)> + '_ {
        self.rows.iter().copied()
    }

    pub fn lookup(&self, mu: T) -> Result<TireCoeffs<T>, ModelError> {
        let max = self.mu_max();
        if mu < T::zero() || mu > max {
            return Err(ModelError::FrictionOutOfRange {
                mu: to_f64(mu),
                max: to_f64(max),
            });
        }
        let first = &self.rows[0];
        if mu <= first.0 {
            return Ok(first.1);
        }
        for pair in self.rows.windows(2) {
            let (m0, c0) = pair[0];
            let (m1, c1) = pair[1];
            if mu <= m1 {
                let t = (mu - m0) / (m1 - m0);
                let lerp = |a: T, b: T| a + (b - a) * t;
                return Ok(TireCoeffs {
                    b: lerp(c0.b, c1.b),
                    c: lerp(c0.c, c1.c),
                    d_scale: lerp(c0.d_scale, c1.d_scale),
                    e: lerp(c0.e, c1.e),
                });
            }
        }
        Ok(self.rows.last().expect("nonempty").1)
    }
}

/// Static physical parameters of the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleParams<T> {
    /// Mass (kg).
    pub m: T,
    /// Yaw inertia (kg m^2).
    pub iz: T,
    /// Center of mass height (m).
    pub h: T,
    /// Distance from center of mass to front axle (m).
    pub lf: T,
    /// Distance from center of mass to rear axle (m).
    pub lr: T,
    /// Gravitational acceleration (m/s^2).
    pub g: T,
    pub tire_table: TireTable<T>,
    /// Drivetrain tractive force bound on the rear axle (N).
    pub drive_force_max: T,
}

impl<T: Real> VehicleParams<T> {
    /// Parameters of a heavy (8.35 t) two-axle test truck.
    pub fn heavy_truck() -> Self {
        let m = real::<T>(8350.0);
        let g = real::<T>(9.81);
        Self {
            m,
            iz: real(8150.0),
            h: real(1.0),
            lf: real(1.20),
            lr: real(2.20),
            g,
            tire_table: TireTable::default_anchors(),
            // Deliberately non-binding default: half the weight at mu = 1.
            drive_force_max: real::<T>(0.5) * m * g,
        }
    }

    pub fn wheelbase(&self) -> T {
        self.lf + self.lr
    }

    pub fn validate(&self) -> Result<(), String> {
        let pos = [
            (self.m, "m"),
            (self.iz, "iz"),
            (self.lf, "lf"),
            (self.lr, "lr"),
            (self.g, "g"),
            (self.drive_force_max, "drive_force_max"),
        ];
        for (v, name) in pos {
            if !(v > T::zero()) {
                return Err(format!("vehicle parameter {name} must be > 0"));
            }
        }
        if self.h < T::zero() {
            return Err("vehicle parameter h must be >= 0".into());
        }
        Ok(())
    }
}

/// Road-aligned vehicle state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State<T> {
    /// Progress along the centerline (m).
    pub s: T,
    /// Lateral deviation from the centerline, positive left (m).
    pub d: T,
    /// Heading relative to the centerline tangent (rad).
    pub dpsi: T,
    /// Yaw rate (rad/s).
    pub yaw_rate: T,
    /// Longitudinal body velocity (m/s).
    pub vx: T,
    /// Lateral body velocity (m/s).
    pub vy: T,
}

impl<T: Real> State<T> {
    pub fn to_vector(self) -> Vector6<T> {
        Vector6::new(self.s, self.d, self.dpsi, self.yaw_rate, self.vx, self.vy)
    }

    pub fn from_vector(v: Vector6<T>) -> Self {
        Self {
            s: v[0],
            d: v[1],
            dpsi: v[2],
            yaw_rate: v[3],
            vx: v[4],
            vy: v[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

/// Commanded tire forces (N).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Input<T> {
    /// Front lateral force.
    pub fyf: T,
    /// Front longitudinal force.
    pub fxf: T,
    /// Rear longitudinal force.
    pub fxr: T,
}

impl<T: Real> Input<T> {
    pub fn zero() -> Self {
        Self {
            fyf: T::zero(),
            fxf: T::zero(),
            fxr: T::zero(),
        }
    }

    pub fn to_vector(self) -> Vector3<T> {
        Vector3::new(self.fyf, self.fxf, self.fxr)
    }

    pub fn from_vector(v: Vector3<T>) -> Self {
        Self {
            fyf: v[0],
            fxf: v[1],
            fxr: v[2],
        }
    }
}

/// Local road geometry at the vehicle's position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadPoint<T> {
    /// Centerline curvature (1/m), positive for a left turn.
    pub kappa_c: T,
    /// Road grade (rad).
    pub theta: T,
    /// Bank angle (rad).
    pub phi: T,
}

impl<T: Real> RoadPoint<T> {
    pub fn flat(kappa_c: T) -> Self {
        Self {
            kappa_c,
            theta: T::zero(),
            phi: T::zero(),
        }
    }
}

/// Front and rear normal loads from the quasi-static pitch moment balance.
///
/// `ax` is the longitudinal acceleration; braking shifts load to the front
/// axle. The sum is always `m * g * cos(theta)`.
pub fn normal_forces<T: Real>(ax: T, theta: T, p: &VehicleParams<T>) -> (T, T) {
    let wheelbase = p.wheelbase();
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let mgh = p.m * p.g * p.h;
    let fzf = (-p.m * ax * p.h - mgh * sin_t + p.m * p.g * p.lr * cos_t) / wheelbase;
    let fzr = (p.m * ax * p.h + mgh * sin_t + p.m * p.g * p.lf * cos_t) / wheelbase;
    (fzf, fzr)
}

/// Lateral tire force from the Magic Formula at slip angle `alpha`.
pub fn magic_formula<T: Real>(
    alpha: T,
    mu: T,
    fz: T,
    p: &VehicleParams<T>,
) -> Result<T, ModelError> {
    let k = p.tire_table.lookup(mu)?;
    let d = k.d_scale * mu * fz;
    let b_alpha = k.b * alpha;
    let arg = b_alpha - k.e * (b_alpha - b_alpha.atan());
    Ok(d * (k.c * arg.atan()).sin())
}

/// Zero-slip slope of the Magic Formula: `B * C * D` (N/rad).
pub fn cornering_stiffness<T: Real>(mu: T, fz: T, p: &VehicleParams<T>) -> Result<T, ModelError> {
    let k = p.tire_table.lookup(mu)?;
    Ok(k.b * k.c * k.d_scale * mu * fz)
}

/// Rear slip angle for the given state.
pub fn rear_slip_angle<T: Real>(x: &State<T>, p: &VehicleParams<T>) -> Result<T, ModelError> {
    if x.vx <= T::zero() {
        return Err(ModelError::NonPositiveSpeed { vx: to_f64(x.vx) });
    }
    Ok(-((x.vy - p.lr * x.yaw_rate) / x.vx).atan())
}

/// Rear lateral force from the time-varying linear tire model.
pub fn rear_lateral_force<T: Real>(
    x: &State<T>,
    mu: T,
    fzr: T,
    p: &VehicleParams<T>,
) -> Result<T, ModelError> {
    let alpha_r = rear_slip_angle(x, p)?;
    Ok(cornering_stiffness(mu, fzr, p)? * alpha_r)
}

fn check_frame<T: Real>(x: &State<T>, rp: &RoadPoint<T>) -> Result<T, ModelError> {
    if x.vx <= T::zero() {
        return Err(ModelError::NonPositiveSpeed { vx: to_f64(x.vx) });
    }
    let w = T::one() - x.d * rp.kappa_c;
    if w.abs() < real(FRENET_GUARD) {
        return Err(ModelError::FrenetSingularity { margin: to_f64(w.abs()) });
    }
    Ok(w)
}

/// Continuous-time dynamics `x_dot = f_c(x, u)` of the planning model.
///
/// The rear lateral force is derived from the state through the linear
/// tire model at the current rear load; the load itself follows from the
/// commanded longitudinal forces. The small `vy * yaw_rate` cross term in
/// the `vx` equation is intentionally dropped.
pub fn continuous_dynamics<T: Real>(
    x: &State<T>,
    u: &Input<T>,
    rp: &RoadPoint<T>,
    mu: T,
    p: &VehicleParams<T>,
) -> Result<Vector6<T>, ModelError> {
    let w = check_frame(x, rp)?;
    let ax = (u.fxf + u.fxr) / p.m - p.g * rp.theta.sin();
    let (_, fzr) = normal_forces(ax, rp.theta, p);
    let fyr = rear_lateral_force(x, mu, fzr, p)?;

    let (sin_dpsi, cos_dpsi) = (x.dpsi.sin(), x.dpsi.cos());
    let s_dot = (x.vx * cos_dpsi - x.vy * sin_dpsi) / w;
    let d_dot = x.vx * sin_dpsi + x.vy * cos_dpsi;
    let dpsi_dot = x.yaw_rate - rp.kappa_c * s_dot;
    let yaw_acc = (p.lf * u.fyf - p.lr * fyr) / p.iz;
    let vx_dot = (u.fxf + u.fxr) / p.m - p.g * rp.theta.sin();
    let vy_dot = (u.fyf + fyr) / p.m - x.vx * x.yaw_rate + p.g * rp.phi.sin();

    Ok(Vector6::new(s_dot, d_dot, dpsi_dot, yaw_acc, vx_dot, vy_dot))
}

/// One forward-Euler step of the planning model: `x + Ts * f_c(x, u)`.
pub fn discrete_step<T: Real>(
    x: &State<T>,
    u: &Input<T>,
    rp: &RoadPoint<T>,
    mu: T,
    p: &VehicleParams<T>,
    ts: T,
) -> Result<State<T>, ModelError> {
    let f = continuous_dynamics(x, u, rp, mu, p)?;
    Ok(State::from_vector(x.to_vector() + f * ts))
}

/// Jacobians of [`discrete_step`] with respect to state and input.
///
/// Computed analytically; the finite-difference cross-check lives in the
/// test suite. The load-transfer channel (longitudinal inputs changing the
/// rear cornering stiffness through the normal load) is included.
pub fn linearize<T: Real>(
    x: &State<T>,
    u: &Input<T>,
    rp: &RoadPoint<T>,
    mu: T,
    p: &VehicleParams<T>,
    ts: T,
) -> Result<(Matrix6<T>, SMatrix<T, 6, 3>), ModelError> {
    let w = check_frame(x, rp)?;
    let kappa = rp.kappa_c;
    let ax = (u.fxf + u.fxr) / p.m - p.g * rp.theta.sin();
    let (_, fzr) = normal_forces(ax, rp.theta, p);
    let coeffs = p.tire_table.lookup(mu)?;
    let stiff = coeffs.b * coeffs.c * coeffs.d_scale * mu * fzr;
    // d(stiffness)/d(fzr) times d(fzr)/d(fx): load transfer channel.
    let dstiff_dfx = coeffs.b * coeffs.c * coeffs.d_scale * mu * p.h / p.wheelbase();

    let q = (x.vy - p.lr * x.yaw_rate) / x.vx;
    let alpha_r = -q.atan();
    let denom = T::one() + q * q;
    let dfyr_dvy = -stiff / (x.vx * denom);
    let dfyr_dr = stiff * p.lr / (x.vx * denom);
    let dfyr_dvx = stiff * q / (x.vx * denom);
    let dfyr_dfx = alpha_r * dstiff_dfx;

    let (sin_dpsi, cos_dpsi) = (x.dpsi.sin(), x.dpsi.cos());
    let fwd = x.vx * cos_dpsi - x.vy * sin_dpsi;

    let mut jx = Matrix6::zeros();
    // s_dot = fwd / w
    jx[(0, 1)] = fwd * kappa / (w * w);
    jx[(0, 2)] = (-x.vx * sin_dpsi - x.vy * cos_dpsi) / w;
    jx[(0, 4)] = cos_dpsi / w;
    jx[(0, 5)] = -sin_dpsi / w;
    // d_dot = vx sin + vy cos
    jx[(1, 2)] = fwd;
    jx[(1, 4)] = sin_dpsi;
    jx[(1, 5)] = cos_dpsi;
    // dpsi_dot = yaw_rate - kappa * s_dot
    jx[(2, 1)] = -kappa * jx[(0, 1)];
    jx[(2, 2)] = -kappa * jx[(0, 2)];
    jx[(2, 3)] = T::one();
    jx[(2, 4)] = -kappa * jx[(0, 4)];
    jx[(2, 5)] = -kappa * jx[(0, 5)];
    // yaw_acc = (lf fyf - lr fyr) / iz
    jx[(3, 3)] = -p.lr * dfyr_dr / p.iz;
    jx[(3, 4)] = -p.lr * dfyr_dvx / p.iz;
    jx[(3, 5)] = -p.lr * dfyr_dvy / p.iz;
    // vx_dot: no state dependence (vy * yaw_rate term dropped by design)
    // vy_dot = (fyf + fyr)/m - vx yaw_rate
    jx[(5, 3)] = dfyr_dr / p.m - x.vx;
    jx[(5, 4)] = dfyr_dvx / p.m - x.yaw_rate;
    jx[(5, 5)] = dfyr_dvy / p.m;

    let mut ju = SMatrix::<T, 6, 3>::zeros();
    ju[(3, 0)] = p.lf / p.iz;
    ju[(3, 1)] = -p.lr * dfyr_dfx / p.iz;
    ju[(3, 2)] = -p.lr * dfyr_dfx / p.iz;
    ju[(4, 1)] = T::one() / p.m;
    ju[(4, 2)] = T::one() / p.m;
    ju[(5, 0)] = T::one() / p.m;
    ju[(5, 1)] = dfyr_dfx / p.m;
    ju[(5, 2)] = dfyr_dfx / p.m;

    let a = Matrix6::identity() + jx * ts;
    let b = ju * ts;
    Ok((a, b))
}
