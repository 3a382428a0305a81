//! Time-varying traction constraints.
//!
//! Per prediction step the admissible tire-force set is a convex polytope
//! under-approximating the front friction circle (inscribed regular
//! polygon), the rear friction circle with the rear lateral force budget
//! already spent along the guess trajectory, and the drivetrain cuts.
//! Lane, obstacle and velocity limits become linear state rows, soft by
//! default so the downstream QP stays feasible.

use nalgebra::{Vector3, Vector6};

use crate::real::{real, Real};
use crate::vehicle::VehicleParams;

/// Piecewise-constant friction estimate along the centerline.
///
/// Each breakpoint `(s, mu)` sets the value from `s` onward; queries ahead
/// of the first breakpoint return the first value.
#[derive(Debug, Clone, PartialEq)]
pub struct FrictionProfile<T> {
    breakpoints: Vec<(T, T)>,
}

impl<T: Real> FrictionProfile<T> {
    pub fn new(breakpoints: Vec<(T, T)>) -> Result<Self, String> {
        if breakpoints.is_empty() {
            return Err("friction profile needs at least one breakpoint".into());
        }
        for pair in breakpoints.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(format!(
                    "friction breakpoints must be strictly increasing (got {} after {})",
                    crate::real::to_f64(pair[1].0),
                    crate::real::to_f64(pair[0].0)
                ));
            }
        }
        for &(_, mu) in &breakpoints {
            if mu <= T::zero() || mu > real(1.2) {
                return Err(format!(
                    "friction value {} outside (0, 1.2]",
                    crate::real::to_f64(mu)
                ));
            }
        }
        Ok(Self { breakpoints })
    }

    pub fn constant(mu: T) -> Self {
        Self::new(vec![(T::zero(), mu)]).expect("constant profile")
    }

    pub fn mu_at(&self, s: T) -> T {
        let mut mu = self.breakpoints[0].1;
        for &(bp, value) in &self.breakpoints {
            if s >= bp {
                mu = value;
            } else {
                break;
            }
        }
        mu
    }

    pub fn breakpoints(&self) -> &[(T, T)] {
        &self.breakpoints
    }
}

/// Upper bound on the combined front tire force: `lambda * mu * fzf`.
pub fn front_force_bound<T: Real>(mu: T, fzf: T, lambda: T) -> T {
    lambda * mu * fzf
}

/// Construction context recorded with each polytope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolytopeMeta<T> {
    pub mu: T,
    pub fzf: T,
    pub fzr: T,
    pub fyr_nominal: T,
    pub lambda: T,
}

/// Halfspace set `{u : H u <= h}` bounding the tire-force inputs, with
/// unit-norm rows so offsets are in newtons.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPolytope<T> {
    normals: Vec<Vector3<T>>,
    offsets: Vec<T>,
    pub meta: PolytopeMeta<T>,
    /// Radius of the front polygon (N).
    front_radius: T,
    /// Half-width of the rear force interval (N).
    rear_bound: T,
    /// Drivetrain tractive bound (N).
    drive_bound: T,
    n_facets: usize,
}

impl<T: Real> InputPolytope<T> {
    pub fn rows(&self) -> impl Iterator<Item = (&Vector3<T>, T)> {
        self.normals.iter().zip(self.offsets.iter().copied())
    }

    pub fn num_rows(&self) -> usize {
        self.normals.len()
    }

    pub fn front_radius(&self) -> T {
        self.front_radius
    }

    pub fn rear_bound(&self) -> T {
        self.rear_bound
    }

    /// Largest row violation of `H u - h`; feasible points give <= 0.
    pub fn max_violation(&self, u: Vector3<T>) -> T {
        self.rows()
            .map(|(a, b)| a.dot(&u) - b)
            .fold(T::from_f64(f64::NEG_INFINITY).unwrap(), |acc, v| acc.max(v))
    }

    pub fn contains(&self, u: Vector3<T>, tol: T) -> bool {
        self.max_violation(u) <= tol
    }
}

/// Build the per-step input polytope.
///
/// Rows, in order: `n_facets` chords of the polygon inscribed in the front
/// circle of radius `lambda * mu * fzf` (edge normals at angles
/// `2*pi*k/n`, so vertices sit on the circle), the rear-wheel-drive cut
/// `fxf <= 0`, the rear interval `|fxr| <= sqrt(max(0, bound^2 -
/// fyr_nominal^2))`, and the drivetrain bound `fxr <= drive_force_max`.
/// A rear lateral demand at or beyond the rear circle collapses the
/// interval to `{0}` instead of failing.
pub fn build_input_polytope<T: Real>(
    mu: T,
    fzf: T,
    fzr: T,
    fyr_nominal: T,
    lambda: T,
    n_facets: usize,
    p: &VehicleParams<T>,
) -> InputPolytope<T> {
    assert!(n_facets >= 8 && n_facets % 2 == 0, "n_facets >= 8 and even");
    let zero = T::zero();
    let front_radius = front_force_bound(mu, fzf.max(zero), lambda);
    let rear_radius = front_force_bound(mu, fzr.max(zero), lambda);
    let slack = rear_radius * rear_radius - fyr_nominal * fyr_nominal;
    let rear_bound = slack.max(zero).sqrt();

    let mut normals = Vec::with_capacity(n_facets + 4);
    let mut offsets = Vec::with_capacity(n_facets + 4);
    let apothem = front_radius * real::<T>(std::f64::consts::PI / n_facets as f64).cos();
    for k in 0..n_facets {
        let angle = real::<T>(2.0 * std::f64::consts::PI * k as f64 / n_facets as f64);
        normals.push(Vector3::new(angle.cos(), angle.sin(), zero));
        offsets.push(apothem);
    }
    normals.push(Vector3::new(zero, T::one(), zero));
    offsets.push(zero);
    normals.push(Vector3::new(zero, zero, T::one()));
    offsets.push(rear_bound);
    normals.push(Vector3::new(zero, zero, -T::one()));
    offsets.push(rear_bound);
    normals.push(Vector3::new(zero, zero, T::one()));
    offsets.push(p.drive_force_max);

    debug_assert!(offsets.iter().all(|h| *h >= zero), "origin must stay feasible");

    InputPolytope {
        normals,
        offsets,
        meta: PolytopeMeta {
            mu,
            fzf,
            fzr,
            fyr_nominal,
            lambda,
        },
        front_radius,
        rear_bound,
        drive_bound: p.drive_force_max,
        n_facets,
    }
}

/// Euclidean projection of `u` onto the polytope.
///
/// The polytope separates into a planar block on `(fyf, fxf)` and an
/// interval on `fxr`, so the projection decomposes: exact active-set
/// enumeration in the plane (faces and vertices of the polygon-with-cut)
/// and a clamp on the rear coordinate. Feasible inputs are returned
/// unchanged, which also makes the operation exactly idempotent.
pub fn project_input<T: Real>(u: Vector3<T>, poly: &InputPolytope<T>) -> Vector3<T> {
    let feas_tol = real::<T>(1e-9) * (T::one() + poly.front_radius.abs());
    if poly.contains(u, feas_tol) {
        return u;
    }

    // Planar block: rows 0..n_facets plus the fxf <= 0 cut.
    let plane_rows: Vec<(T, T, T)> = (0..=poly.n_facets)
        .map(|i| (poly.normals[i][0], poly.normals[i][1], poly.offsets[i]))
        .collect();
    let (fyf, fxf) = project_planar(u[0], u[1], &plane_rows);

    // Rear interval, already intersected with the drivetrain bound.
    let hi = poly.rear_bound.min(poly.drive_bound);
    let lo = -poly.rear_bound;
    let fxr = u[2].max(lo).min(hi);

    // Snap rounding noise back inside the front circle and the cut so the
    // result is feasible to machine precision.
    let norm = (fyf * fyf + fxf * fxf).sqrt();
    let (fyf, fxf) = if norm > poly.front_radius && norm > T::zero() {
        let scale = poly.front_radius / norm;
        (fyf * scale, fxf * scale)
    } else {
        (fyf, fxf)
    };
    Vector3::new(fyf, fxf.min(T::zero()), fxr)
}

/// Exact projection of a 2-D point onto an intersection of halfplanes
/// `ax*x + ay*y <= b` by enumerating candidate active sets (single edges
/// and vertices). The optimum of a polyhedral projection always has such
/// an active set of dimension <= 2.
fn project_planar<T: Real>(x: T, y: T, rows: &[(T, T, T)]) -> (T, T) {
    let scale = rows
        .iter()
        .map(|r| r.2.abs())
        .fold(T::one(), |acc, v| acc.max(v));
    let tol = real::<T>(1e-9) * scale;
    let feasible = |px: T, py: T| {
        rows.iter()
            .all(|&(ax, ay, b)| ax * px + ay * py <= b + tol)
    };
    if feasible(x, y) {
        return (x, y);
    }
    let mut best: Option<(T, T, T)> = None;
    let mut consider = |px: T, py: T| {
        if feasible(px, py) {
            let d2 = (px - x) * (px - x) + (py - y) * (py - y);
            if best.map_or(true, |(bd, _, _)| d2 < bd) {
                best = Some((d2, px, py));
            }
        }
    };
    // Single active edge: foot of the perpendicular onto the boundary line.
    for &(ax, ay, b) in rows {
        let n2 = ax * ax + ay * ay;
        if n2 <= T::zero() {
            continue;
        }
        let t = (ax * x + ay * y - b) / n2;
        consider(x - ax * t, y - ay * t);
    }
    // Vertex candidates: intersections of pairs of boundary lines.
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let (a1, b1, c1) = rows[i];
            let (a2, b2, c2) = rows[j];
            let det = a1 * b2 - a2 * b1;
            if det.abs() < real(1e-14) {
                continue;
            }
            let px = (c1 * b2 - c2 * b1) / det;
            let py = (a1 * c2 - a2 * c1) / det;
            consider(px, py);
        }
    }
    let (_, px, py) = best.expect("polytope contains the origin, projection exists");
    (px, py)
}

/// Direct check of the friction-circle and drivetrain force bounds (the
/// constraints the polytope under-approximates).
pub fn check_traction_bounds<T: Real>(
    u: Vector3<T>,
    meta: &PolytopeMeta<T>,
    drive_force_max: T,
    tol: T,
) -> bool {
    let front = (u[0] * u[0] + u[1] * u[1]).sqrt();
    let rear = (u[2] * u[2] + meta.fyr_nominal * meta.fyr_nominal).sqrt();
    let front_ub = front_force_bound(meta.mu, meta.fzf.max(T::zero()), meta.lambda);
    let rear_ub = front_force_bound(meta.mu, meta.fzr.max(T::zero()), meta.lambda);
    front <= front_ub + tol
        && (rear <= rear_ub + tol || u[2].abs() <= tol)
        && u[1] <= tol
        && u[2] <= drive_force_max + tol
}

/// How the per-step friction value is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TractionMode<'a, T> {
    /// Time-varying constraints from the predictive friction profile and
    /// dynamic axle loads.
    Adaptive(&'a FrictionProfile<T>),
    /// Fixed friction value and zero-acceleration (static) axle loads.
    Static { mu_sta: T },
}

/// Per-step input polytope factory shared by the shift repair, the
/// rollout sampler and the QP assembly.
#[derive(Debug, Clone, Copy)]
pub struct TractionLimits<'a, T> {
    pub mode: TractionMode<'a, T>,
    pub lambda: T,
    pub n_facets: usize,
}

impl<'a, T: Real> TractionLimits<'a, T> {
    pub fn mu_at(&self, s: T) -> T {
        match self.mode {
            TractionMode::Adaptive(profile) => profile.mu_at(s),
            TractionMode::Static { mu_sta } => mu_sta,
        }
    }

    /// Build the polytope for a trajectory point. `ax` is the estimated
    /// longitudinal acceleration at that step; static mode ignores it.
    pub fn polytope_for(
        &self,
        state: &crate::vehicle::State<T>,
        ax: T,
        theta: T,
        params: &VehicleParams<T>,
    ) -> InputPolytope<T> {
        let mu = self.mu_at(state.s);
        let ax_eff = match self.mode {
            TractionMode::Adaptive(_) => ax,
            TractionMode::Static { .. } => T::zero(),
        };
        let (fzf, fzr) = crate::vehicle::normal_forces(ax_eff, theta, params);
        let fyr_nominal =
            crate::vehicle::rear_lateral_force(state, mu, fzr, params).unwrap_or(T::zero());
        build_input_polytope(mu, fzf, fzr, fyr_nominal, self.lambda, self.n_facets, params)
    }
}

/// Lateral corridor limits around the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneBounds<T> {
    /// Soft comfort bound: half the lane width (m).
    pub half_width: T,
    /// Hard validity bound; crossing it ends a simulation run (m).
    pub d_hard: T,
}

impl<T: Real> LaneBounds<T> {
    pub fn from_lane(half_width: T, hard_margin: T) -> Self {
        Self {
            half_width,
            d_hard: half_width + hard_margin,
        }
    }
}

/// Static disc obstacle in road-aligned coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleDisc<T> {
    pub s: T,
    pub d: T,
    pub radius: T,
}

/// Weights and margins for the state constraint rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateConstraintParams<T> {
    /// Obstacle inflation: clearance margin plus vehicle half width (m).
    pub r_margin: T,
    /// Hard lane validity bound sits this far outside the lane edge (m).
    pub hard_margin: T,
    pub vx_min: T,
    pub vx_max: T,
    pub lane_weight: T,
    pub obstacle_weight: T,
    pub velocity_weight: T,
    pub hard_weight: T,
}

impl<T: Real> Default for StateConstraintParams<T> {
    fn default() -> Self {
        Self {
            r_margin: real(0.5 + 1.25),
            hard_margin: real(4.0),
            vx_min: real(1.0),
            vx_max: real(36.0),
            lane_weight: real(1e5),
            obstacle_weight: real(1e5),
            velocity_weight: real(1e5),
            hard_weight: real(1e5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    LaneHard,
    LaneComfort,
    Obstacle(usize),
    VelocityBand,
}

/// One linear state inequality `hx . x <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRow<T> {
    pub hx: Vector6<T>,
    pub b: T,
    pub soft: bool,
    pub weight: T,
    pub kind: RowKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateConstraintSet<T> {
    pub rows: Vec<StateRow<T>>,
}

impl<T: Real> StateConstraintSet<T> {
    pub fn max_violation(&self, x: Vector6<T>) -> T {
        self.rows
            .iter()
            .map(|r| r.hx.dot(&x) - r.b)
            .fold(T::from_f64(f64::NEG_INFINITY).unwrap(), |acc, v| acc.max(v))
    }
}

fn d_row<T: Real>(sign: T) -> Vector6<T> {
    let mut v = Vector6::zeros();
    v[1] = sign;
    v
}

fn vx_row<T: Real>(sign: T) -> Vector6<T> {
    let mut v = Vector6::zeros();
    v[4] = sign;
    v
}

/// Build the state rows for prediction step `k` of a guess trajectory.
///
/// Lane validity rows are flagged hard; they and everything else still
/// receive slack in the QP so it cannot go infeasible, but hard rows also
/// gate initial-guess selection and run termination. Each obstacle whose
/// longitudinal extent covers the guessed `s` at step `k` contributes one
/// lateral halfspace on the side of the guess, which freezes the discrete
/// left/right decision made by the selected initial guess.
pub fn build_state_constraints<T: Real>(
    guess_s: T,
    guess_d: T,
    lane: &LaneBounds<T>,
    obstacles: &[ObstacleDisc<T>],
    params: &StateConstraintParams<T>,
) -> StateConstraintSet<T> {
    let mut rows = Vec::with_capacity(6 + obstacles.len());
    let one = T::one();
    rows.push(StateRow {
        hx: d_row(one),
        b: lane.d_hard,
        soft: false,
        weight: params.hard_weight,
        kind: RowKind::LaneHard,
    });
    rows.push(StateRow {
        hx: d_row(-one),
        b: lane.d_hard,
        soft: false,
        weight: params.hard_weight,
        kind: RowKind::LaneHard,
    });
    rows.push(StateRow {
        hx: d_row(one),
        b: lane.half_width,
        soft: true,
        weight: params.lane_weight,
        kind: RowKind::LaneComfort,
    });
    rows.push(StateRow {
        hx: d_row(-one),
        b: lane.half_width,
        soft: true,
        weight: params.lane_weight,
        kind: RowKind::LaneComfort,
    });
    for (i, obs) in obstacles.iter().enumerate() {
        let extent = obs.radius + params.r_margin;
        if (guess_s - obs.s).abs() > extent {
            continue;
        }
        let clearance = obs.radius + params.r_margin;
        let (hx, b) = if guess_d >= obs.d {
            // Pass on the left: d >= d_obs + clearance.
            (d_row(-one), -(obs.d + clearance))
        } else {
            // Pass on the right: d <= d_obs - clearance.
            (d_row(one), obs.d - clearance)
        };
        rows.push(StateRow {
            hx,
            b,
            soft: true,
            weight: params.obstacle_weight,
            kind: RowKind::Obstacle(i),
        });
    }
    rows.push(StateRow {
        hx: vx_row(one),
        b: params.vx_max,
        soft: true,
        weight: params.velocity_weight,
        kind: RowKind::VelocityBand,
    });
    rows.push(StateRow {
        hx: vx_row(-one),
        b: -params.vx_min,
        soft: true,
        weight: params.velocity_weight,
        kind: RowKind::VelocityBand,
    });
    StateConstraintSet { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::to_f64;
    use crate::vehicle::{normal_forces, VehicleParams};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn truck() -> VehicleParams<f64> {
        VehicleParams::heavy_truck()
    }

    #[test]
    fn friction_profile_lookup_and_validation() {
        let prof = FrictionProfile::new(vec![(-100.0, 0.8), (0.0, 0.2)]).unwrap();
        assert_eq!(prof.mu_at(-150.0), 0.8);
        assert_eq!(prof.mu_at(-1.0), 0.8);
        assert_eq!(prof.mu_at(0.0), 0.2);
        assert_eq!(prof.mu_at(500.0), 0.2);
        assert!(FrictionProfile::new(vec![(0.0, 0.8), (0.0, 0.2)]).is_err());
        assert!(FrictionProfile::new(vec![(0.0, 1.5)]).is_err());
    }

    #[test]
    fn front_bound_arithmetic() {
        let p = truck();
        let (fzf, _) = normal_forces(0.0, 0.0, &p);
        let bound = front_force_bound(0.2, fzf, 0.9);
        assert_relative_eq!(bound, 0.9 * 0.2 * 53002.853, max_relative = 1e-5);
        assert_eq!(front_force_bound(0.0, fzf, 1.0), 0.0);
        assert_relative_eq!(
            front_force_bound(0.8, fzf, 0.9) / front_force_bound(0.2, fzf, 0.9),
            4.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn polygon_vertices_sit_on_the_front_circle() {
        let p = truck();
        let poly = build_input_polytope(0.5, 50_000.0, 28_000.0, 0.0, 0.9, 16, &p);
        let r = poly.front_radius();
        // Adjacent chord intersections are the polygon vertices.
        let apothem = r * (std::f64::consts::PI / 16.0).cos();
        for k in 0..16 {
            let a0 = 2.0 * std::f64::consts::PI * k as f64 / 16.0;
            let a1 = 2.0 * std::f64::consts::PI * ((k + 1) % 16) as f64 / 16.0;
            let det = a0.cos() * a1.sin() - a1.cos() * a0.sin();
            let vx = apothem * (a1.sin() - a0.sin()) / det;
            let vy = apothem * (a0.cos() - a1.cos()) / det;
            assert_relative_eq!((vx * vx + vy * vy).sqrt(), r, max_relative = 1e-9);
        }
    }

    #[test]
    fn rear_interval_from_lateral_budget() {
        let p = truck();
        let poly = build_input_polytope(0.5, 50_000.0, 28_000.0, 0.0, 0.9, 16, &p);
        assert_relative_eq!(poly.rear_bound(), 0.9 * 0.5 * 28_000.0, max_relative = 1e-12);
        // Saturated rear lateral force collapses the interval to {0}.
        let sat = build_input_polytope(0.5, 50_000.0, 28_000.0, 13_000.0, 0.9, 16, &p);
        assert_eq!(sat.rear_bound(), 0.0);
        assert!(sat.contains(nalgebra::Vector3::zeros(), 1e-12));
    }

    #[test]
    fn friction_scaling_only_rescales_circle_rows() {
        let p = truck();
        let hi = build_input_polytope(0.8, 50_000.0, 28_000.0, 0.0, 0.9, 16, &p);
        let lo = build_input_polytope(0.3, 50_000.0, 28_000.0, 0.0, 0.9, 16, &p);
        let ratio = 0.8 / 0.3;
        for ((_, h_hi), (_, h_lo)) in hi.rows().zip(lo.rows()) {
            let scaled = (h_hi - h_lo * ratio).abs() < 1e-6;
            let unchanged = (h_hi - h_lo).abs() < 1e-12;
            assert!(scaled || unchanged, "row neither scaled nor constant");
        }
    }

    #[test]
    fn projection_identity_on_feasible_points() {
        let p = truck();
        let poly = build_input_polytope(0.8, 50_000.0, 28_000.0, 5_000.0, 0.9, 16, &p);
        let u = nalgebra::Vector3::new(1_000.0, -2_000.0, 3_000.0);
        assert_eq!(project_input(u, &poly), u);
    }

    #[test]
    fn projection_of_far_lateral_point_lands_on_the_facet() {
        let p = truck();
        let (fzf, fzr) = normal_forces(0.0, 0.0, &p);
        let poly = build_input_polytope(0.2, fzf, fzr, 0.0, 0.9, 16, &p);
        let r = poly.front_radius();
        let proj = project_input(nalgebra::Vector3::new(20_000.0, 0.0, 0.0), &poly);
        let apothem = r * (std::f64::consts::PI / 16.0).cos();
        assert_relative_eq!(proj[0], apothem, max_relative = 1e-9);
        assert!(proj[0] >= apothem - 1e-6 && proj[0] <= r);
        assert_relative_eq!(proj[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn projection_is_idempotent_and_optimal_vs_grid() {
        let p = truck();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mu = rng.random_range(0.2..0.9);
            let fzf = rng.random_range(30_000.0..60_000.0);
            let fzr = rng.random_range(20_000.0..40_000.0);
            let fyr = rng.random_range(0.0..0.5) * 0.9 * mu * fzr;
            let poly = build_input_polytope(mu, fzf, fzr, fyr, 0.9, 16, &p);
            let u = nalgebra::Vector3::new(
                rng.random_range(-40_000.0..40_000.0),
                rng.random_range(-40_000.0..40_000.0),
                rng.random_range(-40_000.0..40_000.0),
            );
            let proj = project_input(u, &poly);
            assert!(poly.contains(proj, 1e-6));
            assert_eq!(project_input(proj, &poly), proj);

            // Coarse grid oracle on the (fyf, fxf) slice at the projected fxr.
            let r = poly.front_radius();
            let step = 25.0;
            let mut best = (f64::INFINITY, 0.0, 0.0);
            let n = (2.0 * r / step).ceil() as i64 + 1;
            for i in 0..=n {
                for j in 0..=n {
                    let gy = -r + i as f64 * step;
                    let gx = -r + j as f64 * step;
                    let cand = nalgebra::Vector3::new(gy, gx, proj[2]);
                    if poly.contains(cand, 1e-9) {
                        let d2 = (gy - u[0]).powi(2) + (gx - u[1]).powi(2);
                        if d2 < best.0 {
                            best = (d2, gy, gx);
                        }
                    }
                }
            }
            let d_proj = ((proj[0] - u[0]).powi(2) + (proj[1] - u[1]).powi(2)).sqrt();
            let d_grid = best.0.sqrt();
            assert!(
                d_proj <= d_grid + 1e-9,
                "projection farther than grid point: {d_proj} > {d_grid}"
            );
            assert!(d_grid - d_proj <= step * 1.5, "grid oracle disagrees");
        }
    }

    #[test]
    fn polytope_members_respect_force_bounds() {
        // Sampled points inside the polytope must satisfy the friction
        // circle and drivetrain constraints directly (soundness).
        let p = truck();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mu = rng.random_range(0.15..1.0);
            let fzf = rng.random_range(20_000.0..60_000.0);
            let fzr = rng.random_range(15_000.0..40_000.0);
            let fyr = rng.random_range(0.0..1.2) * 0.9 * mu * fzr;
            let poly = build_input_polytope(mu, fzf, fzr, fyr, 0.9, 16, &p);
            let r = poly.front_radius();
            for _ in 0..200 {
                let u = nalgebra::Vector3::new(
                    rng.random_range(-1.2..1.2) * r,
                    rng.random_range(-1.2..1.2) * r,
                    rng.random_range(-1.5..1.5) * (poly.rear_bound() + 1.0),
                );
                if poly.contains(u, 0.0) {
                    assert!(
                        check_traction_bounds(u, &poly.meta, p.drive_force_max, 1e-9),
                        "member violates force bounds: {u:?} mu={mu} fyr={fyr}"
                    );
                }
            }
        }
    }

    #[test]
    fn state_rows_without_obstacles() {
        let lane = LaneBounds {
            half_width: 2.25,
            d_hard: 6.25,
        };
        let params = StateConstraintParams::default();
        let set = build_state_constraints(0.0, 0.0, &lane, &[], &params);
        assert_eq!(set.rows.len(), 6);
        assert!(set.rows.iter().all(|r| matches!(
            r.kind,
            RowKind::LaneHard | RowKind::LaneComfort | RowKind::VelocityBand
        )));
    }

    #[test]
    fn obstacle_side_follows_the_guess() {
        let lane = LaneBounds {
            half_width: 2.25,
            d_hard: 6.25,
        };
        let params = StateConstraintParams::default();
        let obs = ObstacleDisc {
            s: 20.0,
            d: 0.3,
            radius: 0.5,
        };
        // Guess passes right of the obstacle: enforce d <= d_obs - clearance.
        let set = build_state_constraints(20.5, -1.0, &lane, &[obs], &params);
        let row = set
            .rows
            .iter()
            .find(|r| matches!(r.kind, RowKind::Obstacle(_)))
            .unwrap();
        assert_eq!(row.hx[1], 1.0);
        assert_relative_eq!(row.b, 0.3 - (0.5 + 1.75), max_relative = 1e-12);

        // Far from the obstacle longitudinally: no row.
        let set = build_state_constraints(5.0, -1.0, &lane, &[obs], &params);
        assert!(!set
            .rows
            .iter()
            .any(|r| matches!(r.kind, RowKind::Obstacle(_))));

        // Guess on the left: d >= d_obs + clearance.
        let set = build_state_constraints(20.0, 1.5, &lane, &[obs], &params);
        let row = set
            .rows
            .iter()
            .find(|r| matches!(r.kind, RowKind::Obstacle(_)))
            .unwrap();
        assert_eq!(row.hx[1], -1.0);
        assert_relative_eq!(-row.b, 0.3 + 2.25, max_relative = 1e-12);
        assert!(to_f64(row.weight) > 0.0);
    }
}
