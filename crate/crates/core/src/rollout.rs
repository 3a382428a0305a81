//! Sampled initial-guess candidates: forward rollouts of the planning
//! model under a linear-quadratic tracking gain toward reference states
//! spread over the lane and speed band, with every commanded input
//! projected into the step's traction polytope before integration. Each
//! candidate is independent, so the set is computed in parallel with a
//! deterministic, order-independent result.

use nalgebra::SMatrix;
use rayon::prelude::*;

use crate::constraints::{project_input, TractionLimits};
use crate::planner::Trajectory;
use crate::real::{real, Real};
use crate::track::RoadModel;
use crate::vehicle::{discrete_step, Input, State, VehicleParams};

/// Reference sampling grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig<T> {
    /// Lateral grid points across `[-d_band, d_band]`.
    pub n_d: usize,
    /// Speed grid points between the floor and the current speed.
    pub n_v: usize,
    pub d_band: T,
    /// Lowest sampled speed as a fraction of the current speed.
    pub vx_floor_frac: T,
    /// Absolute floor on sampled speeds (keeps the Euler model in its
    /// stable band).
    pub vx_min_sample: T,
}

impl<T: Real> Default for SampleConfig<T> {
    fn default() -> Self {
        Self {
            n_d: 9,
            n_v: 4,
            d_band: real(2.0),
            vx_floor_frac: real(0.3),
            vx_min_sample: real(3.0),
        }
    }
}

/// Deterministic reference grid: lateral offsets spread evenly across the
/// band, speeds spread evenly from the floor up to the current speed,
/// progress fixed at the current position, everything else zero.
pub fn sample_references<T: Real>(x_t: &State<T>, cfg: &SampleConfig<T>) -> Vec<State<T>> {
    assert!(cfg.n_d >= 1 && cfg.n_v >= 1);
    let mut refs = Vec::with_capacity(cfg.n_d * cfg.n_v);
    let floor = (cfg.vx_floor_frac * x_t.vx).max(cfg.vx_min_sample).min(x_t.vx);
    for i in 0..cfg.n_d {
        let d_ref = if cfg.n_d == 1 {
            T::zero()
        } else {
            let t = T::from_usize(i).unwrap() / T::from_usize(cfg.n_d - 1).unwrap();
            -cfg.d_band + (cfg.d_band + cfg.d_band) * t
        };
        for j in 0..cfg.n_v {
            let vx_ref = if cfg.n_v == 1 {
                x_t.vx
            } else {
                let t = T::from_usize(j).unwrap() / T::from_usize(cfg.n_v - 1).unwrap();
                floor + (x_t.vx - floor) * t
            };
            refs.push(State {
                s: x_t.s,
                d: d_ref,
                dpsi: T::zero(),
                yaw_rate: T::zero(),
                vx: vx_ref,
                vy: T::zero(),
            });
        }
    }
    refs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T> {
    pub trajectory: Trajectory<T>,
    pub cost: T,
    /// Dynamics stayed in the validity band for the whole horizon.
    pub valid: bool,
}

/// The sampled candidate set, in reference order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<T> {
    pub candidates: Vec<Candidate<T>>,
}

impl<T> Default for CandidateSet<T> {
    fn default() -> Self {
        Self {
            candidates: Vec::new(),
        }
    }
}

impl<T: Real> CandidateSet<T> {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Roll the model forward under `u = -K (x - x_ref)` with per-step input
/// projection. Returns `None` if the dynamics leave the validity band.
pub fn rollout_trajectory<T: Real, R: RoadModel<T> + ?Sized>(
    x_t: &State<T>,
    x_ref: &State<T>,
    gain: &SMatrix<T, 3, 6>,
    road: &R,
    limits: &TractionLimits<'_, T>,
    params: &VehicleParams<T>,
    n: usize,
    ts: T,
) -> Option<Trajectory<T>> {
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n);
    let mut x = *x_t;
    states.push(x);
    let ref_vec = x_ref.to_vector();
    // Loads at the first step assume coasting; afterwards the previous
    // projected input sets the load transfer.
    let mut ax = T::zero();
    for _ in 0..n {
        let rp = road.road_point(x.s);
        let poly = limits.polytope_for(&x, ax, rp.theta, params);
        let u_raw = -gain * (x.to_vector() - ref_vec);
        let u = Input::from_vector(project_input(u_raw, &poly));
        let mu = limits.mu_at(x.s);
        let next = discrete_step(&x, &u, &rp, mu, params, ts).ok()?;
        if !next.is_finite() || next.vx <= T::zero() {
            return None;
        }
        ax = (u.fxf + u.fxr) / params.m - params.g * rp.theta.sin();
        inputs.push(u);
        states.push(next);
        x = next;
    }
    Some(Trajectory { states, inputs })
}

/// Compute one candidate per reference, in parallel. `cost_fn` scores a
/// finished trajectory; invalid rollouts keep an infinite cost. The
/// output order follows the reference order regardless of scheduling.
pub fn rollout_set<T, R, F>(
    x_t: &State<T>,
    refs: &[State<T>],
    gain: &SMatrix<T, 3, 6>,
    road: &R,
    limits: &TractionLimits<'_, T>,
    params: &VehicleParams<T>,
    n: usize,
    ts: T,
    cost_fn: F,
) -> CandidateSet<T>
where
    T: Real + Send + Sync,
    R: RoadModel<T> + Sync + ?Sized,
    F: Fn(&Trajectory<T>) -> T + Sync,
{
    let candidates: Vec<Candidate<T>> = refs
        .par_iter()
        .map(|x_ref| {
            match rollout_trajectory(x_t, x_ref, gain, road, limits, params, n, ts) {
                Some(trajectory) => {
                    let cost = cost_fn(&trajectory);
                    Candidate {
                        trajectory,
                        cost,
                        valid: true,
                    }
                }
                None => Candidate {
                    trajectory: Trajectory {
                        states: vec![*x_t],
                        inputs: Vec::new(),
                    },
                    cost: T::from_f64(f64::INFINITY).unwrap(),
                    valid: false,
                },
            }
        })
        .collect();
    CandidateSet { candidates }
}
