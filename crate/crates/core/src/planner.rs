//! The planning iteration: shift-and-project repair of the previous
//! solution, sampled candidate generation, initial-guess selection, and
//! one constraint-adaptive SQP step (a single QP per planning tick,
//! warm-started in the spirit of real-time iteration schemes).

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, Vector3, Vector6};
use thiserror::Error;

use crate::constraints::{
    build_state_constraints, project_input, FrictionProfile, LaneBounds, ObstacleDisc,
    StateConstraintParams, StateConstraintSet, TractionLimits, TractionMode, InputPolytope,
};
use crate::qp::{QpProblem, QpSettings, QpSolution, QpSolver, QpStatus, WarmStart};
use crate::real::{real, Real};
use crate::riccati::{lqt_gain, LqtConfig};
use crate::rollout::{rollout_set, rollout_trajectory, sample_references, CandidateSet, SampleConfig};
use crate::track::RoadModel;
use crate::vehicle::{discrete_step, linearize, Input, State, VehicleParams};

/// Paired state and input sequences over the horizon (N+1 states, N
/// inputs). Guess trajectories are dynamically consistent by
/// construction: each state is one forward-Euler step from its
/// predecessor.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<State<T>>,
    pub inputs: Vec<Input<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Largest one-step defect against the planning model; zero for
    /// trajectories produced by forward integration.
    pub fn consistency_error<R, F>(
        &self,
        road: &R,
        mu_at: F,
        params: &VehicleParams<T>,
        ts: T,
    ) -> T
    where
        R: RoadModel<T> + ?Sized,
        F: Fn(T) -> T,
    {
        let mut worst = T::zero();
        for k in 0..self.horizon() {
            let rp = road.road_point(self.states[k].s);
            let mu = mu_at(self.states[k].s);
            if let Ok(next) = discrete_step(&self.states[k], &self.inputs[k], &rp, mu, params, ts)
            {
                let err = (next.to_vector() - self.states[k + 1].to_vector()).amax();
                worst = worst.max(err);
            }
        }
        worst
    }

    /// Longitudinal acceleration implied by the input at step `k`.
    pub fn ax_at(&self, k: usize, theta: T, params: &VehicleParams<T>) -> T {
        let u = &self.inputs[k.min(self.horizon().saturating_sub(1))];
        (u.fxf + u.fxr) / params.m - params.g * theta.sin()
    }
}

/// Planner variants under comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlannerMode<T> {
    /// Constraints follow the friction profile and dynamic loads;
    /// sampling augmentation on.
    TractionAdaptive,
    /// Static constraints from a fixed friction value and zero
    /// longitudinal acceleration; no sampling augmentation.
    NonAdaptive { mu_sta: T },
    /// Static constraints with sampling augmentation.
    SamplingAugmented { mu_sta: T },
    /// Static constraints, no sampling: the plain baseline iteration.
    RtiBaseline { mu_sta: T },
}

impl<T: Real> PlannerMode<T> {
    pub fn uses_sampling(&self) -> bool {
        matches!(
            self,
            PlannerMode::TractionAdaptive | PlannerMode::SamplingAugmented { .. }
        )
    }

    pub fn limits<'a>(
        &self,
        profile: &'a FrictionProfile<T>,
        lambda: T,
        n_facets: usize,
    ) -> TractionLimits<'a, T> {
        let mode = match self {
            PlannerMode::TractionAdaptive => TractionMode::Adaptive(profile),
            PlannerMode::NonAdaptive { mu_sta }
            | PlannerMode::SamplingAugmented { mu_sta }
            | PlannerMode::RtiBaseline { mu_sta } => TractionMode::Static { mu_sta: *mu_sta },
        };
        TractionLimits {
            mode,
            lambda,
            n_facets,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            PlannerMode::TractionAdaptive => "ta",
            PlannerMode::NonAdaptive { .. } => "na",
            PlannerMode::SamplingAugmented { .. } => "sa",
            PlannerMode::RtiBaseline { .. } => "rti",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig<T> {
    pub n: usize,
    pub ts: T,
    /// Stage state weights (progress entry must stay zero: the reference
    /// leaves progress free).
    pub q_diag: Vector6<T>,
    /// Terminal state weights.
    pub qn_diag: Vector6<T>,
    /// Input weights on forces normalized by m*g.
    pub r_diag: Vector3<T>,
    /// Traction utilization factor.
    pub lambda: T,
    pub n_facets: usize,
    pub mode: PlannerMode<T>,
    /// Objective: hold this lateral offset and speed.
    pub d_ref: T,
    pub vx_ref: T,
    pub state_params: StateConstraintParams<T>,
    pub lqt: LqtConfig<T>,
    pub samples: SampleConfig<T>,
    pub qp: QpSettings<T>,
    /// Violation tolerance when screening guess candidates against hard
    /// and obstacle constraints (soft handling leaves small residual
    /// violations on optimized plans).
    pub sel_tolerance: T,
}

impl<T: Real> PlannerConfig<T> {
    pub fn new(mode: PlannerMode<T>, vx_ref: T) -> Self {
        let q_diag = Vector6::new(
            T::zero(),
            real(10.0),
            real(5.0),
            real(0.5),
            real(5.0),
            real(0.5),
        );
        Self {
            n: 40,
            ts: real(0.1),
            q_diag,
            qn_diag: q_diag * real::<T>(10.0),
            r_diag: Vector3::from_element(real(1e-6)),
            lambda: real(0.9),
            n_facets: 16,
            mode,
            d_ref: T::zero(),
            vx_ref,
            state_params: StateConstraintParams::default(),
            lqt: LqtConfig::default(),
            samples: SampleConfig::default(),
            qp: QpSettings {
                polish: false,
                max_iter: 1500,
                ..QpSettings::default()
            },
            sel_tolerance: real(0.2),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n < 2 {
            return Err("horizon must be at least 2 steps".into());
        }
        if !(self.ts > T::zero()) {
            return Err("time step must be positive".into());
        }
        if !(self.lambda > T::zero() && self.lambda <= T::one()) {
            return Err("lambda must lie in (0, 1]".into());
        }
        if self.q_diag[0] != T::zero() || self.qn_diag[0] != T::zero() {
            return Err("progress weight must be zero (reference leaves s free)".into());
        }
        if self.q_diag.iter().any(|w| *w < T::zero())
            || self.qn_diag.iter().any(|w| *w < T::zero())
        {
            return Err("state weights must be nonnegative".into());
        }
        if self.r_diag.iter().any(|w| !(*w > T::zero())) {
            return Err("input weights must be positive".into());
        }
        Ok(())
    }

    fn x_ref(&self) -> Vector6<T> {
        Vector6::new(
            T::zero(),
            self.d_ref,
            T::zero(),
            T::zero(),
            self.vx_ref,
            T::zero(),
        )
    }
}

/// Quadratic trajectory cost on deviations from the configured reference,
/// with force inputs normalized by m*g. Zero exactly when every state
/// matches the reference (progress free) and every input is zero.
pub fn evaluate_cost<T: Real>(
    traj: &Trajectory<T>,
    cfg: &PlannerConfig<T>,
    params: &VehicleParams<T>,
) -> T {
    let x_ref = cfg.x_ref();
    let scale = params.m * params.g;
    let n = traj.horizon();
    let mut cost = T::zero();
    for (k, st) in traj.states.iter().enumerate() {
        let w = if k == n { &cfg.qn_diag } else { &cfg.q_diag };
        let dx = st.to_vector() - x_ref;
        for i in 0..6 {
            cost += w[i] * dx[i] * dx[i];
        }
    }
    for u in &traj.inputs {
        let un = u.to_vector() / scale;
        for i in 0..3 {
            cost += cfg.r_diag[i] * un[i] * un[i];
        }
    }
    cost
}

/// Where the selected initial guess came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuessSource {
    Shifted,
    Sampled(usize),
    /// Zero-force coast, used only when neither a previous solution nor
    /// sampled candidates exist (first tick of non-sampling modes).
    Coast,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Timing {
    pub shift: Duration,
    pub rollout: Duration,
    pub select: Duration,
    pub assemble: Duration,
    pub solve: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone)]
pub struct PlanResult<T> {
    pub trajectory: Trajectory<T>,
    pub cost: T,
    pub source: GuessSource,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    /// Per-step input polytopes the QP enforced (the recorded sets).
    pub polytopes: Vec<InputPolytope<T>>,
    pub timing: Timing,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("planner disengaged: {0}")]
    Disengaged(String),
}

/// Shift the previous solution one step, project every input onto the
/// current per-step polytope (last input duplicated), and re-integrate
/// the states so the guess is dynamically consistent and input-feasible.
pub fn shift_and_ensure_feasibility<T, R>(
    prev: &Trajectory<T>,
    limits: &TractionLimits<'_, T>,
    road: &R,
    params: &VehicleParams<T>,
    n: usize,
    ts: T,
) -> Option<Trajectory<T>>
where
    T: Real,
    R: RoadModel<T> + ?Sized,
{
    if prev.horizon() < n || prev.states.len() < 2 {
        return None;
    }
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n);
    let mut x = prev.states[1];
    states.push(x);
    for k in 0..n {
        let u_cand = prev.inputs[(k + 1).min(n - 1)];
        let rp = road.road_point(x.s);
        let ax = (u_cand.fxf + u_cand.fxr) / params.m - params.g * rp.theta.sin();
        let poly = limits.polytope_for(&x, ax, rp.theta, params);
        let u = Input::from_vector(project_input(u_cand.to_vector(), &poly));
        let mu = limits.mu_at(x.s);
        let next = discrete_step(&x, &u, &rp, mu, params, ts).ok()?;
        if !next.is_finite() || next.vx <= T::zero() {
            return None;
        }
        inputs.push(u);
        states.push(next);
        x = next;
    }
    Some(Trajectory { states, inputs })
}

/// Violation of the selection screen: hard lane rows plus obstacle
/// clearance, summed over the horizon. Zero means the candidate is
/// admissible as an initial guess.
fn selection_violation<T: Real>(
    traj: &Trajectory<T>,
    lane: &LaneBounds<T>,
    obstacles: &[ObstacleDisc<T>],
    params: &StateConstraintParams<T>,
    tol: T,
) -> T {
    let mut total = T::zero();
    for st in &traj.states {
        let lane_v = st.d.abs() - lane.d_hard;
        if lane_v > tol {
            total += lane_v;
        }
        for obs in obstacles {
            let clearance = obs.radius + params.r_margin;
            if (st.s - obs.s).abs() <= clearance {
                let v = clearance - (st.d - obs.d).abs();
                if v > tol {
                    total += v;
                }
            }
        }
    }
    total
}

/// Pick the lowest-cost admissible member of {shifted} union candidates;
/// ties prefer the shifted guess, then the lowest candidate index. If
/// everything violates the screen, fall back to the least-violating
/// member.
pub fn select_initial_guess<T: Real>(
    shifted: Option<(Trajectory<T>, T)>,
    candidates: &CandidateSet<T>,
    lane: &LaneBounds<T>,
    obstacles: &[ObstacleDisc<T>],
    params: &StateConstraintParams<T>,
    sel_tolerance: T,
) -> Option<(Trajectory<T>, GuessSource, T)> {
    struct Entry<T> {
        source: GuessSource,
        cost: T,
        violation: T,
    }
    let mut entries: Vec<(Entry<T>, &Trajectory<T>)> = Vec::new();
    let shifted_stored;
    if let Some((traj, cost)) = shifted {
        shifted_stored = traj;
        let violation =
            selection_violation(&shifted_stored, lane, obstacles, params, sel_tolerance);
        entries.push((
            Entry {
                source: GuessSource::Shifted,
                cost,
                violation,
            },
            &shifted_stored,
        ));
    }
    for (i, cand) in candidates.candidates.iter().enumerate() {
        if !cand.valid {
            continue;
        }
        let violation =
            selection_violation(&cand.trajectory, lane, obstacles, params, sel_tolerance);
        entries.push((
            Entry {
                source: GuessSource::Sampled(i),
                cost: cand.cost,
                violation,
            },
            &cand.trajectory,
        ));
    }
    if entries.is_empty() {
        return None;
    }
    let feasible_exists = entries.iter().any(|(e, _)| e.violation == T::zero());
    let mut best: Option<&(Entry<T>, &Trajectory<T>)> = None;
    for entry in &entries {
        if feasible_exists && entry.0.violation != T::zero() {
            continue;
        }
        let better = match best {
            None => true,
            Some((b, _)) => {
                if feasible_exists {
                    entry.0.cost < b.cost
                } else {
                    entry.0.violation < b.violation
                }
            }
        };
        if better {
            best = Some(entry);
        }
    }
    let (entry, traj) = best?;
    Some(((*traj).clone(), entry.source, entry.cost))
}

/// Mapping from QP variables back to trajectory space.
struct Condensed<T> {
    /// Predicted states with zero input correction (guess plus the drift
    /// from the measured initial state).
    base_states: Vec<Vector6<T>>,
    /// Sensitivity of state k to the stacked normalized input moves.
    m_blocks: Vec<DMatrix<T>>,
    n_inputs: usize,
    n_slack: usize,
}

/// Assemble the condensed QP around a guess trajectory: decision
/// variables are the per-step input moves (normalized by m*g) plus one
/// slack per state row; states are eliminated through the linearized
/// dynamics. Input polytopes become hard rows, every state row is
/// slacked with its quadratic weight.
fn assemble_qp<T: Real>(
    guess: &Trajectory<T>,
    x_t: &State<T>,
    a_mats: &[Matrix6<T>],
    b_mats: &[SMatrix<T, 6, 3>],
    polytopes: &[InputPolytope<T>],
    state_sets: &[StateConstraintSet<T>],
    cfg: &PlannerConfig<T>,
    params: &VehicleParams<T>,
) -> Result<(QpProblem<T>, Condensed<T>), String> {
    let n = cfg.n;
    if guess.horizon() != n
        || a_mats.len() != n
        || b_mats.len() != n
        || polytopes.len() != n
        || state_sets.len() != n
    {
        return Err("assembly dimension mismatch".into());
    }
    let scale = params.m * params.g;
    let n_inputs = 3 * n;
    let n_slack: usize = state_sets.iter().map(|s| s.rows.len()).sum();
    let n_z = n_inputs + n_slack;

    // Forward sensitivities and base prediction.
    let mut m_blocks: Vec<DMatrix<T>> = Vec::with_capacity(n + 1);
    let mut base_states: Vec<Vector6<T>> = Vec::with_capacity(n + 1);
    m_blocks.push(DMatrix::zeros(6, n_inputs));
    let mut delta = x_t.to_vector() - guess.states[0].to_vector();
    base_states.push(guess.states[0].to_vector() + delta);
    for k in 0..n {
        let mut next = DMatrix::zeros(6, n_inputs);
        // next = A_k * M_k, exploiting that M_k only fills 3k columns.
        let filled = 3 * k;
        for j in 0..filled {
            let col = m_blocks[k].column(j);
            for i in 0..6 {
                let mut acc = T::zero();
                for l in 0..6 {
                    acc += a_mats[k][(i, l)] * col[l];
                }
                next[(i, j)] = acc;
            }
        }
        for j in 0..3 {
            for i in 0..6 {
                next[(i, 3 * k + j)] = b_mats[k][(i, j)] * scale;
            }
        }
        m_blocks.push(next);
        delta = a_mats[k] * delta;
        base_states.push(guess.states[k + 1].to_vector() + delta);
    }

    // Cost.
    let x_ref = cfg.x_ref();
    let mut p = DMatrix::<T>::zeros(n_z, n_z);
    let mut q = DVector::<T>::zeros(n_z);
    let two = real::<T>(2.0);
    for k in 1..=n {
        let w = if k == n { &cfg.qn_diag } else { &cfg.q_diag };
        let filled = 3 * k;
        let v = base_states[k] - x_ref;
        for i in 0..6 {
            if w[i] == T::zero() {
                continue;
            }
            let row = m_blocks[k].row(i);
            for a in 0..filled {
                let ra = row[a];
                if ra == T::zero() {
                    continue;
                }
                let wra = two * w[i] * ra;
                for b in 0..filled {
                    p[(a, b)] += wra * row[b];
                }
                q[a] += wra * v[i];
            }
        }
    }
    for k in 0..n {
        let u_hat = guess.inputs[k].to_vector() / scale;
        for j in 0..3 {
            let idx = 3 * k + j;
            p[(idx, idx)] += two * cfg.r_diag[j];
            q[idx] += two * cfg.r_diag[j] * u_hat[j];
        }
    }
    let mut slack_idx = n_inputs;
    for set in state_sets {
        for row in &set.rows {
            p[(slack_idx, slack_idx)] += two * row.weight;
            slack_idx += 1;
        }
    }

    let mut prob = QpProblem::new(p, q).map_err(|e| e.to_string())?;

    // Input rows, normalized by m*g.
    for (k, poly) in polytopes.iter().enumerate() {
        let u_hat = guess.inputs[k].to_vector();
        for (a, h) in poly.rows() {
            let ub = (h - a.dot(&u_hat)) / scale;
            let entries: Vec<(usize, T)> = (0..3)
                .filter(|&j| a[j] != T::zero())
                .map(|j| (3 * k + j, a[j]))
                .collect();
            prob.add_ineq_row(entries, ub).map_err(|e| e.to_string())?;
        }
    }
    // State rows with slack; the set at index k-1 constrains state k.
    let mut slack_idx = n_inputs;
    for (idx, set) in state_sets.iter().enumerate() {
        let k = idx + 1;
        let filled = 3 * k;
        for row in &set.rows {
            let mut entries: Vec<(usize, T)> = Vec::new();
            for a in 0..filled {
                let mut acc = T::zero();
                for i in 0..6 {
                    if row.hx[i] != T::zero() {
                        acc += row.hx[i] * m_blocks[k][(i, a)];
                    }
                }
                if acc != T::zero() {
                    entries.push((a, acc));
                }
            }
            entries.push((slack_idx, -T::one()));
            let ub = row.b - row.hx.dot(&base_states[k]);
            prob.add_ineq_row(entries, ub).map_err(|e| e.to_string())?;
            slack_idx += 1;
        }
    }
    // Slack nonnegativity.
    for j in 0..n_slack {
        prob.add_ineq_row(vec![(n_inputs + j, -T::one())], T::zero())
            .map_err(|e| e.to_string())?;
    }

    Ok((
        prob,
        Condensed {
            base_states,
            m_blocks,
            n_inputs,
            n_slack,
        },
    ))
}

fn extract_plan<T: Real>(
    guess: &Trajectory<T>,
    condensed: &Condensed<T>,
    sol: &QpSolution<T>,
    params: &VehicleParams<T>,
) -> Trajectory<T> {
    let scale = params.m * params.g;
    let n = guess.horizon();
    let z_u = sol.z.rows(0, condensed.n_inputs);
    let mut inputs = Vec::with_capacity(n);
    for k in 0..n {
        let du = Vector3::new(z_u[3 * k], z_u[3 * k + 1], z_u[3 * k + 2]) * scale;
        inputs.push(Input::from_vector(guess.inputs[k].to_vector() + du));
    }
    let mut states = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mut x = condensed.base_states[k];
        let filled = 3 * k.min(n);
        for i in 0..6 {
            let mut acc = T::zero();
            for a in 0..filled {
                acc += condensed.m_blocks[k][(i, a)] * z_u[a];
            }
            x[i] += acc;
        }
        states.push(State::from_vector(x));
    }
    Trajectory { states, inputs }
}

/// Everything the planner needs to know about the world at one tick.
pub struct PlanningScene<'a, T, R: ?Sized> {
    pub road: &'a R,
    pub lane: LaneBounds<T>,
    pub profile: &'a FrictionProfile<T>,
    /// Obstacles already revealed to the planner.
    pub obstacles: &'a [ObstacleDisc<T>],
}

/// Receding-horizon planner instance; owns the previous solution and the
/// dual warm start carried between ticks.
#[derive(Debug, Clone)]
pub struct Planner<T> {
    pub cfg: PlannerConfig<T>,
    pub params: VehicleParams<T>,
    prev: Option<Trajectory<T>>,
    warm_duals: Option<DVector<T>>,
}

impl<T: Real + Send + Sync> Planner<T> {
    pub fn new(cfg: PlannerConfig<T>, params: VehicleParams<T>) -> Self {
        Self {
            cfg,
            params,
            prev: None,
            warm_duals: None,
        }
    }

    pub fn reset(&mut self) {
        self.prev = None;
        self.warm_duals = None;
    }

    /// One full planning iteration at the measured state.
    pub fn plan_step<R>(
        &mut self,
        x_t: &State<T>,
        scene: &PlanningScene<'_, T, R>,
    ) -> Result<PlanResult<T>, PlanError>
    where
        R: RoadModel<T> + Sync + ?Sized,
    {
        let t_total = Instant::now();
        let cfg = &self.cfg;
        let params = &self.params;
        let n = cfg.n;
        if !(x_t.vx > T::zero()) || !x_t.is_finite() {
            return Err(PlanError::Disengaged(format!(
                "state outside validity band (vx = {:?})",
                crate::real::to_f64(x_t.vx)
            )));
        }
        let limits = cfg.mode.limits(scene.profile, cfg.lambda, cfg.n_facets);

        // A. Shift and repair the previous solution.
        let t0 = Instant::now();
        let shifted = self.prev.as_ref().and_then(|prev| {
            shift_and_ensure_feasibility(prev, &limits, scene.road, params, n, cfg.ts)
        });
        let shifted = shifted.map(|traj| {
            let cost = evaluate_cost(&traj, cfg, params);
            (traj, cost)
        });
        let t_shift = t0.elapsed();

        // B. Sampled candidates.
        let t0 = Instant::now();
        let candidates = if cfg.mode.uses_sampling() {
            let rp = scene.road.road_point(x_t.s);
            let mu = limits.mu_at(x_t.s);
            match lqt_gain(x_t, &rp, mu, params, &cfg.lqt, cfg.ts) {
                Ok(gain) => {
                    let refs = sample_references(x_t, &cfg.samples);
                    rollout_set(
                        x_t,
                        &refs,
                        &gain.k,
                        scene.road,
                        &limits,
                        params,
                        n,
                        cfg.ts,
                        |traj| evaluate_cost(traj, cfg, params),
                    )
                }
                Err(_) => CandidateSet::default(),
            }
        } else {
            CandidateSet::default()
        };
        let t_rollout = t0.elapsed();

        // C. Initial guess selection.
        let t0 = Instant::now();
        let selected = select_initial_guess(
            shifted,
            &candidates,
            &scene.lane,
            scene.obstacles,
            &cfg.state_params,
            cfg.sel_tolerance,
        );
        let (guess, source, _) = match selected {
            Some(sel) => sel,
            None => {
                // Nothing available: coast from the measured state.
                let coast = rollout_trajectory(
                    x_t,
                    x_t,
                    &SMatrix::<T, 3, 6>::zeros(),
                    scene.road,
                    &limits,
                    params,
                    n,
                    cfg.ts,
                )
                .ok_or_else(|| {
                    PlanError::Disengaged("no admissible initial guess".into())
                })?;
                (coast, GuessSource::Coast, T::zero())
            }
        };
        let t_select = t0.elapsed();

        // D. Linearize, build constraint sets, assemble and solve the QP.
        let t0 = Instant::now();
        let mut a_mats = Vec::with_capacity(n);
        let mut b_mats = Vec::with_capacity(n);
        let mut polytopes = Vec::with_capacity(n);
        let mut state_sets = Vec::with_capacity(n);
        for k in 0..n {
            let st = &guess.states[k];
            let rp = scene.road.road_point(st.s);
            let mu = limits.mu_at(st.s);
            let (a, b) = linearize(st, &guess.inputs[k], &rp, mu, params, cfg.ts)
                .map_err(|e| PlanError::Disengaged(format!("linearization failed: {e}")))?;
            a_mats.push(a);
            b_mats.push(b);
            let ax = guess.ax_at(k, rp.theta, params);
            polytopes.push(limits.polytope_for(st, ax, rp.theta, params));
            // Rows constrain the state at step k+1.
            let next = &guess.states[k + 1];
            state_sets.push(build_state_constraints(
                next.s,
                next.d,
                &scene.lane,
                scene.obstacles,
                &cfg.state_params,
            ));
        }
        let (prob, condensed) = assemble_qp(
            &guess, x_t, &a_mats, &b_mats, &polytopes, &state_sets, cfg, params,
        )
        .map_err(PlanError::Disengaged)?;
        let t_assemble = t0.elapsed();

        let t0 = Instant::now();
        let solver = QpSolver::new(cfg.qp);
        let warm = match (&self.warm_duals, source) {
            (Some(duals), GuessSource::Shifted) if duals.len() == prob.num_rows() => {
                Some(WarmStart {
                    z: DVector::zeros(prob.num_vars()),
                    duals: duals.clone(),
                })
            }
            _ => None,
        };
        let sol = solver.solve(&prob, warm.as_ref());
        let t_solve = t0.elapsed();

        let trajectory = extract_plan(&guess, &condensed, &sol, params);
        let cost = evaluate_cost(&trajectory, cfg, params);
        self.prev = Some(trajectory.clone());
        self.warm_duals = Some(sol.duals.clone());
        let _ = condensed.n_slack;

        Ok(PlanResult {
            trajectory,
            cost,
            source,
            qp_status: sol.status,
            qp_iterations: sol.iterations,
            polytopes,
            timing: Timing {
                shift: t_shift,
                rollout: t_rollout,
                select: t_select,
                assemble: t_assemble,
                solve: t_solve,
                total: t_total.elapsed(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::TractionMode;
    use crate::track::ConstantRoad;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn truck() -> VehicleParams<f64> {
        VehicleParams::heavy_truck()
    }

    fn centered(vx: f64) -> State<f64> {
        State {
            s: 0.0,
            d: 0.0,
            dpsi: 0.0,
            yaw_rate: 0.0,
            vx,
            vy: 0.0,
        }
    }

    fn scene<'a>(
        road: &'a ConstantRoad<f64>,
        profile: &'a FrictionProfile<f64>,
        obstacles: &'a [ObstacleDisc<f64>],
    ) -> PlanningScene<'a, f64, ConstantRoad<f64>> {
        PlanningScene {
            road,
            lane: LaneBounds {
                half_width: 2.25,
                d_hard: 6.25,
            },
            profile,
            obstacles,
        }
    }

    #[test]
    fn cost_zero_at_reference_and_known_values() {
        let params = truck();
        let cfg = PlannerConfig::new(PlannerMode::TractionAdaptive, 8.0);
        let mk_state = |d: f64| State {
            d,
            ..centered(8.0)
        };
        let traj = Trajectory {
            states: vec![mk_state(0.0); 3],
            inputs: vec![Input::zero(); 2],
        };
        assert_eq!(evaluate_cost(&traj, &cfg, &params), 0.0);

        // Single terminal deviation of 1 m costs exactly the terminal
        // lateral weight.
        let traj = Trajectory {
            states: vec![mk_state(0.0), mk_state(0.0), mk_state(1.0)],
            inputs: vec![Input::zero(); 2],
        };
        assert_relative_eq!(
            evaluate_cost(&traj, &cfg, &params),
            cfg.qn_diag[1],
            max_relative = 1e-12
        );

        // Two-step hand computation with unit weights.
        let mut cfg2 = cfg.clone();
        cfg2.q_diag = Vector6::new(0.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        cfg2.qn_diag = cfg2.q_diag;
        cfg2.r_diag = Vector3::from_element(1.0);
        let scale = params.m * params.g;
        let traj = Trajectory {
            states: vec![mk_state(1.0), mk_state(2.0)],
            inputs: vec![Input {
                fyf: 0.5 * scale,
                fxf: 0.0,
                fxr: 0.0,
            }],
        };
        assert_relative_eq!(
            evaluate_cost(&traj, &cfg2, &params),
            1.0 + 4.0 + 0.25,
            max_relative = 1e-12
        );
    }

    #[test]
    fn shift_is_pure_time_shift_when_nothing_changes() {
        let params = truck();
        let road = ConstantRoad { kappa: 0.0 };
        let profile = FrictionProfile::constant(0.8);
        let limits = TractionLimits {
            mode: TractionMode::Adaptive(&profile),
            lambda: 0.9,
            n_facets: 16,
        };
        // Build a dynamically consistent previous solution by coasting.
        let n = 10;
        let mut states = vec![centered(8.0)];
        let mut inputs = Vec::new();
        for k in 0..n {
            let u = Input {
                fyf: 0.0,
                fxf: -200.0 * k as f64,
                fxr: -100.0,
            };
            let rp = road.road_point(states[k].s);
            let next = discrete_step(&states[k], &u, &rp, 0.8, &params, 0.1).unwrap();
            inputs.push(u);
            states.push(next);
        }
        let prev = Trajectory { states, inputs };
        let shifted =
            shift_and_ensure_feasibility(&prev, &limits, &road, &params, n, 0.1).unwrap();
        // Inputs are the time-shifted previous inputs (projection is the
        // identity here), the last one duplicated.
        for k in 0..n - 1 {
            assert_eq!(shifted.inputs[k], prev.inputs[k + 1]);
        }
        assert_eq!(shifted.inputs[n - 1], prev.inputs[n - 1]);
        for k in 0..n {
            assert_abs_diff_eq!(
                (shifted.states[k].to_vector() - prev.states[k + 1].to_vector()).amax(),
                0.0,
                epsilon = 1e-12
            );
        }
        let err = shifted.consistency_error(&road, |_| 0.8, &params, 0.1);
        assert!(err <= 1e-9);
    }

    #[test]
    fn shift_projects_onto_shrunken_polytopes() {
        let params = truck();
        let road = ConstantRoad { kappa: 0.0 };
        let hi = FrictionProfile::constant(0.8);
        let lo = FrictionProfile::constant(0.3);
        let limits_hi = TractionLimits {
            mode: TractionMode::Adaptive(&hi),
            lambda: 0.9,
            n_facets: 16,
        };
        let limits_lo = TractionLimits {
            mode: TractionMode::Adaptive(&lo),
            lambda: 0.9,
            n_facets: 16,
        };
        let n = 8;
        // Previous solution near the 0.8 limit.
        let mut states = vec![centered(8.0)];
        let mut inputs = Vec::new();
        for k in 0..n {
            let rp = road.road_point(states[k].s);
            let ax = 0.0;
            let poly = limits_hi.polytope_for(&states[k], ax, 0.0, &params);
            let u = Input::from_vector(project_input(
                nalgebra::Vector3::new(0.0, -poly.front_radius(), 0.0),
                &poly,
            ));
            let next = discrete_step(&states[k], &u, &rp, 0.8, &params, 0.1).unwrap();
            inputs.push(u);
            states.push(next);
        }
        let prev = Trajectory { states, inputs };
        let shifted =
            shift_and_ensure_feasibility(&prev, &limits_lo, &road, &params, n, 0.1).unwrap();
        let mut any_changed = false;
        for (k, u) in shifted.inputs.iter().enumerate() {
            let st = &shifted.states[k];
            // Rebuild the step's polytope exactly as the shift did: load
            // transfer estimated from the pre-projection candidate input.
            let cand = prev.inputs[(k + 1).min(n - 1)];
            let ax = (cand.fxf + cand.fxr) / params.m;
            let poly = limits_lo.polytope_for(st, ax, 0.0, &params);
            assert!(poly.max_violation(u.to_vector()) <= 1e-6);
            if (u.to_vector() - cand.to_vector()).amax() > 1.0 {
                any_changed = true;
            }
        }
        assert!(any_changed, "projection should alter saturated inputs");
        // Re-integrated states drift away from the plain time shift once
        // the inputs change.
        let drift = shifted
            .states
            .iter()
            .zip(prev.states.iter().skip(1))
            .map(|(a, b)| (a.to_vector() - b.to_vector()).amax())
            .fold(0.0f64, f64::max);
        assert!(drift > 1e-3, "states should deviate, drift = {drift}");
    }

    #[test]
    fn selection_prefers_shifted_then_lowest_index() {
        let lane = LaneBounds {
            half_width: 2.25,
            d_hard: 6.25,
        };
        let params = StateConstraintParams::default();
        let mk = |d: f64| Trajectory {
            states: vec![State {
                d,
                ..centered(8.0)
            }],
            inputs: vec![],
        };
        let candidates = CandidateSet {
            candidates: vec![
                crate::rollout::Candidate {
                    trajectory: mk(1.0),
                    cost: 5.0,
                    valid: true,
                },
                crate::rollout::Candidate {
                    trajectory: mk(-1.0),
                    cost: 5.0,
                    valid: true,
                },
            ],
        };
        // Equal cost: shifted wins.
        let (_, source, _) = select_initial_guess(
            Some((mk(0.0), 5.0)),
            &candidates,
            &lane,
            &[],
            &params,
            0.2,
        )
        .unwrap();
        assert_eq!(source, GuessSource::Shifted);
        // No shifted: first candidate of equal cost wins.
        let (_, source, _) =
            select_initial_guess(None, &candidates, &lane, &[], &params, 0.2).unwrap();
        assert_eq!(source, GuessSource::Sampled(0));
    }

    #[test]
    fn selection_discards_colliding_shifted_guess() {
        let lane = LaneBounds {
            half_width: 2.25,
            d_hard: 6.25,
        };
        let params = StateConstraintParams::default();
        let obstacle = ObstacleDisc {
            s: 0.0,
            d: 0.0,
            radius: 0.5,
        };
        let mk = |d: f64| Trajectory {
            states: vec![State {
                d,
                ..centered(8.0)
            }],
            inputs: vec![],
        };
        let candidates = CandidateSet {
            candidates: vec![crate::rollout::Candidate {
                trajectory: mk(2.5),
                cost: 50.0,
                valid: true,
            }],
        };
        // Shifted sits on the obstacle; the clear candidate wins despite
        // its higher cost.
        let (_, source, _) = select_initial_guess(
            Some((mk(0.0), 1.0)),
            &candidates,
            &lane,
            &[obstacle],
            &params,
            0.2,
        )
        .unwrap();
        assert_eq!(source, GuessSource::Sampled(0));

        // All violating: least total violation wins.
        let candidates = CandidateSet {
            candidates: vec![crate::rollout::Candidate {
                trajectory: mk(1.5),
                cost: 50.0,
                valid: true,
            }],
        };
        let (_, source, _) = select_initial_guess(
            Some((mk(0.0), 1.0)),
            &candidates,
            &lane,
            &[obstacle],
            &params,
            0.2,
        )
        .unwrap();
        assert_eq!(source, GuessSource::Sampled(0));
    }

    #[test]
    fn qp_variable_count_matches_bookkeeping() {
        let params = truck();
        let road = ConstantRoad { kappa: 0.0 };
        let profile = FrictionProfile::constant(0.8);
        let mut cfg = PlannerConfig::new(PlannerMode::TractionAdaptive, 8.0);
        cfg.n = 5;
        let mut planner = Planner::new(cfg.clone(), params);
        let sc = scene(&road, &profile, &[]);
        let result = planner.plan_step(&centered(8.0), &sc).unwrap();
        assert_eq!(result.trajectory.horizon(), 5);
        assert_eq!(result.polytopes.len(), 5);
        // 6 state rows per step (no obstacles), horizon 5.
        // Variables: 3N inputs + slacks; checked through the planner's
        // internals indirectly: the plan must exist and be feasible.
        assert!(matches!(
            result.qp_status,
            QpStatus::Optimal | QpStatus::MaxIter
        ));
    }

    #[test]
    fn regulation_equilibrium_keeps_near_zero_moves() {
        // On the centerline at the reference speed the QP solution stays
        // near the guess: small forces, centerline held.
        let params = truck();
        let road = ConstantRoad { kappa: 0.0 };
        let profile = FrictionProfile::constant(0.8);
        let cfg = PlannerConfig::new(PlannerMode::TractionAdaptive, 8.0);
        let mut planner = Planner::new(cfg, params);
        let sc = scene(&road, &profile, &[]);
        let result = planner.plan_step(&centered(8.0), &sc).unwrap();
        assert_eq!(result.qp_status, QpStatus::Optimal);
        for st in &result.trajectory.states {
            assert!(st.d.abs() < 1e-3, "d drifted: {}", st.d);
            assert!((st.vx - 8.0).abs() < 1e-2);
        }
        for u in &result.trajectory.inputs {
            assert!(u.to_vector().norm() < 500.0);
        }
    }

    #[test]
    fn planned_inputs_respect_recorded_polytopes() {
        let params = truck();
        let road = ConstantRoad { kappa: 0.0 };
        // Friction drops sharply mid-horizon.
        let profile = FrictionProfile::new(vec![(0.0, 0.8), (15.0, 0.3)]).unwrap();
        let cfg = PlannerConfig::new(PlannerMode::TractionAdaptive, 8.0);
        let scale = params.m * params.g;
        let mut planner = Planner::new(cfg, params.clone());
        let sc = scene(&road, &profile, &[]);
        let mut x = centered(8.0);
        for _ in 0..5 {
            let result = planner.plan_step(&x, &sc).unwrap();
            for (k, u) in result.trajectory.inputs.iter().enumerate() {
                let viol = result.polytopes[k].max_violation(u.to_vector()) / scale;
                assert!(viol <= 1.1e-5, "normalized violation {viol}");
            }
            // Apply the model one step (perfect tracking).
            let rp = road.road_point(x.s);
            let mu = profile.mu_at(x.s);
            x = discrete_step(&x, &result.trajectory.inputs[0], &rp, mu, &params, 0.1).unwrap();
        }
    }

    #[test]
    fn shifted_guess_reused_in_steady_state() {
        let params = truck();
        let road = ConstantRoad { kappa: 0.0 };
        let profile = FrictionProfile::constant(0.8);
        let cfg = PlannerConfig::new(PlannerMode::SamplingAugmented { mu_sta: 0.8 }, 8.0);
        let mut planner = Planner::new(cfg, params.clone());
        let sc = scene(&road, &profile, &[]);
        let mut x = centered(8.0);
        let mut shifted_count = 0;
        let ticks = 30;
        for tick in 0..ticks {
            let result = planner.plan_step(&x, &sc).unwrap();
            if tick > 0 && result.source == GuessSource::Shifted {
                shifted_count += 1;
            }
            let rp = road.road_point(x.s);
            x = discrete_step(&x, &result.trajectory.inputs[0], &rp, 0.8, &params, 0.1).unwrap();
        }
        assert!(
            shifted_count as f64 >= 0.95 * (ticks - 1) as f64,
            "shifted reused only {shifted_count}/{}",
            ticks - 1
        );
    }

    #[test]
    fn receding_horizon_plans_overlap() {
        let params = truck();
        let road = ConstantRoad { kappa: 0.0 };
        let profile = FrictionProfile::constant(0.8);
        let cfg = PlannerConfig::new(PlannerMode::TractionAdaptive, 8.0);
        let mut planner = Planner::new(cfg, params.clone());
        let sc = scene(&road, &profile, &[]);
        let mut x = centered(8.0);
        let mut prev_plan: Option<Trajectory<f64>> = None;
        for tick in 0..10 {
            let result = planner.plan_step(&x, &sc).unwrap();
            if tick >= 5 {
                let prev = prev_plan.as_ref().unwrap();
                // x*_{k|t+1} ~ x*_{k+1|t} after the transient.
                let mut worst: f64 = 0.0;
                for k in 0..result.trajectory.horizon() - 1 {
                    let diff = (result.trajectory.states[k].to_vector()
                        - prev.states[k + 1].to_vector())
                    .amax();
                    worst = worst.max(diff);
                }
                assert!(worst <= 1e-3, "plans diverge by {worst}");
            }
            prev_plan = Some(result.trajectory.clone());
            let rp = road.road_point(x.s);
            x = discrete_step(&x, &result.trajectory.inputs[0], &rp, 0.8, &params, 0.1).unwrap();
        }
    }

    #[test]
    fn determinism_across_identical_runs() {
        let params = truck();
        let road = ConstantRoad { kappa: 0.0 };
        let profile = FrictionProfile::new(vec![(0.0, 0.8), (20.0, 0.3)]).unwrap();
        let run = || {
            let cfg = PlannerConfig::new(PlannerMode::TractionAdaptive, 8.0);
            let mut planner = Planner::new(cfg, params.clone());
            let sc = scene(&road, &profile, &[]);
            let mut x = centered(8.0);
            let mut outputs = Vec::new();
            for _ in 0..8 {
                let result = planner.plan_step(&x, &sc).unwrap();
                outputs.push(result.trajectory.clone());
                let rp = road.road_point(x.s);
                let mu = profile.mu_at(x.s);
                x = discrete_step(&x, &result.trajectory.inputs[0], &rp, mu, &params, 0.1)
                    .unwrap();
            }
            outputs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_step_qp_matches_hand_built_kkt() {
        // N = 1, no constraints active: the condensed QP minimizes
        // (x1 - xr)' Q (x1 - xr) + u' R u with x1 = x0 + Ts f(x0, u).
        let params = truck();
        let road = ConstantRoad { kappa: 0.0 };
        let profile = FrictionProfile::constant(0.8);
        let mut cfg = PlannerConfig::new(PlannerMode::NonAdaptive { mu_sta: 0.8 }, 8.0);
        cfg.n = 2;
        cfg.qp.polish = true;
        cfg.qp.max_iter = 4000;
        // Only weight vx; reference slightly below the current speed so
        // the optimum is interior.
        cfg.q_diag = Vector6::new(0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        cfg.qn_diag = cfg.q_diag;
        cfg.vx_ref = 7.9;
        let mut planner = Planner::new(cfg.clone(), params.clone());
        let sc = scene(&road, &profile, &[]);
        let result = planner.plan_step(&centered(8.0), &sc).unwrap();
        // Hand KKT for the same quadratic: decision is the total braking
        // force f over two steps; each step changes vx by Ts f/m. The
        // stage cost hits x1 and x2, the input cost both steps. With
        // e = vx0 - vref = 0.1:
        //   J = (e + a f1)^2 + (e + a f1 + a f2)^2 + r (f1^2 + f2^2)
        // with a = Ts/m (per newton), r = 1e-6/(m g)^2.
        let a = 0.1 / params.m;
        // The total longitudinal force splits evenly over the two
        // longitudinal components, which halves the effective penalty.
        let r = 0.5 * 1e-6 / (params.m * params.g).powi(2);
        let e = 0.1;
        // d/df1: 2a(e + a f1) + 2a(e + a f1 + a f2) + 2 r f1 = 0
        // d/df2: 2a(e + a f1 + a f2) + 2 r f2 = 0
        let a11 = 4.0 * a * a + 2.0 * r;
        let a12 = 2.0 * a * a;
        let a21 = 2.0 * a * a;
        let a22 = 2.0 * a * a + 2.0 * r;
        let b1 = -4.0 * a * e;
        let b2 = -2.0 * a * e;
        let det = a11 * a22 - a12 * a21;
        let f1 = (b1 * a22 - a12 * b2) / det;
        let f2 = (a11 * b2 - b1 * a21) / det;
        let u0 = result.trajectory.inputs[0];
        let u1 = result.trajectory.inputs[1];
        let total0 = u0.fxf + u0.fxr;
        let total1 = u1.fxf + u1.fxr;
        assert_relative_eq!(total0, f1, max_relative = 1e-3);
        assert_abs_diff_eq!(total1, f2, epsilon = 1e-3 * f1.abs());
    }
}
