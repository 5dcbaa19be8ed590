//! Solver for the per-element trajectory subproblem: a separable convex
//! quadratic over the slot positions subject to affine dynamics, box
//! position bounds, velocity/acceleration norm balls, and linearized
//! separation half-spaces.
//!
//! The problem is condensed onto the acceleration vector `a_0..a_{N-1}`
//! (positions and velocities are affine in it) and solved with a primal
//! log-barrier interior-point method with dense Newton steps.

use nalgebra::{DMatrix, DVector};

use crate::channel::Position2D;
use crate::error::{CtfaError, Result};
use crate::kinematics::propagate;
use crate::mm_surrogate::{HalfSpace, SurrogateQuadratic};

/// Inward shift of the half-space barriers so warm starts sitting exactly
/// at the minimum distance stay strictly feasible. Within the validation
/// slack for separation (1e-6).
const HALF_SPACE_SHIFT: f64 = 1e-7;
/// Outward shift of the box barriers, within the validation slack (1e-9).
const BOX_SHIFT: f64 = 1e-10;
const MU_INITIAL: f64 = 1.0;
const MU_FACTOR: f64 = 0.2;
const MU_FINAL: f64 = 1e-9;
const MAX_NEWTON_STEPS: usize = 200;

// Temporary diagnostics.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    MaxIter,
    NumericalFailure,
}

/// Condensed convex subproblem for one element over the full horizon.
#[derive(Debug, Clone)]
pub struct TrajectorySubproblem {
    pub n_slots: usize,
    pub slot_len: f64,
    pub start_pos: Position2D,
    pub start_vel: [f64; 2],
    /// Per-sample quadratic coefficient, length N+1 (index 0 is constant
    /// in the decision variables).
    pub curvatures: Vec<f64>,
    /// Per-sample linear coefficient, length N+1.
    pub linears: Vec<[f64; 2]>,
    pub region_side: f64,
    pub v_cap: f64,
    pub a_cap: f64,
    /// Per-sample separation half-spaces, length N+1; index 0 is only
    /// checked against the fixed start position.
    pub half_spaces: Vec<Vec<HalfSpace>>,
}

#[derive(Debug, Clone)]
pub struct SubproblemSolution {
    pub accelerations: Vec<[f64; 2]>,
    pub objective_value: f64,
    pub status: SolverStatus,
    pub kkt_residual: f64,
    pub newton_steps: usize,
}

enum Constraint {
    /// Slack `sum_i c_i x_i + b > 0`, sparse support.
    Linear { c: Vec<(usize, f64)>, b: f64 },
    /// Velocity ball at sample `k`: `u = v0 + dt * (prefix sums of x)`,
    /// slack `cap^2 - |u|^2 > 0`.
    VelBall { k: usize, cap_sq: f64 },
    /// Acceleration ball at slot `k`: `u = (x_{2k}, x_{2k+1})`.
    AccBall { k: usize, cap_sq: f64 },
}

/// Constraint set with the shared dynamics data needed to evaluate the
/// structured ball constraints.
struct ConstraintSet {
    dt: f64,
    v0: [f64; 2],
    n: usize,
    items: Vec<Constraint>,
}

impl ConstraintSet {
    /// Prefix sums over even/odd components: `even[k] = sum_{m<k} x_{2m}`.
    fn prefixes(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut even = vec![0.0; self.n + 1];
        let mut odd = vec![0.0; self.n + 1];
        for k in 0..self.n {
            even[k + 1] = even[k] + x[2 * k];
            odd[k + 1] = odd[k] + x[2 * k + 1];
        }
        (even, odd)
    }

    fn vel_at(&self, k: usize, even: &[f64], odd: &[f64]) -> [f64; 2] {
        [
            self.v0[0] + self.dt * even[k],
            self.v0[1] + self.dt * odd[k],
        ]
    }

    fn slack(&self, con: &Constraint, x: &DVector<f64>, even: &[f64], odd: &[f64]) -> f64 {
        match con {
            Constraint::Linear { c, b } => c.iter().map(|&(i, ci)| ci * x[i]).sum::<f64>() + b,
            Constraint::VelBall { k, cap_sq } => {
                let u = self.vel_at(*k, even, odd);
                cap_sq - u[0] * u[0] - u[1] * u[1]
            }
            Constraint::AccBall { k, cap_sq } => {
                cap_sq - x[2 * k] * x[2 * k] - x[2 * k + 1] * x[2 * k + 1]
            }
        }
    }

    fn all_strictly_feasible(&self, x: &DVector<f64>) -> bool {
        let (even, odd) = self.prefixes(x);
        self.items.iter().all(|c| self.slack(c, x, &even, &odd) > 0.0)
    }

    /// `-mu * sum ln(slack)`, or infinity outside the strict interior.
    fn barrier_sum(&self, x: &DVector<f64>, mu: f64) -> f64 {
        let (even, odd) = self.prefixes(x);
        let mut v = 0.0;
        for con in &self.items {
            let s = self.slack(con, x, &even, &odd);
            if s <= 0.0 {
                return f64::INFINITY;
            }
            v -= mu * s.ln();
        }
        v
    }

    /// Largest `t` keeping `x + t step` feasible for every constraint
    /// (fraction-to-boundary uses a fraction of this).
    fn max_step(
        &self,
        x: &DVector<f64>,
        even: &[f64],
        odd: &[f64],
        step: &DVector<f64>,
        s_even: &[f64],
        s_odd: &[f64],
    ) -> f64 {
        let mut t_max = f64::INFINITY;
        for con in &self.items {
            match con {
                Constraint::Linear { c, b: _ } => {
                    let d: f64 = c.iter().map(|&(i, ci)| ci * step[i]).sum();
                    if d < 0.0 {
                        let s = self.slack(con, x, even, odd);
                        t_max = t_max.min(-s / d);
                    }
                }
                Constraint::VelBall { k, cap_sq } => {
                    let u = self.vel_at(*k, even, odd);
                    let w = [self.dt * s_even[*k], self.dt * s_odd[*k]];
                    t_max = t_max.min(ball_exit(u, w, *cap_sq));
                }
                Constraint::AccBall { k, cap_sq } => {
                    let u = [x[2 * k], x[2 * k + 1]];
                    let w = [step[2 * k], step[2 * k + 1]];
                    t_max = t_max.min(ball_exit(u, w, *cap_sq));
                }
            }
        }
        t_max
    }

    /// Adds the log-barrier gradient and Hessian contributions of every
    /// constraint at `x`.
    fn add_barrier_terms(
        &self,
        x: &DVector<f64>,
        even: &[f64],
        odd: &[f64],
        mu: f64,
        grad: &mut DVector<f64>,
        hess: &mut DMatrix<f64>,
    ) -> bool {
        let dim = 2 * self.n;
        let h = hess.as_mut_slice();
        for con in &self.items {
            let s = self.slack(con, x, even, odd);
            if s <= 0.0 {
                return false;
            }
            match con {
                Constraint::Linear { c, b: _ } => {
                    let w1 = mu / s;
                    let w2 = mu / (s * s);
                    for &(i, ci) in c {
                        grad[i] -= w1 * ci;
                        for &(j, cj) in c {
                            h[j * dim + i] += w2 * ci * cj;
                        }
                    }
                }
                Constraint::VelBall { k, cap_sq: _ } => {
                    let u = self.vel_at(*k, even, odd);
                    let a = 2.0 * mu / s;
                    let c4 = 4.0 * mu / (s * s);
                    let dt = self.dt;
                    let (g0, g1) = (a * dt * u[0], a * dt * u[1]);
                    // M'M block plus the rank-one (M'u)(M'u)' term, both
                    // supported on indices below 2k.
                    let a00 = a * dt * dt + c4 * dt * dt * u[0] * u[0];
                    let a01 = c4 * dt * dt * u[0] * u[1];
                    let a11 = a * dt * dt + c4 * dt * dt * u[1] * u[1];
                    for i in 0..*k {
                        grad[2 * i] += g0;
                        grad[2 * i + 1] += g1;
                        for j in 0..*k {
                            h[(2 * j) * dim + 2 * i] += a00;
                            h[(2 * j + 1) * dim + 2 * i] += a01;
                            h[(2 * j) * dim + 2 * i + 1] += a01;
                            h[(2 * j + 1) * dim + 2 * i + 1] += a11;
                        }
                    }
                }
                Constraint::AccBall { k, cap_sq: _ } => {
                    let u = [x[2 * k], x[2 * k + 1]];
                    let a = 2.0 * mu / s;
                    let c4 = 4.0 * mu / (s * s);
                    grad[2 * k] += a * u[0];
                    grad[2 * k + 1] += a * u[1];
                    h[(2 * k) * dim + 2 * k] += a + c4 * u[0] * u[0];
                    h[(2 * k + 1) * dim + 2 * k] += c4 * u[0] * u[1];
                    h[(2 * k) * dim + 2 * k + 1] += c4 * u[0] * u[1];
                    h[(2 * k + 1) * dim + 2 * k + 1] += a + c4 * u[1] * u[1];
                }
            }
        }
        true
    }
}

/// Positive root of `|u + t w|^2 = cap_sq`, infinity when the ray never
/// leaves the ball.
fn ball_exit(u: [f64; 2], w: [f64; 2], cap_sq: f64) -> f64 {
    let ww = w[0] * w[0] + w[1] * w[1];
    if ww == 0.0 {
        return f64::INFINITY;
    }
    let uw = u[0] * w[0] + u[1] * w[1];
    let s = cap_sq - u[0] * u[0] - u[1] * u[1];
    let disc = uw * uw + ww * s;
    if disc <= 0.0 {
        return f64::INFINITY;
    }
    (-uw + disc.sqrt()) / ww
}

impl TrajectorySubproblem {
    /// Assembles the subproblem from per-sample surrogates and constraint
    /// data. `surrogates` and `half_spaces` have length N+1.
    pub fn build(
        surrogates: &[SurrogateQuadratic],
        start_pos: Position2D,
        start_vel: [f64; 2],
        half_spaces: Vec<Vec<HalfSpace>>,
        slot_len: f64,
        region_side: f64,
        v_cap: f64,
        a_cap: f64,
    ) -> Result<Self> {
        if surrogates.is_empty() || half_spaces.len() != surrogates.len() {
            return Err(CtfaError::DimensionMismatch(
                "subproblem build: surrogate/half-space length mismatch".into(),
            ));
        }
        for hs in &half_spaces[0] {
            if hs.slack(start_pos) < -1e-6 {
                return Err(CtfaError::InfeasibleWarmStart(format!(
                    "start position violates a separation half-space by {:.3e}",
                    -hs.slack(start_pos)
                )));
            }
        }
        Ok(Self {
            n_slots: surrogates.len() - 1,
            slot_len,
            start_pos,
            start_vel,
            curvatures: surrogates.iter().map(|s| s.curvature).collect(),
            linears: surrogates.iter().map(|s| s.linear).collect(),
            region_side,
            v_cap,
            a_cap,
            half_spaces,
        })
    }

    /// Objective evaluated slot-wise through the exact dynamics.
    pub fn objective_of(&self, accelerations: &[[f64; 2]]) -> f64 {
        let track = propagate(self.start_pos, self.start_vel, accelerations, self.slot_len);
        let mut sum = 0.0;
        for n in 0..=self.n_slots {
            let q = track.pos[n];
            sum += 0.5 * self.curvatures[n] * (q.x * q.x + q.y * q.y)
                + self.linears[n][0] * q.x
                + self.linears[n][1] * q.y;
        }
        sum
    }

    /// Position map rows: `q_n = p_base[n] + P[n] x` with x the stacked
    /// accelerations.
    fn position_maps(&self) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let n = self.n_slots;
        let dt = self.slot_len;
        let dim = 2 * n;
        let mut mats = Vec::with_capacity(n + 1);
        let mut bases = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let mut p = DMatrix::zeros(2, dim);
            for m in 0..k {
                let coef = dt * dt * (k as f64 - m as f64 - 0.5);
                p[(0, 2 * m)] = coef;
                p[(1, 2 * m + 1)] = coef;
            }
            mats.push(p);
            bases.push(DVector::from_vec(vec![
                self.start_pos.x + k as f64 * dt * self.start_vel[0],
                self.start_pos.y + k as f64 * dt * self.start_vel[1],
            ]));
        }
        (mats, bases)
    }

    fn constraints(&self, pos_bases: &[DVector<f64>]) -> ConstraintSet {
        let n = self.n_slots;
        let dt = self.slot_len;
        // Position row at sample k: coefficient dt^2 (k - m - 1/2) on a_m.
        let pos_coef = |k: usize, m: usize| dt * dt * (k as f64 - m as f64 - 0.5);
        let mut items = Vec::new();
        for k in 1..=n {
            for axis in 0..2 {
                let row: Vec<(usize, f64)> =
                    (0..k).map(|m| (2 * m + axis, pos_coef(k, m))).collect();
                // q >= -BOX_SHIFT
                items.push(Constraint::Linear {
                    c: row.clone(),
                    b: pos_bases[k][axis] + BOX_SHIFT,
                });
                // q <= A + BOX_SHIFT
                items.push(Constraint::Linear {
                    c: row.iter().map(|&(i, v)| (i, -v)).collect(),
                    b: self.region_side + BOX_SHIFT - pos_bases[k][axis],
                });
            }
            if self.v_cap.is_finite() {
                items.push(Constraint::VelBall {
                    k,
                    cap_sq: self.v_cap * self.v_cap,
                });
            }
            for hs in &self.half_spaces[k] {
                // normal . q_n >= normal . fixed + D - shift
                let mut c = Vec::with_capacity(2 * k);
                for m in 0..k {
                    let coef = pos_coef(k, m);
                    c.push((2 * m, coef * hs.normal[0]));
                    c.push((2 * m + 1, coef * hs.normal[1]));
                }
                let b = hs.normal[0] * pos_bases[k][0] + hs.normal[1] * pos_bases[k][1]
                    - (hs.normal[0] * hs.fixed_point.x + hs.normal[1] * hs.fixed_point.y)
                    - (hs.min_sep - HALF_SPACE_SHIFT);
                items.push(Constraint::Linear { c, b });
            }
        }
        if self.a_cap.is_finite() {
            for k in 0..n {
                items.push(Constraint::AccBall {
                    k,
                    cap_sq: self.a_cap * self.a_cap,
                });
            }
        }
        ConstraintSet {
            dt,
            v0: self.start_vel,
            n,
            items,
        }
    }

    /// Barrier interior-point solve from a feasible warm start.
    pub fn solve(&self, warm_start: &[[f64; 2]]) -> Result<SubproblemSolution> {
        let n = self.n_slots;
        if warm_start.len() != n {
            return Err(CtfaError::DimensionMismatch(format!(
                "solve: warm start has {} slots, subproblem {}",
                warm_start.len(),
                n
            )));
        }
        let warm_objective = self.objective_of(warm_start);

        // Flat objective: nothing to improve.
        let flat = self.curvatures.iter().all(|&c| c == 0.0)
            && self.linears.iter().all(|l| l[0] == 0.0 && l[1] == 0.0);
        if flat || n == 0 {
            return Ok(SubproblemSolution {
                accelerations: warm_start.to_vec(),
                objective_value: warm_objective,
                status: SolverStatus::Optimal,
                kkt_residual: 0.0,
                newton_steps: 0,
            });
        }

        let dim = 2 * n;
        let (pos_maps, pos_bases) = self.position_maps();
        let cons = self.constraints(&pos_bases);

        // Quadratic objective in x: 0.5 x'H0 x + g0'x + f0.
        let mut h0 = DMatrix::zeros(dim, dim);
        let mut g0 = DVector::zeros(dim);
        for k in 0..=n {
            let c = self.curvatures[k];
            let l = DVector::from_vec(vec![self.linears[k][0], self.linears[k][1]]);
            if c != 0.0 {
                h0 += pos_maps[k].transpose() * &pos_maps[k] * c;
            }
            g0 += pos_maps[k].transpose() * (&pos_bases[k] * c + &l);
        }

        let x_warm = DVector::from_iterator(dim, warm_start.iter().flat_map(|a| [a[0], a[1]]));

        // Interiorize by contracting toward the all-zero accelerations
        // (constraints are convex; zero is strictly interior when the fixed
        // start state is).
        let strictly_feasible = |x: &DVector<f64>| cons.all_strictly_feasible(x);
        let mut x = None;
        for s in [1.0, 1.0 - 1e-7, 1.0 - 1e-4, 0.99, 0.9, 0.5, 0.0_f64] {
            let cand = &x_warm * s;
            if strictly_feasible(&cand) {
                x = Some(cand);
                break;
            }
        }
        let mut x = x.ok_or_else(|| {
            CtfaError::InfeasibleWarmStart(
                "no strictly feasible point on the warm-start contraction path".into(),
            )
        })?;

        let objective_grad_scale = {
            let g = &h0 * &x + &g0;
            g.amax().max(1.0)
        };

        let mut status = SolverStatus::Optimal;
        let mut steps_used = 0usize;
        let mut kkt = f64::INFINITY;
        // Balance the barrier against the objective at the warm start: a
        // start near the previous optimum then skips the early centering
        // stages instead of being dragged toward the analytic center.
        let mut mu = {
            let g_obj = &h0 * &x + &g0;
            let mut g_bar = DVector::zeros(dim);
            let mut h_scratch = DMatrix::zeros(dim, dim);
            let (even, odd) = cons.prefixes(&x);
            cons.add_barrier_terms(&x, &even, &odd, 1.0, &mut g_bar, &mut h_scratch);
            let bn = g_bar.norm();
            if bn > 0.0 {
                (0.1 * g_obj.norm() / bn).clamp(1e-3, MU_INITIAL)
            } else {
                MU_INITIAL
            }
        };
        'outer: loop {
            // Newton iterations at fixed barrier weight. Stages that fail to
            // center within their step allowance move on; the descent
            // safeguard below keeps the returned point sound.
            let stage_cap = if mu <= MU_FINAL { 15 } else { 4 };
            let mut stage_steps = 0usize;
            loop {
                if stage_steps >= stage_cap {
                    if mu <= MU_FINAL {
                        status = SolverStatus::MaxIter;
                    }
                    break;
                }
                stage_steps += 1;
                let mut grad = &h0 * &x + &g0;
                let mut hess = h0.clone();
                let (even, odd) = cons.prefixes(&x);
                if !cons.add_barrier_terms(&x, &even, &odd, mu, &mut grad, &mut hess) {
                    status = SolverStatus::NumericalFailure;
                    break 'outer;
                }
                let chol = match hess.clone().cholesky() {
                    Some(c) => c,
                    None => {
                        // Ridge fallback for borderline conditioning.
                        let ridge = 1e-12 * hess.diagonal().amax().max(1.0);
                        match (hess + DMatrix::identity(dim, dim) * ridge).cholesky() {
                            Some(c) => c,
                            None => {
                                status = SolverStatus::NumericalFailure;
                                break 'outer;
                            }
                        }
                    }
                };
                let step = chol.solve(&(-&grad));
                let decrement = -grad.dot(&step);
                // Newton decrement in the local metric, relative to the
                // objective gradient scale.
                kkt = (decrement.max(0.0)).sqrt() / objective_grad_scale;
                // Intermediate stages only follow the path; the final stage
                // polishes to the KKT target.
                let tol = if mu <= MU_FINAL {
                    1e-16 * objective_grad_scale * objective_grad_scale
                } else {
                    mu
                };
                if decrement <= tol {
                    break;
                }
                steps_used += 1;
                if steps_used > MAX_NEWTON_STEPS {
                    status = SolverStatus::MaxIter;
                    break 'outer;
                }
                // Fraction-to-boundary cap keeps the line search inside the
                // strict interior, then Armijo backtracking on the barrier
                // objective.
                let barrier_value = |x: &DVector<f64>| -> f64 {
                    0.5 * (&h0 * x).dot(x) + g0.dot(x) + cons.barrier_sum(x, mu)
                };
                let (s_even, s_odd) = cons.prefixes(&step);
                let t_bound = cons.max_step(&x, &even, &odd, &step, &s_even, &s_odd);
                let f_cur = barrier_value(&x);
                let mut t = (0.99 * t_bound).min(1.0);
                let mut accepted = false;
                for _ in 0..60 {
                    let cand = &x + &step * t;
                    let f_cand = barrier_value(&cand);
                    if f_cand <= f_cur - 0.25 * t * decrement {
                        let moved = t * step.amax();
                        x = cand;
                        accepted = true;
                        // A step this small cannot change the returned
                        // accelerations meaningfully; further centering at
                        // tighter stages would only burn the budget.
                        if moved < 1e-14 * (1.0 + x.amax()) {
                            break 'outer;
                        }
                        break;
                    }
                    t *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            if mu <= MU_FINAL {
                break;
            }
            mu = (mu * MU_FACTOR).max(MU_FINAL * 0.999_999);
        }
        if status == SolverStatus::Optimal && kkt > 1e-7 {
            status = SolverStatus::MaxIter;
        }

        let accelerations: Vec<[f64; 2]> = (0..n).map(|k| [x[2 * k], x[2 * k + 1]]).collect();
        let objective_value = self.objective_of(&accelerations);
        // MM descent safeguard: never return something worse than the
        // warm start.
        if objective_value > warm_objective + 1e-12 || !objective_value.is_finite() {
            return Ok(SubproblemSolution {
                accelerations: warm_start.to_vec(),
                objective_value: warm_objective,
                status,
                kkt_residual: kkt,
                newton_steps: steps_used,
            });
        }
        Ok(SubproblemSolution {
            accelerations,
            objective_value,
            status,
            kkt_residual: kkt,
            newton_steps: steps_used,
        })
    }
}
