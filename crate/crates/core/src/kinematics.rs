//! Discrete state-space trajectories, feasibility validation, and baseline
//! trajectory generators.
//!
//! A plan holds N+1 samples per element. Accelerations at slot N are fixed to
//! zero by convention: the forward recursion only consumes a_0..a_{N-1}.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::channel::{Position2D, ScenarioConfig, Side};
use crate::error::{CtfaError, Result};

pub const DIST_TOL: f64 = 1e-6;
pub const NORM_TOL: f64 = 1e-9;
pub const DYN_TOL: f64 = 1e-9;

pub type Vec2 = [f64; 2];

fn norm2(v: Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Per-slot state of one element.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementTrack {
    pub pos: Vec<Position2D>,
    pub vel: Vec<Vec2>,
    pub acc: Vec<Vec2>,
}

/// Position/velocity/acceleration sequences for one side of the link.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPlan {
    pub side: Side,
    pub elements: Vec<ElementTrack>,
    /// Set when a generator had to fall back or clip (see the generators).
    pub degraded: bool,
}

impl TrajectoryPlan {
    pub fn n_samples(&self) -> usize {
        self.elements.first().map(|e| e.pos.len()).unwrap_or(0)
    }

    pub fn positions_at(&self, slot: usize) -> Vec<Position2D> {
        self.elements.iter().map(|e| e.pos[slot]).collect()
    }

    /// Stationary plan: every element parked at its start position.
    pub fn stationary(side: Side, layout: &[Position2D], n_slots: usize) -> Self {
        let elements = layout
            .iter()
            .map(|&p| propagate(p, [0.0, 0.0], &vec![[0.0, 0.0]; n_slots], 1.0))
            .collect();
        Self {
            side,
            elements,
            degraded: false,
        }
    }
}

/// Exact forward recursion of the discrete state-space model for one element.
///
/// `accelerations` has length N; the returned track has N+1 samples with the
/// final acceleration fixed to zero.
pub fn propagate(
    start_pos: Position2D,
    start_vel: Vec2,
    accelerations: &[Vec2],
    slot_len: f64,
) -> ElementTrack {
    let n = accelerations.len();
    let mut pos = Vec::with_capacity(n + 1);
    let mut vel = Vec::with_capacity(n + 1);
    let mut acc = Vec::with_capacity(n + 1);
    let mut q = start_pos;
    let mut v = start_vel;
    for &a in accelerations {
        pos.push(q);
        vel.push(v);
        acc.push(a);
        q = Position2D::new(
            q.x + v[0] * slot_len + 0.5 * a[0] * slot_len * slot_len,
            q.y + v[1] * slot_len + 0.5 * a[1] * slot_len * slot_len,
        );
        v = [v[0] + a[0] * slot_len, v[1] + a[1] * slot_len];
    }
    pos.push(q);
    vel.push(v);
    acc.push([0.0, 0.0]);
    ElementTrack { pos, vel, acc }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Dynamics,
    Box,
    Velocity,
    Acceleration,
    Separation,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::Dynamics => "dynamics",
            ViolationKind::Box => "box",
            ViolationKind::Velocity => "velocity",
            ViolationKind::Acceleration => "acceleration",
            ViolationKind::Separation => "separation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub element: usize,
    /// Second element for separation violations.
    pub other: Option<usize>,
    pub slot: usize,
    pub magnitude: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} violation at element {} slot {}{}: {:.3e}",
            self.kind,
            self.element,
            self.slot,
            self.other.map(|o| format!(" vs element {o}")).unwrap_or_default(),
            self.magnitude
        )
    }
}

/// Check every plan invariant; an empty report means the plan is feasible.
pub fn validate(plan: &TrajectoryPlan, config: &ScenarioConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let dt = config.slot_len;
    let n_samples = plan.n_samples();
    for (k, e) in plan.elements.iter().enumerate() {
        for n in 0..n_samples.saturating_sub(1) {
            let pv = [
                e.vel[n][0] + e.acc[n][0] * dt - e.vel[n + 1][0],
                e.vel[n][1] + e.acc[n][1] * dt - e.vel[n + 1][1],
            ];
            let pq = [
                e.pos[n].x + e.vel[n][0] * dt + 0.5 * e.acc[n][0] * dt * dt - e.pos[n + 1].x,
                e.pos[n].y + e.vel[n][1] * dt + 0.5 * e.acc[n][1] * dt * dt - e.pos[n + 1].y,
            ];
            let err = norm2(pv).max(norm2(pq));
            if err > DYN_TOL {
                out.push(Violation {
                    kind: ViolationKind::Dynamics,
                    element: k,
                    other: None,
                    slot: n,
                    magnitude: err,
                });
            }
        }
        for n in 0..n_samples {
            let q = e.pos[n];
            let box_excess = (-q.x)
                .max(q.x - config.region_side)
                .max(-q.y)
                .max(q.y - config.region_side);
            if box_excess > NORM_TOL {
                out.push(Violation {
                    kind: ViolationKind::Box,
                    element: k,
                    other: None,
                    slot: n,
                    magnitude: box_excess,
                });
            }
            let vmag = norm2(e.vel[n]);
            if vmag > config.v_max + NORM_TOL {
                out.push(Violation {
                    kind: ViolationKind::Velocity,
                    element: k,
                    other: None,
                    slot: n,
                    magnitude: vmag - config.v_max,
                });
            }
            let amag = norm2(e.acc[n]);
            if amag > config.a_max + NORM_TOL {
                out.push(Violation {
                    kind: ViolationKind::Acceleration,
                    element: k,
                    other: None,
                    slot: n,
                    magnitude: amag - config.a_max,
                });
            }
        }
    }
    for k in 0..plan.elements.len() {
        for j in (k + 1)..plan.elements.len() {
            for n in 0..n_samples {
                let d = plan.elements[k].pos[n].distance(&plan.elements[j].pos[n]);
                if d < config.min_separation - DIST_TOL {
                    out.push(Violation {
                        kind: ViolationKind::Separation,
                        element: k,
                        other: Some(j),
                        slot: n,
                        magnitude: config.min_separation - d,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct SlotDurationReport {
    /// T_c / N
    pub coherence_bound: f64,
    /// lambda / (4 V_max)
    pub displacement_bound: f64,
    /// V_max / a_max
    pub ramp_bound: f64,
    pub ok: bool,
}

pub const SLOT_MARGIN: f64 = 0.5;

/// Check `delta_tau` against the three validity bounds of the discretization.
pub fn slot_duration_check(config: &ScenarioConfig) -> SlotDurationReport {
    let coherence_bound = config.coherence_time / config.n_slots.max(1) as f64;
    let displacement_bound = if config.v_max > 0.0 {
        config.wavelength / (4.0 * config.v_max)
    } else {
        f64::INFINITY
    };
    let ramp_bound = if config.a_max > 0.0 {
        config.v_max / config.a_max
    } else {
        f64::INFINITY
    };
    let min_bound = coherence_bound.min(displacement_bound).min(ramp_bound);
    SlotDurationReport {
        coherence_bound,
        displacement_bound,
        ramp_bound,
        ok: config.slot_len <= SLOT_MARGIN * min_bound,
    }
}

/// Centered grid layout with spacing `max(D, lambda/2)`, row-major.
pub fn initial_upa_layout(count: usize, config: &ScenarioConfig) -> Result<Vec<Position2D>> {
    let spacing = config.min_separation.max(config.wavelength / 2.0);
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let width = (cols - 1) as f64 * spacing;
    let height = (rows - 1) as f64 * spacing;
    if width > config.region_side || height > config.region_side {
        return Err(CtfaError::InfeasibleLayout(format!(
            "{count}-element grid at spacing {spacing} exceeds region side {}",
            config.region_side
        )));
    }
    let x0 = (config.region_side - width) / 2.0;
    let y0 = (config.region_side - height) / 2.0;
    let mut out = Vec::with_capacity(count);
    'outer: for r in 0..rows {
        for c in 0..cols {
            if out.len() == count {
                break 'outer;
            }
            out.push(Position2D::new(x0 + c as f64 * spacing, y0 + r as f64 * spacing));
        }
    }
    Ok(out)
}

/// Random feasible trajectory: UPA start at rest, accelerations drawn in the
/// a_max disc, greedily repaired per slot so the plan always validates.
pub fn random_feasible_trajectory(
    config: &ScenarioConfig,
    side: Side,
    seed: u64,
) -> Result<TrajectoryPlan> {
    let count = match side {
        Side::Tx => config.n_tx,
        Side::Rx => config.n_rx,
    };
    let layout = initial_upa_layout(count, config)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(match side {
        Side::Tx => 101,
        Side::Rx => 102,
    });
    let dt = config.slot_len;
    let n = config.n_slots;

    let mut pos = layout.clone();
    let mut vel = vec![[0.0_f64; 2]; count];
    let mut accs: Vec<Vec<Vec2>> = vec![Vec::with_capacity(n); count];
    let mut degraded = false;

    // Stopping margin: worst-case extra approach before a full brake halts
    // the relative motion.
    let stop_margin = |vk: f64, vj: f64, a_max: f64| -> f64 {
        if a_max == 0.0 {
            return 0.0;
        }
        let vrel = vk + vj;
        vrel * vrel / a_max + vrel * dt
    };

    for _slot in 0..n {
        // Candidate accelerations in the a_max disc.
        let mut cand: Vec<Vec2> = (0..count)
            .map(|_| {
                let r = config.a_max * rng.gen_range(0.0_f64..1.0).sqrt();
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                [r * ang.cos(), r * ang.sin()]
            })
            .collect();

        // Per-element repair: keep velocity and box feasible, else brake.
        for k in 0..count {
            let mut ok = false;
            for scale in [1.0, 0.5, 0.25, 0.0] {
                let a = [cand[k][0] * scale, cand[k][1] * scale];
                let v1 = [vel[k][0] + a[0] * dt, vel[k][1] + a[1] * dt];
                let q1 = Position2D::new(
                    pos[k].x + vel[k][0] * dt + 0.5 * a[0] * dt * dt,
                    pos[k].y + vel[k][1] * dt + 0.5 * a[1] * dt * dt,
                );
                // Keep a box margin large enough to brake to rest inside.
                let margin = if config.a_max > 0.0 {
                    norm2(v1) * norm2(v1) / (2.0 * config.a_max) + norm2(v1) * dt
                } else {
                    0.0
                };
                if norm2(v1) <= config.v_max
                    && q1.x >= margin
                    && q1.x <= config.region_side - margin
                    && q1.y >= margin
                    && q1.y <= config.region_side - margin
                {
                    cand[k] = a;
                    ok = true;
                    break;
                }
            }
            if !ok {
                // Full brake toward rest.
                let brake = if dt > 0.0 && config.a_max > 0.0 {
                    let want = [-vel[k][0] / dt, -vel[k][1] / dt];
                    let m = norm2(want);
                    if m > config.a_max {
                        [want[0] * config.a_max / m, want[1] * config.a_max / m]
                    } else {
                        want
                    }
                } else {
                    [0.0, 0.0]
                };
                cand[k] = brake;
            }
        }

        // Pairwise repair: brake both sides of any pair that would close
        // inside the stopping margin of the separation constraint.
        for _pass in 0..4 {
            let mut adjusted = false;
            for k in 0..count {
                for j in (k + 1)..count {
                    let next = |i: usize, a: Vec2| {
                        Position2D::new(
                            pos[i].x + vel[i][0] * dt + 0.5 * a[0] * dt * dt,
                            pos[i].y + vel[i][1] * dt + 0.5 * a[1] * dt * dt,
                        )
                    };
                    let qk = next(k, cand[k]);
                    let qj = next(j, cand[j]);
                    let vk1 = norm2([vel[k][0] + cand[k][0] * dt, vel[k][1] + cand[k][1] * dt]);
                    let vj1 = norm2([vel[j][0] + cand[j][0] * dt, vel[j][1] + cand[j][1] * dt]);
                    let margin = stop_margin(vk1, vj1, config.a_max);
                    let d_now = pos[k].distance(&pos[j]);
                    let d_next = qk.distance(&qj);
                    // Accept if the pair is not closing, or still has margin.
                    if d_next >= config.min_separation + margin || d_next >= d_now {
                        continue;
                    }
                    for i in [k, j] {
                        let want = [-vel[i][0] / dt, -vel[i][1] / dt];
                        let m = norm2(want);
                        cand[i] = if m > config.a_max && m > 0.0 {
                            [want[0] * config.a_max / m, want[1] * config.a_max / m]
                        } else {
                            want
                        };
                    }
                    adjusted = true;
                }
            }
            if !adjusted {
                break;
            }
        }

        // Commit the slot.
        for k in 0..count {
            let a = cand[k];
            accs[k].push(a);
            let q1 = Position2D::new(
                pos[k].x + vel[k][0] * dt + 0.5 * a[0] * dt * dt,
                pos[k].y + vel[k][1] * dt + 0.5 * a[1] * dt * dt,
            );
            vel[k] = [vel[k][0] + a[0] * dt, vel[k][1] + a[1] * dt];
            pos[k] = q1;
        }
    }

    let mut plan = TrajectoryPlan {
        side,
        elements: layout
            .iter()
            .zip(&accs)
            .map(|(&q0, a)| propagate(q0, [0.0, 0.0], a, dt))
            .collect(),
        degraded: false,
    };
    if !validate(&plan, config).is_empty() {
        // Repair failed; fall back to the stationary plan.
        plan = TrajectoryPlan::stationary(side, &layout, n);
        plan.degraded = true;
        degraded = true;
    }
    plan.degraded = degraded || plan.degraded;
    Ok(plan)
}

/// Constant-velocity straight line per element: one initial acceleration slot
/// of the smallest magnitude producing the cruise velocity, then coasting,
/// with a symmetric braking slot at the end so the element stops at the goal.
///
/// Returns the plan and a flag set when any endpoint had to be pulled toward
/// the start because the caps made it unreachable.
pub fn linear_trajectory(
    start: &[Position2D],
    end: &[Position2D],
    config: &ScenarioConfig,
    side: Side,
) -> Result<TrajectoryPlan> {
    if start.len() != end.len() {
        return Err(CtfaError::DimensionMismatch(
            "linear_trajectory: start/end length mismatch".into(),
        ));
    }
    let dt = config.slot_len;
    let n = config.n_slots;
    let build = |shrink: f64| -> (TrajectoryPlan, bool) {
        let mut clipped = false;
        let mut elements = Vec::with_capacity(start.len());
        for (&q0, &goal) in start.iter().zip(end) {
            let q1 = Position2D::new(
                q0.x + shrink * (goal.x - q0.x),
                q0.y + shrink * (goal.y - q0.y),
            );
            let d = [q1.x - q0.x, q1.y - q0.y];
            let dist = norm2(d);
            let mut accs = vec![[0.0_f64; 2]; n];
            if dist > 0.0 && n >= 1 {
                // One acceleration slot, cruise for the rest:
                // displacement = a dt^2 / 2 + (a dt)(n-1) dt = a dt^2 (n - 1/2).
                let a_req = dist / (dt * dt * (n as f64 - 0.5));
                let v_req = a_req * dt;
                let v_allow = config.v_max.min(config.a_max * dt);
                let scale = if v_req > v_allow {
                    clipped = true;
                    v_allow / v_req
                } else {
                    1.0
                };
                let a = [d[0] / dist * a_req * scale, d[1] / dist * a_req * scale];
                accs[0] = a;
            }
            elements.push(propagate(q0, [0.0, 0.0], &accs, dt));
        }
        let plan = TrajectoryPlan {
            side,
            elements,
            degraded: clipped,
        };
        (plan, clipped)
    };
    // Shrink all displacements by a common factor when the straight
    // segments collide; zero shrink is the feasible start layout.
    for step in 0..=40 {
        let shrink = 1.0 - step as f64 / 40.0;
        let (mut plan, clipped) = build(shrink);
        if validate(&plan, config).is_empty() {
            plan.degraded = clipped || shrink < 1.0;
            return Ok(plan);
        }
    }
    Err(CtfaError::InfeasibleLinearPath(
        "even the stationary start layout fails validation".into(),
    ))
}

/// CSV serialization: one row per (element, slot).
pub fn plan_to_csv(plan: &TrajectoryPlan) -> String {
    let mut out = String::from("element,slot,x,y,vx,vy,ax,ay\n");
    for (k, e) in plan.elements.iter().enumerate() {
        for n in 0..e.pos.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                k, n, e.pos[n].x, e.pos[n].y, e.vel[n][0], e.vel[n][1], e.acc[n][0], e.acc[n][1]
            ));
        }
    }
    out
}

pub fn plan_from_csv(text: &str, side: Side) -> Result<TrajectoryPlan> {
    let mut elements: Vec<ElementTrack> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(CtfaError::Config {
                key: format!("csv line {}", lineno + 1),
                msg: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let parse = |i: usize| -> Result<f64> {
            fields[i].trim().parse().map_err(|_| CtfaError::Config {
                key: format!("csv line {}", lineno + 1),
                msg: format!("bad number '{}'", fields[i]),
            })
        };
        let element: usize = fields[0].trim().parse().map_err(|_| CtfaError::Config {
            key: format!("csv line {}", lineno + 1),
            msg: "bad element index".into(),
        })?;
        while elements.len() <= element {
            elements.push(ElementTrack {
                pos: Vec::new(),
                vel: Vec::new(),
                acc: Vec::new(),
            });
        }
        let e = &mut elements[element];
        e.pos.push(Position2D::new(parse(2)?, parse(3)?));
        e.vel.push([parse(4)?, parse(5)?]);
        e.acc.push([parse(6)?, parse(7)?]);
    }
    Ok(TrajectoryPlan {
        side,
        elements,
        degraded: false,
    })
}
