//! Log-barrier interior-point solver.
//!
//! The solver maximises expected utility plus `mu` times the log of every
//! slack. Each Newton step comes from a backward Riccati sweep over the
//! lattice and is damped layer by layer to stay strictly interior. The outer
//! loop shrinks `mu` geometrically with one Newton step per value, then
//! iterates at fixed `mu` until the step is negligible.

pub mod blocks;
pub mod feasibility;
pub mod initial;
pub mod instance;
pub mod riccati;

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blocks::{Iterate, NodeBlocks};
pub use instance::{LinearRevenue, ProblemInstance, StageValue};

use crate::lattice::NodeField;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid solver input: {0}")]
    Config(String),
    #[error("infeasible instance: {0}")]
    Infeasible(String),
    #[error("phase-one linear program failed: {0}")]
    Lp(String),
    #[error("stage wealth {value} outside the utility domain at layer {t}, node {node}")]
    Domain { t: usize, node: usize, value: f64 },
    #[error("slack {slack:e} of row {row} is not positive at layer {t}, node {node}")]
    Interior {
        t: usize,
        node: usize,
        row: usize,
        slack: f64,
    },
    #[error("search direction blocked by row {row} at layer {t}, node {node} (slack {slack:e})")]
    Blocked {
        t: usize,
        node: usize,
        row: usize,
        slack: f64,
    },
    #[error("reduced Hessian singular after regularisation at layer {t}, node {node}")]
    Singular { t: usize, node: usize },
    #[error("non-finite Newton data at layer {t}, node {node}")]
    NonFinite { t: usize, node: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub mu0: f64,
    pub mu_cp: f64,
    pub max_central_path_newton_steps: usize,
    pub xi: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mu0: 1e-12,
            mu_cp: 1e-16,
            max_central_path_newton_steps: 100,
            xi: 0.95,
            tol: 1e-8,
            floor: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::Config(m.to_string()));
        if !(self.mu_cp > 0.0 && self.mu_cp < self.mu0 && self.mu0.is_finite()) {
            return bad("barrier parameters need 0 < mu_cp < mu0");
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return bad("step fraction xi must lie in (0, 1)");
        }
        if !(self.tol > 0.0) || !(self.floor > 0.0) {
            return bad("tolerance and floor must be positive");
        }
        Ok(())
    }

    /// Barrier parameter of outer iteration `j`.
    pub fn mu(&self, j: usize) -> f64 {
        self.mu0 * (-(j as f64)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// One step per barrier value while `mu >= mu_cp`.
    Path,
    /// Newton iterations at the final barrier value.
    Refine,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Path => "path",
            Phase::Refine => "refine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub mu: f64,
    /// Barrier objective after the step.
    pub objective: f64,
    /// `max |du*|` of the undamped Newton direction.
    pub max_step: f64,
    /// Predicted gain `g.du` of the full Newton step, probability weighted.
    pub decrement: f64,
    pub min_slack: f64,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimalPlan {
    /// Controls on layers `0..H`.
    pub u: NodeField<DVector<f64>>,
    /// States on layers `0..=H`.
    pub y: NodeField<DVector<f64>>,
    /// State multipliers per unit probability on layers `0..=H`.
    pub lambda: NodeField<DVector<f64>>,
    /// Expected utility without barrier terms.
    pub objective: f64,
    pub barrier_objective: f64,
    pub mu: f64,
    pub iterations: usize,
    /// The refine step fell below `tol`, or stalled at rounding level with a
    /// flat objective.
    pub converged: bool,
    /// Largest stationarity residual per unit probability.
    pub kkt_residual: f64,
    /// Iterations where no step kept the barrier objective from falling.
    pub decreases: usize,
    pub log: Vec<IterationRecord>,
    pub seconds: f64,
}

/// Newton direction at an iterate.
pub fn newton_direction(
    inst: &ProblemInstance,
    it: &Iterate,
    mu: f64,
    floor: f64,
) -> Result<(Vec<NodeBlocks>, riccati::RiccatiData, Vec<DVector<f64>>), SolverError> {
    let bl = blocks::all_blocks(inst, it, mu)?;
    let ric = riccati::backward(inst, &bl, floor)?;
    let du = riccati::forward(inst, &ric);
    Ok((bl, ric, du))
}

/// `sum_n P(n) g(n).du(n)` with `g` the reduced gradient.
pub fn newton_decrement(inst: &ProblemInstance, bl: &[NodeBlocks], du: &[DVector<f64>]) -> f64 {
    let lat = &inst.lattice;
    let g = blocks::reduced_gradient(inst, bl, &blocks::adjoint(inst, bl));
    let worst = g.iter().zip(du).zip(bl).map(|((g, d), b)| g.dot(d).abs() / (f64::EPSILON * (1.0 + b.h.abs()))).fold(0.0, f64::max);
    eprintln!("DBG worst {worst:e}");
    g.iter()
        .zip(du)
        .enumerate()
        .map(|(i, (g, d))| {
            let (t, m) = lat.node_at(i);
            lat.probability(t, m) * g.dot(d)
        })
        .sum()
}

fn max_abs(v: &[DVector<f64>]) -> f64 {
    v.iter().map(|x| x.amax()).fold(0.0, f64::max)
}

fn is_interior(inst: &ProblemInstance, it: &Iterate) -> bool {
    blocks::min_slack(inst, it) > 0.0
}

/// Damped step from `it` with interiority and monotonicity safeguards.
/// Returns the new iterate, the layer fractions and whether the barrier
/// objective went down.
///
/// The layerwise damped step is tried first. Node fractions and the full
/// feedback can bend it away from an ascent direction, so if it lowers the
/// barrier objective the undamped direction is scaled uniformly and halved
/// until the objective does not fall.
fn step(
    inst: &ProblemInstance,
    it: &Iterate,
    ric: &riccati::RiccatiData,
    mu: f64,
    phi: f64,
    cfg: &SolverConfig,
) -> Result<(Iterate, Vec<f64>, f64, bool), SolverError> {
    let h = inst.horizon();
    let objective = |x: &Iterate| blocks::barrier_objective_at(inst, x, mu).unwrap_or(f64::NEG_INFINITY);
    let tol = RESOLUTION * (1.0 + phi.abs());
    let along = |dir: &[DVector<f64>], scale: f64| -> Iterate {
        let u: Vec<DVector<f64>> = it.u.iter().zip(dir).map(|(u, d)| u + d * scale).collect();
        let y = blocks::simulate(inst, &u);
        Iterate { u, y }
    };

    match feasibility::damped_step(inst, ric, &it.u, &it.y, cfg.xi) {
        Ok(d) => {
            let next = Iterate {
                y: blocks::simulate(inst, &d.u),
                u: d.u,
            };
            if is_interior(inst, &next) {
                let value = objective(&next);
                if value >= phi - tol {
                    return Ok((next, d.eps, value, false));
                }
            }
        }
        // a slack at floating-point resolution blocks the layerwise test
        Err(SolverError::Blocked { .. }) => {}
        Err(e) => return Err(e),
    }

    let du = riccati::forward(inst, ric);
    let mut scale = 1.0;
    for _ in 0..80 {
        let next = along(&du, scale);
        if is_interior(inst, &next) {
            let value = objective(&next);
            if value >= phi - tol {
                return Ok((next, vec![scale; h], value, false));
            }
        }
        scale *= 0.5;
    }
    Ok((it.clone(), vec![0.0; h], phi, true))
}

/// Relative change of the barrier objective treated as rounding.
const RESOLUTION: f64 = 1e-12;

/// Flat refine iterations without a new smallest step before stopping.
const STALL_LIMIT: usize = 10;

pub fn solve(inst: &ProblemInstance, cfg: &SolverConfig) -> Result<OptimalPlan, SolverError> {
    let start = Instant::now();
    inst.validate()?;
    cfg.validate()?;
    let mut it = initial::initial_point(inst)?;

    let mut log = Vec::new();
    let mut decreases = 0;
    let mut converged = false;
    let mut j = 0;
    let mut refine_steps = 0;
    let mut best_step = f64::INFINITY;
    let mut stalled = 0;
    let mut mu = cfg.mu(0);
    loop {
        let phase = if mu >= cfg.mu_cp { Phase::Path } else { Phase::Refine };
        let (bl, ric, du) = newton_direction(inst, &it, mu, cfg.floor)?;
        let max_step = max_abs(&du);
        let decrement = newton_decrement(inst, &bl, &du);
        let phi = blocks::barrier_objective_at(inst, &it, mu).unwrap_or(f64::NEG_INFINITY);
        // a full Newton step that cannot move the objective above rounding
        let flat = decrement.abs() <= RESOLUTION * (1.0 + phi.abs());
        let (next, eps, value, decreased) = step(inst, &it, &ric, mu, phi, cfg)?;
        it = next;
        if decreased {
            decreases += 1;
        }
        log.push(IterationRecord {
            iteration: log.len(),
            phase,
            mu,
            objective: value,
            max_step,
            decrement,
            min_slack: blocks::min_slack(inst, &it),
            eps,
        });
        match phase {
            Phase::Path => {
                j += 1;
                // the first value below the threshold is kept from here on
                mu = cfg.mu(j);
            }
            Phase::Refine => {
                refine_steps += 1;
                // steps that stop shrinking while the objective is flat
                // are rounding noise on binding state rows
                stalled = if flat && max_step >= best_step { stalled + 1 } else { 0 };
                best_step = best_step.min(max_step);
                if max_step < cfg.tol || stalled >= STALL_LIMIT {
                    converged = true;
                    break;
                }
                if refine_steps >= cfg.max_central_path_newton_steps {
                    break;
                }
            }
        }
    }

    let bl = blocks::all_blocks(inst, &it, mu)?;
    let nu = blocks::adjoint(inst, &bl);
    let residual = blocks::reduced_gradient(inst, &bl, &nu);
    let kkt_residual = max_abs(&residual);
    let barrier_objective = blocks::barrier_objective_at(inst, &it, mu).unwrap_or(f64::NEG_INFINITY);
    let objective = blocks::utility_objective(inst, &it.u);

    let lat = &inst.lattice;
    let h = inst.horizon();
    let u = NodeField::from_fn(lat, 0, h - 1, |t, m| it.u[lat.node_id(t, m)].clone());
    let y = NodeField::from_fn(lat, 0, h, |t, m| it.y[lat.node_id(t, m)].clone());
    let lambda = NodeField::from_fn(lat, 0, h, |t, m| nu[lat.node_id(t, m)].clone());
    Ok(OptimalPlan {
        u,
        y,
        lambda,
        objective,
        barrier_objective,
        mu,
        iterations: log.len(),
        converged,
        kkt_residual,
        decreases,
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}

impl OptimalPlan {
    /// Controls flattened in node-id order.
    pub fn controls(&self) -> Vec<DVector<f64>> {
        self.u.iter().map(|(_, _, v)| v.clone()).collect()
    }
}
