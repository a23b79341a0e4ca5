//! Per-node quadratic model of the negated barrier objective.

use nalgebra::{DMatrix, DVector};

use super::{ProblemInstance, SolverError};

/// Controls on layers `0..H` and states on `0..=H`, indexed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

/// Gradient and Hessian blocks at one node, per unit node probability,
/// with the sign of a minimisation. `h` is the node's own contribution to
/// the (maximised) barrier objective.
#[derive(Debug, Clone)]
pub struct NodeBlocks {
    pub q: DVector<f64>,
    pub r: DVector<f64>,
    pub qq: DMatrix<f64>,
    /// `K x N` cross block.
    pub pp: DMatrix<f64>,
    pub rr: DMatrix<f64>,
    pub slack: DVector<f64>,
    pub h: f64,
}

pub fn slacks(inst: &ProblemInstance, t: usize, m: usize, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let (e, f) = &inst.constraints[t];
    e * y + f * u - inst.rhs.get(t, m)
}

/// Expected weighted utility over the children of `(t, m)` under control `u`.
pub fn stage_utility(inst: &ProblemInstance, t: usize, m: usize, u: &DVector<f64>) -> f64 {
    let lat = &inst.lattice;
    let beta = inst.beta[t + 1];
    let sum: f64 = lat
        .children(t, m)
        .map(|c| {
            let x = *inst.prices.get(t + 1, c);
            inst.utility.value(inst.stage_value.value(t + 1, x, u))
        })
        .sum();
    beta * sum / lat.branching() as f64
}

pub fn node_blocks(
    inst: &ProblemInstance,
    t: usize,
    m: usize,
    y: &DVector<f64>,
    u: &DVector<f64>,
    mu: f64,
) -> Result<NodeBlocks, SolverError> {
    let lat = &inst.lattice;
    let (n, k) = (inst.n_controls(), inst.n_states());
    let inv_k = 1.0 / lat.branching() as f64;
    let beta = inst.beta[t + 1];

    let mut r = DVector::zeros(n);
    let mut rr = DMatrix::zeros(n, n);
    let mut util = 0.0;
    for c in lat.children(t, m) {
        let x = *inst.prices.get(t + 1, c);
        let v = inst.stage_value.value(t + 1, x, u);
        if !inst.utility.in_domain(v) {
            return Err(SolverError::Domain {
                t: t + 1,
                node: c,
                value: v,
            });
        }
        let (d1, d2) = (inst.utility.d1(v), inst.utility.d2(v));
        let g = inst.stage_value.gradient(t + 1, x, u);
        r.axpy(-beta * inv_k * d1, &g, 1.0);
        rr.ger(-beta * inv_k * d2, &g, &g, 1.0);
        if let Some(hv) = inst.stage_value.hessian(t + 1, x, u) {
            rr -= hv * (beta * inv_k * d1);
        }
        util += inst.utility.value(v);
    }
    util *= beta * inv_k;

    let slack = slacks(inst, t, m, y, u);
    if let Some(row) = slack.iter().position(|s| !(*s > 0.0)) {
        return Err(SolverError::Interior {
            t,
            node: m,
            row,
            slack: slack[row],
        });
    }
    let (e, f) = &inst.constraints[t];
    let inv = slack.map(|s| 1.0 / s);
    let inv2 = inv.map(|s| mu * s * s);
    r.gemv_tr(-mu, f, &inv, 1.0);
    let q = e.tr_mul(&inv) * (-mu);
    // scale rows by mu / s^2 once and reuse
    let mut de = e.clone();
    let mut df = f.clone();
    for (i, w) in inv2.iter().enumerate() {
        de.row_mut(i).scale_mut(*w);
        df.row_mut(i).scale_mut(*w);
    }
    rr += f.tr_mul(&df);
    let qq = if k > 0 { e.tr_mul(&de) } else { DMatrix::zeros(0, 0) };
    let pp = e.tr_mul(&df);
    let barrier: f64 = slack.iter().map(|s| s.ln()).sum();
    Ok(NodeBlocks {
        q,
        r,
        qq,
        pp,
        rr,
        slack,
        h: util + mu * barrier,
    })
}

/// Blocks at every control node, indexed by node id.
pub fn all_blocks(inst: &ProblemInstance, it: &Iterate, mu: f64) -> Result<Vec<NodeBlocks>, SolverError> {
    let lat = &inst.lattice;
    let mut out = Vec::with_capacity(inst.n_control_nodes());
    for t in 0..inst.horizon() {
        for m in 0..lat.layer_size(t) {
            let id = lat.node_id(t, m);
            out.push(node_blocks(inst, t, m, &it.y[id], &it.u[id], mu)?);
        }
    }
    Ok(out)
}

/// Node states implied by the controls.
pub fn simulate(inst: &ProblemInstance, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let lat = &inst.lattice;
    let mut y = Vec::with_capacity(lat.total_nodes());
    y.push(inst.y0.clone());
    for t in 0..inst.horizon() {
        let (a, b) = &inst.dynamics[t];
        let base = lat.node_id(t, 0);
        let next = lat
            .propagate(t, |p, _| a * &y[base + p] + b * &u[base + p])
            .expect("dynamics dimensions are validated");
        for (c, v) in next.into_iter().enumerate() {
            y.push(v + inst.offsets.get(t + 1, c));
        }
    }
    y
}

/// Constant utility of the control in force before the first stage.
pub fn prior_utility(inst: &ProblemInstance) -> f64 {
    match &inst.u_prev {
        Some(u) => {
            let x = *inst.prices.get(0, 0);
            inst.beta[0] * inst.utility.value(inst.stage_value.value(0, x, u))
        }
        None => 0.0,
    }
}

/// Barrier objective `sum_n P(n) h_n` at an arbitrary `(u, y)` pair; states
/// are not required to satisfy the dynamics. `None` outside the interior
/// or the utility domain.
pub fn barrier_objective_at(inst: &ProblemInstance, it: &Iterate, mu: f64) -> Option<f64> {
    let lat = &inst.lattice;
    let mut total = prior_utility(inst);
    for t in 0..inst.horizon() {
        for m in 0..lat.layer_size(t) {
            let id = lat.node_id(t, m);
            let s = slacks(inst, t, m, &it.y[id], &it.u[id]);
            if s.iter().any(|v| !(*v > 0.0)) {
                return None;
            }
            for c in lat.children(t, m) {
                let v = inst.stage_value.value(t + 1, *inst.prices.get(t + 1, c), &it.u[id]);
                if !inst.utility.in_domain(v) {
                    return None;
                }
            }
            let barrier: f64 = s.iter().map(|v| v.ln()).sum();
            total += lat.probability(t, m) * (stage_utility(inst, t, m, &it.u[id]) + mu * barrier);
        }
    }
    Some(total)
}

/// Barrier objective with states simulated from the controls.
pub fn barrier_objective(inst: &ProblemInstance, u: &[DVector<f64>], mu: f64) -> Option<f64> {
    let y = simulate(inst, u);
    barrier_objective_at(inst, &Iterate { u: u.to_vec(), y }, mu)
}

/// Expected utility without barrier terms.
pub fn utility_objective(inst: &ProblemInstance, u: &[DVector<f64>]) -> f64 {
    let lat = &inst.lattice;
    let mut total = prior_utility(inst);
    for t in 0..inst.horizon() {
        for m in 0..lat.layer_size(t) {
            total += lat.probability(t, m) * stage_utility(inst, t, m, &u[lat.node_id(t, m)]);
        }
    }
    total
}

/// Smallest slack over all control nodes.
pub fn min_slack(inst: &ProblemInstance, it: &Iterate) -> f64 {
    let lat = &inst.lattice;
    let mut best = f64::INFINITY;
    for t in 0..inst.horizon() {
        for m in 0..lat.layer_size(t) {
            let id = lat.node_id(t, m);
            best = best.min(slacks(inst, t, m, &it.y[id], &it.u[id]).min());
        }
    }
    best
}

/// Adjoint of the node dynamics in the maximisation sign:
/// `nu(p) = grad_y h(p) + (1/k) sum_c A^T nu(c)` with `nu = 0` on layer `H`.
/// `nu(n)` is the marginal barrier objective, per unit probability, of an
/// extra unit of state at `n`.
pub fn adjoint(inst: &ProblemInstance, blocks: &[NodeBlocks]) -> Vec<DVector<f64>> {
    let lat = &inst.lattice;
    let k = inst.n_states();
    let inv_k = 1.0 / lat.branching() as f64;
    let mut nu = vec![DVector::zeros(k); lat.total_nodes()];
    for t in (0..inst.horizon()).rev() {
        let (a, _) = &inst.dynamics[t];
        for m in 0..lat.layer_size(t) {
            let id = lat.node_id(t, m);
            let mut mean = DVector::zeros(k);
            for c in lat.children(t, m) {
                mean += &nu[lat.node_id(t + 1, c)];
            }
            nu[id] = a.tr_mul(&mean) * inv_k - &blocks[id].q;
        }
    }
    nu
}

/// Stationarity residual of the barrier problem per control node, per unit
/// probability: `grad_u h(p) + (1/k) sum_c B^T nu(c)`.
pub fn reduced_gradient(inst: &ProblemInstance, blocks: &[NodeBlocks], nu: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let lat = &inst.lattice;
    let inv_k = 1.0 / lat.branching() as f64;
    let mut out = Vec::with_capacity(blocks.len());
    for t in 0..inst.horizon() {
        let (_, b) = &inst.dynamics[t];
        for m in 0..lat.layer_size(t) {
            let id = lat.node_id(t, m);
            let mut mean = DVector::zeros(inst.n_states());
            for c in lat.children(t, m) {
                mean += &nu[lat.node_id(t + 1, c)];
            }
            out.push(b.tr_mul(&mean) * inv_k - &blocks[id].r);
        }
    }
    out
}
