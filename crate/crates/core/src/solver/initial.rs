//! Strictly interior starting point.

use microlp::{ComparisonOp, OptimizationDirection, Problem, Variable};
use nalgebra::DVector;

use super::blocks::{min_slack, simulate, Iterate};
use super::{ProblemInstance, SolverError};

/// Upper cap on the common slack margin of the phase-one program.
const MARGIN_CAP: f64 = 1e6;

/// Box midpoint (zeros without a box) if interior, else the maximiser of the
/// smallest slack over the linear constraints.
pub fn initial_point(inst: &ProblemInstance) -> Result<Iterate, SolverError> {
    let n = inst.n_controls();
    let start = match &inst.control_box {
        Some((lo, hi)) => (lo + hi) * 0.5,
        None => DVector::zeros(n),
    };
    let u = vec![start; inst.n_control_nodes()];
    let y = simulate(inst, &u);
    let it = Iterate { u, y };
    if min_slack(inst, &it) > 0.0 {
        return Ok(it);
    }
    let u = max_margin(inst)?;
    let y = simulate(inst, &u);
    let it = Iterate { u, y };
    let margin = min_slack(inst, &it);
    if margin > 0.0 {
        Ok(it)
    } else {
        Err(SolverError::Infeasible(format!(
            "no strictly interior point (best margin {margin:e})"
        )))
    }
}

fn max_margin(inst: &ProblemInstance) -> Result<Vec<DVector<f64>>, SolverError> {
    let lat = &inst.lattice;
    let (n, k) = (inst.n_controls(), inst.n_states());
    let h = inst.horizon();
    let free = (f64::NEG_INFINITY, f64::INFINITY);

    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let tau = lp.add_var(1.0, (f64::NEG_INFINITY, MARGIN_CAP));
    let uvars: Vec<Vec<Variable>> = (0..inst.n_control_nodes())
        .map(|_| (0..n).map(|_| lp.add_var(0.0, free)).collect())
        .collect();
    // states on layers 1..H-1; the root is fixed and layer H is unconstrained
    let mut yvars: Vec<Vec<Variable>> = vec![Vec::new()];
    for _ in 1..lat.node_id(h, 0) {
        yvars.push((0..k).map(|_| lp.add_var(0.0, free)).collect());
    }

    for t in 0..h.saturating_sub(1) {
        let (a, b) = &inst.dynamics[t];
        for c in 0..lat.layer_size(t + 1) {
            let cid = lat.node_id(t + 1, c);
            for i in 0..k {
                let mut expr: Vec<(Variable, f64)> = vec![(yvars[cid][i], 1.0)];
                let mut rhs = inst.offsets.get(t + 1, c)[i];
                for (p, w) in lat.parent_weights(t + 1, c) {
                    let pid = lat.node_id(t, p);
                    for j in 0..k {
                        if a[(i, j)] != 0.0 {
                            if pid == 0 {
                                rhs += w * a[(i, j)] * inst.y0[j];
                            } else {
                                expr.push((yvars[pid][j], -w * a[(i, j)]));
                            }
                        }
                    }
                    for j in 0..n {
                        if b[(i, j)] != 0.0 {
                            expr.push((uvars[pid][j], -w * b[(i, j)]));
                        }
                    }
                }
                lp.add_constraint(expr.as_slice(), ComparisonOp::Eq, rhs);
            }
        }
    }

    for t in 0..h {
        let (e, f) = &inst.constraints[t];
        for m in 0..lat.layer_size(t) {
            let id = lat.node_id(t, m);
            let rhs_vec = inst.rhs.get(t, m);
            for row in 0..e.nrows() {
                let mut expr: Vec<(Variable, f64)> = vec![(tau, -1.0)];
                let mut rhs = rhs_vec[row];
                for j in 0..k {
                    if e[(row, j)] != 0.0 {
                        if id == 0 {
                            rhs -= e[(row, j)] * inst.y0[j];
                        } else {
                            expr.push((yvars[id][j], e[(row, j)]));
                        }
                    }
                }
                for j in 0..n {
                    if f[(row, j)] != 0.0 {
                        expr.push((uvars[id][j], f[(row, j)]));
                    }
                }
                lp.add_constraint(expr.as_slice(), ComparisonOp::Ge, rhs);
            }
        }
    }

    let solution = match lp.solve() {
        Ok(outcome) => outcome
            .into_solution()
            .map_err(|_| SolverError::Lp("phase-one program interrupted".into()))?,
        Err(microlp::Error::Infeasible) => {
            return Err(SolverError::Infeasible("constraints admit no solution".into()))
        }
        Err(e) => return Err(SolverError::Lp(format!("{e:?}"))),
    };
    let margin = solution.var_value(tau);
    if !(margin > 0.0) {
        return Err(SolverError::Infeasible(format!(
            "constraints have empty interior (largest common slack {margin:e})"
        )));
    }
    Ok(uvars
        .iter()
        .map(|vars| DVector::from_iterator(n, vars.iter().map(|v| solution.var_value(*v))))
        .collect())
}
