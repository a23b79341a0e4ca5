//! Backward Riccati sweep and forward pass for the Newton direction.
//!
//! The recursion is one step deep: the value function of the children,
//! `J(dy) = alpha + w.dy + dy.W.dy / 2`, is averaged over the `k` children
//! and folded into the node's own quadratic model.

use nalgebra::{DMatrix, DVector};

use super::blocks::NodeBlocks;
use super::{ProblemInstance, SolverError};

#[derive(Debug, Clone)]
pub struct RiccatiData {
    /// Feedforward `-R~^-1 r~` per control node.
    pub ff: Vec<DVector<f64>>,
    /// Feedback gain `-R~^-1 P~^T` per control node.
    pub gain: Vec<DMatrix<f64>>,
    /// Value function coefficients per node, zero on the last layer.
    pub alpha: Vec<f64>,
    pub w: Vec<DVector<f64>>,
    pub ww: Vec<DMatrix<f64>>,
    /// Regularised `R~` per control node.
    pub r_tilde: Vec<DMatrix<f64>>,
}

/// Cholesky factor of `r` after flooring its diagonal; escalates a ridge if
/// the floored matrix is still not positive definite.
pub fn regularise(
    r: &mut DMatrix<f64>,
    floor: f64,
    t: usize,
    node: usize,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, SolverError> {
    let norm = r
        .row_iter()
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if !norm.is_finite() {
        return Err(SolverError::NonFinite { t, node });
    }
    // relative to the block so that tiny but well-posed curvature survives
    let level = floor * (1.0 + norm);
    for i in 0..r.nrows() {
        r[(i, i)] = r[(i, i)].max(level);
    }
    if let Some(ch) = r.clone().cholesky() {
        return Ok(ch);
    }
    let mut ridge = level;
    for _ in 0..20 {
        let shifted = &*r + DMatrix::identity(r.nrows(), r.ncols()) * ridge;
        if let Some(ch) = shifted.clone().cholesky() {
            *r = shifted;
            return Ok(ch);
        }
        ridge *= 10.0;
    }
    Err(SolverError::Singular { t, node })
}

pub fn backward(inst: &ProblemInstance, blocks: &[NodeBlocks], floor: f64) -> Result<RiccatiData, SolverError> {
    let lat = &inst.lattice;
    let (n, k) = (inst.n_controls(), inst.n_states());
    let total = lat.total_nodes();
    let controls = inst.n_control_nodes();
    let inv_k = 1.0 / lat.branching() as f64;

    let mut data = RiccatiData {
        ff: vec![DVector::zeros(n); controls],
        gain: vec![DMatrix::zeros(n, k); controls],
        alpha: vec![0.0; total],
        w: vec![DVector::zeros(k); total],
        ww: vec![DMatrix::zeros(k, k); total],
        r_tilde: vec![DMatrix::zeros(n, n); controls],
    };

    for t in (0..inst.horizon()).rev() {
        let (a, b) = &inst.dynamics[t];
        for m in 0..lat.layer_size(t) {
            let id = lat.node_id(t, m);
            let bl = &blocks[id];
            let mut a_bar = 0.0;
            let mut w_bar = DVector::zeros(k);
            let mut ww_bar = DMatrix::zeros(k, k);
            for c in lat.children(t, m) {
                let cid = lat.node_id(t + 1, c);
                a_bar += data.alpha[cid];
                w_bar += &data.w[cid];
                ww_bar += &data.ww[cid];
            }
            a_bar *= inv_k;
            w_bar *= inv_k;
            ww_bar *= inv_k;

            let wa = &ww_bar * a;
            let wb = &ww_bar * b;
            let q_t = &bl.q + a.tr_mul(&w_bar);
            let r_t = &bl.r + b.tr_mul(&w_bar);
            let qq_t = &bl.qq + a.tr_mul(&wa);
            let pp_t = &bl.pp + a.tr_mul(&wb);
            let mut rr_t = &bl.rr + b.tr_mul(&wb);
            rr_t = (&rr_t + rr_t.transpose()) * 0.5;

            let ch = regularise(&mut rr_t, floor, t, m)?;
            let ff = -ch.solve(&r_t);
            let gain = -ch.solve(&pp_t.transpose());
            if ff.iter().chain(gain.iter()).any(|x| !x.is_finite()) {
                return Err(SolverError::NonFinite { t, node: m });
            }
            // r~ R~^-1 r~ = -r~.ff ; P~ R~^-1 P~^T = -P~ gain
            data.alpha[id] = a_bar + 0.5 * r_t.dot(&ff);
            data.w[id] = &q_t + &pp_t * &ff;
            let ww = &qq_t + &pp_t * &gain;
            data.ww[id] = (&ww + ww.transpose()) * 0.5;
            data.ff[id] = ff;
            data.gain[id] = gain;
            data.r_tilde[id] = rr_t;
        }
    }
    Ok(data)
}

/// Undamped Newton direction: `du = ff + G dy` with `dy = 0` at the root and
/// `dy` carried forward by the node dynamics.
pub fn forward(inst: &ProblemInstance, data: &RiccatiData) -> Vec<DVector<f64>> {
    let lat = &inst.lattice;
    let k = inst.n_states();
    let mut du = Vec::with_capacity(inst.n_control_nodes());
    let mut dy = vec![DVector::zeros(k)];
    for t in 0..inst.horizon() {
        let (a, b) = &inst.dynamics[t];
        let base = lat.node_id(t, 0);
        let layer: Vec<DVector<f64>> = (0..lat.layer_size(t))
            .map(|m| &data.ff[base + m] + &data.gain[base + m] * &dy[m])
            .collect();
        dy = lat
            .propagate(t, |p, _| a * &dy[p] + b * &layer[p])
            .expect("dimensions are validated");
        du.extend(layer);
    }
    du
}
