//! Layerwise damping of the Newton direction.
//!
//! Layers are stepped in time order. At layer `t` the direction splits into
//! the feedback part `G dy`, which answers the state change left by the
//! earlier layers and is applied in full, and the feedforward part. Each
//! node scales its feedforward by a ratio test over its own slacks, then the
//! whole layer is scaled once more so that every later layer stays
//! interior, with later controls following their feedback laws and the
//! states following the closed loop. `eps_t` reports the smallest product.

use nalgebra::DVector;

use super::blocks::slacks;
use super::riccati::RiccatiData;
use super::{ProblemInstance, SolverError};

#[derive(Debug, Clone)]
pub struct DampedStep {
    /// Controls after the step.
    pub u: Vec<DVector<f64>>,
    /// Smallest accepted fraction per layer.
    pub eps: Vec<f64>,
    /// Largest admissible fraction per layer before the safety factor.
    pub eps_bar: Vec<f64>,
}

/// Largest `eps` with `a + eps b > 0` over rows with `b < 0`.
pub fn ratio_test(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    a.iter()
        .zip(b.iter())
        .filter(|(_, bi)| **bi < 0.0)
        .map(|(ai, bi)| ai / -bi)
        .reduce(f64::min)
}

fn is_positive(v: &DVector<f64>) -> bool {
    v.iter().all(|x| *x > 0.0)
}

/// Fraction `min(xi * eps_bar, 1)`.
pub fn damping(eps_bar: f64, xi: f64) -> f64 {
    (xi * eps_bar).min(1.0)
}

pub fn damped_step(
    inst: &ProblemInstance,
    ric: &RiccatiData,
    u: &[DVector<f64>],
    y: &[DVector<f64>],
    xi: f64,
) -> Result<DampedStep, SolverError> {
    let lat = &inst.lattice;
    let h = inst.horizon();
    let k = inst.n_states();
    let mut u_new = u.to_vec();
    let mut eps = Vec::with_capacity(h);
    let mut eps_bar = Vec::with_capacity(h);
    let mut dy = vec![DVector::zeros(k)];

    for t in 0..h {
        let base = lat.node_id(t, 0);
        let (_, f) = &inst.constraints[t];
        let fixed: Vec<DVector<f64>> = (0..lat.layer_size(t))
            .map(|m| &ric.gain[base + m] * &dy[m])
            .collect();

        let mut bound = f64::INFINITY;
        let update = |a: &DVector<f64>, b: &DVector<f64>, layer: usize, m: usize| {
            if let Some(row) = a.iter().position(|s| !(*s > 0.0)) {
                return Err(SolverError::Blocked {
                    t: layer,
                    node: m,
                    row,
                    slack: a[row],
                });
            }
            Ok(ratio_test(a, b).unwrap_or(f64::INFINITY))
        };

        // each node first takes its own fraction of the feedforward
        let mut local = Vec::with_capacity(lat.layer_size(t));
        for m in 0..lat.layer_size(t) {
            let id = base + m;
            let a = slacks(inst, t, m, &(&y[id] + &dy[m]), &(&u[id] + &fixed[m]));
            let b = f * &ric.ff[id];
            let r = update(&a, &b, t, m)?;
            bound = bound.min(r);
            let mut e = damping(r, xi);
            // a slack within a few ulps of zero can still round through it
            let base_u = &u[id] + &fixed[m];
            let state = &y[id] + &dy[m];
            while e > 0.0 && !is_positive(&slacks(inst, t, m, &state, &(&base_u + &ric.ff[id] * e))) {
                e = if e > 1e-30 { e * 0.5 } else { 0.0 };
            }
            local.push(e);
        }
        let ff: Vec<DVector<f64>> = (0..lat.layer_size(t))
            .map(|m| &ric.ff[base + m] * local[m])
            .collect();

        // later layers: states move by c0 + eps c1, controls by G (c0 + eps c1)
        let (at, bt) = &inst.dynamics[t];
        let mut c0 = lat
            .propagate(t, |p, _| at * &dy[p] + bt * &fixed[p])
            .expect("validated");
        let mut c1 = lat.propagate(t, |p, _| bt * &ff[p]).expect("validated");
        let mut later = f64::INFINITY;
        for s in t + 1..h {
            let sb = lat.node_id(s, 0);
            let (es, fs) = &inst.constraints[s];
            let (a_s, b_s) = &inst.dynamics[s];
            let mut n0 = Vec::with_capacity(c0.len());
            let mut n1 = Vec::with_capacity(c1.len());
            for m in 0..lat.layer_size(s) {
                let g = &ric.gain[sb + m];
                let v0 = g * &c0[m];
                let v1 = g * &c1[m];
                let a = slacks(inst, s, m, &(&y[sb + m] + &c0[m]), &(&u[sb + m] + &v0));
                let b = es * &c1[m] + fs * &v1;
                later = later.min(update(&a, &b, s, m)?);
                n0.push(a_s * &c0[m] + b_s * v0);
                n1.push(a_s * &c1[m] + b_s * v1);
            }
            c0 = lat.propagate(s, |p, _| n0[p].clone()).expect("validated");
            c1 = lat.propagate(s, |p, _| n1[p].clone()).expect("validated");
        }

        let scale = damping(later, xi);
        let applied: Vec<DVector<f64>> = (0..lat.layer_size(t))
            .map(|m| &fixed[m] + &ff[m] * scale)
            .collect();
        for (m, d) in applied.iter().enumerate() {
            u_new[base + m] += d;
        }
        dy = lat
            .propagate(t, |p, _| at * &dy[p] + bt * &applied[p])
            .expect("validated");
        let step = local.iter().fold(1.0f64, |acc, e| acc.min(*e)) * scale;
        bound = bound.min(later);
        eps.push(step);
        eps_bar.push(bound);
    }
    Ok(DampedStep {
        u: u_new,
        eps,
        eps_bar,
    })
}
