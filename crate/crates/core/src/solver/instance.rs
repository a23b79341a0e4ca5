use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::SolverError;
use crate::lattice::{Lattice, NodeField};
use crate::utility::Utility;

/// Stage wealth `V_t(x, u)` earned at layer `t` from the parent control `u`
/// at the price `x` realised in the child.
pub trait StageValue: Debug + Send + Sync {
    fn value(&self, t: usize, x: f64, u: &DVector<f64>) -> f64;
    fn gradient(&self, t: usize, x: f64, u: &DVector<f64>) -> DVector<f64>;
    /// `None` stands for a zero Hessian.
    fn hessian(&self, t: usize, x: f64, u: &DVector<f64>) -> Option<DMatrix<f64>>;
}

/// `V_t = x * coeffs.u + cash[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRevenue {
    pub coeffs: DVector<f64>,
    /// Exogenous cash per layer, `0..=horizon`.
    pub cash: Vec<f64>,
}

impl LinearRevenue {
    pub fn new(coeffs: DVector<f64>, horizon: usize) -> Self {
        Self {
            coeffs,
            cash: vec![0.0; horizon + 1],
        }
    }
}

impl StageValue for LinearRevenue {
    fn value(&self, t: usize, x: f64, u: &DVector<f64>) -> f64 {
        x * self.coeffs.dot(u) + self.cash[t]
    }

    fn gradient(&self, _t: usize, x: f64, _u: &DVector<f64>) -> DVector<f64> {
        &self.coeffs * x
    }

    fn hessian(&self, _t: usize, _x: f64, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Deterministic equivalent of the stochastic program on lattice nodes.
///
/// Controls live on layers `0..H`, states on `0..=H`. With parent weights
/// `w(p|c)` the node dynamics read
/// `y(c) = sum_p w(p|c) (A_t y(p) + B_t u(p)) + b(c)` and the constraints at
/// layer `t < H` are `E_t y + F_t u - e(n) > 0`.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub lattice: Lattice,
    /// Prices on layers `0..=H`.
    pub prices: NodeField<f64>,
    /// `(A_t, B_t)` for `t = 0..H`.
    pub dynamics: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    /// Offsets `b` on layers `1..=H`.
    pub offsets: NodeField<DVector<f64>>,
    /// `(E_t, F_t)` for `t = 0..H`.
    pub constraints: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    /// Right-hand sides `e` on layers `0..H`.
    pub rhs: NodeField<DVector<f64>>,
    pub stage_value: Arc<dyn StageValue>,
    pub utility: Utility,
    /// `beta[t]` weights the utility earned at layer `t`.
    pub beta: Vec<f64>,
    pub y0: DVector<f64>,
    /// Control in force before the first stage; only adds a constant.
    pub u_prev: Option<DVector<f64>>,
    /// Control box used to pick the starting point.
    pub control_box: Option<(DVector<f64>, DVector<f64>)>,
}

impl ProblemInstance {
    pub fn horizon(&self) -> usize {
        self.lattice.horizon()
    }

    pub fn n_controls(&self) -> usize {
        self.dynamics[0].1.ncols()
    }

    pub fn n_states(&self) -> usize {
        self.y0.len()
    }

    pub fn n_rows(&self) -> usize {
        self.constraints[0].0.nrows()
    }

    /// Number of nodes carrying a control.
    pub fn n_control_nodes(&self) -> usize {
        self.lattice.node_id(self.horizon(), 0)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let h = self.horizon();
        let (n, k) = (self.n_controls(), self.n_states());
        let dim = |what: &str| Err(SolverError::Dimension(what.to_string()));
        if self.dynamics.len() != h || self.constraints.len() != h {
            return dim("one dynamics and constraint block per stage");
        }
        if self.prices.first_layer() != 0 || self.prices.last_layer() != h {
            return dim("prices must cover every layer");
        }
        if self.beta.len() != h + 1 {
            return dim("one weight per layer");
        }
        if let Some(t) = self.beta.iter().position(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(SolverError::Config(format!(
                "weight at layer {t} must be positive, got {}",
                self.beta[t]
            )));
        }
        let l = self.n_rows();
        for (t, ((a, b), (e, f))) in self.dynamics.iter().zip(&self.constraints).enumerate() {
            if a.shape() != (k, k) || b.shape() != (k, n) {
                return dim(&format!("dynamics at stage {t}"));
            }
            if e.shape() != (l, k) || f.shape() != (l, n) {
                return dim(&format!("constraints at stage {t}"));
            }
        }
        if self.offsets.first_layer() != 1 || self.offsets.last_layer() != h {
            return dim("offsets must cover layers 1..=H");
        }
        if self.offsets.iter().any(|(_, _, v)| v.len() != k) {
            return dim("offset vectors");
        }
        if self.rhs.first_layer() != 0 || self.rhs.last_layer() + 1 != h {
            return dim("constraint right-hand sides must cover layers 0..H");
        }
        if self.rhs.iter().any(|(_, _, v)| v.len() != l) {
            return dim("constraint right-hand sides");
        }
        if let Some(u) = &self.u_prev {
            if u.len() != n {
                return dim("previous control");
            }
        }
        if let Some((lo, hi)) = &self.control_box {
            if lo.len() != n || hi.len() != n || lo.iter().zip(hi.iter()).any(|(a, b)| a > b) {
                return dim("control box");
            }
        }
        Ok(())
    }
}
