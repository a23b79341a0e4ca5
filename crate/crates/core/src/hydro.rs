//! Hydro storage dispatch: problem assembly and water values.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::NodeField;
use crate::solver::{LinearRevenue, OptimalPlan, ProblemInstance, SolverError};
use crate::utility::{Utility, UtilityError};

#[derive(Debug, Error, PartialEq)]
pub enum HydroError {
    #[error("invalid hydro system: {0}")]
    Invalid(String),
    #[error("statically infeasible: {0}")]
    Infeasible(String),
    #[error("utility domain: {0}")]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("water value outside the utility domain at layer {t}, node {node}: {source}")]
    WaterValue {
        t: usize,
        node: usize,
        source: UtilityError,
    },
}

/// Turbine (positive) or pump (negative) energy per hour, MWh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turbine {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Basin {
    #[serde(default)]
    pub name: Option<String>,
    /// Initial level, MWh.
    pub initial: f64,
    pub min: f64,
    pub max: f64,
    /// Inflow per hour for layers `1..=H`, MWh; empty means none.
    #[serde(default)]
    pub inflow: Vec<f64>,
    pub turbines: Vec<Turbine>,
}

/// Exogenous spot position: per layer `0..=H` sold and bought quantities,
/// MWh, and the spot price, EUR/MWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpotSchedule {
    pub sell: Vec<f64>,
    pub buy: Vec<f64>,
    pub price: Vec<f64>,
}

impl SpotSchedule {
    /// Cash per layer.
    pub fn cash(&self) -> Vec<f64> {
        self.sell
            .iter()
            .zip(&self.buy)
            .zip(&self.price)
            .map(|((s, b), p)| (s - b) * p)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HydroSystem {
    pub basins: Vec<Basin>,
    pub spot: Option<SpotSchedule>,
    /// Per-node inflow vectors on layers `1..=H`, replacing the tables.
    pub inflow_field: Option<NodeField<DVector<f64>>>,
}

impl HydroSystem {
    pub fn n_turbines(&self) -> usize {
        self.basins.iter().map(|b| b.turbines.len()).sum()
    }

    /// Basin of every turbine in control order.
    pub fn turbine_basins(&self) -> Vec<usize> {
        self.basins
            .iter()
            .enumerate()
            .flat_map(|(b, basin)| std::iter::repeat_n(b, basin.turbines.len()))
            .collect()
    }

    pub fn turbines(&self) -> Vec<Turbine> {
        self.basins.iter().flat_map(|b| b.turbines.iter().copied()).collect()
    }

    /// `B x N` matrix summing turbines into their basin.
    pub fn aggregation(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.basins.len(), self.n_turbines());
        for (j, b) in self.turbine_basins().into_iter().enumerate() {
            g[(b, j)] = 1.0;
        }
        g
    }

    /// Deterministic inflow of basin `b` arriving at layer `t >= 1`.
    pub fn inflow(&self, b: usize, t: usize) -> f64 {
        let table = &self.basins[b].inflow;
        if table.is_empty() {
            0.0
        } else {
            table[t - 1]
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<(), HydroError> {
        let bad = |m: String| Err(HydroError::Invalid(m));
        if self.basins.is_empty() {
            return bad("at least one basin is required".into());
        }
        for (i, b) in self.basins.iter().enumerate() {
            let vals = [b.initial, b.min, b.max];
            if vals.iter().any(|v| !v.is_finite()) {
                return bad(format!("basin {i} has non-finite levels"));
            }
            if !(b.min < b.max) {
                return bad(format!("basin {i} needs min < max"));
            }
            if b.initial < b.min || b.initial > b.max {
                return bad(format!("basin {i} initial level {} outside [{}, {}]", b.initial, b.min, b.max));
            }
            if !b.inflow.is_empty() && b.inflow.len() != horizon {
                return bad(format!(
                    "basin {i} inflow table has {} entries, need {horizon}",
                    b.inflow.len()
                ));
            }
            if b.turbines.is_empty() {
                return bad(format!("basin {i} has no turbine"));
            }
            for (j, tb) in b.turbines.iter().enumerate() {
                if !(tb.min.is_finite() && tb.max.is_finite() && tb.min <= tb.max) {
                    return bad(format!("turbine {j} of basin {i} needs finite min <= max"));
                }
            }
        }
        if let Some(s) = &self.spot {
            let n = horizon + 1;
            if s.sell.len() != n || s.buy.len() != n || s.price.len() != n {
                return bad(format!("spot schedule needs {n} entries per series"));
            }
        }
        if let Some(f) = &self.inflow_field {
            if f.first_layer() != 1 || f.last_layer() != horizon {
                return bad("inflow field must cover layers 1..=H".into());
            }
            if f.iter().any(|(_, _, v)| v.len() != self.basins.len()) {
                return bad("inflow field vectors need one entry per basin".into());
            }
        }
        Ok(())
    }

    /// Interval scan of reachable levels; rejects systems whose basin bounds
    /// cannot be kept with a strictly interior margin.
    pub fn presolve(&self, horizon: usize) -> Result<(), HydroError> {
        for (i, b) in self.basins.iter().enumerate() {
            let umin: f64 = b.turbines.iter().map(|t| t.min).sum();
            let umax: f64 = b.turbines.iter().map(|t| t.max).sum();
            if b.turbines.iter().any(|t| !(t.min < t.max)) {
                return Err(HydroError::Infeasible(format!("basin {i} has a turbine with an empty box interior")));
            }
            let (mut lo, mut hi) = (b.initial, b.initial);
            for t in 1..=horizon {
                let (ilo, ihi) = self.inflow_range(i, t);
                let next_lo = (lo - umax + ilo).max(b.min);
                let next_hi = (hi - umin + ihi).min(b.max);
                if !(next_lo < next_hi) {
                    return Err(HydroError::Infeasible(format!(
                        "basin {i} cannot stay within [{}, {}] at layer {t}",
                        b.min, b.max
                    )));
                }
                lo = next_lo;
                hi = next_hi;
            }
        }
        Ok(())
    }

    fn inflow_range(&self, b: usize, t: usize) -> (f64, f64) {
        match &self.inflow_field {
            Some(f) => f
                .layer(t)
                .iter()
                .map(|v| v[b])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), x| (a.min(x), c.max(x))),
            None => {
                let v = self.inflow(b, t);
                (v, v)
            }
        }
    }
}

/// Builds the dispatch problem. Controls are turbines in basin order,
/// states are basin levels. Rows per node: turbine lower and upper bounds,
/// then basin lower and upper bounds on the expected next level.
pub fn assemble(
    system: &HydroSystem,
    lattice: &crate::lattice::Lattice,
    prices: &NodeField<f64>,
    utility: Utility,
    beta: Option<Vec<f64>>,
) -> Result<ProblemInstance, HydroError> {
    let h = lattice.horizon();
    system.validate(h)?;
    if prices.first_layer() != 0 || prices.last_layer() != h {
        return Err(HydroError::Invalid("prices must cover every lattice layer".into()));
    }
    system.presolve(h)?;

    let nb = system.basins.len();
    let n = system.n_turbines();
    let g = system.aggregation();
    let turbines = system.turbines();
    let umin = DVector::from_iterator(n, turbines.iter().map(|t| t.min));
    let umax = DVector::from_iterator(n, turbines.iter().map(|t| t.max));
    let ymin = DVector::from_iterator(nb, system.basins.iter().map(|b| b.min));
    let ymax = DVector::from_iterator(nb, system.basins.iter().map(|b| b.max));

    let l = 2 * n + 2 * nb;
    let mut e = DMatrix::zeros(l, nb);
    let mut f = DMatrix::zeros(l, n);
    for j in 0..n {
        f[(j, j)] = 1.0;
        f[(n + j, j)] = -1.0;
    }
    for b in 0..nb {
        e[(2 * n + b, b)] = 1.0;
        e[(2 * n + nb + b, b)] = -1.0;
        for j in 0..n {
            f[(2 * n + b, j)] = -g[(b, j)];
            f[(2 * n + nb + b, j)] = g[(b, j)];
        }
    }

    let offsets = match &system.inflow_field {
        Some(field) => field.clone(),
        None => NodeField::from_fn(lattice, 1, h, |t, _| {
            DVector::from_iterator(nb, (0..nb).map(|b| system.inflow(b, t)))
        }),
    };
    let rhs = NodeField::from_fn(lattice, 0, h - 1, |t, m| {
        // expected inflow over the children
        let mut inflow = DVector::zeros(nb);
        let children = lattice.children(t, m);
        let kk = children.len() as f64;
        for c in children {
            inflow += offsets.get(t + 1, c);
        }
        inflow /= kk;
        let mut v = DVector::zeros(l);
        v.rows_mut(0, n).copy_from(&umin);
        v.rows_mut(n, n).copy_from(&(-&umax));
        v.rows_mut(2 * n, nb).copy_from(&(&ymin - &inflow));
        v.rows_mut(2 * n + nb, nb).copy_from(&(&inflow - &ymax));
        v
    });

    let mut revenue = LinearRevenue::new(DVector::from_element(n, 1.0), h);
    if let Some(spot) = &system.spot {
        revenue.cash = spot.cash();
    }

    // stage wealth at the worst box corner must lie in the utility's domain
    for t in 1..=h {
        for (m, &x) in prices.layer(t).iter().enumerate() {
            let corner = if x >= 0.0 { &umin } else { &umax };
            let v = x * corner.sum() + revenue.cash[t];
            if !utility.in_closed_domain(v) {
                return Err(HydroError::Invalid(format!(
                    "stage wealth {v} at layer {t}, node {m} leaves the {} utility domain; set a domain shift",
                    utility.name()
                )));
            }
        }
    }

    let beta = beta.unwrap_or_else(|| vec![1.0; h + 1]);
    let a = DMatrix::identity(nb, nb);
    let bmat = -&g;
    let inst = ProblemInstance {
        lattice: lattice.clone(),
        prices: prices.clone(),
        dynamics: vec![(a, bmat); h],
        offsets,
        constraints: vec![(e, f); h],
        rhs,
        stage_value: Arc::new(revenue),
        utility,
        beta,
        y0: DVector::from_iterator(nb, system.basins.iter().map(|b| b.initial)),
        u_prev: None,
        control_box: Some((umin, umax)),
    };
    inst.validate()?;
    Ok(inst)
}

/// Stochastic water values per node and their certainty equivalents per
/// layer, shared by all basins.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterValues {
    /// `gp` on layers `1..=H`, EUR/MWh.
    pub gp: NodeField<f64>,
    /// Certainty equivalent per layer `1..=H`.
    pub certainty: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl WaterValues {
    /// Deterministic curve for layer `t >= 1`.
    pub fn curve(&self, t: usize) -> f64 {
        self.certainty[t - 1]
    }
}

/// `gp(n) = sum_p w(p|n) X(n) U'(V(X(n), u(p)))` and
/// `GP_t = U^-1(sum_n P(n) U(gp(n)))`.
pub fn water_values(inst: &ProblemInstance, plan: &OptimalPlan) -> Result<WaterValues, HydroError> {
    let lat = &inst.lattice;
    let h = inst.horizon();
    let util = &inst.utility;
    let mut layers = Vec::with_capacity(h);
    for t in 1..=h {
        let mut layer = Vec::with_capacity(lat.layer_size(t));
        for n in 0..lat.layer_size(t) {
            let x = *inst.prices.get(t, n);
            let mut gp = 0.0;
            for (p, w) in lat.parent_weights(t, n) {
                let v = inst.stage_value.value(t, x, plan.u.get(t - 1, p));
                util.check(v).map_err(|source| HydroError::WaterValue { t, node: n, source })?;
                gp += w * x * util.d1(v);
            }
            layer.push(gp);
        }
        layers.push(layer);
    }
    let gp = NodeField::from_layers(lat, 1, layers)
        .expect("shapes follow the lattice")
        .with_unit("EUR/MWh");
    let mut certainty = Vec::with_capacity(h);
    let (mut mean, mut min, mut max) = (Vec::new(), Vec::new(), Vec::new());
    for t in 1..=h {
        let vals = gp.layer(t);
        let probs = lat.layer_probabilities(t);
        let ce = util
            .certainty_equivalent(probs, vals)
            .map_err(|source| HydroError::WaterValue { t, node: 0, source })?;
        certainty.push(ce);
        mean.push(lat.layer_mean(t, vals));
        min.push(vals.iter().copied().fold(f64::INFINITY, f64::min));
        max.push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(WaterValues {
        gp,
        certainty,
        mean,
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Lattice;
    use crate::processes::{fill_prices, sample_drivers, DriverScheme, PriceModel};

    fn single(initial: f64, min: f64, max: f64, umax: f64) -> HydroSystem {
        HydroSystem {
            basins: vec![Basin {
                name: None,
                initial,
                min,
                max,
                inflow: vec![],
                turbines: vec![Turbine { min: 0.0, max: umax }],
            }],
            spot: None,
            inflow_field: None,
        }
    }

    fn prices(k: usize, h: usize) -> (Lattice, NodeField<f64>) {
        let lat = Lattice::new(k, h).unwrap();
        let d = sample_drivers(&lat, DriverScheme::Quantile, 0);
        let x = fill_prices(&lat, &PriceModel::Gbm { x0: 37.4, sigma: 0.2 }, &d).unwrap();
        (lat, x)
    }

    #[test]
    fn single_basin_dimensions() {
        let (lat, x) = prices(2, 3);
        let inst = assemble(&single(100.0, 40.0, 200.0, 10.0), &lat, &x, Utility::linear(), None).unwrap();
        assert_eq!(inst.n_states(), 1);
        assert_eq!(inst.n_controls(), 1);
        assert_eq!(inst.n_rows(), 4);
        assert_eq!(inst.beta, vec![1.0; 4]);
    }

    #[test]
    fn zero_spot_gives_pure_revenue() {
        let (lat, x) = prices(2, 2);
        let inst = assemble(&single(100.0, 40.0, 200.0, 10.0), &lat, &x, Utility::linear(), None).unwrap();
        let u = DVector::from_element(1, 3.0);
        assert_eq!(inst.stage_value.value(1, 40.0, &u), 120.0);
    }

    #[test]
    fn presolve_detects_overflow() {
        let mut sys = single(190.0, 40.0, 200.0, 1.0);
        sys.basins[0].inflow = vec![50.0; 3];
        let (lat, x) = prices(2, 3);
        let err = assemble(&sys, &lat, &x, Utility::linear(), None).unwrap_err();
        assert!(matches!(err, HydroError::Infeasible(_)), "{err}");
    }

    #[test]
    fn rejects_log_utility_at_zero_wealth() {
        let (lat, x) = prices(2, 2);
        let sys = single(100.0, 40.0, 200.0, 10.0);
        let err = assemble(&sys, &lat, &x, Utility::logarithmic(0.0).unwrap(), None).unwrap_err();
        assert!(matches!(err, HydroError::Invalid(_)));
        assert!(assemble(&sys, &lat, &x, Utility::logarithmic(1.0).unwrap(), None).is_ok());
    }

    #[test]
    fn rejects_bad_levels() {
        let (lat, x) = prices(2, 2);
        let err = assemble(&single(10.0, 40.0, 200.0, 10.0), &lat, &x, Utility::linear(), None).unwrap_err();
        assert!(matches!(err, HydroError::Invalid(_)));
    }

    #[test]
    fn two_basins_aggregate_turbines() {
        let sys = HydroSystem {
            basins: vec![
                Basin {
                    name: Some("upper".into()),
                    initial: 50.0,
                    min: 0.0,
                    max: 100.0,
                    inflow: vec![1.0, 2.0],
                    turbines: vec![Turbine { min: 0.0, max: 5.0 }, Turbine { min: -3.0, max: 4.0 }],
                },
                Basin {
                    name: None,
                    initial: 20.0,
                    min: 0.0,
                    max: 40.0,
                    inflow: vec![],
                    turbines: vec![Turbine { min: 0.0, max: 2.0 }],
                },
            ],
            spot: None,
            inflow_field: None,
        };
        let (lat, x) = prices(3, 2);
        let inst = assemble(&sys, &lat, &x, Utility::linear(), None).unwrap();
        assert_eq!(inst.n_rows(), 2 * 3 + 2 * 2);
        let (_, b) = &inst.dynamics[0];
        assert_eq!(b.row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, -1.0, 0.0]);
        assert_eq!(inst.offsets.get(2, 0)[0], 2.0);
        assert_eq!(inst.rhs.get(1, 0)[6], 0.0 - 2.0);
    }

    #[test]
    fn zero_control_exponential_water_value() {
        let (lat, x) = prices(2, 2);
        let alpha = 0.3;
        let util = Utility::exponential(alpha).unwrap();
        let inst = assemble(&single(100.0, 40.0, 200.0, 10.0), &lat, &x, util, None).unwrap();
        let plan = OptimalPlan {
            u: NodeField::from_fn(&lat, 0, 1, |_, _| DVector::zeros(1)),
            y: NodeField::from_fn(&lat, 0, 2, |_, _| DVector::from_element(1, 100.0)),
            lambda: NodeField::from_fn(&lat, 0, 2, |_, _| DVector::zeros(1)),
            objective: 0.0,
            barrier_objective: 0.0,
            mu: 0.0,
            iterations: 0,
            converged: true,
            kkt_residual: 0.0,
            decreases: 0,
            log: vec![],
            seconds: 0.0,
        };
        let wv = water_values(&inst, &plan).unwrap();
        for (t, n, gp) in wv.gp.iter() {
            assert!((gp - x.get(t, n) * alpha).abs() < 1e-12);
        }
    }
}
