//! Replay of node rules against realised prices.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hydro::HydroSystem;
use crate::lattice::NodeField;
use crate::solver::OptimalPlan;

#[derive(Debug, Error, PartialEq)]
pub enum BacktestError {
    #[error("realised series has {got} hours, the horizon needs {expected}")]
    MissingHours { expected: usize, got: usize },
    #[error("rule set covers {rules} stages, the series needs {needed}")]
    Rules { rules: usize, needed: usize },
    #[error("basin {basin} cannot be kept within bounds at hour {hour}")]
    Breach { basin: usize, hour: usize },
    #[error("non-finite realised price at hour {0}")]
    Price(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BacktestMode {
    /// Each day starts from the level the previous day ended with.
    #[default]
    CarryOver,
    /// Each day starts from the configured initial levels.
    Reset,
}

/// Piecewise-linear control rule of one stage; constant beyond the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    /// Strictly increasing node prices.
    pub prices: Vec<f64>,
    pub controls: Vec<DVector<f64>>,
}

impl Rule {
    /// Pairs are sorted by price; controls of equal prices are averaged.
    pub fn new(mut pairs: Vec<(f64, DVector<f64>)>) -> Self {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut prices: Vec<f64> = Vec::new();
        let mut controls: Vec<DVector<f64>> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for (x, u) in pairs {
            if prices.last() == Some(&x) {
                *controls.last_mut().unwrap() += u;
                *counts.last_mut().unwrap() += 1.0;
            } else {
                prices.push(x);
                controls.push(u);
                counts.push(1.0);
            }
        }
        for (c, n) in controls.iter_mut().zip(counts) {
            *c /= n;
        }
        Self { prices, controls }
    }

    pub fn eval(&self, x: f64) -> DVector<f64> {
        let n = self.prices.len();
        if x <= self.prices[0] {
            return self.controls[0].clone();
        }
        if x >= self.prices[n - 1] {
            return self.controls[n - 1].clone();
        }
        let i = self.prices.partition_point(|p| *p <= x) - 1;
        let (x0, x1) = (self.prices[i], self.prices[i + 1]);
        let w = (x - x0) / (x1 - x0);
        &self.controls[i] * (1.0 - w) + &self.controls[i + 1] * w
    }
}

/// One rule per control layer `0..H`, mapping the price of the layer to the
/// control decided in it.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleInterpolator {
    pub rules: Vec<Rule>,
}

pub fn fit_rules(plan: &OptimalPlan, prices: &NodeField<f64>) -> RuleInterpolator {
    let rules = (plan.u.first_layer()..=plan.u.last_layer())
        .map(|t| {
            let pairs = prices
                .layer(t)
                .iter()
                .copied()
                .zip(plan.u.layer(t).iter().cloned())
                .collect();
            Rule::new(pairs)
        })
        .collect();
    RuleInterpolator { rules }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestRow {
    pub day: usize,
    pub hour: usize,
    pub price: f64,
    /// Dispatch decided at this hour per turbine; zero on the last hour.
    pub dispatch: DVector<f64>,
    /// Wealth realised at this hour from the previous hour's dispatch.
    pub wealth: f64,
    pub cum_wealth: f64,
    /// Basin levels at this hour.
    pub levels: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clamp {
    pub day: usize,
    pub hour: usize,
    pub turbine_box: bool,
    pub basin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BacktestResult {
    pub rows: Vec<BacktestRow>,
    pub clamps: Vec<Clamp>,
}

impl BacktestResult {
    pub fn total_wealth(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_wealth)
    }

    pub fn final_levels(&self) -> Option<&DVector<f64>> {
        self.rows.last().map(|r| &r.levels)
    }
}

/// Starting state of one replayed day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayStart {
    pub day: usize,
    pub first_hour: usize,
    pub levels: DVector<f64>,
    pub cum_wealth: f64,
}

/// Replays one day: `realized[t]` is the price at layer `t`, `t = 0..=H`.
/// Cash per layer comes from the system's spot schedule.
pub fn run(
    interp: &RuleInterpolator,
    realized: &[f64],
    system: &HydroSystem,
    start: &DayStart,
) -> Result<BacktestResult, BacktestError> {
    let h = interp.rules.len();
    if realized.len() != h + 1 {
        return Err(BacktestError::MissingHours {
            expected: h + 1,
            got: realized.len(),
        });
    }
    if let Some(t) = realized.iter().position(|x| !x.is_finite()) {
        return Err(BacktestError::Price(start.first_hour + t));
    }
    let turbines = system.turbines();
    let owner = system.turbine_basins();
    let n = turbines.len();
    let cash: Vec<f64> = match &system.spot {
        Some(s) => s.cash(),
        None => vec![0.0; h + 1],
    };

    let mut out = BacktestResult::default();
    let mut levels = start.levels.clone();
    let mut cum = start.cum_wealth;
    let mut prev: Option<DVector<f64>> = None;
    for (t, &x) in realized.iter().enumerate() {
        let hour = start.first_hour + t;
        let wealth = match &prev {
            Some(u) => x * u.sum() + cash[t],
            None => 0.0,
        };
        cum += wealth;
        if let Some(u) = &prev {
            for (b, basin) in system.basins.iter().enumerate() {
                let used: f64 = (0..n).filter(|j| owner[*j] == b).map(|j| u[j]).sum();
                levels[b] = levels[b] - used + system.inflow(b, t);
                debug_assert!(levels[b] >= basin.min && levels[b] <= basin.max);
            }
        }
        let dispatch = if t < h {
            let mut u = interp.rules[t].eval(x);
            let mut boxed = false;
            for (j, tb) in turbines.iter().enumerate() {
                let c = u[j].clamp(tb.min, tb.max);
                boxed |= c != u[j];
                u[j] = c;
            }
            if boxed {
                out.clamps.push(Clamp {
                    day: start.day,
                    hour,
                    turbine_box: true,
                    basin: None,
                });
            }
            for (b, basin) in system.basins.iter().enumerate() {
                let inflow = system.inflow(b, t + 1);
                if keep_in_bounds(&mut u, &owner, b, &turbines, levels[b] + inflow, basin.min, basin.max)
                    .ok_or(BacktestError::Breach { basin: b, hour })?
                {
                    out.clamps.push(Clamp {
                        day: start.day,
                        hour,
                        turbine_box: false,
                        basin: Some(b),
                    });
                }
            }
            u
        } else {
            DVector::zeros(n)
        };
        out.rows.push(BacktestRow {
            day: start.day,
            hour,
            price: x,
            dispatch: dispatch.clone(),
            wealth,
            cum_wealth: cum,
            levels: levels.clone(),
        });
        prev = Some(dispatch);
    }
    Ok(out)
}

/// Adjusts the turbines of basin `b` so that `available - used` stays in
/// `[lo, hi]`. Returns whether anything changed, `None` if impossible.
fn keep_in_bounds(
    u: &mut DVector<f64>,
    owner: &[usize],
    b: usize,
    turbines: &[crate::hydro::Turbine],
    available: f64,
    lo: f64,
    hi: f64,
) -> Option<bool> {
    let mine: Vec<usize> = (0..u.len()).filter(|j| owner[*j] == b).collect();
    let used = |u: &DVector<f64>| mine.iter().map(|j| u[*j]).sum::<f64>();
    let mut changed = false;
    for _ in 0..8 {
        let next = available - used(u);
        if next < lo {
            // release less water, greedily from the first turbine
            let mut excess = lo - next;
            for &j in &mine {
                let room = u[j] - turbines[j].min;
                let cut = excess.min(room);
                u[j] -= cut;
                excess -= cut;
            }
            if excess > 0.0 && mine.iter().all(|j| u[*j] <= turbines[*j].min) {
                return None;
            }
            changed = true;
        } else if next > hi {
            let mut excess = next - hi;
            for &j in &mine {
                let room = turbines[j].max - u[j];
                let add = excess.min(room);
                u[j] += add;
                excess -= add;
            }
            if excess > 0.0 && mine.iter().all(|j| u[*j] >= turbines[*j].max) {
                return None;
            }
            changed = true;
        } else {
            return Some(changed);
        }
        // rounding can leave a residual of one ulp; nudge and retest
        let next = available - used(u);
        if next < lo {
            if let Some(&j) = mine.iter().find(|j| u[**j] > turbines[**j].min) {
                u[j] = (u[j] - f64::EPSILON * available.abs().max(1.0)).max(turbines[j].min);
            }
        } else if next > hi {
            if let Some(&j) = mine.iter().find(|j| u[**j] < turbines[**j].max) {
                u[j] = (u[j] + f64::EPSILON * available.abs().max(1.0)).min(turbines[j].max);
            }
        }
    }
    let next = available - used(u);
    (next >= lo && next <= hi).then_some(changed)
}
