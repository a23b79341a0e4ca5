//! Risk drivers and intraday price fields on the lattice.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::lattice::{Lattice, NodeField};

#[derive(Debug, Error, PartialEq)]
pub enum ProcessError {
    #[error("initial price must be positive for the lognormal model, got {0}")]
    InitialPrice(f64),
    #[error("volatility must be finite and non-negative, got {0}")]
    Volatility(f64),
    #[error("expected spot curve has {got} entries, need {expected} (one per hour of the horizon)")]
    SpotLength { expected: usize, got: usize },
    #[error("driver sample covers {got} layers, lattice has {expected}")]
    DriverShape { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverScheme {
    #[default]
    Quantile,
    MonteCarlo,
}

/// Standard normal drivers, one per node; `layers[t]` holds layer `t`.
/// Layer 0 is the valuation date and carries no noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverSample {
    pub layers: Vec<Vec<f64>>,
}

pub fn sample_drivers(lattice: &Lattice, scheme: DriverScheme, seed: u64) -> DriverSample {
    let mut layers = vec![vec![0.0]];
    match scheme {
        DriverScheme::Quantile => {
            let normal = Normal::standard();
            for t in 1..=lattice.horizon() {
                let n = lattice.layer_size(t);
                layers.push(
                    (1..=n)
                        .map(|j| normal.inverse_cdf((j as f64 - 0.5) / n as f64))
                        .collect(),
                );
            }
        }
        DriverScheme::MonteCarlo => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in 1..=lattice.horizon() {
                let n = lattice.layer_size(t);
                layers.push((0..n).map(|_| rng.sample(StandardNormal)).collect());
            }
        }
    }
    DriverSample { layers }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriceModel {
    /// Driftless geometric Brownian motion with hourly log volatility.
    Gbm { x0: f64, sigma: f64 },
    /// Expected spot plus an arithmetic Gaussian spread.
    /// `expected_spot[t]` is the curve at lattice layer `t`.
    SpreadToSpot {
        expected_spot: Vec<f64>,
        eta: f64,
        spread0: f64,
    },
}

impl PriceModel {
    pub fn validate(&self, lattice: &Lattice) -> Result<(), ProcessError> {
        match self {
            PriceModel::Gbm { x0, sigma } => {
                if !(*x0 > 0.0 && x0.is_finite()) {
                    return Err(ProcessError::InitialPrice(*x0));
                }
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(ProcessError::Volatility(*sigma));
                }
            }
            PriceModel::SpreadToSpot {
                expected_spot,
                eta,
                spread0,
            } => {
                if !(*eta >= 0.0 && eta.is_finite()) {
                    return Err(ProcessError::Volatility(*eta));
                }
                if expected_spot.len() != lattice.horizon() + 1 {
                    return Err(ProcessError::SpotLength {
                        expected: lattice.horizon() + 1,
                        got: expected_spot.len(),
                    });
                }
                if !spread0.is_finite() || expected_spot.iter().any(|s| !s.is_finite()) {
                    return Err(ProcessError::NonFinite("expected spot curve"));
                }
            }
        }
        Ok(())
    }
}

/// Fills every layer with prices. Each child value is the parent-weighted
/// average of the one-step map, followed by a per-layer correction that
/// keeps the probability-weighted layer mean exactly driftless: a scale
/// factor for the lognormal model, a shift of the drivers for the spread.
pub fn fill_prices(
    lattice: &Lattice,
    model: &PriceModel,
    drivers: &DriverSample,
) -> Result<NodeField<f64>, ProcessError> {
    model.validate(lattice)?;
    if drivers.layers.len() != lattice.horizon() + 1
        || drivers
            .layers
            .iter()
            .enumerate()
            .any(|(t, l)| l.len() != lattice.layer_size(t))
    {
        return Err(ProcessError::DriverShape {
            expected: lattice.horizon() + 1,
            got: drivers.layers.len(),
        });
    }
    let layers = match model {
        PriceModel::Gbm { x0, sigma } => {
            let mut layers = vec![vec![*x0]];
            for t in 0..lattice.horizon() {
                let z = &drivers.layers[t + 1];
                let prev = &layers[t];
                let mut next: Vec<f64> = lattice
                    .propagate_scalar(t, |p, c| prev[p] * (sigma * z[c] - 0.5 * sigma * sigma).exp());
                let target = lattice.layer_mean(t, prev);
                let got = lattice.layer_mean(t + 1, &next);
                let scale = target / got;
                next.iter_mut().for_each(|x| *x *= scale);
                layers.push(next);
            }
            layers
        }
        PriceModel::SpreadToSpot {
            expected_spot,
            eta,
            spread0,
        } => {
            let mut spread = vec![vec![*spread0]];
            for t in 0..lattice.horizon() {
                let z = &drivers.layers[t + 1];
                let zbar = lattice.layer_mean(t + 1, z);
                let prev = &spread[t];
                let next = lattice.propagate_scalar(t, |p, c| prev[p] + eta * (z[c] - zbar));
                spread.push(next);
            }
            spread
                .into_iter()
                .enumerate()
                .map(|(t, l)| l.into_iter().map(|s| expected_spot[t] + s).collect())
                .collect()
        }
    };
    if layers.iter().flatten().any(|x: &f64| !x.is_finite()) {
        return Err(ProcessError::NonFinite("price field"));
    }
    Ok(NodeField::from_layers(lattice, 0, layers)
        .expect("layers are built with lattice shapes")
        .with_unit("EUR/MWh"))
}

/// Sample standard deviation of a series, e.g. hourly log returns.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some(var.sqrt())
}
