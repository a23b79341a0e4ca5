//! Recombining k-ary lattice.
//!
//! Layer `t` holds the nodes `(t, m)` with `m` in `0..=(k-1)t`. Node `(t, m)`
//! branches to the `k` children `(t+1, m+s)`, `s = 0..k`, each with
//! conditional probability `1/k`, so every path through the lattice has
//! probability `k^-T`. A node aggregates every sequence of branch choices
//! whose offsets sum to `m`; node values are conditional expectations on
//! that event, and [`Lattice::propagate`] applies the matching
//! parent-probability weighting.

use std::io::Write;
use std::ops::RangeInclusive;

use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("branching factor must be at least 2, got {0}")]
    Branching(usize),
    #[error("horizon must be at least 1, got {0}")]
    Horizon(usize),
    #[error("layer {layer} has {got} values, lattice layer holds {expected}")]
    FieldShape {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer} is outside the field range {first}..={last}")]
    LayerOutOfRange {
        layer: usize,
        first: usize,
        last: usize,
    },
    #[error("dimension mismatch at layer {layer}, node {node}: expected {expected}, got {got}")]
    Dimension {
        layer: usize,
        node: usize,
        expected: usize,
        got: usize,
    },
}

/// Number of nodes in layer `t` of a `k`-ary lattice.
pub fn layer_size(k: usize, t: usize) -> usize {
    (k - 1) * t + 1
}

/// Total node count of layers `0..=horizon`, i.e. `((k-1)T/2 + 1)(T+1)`.
pub fn total_size(k: usize, horizon: usize) -> usize {
    // (k-1)T(T+1)/2 + (T+1), kept in integers
    (k - 1) * horizon * (horizon + 1) / 2 + horizon + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    branching: usize,
    horizon: usize,
    offsets: Vec<usize>,
    probabilities: Vec<f64>,
}

impl Lattice {
    pub fn new(branching: usize, horizon: usize) -> Result<Self, LatticeError> {
        if branching < 2 {
            return Err(LatticeError::Branching(branching));
        }
        if horizon < 1 {
            return Err(LatticeError::Horizon(horizon));
        }
        let mut offsets = Vec::with_capacity(horizon + 2);
        let mut acc = 0;
        for t in 0..=horizon {
            offsets.push(acc);
            acc += layer_size(branching, t);
        }
        offsets.push(acc);

        let mut lattice = Self {
            branching,
            horizon,
            offsets,
            probabilities: vec![0.0; acc],
        };
        lattice.probabilities[0] = 1.0;
        let inv_k = 1.0 / branching as f64;
        for t in 1..=horizon {
            for m in 0..layer_size(branching, t) {
                let p: f64 = lattice
                    .parents(t, m)
                    .map(|q| lattice.probability(t - 1, q))
                    .sum();
                let id = lattice.node_id(t, m);
                lattice.probabilities[id] = p * inv_k;
            }
        }
        Ok(lattice)
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn layer_size(&self, t: usize) -> usize {
        layer_size(self.branching, t)
    }

    pub fn total_nodes(&self) -> usize {
        self.probabilities.len()
    }

    /// Global index of node `(t, m)`; layers are stored contiguously.
    pub fn node_id(&self, t: usize, m: usize) -> usize {
        debug_assert!(m < self.layer_size(t));
        self.offsets[t] + m
    }

    /// Inverse of [`Lattice::node_id`].
    pub fn node_at(&self, id: usize) -> (usize, usize) {
        let t = self.offsets.partition_point(|&o| o <= id) - 1;
        (t, id - self.offsets[t])
    }

    pub fn probability(&self, t: usize, m: usize) -> f64 {
        self.probabilities[self.node_id(t, m)]
    }

    pub fn layer_probabilities(&self, t: usize) -> &[f64] {
        &self.probabilities[self.offsets[t]..self.offsets[t + 1]]
    }

    /// Children of `(t, m)` in layer `t + 1`. Empty on the last layer.
    pub fn children(&self, t: usize, m: usize) -> std::ops::Range<usize> {
        if t >= self.horizon {
            return 0..0;
        }
        m..m + self.branching
    }

    /// Parents of `(t, m)` in layer `t - 1`. Empty at the root.
    pub fn parents(&self, t: usize, m: usize) -> RangeInclusive<usize> {
        if t == 0 {
            #[allow(clippy::reversed_empty_ranges)]
            return 1..=0;
        }
        let lo = m.saturating_sub(self.branching - 1);
        let hi = m.min((self.branching - 1) * (t - 1));
        lo..=hi
    }

    /// Conditional weights `p(n) / sum p(parents)` of the parents of `(t, m)`.
    pub fn parent_weights(&self, t: usize, m: usize) -> Vec<(usize, f64)> {
        let parents = self.parents(t, m);
        let total: f64 = parents.clone().map(|q| self.probability(t - 1, q)).sum();
        parents
            .map(|q| (q, self.probability(t - 1, q) / total))
            .collect()
    }

    /// Probability-weighted mean of a scalar layer.
    pub fn layer_mean(&self, t: usize, values: &[f64]) -> f64 {
        self.layer_probabilities(t)
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Values on layer `t + 1` from the stage map `g(parent, child)` evaluated
    /// on every edge and averaged over each child's parents.
    pub fn propagate<G>(&self, t: usize, mut g: G) -> Result<Vec<DVector<f64>>, LatticeError>
    where
        G: FnMut(usize, usize) -> DVector<f64>,
    {
        let mut out = Vec::with_capacity(self.layer_size(t + 1));
        let mut dim = None;
        for c in 0..self.layer_size(t + 1) {
            let mut acc: Option<DVector<f64>> = None;
            for (p, w) in self.parent_weights(t + 1, c) {
                let v = g(p, c);
                let expected = *dim.get_or_insert(v.len());
                if v.len() != expected {
                    return Err(LatticeError::Dimension {
                        layer: t + 1,
                        node: c,
                        expected,
                        got: v.len(),
                    });
                }
                match acc.as_mut() {
                    Some(a) => a.axpy(w, &v, 1.0),
                    None => acc = Some(v * w),
                }
            }
            out.push(acc.expect("every non-root node has a parent"));
        }
        Ok(out)
    }

    /// Scalar version of [`Lattice::propagate`].
    pub fn propagate_scalar<G>(&self, t: usize, mut g: G) -> Vec<f64>
    where
        G: FnMut(usize, usize) -> f64,
    {
        (0..self.layer_size(t + 1))
            .map(|c| {
                self.parent_weights(t + 1, c)
                    .into_iter()
                    .map(|(p, w)| w * g(p, c))
                    .sum()
            })
            .collect()
    }

    /// Writes one row per node: `t,node,node_id,probability,parents,children`.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "node", "node_id", "probability", "parents", "children"])?;
        for t in 0..=self.horizon {
            for m in 0..self.layer_size(t) {
                w.write_record([
                    t.to_string(),
                    m.to_string(),
                    self.node_id(t, m).to_string(),
                    self.probability(t, m).to_string(),
                    self.parents(t, m).count().to_string(),
                    self.children(t, m).len().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-node values over a contiguous range of lattice layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField<V = f64> {
    first_layer: usize,
    layers: Vec<Vec<V>>,
    unit: Option<String>,
}

impl<V: Clone> NodeField<V> {
    pub fn from_layers(
        lattice: &Lattice,
        first_layer: usize,
        layers: Vec<Vec<V>>,
    ) -> Result<Self, LatticeError> {
        for (i, layer) in layers.iter().enumerate() {
            let t = first_layer + i;
            if t > lattice.horizon() {
                return Err(LatticeError::LayerOutOfRange {
                    layer: t,
                    first: 0,
                    last: lattice.horizon(),
                });
            }
            if layer.len() != lattice.layer_size(t) {
                return Err(LatticeError::FieldShape {
                    layer: t,
                    expected: lattice.layer_size(t),
                    got: layer.len(),
                });
            }
        }
        Ok(Self {
            first_layer,
            layers,
            unit: None,
        })
    }

    /// Field on layers `first..=last` filled by `f(t, m)`.
    pub fn from_fn<F>(lattice: &Lattice, first: usize, last: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> V,
    {
        let layers = (first..=last)
            .map(|t| (0..lattice.layer_size(t)).map(|m| f(t, m)).collect())
            .collect();
        Self {
            first_layer: first,
            layers,
            unit: None,
        }
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = Some(unit.into());
        self
    }

    pub fn unit(&self) -> Option<&str> {
        self.unit.as_deref()
    }

    pub fn first_layer(&self) -> usize {
        self.first_layer
    }

    pub fn last_layer(&self) -> usize {
        self.first_layer + self.layers.len() - 1
    }

    pub fn contains_layer(&self, t: usize) -> bool {
        t >= self.first_layer && t <= self.last_layer()
    }

    pub fn layer(&self, t: usize) -> &[V] {
        &self.layers[t - self.first_layer]
    }

    pub fn layer_mut(&mut self, t: usize) -> &mut Vec<V> {
        &mut self.layers[t - self.first_layer]
    }

    pub fn get(&self, t: usize, m: usize) -> &V {
        &self.layers[t - self.first_layer][m]
    }

    pub fn set(&mut self, t: usize, m: usize, value: V) {
        self.layers[t - self.first_layer][m] = value;
    }

    pub fn map<W, F: FnMut(usize, usize, &V) -> W>(&self, mut f: F) -> NodeField<W> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let t = self.first_layer + i;
                layer.iter().enumerate().map(|(m, v)| f(t, m, v)).collect()
            })
            .collect();
        NodeField {
            first_layer: self.first_layer,
            layers,
            unit: self.unit.clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &V)> {
        self.layers.iter().enumerate().flat_map(move |(i, layer)| {
            layer
                .iter()
                .enumerate()
                .map(move |(m, v)| (self.first_layer + i, m, v))
        })
    }
}
