//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use hydrolattice::hydro::{assemble, Basin, HydroSystem, Turbine};
use hydrolattice::lattice::Lattice;
use hydrolattice::processes::{fill_prices, sample_drivers, DriverScheme, PriceModel};
use hydrolattice::solver::blocks::{node_blocks, Iterate};
use hydrolattice::solver::ProblemInstance;
use hydrolattice::Utility;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const X0: f64 = 37.4;
pub const SIGMA: f64 = 0.1997;
pub const ETA: f64 = 4.12;

pub fn single_basin(initial: f64, min: f64, max: f64, umin: f64, umax: f64) -> HydroSystem {
    HydroSystem {
        basins: vec![Basin {
            name: None,
            initial,
            min,
            max,
            inflow: vec![],
            turbines: vec![Turbine { min: umin, max: umax }],
        }],
        spot: None,
        inflow_field: None,
    }
}

pub fn gbm_prices(lat: &Lattice) -> hydrolattice::NodeField<f64> {
    let d = sample_drivers(lat, DriverScheme::Quantile, 0);
    fill_prices(lat, &PriceModel::Gbm { x0: X0, sigma: SIGMA }, &d).unwrap()
}

/// A synthetic intraday shape around the mean price.
pub fn spot_curve(h: usize) -> Vec<f64> {
    (0..=h)
        .map(|t| X0 + 4.0 * (std::f64::consts::PI * t as f64 / 12.0).sin())
        .collect()
}

pub fn spread_prices(lat: &Lattice) -> hydrolattice::NodeField<f64> {
    let d = sample_drivers(lat, DriverScheme::Quantile, 0);
    let spot = spot_curve(lat.horizon());
    let model = PriceModel::SpreadToSpot {
        spread0: 0.0,
        eta: ETA,
        expected_spot: spot,
    };
    fill_prices(lat, &model, &d).unwrap()
}

/// Six-hour toy: one basin at 41.5 MWh, bounds [40, 160000], turbine [0, 500].
pub fn toy(spread: bool) -> ProblemInstance {
    let lat = Lattice::new(4, 6).unwrap();
    let prices = if spread { spread_prices(&lat) } else { gbm_prices(&lat) };
    let sys = single_basin(41.5, 40.0, 160_000.0, 0.0, 500.0);
    assemble(&sys, &lat, &prices, Utility::hyperbolic(0.95).unwrap(), None).unwrap()
}

// ---------------------------------------------------------------------------
// random small instances

pub struct RandomCase {
    pub inst: ProblemInstance,
    pub iterate: Iterate,
    pub label: String,
}

/// Random hydro instance with `k <= 3`, `H <= 3`, one or two basins and an
/// interior point whose slacks are all of order one.
pub fn random_case(seed: u64) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=3usize);
    let h = rng.random_range(1..=3usize);
    let nb = rng.random_range(1..=2usize);
    let utility = match rng.random_range(0..4u32) {
        0 => Utility::linear(),
        1 => Utility::exponential(rng.random_range(0.001..0.02)).unwrap(),
        2 => Utility::logarithmic(0.0).unwrap(),
        _ => Utility::hyperbolic(rng.random_range(0.3..0.99)).unwrap(),
    };
    let mut basins = Vec::new();
    for b in 0..nb {
        let nt = rng.random_range(1..=2usize);
        let turbines = vec![Turbine { min: 0.5, max: 3.0 }; nt];
        let inflow = vec![1.75 * nt as f64; h];
        basins.push(Basin {
            name: Some(format!("b{b}")),
            initial: 20.0,
            min: 20.0 - 8.0,
            max: 20.0 + 8.0,
            inflow,
            turbines,
        });
    }
    let sys = HydroSystem {
        basins,
        spot: None,
        inflow_field: None,
    };
    let lat = Lattice::new(k, h).unwrap();
    let d = sample_drivers(&lat, DriverScheme::Quantile, 0);
    let sigma = rng.random_range(0.05..0.3);
    let prices = fill_prices(&lat, &PriceModel::Gbm { x0: X0, sigma }, &d).unwrap();
    let beta: Vec<f64> = (0..=h).map(|_| rng.random_range(0.8..1.2)).collect();
    let inst = assemble(&sys, &lat, &prices, utility, Some(beta)).unwrap();
    let n = inst.n_controls();
    let u: Vec<DVector<f64>> = (0..inst.n_control_nodes())
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(0.8..2.7)))
        .collect();
    let y = simulate(&inst, &u);
    let label = format!("k={k} H={h} basins={nb} controls={n} {}", utility.name());
    RandomCase {
        inst,
        iterate: Iterate { u, y },
        label,
    }
}

// ---------------------------------------------------------------------------
// deterministic equivalent, written out directly

/// Node states from controls through the parent-weighted dynamics.
pub fn simulate(inst: &ProblemInstance, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let lat = &inst.lattice;
    let mut y = vec![inst.y0.clone()];
    for t in 1..=lat.horizon() {
        let (a, b) = &inst.dynamics[t - 1];
        for c in 0..lat.layer_size(t) {
            let mut v = inst.offsets.get(t, c).clone();
            for (p, w) in lat.parent_weights(t, c) {
                let id = lat.node_id(t - 1, p);
                v += (a * &y[id] + b * &u[id]) * w;
            }
            y.push(v);
        }
    }
    y
}

/// Node term split as `(beta/k sum_c U(V), mu sum log s)`, per unit
/// probability. `None` outside the interior.
pub fn node_terms(
    inst: &ProblemInstance,
    t: usize,
    m: usize,
    y: &DVector<f64>,
    u: &DVector<f64>,
    mu: f64,
) -> Option<(f64, f64)> {
    let lat = &inst.lattice;
    let (e, f) = &inst.constraints[t];
    let s = e * y + f * u - inst.rhs.get(t, m);
    if s.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let mut util = 0.0;
    for c in lat.children(t, m) {
        let v = inst.stage_value.value(t + 1, *inst.prices.get(t + 1, c), u);
        if !inst.utility.in_domain(v) {
            return None;
        }
        util += inst.utility.value(v);
    }
    let k = lat.branching() as f64;
    Some((inst.beta[t + 1] * util / k, mu * s.iter().map(|v| v.ln()).sum::<f64>()))
}

/// Expected utility of the controls, no barrier.
pub fn objective(inst: &ProblemInstance, u: &[DVector<f64>]) -> f64 {
    let lat = &inst.lattice;
    let k = lat.branching() as f64;
    let mut total = 0.0;
    for t in 0..lat.horizon() {
        for m in 0..lat.layer_size(t) {
            let up = &u[lat.node_id(t, m)];
            let sum: f64 = lat
                .children(t, m)
                .map(|c| inst.utility.value(inst.stage_value.value(t + 1, *inst.prices.get(t + 1, c), up)))
                .sum();
            total += lat.probability(t, m) * inst.beta[t + 1] * sum / k;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// finite differences

/// Fourth-order central difference of `f` along coordinate `i`.
fn five_point<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>, i: usize, h: f64) -> f64 {
    let at = |d: f64| {
        let mut z = x.clone();
        z[i] += d;
        f(&z)
    };
    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
}

fn five_point_vec<F: Fn(&DVector<f64>) -> DVector<f64>>(f: &F, x: &DVector<f64>, i: usize, h: f64) -> DVector<f64> {
    let at = |d: f64| {
        let mut z = x.clone();
        z[i] += d;
        f(&z)
    };
    ((at(h) - at(-h)) * 8.0 - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
}

/// Normwise relative gap between two blocks; both negligible counts as equal.
pub fn rel_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale < 1e-14 {
        return 0.0;
    }
    (a - b).amax() / scale
}

fn col(v: DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::from_column_slice(n, 1, v.as_slice())
}

/// Largest relative gap per block kind `[q, r, Q, P, R]` over all control
/// nodes. Gradients are differenced from the node terms of the barrier
/// objective, Hessians from the assembled gradients.
pub fn block_gaps(inst: &ProblemInstance, it: &Iterate, mu: f64) -> [f64; 5] {
    let lat = &inst.lattice;
    let mut worst = [0.0f64; 5];
    for t in 0..lat.horizon() {
        for m in 0..lat.layer_size(t) {
            let id = lat.node_id(t, m);
            let (y, u) = (&it.y[id], &it.u[id]);
            let bl = node_blocks(inst, t, m, y, u, mu).unwrap();
            let h = 1e-3f64.min(0.02 * bl.slack.min());

            // the two additive terms are differenced separately so that a large
            // utility value does not swamp a small barrier gradient
            let uu = |z: &DVector<f64>| node_terms(inst, t, m, y, z, mu).unwrap().0;
            let ub = |z: &DVector<f64>| node_terms(inst, t, m, y, z, mu).unwrap().1;
            let yu = |z: &DVector<f64>| node_terms(inst, t, m, z, u, mu).unwrap().0;
            let yb = |z: &DVector<f64>| node_terms(inst, t, m, z, u, mu).unwrap().1;
            let gu = DVector::from_fn(u.len(), |i, _| -five_point(&uu, u, i, h) - five_point(&ub, u, i, h));
            let gy = DVector::from_fn(y.len(), |i, _| -five_point(&yu, y, i, h) - five_point(&yb, y, i, h));
            worst[0] = worst[0].max(rel_gap(&col(bl.q.clone()), &col(gy)));
            worst[1] = worst[1].max(rel_gap(&col(bl.r.clone()), &col(gu)));

            let r_of_u = |z: &DVector<f64>| node_blocks(inst, t, m, y, z, mu).unwrap().r;
            let q_of_y = |z: &DVector<f64>| node_blocks(inst, t, m, z, u, mu).unwrap().q;
            let q_of_u = |z: &DVector<f64>| node_blocks(inst, t, m, y, z, mu).unwrap().q;
            let mut rr = DMatrix::zeros(u.len(), u.len());
            let mut pp = DMatrix::zeros(y.len(), u.len());
            for j in 0..u.len() {
                rr.set_column(j, &five_point_vec(&r_of_u, u, j, h));
                pp.set_column(j, &five_point_vec(&q_of_u, u, j, h));
            }
            let mut qq = DMatrix::zeros(y.len(), y.len());
            for j in 0..y.len() {
                qq.set_column(j, &five_point_vec(&q_of_y, y, j, h));
            }
            worst[2] = worst[2].max(rel_gap(&bl.qq, &qq));
            worst[3] = worst[3].max(rel_gap(&bl.pp, &pp));
            worst[4] = worst[4].max(rel_gap(&bl.rr, &rr));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// dense Newton on the scenario-tree expansion

struct TreeNode {
    t: usize,
    m: usize,
    parent: Option<usize>,
    prob: f64,
}

fn expand(lat: &Lattice) -> Vec<TreeNode> {
    let mut nodes = vec![TreeNode {
        t: 0,
        m: 0,
        parent: None,
        prob: 1.0,
    }];
    let mut frontier = vec![0usize];
    let k = lat.branching() as f64;
    for t in 0..lat.horizon() {
        let mut next = Vec::new();
        for &i in &frontier {
            for c in lat.children(t, nodes[i].m) {
                let prob = nodes[i].prob / k;
                nodes.push(TreeNode {
                    t: t + 1,
                    m: c,
                    parent: Some(i),
                    prob,
                });
                next.push(nodes.len() - 1);
            }
        }
        frontier = next;
    }
    nodes
}

/// Number of scalar controls in the scenario-tree expansion.
pub fn tree_controls(inst: &ProblemInstance) -> usize {
    let h = inst.horizon();
    expand(&inst.lattice).iter().filter(|n| n.t < h).count() * inst.n_controls()
}

/// Newton direction from the quadratic model expanded on the scenario tree,
/// solved as one dense system and averaged back onto the lattice nodes.
pub fn dense_newton(inst: &ProblemInstance, it: &Iterate, mu: f64) -> Vec<DVector<f64>> {
    let lat = &inst.lattice;
    let h = lat.horizon();
    let (n, k) = (inst.n_controls(), inst.n_states());
    let tree = expand(lat);
    let ctrl: Vec<usize> = (0..tree.len()).filter(|&i| tree[i].t < h).collect();
    let mut slot = vec![usize::MAX; tree.len()];
    for (j, &i) in ctrl.iter().enumerate() {
        slot[i] = j;
    }
    let dim = ctrl.len() * n;

    // state sensitivity dy(tree node) = S du
    let mut sens: Vec<DMatrix<f64>> = Vec::with_capacity(tree.len());
    for node in tree.iter() {
        let s = match node.parent {
            None => DMatrix::zeros(k, dim),
            Some(p) => {
                let (a, b) = &inst.dynamics[tree[p].t];
                let mut s = a * &sens[p];
                let j = slot[p] * n;
                let mut cols = s.columns_mut(j, n);
                cols += b;
                s
            }
        };
        sens.push(s);
    }

    let mut hess = DMatrix::zeros(dim, dim);
    let mut grad = DVector::zeros(dim);
    for &i in &ctrl {
        let node = &tree[i];
        let id = lat.node_id(node.t, node.m);
        let bl = node_blocks(inst, node.t, node.m, &it.y[id], &it.u[id], mu).unwrap();
        let mut eu = DMatrix::zeros(n, dim);
        eu.columns_mut(slot[i] * n, n).copy_from(&DMatrix::identity(n, n));
        let s = &sens[i];
        let cross = s.transpose() * &bl.pp * &eu;
        hess += (eu.transpose() * &bl.rr * &eu + s.transpose() * &bl.qq * s + &cross + cross.transpose()) * node.prob;
        grad += (eu.transpose() * &bl.r + s.transpose() * &bl.q) * node.prob;
    }
    let du = hess.lu().solve(&(-grad)).expect("dense Newton system is nonsingular");

    let mut out = vec![DVector::zeros(n); inst.n_control_nodes()];
    for &i in &ctrl {
        let node = &tree[i];
        let id = lat.node_id(node.t, node.m);
        let w = node.prob / lat.probability(node.t, node.m);
        out[id] += du.rows(slot[i] * n, n) * w;
    }
    out
}

// ---------------------------------------------------------------------------
// active-set solver for the deterministic equivalent

#[derive(Debug, Clone)]
pub struct ActiveSetSolution {
    pub u: Vec<DVector<f64>>,
    pub objective: f64,
    pub iterations: usize,
    /// Active rows and their multipliers at the solution.
    pub active: Vec<(usize, f64)>,
}

/// Linear constraints `G u >= g` over the stacked controls.
fn stacked_constraints(inst: &ProblemInstance) -> (DMatrix<f64>, DVector<f64>) {
    let lat = &inst.lattice;
    let n = inst.n_controls();
    let nodes = inst.n_control_nodes();
    let dim = nodes * n;
    let zero = vec![DVector::zeros(n); nodes];
    let y0 = simulate(inst, &zero);
    // columns of the state map
    let mut dy: Vec<Vec<DVector<f64>>> = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut u = zero.clone();
        u[j / n][j % n] = 1.0;
        let y = simulate(inst, &u);
        dy.push(y.iter().zip(&y0).map(|(a, b)| a - b).collect());
    }
    let l = inst.n_rows();
    let mut g = DMatrix::zeros(nodes * l, dim);
    let mut rhs = DVector::zeros(nodes * l);
    for t in 0..lat.horizon() {
        let (e, f) = &inst.constraints[t];
        for m in 0..lat.layer_size(t) {
            let id = lat.node_id(t, m);
            let base = e * &y0[id] - inst.rhs.get(t, m);
            for r in 0..l {
                let row = id * l + r;
                rhs[row] = -base[r];
                for (j, d) in dy.iter().enumerate() {
                    g[(row, j)] = (e.row(r) * &d[id])[0];
                }
                for i in 0..n {
                    g[(row, id * n + i)] += f[(r, i)];
                }
            }
        }
    }
    (g, rhs)
}

fn unstack(x: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    (0..x.len() / n).map(|i| x.rows(i * n, n).into_owned()).collect()
}

fn stacked_value(inst: &ProblemInstance, x: &DVector<f64>) -> f64 {
    let lat = &inst.lattice;
    let n = inst.n_controls();
    for t in 0..lat.horizon() {
        for m in 0..lat.layer_size(t) {
            let up = x.rows(lat.node_id(t, m) * n, n).into_owned();
            for c in lat.children(t, m) {
                let v = inst.stage_value.value(t + 1, *inst.prices.get(t + 1, c), &up);
                if !inst.utility.in_domain(v) {
                    return f64::NEG_INFINITY;
                }
            }
        }
    }
    objective(inst, &unstack(x, n))
}

/// Gradient and negated (block-diagonal) Hessian of the expected utility.
fn stacked_derivatives(inst: &ProblemInstance, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let lat = &inst.lattice;
    let n = inst.n_controls();
    let k = lat.branching() as f64;
    let mut g = DVector::zeros(x.len());
    let mut hn = DMatrix::zeros(x.len(), x.len());
    for t in 0..lat.horizon() {
        for m in 0..lat.layer_size(t) {
            let id = lat.node_id(t, m);
            let up = x.rows(id * n, n).into_owned();
            let w = lat.probability(t, m) * inst.beta[t + 1] / k;
            for c in lat.children(t, m) {
                let xc = *inst.prices.get(t + 1, c);
                let v = inst.stage_value.value(t + 1, xc, &up);
                let gv = inst.stage_value.gradient(t + 1, xc, &up);
                let (d1, d2) = (inst.utility.d1(v), inst.utility.d2(v));
                let mut gb = g.rows_mut(id * n, n);
                gb += &gv * (w * d1);
                let mut hb = hn.view_mut((id * n, id * n), (n, n));
                hb -= &gv * gv.transpose() * (w * d2);
                if let Some(hv) = inst.stage_value.hessian(t + 1, xc, &up) {
                    hb -= hv * (w * d1);
                }
            }
        }
    }
    (g, hn)
}

/// Primal active-set Newton method for the concave deterministic
/// equivalent, started from an interior point.
pub fn active_set_solve(inst: &ProblemInstance, start: &[DVector<f64>]) -> ActiveSetSolution {
    let n = inst.n_controls();
    let (gm, gv) = stacked_constraints(inst);
    let dim = gm.ncols();
    let mut x = DVector::from_iterator(dim, start.iter().flat_map(|v| v.iter().copied()));
    assert!((&gm * &x - &gv).min() > 0.0, "start must be interior");
    let mut working: Vec<usize> = Vec::new();
    let mut multipliers: Vec<f64> = Vec::new();
    let mut iterations = 0;

    for _ in 0..5000 {
        iterations += 1;
        let (g, mut hn) = stacked_derivatives(inst, &x);
        let ridge = 1e-12 * (1.0 + hn.amax());
        for i in 0..dim {
            hn[(i, i)] += ridge;
        }
        let w = working.len();
        let mut kkt = DMatrix::zeros(dim + w, dim + w);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(&hn);
        for (j, &row) in working.iter().enumerate() {
            for i in 0..dim {
                kkt[(i, dim + j)] = -gm[(row, i)];
                kkt[(dim + j, i)] = gm[(row, i)];
            }
        }
        let mut rhs = DVector::zeros(dim + w);
        rhs.rows_mut(0, dim).copy_from(&g);
        let sol = kkt.lu().solve(&rhs).expect("working set stays independent");
        let d = sol.rows(0, dim).into_owned();
        multipliers = sol.rows(dim, w).iter().copied().collect();

        let scale = 1.0 + x.amax();
        if d.amax() <= 1e-13 * scale {
            // stationary on the face: release the most negative multiplier
            let (j, lam) = multipliers
                .iter()
                .copied()
                .enumerate()
                .fold((usize::MAX, 0.0), |acc, (j, l)| if l < acc.1 { (j, l) } else { acc });
            if j == usize::MAX || lam > -1e-10 * (1.0 + g.amax()) {
                break;
            }
            working.remove(j);
            continue;
        }

        // largest step keeping the inactive rows feasible
        let slack = &gm * &x - &gv;
        let gd = &gm * &d;
        let mut alpha_max = f64::INFINITY;
        let mut blocking = None;
        for r in 0..gm.nrows() {
            if working.contains(&r) || gd[r] >= 0.0 {
                continue;
            }
            let a = slack[r].max(0.0) / -gd[r];
            if a < alpha_max {
                alpha_max = a;
                blocking = Some(r);
            }
        }
        if alpha_max < 1e-10 {
            // degenerate start on a face: move onto it and fix the row
            x += &d * alpha_max;
            working.push(blocking.expect("finite step has a blocking row"));
            continue;
        }
        let f0 = stacked_value(inst, &x);
        let slope = g.dot(&d);
        let mut alpha = alpha_max.min(1.0);
        let mut accepted = false;
        while alpha > 1e-14 {
            let f1 = stacked_value(inst, &(&x + &d * alpha));
            if f1 >= f0 + 1e-4 * alpha * slope || (f1 - f0).abs() <= 1e-15 * f0.abs() {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        x += &d * alpha;
        if alpha == alpha_max && alpha_max <= 1.0 {
            if let Some(r) = blocking {
                working.push(r);
            }
        }
    }
    let u = unstack(&x, n);
    ActiveSetSolution {
        objective: objective(inst, &u),
        u,
        iterations,
        active: working.into_iter().zip(multipliers).collect(),
    }
}

// ---------------------------------------------------------------------------
// water values from the path-wise Lagrangian

/// Shadow price of the level equation written per scenario path.
///
/// On every path `w` the level equation weighted by `p(w)` carries its own
/// multiplier `lambda_t(w)`; stationarity of the Lagrangian in the path
/// control `u_{t-1}(w)` gives `lambda_t(w) = dPhi/du_{t-1}(w) / p(w)`, which
/// is evaluated by differencing the path utility. Node values are the
/// conditional means of `lambda_t` over the paths through the node.
pub fn path_multipliers(inst: &ProblemInstance, u: &[DVector<f64>]) -> Vec<Vec<f64>> {
    let lat = &inst.lattice;
    let h = lat.horizon();
    let tree = expand(lat);
    let mut sums: Vec<Vec<f64>> = (0..=h).map(|t| vec![0.0; lat.layer_size(t)]).collect();
    for node in tree.iter().filter(|nd| nd.t > 0) {
        let p = node.parent.unwrap();
        let up = &u[lat.node_id(tree[p].t, tree[p].m)];
        let x = *inst.prices.get(node.t, node.m);
        let phi = |z: &DVector<f64>| node.prob * inst.beta[node.t] * inst.utility.value(inst.stage_value.value(node.t, x, z));
        // single aggregated release: difference along the first turbine
        let step = 1e-4 * (1.0 + up[0].abs());
        let grad = five_point(&phi, up, 0, step);
        // the level equation enters with coefficient -p(w)
        let lambda = grad / node.prob;
        sums[node.t][node.m] += node.prob * lambda;
    }
    (0..=h)
        .map(|t| {
            (0..lat.layer_size(t))
                .map(|m| if t == 0 { 0.0 } else { sums[t][m] / lat.probability(t, m) })
                .collect()
        })
        .collect()
}
