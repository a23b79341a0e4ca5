//! Configuration, data files and artifacts for batch runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::{self, BacktestMode, BacktestResult, DayStart};
use crate::hydro::{self, Basin, HydroError, HydroSystem, SpotSchedule, WaterValues};
use crate::lattice::{Lattice, NodeField};
use crate::processes::{self, DriverScheme, PriceModel};
use crate::solver::{self, OptimalPlan, ProblemInstance, SolverConfig, SolverError};
use crate::utility::{Utility, UtilityKind};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: line {line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("solver did not converge after {iterations} iterations (artifacts written to {out})")]
    NotConverged { iterations: usize, out: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    /// Process exit status for the error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Csv { .. } => 2,
            PipelineError::Infeasible(_) => 3,
            PipelineError::NotConverged { .. } => 4,
            _ => 1,
        }
    }
}

impl From<SolverError> for PipelineError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Infeasible(m) => PipelineError::Infeasible(m),
            SolverError::Config(m) | SolverError::Dimension(m) => PipelineError::Config(m),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<HydroError> for PipelineError {
    fn from(e: HydroError) -> Self {
        match e {
            HydroError::Infeasible(m) => PipelineError::Infeasible(m),
            HydroError::Invalid(m) => PipelineError::Config(m),
            HydroError::Solver(s) => s.into(),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Solve,
    Watervalues,
    Backtest,
}

impl Pipeline {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pipeline::Solve => "solve",
            Pipeline::Watervalues => "watervalues",
            Pipeline::Backtest => "backtest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub branching: usize,
    /// First hour; the lattice root sits here.
    #[serde(default)]
    pub t0: usize,
    /// Final hour `T`.
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gbm,
    SpreadToSpot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceConfig {
    pub model: ModelKind,
    /// Price at `t0`, EUR/MWh.
    #[serde(default)]
    pub x0: Option<f64>,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub eta: f64,
    /// Spread at `t0`; defaults to `x0` minus the expected spot at `t0`.
    #[serde(default)]
    pub spread0: Option<f64>,
    /// Expected spot per hour `t0..=T`.
    #[serde(default)]
    pub expected_spot: Option<Vec<f64>>,
    /// CSV with `hour,price` covering `t0..=T`.
    #[serde(default)]
    pub expected_spot_csv: Option<PathBuf>,
    #[serde(default)]
    pub scheme: DriverScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    pub kind: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub shift: f64,
}

impl UtilityConfig {
    pub fn build(&self) -> Result<Utility, PipelineError> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| PipelineError::Config(format!("utility '{}' needs '{name}'", self.kind)))
        };
        let kind = match self.kind.as_str() {
            "linear" => UtilityKind::Linear,
            "exponential" => UtilityKind::Exponential {
                alpha: need(self.alpha, "alpha")?,
            },
            "logarithmic" | "log" => UtilityKind::Logarithmic,
            "hyperbolic" => UtilityKind::Hyperbolic {
                gamma: need(self.gamma, "gamma")?,
            },
            other => return Err(PipelineError::Config(format!("unknown utility '{other}'"))),
        };
        Utility::new(kind, self.shift).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BacktestConfig {
    /// CSV with `hour,price` and an optional `day` column.
    #[serde(default)]
    pub realized_csv: Option<PathBuf>,
    #[serde(default)]
    pub mode: BacktestMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default)]
    pub lattice_csv: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out(),
            lattice_csv: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub verbose: bool,
    pub lattice: LatticeConfig,
    pub prices: PriceConfig,
    pub utility: UtilityConfig,
    pub basins: Vec<Basin>,
    #[serde(default)]
    pub spot: Option<SpotSchedule>,
    /// Weight per hour `t0..=T`; all ones when absent.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub backtest: BacktestConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.prices.expected_spot_csv.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.backtest.realized_csv.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.output.dir);
        Ok(cfg)
    }

    /// Number of stages `T - t0`.
    pub fn stages(&self) -> Result<usize, PipelineError> {
        let l = &self.lattice;
        if l.horizon <= l.t0 {
            return Err(PipelineError::Config(format!(
                "horizon {} must exceed t0 {}",
                l.horizon, l.t0
            )));
        }
        Ok(l.horizon - l.t0)
    }

    pub fn build_lattice(&self) -> Result<Lattice, PipelineError> {
        Lattice::new(self.lattice.branching, self.stages()?).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn price_model(&self) -> Result<PriceModel, PipelineError> {
        let p = &self.prices;
        let h = self.stages()?;
        match p.model {
            ModelKind::Gbm => Ok(PriceModel::Gbm {
                x0: p
                    .x0
                    .ok_or_else(|| PipelineError::Config("gbm prices need 'x0'".into()))?,
                sigma: p.sigma,
            }),
            ModelKind::SpreadToSpot => {
                let spot = match (&p.expected_spot, &p.expected_spot_csv) {
                    (Some(v), None) => v.clone(),
                    (None, Some(path)) => read_hourly_csv(path, self.lattice.t0, self.lattice.horizon)?,
                    _ => {
                        return Err(PipelineError::Config(
                            "spread_to_spot needs exactly one of 'expected_spot' or 'expected_spot_csv'".into(),
                        ))
                    }
                };
                if spot.len() != h + 1 {
                    return Err(PipelineError::Config(format!(
                        "expected spot has {} entries, need {} (hours {}..={})",
                        spot.len(),
                        h + 1,
                        self.lattice.t0,
                        self.lattice.horizon
                    )));
                }
                let spread0 = match (p.spread0, p.x0) {
                    (Some(s), _) => s,
                    (None, Some(x0)) => x0 - spot[0],
                    (None, None) => 0.0,
                };
                Ok(PriceModel::SpreadToSpot {
                    expected_spot: spot,
                    eta: p.eta,
                    spread0,
                })
            }
        }
    }

    pub fn system(&self) -> HydroSystem {
        HydroSystem {
            basins: self.basins.clone(),
            spot: self.spot.clone(),
            inflow_field: None,
        }
    }
}

fn csv_error(path: &Path, e: &csv::Error) -> PipelineError {
    let line = e.position().map_or(0, |p| p.line());
    PipelineError::Csv {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    }
}

#[derive(Debug, Deserialize)]
struct HourlyRecord {
    #[serde(default)]
    day: Option<usize>,
    hour: usize,
    price: f64,
}

fn read_records(path: &Path) -> Result<Vec<(u64, HourlyRecord)>, PipelineError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => PipelineError::Config(format!("{}: {e}", path.display())),
            _ => csv_error(path, &e),
        })?;
    let mut out = Vec::new();
    for rec in reader.deserialize::<HourlyRecord>() {
        match rec {
            Ok(r) => {
                if !r.price.is_finite() {
                    return Err(PipelineError::Csv {
                        path: path.display().to_string(),
                        line: out.len() as u64 + 2,
                        message: "non-finite price".into(),
                    });
                }
                out.push((out.len() as u64 + 2, r));
            }
            Err(e) => return Err(csv_error(path, &e)),
        }
    }
    Ok(out)
}

/// Prices for hours `first..=last` from a `hour,price` CSV.
pub fn read_hourly_csv(path: &Path, first: usize, last: usize) -> Result<Vec<f64>, PipelineError> {
    let records = read_records(path)?;
    let mut out = vec![None; last - first + 1];
    for (line, r) in records {
        if r.hour >= first && r.hour <= last {
            if out[r.hour - first].is_some() {
                return Err(PipelineError::Csv {
                    path: path.display().to_string(),
                    line,
                    message: format!("duplicate hour {}", r.hour),
                });
            }
            out[r.hour - first] = Some(r.price);
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| PipelineError::Csv {
                path: path.display().to_string(),
                line: 0,
                message: format!("missing hour {}", first + i),
            })
        })
        .collect()
}

/// Realised series grouped by day, each covering hours `first..=last`.
pub fn read_realized_csv(path: &Path, first: usize, last: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
    let records = read_records(path)?;
    let mut days: Vec<(usize, Vec<Option<f64>>)> = Vec::new();
    for (line, r) in records {
        let day = r.day.unwrap_or(0);
        if r.hour < first || r.hour > last {
            continue;
        }
        let slot = match days.iter().position(|(d, _)| *d == day) {
            Some(i) => i,
            None => {
                days.push((day, vec![None; last - first + 1]));
                days.len() - 1
            }
        };
        let cell = &mut days[slot].1[r.hour - first];
        if cell.is_some() {
            return Err(PipelineError::Csv {
                path: path.display().to_string(),
                line,
                message: format!("duplicate hour {} for day {day}", r.hour),
            });
        }
        *cell = Some(r.price);
    }
    days.sort_by_key(|(d, _)| *d);
    if days.is_empty() {
        return Err(PipelineError::Csv {
            path: path.display().to_string(),
            line: 0,
            message: format!("no prices for hours {first}..={last}"),
        });
    }
    days.into_iter()
        .map(|(d, series)| {
            series
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    v.ok_or_else(|| PipelineError::Csv {
                        path: path.display().to_string(),
                        line: 0,
                        message: format!("day {d} is missing hour {}", first + i),
                    })
                })
                .collect()
        })
        .collect()
}

/// Everything computed by one solve.
#[derive(Debug, Clone)]
pub struct Solved {
    pub lattice: Lattice,
    pub prices: NodeField<f64>,
    pub instance: ProblemInstance,
    pub plan: OptimalPlan,
    pub water_values: WaterValues,
}

/// Builds and solves the dispatch problem for the given initial levels.
pub fn solve_config(cfg: &RunConfig, levels: Option<&[f64]>) -> Result<Solved, PipelineError> {
    let lattice = cfg.build_lattice()?;
    let model = cfg.price_model()?;
    let drivers = processes::sample_drivers(&lattice, cfg.prices.scheme, cfg.seed);
    let prices = processes::fill_prices(&lattice, &model, &drivers).map_err(|e| PipelineError::Config(e.to_string()))?;
    let utility = cfg.utility.build()?;
    let mut system = cfg.system();
    if let Some(levels) = levels {
        for (b, l) in system.basins.iter_mut().zip(levels) {
            b.initial = *l;
        }
    }
    let instance = hydro::assemble(&system, &lattice, &prices, utility, cfg.beta.clone())?;
    let plan = solver::solve(&instance, &cfg.solver)?;
    let water_values = hydro::water_values(&instance, &plan)?;
    Ok(Solved {
        lattice,
        prices,
        instance,
        plan,
        water_values,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub solve_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub pipeline: String,
    pub objective: f64,
    pub barrier_objective: f64,
    pub mu: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub objective_decreases: usize,
    pub nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backtest_wealth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backtest_clamps: Option<usize>,
    pub timings: Timings,
}

fn create(path: &Path) -> Result<fs::File, PipelineError> {
    fs::File::create(path).map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, PipelineError> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> PipelineError + '_ {
    move |e| PipelineError::Other(format!("writing {}: {e}", path.display()))
}

fn columns(name: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![name.to_string()]
    } else {
        (0..n).map(|i| format!("{name}_{i}")).collect()
    }
}

/// `node_id,hour,node,probability,price,u..,y..,lambda..`; controls are empty
/// on the last layer.
pub fn write_plan(path: &Path, solved: &Solved, t0: usize) -> Result<(), PipelineError> {
    let lat = &solved.lattice;
    let plan = &solved.plan;
    let n = solved.instance.n_controls();
    let k = solved.instance.n_states();
    let mut w = csv_writer(path)?;
    let mut header = vec!["node_id".to_string(), "hour".into(), "node".into(), "probability".into(), "price".into()];
    header.extend(columns("u", n));
    header.extend(columns("y", k));
    header.extend(columns("lambda", k));
    w.write_record(&header).map_err(write_err(path))?;
    for t in 0..=lat.horizon() {
        for m in 0..lat.layer_size(t) {
            let mut row = vec![
                lat.node_id(t, m).to_string(),
                (t0 + t).to_string(),
                m.to_string(),
                lat.probability(t, m).to_string(),
                solved.prices.get(t, m).to_string(),
            ];
            if plan.u.contains_layer(t) {
                row.extend(plan.u.get(t, m).iter().map(|v| v.to_string()));
            } else {
                row.extend(std::iter::repeat_n(String::new(), n));
            }
            row.extend(plan.y.get(t, m).iter().map(|v| v.to_string()));
            row.extend(plan.lambda.get(t, m).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(write_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// `hour,GP,gp_mean,gp_min,gp_max` for hours `t0+1..=T`.
pub fn write_water_values(path: &Path, wv: &WaterValues, t0: usize) -> Result<(), PipelineError> {
    let mut w = csv_writer(path)?;
    w.write_record(["hour", "GP", "gp_mean", "gp_min", "gp_max"])
        .map_err(write_err(path))?;
    for i in 0..wv.certainty.len() {
        w.write_record([
            (t0 + i + 1).to_string(),
            wv.certainty[i].to_string(),
            wv.mean[i].to_string(),
            wv.min[i].to_string(),
            wv.max[i].to_string(),
        ])
        .map_err(write_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `iteration,phase,mu,objective,max_step,decrement,min_slack,eps_<hour>..`.
pub fn write_iterations(path: &Path, plan: &OptimalPlan, t0: usize, stages: usize) -> Result<(), PipelineError> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["iteration", "phase", "mu", "objective", "max_step", "decrement", "min_slack"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..stages).map(|t| format!("eps_{}", t0 + t)));
    w.write_record(&header).map_err(write_err(path))?;
    for r in &plan.log {
        let mut row = vec![
            r.iteration.to_string(),
            r.phase.as_str().to_string(),
            r.mu.to_string(),
            r.objective.to_string(),
            r.max_step.to_string(),
            r.decrement.to_string(),
            r.min_slack.to_string(),
        ];
        row.extend(r.eps.iter().map(|e| e.to_string()));
        w.write_record(&row).map_err(write_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `day,hour,price,dispatch..,wealth,cum_wealth,basin_level..`.
pub fn write_backtest(path: &Path, res: &BacktestResult, n: usize, b: usize) -> Result<(), PipelineError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["day".to_string(), "hour".into(), "price".into()];
    header.extend(columns("dispatch", n));
    header.extend(["wealth".to_string(), "cum_wealth".into()]);
    header.extend(columns("basin_level", b));
    w.write_record(&header).map_err(write_err(path))?;
    for r in &res.rows {
        let mut row = vec![r.day.to_string(), r.hour.to_string(), r.price.to_string()];
        row.extend(r.dispatch.iter().map(|v| v.to_string()));
        row.push(r.wealth.to_string());
        row.push(r.cum_wealth.to_string());
        row.extend(r.levels.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(write_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Replays every realised day, re-solving from the carried or initial
/// levels as the mode dictates.
pub fn run_days(
    cfg: &RunConfig,
    first: &Solved,
    days: &[Vec<f64>],
) -> Result<BacktestResult, PipelineError> {
    let initial: Vec<f64> = cfg.basins.iter().map(|b| b.initial).collect();
    let system = cfg.system();
    let mut total = BacktestResult::default();
    let mut levels = initial.clone();
    let mut cum = 0.0;
    for (d, series) in days.iter().enumerate() {
        let start_levels = match cfg.backtest.mode {
            BacktestMode::CarryOver => levels.clone(),
            BacktestMode::Reset => initial.clone(),
        };
        let resolved;
        let solved = if start_levels == initial {
            first
        } else {
            resolved = solve_config(cfg, Some(&start_levels))?;
            &resolved
        };
        let interp = backtest::fit_rules(&solved.plan, &solved.prices);
        let mut sys = system.clone();
        for (b, l) in sys.basins.iter_mut().zip(&start_levels) {
            b.initial = *l;
        }
        let start = DayStart {
            day: d,
            first_hour: cfg.lattice.t0,
            levels: DVector::from_vec(start_levels.clone()),
            cum_wealth: cum,
        };
        let res = backtest::run(&interp, series, &sys, &start).map_err(|e| PipelineError::Other(e.to_string()))?;
        cum = res.total_wealth();
        if let Some(l) = res.final_levels() {
            levels = l.iter().copied().collect();
        }
        total.rows.extend(res.rows);
        total.clamps.extend(res.clamps);
    }
    Ok(total)
}

/// Runs a pipeline and writes its artifacts into `out`.
pub fn run(cfg: &RunConfig, pipeline: Pipeline, out: &Path) -> Result<RunSummary, PipelineError> {
    let start = Instant::now();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let t0 = cfg.lattice.t0;

    let realized = match pipeline {
        Pipeline::Backtest => {
            let path = cfg
                .backtest
                .realized_csv
                .as_ref()
                .ok_or_else(|| PipelineError::Config("backtest needs 'backtest.realized_csv'".into()))?;
            Some(read_realized_csv(path, t0, cfg.lattice.horizon)?)
        }
        _ => None,
    };

    let solved = solve_config(cfg, None)?;
    let solve_seconds = solved.plan.seconds;
    write_plan(&out.join("plan.csv"), &solved, t0)?;
    write_water_values(&out.join("water_values.csv"), &solved.water_values, t0)?;
    if cfg.verbose {
        write_iterations(&out.join("iterations.csv"), &solved.plan, t0, cfg.stages()?)?;
    }
    if cfg.output.lattice_csv {
        let path = out.join("lattice.csv");
        solved
            .lattice
            .write_csv(create(&path)?)
            .map_err(write_err(&path))?;
    }

    let mut summary = RunSummary {
        pipeline: pipeline.as_str().to_string(),
        objective: solved.plan.objective,
        barrier_objective: solved.plan.barrier_objective,
        mu: solved.plan.mu,
        iterations: solved.plan.iterations,
        converged: solved.plan.converged,
        kkt_residual: solved.plan.kkt_residual,
        objective_decreases: solved.plan.decreases,
        nodes: solved.lattice.total_nodes(),
        backtest_wealth: None,
        backtest_clamps: None,
        timings: Timings {
            solve_seconds,
            total_seconds: 0.0,
        },
    };

    if let Some(days) = realized {
        if solved.plan.converged {
            let res = run_days(cfg, &solved, &days)?;
            write_backtest(
                &out.join("backtest.csv"),
                &res,
                solved.instance.n_controls(),
                solved.instance.n_states(),
            )?;
            summary.backtest_wealth = Some(res.total_wealth());
            summary.backtest_clamps = Some(res.clamps.len());
        }
    }

    summary.timings.total_seconds = start.elapsed().as_secs_f64();
    let path = out.join("summary.json");
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, &summary).map_err(|e| PipelineError::Other(e.to_string()))?;
    f.write_all(b"\n").map_err(io_err(&path))?;

    if !solved.plan.converged {
        return Err(PipelineError::NotConverged {
            iterations: solved.plan.iterations,
            out: out.display().to_string(),
        });
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
seed = 1
[lattice]
branching = 2
horizon = 2
[prices]
model = "gbm"
x0 = 37.4
sigma = 0.2
[utility]
kind = "linear"
[[basins]]
initial = 100.0
min = 40.0
max = 1000.0
[[basins.turbines]]
min = 0.0
max = 10.0
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = RunConfig::from_toml(TOY).unwrap();
        assert_eq!(cfg.stages().unwrap(), 2);
        assert_eq!(cfg.solver, SolverConfig::default());
        assert_eq!(cfg.backtest.mode, BacktestMode::CarryOver);
        assert_eq!(cfg.utility.build().unwrap(), Utility::linear());
    }

    #[test]
    fn rejects_unknown_keys_and_utilities() {
        let err = RunConfig::from_toml(&format!("{TOY}\nbogus = 1\n")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let cfg = RunConfig::from_toml(&TOY.replace("\"linear\"", "\"cubic\"")).unwrap();
        assert!(matches!(cfg.utility.build(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn spread_defaults_to_observed_price() {
        let text = TOY.replace(
            "model = \"gbm\"",
            "model = \"spread_to_spot\"\neta = 1.0\nexpected_spot = [30.0, 31.0, 32.0]",
        );
        let cfg = RunConfig::from_toml(&text).unwrap();
        match cfg.price_model().unwrap() {
            PriceModel::SpreadToSpot { spread0, .. } => assert!((spread0 - 7.4).abs() < 1e-12),
            _ => unreachable!(),
        }
    }

    #[test]
    fn malformed_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, "hour,price\n0,30\n1,abc\n2,31\n").unwrap();
        match read_hourly_csv(&path, 0, 2) {
            Err(PipelineError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn realized_days_are_grouped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        fs::write(&path, "day,hour,price\n1,0,5\n1,1,6\n0,1,2\n0,0,1\n").unwrap();
        let days = read_realized_csv(&path, 0, 1).unwrap();
        assert_eq!(days, vec![vec![1.0, 2.0], vec![5.0, 6.0]]);
    }
}
