//! Deterministic experiment runner: JSON configs in, per-step CSV out.
//!
//! A run directory holds `config.json` (the config as run), `steps.csv` (one
//! [`StepRecord`] per recorded step) and `params.json` (final parameters).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::densela::{matmul, DenseMatrix, LinalgError};
use crate::diagnostics::{self, DiagError};
use crate::optim::{
    scale_blocks, AdagradState, AdamState, NewtonState, OptimError, Optimizer, ParamBlock,
    ShampooState, SoapState, StepConfig,
};
use crate::problems::{
    correlated_cov, equicorrelated_cov, BiQuadraticRD, LinearAERD, Objective, ProblemError,
    QuadraticObjective, QuarticObjective, TwoLayerNetRD,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("record {step}: {what} = {value} out of range")]
    Record {
        step: u64,
        what: &'static str,
        value: f64,
    },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config { .. } | Self::Parse(_))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn config_err(field: impl Into<String>, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceShape {
    Rotated,
    CommonMode,
}

fn default_init_scale() -> f64 {
    0.1
}
fn default_condition() -> f64 {
    1.0
}
fn default_batch() -> usize {
    64
}
fn default_eval() -> usize {
    512
}
fn default_covariance() -> CovarianceShape {
    CovarianceShape::CommonMode
}

/// Objective and its starting point. Matrices are lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        hessian: Vec<Vec<f64>>,
        anchor: Vec<f64>,
        /// Zero vector when absent.
        #[serde(default)]
        init: Option<Vec<f64>>,
    },
    BiQuadratic {
        hessian_r: Vec<Vec<f64>>,
        hessian_d: Vec<Vec<f64>>,
        anchor_r: Vec<f64>,
        anchor_d: Vec<f64>,
        lambda: f64,
        #[serde(default)]
        init: Option<Vec<f64>>,
    },
    Quartic {
        hessian: Vec<Vec<f64>>,
        alpha: f64,
        init: Vec<f64>,
    },
    LinearAe {
        latent_dim: usize,
        #[serde(default = "default_init_scale")]
        init_scale: f64,
        lambda: f64,
    },
    TwoLayer {
        input_dim: usize,
        latent_dim: usize,
        lambda: f64,
        #[serde(default = "default_init_scale")]
        init_scale: f64,
        #[serde(default = "default_condition")]
        condition: f64,
        #[serde(default = "default_covariance")]
        covariance: CovarianceShape,
        #[serde(default)]
        balanced_init: bool,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_eval")]
        eval_samples: usize,
    },
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_ema() -> f64 {
    0.95
}
fn d_shampoo_damping() -> f64 {
    1e-6
}
fn d_period() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd,
    Sign,
    Adam {
        #[serde(default = "d_beta1")]
        beta1: f64,
        #[serde(default = "d_beta2")]
        beta2: f64,
        #[serde(default = "d_eps")]
        eps: f64,
    },
    Adagrad {
        #[serde(default = "d_eps")]
        eps: f64,
    },
    Shampoo {
        #[serde(default = "d_ema")]
        ema_decay: f64,
        #[serde(default = "d_shampoo_damping")]
        damping: f64,
        #[serde(default = "d_period")]
        update_freq: u64,
    },
    Soap {
        #[serde(default = "d_beta1")]
        beta1: f64,
        #[serde(default = "d_beta2")]
        beta2: f64,
        #[serde(default = "d_eps")]
        eps: f64,
        #[serde(default = "d_ema")]
        ema_decay: f64,
        #[serde(default = "d_period")]
        refresh_period: u64,
    },
    /// Exact damped Newton; needs a problem with a computable Hessian.
    Newton {
        #[serde(default)]
        damping: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SIntra,
    SInter,
    Kurt,
    Maxmed,
}

fn d_record_every() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: ProblemSpec,
    pub optimizer: OptimizerSpec,
    pub lr: f64,
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_record_every")]
    pub record_every: u64,
    #[serde(default)]
    pub diagnostics: Vec<Metric>,
    pub output_path: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(config_err("name", "must not be empty"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err(
                "lr",
                format!("{} is not a positive number", self.lr),
            ));
        }
        if self.steps == 0 {
            return Err(config_err("steps", "must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(config_err("record_every", "must be at least 1"));
        }
        let two_layer = matches!(self.problem, ProblemSpec::TwoLayer { .. });
        for m in &self.diagnostics {
            if matches!(m, Metric::Kurt | Metric::Maxmed) && !two_layer {
                return Err(config_err(
                    "diagnostics",
                    format!("{m:?} needs a two_layer problem"),
                ));
            }
        }
        let has_hessian = matches!(
            self.problem,
            ProblemSpec::Quadratic { .. }
                | ProblemSpec::BiQuadratic { .. }
                | ProblemSpec::Quartic { .. }
        );
        if matches!(self.optimizer, OptimizerSpec::Newton { .. }) && !has_hessian {
            return Err(config_err(
                "optimizer",
                "newton needs a quadratic, bi_quadratic or quartic problem",
            ));
        }
        // surface range errors as config errors before any work is done
        self.build_optimizer()?;
        self.build_problem()?;
        Ok(())
    }

    fn build_optimizer(&self) -> Result<Optimizer> {
        let wrap = |e: OptimError| config_err("optimizer", e.to_string());
        Ok(match self.optimizer {
            OptimizerSpec::Sgd => Optimizer::Sgd,
            OptimizerSpec::Sign => Optimizer::Sign,
            OptimizerSpec::Adam { beta1, beta2, eps } => {
                Optimizer::Adam(AdamState::new(beta1, beta2, eps).map_err(wrap)?)
            }
            OptimizerSpec::Adagrad { eps } => {
                Optimizer::Adagrad(AdagradState::new(eps).map_err(wrap)?)
            }
            OptimizerSpec::Shampoo {
                ema_decay,
                damping,
                update_freq,
            } => Optimizer::Shampoo(
                ShampooState::new(ema_decay, damping, update_freq).map_err(wrap)?,
            ),
            OptimizerSpec::Soap {
                beta1,
                beta2,
                eps,
                ema_decay,
                refresh_period,
            } => Optimizer::Soap(
                SoapState::new(beta1, beta2, eps, ema_decay, refresh_period).map_err(wrap)?,
            ),
            OptimizerSpec::Newton { damping } => {
                Optimizer::Newton(NewtonState::new(damping).map_err(wrap)?)
            }
        })
    }

    fn build_problem(&self) -> Result<Problem> {
        let wrap = |e: ProblemError| config_err("problem", e.to_string());
        let matrix = |field: &str, rows: &[Vec<f64>]| {
            DenseMatrix::from_rows(rows)
                .map_err(|e| config_err(format!("problem.{field}"), e.to_string()))
        };
        let column = |field: &str, v: &[f64]| {
            DenseMatrix::col(v).map_err(|e| config_err(format!("problem.{field}"), e.to_string()))
        };
        let theta_init = |init: &Option<Vec<f64>>, dim: usize| -> Result<Vec<ParamBlock>> {
            let value = match init {
                Some(v) if v.len() != dim => {
                    return Err(config_err(
                        "problem.init",
                        format!("length {} for dimension {dim}", v.len()),
                    ))
                }
                Some(v) => column("init", v)?,
                None => DenseMatrix::zeros(dim, 1),
            };
            Ok(vec![ParamBlock::new("theta", value)])
        };
        Ok(match &self.problem {
            ProblemSpec::Quadratic {
                hessian,
                anchor,
                init,
            } => {
                let o =
                    QuadraticObjective::new(matrix("hessian", hessian)?, column("anchor", anchor)?)
                        .map_err(wrap)?;
                let params = theta_init(init, o.dim())?;
                Problem::deterministic(Objective::Quadratic(o), params)
            }
            ProblemSpec::BiQuadratic {
                hessian_r,
                hessian_d,
                anchor_r,
                anchor_d,
                lambda,
                init,
            } => {
                let o = BiQuadraticRD::new(
                    matrix("hessian_r", hessian_r)?,
                    matrix("hessian_d", hessian_d)?,
                    column("anchor_r", anchor_r)?,
                    column("anchor_d", anchor_d)?,
                    *lambda,
                )
                .map_err(wrap)?;
                let params = theta_init(init, o.dim())?;
                Problem::deterministic(Objective::BiQuadratic(o), params)
            }
            ProblemSpec::Quartic {
                hessian,
                alpha,
                init,
            } => {
                let o = QuarticObjective::new(matrix("hessian", hessian)?, *alpha).map_err(wrap)?;
                let params = theta_init(&Some(init.clone()), o.dim())?;
                Problem::deterministic(Objective::Quartic(o), params)
            }
            ProblemSpec::LinearAe {
                latent_dim,
                init_scale,
                lambda,
            } => {
                let o = LinearAERD::small_init(*latent_dim, *init_scale, *lambda, self.seed)
                    .map_err(wrap)?;
                let params = o.initial_params();
                Problem::deterministic(Objective::LinearAe(o), params)
            }
            ProblemSpec::TwoLayer {
                input_dim,
                latent_dim,
                lambda,
                init_scale,
                condition,
                covariance,
                balanced_init,
                batch_size,
                eval_samples,
            } => {
                if *batch_size == 0 {
                    return Err(config_err("problem.batch_size", "must be at least 1"));
                }
                if *eval_samples == 0 {
                    return Err(config_err("problem.eval_samples", "must be at least 1"));
                }
                if *input_dim == 0 || *latent_dim == 0 {
                    return Err(config_err("problem", "dimensions must be at least 1"));
                }
                if !(*init_scale > 0.0 && init_scale.is_finite()) {
                    return Err(config_err(
                        "problem.init_scale",
                        format!("{init_scale} is not positive"),
                    ));
                }
                let cov = match covariance {
                    _ if *condition == 1.0 => DenseMatrix::identity(*input_dim),
                    CovarianceShape::Rotated => {
                        correlated_cov(*input_dim, *condition, self.seed).map_err(wrap)?
                    }
                    CovarianceShape::CommonMode => {
                        equicorrelated_cov(*input_dim, *condition).map_err(wrap)?
                    }
                };
                let mut net = TwoLayerNetRD::random(
                    *input_dim,
                    *latent_dim,
                    cov,
                    *lambda,
                    *init_scale,
                    self.seed,
                )
                .map_err(wrap)?;
                if *balanced_init {
                    net = net.with_balanced_channels().map_err(wrap)?;
                }
                let eval =
                    net.sample_batch(*eval_samples, rng::derive_seed(self.seed, u64::MAX))?;
                let params = net.initial_params();
                Problem {
                    objective: Objective::TwoLayer(net),
                    params,
                    batch_size: Some(*batch_size),
                    eval_batch: Some(eval),
                }
            }
        })
    }
}

struct Problem {
    objective: Objective,
    params: Vec<ParamBlock>,
    batch_size: Option<usize>,
    eval_batch: Option<DenseMatrix>,
}

impl Problem {
    fn deterministic(objective: Objective, params: Vec<ParamBlock>) -> Self {
        Self {
            objective,
            params,
            batch_size: None,
            eval_batch: None,
        }
    }
}

/// One CSV row. `step` counts updates applied; losses are taken after the
/// update (on the fixed evaluation batch for stochastic problems), while the
/// gradient and direction norms belong to the gradient that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_r: f64,
    pub loss_d: f64,
    pub s_intra: Option<f64>,
    pub s_inter: Option<f64>,
    pub p_r_norm: f64,
    pub p_d_norm: f64,
    pub p_norm: f64,
    pub g_norm: f64,
    pub kurt: Option<f64>,
    pub maxmed: Option<f64>,
}

pub const CSV_HEADER: [&str; 12] = [
    "step",
    "loss_total",
    "loss_r",
    "loss_d",
    "s_intra",
    "s_inter",
    "p_r_norm",
    "p_d_norm",
    "p_norm",
    "g_norm",
    "kurt",
    "maxmed",
];

impl StepRecord {
    fn check(&self) -> Result<()> {
        for (what, v) in [("s_intra", self.s_intra), ("s_inter", self.s_inter)] {
            if let Some(v) = v {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(HarnessError::Record {
                        step: self.step,
                        what,
                        value: v,
                    });
                }
            }
        }
        for (what, v) in [
            ("p_r_norm", self.p_r_norm),
            ("p_d_norm", self.p_d_norm),
            ("p_norm", self.p_norm),
            ("g_norm", self.g_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HarnessError::Record {
                    step: self.step,
                    what,
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// Loss and parameters before any update, for callers that need the full
/// trajectory (the CSV only holds post-update rows).
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub initial_loss: f64,
    pub records: Vec<StepRecord>,
    pub final_params: Vec<ParamBlock>,
}

fn optional_cosine(a: &[ParamBlock], b: &[ParamBlock]) -> Result<Option<f64>> {
    match diagnostics::block_cosine(a, b) {
        Ok(c) => Ok(Some(c.value())),
        Err(DiagError::ZeroVector) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Runs the training loop in memory without touching the filesystem.
pub fn simulate(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut opt = cfg.build_optimizer()?;
    let Problem {
        objective,
        mut params,
        batch_size,
        eval_batch,
    } = cfg.build_problem()?;
    if let (Optimizer::Newton(s), Objective::Quadratic(_) | Objective::BiQuadratic(_)) =
        (&mut opt, &objective)
    {
        s.set_hessian(objective.exact_hessian()?);
    }
    let step_cfg = StepConfig::new(cfg.lr)?;
    let (w_r, w_d) = objective.weights();
    let wants = |m: Metric| cfg.diagnostics.contains(&m);
    let eval = eval_batch.as_ref();
    let initial_loss = objective.loss(&params, eval)?.total;
    let mut records = Vec::new();
    let mut previous_direction: Option<Vec<ParamBlock>> = None;
    for t in 0..cfg.steps {
        let batch = match batch_size {
            Some(n) => match &objective {
                Objective::TwoLayer(net) => {
                    Some(net.sample_batch(n, rng::derive_seed(cfg.seed, t))?)
                }
                _ => None,
            },
            None => None,
        };
        if let (Optimizer::Newton(s), Objective::Quartic(o)) = (&mut opt, &objective) {
            s.set_hessian(o.hessian_at(&params[0].value));
        }
        let parts = objective.grad_components(&params, batch.as_ref())?;
        let grads = objective.total_gradient(&params, batch.as_ref())?;
        let out = opt.step(&params, &grads, &step_cfg)?;
        params = out.params;
        let direction = scale_blocks(&out.update, 1.0 / cfg.lr);
        let p_r = opt.precondition(&scale_blocks(&parts.rate, w_r))?;
        let p_d = opt.precondition(&scale_blocks(&parts.dist, w_d))?;
        let step = t + 1;
        let s_inter = match &previous_direction {
            Some(prev) if wants(Metric::SInter) => optional_cosine(prev, &direction)?,
            _ => None,
        };
        if step % cfg.record_every == 0 || step == cfg.steps {
            let loss = objective.loss(&params, eval)?;
            let s_intra = if wants(Metric::SIntra) {
                optional_cosine(&p_r, &p_d)?
            } else {
                None
            };
            let latent = match &objective {
                Objective::TwoLayer(net) if wants(Metric::Kurt) || wants(Metric::Maxmed) => {
                    let enc = &params[0].value;
                    Some(matmul(
                        eval.expect("two_layer has an eval batch"),
                        &enc.transpose(),
                    )?)
                }
                _ => None,
            };
            let stat =
                |m: Metric, f: fn(&DenseMatrix) -> diagnostics::Result<f64>| -> Option<f64> {
                    match &latent {
                        Some(z) if wants(m) => f(z).ok(),
                        _ => None,
                    }
                };
            let record = StepRecord {
                step,
                loss_total: loss.total,
                loss_r: loss.rate,
                loss_d: loss.dist,
                s_intra,
                s_inter,
                p_r_norm: diagnostics::block_norm(&p_r),
                p_d_norm: diagnostics::block_norm(&p_d),
                p_norm: diagnostics::block_norm(&direction),
                g_norm: diagnostics::block_norm(&grads),
                kurt: stat(Metric::Kurt, diagnostics::kurt),
                maxmed: stat(Metric::Maxmed, diagnostics::maxmed),
            };
            record.check()?;
            records.push(record);
        }
        previous_direction = Some(direction);
    }
    Ok(RunOutput {
        initial_loss,
        records,
        final_params: params,
    })
}

pub fn write_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<StepRecord>, _>>()?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Runs `cfg` and writes `config.json`, `steps.csv` and `params.json` into
/// `cfg.output_path`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<StepRecord>> {
    let started = Instant::now();
    let out = simulate(cfg)?;
    let dir = &cfg.output_path;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("config.json"), cfg)?;
    write_csv(&dir.join("steps.csv"), &out.records)?;
    write_json(&dir.join("params.json"), &out.final_params)?;
    log::info!(
        "{}: {} steps in {:.3?} ({:.3?} per step)",
        cfg.name,
        cfg.steps,
        started.elapsed(),
        started.elapsed() / cfg.steps.max(1) as u32
    );
    Ok(out.records)
}

/// Reads a run directory back: its config and final parameters.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, Vec<ParamBlock>)> {
    let cfg = ExperimentConfig::from_file(&dir.join("config.json"))?;
    let path = dir.join("params.json");
    let params = serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    Ok((cfg, params))
}

/// Rebuilds the two-layer net of a finished run with its final weights, plus
/// the evaluation batch it was scored on.
pub fn trained_two_layer(dir: &Path) -> Result<(TwoLayerNetRD, DenseMatrix)> {
    let (cfg, params) = load_run(dir)?;
    match cfg.build_problem()? {
        Problem {
            objective: Objective::TwoLayer(net),
            eval_batch: Some(eval),
            ..
        } => Ok((net.with_params(&params)?, eval)),
        _ => Err(config_err("problem", "quantize needs a two_layer run")),
    }
}

/// Parameter grid: dotted config path to the values it takes.
pub type Grid = BTreeMap<String, Vec<Value>>;

/// Parses a grid given as a JSON object, e.g. `{"lr": [0.1, 0.01]}`.
pub fn parse_grid(text: &str) -> Result<Grid> {
    let grid: Grid = serde_json::from_str(text)?;
    if grid.is_empty() {
        return Err(config_err("grid", "no parameters"));
    }
    for (key, values) in &grid {
        if values.is_empty() {
            return Err(config_err(format!("grid.{key}"), "empty value list"));
        }
    }
    Ok(grid)
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            config_err(path, format!("`{}` is not an object", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| config_err(path, format!("no field `{part}`")))?;
    }
    unreachable!("split yields at least one part")
}

fn label(value: &Value) -> String {
    let raw = match value {
        Value::String(s) => s.clone(),
        Value::Object(m) => match m.get("kind") {
            Some(Value::String(k)) if m.len() == 1 => k.clone(),
            _ => value.to_string(),
        },
        other => other.to_string(),
    };
    raw.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// One cell of a sweep.
#[derive(Debug)]
pub struct SweepCell {
    pub overrides: Vec<(String, Value)>,
    pub output_path: PathBuf,
    pub outcome: Result<usize>,
}

/// Cartesian product of the grid, in key order then value order.
pub fn expand_grid(grid: &Grid) -> Vec<Vec<(String, Value)>> {
    grid.iter().fold(vec![Vec::new()], |cells, (key, values)| {
        cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut next = cell.clone();
                    next.push((key.clone(), v.clone()));
                    next
                })
            })
            .collect()
    })
}

/// Runs one experiment per grid cell under `base.output_path/<cell label>`.
/// A failing cell is reported in its [`SweepCell::outcome`]; the rest still run.
pub fn sweep(base: &ExperimentConfig, grid: &Grid) -> Result<Vec<SweepCell>> {
    if grid.is_empty() {
        return Err(config_err("grid", "no parameters"));
    }
    if let Some((key, _)) = grid.iter().find(|(_, v)| v.is_empty()) {
        return Err(config_err(format!("grid.{key}"), "empty value list"));
    }
    let base_value = serde_json::to_value(base)?;
    let mut seen = BTreeMap::new();
    let mut cells = Vec::new();
    for overrides in expand_grid(grid) {
        let name: String = overrides
            .iter()
            .map(|(k, v)| format!("{k}-{}", label(v)))
            .collect::<Vec<_>>()
            .join("__");
        if let Some(previous) = seen.insert(name.clone(), overrides.clone()) {
            return Err(config_err(
                "grid",
                format!("cells {previous:?} and {overrides:?} share the directory name `{name}`"),
            ));
        }
        let output_path = base.output_path.join(&name);
        let outcome = (|| {
            let mut value = base_value.clone();
            for (k, v) in &overrides {
                set_path(&mut value, k, v.clone())?;
            }
            set_path(
                &mut value,
                "output_path",
                serde_json::to_value(&output_path)?,
            )?;
            set_path(
                &mut value,
                "name",
                Value::String(format!("{}/{name}", base.name)),
            )?;
            let cfg: ExperimentConfig = serde_json::from_value(value)?;
            cfg.validate()?;
            Ok(run_experiment(&cfg)?.len())
        })();
        if let Err(e) = &outcome {
            log::warn!("sweep cell {name} failed: {e}");
        }
        cells.push(SweepCell {
            overrides,
            output_path,
            outcome,
        });
    }
    Ok(cells)
}

/// Outcome of comparing when two runs first reach a loss target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StepsToTarget {
    Ratio {
        value: f64,
        steps_a: u64,
        steps_b: u64,
    },
    Unreached {
        a_reached: bool,
        b_reached: bool,
    },
}

impl StepsToTarget {
    pub fn ratio(&self) -> Option<f64> {
        match self {
            Self::Ratio { value, .. } => Some(*value),
            Self::Unreached { .. } => None,
        }
    }
}

/// First recorded step whose total loss is at or below `target`.
pub fn first_crossing(records: &[StepRecord], target: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.loss_total <= target)
        .map(|r| r.step)
}

/// `first_crossing(a) / first_crossing(b)`.
pub fn steps_to_target(
    records_a: &[StepRecord],
    records_b: &[StepRecord],
    target_loss: f64,
) -> StepsToTarget {
    match (
        first_crossing(records_a, target_loss),
        first_crossing(records_b, target_loss),
    ) {
        (Some(a), Some(b)) => StepsToTarget::Ratio {
            value: a as f64 / b as f64,
            steps_a: a,
            steps_b: b,
        },
        (a, b) => StepsToTarget::Unreached {
            a_reached: a.is_some(),
            b_reached: b.is_some(),
        },
    }
}

/// Slack added to the anchor run's final loss when it serves as the target.
pub const TARGET_SLACK: f64 = 1e-9;

/// Target taken from the anchor run: its final loss plus [`TARGET_SLACK`].
pub fn anchor_target(anchor: &[StepRecord]) -> Option<f64> {
    anchor.last().map(|r| r.loss_total + TARGET_SLACK)
}
