//! Synthetic multi-task scenarios and the repeat/method experiment loop.
//!
//! Scenario 1: logistic outcome with a single-index treatment effect
//! (CATE); scenario 2: single-index regression; scenario 3: partially
//! linear model. Each has four similar tasks and, at index 5, one outlier
//! whose distance from the rest is `(1 − η)` times a fixed shift.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ModelKind, ParamEstimate, TaskDataset};
use crate::error::{Error, Result};
use crate::federation::{run_pipeline, AuditEntry, AuditLog, Method, PipelineConfig};
use crate::nuisance_fusion::{DomainBox, GridPrediction};

/// 1-based index of the outlier task.
pub const OUTLIER_TASK: usize = 5;

const SCENARIO1_THETA: [f64; 8] = [-1.0, 1.0, 0.5, 0.5, -0.5, -0.5, 0.0, 0.0];
const SCENARIO2_THETA: [f64; 8] = [2.0, -2.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: u8,
    /// Samples per task.
    pub n: usize,
    pub tasks: usize,
    pub eta: f64,
    pub repeats: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub p: usize,
    pub folds: usize,
    /// `None` uses the default λ grid.
    pub lambda_grid: Option<Vec<f64>>,
    /// Off-grid evaluation of fused nuisances.
    #[serde(default)]
    pub grid_prediction: GridPrediction,
}

impl ScenarioConfig {
    pub fn new(scenario: u8, n: usize, eta: f64) -> Self {
        Self {
            scenario,
            n,
            tasks: 5,
            eta,
            repeats: 1,
            seed: 0,
            methods: vec![Method::Itl, Method::Mtl, Method::MtlNuis],
            p: 8,
            folds: 5,
            lambda_grid: None,
            grid_prediction: GridPrediction::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(1..=3).contains(&self.scenario) {
            return bad(format!("unknown scenario {}", self.scenario));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("η = {} is outside [0, 1]", self.eta));
        }
        if self.n < 40 {
            return bad(format!("n = {} is below the minimum of 40", self.n));
        }
        if self.repeats == 0 || self.tasks == 0 {
            return bad("at least one repeat and one task are required".into());
        }
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        if self.folds < 2 {
            return bad("at least two folds are required".into());
        }
        let min_p = if self.scenario == 3 { 4 } else { 8 };
        if self.p < min_p {
            return bad(format!("scenario {} needs p ≥ {min_p}", self.scenario));
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        match self.scenario {
            1 => ModelKind::CateSim,
            2 => ModelKind::Sim,
            _ => ModelKind::Plm,
        }
    }

    pub fn repeat_seed(&self, repeat: usize) -> u64 {
        self.seed.wrapping_mul(1_000_000).wrapping_add(repeat as u64)
    }
}

/// Task-level random effects, drawn before any sample and independent of η.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDraws {
    /// `G_k` (scenario 3).
    pub g: Vec<f64>,
    /// `b_k` (scenarios 1 and 2), one `p`-vector per task.
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GeneratedScenario {
    pub datasets: Vec<TaskDataset>,
    /// Parameters in the estimator's normalization (pinned for single-index).
    pub truths: Vec<ParamEstimate>,
    /// Parameters as drawn, before pinning.
    pub raw_thetas: Vec<Vec<f64>>,
    pub draws: ScenarioDraws,
}

pub fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn is_outlier(k: usize) -> bool {
    k + 1 == OUTLIER_TASK
}

/// Raw parameter of task `k` (0-based).
pub fn scenario_theta(scenario: u8, k: usize, eta: f64, draws: &ScenarioDraws, p: usize) -> Vec<f64> {
    let shift = if is_outlier(k) { 1.0 - eta } else { 0.0 };
    match scenario {
        3 => vec![2.0 + 0.1 * (draws.g[k] + 1.0) * (1.0 - eta) + 0.1 * shift],
        s => {
            let (base, scale, outlier) =
                if s == 1 { (&SCENARIO1_THETA, 0.01, 0.5) } else { (&SCENARIO2_THETA, 0.05, 1.0) };
            (0..p).map(|l| base.get(l).copied().unwrap_or(0.0) + scale * draws.b[k][l] + outlier * shift).collect()
        }
    }
}

/// Scenario 3 exposure mean `g_k(x)`.
pub fn scenario3_exposure(k: usize, x: &[f64], g_k: f64, eta: f64) -> f64 {
    let base = 0.25 * (x[0] * x[0] + x[1] * x[1]);
    if k < 3 {
        base
    } else {
        base + g_k * (1.0 - eta) * (x[2] * x[2] + x[3] * x[3] - 2.0)
    }
}

/// Scenario 3 baseline `f_k(x)`, with `s = Σ x_l`.
pub fn scenario3_baseline(x: &[f64]) -> f64 {
    let s: f64 = x.iter().sum();
    0.5 * s * s + s * s * s
}

/// Scenario 1 propensity index `π_k(x)`; `P(T = 1) = expit(4π − 1)`.
pub fn scenario1_propensity_index(k: usize, x: &[f64]) -> f64 {
    if k < 3 {
        x[0]
    } else {
        x[0] + 0.5 * x[1] * x[1]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws all tasks of one repeat. Deterministic in `(cfg.seed, repeat)`.
pub fn generate_scenario(cfg: &ScenarioConfig, repeat: usize) -> Result<GeneratedScenario> {
    cfg.validate()?;
    let (k_count, p, n, eta) = (cfg.tasks, cfg.p, cfg.n, cfg.eta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.repeat_seed(repeat));
    let g: Vec<f64> = (0..k_count).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<Vec<f64>> = (0..k_count).map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let draws = ScenarioDraws { g, b };

    let mut datasets = Vec::with_capacity(k_count);
    let mut truths = Vec::with_capacity(k_count);
    let mut raw_thetas = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let theta = scenario_theta(cfg.scenario, k, eta, &draws, p);
        let mut rows = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..=1.0)).collect();
            match cfg.scenario {
                3 => {
                    let e1: f64 = rng.sample(StandardNormal);
                    let e2: f64 = rng.sample(StandardNormal);
                    let tk = scenario3_exposure(k, &x, draws.g[k], eta) + 0.5 * e1;
                    y.push(tk * theta[0] + scenario3_baseline(&x) + e2);
                    t.push(tk);
                }
                2 => {
                    let e: f64 = rng.sample(StandardNormal);
                    let s = dot(&x, &theta);
                    y.push(0.2 * s * s + 0.2 * e);
                }
                _ => {
                    let s = dot(&x, &theta);
                    let tk = if rng.random::<f64>() < expit(4.0 * scenario1_propensity_index(k, &x) - 1.0) { 1.0 } else { -1.0 };
                    let mu = 0.2 * (s + 1.0) * (s + 1.0);
                    y.push(if rng.random::<f64>() < expit(tk * s + mu) { 1.0 } else { 0.0 });
                    t.push(tk);
                }
            }
            rows.push(x);
        }
        let t = (cfg.scenario != 2).then_some(t);
        datasets.push(TaskDataset::from_rows(k, &rows, t, y)?);
        truths.push(if cfg.scenario == 3 { ParamEstimate::scalar(theta[0]) } else { ParamEstimate::pinned(&theta)? });
        raw_thetas.push(theta);
    }
    Ok(GeneratedScenario { datasets, truths, raw_thetas, draws })
}

/// Squared ℓ2 distance on the free coordinates.
pub fn squared_error(estimate: &ParamEstimate, truth: &ParamEstimate, kind: ModelKind) -> Result<f64> {
    let (a, b) = (estimate.free(kind), truth.free(kind));
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("estimate has {} free coordinates, truth has {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub errors: Vec<f64>,
    pub average: f64,
    pub maximum: f64,
}

pub fn evaluate(estimates: &[ParamEstimate], truths: &[ParamEstimate], kind: ModelKind) -> Result<MetricsRecord> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(Error::Dimension(format!("{} estimates for {} tasks", estimates.len(), truths.len())));
    }
    let errors = estimates.iter().zip(truths).map(|(e, t)| squared_error(e, t, kind)).collect::<Result<Vec<_>>>()?;
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numerical("non-finite squared error".into()));
    }
    let average = errors.iter().sum::<f64>() / errors.len() as f64;
    let maximum = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MetricsRecord { errors, average, maximum })
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub repeat: usize,
    /// 1-based.
    pub task: usize,
    pub method: Method,
    pub squared_error: f64,
    pub lambda: f64,
    /// Space-separated parameter estimate.
    pub estimate: String,
}

/// One row of `summary.csv`: a per-repeat statistic averaged over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    /// `avg_mse`, `max_mse` or `task<k>_mse`.
    pub metric: String,
    pub mean: f64,
    /// Standard error over repeats (NaN with a single repeat).
    pub se: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub repeat: usize,
    pub method: Method,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
struct TaggedAudit<'a> {
    repeat: usize,
    method: Method,
    #[serde(flatten)]
    entry: &'a AuditEntry,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ScenarioConfig,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    /// Runs that stopped with a numerical error; they have no result rows.
    pub failures: Vec<FailureRow>,
    pub audits: Vec<(usize, Method, AuditLog)>,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Means and standard errors over repeats of the averaged MSE, maximum
/// MSE and each task's MSE. Repeats missing any task of a method are
/// skipped for that method.
pub fn summarize(rows: &[ResultRow], methods: &[Method]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &method in methods {
        let mut by_repeat: std::collections::BTreeMap<usize, Vec<(usize, f64)>> = Default::default();
        for r in rows.iter().filter(|r| r.method == method) {
            by_repeat.entry(r.repeat).or_default().push((r.task, r.squared_error));
        }
        let tasks = by_repeat.values().map(Vec::len).max().unwrap_or(0);
        let complete: Vec<Vec<f64>> = by_repeat
            .into_values()
            .filter(|v| v.len() == tasks)
            .map(|mut v| {
                v.sort_by_key(|(t, _)| *t);
                v.into_iter().map(|(_, e)| e).collect()
            })
            .collect();
        if complete.is_empty() {
            continue;
        }
        let mut push = |metric: String, vals: Vec<f64>| {
            let (mean, se) = mean_se(&vals);
            out.push(SummaryRow { method, metric, mean, se, repeats: vals.len() });
        };
        push("avg_mse".into(), complete.iter().map(|e| e.iter().sum::<f64>() / e.len() as f64).collect());
        push("max_mse".into(), complete.iter().map(|e| e.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect());
        for k in 0..tasks {
            push(format!("task{}_mse", k + 1), complete.iter().map(|e| e[k]).collect());
        }
    }
    out
}

pub fn pipeline_config(cfg: &ScenarioConfig, method: Method, repeat: usize) -> Result<PipelineConfig> {
    let mut pc = PipelineConfig::new(cfg.kind(), method);
    pc.folds = cfg.folds;
    pc.seed = cfg.repeat_seed(repeat);
    pc.lambda_grid = cfg.lambda_grid.clone();
    pc.domain = Some(DomainBox::cube(cfg.p, -1.0, 1.0)?);
    pc.grid_prediction = cfg.grid_prediction;
    Ok(pc)
}

fn estimate_string(e: &ParamEstimate) -> String {
    e.theta.iter().map(|v| format!("{v:.12e}")).collect::<Vec<_>>().join(" ")
}

type RepeatOutcome = (Vec<ResultRow>, Vec<FailureRow>, Vec<(usize, Method, AuditLog)>);

fn run_repeat(cfg: &ScenarioConfig, repeat: usize) -> Result<RepeatOutcome> {
    let scen = generate_scenario(cfg, repeat)?;
    let kind = cfg.kind();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut audits = Vec::new();
    for &method in &cfg.methods {
        let out = match run_pipeline(&scen.datasets, &pipeline_config(cfg, method, repeat)?) {
            Ok(o) => o,
            Err(e) if !e.is_config() => {
                log::warn!("repeat {repeat}, {method}: {e}");
                failures.push(FailureRow { repeat, method, error: e.to_string() });
                continue;
            }
            Err(e) => return Err(e),
        };
        let m = evaluate(&out.estimates, &scen.truths, kind)?;
        for (k, (est, err)) in out.estimates.iter().zip(&m.errors).enumerate() {
            rows.push(ResultRow {
                repeat,
                task: k + 1,
                method,
                squared_error: *err,
                lambda: out.lambda,
                estimate: estimate_string(est),
            });
        }
        audits.push((repeat, method, out.audit));
    }
    Ok((rows, failures, audits))
}

/// Runs every (repeat, method) pair. Repeats run in parallel; output order
/// is repeat-major, then method in config order. A run that hits a
/// numerical error is recorded in `failures`; the experiment itself fails
/// only if no run succeeds.
pub fn run_experiment(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let outcomes: Vec<RepeatOutcome> = (0..cfg.repeats).into_par_iter().map(|r| run_repeat(cfg, r)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut audits = Vec::new();
    for (r, f, a) in outcomes {
        rows.extend(r);
        failures.extend(f);
        audits.extend(a);
    }
    if rows.is_empty() {
        let first = failures.first().map_or_else(String::new, |f| f.error.clone());
        return Err(Error::Numerical(format!("every run failed; first error: {first}")));
    }
    let summary = summarize(&rows, &cfg.methods);
    Ok(ExperimentResult { config: cfg.clone(), rows, summary, failures, audits })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

/// Writes `results.csv`, `summary.csv`, `audit.jsonl`, `config.json` and,
/// if any run failed, `failures.csv`.
pub fn write_experiment(result: &ExperimentResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = csv_writer(&dir.join("results.csv"))?;
    for r in &result.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv_writer(&dir.join("summary.csv"))?;
    for r in &result.summary {
        w.serialize(r)?;
    }
    w.flush()?;
    if !result.failures.is_empty() {
        let mut w = csv_writer(&dir.join("failures.csv"))?;
        for r in &result.failures {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    let mut audit = String::new();
    for (repeat, method, log) in &result.audits {
        for entry in log.entries() {
            audit.push_str(&serde_json::to_string(&TaggedAudit { repeat: *repeat, method: *method, entry })?);
            audit.push('\n');
        }
    }
    fs::write(dir.join("audit.jsonl"), audit)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&result.config)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(repeat: usize, task: usize, err: f64) -> ResultRow {
        ResultRow { repeat, task, method: Method::Mtl, squared_error: err, lambda: 0.0, estimate: String::new() }
    }

    #[test]
    fn exact_estimate_has_zero_error() {
        let t = ParamEstimate::pinned(&[2.0, -2.0, 1.0]).unwrap();
        assert_eq!(squared_error(&t, &t, ModelKind::Sim).unwrap(), 0.0);
    }

    #[test]
    fn scalar_error() {
        let e = squared_error(&ParamEstimate::scalar(3.0), &ParamEstimate::scalar(2.0), ModelKind::Plm).unwrap();
        assert_eq!(e, 1.0);
    }

    #[test]
    fn summary_matches_hand_arithmetic() {
        // Two tasks, three repeats.
        // repeat 0: (1, 3) avg 2 max 3; repeat 1: (2, 2) avg 2 max 2; repeat 2: (0, 6) avg 3 max 6.
        let rows = vec![row(0, 1, 1.0), row(0, 2, 3.0), row(1, 1, 2.0), row(1, 2, 2.0), row(2, 1, 0.0), row(2, 2, 6.0)];
        let s = summarize(&rows, &[Method::Mtl]);
        let get = |m: &str| s.iter().find(|r| r.metric == m).unwrap();
        assert!((get("avg_mse").mean - 7.0 / 3.0).abs() < 1e-15);
        // sd of (2, 2, 3) = sqrt(1/3); se = sqrt(1/9) = 1/3.
        assert!((get("avg_mse").se - 1.0 / 3.0).abs() < 1e-15);
        assert!((get("max_mse").mean - 11.0 / 3.0).abs() < 1e-15);
        assert!((get("task1_mse").mean - 1.0).abs() < 1e-15);
        assert!((get("task2_mse").mean - 11.0 / 3.0).abs() < 1e-15);
        assert_eq!(get("task2_mse").repeats, 3);
    }

    #[test]
    fn scenario3_at_full_similarity_has_no_outlier_shift() {
        let cfg = ScenarioConfig::new(3, 40, 1.0);
        let s = generate_scenario(&cfg, 0).unwrap();
        for t in &s.truths {
            assert_eq!(t.theta, vec![2.0]);
        }
    }

    #[test]
    fn scenario2_pins_by_first_coordinate() {
        let cfg = ScenarioConfig::new(2, 40, 1.0);
        let s = generate_scenario(&cfg, 3).unwrap();
        let raw = &s.raw_thetas[0];
        for (l, v) in s.truths[0].theta.iter().enumerate() {
            assert!((v - raw[l] / raw[0]).abs() < 1e-15);
        }
        assert!((raw[0] - 2.0 - 0.05 * s.draws.b[0][0]).abs() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic_and_eta_only_moves_shifted_terms() {
        let mut cfg = ScenarioConfig::new(3, 40, 0.3);
        cfg.seed = 11;
        let a = generate_scenario(&cfg, 2).unwrap();
        let b = generate_scenario(&cfg, 2).unwrap();
        assert_eq!(a.datasets, b.datasets);
        cfg.eta = 0.3 + 1e-9;
        let c = generate_scenario(&cfg, 2).unwrap();
        assert_eq!(a.draws, c.draws);
        assert_eq!(a.datasets[0].x(), c.datasets[0].x());
        // Tasks 1–3 have η only through θ_k.
        let dt = (a.datasets[0].t().unwrap() - c.datasets[0].t().unwrap()).amax();
        assert_eq!(dt, 0.0);
        let dy = (a.datasets[0].y() - c.datasets[0].y()).amax();
        assert!(dy > 0.0 && dy < 1e-6, "{dy}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ScenarioConfig::new(4, 100, 0.5).validate().is_err());
        assert!(ScenarioConfig::new(1, 39, 0.5).validate().is_err());
        assert!(ScenarioConfig::new(1, 100, 1.5).validate().is_err());
        let mut c = ScenarioConfig::new(2, 100, 0.5);
        c.repeats = 0;
        assert!(c.validate().is_err());
    }
}
