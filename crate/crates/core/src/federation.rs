//! In-process simulation of the node/server protocol.
//!
//! Nodes own their raw samples; everything that crosses the boundary is a
//! typed [`FederationMessage`] that is validated against the dimension
//! table and appended to an [`AuditLog`] before delivery. Rounds are
//! synchronous; node work inside a round runs in parallel and is collected
//! in task order, so transcripts are deterministic.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_fold_plan, FoldPlan, ModelKind, ParamEstimate, TaskDataset};
use crate::error::{Error, Result};
use crate::fusion::{
    argmin_prefer_last, default_lambda_grid, default_weights, solve_fusion, solve_without_fold, validation_loss, FusionProblem,
    FusionSolution, LambdaSelection,
};
use crate::kernel::pooled_sd;
use crate::moments::{
    build_fold_surrogates, clip_propensity, combine_fold_surrogates, fit_initial_plm_with, fit_initial_single_index,
    fit_initial_single_index_with, kernel_halves, BandwidthPolicy, CovariateNuisances, FoldSurrogate, InitialFit,
    KernelIndexFitter, QuadraticSurrogate, SharedRegressor, SingleIndexOptions,
};
use crate::moments::nuisance::MeanRegressor;
use crate::nuisance_fusion::{
    build_grid, candidate_loss, default_nuisance_bandwidths, default_nuisance_lambda_grid, fuse_nuisance, DomainBox,
    GridKind, GridPrediction, GridStats, LocalAnchor, NuisanceGridFit, TaskTarget,
};

/// Estimation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Individual-task learning: every task's unpenalized surrogate minimizer.
    #[serde(rename = "itl")]
    Itl,
    /// Fused parameters with kernel nuisances.
    #[serde(rename = "mtl")]
    Mtl,
    /// Fused parameters with fused covariate-level nuisances.
    #[serde(rename = "mtl-nuis")]
    MtlNuis,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Itl => "itl",
            Method::Mtl => "mtl",
            Method::MtlNuis => "mtl-nuis",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "itl" => Ok(Method::Itl),
            "mtl" => Ok(Method::Mtl),
            "mtl-nuis" | "mtl_nuis" => Ok(Method::MtlNuis),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    NodeToServer,
    ServerToNode,
}

/// Message body. Every vector has a length fixed by the model dimension,
/// the grid size or the candidate grids, never by a sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Config { fields: BTreeMap<String, Vec<f64>> },
    Surrogate { g: Vec<f64>, w: Vec<f64>, weight: f64 },
    FoldSurrogate { folds: Vec<FoldSurrogate> },
    /// Local statistics of one fold, ordered `[bandwidth][half]`.
    GridStats { nuisance: String, fold: usize, stats: Vec<GridStats> },
    /// Fused values of one fold, ordered `[bandwidth][penalty][half]`.
    NuisanceGrids { nuisance: String, fold: usize, values: Vec<Vec<f64>> },
    CenterEstimates { fold: Option<usize>, lambdas: Vec<f64>, u0: Vec<Vec<f64>>, u: Vec<Vec<f64>> },
    ValidationLoss { fold: Option<usize>, candidates: Vec<Vec<f64>>, loss: Vec<f64> },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Config { .. } => "config",
            Payload::Surrogate { .. } => "surrogate",
            Payload::FoldSurrogate { .. } => "fold_surrogate",
            Payload::GridStats { .. } => "grid_stats",
            Payload::NuisanceGrids { .. } => "nuisance_grids",
            Payload::CenterEstimates { .. } => "center_estimates",
            Payload::ValidationLoss { .. } => "validation_loss",
        }
    }

    /// Named vector fields with their lengths.
    pub fn fields(&self) -> Vec<(String, usize)> {
        match self {
            Payload::Config { fields } => fields.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
            Payload::Surrogate { g, w, .. } => vec![("g".into(), g.len()), ("w".into(), w.len()), ("weight".into(), 1)],
            Payload::FoldSurrogate { folds } => folds
                .iter()
                .enumerate()
                .flat_map(|(i, f)| [(format!("folds[{i}].g_sum"), f.g_sum.len()), (format!("folds[{i}].w_sum"), f.w_sum.len())])
                .collect(),
            Payload::GridStats { stats, .. } => stats
                .iter()
                .enumerate()
                .flat_map(|(i, s)| [(format!("stats[{i}].g"), s.g.len()), (format!("stats[{i}].mask"), s.mask.len())])
                .collect(),
            Payload::NuisanceGrids { values, .. } => {
                values.iter().enumerate().map(|(i, v)| (format!("values[{i}]"), v.len())).collect()
            }
            Payload::CenterEstimates { lambdas, u0, u, .. } => std::iter::once(("lambdas".to_string(), lambdas.len()))
                .chain(u0.iter().enumerate().map(|(i, v)| (format!("u0[{i}]"), v.len())))
                .chain(u.iter().enumerate().map(|(i, v)| (format!("u[{i}]"), v.len())))
                .collect(),
            Payload::ValidationLoss { candidates, loss, .. } => std::iter::once(("loss".to_string(), loss.len()))
                .chain(candidates.iter().enumerate().map(|(i, c)| (format!("candidates[{i}]"), c.len())))
                .collect(),
        }
    }

    /// 8 bytes per number (including fold indices and counts), 1 per mask
    /// entry.
    pub fn byte_size(&self) -> usize {
        match self {
            Payload::Config { fields } => 8 * fields.values().map(Vec::len).sum::<usize>(),
            Payload::Surrogate { g, w, .. } => 8 * (g.len() + w.len() + 1),
            Payload::FoldSurrogate { folds } => 8 * folds.iter().map(|f| f.g_sum.len() + f.w_sum.len() + 2).sum::<usize>(),
            Payload::GridStats { stats, .. } => 8 + stats.iter().map(|s| 8 * s.g.len() + s.mask.len()).sum::<usize>(),
            Payload::NuisanceGrids { values, .. } => 8 + 8 * values.iter().map(Vec::len).sum::<usize>(),
            Payload::CenterEstimates { fold, lambdas, u0, u } => {
                8 * (usize::from(fold.is_some()) + lambdas.len() + u0.iter().chain(u).map(Vec::len).sum::<usize>())
            }
            Payload::ValidationLoss { fold, candidates, loss } => {
                8 * (usize::from(fold.is_some()) + loss.len() + candidates.iter().map(Vec::len).sum::<usize>())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationMessage {
    pub round: usize,
    pub direction: Direction,
    /// The node sending or receiving the message.
    pub task: usize,
    pub payload: Payload,
}

impl FederationMessage {
    pub fn byte_size(&self) -> usize {
        self.payload.byte_size()
    }
}

/// Dimension table the validator checks payloads against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageContext {
    /// Free parameter dimension.
    pub d: usize,
    pub folds: usize,
    pub sample_sizes: Vec<usize>,
    pub grid_len: Option<usize>,
    pub bandwidth_candidates: usize,
    pub penalty_candidates: usize,
    pub max_config_len: usize,
}

/// Config field names that would carry raw per-sample columns.
const RAW_FIELDS: [&str; 4] = ["x", "t", "y", "z"];

fn is_raw_name(name: &str) -> bool {
    let base = name.split('[').next().unwrap_or(name);
    RAW_FIELDS.contains(&base) || base.starts_with("raw") || (base.starts_with('x') && base[1..].parse::<usize>().is_ok())
}

/// Structural privacy and shape check; `Err` carries a description naming
/// the offending field.
pub fn validate_message(msg: &FederationMessage, ctx: &MessageContext) -> std::result::Result<(), String> {
    let size_note = |len: usize| {
        if ctx.sample_sizes.contains(&len) {
            " (matches a task sample size)"
        } else {
            ""
        }
    };
    let expect = |name: &str, len: usize, want: usize| -> std::result::Result<(), String> {
        if len == want {
            Ok(())
        } else {
            Err(format!("field `{name}` has length {len}{}, expected {want}", size_note(len)))
        }
    };
    let at_most = |name: &str, len: usize, max: usize| -> std::result::Result<(), String> {
        if len <= max {
            Ok(())
        } else {
            Err(format!("field `{name}` has length {len}{}, above the limit {max}", size_note(len)))
        }
    };
    let d = ctx.d;
    match &msg.payload {
        Payload::Config { fields } => {
            for (name, v) in fields {
                if is_raw_name(name) {
                    return Err(format!("field `{name}` is tagged raw-sample"));
                }
                at_most(name, v.len(), ctx.max_config_len)?;
            }
        }
        Payload::Surrogate { g, w, weight } => {
            expect("g", g.len(), d)?;
            expect("w", w.len(), d * d)?;
            if !weight.is_finite() {
                return Err("field `weight` is not finite".into());
            }
        }
        Payload::FoldSurrogate { folds } => {
            at_most("folds", folds.len(), ctx.folds)?;
            for (i, f) in folds.iter().enumerate() {
                expect(&format!("folds[{i}].g_sum"), f.g_sum.len(), d)?;
                expect(&format!("folds[{i}].w_sum"), f.w_sum.len(), d * d)?;
            }
        }
        Payload::GridStats { stats, .. } => {
            let m = ctx.grid_len.ok_or("grid statistics sent before a grid was agreed")?;
            at_most("stats", stats.len(), 2 * ctx.bandwidth_candidates)?;
            for (i, s) in stats.iter().enumerate() {
                expect(&format!("stats[{i}].g"), s.g.len(), m)?;
                expect(&format!("stats[{i}].mask"), s.mask.len(), m)?;
            }
        }
        Payload::NuisanceGrids { values, .. } => {
            let m = ctx.grid_len.ok_or("nuisance grids sent before a grid was agreed")?;
            at_most("values", values.len(), 2 * ctx.bandwidth_candidates * ctx.penalty_candidates)?;
            for (i, v) in values.iter().enumerate() {
                expect(&format!("values[{i}]"), v.len(), m)?;
            }
        }
        Payload::CenterEstimates { lambdas, u0, u, .. } => {
            at_most("lambdas", lambdas.len(), ctx.penalty_candidates)?;
            expect("u0", u0.len(), lambdas.len())?;
            expect("u", u.len(), lambdas.len())?;
            for (i, v) in u0.iter().enumerate() {
                expect(&format!("u0[{i}]"), v.len(), d)?;
            }
            for (i, v) in u.iter().enumerate() {
                expect(&format!("u[{i}]"), v.len(), d)?;
            }
        }
        Payload::ValidationLoss { candidates, loss, .. } => {
            at_most("loss", loss.len(), ctx.penalty_candidates * ctx.bandwidth_candidates.max(1))?;
            expect("candidates", candidates.len(), loss.len())?;
            for (i, c) in candidates.iter().enumerate() {
                at_most(&format!("candidates[{i}]"), c.len(), 2)?;
            }
        }
    }
    Ok(())
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: usize,
    pub round: usize,
    pub direction: Direction,
    pub task: usize,
    pub kind: String,
    pub dims: Vec<usize>,
    pub bytes: usize,
}

/// Append-only message summaries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    entries: Vec<AuditEntry>,
}

impl AuditLog {
    fn push(&mut self, msg: &FederationMessage) {
        self.entries.push(AuditEntry {
            seq: self.entries.len(),
            round: msg.round,
            direction: msg.direction,
            task: msg.task,
            kind: msg.payload.kind().to_string(),
            dims: msg.payload.fields().into_iter().map(|(_, l)| l).collect(),
            bytes: msg.byte_size(),
        });
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self, round: usize, direction: Direction) -> usize {
        self.entries.iter().filter(|e| e.round == round && e.direction == direction).map(|e| e.bytes).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("audit entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Entries with a dimension equal to one of `sample_sizes` that is not
    /// also an allowed fixed dimension.
    pub fn size_scaling_entries(&self, sample_sizes: &[usize], allowed: &[usize]) -> Vec<&AuditEntry> {
        self.entries
            .iter()
            .filter(|e| e.dims.iter().any(|d| sample_sizes.contains(d) && !allowed.contains(d)))
            .collect()
    }
}

struct Bus {
    log: AuditLog,
    ctx: MessageContext,
    ceiling: usize,
    round: usize,
    upload: usize,
}

impl Bus {
    fn next_round(&mut self) {
        self.round += 1;
        self.upload = 0;
    }

    fn send(&mut self, direction: Direction, task: usize, payload: Payload) -> Result<Payload> {
        let msg = FederationMessage { round: self.round, direction, task, payload };
        if let Err(v) = validate_message(&msg, &self.ctx) {
            return Err(Error::Privacy(format!(
                "round {} {} message to/from task {task} rejected: {v}",
                self.round,
                msg.payload.kind()
            )));
        }
        if direction == Direction::NodeToServer {
            self.upload += msg.byte_size();
            if self.upload > self.ceiling {
                return Err(Error::Privacy(format!(
                    "round {} uploads {} bytes, above the ceiling of {}",
                    self.round, self.upload, self.ceiling
                )));
            }
        }
        self.log.push(&msg);
        Ok(msg.payload)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kind: ModelKind,
    pub method: Method,
    pub folds: usize,
    /// Fold plan of task `k` is seeded with `seed + k`.
    pub seed: u64,
    /// `None` uses the default grid; ignored for individual-task learning.
    pub lambda_grid: Option<Vec<f64>>,
    pub bandwidth: BandwidthPolicy,
    pub max_outer: usize,
    /// Covariate domain for the nuisance grid; `None` merges the nodes'
    /// bounding boxes.
    pub domain: Option<DomainBox>,
    pub grid_budget: Option<usize>,
    pub nuisance_bandwidths: Option<Vec<f64>>,
    pub nuisance_lambdas: Option<Vec<f64>>,
    pub grid_prediction: GridPrediction,
    /// Largest total node-to-server payload per round, in bytes.
    pub byte_ceiling: usize,
}

impl PipelineConfig {
    pub fn new(kind: ModelKind, method: Method) -> Self {
        Self {
            kind,
            method,
            folds: 5,
            seed: 0,
            lambda_grid: None,
            bandwidth: BandwidthPolicy::default(),
            max_outer: 50,
            domain: None,
            grid_budget: None,
            nuisance_bandwidths: None,
            nuisance_lambdas: None,
            grid_prediction: GridPrediction::default(),
            byte_ceiling: 16 << 20,
        }
    }
}

pub fn task_plan_seed(seed: u64, task: usize) -> u64 {
    seed.wrapping_add(task as u64)
}

/// Fold plans used by the pipeline, one per task.
pub fn pipeline_plans(datasets: &[TaskDataset], folds: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    datasets.iter().enumerate().map(|(k, d)| make_fold_plan(d.n(), folds, task_plan_seed(seed, k))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceReport {
    pub name: String,
    pub grid_len: usize,
    pub hbar: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub kind: ModelKind,
    pub method: Method,
    pub estimates: Vec<ParamEstimate>,
    /// Fold-pooled initial estimates.
    pub initial: Vec<ParamEstimate>,
    pub initial_converged: Vec<bool>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub lambda_selection: Option<LambdaSelection>,
    pub solution: FusionSolution,
    /// False when the method asked for fused nuisances but the model has
    /// none at the covariate level.
    pub nuisance_fused: bool,
    pub nuisance: Vec<NuisanceReport>,
    pub audit: AuditLog,
}

struct NodeState<'a> {
    data: &'a TaskDataset,
    plan: FoldPlan,
    halves: Option<Vec<[CovariateNuisances; 2]>>,
}

/// Regression targets fused for each model kind.
pub fn nuisance_targets(kind: ModelKind, data: &TaskDataset) -> Result<Vec<(&'static str, TaskTarget)>> {
    let n = data.n();
    let y: Vec<f64> = data.y().iter().copied().collect();
    match kind {
        ModelKind::Sim => Ok(Vec::new()),
        ModelKind::Plm => {
            let t: Vec<f64> = data.t().ok_or_else(|| Error::MissingColumn("t".into()))?.iter().copied().collect();
            Ok(vec![("mu", TaskTarget::new(data, y, vec![true; n])?), ("g", TaskTarget::new(data, t, vec![true; n])?)])
        }
        ModelKind::CateSim => {
            let t = data.t().ok_or_else(|| Error::MissingColumn("t".into()))?;
            let treated: Vec<bool> = t.iter().map(|v| *v > 0.0).collect();
            let control: Vec<bool> = treated.iter().map(|b| !b).collect();
            let ind: Vec<f64> = treated.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            Ok(vec![
                ("mu_treated", TaskTarget::new(data, y.clone(), treated)?),
                ("mu_control", TaskTarget::new(data, y, control)?),
                ("propensity", TaskTarget::new(data, ind, vec![true; n])?),
            ])
        }
    }
}

/// Covariate nuisances from fused grid fits (`fits[name][j][m]`).
pub fn covariate_halves_from_fits(kind: ModelKind, fits: &[Vec<[NuisanceGridFit; 2]>]) -> Result<Vec<[CovariateNuisances; 2]>> {
    let arc = |f: &NuisanceGridFit| -> Result<SharedRegressor> {
        if !f.valid.iter().any(|&v| v) {
            return Err(Error::DegenerateDesign("a fused nuisance has no valid grid point".into()));
        }
        Ok(Arc::new(f.clone()))
    };
    let folds = fits[0].len();
    (0..folds)
        .map(|j| {
            let half = |m: usize| -> Result<CovariateNuisances> {
                match kind {
                    ModelKind::Plm => Ok(CovariateNuisances { mu: arc(&fits[0][j][m])?, aux: arc(&fits[1][j][m])? }),
                    ModelKind::CateSim => Ok(CovariateNuisances {
                        mu: Arc::new(MeanRegressor(vec![arc(&fits[0][j][m])?, arc(&fits[1][j][m])?])),
                        aux: clip_propensity(arc(&fits[2][j][m])?),
                    }),
                    ModelKind::Sim => Err(Error::InvalidConfig("no covariate nuisances for this model".into())),
                }
            };
            Ok([half(0)?, half(1)?])
        })
        .collect()
}

/// Initial fit of one task given optional externally fitted halves.
pub fn local_initial_fit(
    data: &TaskDataset,
    plan: &FoldPlan,
    kind: ModelKind,
    halves: Option<&[[CovariateNuisances; 2]]>,
    policy: &BandwidthPolicy,
    max_outer: usize,
) -> Result<InitialFit> {
    match kind {
        ModelKind::Plm => match halves {
            Some(h) => fit_initial_plm_with(data, plan, h),
            None => fit_initial_plm_with(data, plan, &kernel_halves(data, plan, kind, policy)?),
        },
        ModelKind::Sim => fit_initial_single_index(data, plan, kind, policy, max_outer),
        ModelKind::CateSim => {
            let owned;
            let cov = match halves {
                Some(h) => h,
                None => {
                    owned = kernel_halves(data, plan, kind, policy)?;
                    &owned[..]
                }
            };
            fit_initial_single_index_with(
                data,
                plan,
                kind,
                Some(cov),
                &KernelIndexFitter { policy: *policy },
                &SingleIndexOptions { max_outer, init: None },
            )
        }
    }
}

fn check_inputs(datasets: &[TaskDataset], config: &PipelineConfig) -> Result<usize> {
    let first = datasets.first().ok_or_else(|| Error::InvalidConfig("no tasks supplied".into()))?;
    let p = first.p();
    for d in datasets {
        if d.p() != p {
            return Err(Error::Dimension(format!("task {} has {} covariates, expected {p}", d.task_id(), d.p())));
        }
        d.check_kind(config.kind)?;
    }
    if config.folds == 0 {
        return Err(Error::InvalidConfig("at least one fold is required".into()));
    }
    if config.kind.is_single_index() && p < 2 {
        return Err(Error::InvalidConfig("single-index models need at least two covariates".into()));
    }
    if let Some(g) = &config.lambda_grid {
        crate::fusion::check_grid(g)?;
    }
    Ok(p)
}

fn field(name: &str, v: Vec<f64>) -> (String, Vec<f64>) {
    (name.to_string(), v)
}

/// Runs the complete protocol and returns per-task estimates with the
/// audit transcript.
pub fn run_pipeline(datasets: &[TaskDataset], config: &PipelineConfig) -> Result<PipelineOutput> {
    let p = check_inputs(datasets, config)?;
    let kind = config.kind;
    let k_count = datasets.len();
    let d = kind.param_dim(p);
    let sizes: Vec<usize> = datasets.iter().map(TaskDataset::n).collect();
    let plans = pipeline_plans(datasets, config.folds, config.seed)?;
    let fuse_nuisances = config.method == Method::MtlNuis && kind != ModelKind::Sim;
    let lambda_grid: Vec<f64> = match config.method {
        Method::Itl => vec![0.0],
        _ => config.lambda_grid.clone().unwrap_or_else(|| {
            default_lambda_grid(k_count, sizes.iter().sum::<usize>() as f64 / k_count as f64)
        }),
    };
    let tune = lambda_grid.len() > 1;
    if tune && config.folds < 2 {
        return Err(Error::InvalidConfig("λ cross-validation needs at least two folds".into()));
    }

    let mut bus = Bus {
        log: AuditLog::default(),
        ctx: MessageContext {
            d,
            folds: config.folds,
            sample_sizes: sizes.clone(),
            grid_len: None,
            bandwidth_candidates: config.nuisance_bandwidths.as_ref().map_or(5, Vec::len),
            penalty_candidates: lambda_grid.len().max(config.nuisance_lambdas.as_ref().map_or(8, Vec::len)),
            max_config_len: (2 * p).max(64),
        },
        ceiling: config.byte_ceiling,
        round: 0,
        upload: 0,
    };

    // Round 0: configuration, node summaries, weights.
    for k in 0..k_count {
        bus.send(
            Direction::ServerToNode,
            k,
            Payload::Config {
                fields: BTreeMap::from([
                    field("folds", vec![config.folds as f64]),
                    field("seed", vec![config.seed as f64]),
                    field("lambda_grid", lambda_grid.clone()),
                ]),
            },
        )?;
    }
    let targets: Vec<Vec<(&'static str, TaskTarget)>> = if fuse_nuisances {
        datasets.iter().map(|dset| nuisance_targets(kind, dset)).collect::<Result<_>>()?
    } else {
        vec![Vec::new(); k_count]
    };
    let mut summaries = Vec::with_capacity(k_count);
    for (k, dset) in datasets.iter().enumerate() {
        let all: Vec<usize> = (0..dset.n()).collect();
        let rows = dset.rows_flat(&all);
        let bbox = DomainBox::bounding(&rows, p)?;
        let mut fields = BTreeMap::from([
            field("n", vec![dset.n() as f64]),
            field("scale", vec![pooled_sd(&rows, p)]),
            field("lower", bbox.lower.clone()),
            field("upper", bbox.upper.clone()),
        ]);
        for (name, t) in &targets[k] {
            let used: Vec<f64> = t.members(&all).iter().map(|&i| t.y[i]).collect();
            fields.insert(format!("sd_{name}"), vec![pooled_sd(&used, 1)]);
        }
        let Payload::Config { fields } = bus.send(Direction::NodeToServer, k, Payload::Config { fields })? else {
            unreachable!()
        };
        summaries.push(fields);
    }
    let received_sizes: Vec<usize> = summaries.iter().map(|f| f["n"][0] as usize).collect();
    let weights = default_weights(&received_sizes);
    for (k, w) in weights.iter().enumerate() {
        bus.send(Direction::ServerToNode, k, Payload::Config { fields: BTreeMap::from([field("weight", vec![*w])]) })?;
    }

    let mut nodes: Vec<NodeState> =
        datasets.iter().zip(plans).map(|(data, plan)| NodeState { data, plan, halves: None }).collect();

    // Optional nuisance-fusion rounds.
    let mut nuisance_reports = Vec::new();
    if fuse_nuisances {
        bus.next_round();
        let names: Vec<&'static str> = targets[0].iter().map(|(n, _)| *n).collect();
        let mean = |key: &str| summaries.iter().map(|f| f[key][0]).sum::<f64>() / k_count as f64;
        let domain = match &config.domain {
            Some(b) => b.clone(),
            None => DomainBox::union(
                &summaries
                    .iter()
                    .map(|f| DomainBox::new(f["lower"].clone(), f["upper"].clone()))
                    .collect::<Result<Vec<_>>>()?,
            )?,
        };
        let mean_n = mean("n");
        let half_size = mean_n * (config.folds.max(2) - 1) as f64 / config.folds.max(2) as f64 / 2.0;
        let hbar_grid = config
            .nuisance_bandwidths
            .clone()
            .unwrap_or_else(|| default_nuisance_bandwidths(half_size, p, mean("scale")));
        let budget = config.grid_budget.unwrap_or_else(|| 512.min(8 * mean_n as usize).max(8));
        let grid = Arc::new(build_grid(&domain, hbar_grid[0], GridKind::Lattice, budget)?);
        bus.ctx.grid_len = Some(grid.len());
        bus.ctx.bandwidth_candidates = hbar_grid.len();
        let lambda_grids: Vec<Vec<f64>> = names
            .iter()
            .map(|name| {
                config
                    .nuisance_lambdas
                    .clone()
                    .unwrap_or_else(|| default_nuisance_lambda_grid(mean(&format!("sd_{name}")), grid.len()))
            })
            .collect();
        bus.ctx.penalty_candidates = bus.ctx.penalty_candidates.max(lambda_grids.iter().map(Vec::len).max().unwrap_or(1));
        for k in 0..k_count {
            let mut fields = BTreeMap::from([
                field("hbar", hbar_grid.clone()),
                field("lower", domain.lower.clone()),
                field("upper", domain.upper.clone()),
                field("budget", vec![budget as f64]),
            ]);
            for (name, lg) in names.iter().zip(&lambda_grids) {
                fields.insert(format!("lambda_{name}"), lg.clone());
            }
            bus.send(Direction::ServerToNode, k, Payload::Config { fields })?;
        }

        let mut fitted: Vec<Vec<Vec<[NuisanceGridFit; 2]>>> = vec![Vec::new(); k_count];
        for (ni, name) in names.iter().enumerate() {
            let lgrid = &lambda_grids[ni];
            let (nh, nl) = (hbar_grid.len(), lgrid.len());
            // values[k][j][(a * nl + b) * 2 + m]
            let mut received: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::new(); k_count];
            let mut masks: Vec<Vec<Vec<Vec<bool>>>> = vec![Vec::new(); k_count];
            // Node-local kernel fits, `[k][j][a * 2 + m]`; never transmitted.
            let mut anchors: Vec<Vec<Vec<Option<Arc<LocalAnchor>>>>> = vec![Vec::new(); k_count];
            for j in 0..config.folds {
                bus.next_round();
                let local: Vec<(Vec<GridStats>, Vec<Option<Arc<LocalAnchor>>>)> = nodes
                    .par_iter()
                    .enumerate()
                    .map(|(k, node)| {
                        let t = &targets[k][ni].1;
                        let mut out = Vec::with_capacity(2 * nh);
                        let mut anc = Vec::with_capacity(2 * nh);
                        for &h in &hbar_grid {
                            for m in 0..2 {
                                let half = &node.plan.halves(j)[m];
                                let st = t.stats(half, &grid, h)?;
                                anc.push(if config.grid_prediction.uses_anchor(&grid) { t.anchor(half, &st, h)? } else { None });
                                out.push(st);
                            }
                        }
                        Ok((out, anc))
                    })
                    .collect::<Result<_>>()?;
                let local: Vec<Vec<GridStats>> = local
                    .into_iter()
                    .enumerate()
                    .map(|(k, (st, anc))| {
                        anchors[k].push(anc);
                        st
                    })
                    .collect();
                let mut stats_at_server = Vec::with_capacity(k_count);
                for (k, stats) in local.into_iter().enumerate() {
                    let Payload::GridStats { stats, .. } =
                        bus.send(Direction::NodeToServer, k, Payload::GridStats { nuisance: name.to_string(), fold: j, stats })?
                    else {
                        unreachable!()
                    };
                    stats_at_server.push(stats);
                }
                // Server: one fusion solve per (bandwidth, penalty, half).
                let solves: Vec<crate::nuisance_fusion::GridFusion> = (0..nh * nl * 2)
                    .into_par_iter()
                    .map(|idx| {
                        let (a, b, m) = (idx / (2 * nl), (idx / 2) % nl, idx % 2);
                        let s: Vec<GridStats> = stats_at_server.iter().map(|st| st[a * 2 + m].clone()).collect();
                        fuse_nuisance(&s, &weights, lgrid[b])
                    })
                    .collect::<Result<_>>()?;
                for k in 0..k_count {
                    let values: Vec<Vec<f64>> = solves.iter().map(|f| f.values[k].clone()).collect();
                    let Payload::NuisanceGrids { values, .. } =
                        bus.send(Direction::ServerToNode, k, Payload::NuisanceGrids { nuisance: name.to_string(), fold: j, values })?
                    else {
                        unreachable!()
                    };
                    received[k].push(values);
                    masks[k].push(stats_at_server[k].iter().map(|s| s.mask.clone()).collect());
                }
            }
            // Nodes score every candidate on held halves and keep their own
            // choice.
            bus.next_round();
            let fit_at = |k: usize, j: usize, a: usize, b: usize, m: usize| NuisanceGridFit {
                grid: grid.clone(),
                values: received[k][j][(a * nl + b) * 2 + m].clone(),
                bandwidth: hbar_grid[a],
                lambda: lgrid[b],
                valid: masks[k][j][a * 2 + m].clone(),
                anchor: anchors[k][j][a * 2 + m].clone(),
            };
            let choices: Vec<(Vec<f64>, usize)> = (0..k_count)
                .into_par_iter()
                .map(|k| {
                    let mut losses = Vec::with_capacity(nh * nl);
                    for a in 0..nh {
                        for b in 0..nl {
                            let fits: Vec<[NuisanceGridFit; 2]> =
                                (0..config.folds).map(|j| [fit_at(k, j, a, b, 0), fit_at(k, j, a, b, 1)]).collect();
                            losses.push(candidate_loss(&targets[k][ni].1, &nodes[k].plan, &fits));
                        }
                    }
                    let best = argmin_prefer_last(&losses);
                    (losses, best)
                })
                .collect();
            let mut chosen_h = Vec::with_capacity(k_count);
            let mut chosen_l = Vec::with_capacity(k_count);
            for (k, (losses, best)) in choices.into_iter().enumerate() {
                let candidates: Vec<Vec<f64>> =
                    (0..nh * nl).map(|c| vec![hbar_grid[c / nl], lgrid[c % nl]]).collect();
                bus.send(Direction::NodeToServer, k, Payload::ValidationLoss { fold: None, candidates, loss: losses })?;
                let (a, b) = (best / nl, best % nl);
                chosen_h.push(hbar_grid[a]);
                chosen_l.push(lgrid[b]);
                fitted[k].push((0..config.folds).map(|j| [fit_at(k, j, a, b, 0), fit_at(k, j, a, b, 1)]).collect());
            }
            nuisance_reports.push(NuisanceReport { name: name.to_string(), grid_len: grid.len(), hbar: chosen_h, lambda: chosen_l });
        }
        for (node, fits) in nodes.iter_mut().zip(&fitted) {
            node.halves = Some(covariate_halves_from_fits(kind, fits)?);
        }
    }

    // Local initial fits and surrogates.
    let local: Vec<(InitialFit, Vec<FoldSurrogate>)> = nodes
        .par_iter()
        .map(|node| {
            let init = local_initial_fit(node.data, &node.plan, kind, node.halves.as_deref(), &config.bandwidth, config.max_outer)?;
            let folds = build_fold_surrogates(node.data, &node.plan, &init, kind)?;
            Ok((init, folds))
        })
        .collect::<Result<_>>()?;

    bus.next_round();
    let mut surrogates = Vec::with_capacity(k_count);
    for (k, (_, folds)) in local.iter().enumerate() {
        let s = combine_fold_surrogates(k, folds, None, weights[k])?;
        let payload = Payload::Surrogate { g: s.g.iter().copied().collect(), w: s.w.transpose().iter().copied().collect(), weight: s.weight };
        let Payload::Surrogate { g, w, weight } = bus.send(Direction::NodeToServer, k, payload)? else { unreachable!() };
        surrogates.push(QuadraticSurrogate::new(k, DVector::from_vec(g), DMatrix::from_row_slice(d, d, &w), weight)?);
    }

    // λ selection by leave-one-fold-out validation.
    let mut selection = None;
    let lambda = if tune {
        bus.next_round();
        let mut server_folds = Vec::with_capacity(k_count);
        for (k, (_, folds)) in local.iter().enumerate() {
            let Payload::FoldSurrogate { folds } = bus.send(Direction::NodeToServer, k, Payload::FoldSurrogate { folds: folds.clone() })?
            else {
                unreachable!()
            };
            server_folds.push(folds);
        }
        let mut fold_losses = vec![vec![0.0; config.folds]; lambda_grid.len()];
        for j in 0..config.folds {
            bus.next_round();
            let sols: Vec<FusionSolution> = lambda_grid
                .par_iter()
                .map(|&lam| solve_without_fold(&server_folds, &weights, j, lam))
                .collect::<Result<_>>()?;
            let mut per_task = Vec::with_capacity(k_count);
            for k in 0..k_count {
                let payload = Payload::CenterEstimates {
                    fold: Some(j),
                    lambdas: lambda_grid.clone(),
                    u0: sols.iter().map(|s| s.u0.clone()).collect(),
                    u: sols.iter().map(|s| s.u[k].clone()).collect(),
                };
                let Payload::CenterEstimates { u, .. } = bus.send(Direction::ServerToNode, k, payload)? else { unreachable!() };
                // Node side: score each candidate on the held fold.
                let held = &local[k].1[j];
                per_task.push(u.iter().map(|uk| validation_loss(held, uk)).collect::<Vec<f64>>());
            }
            for (k, losses) in per_task.into_iter().enumerate() {
                let candidates = lambda_grid.iter().map(|l| vec![*l]).collect();
                let Payload::ValidationLoss { loss, .. } =
                    bus.send(Direction::NodeToServer, k, Payload::ValidationLoss { fold: Some(j), candidates, loss: losses })?
                else {
                    unreachable!()
                };
                for (i, l) in loss.iter().enumerate() {
                    fold_losses[i][j] += weights[k] * l;
                }
            }
        }
        let losses: Vec<f64> = fold_losses
            .iter()
            .map(|per_fold| per_fold.iter().fold(0.0, |acc, l| acc + l) / config.folds as f64)
            .collect();
        let best = argmin_prefer_last(&losses);
        let lam = lambda_grid[best];
        selection = Some(LambdaSelection { lambda: lam, grid: lambda_grid.clone(), losses });
        lam
    } else {
        lambda_grid[0]
    };

    let solution = solve_fusion(&FusionProblem { surrogates, lambda })?;
    bus.next_round();
    let mut estimates = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let payload = Payload::CenterEstimates {
            fold: None,
            lambdas: vec![lambda],
            u0: vec![solution.u0.clone()],
            u: vec![solution.u[k].clone()],
        };
        let Payload::CenterEstimates { u, .. } = bus.send(Direction::ServerToNode, k, payload)? else { unreachable!() };
        estimates.push(ParamEstimate::from_free(kind, &u[0]));
    }

    Ok(PipelineOutput {
        kind,
        method: config.method,
        initial: local.iter().map(|(i, _)| i.pooled.clone()).collect(),
        initial_converged: local.iter().map(|(i, _)| i.folds.iter().all(|f| f.converged)).collect(),
        estimates,
        weights,
        lambda,
        lambda_selection: selection,
        solution,
        nuisance_fused: fuse_nuisances,
        nuisance: nuisance_reports,
        audit: bus.log,
    })
}
