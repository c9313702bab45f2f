//! Command-line surface: cohort fitting, simulation, partition
//! evaluation, and Kaplan-Meier tables, with reproducible run manifests.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bpe::{
    adjust_changepoints, kaplan_meier, kaplan_meier_csv, ChangepointGrid, GammaPrior,
    SurvivalRecord,
};
use crate::data::{
    adjusted_rand_index, load_cohort, membership_diff, project_out_covariates, simulate_cohort,
    to_model_subjects, Cohort, SimScenario,
};
use crate::divisive::{
    default_alpha_grid, fit_cluster_params, run_dhbc, DendrogramNode, DhbcResult, ModelContext,
    RunConfig, SplitInit, SurvivalModel,
};
use crate::lmm::{DesignSpec, LmmPriors};
use crate::matnorm::SpdMatrix;
use crate::posterior::{ClusterParams, SubjectModelData, SurvivalContext, SurvivalParams};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "trajclust",
    version,
    about = "Divisive clustering of longitudinal + survival cohorts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the nested clustering to a cohort and write run outputs.
    Fit(FitArgs),
    /// Simulate a synthetic cohort from a scenario file.
    Simulate(SimulateArgs),
    /// Compare two partition label files.
    Eval(EvalArgs),
    /// Kaplan-Meier product-limit tables, optionally per group.
    Km(KmArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Longitudinal CSV: subject_id, time, <var_1>, ...
    #[arg(long)]
    pub long: PathBuf,
    /// Survival CSV (subject_id, time, event); repeat per event variable.
    #[arg(long = "surv", required = true)]
    pub surv: Vec<PathBuf>,
    /// Static covariate CSV: subject_id, <cov_1>, ...
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Flat TOML config; command-line flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated covariates to project out before fitting.
    #[arg(long, value_delimiter = ',')]
    pub project_out: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_clusters: Option<usize>,
    #[arg(long)]
    pub min_cluster_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker-thread cap (0 = all cores); results are thread-count
    /// independent.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Sensitivity rerun: drop one longitudinal variable by name.
    #[arg(long)]
    pub drop_variable: Option<String>,
    /// Hazard changepoint spacing.
    #[arg(long)]
    pub grid_width: Option<f64>,
    /// "piecewise" (default) or "weibull" (sensitivity comparator).
    #[arg(long)]
    pub survival_model: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario TOML (see `SimScenario`).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted labels CSV: subject_id, cluster.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference labels CSV: subject_id, cluster.
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Args)]
pub struct KmArgs {
    /// Survival CSV: subject_id, time, event.
    #[arg(long)]
    pub surv: PathBuf,
    /// Optional group labels CSV: subject_id, cluster.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flat run configuration, loadable from TOML and echoed verbatim into
/// the manifest. Every field has a default so a partial file is valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_clusters: usize,
    /// 0 means "derive from the model dimension".
    pub min_cluster_size: usize,
    pub alpha_grid: Vec<f64>,
    pub split_init: SplitInit,
    pub survival_model: SurvivalModel,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub grid_width: f64,
    /// 0 means "use all cores".
    pub threads: usize,
    pub fixed_powers: Vec<u32>,
    pub random_powers: Vec<u32>,
    /// Scales the identity scale matrix of the Ω prior.
    pub omega_psi_scale: f64,
    /// 0 means "dimension + 2".
    pub omega_nu: f64,
    pub g_psi_scale: f64,
    pub g_nu: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    pub hazard_prior_shape: f64,
    pub hazard_prior_rate: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            max_clusters: run.max_clusters,
            min_cluster_size: 0,
            alpha_grid: default_alpha_grid(),
            split_init: SplitInit::TwoMeans,
            survival_model: SurvivalModel::Piecewise,
            seed: 0,
            tol: run.tol,
            max_iter: run.max_iter,
            grid_width: 0.5,
            threads: 0,
            fixed_powers: vec![0, 1],
            random_powers: vec![0],
            omega_psi_scale: 1.0,
            omega_nu: 0.0,
            g_psi_scale: 1.0,
            g_nu: 0.0,
            sigma2_shape: 2.0,
            sigma2_rate: 1.0,
            hazard_prior_shape: 1.0,
            hazard_prior_rate: 0.1,
        }
    }
}

impl FitConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Schema {
            file: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }

    fn apply_overrides(&mut self, args: &FitArgs) -> Result<()> {
        if let Some(v) = args.max_clusters {
            self.max_clusters = v;
        }
        if let Some(v) = args.min_cluster_size {
            self.min_cluster_size = v;
        }
        if let Some(v) = args.seed {
            self.seed = v;
        }
        if let Some(v) = args.threads {
            self.threads = v;
        }
        if let Some(v) = args.grid_width {
            self.grid_width = v;
        }
        if let Some(model) = &args.survival_model {
            self.survival_model = match model.as_str() {
                "piecewise" => SurvivalModel::Piecewise,
                "weibull" => SurvivalModel::Weibull,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown survival model '{other}' (expected piecewise or weibull)"
                    )))
                }
            };
        }
        Ok(())
    }

    pub fn design(&self) -> DesignSpec {
        DesignSpec {
            fixed_powers: self.fixed_powers.clone(),
            random_powers: self.random_powers.clone(),
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            max_clusters: self.max_clusters,
            min_cluster_size: (self.min_cluster_size > 0).then_some(self.min_cluster_size),
            alpha_grid: self.alpha_grid.clone(),
            split_init: self.split_init,
            survival_model: self.survival_model,
            seed: self.seed,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    pub fn lmm_priors(&self, h: usize) -> Result<LmmPriors> {
        let q = self.random_powers.len();
        let nu = if self.omega_nu > 0.0 { self.omega_nu } else { h as f64 + 2.0 };
        let g_nu = if self.g_nu > 0.0 { self.g_nu } else { q as f64 + 2.0 };
        LmmPriors::new(
            SpdMatrix::new(nalgebra::DMatrix::identity(h, h) * self.omega_psi_scale)?,
            nu,
            SpdMatrix::new(nalgebra::DMatrix::identity(q, q) * self.g_psi_scale)?,
            g_nu,
            self.sigma2_shape,
            self.sigma2_rate,
            0.0,
        )
    }
}

/// Validation-class failures exit 2; numerical failures exit 3.
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Schema { .. }
        | Error::Missingness { .. }
        | Error::Consistency(_)
        | Error::DuplicateVisit { .. }
        | Error::InvalidArgument(_)
        | Error::TimeBeyondGrid { .. }
        | Error::ChangepointOrdering(_)
        | Error::Io(_)
        | Error::Csv(_) => 2,
        Error::DimensionMismatch(_)
        | Error::DegenerateCovariance(_)
        | Error::DegenerateFit(_)
        | Error::Unassignable => 3,
    }
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Km(args) => cmd_km(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

// ---- serialization shapes ----------------------------------------------

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

#[derive(Debug, Serialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum SurvivalParamsJson {
    Piecewise { cuts: Vec<f64>, lambdas: Vec<f64> },
    Weibull { shape: f64, scale: f64 },
}

#[derive(Debug, Serialize)]
struct ClusterParamsJson {
    b: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    sigma2: f64,
    omega: Vec<Vec<f64>>,
    survival: Vec<SurvivalParamsJson>,
}

fn params_json(params: &ClusterParams, grids: &[ChangepointGrid]) -> ClusterParamsJson {
    ClusterParamsJson {
        b: matrix_rows(&params.lmm.b),
        g: matrix_rows(params.lmm.g.as_matrix()),
        sigma2: params.lmm.sigma2,
        omega: matrix_rows(params.lmm.omega.as_matrix()),
        survival: params
            .survival
            .iter()
            .enumerate()
            .map(|(v, s)| match s {
                SurvivalParams::Piecewise(h) => SurvivalParamsJson::Piecewise {
                    cuts: grids[v].cuts().to_vec(),
                    lambdas: h.lambdas.clone(),
                },
                SurvivalParams::Weibull(w) => SurvivalParamsJson::Weibull {
                    shape: w.shape,
                    scale: w.scale,
                },
            })
            .collect(),
    }
}

#[derive(Debug, Serialize)]
struct DendrogramNodeJson {
    id: usize,
    size: usize,
    subjects: Vec<String>,
    split_alpha: Option<f64>,
    split_log_posterior: Option<f64>,
    params: ClusterParamsJson,
    children: Vec<DendrogramNodeJson>,
}

fn dendrogram_json(
    nodes: &[DendrogramNode],
    id: usize,
    subjects: &[SubjectModelData],
    grids: &[ChangepointGrid],
) -> DendrogramNodeJson {
    let node = &nodes[id];
    DendrogramNodeJson {
        id: node.id,
        size: node.subjects.len(),
        subjects: node.subjects.iter().map(|&i| subjects[i].id.clone()).collect(),
        split_alpha: node.split_alpha,
        split_log_posterior: node.split_log_posterior,
        params: params_json(&node.params, grids),
        children: node
            .children
            .map(|(l, r)| {
                vec![
                    dendrogram_json(nodes, l, subjects, grids),
                    dendrogram_json(nodes, r, subjects, grids),
                ]
            })
            .unwrap_or_default(),
    }
}

#[derive(Debug, Serialize)]
struct AlphaTraceEntry {
    alpha: f64,
    clusters: usize,
    log_posterior: f64,
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    tool_version: String,
    seed: u64,
    config: FitConfig,
    inputs: Vec<InputDigest>,
    alpha_trace: Vec<AlphaTraceEntry>,
    wall_clock_seconds: f64,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

// ---- fit ---------------------------------------------------------------

/// Assemble the design, priors, and per-event changepoint grids for a
/// loaded cohort; shared by `cmd_fit` and the Python bindings.
pub fn build_model_context(cohort: &Cohort, config: &FitConfig) -> Result<ModelContext> {
    let max_t = cohort.max_event_time();
    let eps = 1e-9 * max_t;
    let mut grids = Vec::new();
    let mut gamma_priors = Vec::new();
    for records in &cohort.survival {
        let times: Vec<f64> = records.iter().map(|r| r.t).collect();
        let grid = ChangepointGrid::fixed_width(config.grid_width, max_t)?;
        grids.push(adjust_changepoints(&grid, &times, eps)?);
        gamma_priors.push(GammaPrior::new(
            config.hazard_prior_shape,
            config.hazard_prior_rate,
        )?);
    }
    Ok(ModelContext {
        design: config.design(),
        lmm_priors: config.lmm_priors(cohort.h())?,
        survival: SurvivalContext {
            grids,
            gamma_priors,
        },
        survival_model: config.survival_model,
    })
}

fn configure_threads(threads: usize) {
    if threads > 0 {
        // Ignore failure: the global pool can only be built once (tests
        // invoke this repeatedly in-process).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<i32> {
    let started = Instant::now();
    let mut config = match &args.config {
        Some(path) => FitConfig::from_file(path)?,
        None => FitConfig::default(),
    };
    config.apply_overrides(args)?;
    configure_threads(config.threads);

    // Everything before output-directory creation is validation: a
    // malformed input leaves no partial outputs behind.
    let mut cohort = load_cohort(&args.long, &args.surv, args.covariates.as_deref())?;
    if let Some(var) = &args.drop_variable {
        cohort = cohort.drop_variable(var)?;
    }
    if !args.project_out.is_empty() {
        cohort = project_out_covariates(&cohort, &args.project_out)?;
    }
    let ctx = build_model_context(&cohort, &config)?;
    let subjects = to_model_subjects(&cohort, &ctx.design)?;

    fs::create_dir_all(&args.out)?;
    let result = match run_dhbc(&subjects, &ctx, &config.run_config()) {
        Ok(result) => result,
        Err(e) if exit_code_for(&e) == 3 => {
            // Numerical failure mid-search: leave the best dendrogram we
            // can still produce (the root fit) plus the diagnostics.
            eprintln!("error: {e}");
            if let Ok(root) = fit_root_only(&subjects, &ctx, &config) {
                write_outputs(&args.out, &cohort, &subjects, &ctx, &config, &root, started)?;
            }
            return Ok(3);
        }
        Err(e) => return Err(e),
    };
    write_outputs(&args.out, &cohort, &subjects, &ctx, &config, &result, started)?;
    write_manifest(&args.out, args, &config, &result, started)?;
    Ok(0)
}

fn fit_root_only(
    subjects: &[SubjectModelData],
    ctx: &ModelContext,
    config: &FitConfig,
) -> Result<DhbcResult> {
    let members: Vec<&SubjectModelData> = subjects.iter().collect();
    let params = fit_cluster_params(&members, ctx, config.tol, config.max_iter, None)?;
    Ok(DhbcResult {
        dendrogram: crate::divisive::Dendrogram {
            nodes: vec![DendrogramNode {
                id: 0,
                subjects: (0..subjects.len()).collect(),
                params: params.clone(),
                children: None,
                split_alpha: None,
                split_log_posterior: None,
            }],
            root: 0,
        },
        acceptances: vec![],
        per_alpha: vec![],
        final_labels: vec![0; subjects.len()],
        final_params: vec![params],
    })
}

fn write_outputs(
    out: &Path,
    cohort: &Cohort,
    subjects: &[SubjectModelData],
    ctx: &ModelContext,
    config: &FitConfig,
    result: &DhbcResult,
    _started: Instant,
) -> Result<()> {
    fs::create_dir_all(out)?;

    let mut assignments = String::from("subject_id,cluster\n");
    for (s, &label) in subjects.iter().zip(&result.final_labels) {
        assignments.push_str(&format!("{},{label}\n", s.id));
    }
    fs::write(out.join("assignments.csv"), assignments)?;

    let tree = dendrogram_json(
        &result.dendrogram.nodes,
        result.dendrogram.root,
        subjects,
        &ctx.survival.grids,
    );
    fs::write(
        out.join("dendrogram.json"),
        serde_json::to_string_pretty(&tree).expect("dendrogram serializes"),
    )?;

    #[derive(Serialize)]
    struct FinalCluster {
        cluster: usize,
        size: usize,
        params: ClusterParamsJson,
    }
    let clusters: Vec<FinalCluster> = result
        .final_params
        .iter()
        .enumerate()
        .map(|(k, p)| FinalCluster {
            cluster: k,
            size: result.final_labels.iter().filter(|&&l| l == k).count(),
            params: params_json(p, &ctx.survival.grids),
        })
        .collect();
    fs::write(
        out.join("params.json"),
        serde_json::to_string_pretty(&clusters).expect("params serialize"),
    )?;

    let k_final = result.final_params.len();
    for k in 0..k_final {
        for (v, records) in cohort.survival.iter().enumerate() {
            let group: Vec<SurvivalRecord> = records
                .iter()
                .enumerate()
                .filter(|&(i, _)| result.final_labels[i] == k)
                .map(|(_, r)| r.clone())
                .collect();
            if group.is_empty() {
                continue;
            }
            let steps = kaplan_meier(&group)?;
            let name = if cohort.survival.len() == 1 {
                format!("km_{k}.csv")
            } else {
                format!("km_{k}_{}.csv", cohort.event_names[v])
            };
            fs::write(out.join(name), kaplan_meier_csv(&steps))?;
        }
    }
    let _ = config;
    Ok(())
}

fn write_manifest(
    out: &Path,
    args: &FitArgs,
    config: &FitConfig,
    result: &DhbcResult,
    started: Instant,
) -> Result<()> {
    let mut inputs = vec![InputDigest {
        path: args.long.display().to_string(),
        sha256: sha256_file(&args.long)?,
    }];
    for surv in &args.surv {
        inputs.push(InputDigest {
            path: surv.display().to_string(),
            sha256: sha256_file(surv)?,
        });
    }
    if let Some(cov) = &args.covariates {
        inputs.push(InputDigest {
            path: cov.display().to_string(),
            sha256: sha256_file(cov)?,
        });
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: config.clone(),
        inputs,
        alpha_trace: result
            .per_alpha
            .iter()
            .map(|p| AlphaTraceEntry {
                alpha: p.alpha,
                clusters: p.k,
                log_posterior: p.log_posterior,
            })
            .collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

// ---- simulate ----------------------------------------------------------

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let text = fs::read_to_string(&args.scenario)?;
    let mut scenario: SimScenario = toml::from_str(&text).map_err(|e| Error::Schema {
        file: args.scenario.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let (cohort, labels) = simulate_cohort(&scenario)?;

    fs::create_dir_all(&args.out)?;
    let mut long = String::from("subject_id,time");
    for v in &cohort.variable_names {
        long.push(',');
        long.push_str(v);
    }
    long.push('\n');
    for s in &cohort.subjects {
        for (r, t) in s.times.iter().enumerate() {
            long.push_str(&format!("{},{t}", s.id));
            for v in 0..cohort.h() {
                long.push_str(&format!(",{}", s.y[(r, v)]));
            }
            long.push('\n');
        }
    }
    fs::write(args.out.join("long.csv"), long)?;

    for (v, records) in cohort.survival.iter().enumerate() {
        let mut surv = String::from("subject_id,time,event\n");
        for r in records {
            surv.push_str(&format!("{},{},{}\n", r.subject_id, r.t, r.d));
        }
        fs::write(
            args.out.join(format!("{}.csv", cohort.event_names[v])),
            surv,
        )?;
    }

    let mut truth = String::from("subject_id,cluster\n");
    for (s, label) in cohort.subjects.iter().zip(&labels) {
        truth.push_str(&format!("{},{label}\n", s.id));
    }
    fs::write(args.out.join("truth.csv"), truth)?;
    Ok(0)
}

// ---- eval / km ---------------------------------------------------------

/// Read a `subject_id, cluster` labels file.
pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let file = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers != ["subject_id", "cluster"] {
        return Err(Error::Schema {
            file,
            line: 1,
            message: "expected header `subject_id, cluster`".into(),
        });
    }
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let label = record[1].trim().parse::<usize>().map_err(|_| Error::Schema {
            file: file.clone(),
            line: i + 2,
            message: format!("cannot parse cluster label '{}'", &record[1]),
        })?;
        out.push((record[0].trim().to_string(), label));
    }
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let pred = read_labels(&args.pred)?;
    let truth = read_labels(&args.truth)?;
    let truth_map: HashMap<&str, usize> =
        truth.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    if pred.len() != truth.len() {
        return Err(Error::Consistency(format!(
            "label files cover {} and {} subjects",
            pred.len(),
            truth.len()
        )));
    }
    let mut a = Vec::with_capacity(pred.len());
    let mut b = Vec::with_capacity(pred.len());
    for (id, label) in &pred {
        let t = truth_map.get(id.as_str()).ok_or_else(|| {
            Error::Consistency(format!("subject '{id}' missing from the truth file"))
        })?;
        a.push(*label);
        b.push(*t);
    }
    let ari = adjusted_rand_index(&a, &b)?;
    let (count, fraction) = membership_diff(&a, &b)?;
    println!("ari={ari:?}");
    println!("diff_count={count}");
    println!("diff_fraction={fraction:?}");
    Ok(0)
}

/// Read a standalone `subject_id, time, event` survival file.
pub fn read_survival(path: &Path) -> Result<Vec<SurvivalRecord>> {
    let file = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers != ["subject_id", "time", "event"] {
        return Err(Error::Schema {
            file,
            line: 1,
            message: "expected header `subject_id, time, event`".into(),
        });
    }
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let t = record[1].trim().parse::<f64>().map_err(|_| Error::Schema {
            file: file.clone(),
            line,
            message: format!("cannot parse time '{}'", &record[1]),
        })?;
        let d = match record[2].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Schema {
                    file: file.clone(),
                    line,
                    message: format!("event must be 0 or 1, got '{other}'"),
                })
            }
        };
        out.push(SurvivalRecord::new(record[0].trim().to_string(), t, d)?);
    }
    Ok(out)
}

pub fn cmd_km(args: &KmArgs) -> Result<i32> {
    let records = read_survival(&args.surv)?;
    let output = match &args.groups {
        None => kaplan_meier_csv(&kaplan_meier(&records)?),
        Some(groups_path) => {
            let labels = read_labels(groups_path)?;
            let by_id: HashMap<&str, usize> =
                labels.iter().map(|(id, l)| (id.as_str(), *l)).collect();
            let mut groups: Vec<usize> = by_id.values().copied().collect();
            groups.sort_unstable();
            groups.dedup();
            let mut out = String::from("cluster,time,survival,at_risk,events\n");
            for g in groups {
                let members: Vec<SurvivalRecord> = records
                    .iter()
                    .filter(|r| by_id.get(r.subject_id.as_str()) == Some(&g))
                    .cloned()
                    .collect();
                if members.is_empty() {
                    continue;
                }
                for step in kaplan_meier(&members)? {
                    out.push_str(&format!(
                        "{g},{},{},{},{}\n",
                        step.time, step.survival, step.at_risk, step.events
                    ));
                }
            }
            out
        }
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, output)?;
    Ok(0)
}
