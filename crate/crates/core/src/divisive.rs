//! The divisive clustering driver: nested binary splitting with a cheap
//! heuristic initialization, size rebalancing, identifiability guards,
//! per-split coordinate ascent between candidate parameters and
//! assignments, an ascending Dirichlet-concentration schedule, and
//! dendrogram construction.

use std::collections::{HashMap, HashSet};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bpe::{bpe_map, weibull_mle, SurvivalRecord, WeibullParams};
use crate::lmm::{fit_lmm_map, DesignSpec, LmmPriors, SubjectData};
use crate::posterior::{
    assign_subject, log_component_prior, log_posterior, subject_loglik, ClusterParams,
    MixtureConfig, Partition, SubjectModelData, SurvivalContext, SurvivalParams,
};
use crate::{Error, Result};

/// Heuristic used to seed each candidate split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitInit {
    TwoMeans,
    TwoMedoids,
}

/// Which survival model backs the event variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurvivalModel {
    Piecewise,
    Weibull,
}

/// Driver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_clusters: usize,
    /// Minimum subjects per fitted cluster; `None` derives the parameter
    /// dimension `pH + q(q+1)/2 + H(H+1)/2 + 1` from the model shape.
    pub min_cluster_size: Option<usize>,
    pub alpha_grid: Vec<f64>,
    pub split_init: SplitInit,
    pub survival_model: SurvivalModel,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_clusters: 10,
            min_cluster_size: None,
            alpha_grid: default_alpha_grid(),
            split_init: SplitInit::TwoMeans,
            survival_model: SurvivalModel::Piecewise,
            seed: 0,
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

/// Geometric schedule of 16 concentrations from 1e-3 to 1e2, spanning
/// sparse-to-uniform partition priors.
pub fn default_alpha_grid() -> Vec<f64> {
    let (lo, hi, n) = (1e-3f64, 1e2f64, 16usize);
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// The parameter-vector dimension of one component's longitudinal model,
/// read as the literal count of free entries in B, G, Ω, σ².
pub fn parameter_dimension(p: usize, q: usize, h: usize) -> usize {
    p * h + q * (q + 1) / 2 + h * (h + 1) / 2 + 1
}

impl RunConfig {
    pub fn resolved_min_cluster_size(&self, design: &DesignSpec, h: usize) -> usize {
        self.min_cluster_size
            .unwrap_or_else(|| parameter_dimension(design.p(), design.q(), h))
            .max(2)
    }
}

/// Everything attempt/run need besides the driver config: priors, grids,
/// and the survival-model choice.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub design: DesignSpec,
    pub lmm_priors: LmmPriors,
    pub survival: SurvivalContext,
    pub survival_model: SurvivalModel,
}

/// Per-subject split feature: per-variable OLS slope and intercept,
/// followed by log event time and event indicator for every event
/// variable. Scaling happens across the cluster being split.
pub fn subject_feature_vector(subject: &SubjectModelData) -> Vec<f64> {
    let mut features = Vec::new();
    match &subject.long {
        Some(block) => {
            let times = &subject.times;
            let n = times.len() as f64;
            let t_mean = times.iter().sum::<f64>() / n;
            let t_var: f64 = times.iter().map(|t| (t - t_mean).powi(2)).sum();
            for h in 0..block.y.ncols() {
                let col = block.y.column(h);
                let y_mean = col.iter().sum::<f64>() / n;
                let slope = if t_var > 1e-12 {
                    times
                        .iter()
                        .zip(col.iter())
                        .map(|(t, y)| (t - t_mean) * (y - y_mean))
                        .sum::<f64>()
                        / t_var
                } else {
                    0.0
                };
                let intercept = y_mean - slope * t_mean;
                features.push(slope);
                features.push(intercept);
            }
        }
        None => {}
    }
    for rec in &subject.survival {
        features.push(rec.t.ln());
        features.push(rec.d as f64);
    }
    features
}

fn zscore_columns(rows: &mut [Vec<f64>]) {
    if rows.is_empty() {
        return;
    }
    let dims = rows[0].len();
    let n = rows.len() as f64;
    for d in 0..dims {
        let mean = rows.iter().map(|r| r[d]).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(1e-12);
        for r in rows.iter_mut() {
            r[d] = (r[d] - mean) / sd;
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Heuristic two-way seeding of a split.
#[derive(Debug, Clone)]
pub struct InitSplit {
    /// Member indices (relative to the cluster slice) of each side.
    pub side_a: Vec<usize>,
    pub side_b: Vec<usize>,
    /// Set when the features were degenerate and an arbitrary balanced
    /// split was used.
    pub degenerate_features: bool,
}

/// 2-means (default) or 2-medoids on the z-scored subject features, with
/// the smaller side topped up to `min_size` by moving the subjects whose
/// preference for the larger side is weakest.
pub fn init_split(
    members: &[&SubjectModelData],
    split_init: SplitInit,
    min_size: usize,
    seed: u64,
) -> Result<InitSplit> {
    let n = members.len();
    if n < 2 * min_size {
        return Err(Error::InvalidArgument(format!(
            "cluster of {n} cannot seed a split with min size {min_size}"
        )));
    }
    let mut features: Vec<Vec<f64>> = members.iter().map(|m| subject_feature_vector(m)).collect();
    zscore_columns(&mut features);

    let spread: f64 = features
        .iter()
        .map(|f| sq_dist(f, &features[0]))
        .fold(0.0, f64::max);
    if spread < 1e-20 {
        // All-identical features: arbitrary balanced split.
        let side_a: Vec<usize> = (0..n).step_by(2).collect();
        let side_b: Vec<usize> = (1..n).step_by(2).collect();
        return Ok(InitSplit {
            side_a,
            side_b,
            degenerate_features: true,
        });
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let (mut labels, centers) = match split_init {
        SplitInit::TwoMeans => two_means(&features, &mut rng),
        SplitInit::TwoMedoids => two_medoids(&features, &mut rng),
    };

    // Rebalance: top the smaller side up by moving, from the larger side,
    // the subjects with the smallest margin toward the larger center.
    loop {
        let size_a = labels.iter().filter(|&&l| l == 0).count();
        let size_b = n - size_a;
        let (small, large, small_size) = if size_a < size_b {
            (0u8, 1u8, size_a)
        } else {
            (1u8, 0u8, size_b)
        };
        if small_size >= min_size {
            break;
        }
        let mover = (0..n)
            .filter(|&i| labels[i] == large)
            .min_by(|&i, &j| {
                let margin = |k: usize| {
                    sq_dist(&features[k], &centers[large as usize])
                        - sq_dist(&features[k], &centers[small as usize])
                };
                margin(i).partial_cmp(&margin(j)).unwrap()
            })
            .expect("larger side nonempty");
        labels[mover] = small;
    }

    Ok(InitSplit {
        side_a: (0..n).filter(|&i| labels[i] == 0).collect(),
        side_b: (0..n).filter(|&i| labels[i] == 1).collect(),
        degenerate_features: false,
    })
}

fn two_means(features: &[Vec<f64>], rng: &mut StdRng) -> (Vec<u8>, [Vec<f64>; 2]) {
    let n = features.len();
    let dims = features[0].len();
    let first = rng.gen_range(0..n);
    // Second center: farthest point from the first (deterministic and
    // well separated).
    let second = (0..n)
        .max_by(|&i, &j| {
            sq_dist(&features[i], &features[first])
                .partial_cmp(&sq_dist(&features[j], &features[first]))
                .unwrap()
        })
        .unwrap();
    let mut centers = [features[first].clone(), features[second].clone()];
    let mut labels = vec![0u8; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let l = if sq_dist(&features[i], &centers[0]) <= sq_dist(&features[i], &centers[1]) {
                0u8
            } else {
                1u8
            };
            if l != labels[i] {
                labels[i] = l;
                changed = true;
            }
        }
        for c in 0..2 {
            let members: Vec<&Vec<f64>> = (0..n)
                .filter(|&i| labels[i] == c as u8)
                .map(|i| &features[i])
                .collect();
            if members.is_empty() {
                continue;
            }
            centers[c] = (0..dims)
                .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
                .collect();
        }
        if !changed {
            break;
        }
    }
    (labels, centers)
}

fn two_medoids(features: &[Vec<f64>], rng: &mut StdRng) -> (Vec<u8>, [Vec<f64>; 2]) {
    let n = features.len();
    let first = rng.gen_range(0..n);
    let second = (0..n)
        .max_by(|&i, &j| {
            sq_dist(&features[i], &features[first])
                .partial_cmp(&sq_dist(&features[j], &features[first]))
                .unwrap()
        })
        .unwrap();
    let mut medoids = [first, second];
    let mut labels = vec![0u8; n];
    for _ in 0..100 {
        for i in 0..n {
            labels[i] = if sq_dist(&features[i], &features[medoids[0]])
                <= sq_dist(&features[i], &features[medoids[1]])
            {
                0
            } else {
                1
            };
        }
        let mut next = medoids;
        for c in 0..2 {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c as u8).collect();
            if members.is_empty() {
                continue;
            }
            next[c] = *members
                .iter()
                .min_by(|&&i, &&j| {
                    let cost = |k: usize| -> f64 {
                        members.iter().map(|&m| sq_dist(&features[m], &features[k])).sum()
                    };
                    cost(i).partial_cmp(&cost(j)).unwrap()
                })
                .unwrap();
        }
        if next == medoids {
            break;
        }
        medoids = next;
    }
    let centers = [features[medoids[0]].clone(), features[medoids[1]].clone()];
    (labels, centers)
}

/// Fit a component's full parameter set to a set of member subjects.
pub fn fit_cluster_params(
    members: &[&SubjectModelData],
    ctx: &ModelContext,
    tol: f64,
    max_iter: usize,
    warm: Option<&ClusterParams>,
) -> Result<ClusterParams> {
    let blocks: Vec<SubjectData> = members
        .iter()
        .filter_map(|m| m.long.clone())
        .collect();
    let fit = fit_lmm_map(&blocks, &ctx.lmm_priors, warm.map(|c| &c.lmm), tol, max_iter)?;

    let n_events = members.first().map(|m| m.survival.len()).unwrap_or(0);
    let mut survival = Vec::with_capacity(n_events);
    for v in 0..n_events {
        let records: Vec<SurvivalRecord> =
            members.iter().map(|m| m.survival[v].clone()).collect();
        let params = match ctx.survival_model {
            SurvivalModel::Piecewise => SurvivalParams::Piecewise(bpe_map(
                &records,
                &ctx.survival.grids[v],
                &ctx.survival.gamma_priors[v],
            )?),
            SurvivalModel::Weibull => {
                let fit = weibull_mle(&records).unwrap_or_else(|_| WeibullParams {
                    // No events: flat near-zero hazard over the horizon.
                    shape: 1.0,
                    scale: 100.0
                        * records.iter().map(|r| r.t).fold(1.0, f64::max),
                });
                SurvivalParams::Weibull(fit)
            }
        };
        survival.push(params);
    }
    Ok(ClusterParams {
        lmm: fit.params,
        survival,
    })
}

/// Why a candidate split was not recommended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    /// Fewer than twice the minimum cluster size; not attempted.
    TooSmall,
    /// A candidate fell below the minimum size during coordinate ascent.
    MinSizeViolation,
    /// A candidate model fit degenerated.
    Degenerate(String),
}

/// Outcome of one candidate split.
#[derive(Debug, Clone)]
pub enum SplitAttempt {
    Rejected(RejectReason),
    Split(CandidateSplit),
}

/// An internally stabilized two-way split of one cluster, before the
/// driver's acceptance decision.
#[derive(Debug, Clone)]
pub struct CandidateSplit {
    /// Cohort-level subject indices of each child.
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub left_params: ClusterParams,
    pub right_params: ClusterParams,
    /// Local split objective after each accepted sweep; nondecreasing.
    pub trace: Vec<f64>,
    pub degenerate_init: bool,
}

fn local_split_objective(
    members: &[&SubjectModelData],
    labels: &[u8],
    params: (&ClusterParams, &ClusterParams),
    alpha: f64,
    ctx: &ModelContext,
) -> Result<f64> {
    let mut obj = log_component_prior(params.0, &ctx.lmm_priors, &ctx.survival)?
        + log_component_prior(params.1, &ctx.lmm_priors, &ctx.survival)?;
    let mut counts = [0usize; 2];
    for (m, &l) in members.iter().zip(labels) {
        let p = if l == 0 { params.0 } else { params.1 };
        obj += subject_loglik(m, p, &ctx.survival)?;
        counts[l as usize] += 1;
    }
    obj += ln_gamma(counts[0] as f64 + alpha) + ln_gamma(counts[1] as f64 + alpha);
    Ok(obj)
}

/// Attempt to split one cluster at concentration `alpha`: heuristic
/// initialization, then alternating candidate-parameter fits and
/// synchronous subject reassignment until the assignment stabilizes, a
/// cycle is detected, or the sweep cap is hit. Rejected outright when the
/// cluster is too small, and whenever a candidate shrinks below the
/// minimum size.
pub fn attempt_split(
    subjects: &[SubjectModelData],
    indices: &[usize],
    parent: &ClusterParams,
    alpha: f64,
    ctx: &ModelContext,
    config: &RunConfig,
    seed: u64,
) -> Result<SplitAttempt> {
    let h = parent.lmm.h();
    let min_size = config.resolved_min_cluster_size(&ctx.design, h);
    if indices.len() < 2 * min_size {
        return Ok(SplitAttempt::Rejected(RejectReason::TooSmall));
    }
    let members: Vec<&SubjectModelData> = indices.iter().map(|&i| &subjects[i]).collect();
    let init = init_split(&members, config.split_init, min_size, seed)?;
    let mut labels = vec![1u8; members.len()];
    for &i in &init.side_a {
        labels[i] = 0;
    }

    let mut best: Option<(Vec<u8>, ClusterParams, ClusterParams, f64)> = None;
    let mut trace = Vec::new();
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut warm_left = parent.clone();
    let mut warm_right = parent.clone();

    let max_sweeps = config.max_iter.min(100);
    for _ in 0..max_sweeps {
        let side = |target: u8| -> Vec<&SubjectModelData> {
            members
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == target)
                .map(|(m, _)| *m)
                .collect()
        };
        let fit = |mems: &[&SubjectModelData], warm: &ClusterParams| {
            fit_cluster_params(mems, ctx, config.tol, config.max_iter, Some(warm))
        };
        let (left_fit, right_fit) = rayon::join(
            || fit(&side(0), &warm_left),
            || fit(&side(1), &warm_right),
        );
        let (left_params, right_params) = match (left_fit, right_fit) {
            (Ok(l), Ok(r)) => (l, r),
            (Err(Error::DegenerateFit(msg)), _) | (_, Err(Error::DegenerateFit(msg))) => {
                return Ok(SplitAttempt::Rejected(RejectReason::Degenerate(msg)))
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };

        let obj = local_split_objective(
            &members,
            &labels,
            (&left_params, &right_params),
            alpha,
            ctx,
        )?;
        if let Some((_, _, _, best_obj)) = &best {
            if obj < best_obj - 1e-9 {
                break; // ascent stalled; keep the best iterate
            }
        }
        if best.as_ref().map_or(true, |(_, _, _, b)| obj >= *b) {
            best = Some((labels.clone(), left_params.clone(), right_params.clone(), obj));
            trace.push(obj);
        }
        warm_left = left_params.clone();
        warm_right = right_params.clone();

        // Synchronous reassignment with a frozen count snapshot.
        let counts = [
            labels.iter().filter(|&&l| l == 0).count(),
            labels.iter().filter(|&&l| l == 1).count(),
        ];
        let candidates = [left_params, right_params];
        let mut next = vec![0u8; members.len()];
        for (i, m) in members.iter().enumerate() {
            let excl = [
                counts[0] - usize::from(labels[i] == 0),
                counts[1] - usize::from(labels[i] == 1),
            ];
            next[i] = match assign_subject(m, &candidates, &excl, alpha, &ctx.survival) {
                Ok(z) => z as u8,
                Err(Error::Unassignable) => {
                    return Ok(SplitAttempt::Rejected(RejectReason::Degenerate(
                        "subject unassignable under both candidates".into(),
                    )))
                }
                Err(e) => return Err(e),
            };
        }
        let next_counts = [
            next.iter().filter(|&&l| l == 0).count(),
            next.iter().filter(|&&l| l == 1).count(),
        ];
        if next_counts[0] < min_size || next_counts[1] < min_size {
            return Ok(SplitAttempt::Rejected(RejectReason::MinSizeViolation));
        }
        if next == labels {
            break;
        }
        if !seen.insert(labels.clone()) || seen.contains(&next) {
            break; // assignment cycle; keep the best iterate
        }
        labels = next;
    }

    let (labels, left_params, right_params, _) = best.expect("at least one sweep completed");
    let left: Vec<usize> = indices
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&i, _)| i)
        .collect();
    let right: Vec<usize> = indices
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&i, _)| i)
        .collect();
    Ok(SplitAttempt::Split(CandidateSplit {
        left,
        right,
        left_params,
        right_params,
        trace,
        degenerate_init: init.degenerate_features,
    }))
}

/// One node of the nested split tree.
#[derive(Debug, Clone)]
pub struct DendrogramNode {
    pub id: usize,
    /// Cohort-level subject indices.
    pub subjects: Vec<usize>,
    pub params: ClusterParams,
    pub children: Option<(usize, usize)>,
    /// Concentration at which this node's split was accepted.
    pub split_alpha: Option<f64>,
    /// Full objective right after this node's split was accepted.
    pub split_log_posterior: Option<f64>,
}

/// The nested tree of accepted splits. Children partition their parent's
/// subject set; the root covers the whole cohort.
#[derive(Debug, Clone)]
pub struct Dendrogram {
    pub nodes: Vec<DendrogramNode>,
    pub root: usize,
}

/// Leaf partition recorded after an acceptance or at the end of an alpha
/// step.
#[derive(Debug, Clone)]
pub struct RecordedPartition {
    pub alpha: f64,
    pub log_posterior: f64,
    pub labels: Vec<usize>,
    pub k: usize,
}

/// Result of a full divisive run.
#[derive(Debug, Clone)]
pub struct DhbcResult {
    pub dendrogram: Dendrogram,
    /// Partition after every accepted split, in acceptance order.
    pub acceptances: Vec<RecordedPartition>,
    /// MAP partition at the end of each alpha step.
    pub per_alpha: Vec<RecordedPartition>,
    /// Labels of the most stable partition: the one holding over the
    /// longest stretch of the alpha grid (ties go to the coarser one).
    pub final_labels: Vec<usize>,
    pub final_params: Vec<ClusterParams>,
}

struct Leaf {
    node_id: usize,
    subjects: Vec<usize>,
    params: ClusterParams,
}

fn leaf_labels(leaves: &[Leaf], n: usize) -> Vec<usize> {
    let mut labels = vec![0usize; n];
    for (k, leaf) in leaves.iter().enumerate() {
        for &i in &leaf.subjects {
            labels[i] = k;
        }
    }
    labels
}

fn leaves_objective(
    subjects: &[SubjectModelData],
    leaves: &[Leaf],
    alpha: f64,
    ctx: &ModelContext,
) -> Result<f64> {
    let labels = leaf_labels(leaves, subjects.len());
    let partition = Partition::new(labels, leaves.len().max(1))?;
    let params: Vec<ClusterParams> = leaves.iter().map(|l| l.params.clone()).collect();
    let config = MixtureConfig::new(alpha, subjects.len())?;
    log_posterior(
        subjects,
        &partition,
        &params,
        &ctx.lmm_priors,
        &ctx.survival,
        &config,
    )
}

/// Leaves of the dendrogram after the first `stage` acceptances. Node ids
/// are assigned in acceptance order (two per split), so a node was still a
/// leaf at that stage iff it existed (`id <= 2*stage`) and its children, if
/// any, were created later.
fn leaves_at_stage(nodes: &[DendrogramNode], stage: usize) -> Vec<Leaf> {
    nodes
        .iter()
        .filter(|n| n.id <= 2 * stage && n.children.map_or(true, |(l, _)| l > 2 * stage))
        .map(|n| Leaf {
            node_id: n.id,
            subjects: n.subjects.clone(),
            params: n.params.clone(),
        })
        .collect()
}

fn leaf_seed(base: u64, node_id: usize, alpha_index: usize) -> u64 {
    let mut s = base ^ 0x9E37_79B9_7F4A_7C15;
    s = s
        .wrapping_mul(0x100000001B3)
        .wrapping_add(node_id as u64 + 1);
    s = s
        .wrapping_mul(0x100000001B3)
        .wrapping_add(alpha_index as u64 + 1);
    s
}

/// Run the full divisive search: starting from one cluster, walk the
/// ascending alpha grid, greedily accepting at each step the single best
/// split that raises the full marginalized posterior, until no split
/// improves at any concentration or the cluster cap is reached.
pub fn run_dhbc(
    subjects: &[SubjectModelData],
    ctx: &ModelContext,
    config: &RunConfig,
) -> Result<DhbcResult> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("empty cohort".into()));
    }
    let all_indices: Vec<usize> = (0..subjects.len()).collect();
    let members: Vec<&SubjectModelData> = subjects.iter().collect();
    let root_params = fit_cluster_params(&members, ctx, config.tol, config.max_iter, None)?;

    let mut nodes = vec![DendrogramNode {
        id: 0,
        subjects: all_indices.clone(),
        params: root_params.clone(),
        children: None,
        split_alpha: None,
        split_log_posterior: None,
    }];
    let mut leaves = vec![Leaf {
        node_id: 0,
        subjects: all_indices,
        params: root_params,
    }];
    let mut acceptances = Vec::new();
    let mut per_alpha = Vec::new();
    // Number of acceptances in effect at the end of each alpha step; used
    // for the stability-based final partition below.
    let mut stage_per_alpha: Vec<usize> = Vec::new();
    // Split attempts are deterministic per (node, alpha index); cache them
    // across acceptance rounds within an alpha step.
    let mut cache: HashMap<(usize, usize), SplitAttempt> = HashMap::new();

    for (ai, &alpha) in config.alpha_grid.iter().enumerate() {
        loop {
            if leaves.len() >= config.max_clusters {
                break;
            }
            let current_obj = leaves_objective(subjects, &leaves, alpha, ctx)?;

            let pending: Vec<&Leaf> = leaves
                .iter()
                .filter(|l| !cache.contains_key(&(l.node_id, ai)))
                .collect();
            let computed: Vec<(usize, SplitAttempt)> = pending
                .par_iter()
                .map(|leaf| {
                    let attempt = attempt_split(
                        subjects,
                        &leaf.subjects,
                        &leaf.params,
                        alpha,
                        ctx,
                        config,
                        leaf_seed(config.seed, leaf.node_id, ai),
                    )?;
                    Ok((leaf.node_id, attempt))
                })
                .collect::<Result<_>>()?;
            for (node_id, attempt) in computed {
                cache.insert((node_id, ai), attempt);
            }

            // Evaluate each candidate against the full objective; accept
            // the single best improving split.
            let mut best: Option<(usize, f64)> = None;
            for (li, leaf) in leaves.iter().enumerate() {
                let attempt = &cache[&(leaf.node_id, ai)];
                if let SplitAttempt::Split(split) = attempt {
                    let mut hyp: Vec<Leaf> = Vec::with_capacity(leaves.len() + 1);
                    for (lj, l) in leaves.iter().enumerate() {
                        if lj == li {
                            hyp.push(Leaf {
                                node_id: usize::MAX,
                                subjects: split.left.clone(),
                                params: split.left_params.clone(),
                            });
                            hyp.push(Leaf {
                                node_id: usize::MAX,
                                subjects: split.right.clone(),
                                params: split.right_params.clone(),
                            });
                        } else {
                            hyp.push(Leaf {
                                node_id: l.node_id,
                                subjects: l.subjects.clone(),
                                params: l.params.clone(),
                            });
                        }
                    }
                    let obj = leaves_objective(subjects, &hyp, alpha, ctx)?;
                    if obj - current_obj > 1e-9
                        && best.as_ref().map_or(true, |&(_, b)| obj > b)
                    {
                        best = Some((li, obj));
                    }
                }
            }

            let Some((li, new_obj)) = best else { break };
            let leaf = leaves.remove(li);
            let SplitAttempt::Split(split) = cache[&(leaf.node_id, ai)].clone() else {
                unreachable!()
            };
            let left_id = nodes.len();
            let right_id = nodes.len() + 1;
            nodes.push(DendrogramNode {
                id: left_id,
                subjects: split.left.clone(),
                params: split.left_params.clone(),
                children: None,
                split_alpha: None,
                split_log_posterior: None,
            });
            nodes.push(DendrogramNode {
                id: right_id,
                subjects: split.right.clone(),
                params: split.right_params.clone(),
                children: None,
                split_alpha: None,
                split_log_posterior: None,
            });
            nodes[leaf.node_id].children = Some((left_id, right_id));
            nodes[leaf.node_id].split_alpha = Some(alpha);
            nodes[leaf.node_id].split_log_posterior = Some(new_obj);
            leaves.push(Leaf {
                node_id: left_id,
                subjects: split.left,
                params: split.left_params,
            });
            leaves.push(Leaf {
                node_id: right_id,
                subjects: split.right,
                params: split.right_params,
            });

            acceptances.push(RecordedPartition {
                alpha,
                log_posterior: new_obj,
                labels: leaf_labels(&leaves, subjects.len()),
                k: leaves.len(),
            });
        }
        per_alpha.push(RecordedPartition {
            alpha,
            log_posterior: leaves_objective(subjects, &leaves, alpha, ctx)?,
            labels: leaf_labels(&leaves, subjects.len()),
            k: leaves.len(),
        });
        stage_per_alpha.push(acceptances.len());
        if leaves.len() >= config.max_clusters {
            // Record the remaining alpha steps as the capped partition.
            for &a in &config.alpha_grid[ai + 1..] {
                per_alpha.push(RecordedPartition {
                    alpha: a,
                    log_posterior: leaves_objective(subjects, &leaves, a, ctx)?,
                    labels: leaf_labels(&leaves, subjects.len()),
                    k: leaves.len(),
                });
                stage_per_alpha.push(acceptances.len());
            }
            break;
        }
    }

    // Final partition: the stage (acceptance count) whose partition holds
    // at the end of the most alpha steps; ties favor the coarser one.
    // Splits accepted only at the extreme end of the grid are treated as
    // overfitting artifacts rather than the reported clustering.
    let mut stable_stage = acceptances.len();
    let mut best_run = 0usize;
    let mut i = 0;
    while i < stage_per_alpha.len() {
        let stage = stage_per_alpha[i];
        let mut j = i;
        while j < stage_per_alpha.len() && stage_per_alpha[j] == stage {
            j += 1;
        }
        if j - i > best_run {
            best_run = j - i;
            stable_stage = stage;
        }
        i = j;
    }
    let final_leaves = if stable_stage == acceptances.len() {
        leaves
    } else {
        leaves_at_stage(&nodes, stable_stage)
    };
    let final_labels = leaf_labels(&final_leaves, subjects.len());
    let final_params = final_leaves.into_iter().map(|l| l.params).collect();
    Ok(DhbcResult {
        dendrogram: Dendrogram { nodes, root: 0 },
        acceptances,
        per_alpha,
        final_labels,
        final_params,
    })
}
