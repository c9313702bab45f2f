//! The full marginalized log posterior over hard partitions and component
//! parameters: per-cluster longitudinal and survival likelihoods, the
//! conditional component prior (informative for nonempty components, a
//! constant for empty ones), and the Dirichlet-multinomial term obtained
//! by integrating out the mixture weights.

use statrs::function::gamma::ln_gamma;

use crate::bpe::{
    bpe_loglik, weibull_loglik, ChangepointGrid, GammaPrior, HazardParams, SurvivalRecord,
    WeibullParams,
};
use crate::lmm::{lmm_subject_loglik, LmmParams, LmmPriors, SubjectData};
use crate::{Error, Result};

/// Hard assignment of subjects to mixture components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<usize>,
    k: usize,
}

impl Partition {
    /// Labels must lie in `0..k`.
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if assignment.iter().any(|&z| z >= k) {
            return Err(Error::InvalidArgument(format!(
                "assignment label out of range 0..{k}"
            )));
        }
        Ok(Self { assignment, k })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Per-label subject counts (length K).
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &z in &self.assignment {
            counts[z] += 1;
        }
        counts
    }

    /// Relabel clusters in order of first appearance so nonempty labels
    /// are contiguous from zero.
    pub fn canonicalize(&self) -> Partition {
        let mut map = vec![usize::MAX; self.k];
        let mut next = 0;
        let assignment = self
            .assignment
            .iter()
            .map(|&z| {
                if map[z] == usize::MAX {
                    map[z] = next;
                    next += 1;
                }
                map[z]
            })
            .collect();
        Partition {
            assignment,
            k: self.k,
        }
    }
}

/// Per-event-variable survival parameters of one component.
#[derive(Debug, Clone)]
pub enum SurvivalParams {
    Piecewise(HazardParams),
    Weibull(WeibullParams),
}

/// One mixture component's full parameter set.
#[derive(Debug, Clone)]
pub struct ClusterParams {
    pub lmm: LmmParams,
    pub survival: Vec<SurvivalParams>,
}

/// Everything needed to evaluate one subject's likelihood: the
/// longitudinal block (possibly absent) and one survival record per
/// event variable.
#[derive(Debug, Clone)]
pub struct SubjectModelData {
    pub id: String,
    pub long: Option<SubjectData>,
    /// Visit times backing the longitudinal block (empty when absent).
    pub times: Vec<f64>,
    pub survival: Vec<SurvivalRecord>,
}

/// Changepoint grids, one per event variable, shared by all components.
#[derive(Debug, Clone)]
pub struct SurvivalContext {
    pub grids: Vec<ChangepointGrid>,
    pub gamma_priors: Vec<GammaPrior>,
}

/// Mixture-level configuration for the marginalized posterior.
#[derive(Debug, Clone)]
pub struct MixtureConfig {
    /// Dirichlet concentration.
    pub alpha: f64,
    /// Number of mixture components (overfitted; clusters are the
    /// nonempty ones).
    pub k: usize,
    /// Log density of the empty-component prior over its bounded region;
    /// defaults to 0 (constant prior).
    pub pi0_log_density: f64,
}

impl MixtureConfig {
    pub fn new(alpha: f64, k: usize) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        Ok(Self {
            alpha,
            k,
            pi0_log_density: 0.0,
        })
    }
}

/// Log-likelihood of one subject under one component: the longitudinal
/// block plus each event variable's contribution, conditionally
/// independent given the assignment.
pub fn subject_loglik(
    subject: &SubjectModelData,
    params: &ClusterParams,
    ctx: &SurvivalContext,
) -> Result<f64> {
    if subject.survival.len() != params.survival.len() {
        return Err(Error::DimensionMismatch(format!(
            "subject has {} event variables but component has {}",
            subject.survival.len(),
            params.survival.len()
        )));
    }
    let mut ll = match &subject.long {
        Some(block) => lmm_subject_loglik(block, &params.lmm)?,
        None => 0.0,
    };
    for (v, record) in subject.survival.iter().enumerate() {
        let contrib = match &params.survival[v] {
            SurvivalParams::Piecewise(h) => {
                bpe_loglik(std::slice::from_ref(record), h, &ctx.grids[v])?
            }
            SurvivalParams::Weibull(w) => weibull_loglik(std::slice::from_ref(record), w),
        };
        if contrib == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        ll += contrib;
    }
    Ok(ll)
}

/// `log [ Γ(Kα)/Γ(α)^K · Π_k Γ(n_k+α) / Γ(N+Kα) ]`.
pub fn log_dirichlet_multinomial(counts: &[usize], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let k = counts.len() as f64;
    let n: usize = counts.iter().sum();
    let mut v = ln_gamma(k * alpha) - k * ln_gamma(alpha) - ln_gamma(n as f64 + k * alpha);
    for &c in counts {
        v += ln_gamma(c as f64 + alpha);
    }
    Ok(v)
}

/// Log density of the informative component prior π₁(θ), factorized over
/// the longitudinal priors and the per-interval Gamma hazard priors.
/// The Weibull comparator carries a flat (zero) prior.
pub fn log_component_prior(
    params: &ClusterParams,
    lmm_priors: &LmmPriors,
    ctx: &SurvivalContext,
) -> Result<f64> {
    let mut lp = lmm_priors.log_density(&params.lmm)?;
    for (v, surv) in params.survival.iter().enumerate() {
        if let SurvivalParams::Piecewise(h) = surv {
            let prior = &ctx.gamma_priors[v];
            for &lam in &h.lambdas {
                lp += prior.log_density(lam);
            }
        }
    }
    Ok(lp)
}

/// The full marginalized log posterior (up to the fixed additive
/// constant): cluster likelihoods, nonempty-component priors, the
/// constant empty-component prior, and the Dirichlet-multinomial term
/// over component counts padded to K.
pub fn log_posterior(
    subjects: &[SubjectModelData],
    partition: &Partition,
    all_params: &[ClusterParams],
    lmm_priors: &LmmPriors,
    ctx: &SurvivalContext,
    config: &MixtureConfig,
) -> Result<f64> {
    if partition.len() != subjects.len() {
        return Err(Error::DimensionMismatch(format!(
            "partition covers {} subjects but cohort has {}",
            partition.len(),
            subjects.len()
        )));
    }
    let counts = partition.counts();
    if counts.len() > config.k {
        return Err(Error::InvalidArgument(format!(
            "partition has {} labels but config.k is {}",
            counts.len(),
            config.k
        )));
    }
    let mut total = 0.0;
    for (i, subject) in subjects.iter().enumerate() {
        let z = partition.assignment()[i];
        total += subject_loglik(subject, &all_params[z], ctx)?;
    }
    let mut nonempty = 0usize;
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            total += log_component_prior(&all_params[k], lmm_priors, ctx)?;
            nonempty += 1;
        }
    }
    total += (config.k - nonempty) as f64 * config.pi0_log_density;

    let mut padded = counts;
    padded.resize(config.k, 0);
    total += log_dirichlet_multinomial(&padded, config.alpha)?;
    Ok(total)
}

/// Assign one subject to the best candidate component. Moving subject i
/// to component k changes the objective by
/// `subject_loglik(i, k) + log(n_k^{-i} + α)`; ties break toward the
/// lower index.
pub fn assign_subject(
    subject: &SubjectModelData,
    candidates: &[ClusterParams],
    counts_excluding_subject: &[usize],
    alpha: f64,
    ctx: &SurvivalContext,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate components".into()));
    }
    if candidates.len() != counts_excluding_subject.len() {
        return Err(Error::DimensionMismatch(
            "candidate and count vectors differ in length".into(),
        ));
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, params) in candidates.iter().enumerate() {
        let ll = subject_loglik(subject, params, ctx)?;
        if ll == f64::NEG_INFINITY {
            continue;
        }
        let score = ll + (counts_excluding_subject[k] as f64 + alpha).ln();
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((k, score)),
        }
    }
    best.map(|(k, _)| k).ok_or(Error::Unassignable)
}
