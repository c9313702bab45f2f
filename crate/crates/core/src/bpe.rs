//! Piecewise-exponential survival model: the hazard is constant within
//! intervals of a changepoint grid, the likelihood factors into
//! interval-level Poisson contributions, and a conjugate Gamma prior gives
//! the hazard MAP in closed form. The Kaplan-Meier estimator is included
//! for reporting.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One subject's event or right-censoring record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub subject_id: String,
    /// Event or censoring time; must be positive.
    pub t: f64,
    /// 1 = event observed, 0 = right censored.
    pub d: u8,
}

impl SurvivalRecord {
    pub fn new(subject_id: impl Into<String>, t: f64, d: u8) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "event/censoring time must be positive, got {t}"
            )));
        }
        if d > 1 {
            return Err(Error::InvalidArgument(format!(
                "event indicator must be 0 or 1, got {d}"
            )));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            t,
            d,
        })
    }
}

/// Hazard changepoints `0 = a_0 < a_1 < ... < a_J` (a_0 implicit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointGrid {
    cuts: Vec<f64>,
}

impl ChangepointGrid {
    pub fn new(cuts: Vec<f64>) -> Result<Self> {
        if cuts.is_empty() {
            return Err(Error::InvalidArgument("changepoint grid is empty".into()));
        }
        let mut prev = 0.0;
        for &c in &cuts {
            if !(c > prev) || !c.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "changepoints must be strictly increasing and positive, got {cuts:?}"
                )));
            }
            prev = c;
        }
        Ok(Self { cuts })
    }

    /// Fixed-width grid covering `max_time` (last cut strictly beyond it).
    pub fn fixed_width(width: f64, max_time: f64) -> Result<Self> {
        if !(width > 0.0) || !(max_time > 0.0) {
            return Err(Error::InvalidArgument(
                "grid width and max time must be positive".into(),
            ));
        }
        let n = (max_time / width).ceil() as usize + 1;
        Self::new((1..=n).map(|j| j as f64 * width).collect())
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn num_intervals(&self) -> usize {
        self.cuts.len()
    }

    /// Left edge of interval `j` (0-based).
    pub fn lower(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.cuts[j - 1]
        }
    }

    /// Index of the interval containing `t`, or an error when `t` exceeds
    /// the last cut.
    pub fn interval_of(&self, t: f64) -> Result<usize> {
        let last = *self.cuts.last().unwrap();
        if t > last {
            return Err(Error::TimeBeyondGrid { time: t, last_cut: last });
        }
        Ok(self.cuts.partition_point(|&c| c < t))
    }
}

/// One interval-level row of the Poisson expansion: event indicator and
/// risk time for one subject in one interval. Rows with zero risk time
/// are omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonRow {
    pub subject_id: String,
    /// Interval index, 0-based.
    pub interval: usize,
    /// Event-in-interval indicator.
    pub n: u8,
    /// Risk time spent within the interval.
    pub t: f64,
}

/// Per-interval constant hazards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardParams {
    pub lambdas: Vec<f64>,
}

impl HazardParams {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err(Error::InvalidArgument(
                "hazards must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { lambdas })
    }
}

/// Conjugate Gamma(a, b) prior on each interval hazard. `a >= 1` keeps the
/// MAP numerator nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub a: f64,
    pub b: f64,
}

impl GammaPrior {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a < 1.0 || !(b > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Gamma prior requires a >= 1 and b > 0, got a={a}, b={b}"
            )));
        }
        Ok(Self { a, b })
    }

    /// Default prior: MAP becomes the risk-time-shrunk event rate.
    pub fn default_prior() -> Self {
        Self { a: 1.0, b: 0.1 }
    }

    /// Log-density at `lambda` (normalized). `lambda = 0` is in the
    /// support only when `a = 1`.
    pub fn log_density(&self, lambda: f64) -> f64 {
        if lambda < 0.0 {
            return f64::NEG_INFINITY;
        }
        let shape_term = if self.a == 1.0 {
            0.0
        } else if lambda == 0.0 {
            return f64::NEG_INFINITY;
        } else {
            (self.a - 1.0) * lambda.ln()
        };
        self.a * self.b.ln() - statrs::function::gamma::ln_gamma(self.a) + shape_term
            - self.b * lambda
    }
}

/// Shift any changepoint that exactly coincides with an observed time by
/// `+eps`, preserving the strict ordering.
pub fn adjust_changepoints(
    grid: &ChangepointGrid,
    times: &[f64],
    eps: f64,
) -> Result<ChangepointGrid> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let mut cuts = grid.cuts.clone();
    for j in 0..cuts.len() {
        if times.iter().any(|&t| t == cuts[j]) {
            let shifted = cuts[j] + eps;
            let upper = cuts.get(j + 1).copied().unwrap_or(f64::INFINITY);
            if shifted >= upper {
                return Err(Error::ChangepointOrdering(format!(
                    "shifting cut {} by {eps} collides with the next cut {upper}",
                    cuts[j]
                )));
            }
            cuts[j] = shifted;
        }
    }
    ChangepointGrid::new(cuts)
}

/// Expand survival records into interval-level Poisson rows.
pub fn expand_poisson(
    records: &[SurvivalRecord],
    grid: &ChangepointGrid,
) -> Result<Vec<PoissonRow>> {
    let mut rows = Vec::new();
    for rec in records {
        let exit_interval = grid.interval_of(rec.t)?;
        for j in 0..=exit_interval {
            let lower = grid.lower(j);
            let t_in = rec.t.min(grid.cuts[j]) - lower;
            if t_in <= 0.0 {
                continue;
            }
            rows.push(PoissonRow {
                subject_id: rec.subject_id.clone(),
                interval: j,
                n: if j == exit_interval { rec.d } else { 0 },
                t: t_in,
            });
        }
    }
    Ok(rows)
}

/// Exact piecewise-exponential log-likelihood
/// `Σ_i [d_i log λ(t_i) − Σ_j λ_j T_ij]`.
///
/// A zero hazard at an event time yields `-inf` rather than an error so
/// candidate evaluation can rank such configurations last.
pub fn bpe_loglik(
    records: &[SurvivalRecord],
    params: &HazardParams,
    grid: &ChangepointGrid,
) -> Result<f64> {
    if params.lambdas.len() != grid.num_intervals() {
        return Err(Error::DimensionMismatch(format!(
            "{} hazards for {} intervals",
            params.lambdas.len(),
            grid.num_intervals()
        )));
    }
    let mut ll = 0.0;
    for rec in records {
        let exit = grid.interval_of(rec.t)?;
        if rec.d == 1 {
            let lam = params.lambdas[exit];
            if lam <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            ll += lam.ln();
        }
        for j in 0..=exit {
            let t_in = rec.t.min(grid.cuts[j]) - grid.lower(j);
            if t_in > 0.0 {
                ll -= params.lambdas[j] * t_in;
            }
        }
    }
    Ok(ll)
}

/// Per-interval Gamma posterior parameters `(a + ΣN_j, b + ΣT_j)`.
pub fn bpe_posterior_params(
    records: &[SurvivalRecord],
    grid: &ChangepointGrid,
    prior: &GammaPrior,
) -> Result<Vec<(f64, f64)>> {
    let rows = expand_poisson(records, grid)?;
    let mut out = vec![(prior.a, prior.b); grid.num_intervals()];
    for row in rows {
        out[row.interval].0 += row.n as f64;
        out[row.interval].1 += row.t;
    }
    Ok(out)
}

/// Closed-form hazard MAP `λ̂_j = (a − 1 + ΣN_j) / (b + ΣT_j)`.
pub fn bpe_map(
    records: &[SurvivalRecord],
    grid: &ChangepointGrid,
    prior: &GammaPrior,
) -> Result<HazardParams> {
    let post = bpe_posterior_params(records, grid, prior)?;
    let lambdas = post
        .iter()
        .map(|&(a_hat, b_hat)| (a_hat - 1.0) / b_hat)
        .collect();
    HazardParams::new(lambdas)
}

/// One step of the product-limit estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmStep {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
}

/// Kaplan-Meier product-limit estimator. Censoring tied with an event
/// time is processed after the event (standard convention).
pub fn kaplan_meier(records: &[SurvivalRecord]) -> Result<Vec<KmStep>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "Kaplan-Meier requires at least one record".into(),
        ));
    }
    let mut sorted: Vec<&SurvivalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());

    let mut steps = Vec::new();
    let mut survival = 1.0;
    let mut at_risk = sorted.len();
    let mut idx = 0;
    while idx < sorted.len() {
        let t = sorted[idx].t;
        let mut events = 0;
        let mut removed = 0;
        while idx < sorted.len() && sorted[idx].t == t {
            events += sorted[idx].d as usize;
            removed += 1;
            idx += 1;
        }
        if events > 0 {
            survival *= 1.0 - events as f64 / at_risk as f64;
            steps.push(KmStep {
                time: t,
                survival,
                at_risk,
                events,
            });
        }
        at_risk -= removed;
    }
    Ok(steps)
}

/// Serialize a Kaplan-Meier table as CSV with columns
/// `time, survival, at_risk, events`.
pub fn kaplan_meier_csv(steps: &[KmStep]) -> String {
    let mut out = String::from("time,survival,at_risk,events\n");
    for s in steps {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.time, s.survival, s.at_risk, s.events
        ));
    }
    out
}

/// Maximum-likelihood Weibull fit with right censoring, used only as a
/// sensitivity comparator in place of the piecewise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    pub shape: f64,
    pub scale: f64,
}

/// Weibull log-likelihood with right censoring.
pub fn weibull_loglik(records: &[SurvivalRecord], params: &WeibullParams) -> f64 {
    let (k, s) = (params.shape, params.scale);
    if !(k > 0.0) || !(s > 0.0) {
        return f64::NEG_INFINITY;
    }
    records
        .iter()
        .map(|r| {
            let z = r.t / s;
            let cum_hazard = z.powf(k);
            let mut ll = -cum_hazard;
            if r.d == 1 {
                ll += k.ln() - s.ln() + (k - 1.0) * z.ln();
            }
            ll
        })
        .sum()
}

/// Weibull MLE via golden-section search on the profile likelihood in the
/// shape; the scale is closed-form given the shape.
pub fn weibull_mle(records: &[SurvivalRecord]) -> Result<WeibullParams> {
    let events = records.iter().filter(|r| r.d == 1).count();
    if events == 0 {
        return Err(Error::DegenerateFit(
            "Weibull MLE requires at least one event".into(),
        ));
    }
    let scale_given_shape = |k: f64| -> f64 {
        let num: f64 = records.iter().map(|r| r.t.powf(k)).sum();
        (num / events as f64).powf(1.0 / k)
    };
    let profile = |log_k: f64| -> f64 {
        let k = log_k.exp();
        weibull_loglik(
            records,
            &WeibullParams {
                shape: k,
                scale: scale_given_shape(k),
            },
        )
    };
    let log_k = golden_section_max(profile, (0.05f64).ln(), (20.0f64).ln(), 1e-10);
    let shape = log_k.exp();
    Ok(WeibullParams {
        shape,
        scale: scale_given_shape(shape),
    })
}

/// Golden-section maximization on `[lo, hi]`.
pub(crate) fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}
