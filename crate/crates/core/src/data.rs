//! Cohort ingestion and validation, covariate projection, synthetic
//! cohort simulation, and partition-agreement metrics.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use pathfinding::prelude::{kuhn_munkres, Matrix as KmMatrix};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bpe::{ChangepointGrid, SurvivalRecord};
use crate::lmm::{build_design, DesignSpec, SubjectData};
use crate::matnorm::SpdMatrix;
use crate::posterior::SubjectModelData;
use crate::{Error, Result};

/// One subject's longitudinal block plus optional static covariates.
#[derive(Debug, Clone)]
pub struct CohortSubject {
    pub id: String,
    pub times: Vec<f64>,
    /// n_i x H response matrix; every visit row is fully observed.
    pub y: DMatrix<f64>,
    pub covariates: Option<Vec<f64>>,
}

/// A validated cohort: aligned longitudinal blocks and per-event-variable
/// survival records over the same subject set.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub subjects: Vec<CohortSubject>,
    pub variable_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub event_names: Vec<String>,
    /// `survival[v][i]` is subject `i`'s record for event variable `v`.
    pub survival: Vec<Vec<SurvivalRecord>>,
}

impl Cohort {
    pub fn h(&self) -> usize {
        self.variable_names.len()
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Largest event/censoring time across all event variables.
    pub fn max_event_time(&self) -> f64 {
        self.survival
            .iter()
            .flatten()
            .map(|r| r.t)
            .fold(0.0, f64::max)
    }

    /// Remove one clustering variable (sensitivity reruns).
    pub fn drop_variable(&self, name: &str) -> Result<Cohort> {
        let idx = self
            .variable_names
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variable '{name}'")))?;
        if self.variable_names.len() == 1 {
            return Err(Error::InvalidArgument(
                "cannot drop the only longitudinal variable".into(),
            ));
        }
        let mut out = self.clone();
        out.variable_names.remove(idx);
        for s in &mut out.subjects {
            s.y = s.y.clone().remove_column(idx);
        }
        Ok(out)
    }
}

fn parse_f64(field: &str, file: &str, line: usize, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Schema {
        file: file.to_string(),
        line,
        message: format!("cannot parse {what} from '{field}'"),
    })
}

/// Load and cross-validate a cohort from a longitudinal CSV
/// (`subject_id, time, <var_1>, ..., <var_H>`), one survival CSV per
/// event variable (`subject_id, time, event`), and an optional static
/// covariate CSV (`subject_id, <cov_1>, ...`). The three sources must
/// cover exactly the same subjects.
pub fn load_cohort(
    long_path: &Path,
    surv_paths: &[impl AsRef<Path>],
    covariates_path: Option<&Path>,
) -> Result<Cohort> {
    let long_file = long_path.display().to_string();
    let mut rdr = csv::Reader::from_path(long_path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.len() < 3 || headers[0] != "subject_id" || headers[1] != "time" {
        return Err(Error::Schema {
            file: long_file,
            line: 1,
            message: "expected header `subject_id, time, <var_1>, ...`".into(),
        });
    }
    let variable_names: Vec<String> = headers[2..].to_vec();
    let h = variable_names.len();

    let mut order: Vec<String> = Vec::new();
    let mut visits: HashMap<String, Vec<(f64, Vec<f64>)>> = HashMap::new();
    let mut seen_visits: HashSet<(String, u64)> = HashSet::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Schema {
                file: long_file,
                line,
                message: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Schema {
                file: long_file,
                line,
                message: "empty subject_id".into(),
            });
        }
        let time = parse_f64(&record[1], &long_file, line, "time")?;
        if !time.is_finite() {
            return Err(Error::Schema {
                file: long_file,
                line,
                message: format!("non-finite time {time}"),
            });
        }
        if !seen_visits.insert((id.clone(), time.to_bits())) {
            return Err(Error::DuplicateVisit { subject: id, time });
        }
        let mut row = Vec::with_capacity(h);
        for (v, field) in record.iter().skip(2).enumerate() {
            if field.trim().is_empty() {
                return Err(Error::Missingness { subject: id, time });
            }
            row.push(parse_f64(field, &long_file, line, &variable_names[v])?);
        }
        if !visits.contains_key(&id) {
            order.push(id.clone());
        }
        visits.entry(id).or_default().push((time, row));
    }
    if order.is_empty() {
        return Err(Error::Schema {
            file: long_file,
            line: 1,
            message: "no longitudinal rows".into(),
        });
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in &order {
        let mut rows = visits.remove(id).unwrap();
        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let times: Vec<f64> = rows.iter().map(|(t, _)| *t).collect();
        let y = DMatrix::from_fn(rows.len(), h, |r, c| rows[r].1[c]);
        subjects.push(CohortSubject {
            id: id.clone(),
            times,
            y,
            covariates: None,
        });
    }
    let subject_set: HashSet<&String> = order.iter().collect();

    let mut event_names = Vec::new();
    let mut survival = Vec::new();
    for surv_path in surv_paths {
        let surv_path = surv_path.as_ref();
        let surv_file = surv_path.display().to_string();
        let name = surv_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| surv_file.clone());
        let mut rdr = csv::Reader::from_path(surv_path)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if headers != ["subject_id", "time", "event"] {
            return Err(Error::Schema {
                file: surv_file,
                line: 1,
                message: "expected header `subject_id, time, event`".into(),
            });
        }
        let mut records: HashMap<String, SurvivalRecord> = HashMap::new();
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record?;
            let id = record[0].trim().to_string();
            let t = parse_f64(&record[1], &surv_file, line, "time")?;
            let d = match record[2].trim() {
                "0" => 0u8,
                "1" => 1u8,
                other => {
                    return Err(Error::Schema {
                        file: surv_file,
                        line,
                        message: format!("event must be 0 or 1, got '{other}'"),
                    })
                }
            };
            if !subject_set.contains(&id) {
                return Err(Error::Consistency(format!(
                    "subject '{id}' in {surv_file} has no longitudinal data"
                )));
            }
            if records
                .insert(id.clone(), SurvivalRecord::new(id.clone(), t, d)?)
                .is_some()
            {
                return Err(Error::Consistency(format!(
                    "subject '{id}' appears more than once in {surv_file}"
                )));
            }
        }
        let mut aligned = Vec::with_capacity(order.len());
        for id in &order {
            match records.remove(id) {
                Some(r) => aligned.push(r),
                None => {
                    return Err(Error::Consistency(format!(
                        "subject '{id}' missing from {surv_file}"
                    )))
                }
            }
        }
        event_names.push(name);
        survival.push(aligned);
    }

    let mut covariate_names = Vec::new();
    if let Some(cov_path) = covariates_path {
        let cov_file = cov_path.display().to_string();
        let mut rdr = csv::Reader::from_path(cov_path)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if headers.len() < 2 || headers[0] != "subject_id" {
            return Err(Error::Schema {
                file: cov_file,
                line: 1,
                message: "expected header `subject_id, <cov_1>, ...`".into(),
            });
        }
        covariate_names = headers[1..].to_vec();
        let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record?;
            let id = record[0].trim().to_string();
            if !subject_set.contains(&id) {
                return Err(Error::Consistency(format!(
                    "subject '{id}' in {cov_file} has no longitudinal data"
                )));
            }
            let vals: Vec<f64> = record
                .iter()
                .skip(1)
                .map(|f| parse_f64(f, &cov_file, line, "covariate"))
                .collect::<Result<_>>()?;
            if rows.insert(id.clone(), vals).is_some() {
                return Err(Error::Consistency(format!(
                    "subject '{id}' appears more than once in {cov_file}"
                )));
            }
        }
        for subject in &mut subjects {
            subject.covariates = Some(rows.remove(&subject.id).ok_or_else(|| {
                Error::Consistency(format!("subject '{}' missing from {cov_file}", subject.id))
            })?);
        }
    }

    Ok(Cohort {
        subjects,
        variable_names,
        covariate_names,
        event_names,
        survival,
    })
}

/// Residualize every longitudinal variable against an intercept plus the
/// selected static covariates, using one hat matrix over the stacked
/// visits of the whole cohort. The row count and missingness pattern are
/// preserved exactly.
pub fn project_out_covariates(cohort: &Cohort, selected: &[String]) -> Result<Cohort> {
    let idx: Vec<usize> = selected
        .iter()
        .map(|name| {
            cohort
                .covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown covariate '{name}'")))
        })
        .collect::<Result<_>>()?;
    if !idx.is_empty() {
        for s in &cohort.subjects {
            if s.covariates.is_none() {
                return Err(Error::InvalidArgument(format!(
                    "subject '{}' has no covariates",
                    s.id
                )));
            }
        }
    }

    let total_rows: usize = cohort.subjects.iter().map(|s| s.times.len()).sum();
    let h = cohort.h();
    let mut c = DMatrix::zeros(total_rows, 1 + idx.len());
    let mut y = DMatrix::zeros(total_rows, h);
    let mut row = 0;
    for s in &cohort.subjects {
        for r in 0..s.times.len() {
            c[(row, 0)] = 1.0;
            for (j, &ci) in idx.iter().enumerate() {
                c[(row, 1 + j)] = s.covariates.as_ref().unwrap()[ci];
            }
            for v in 0..h {
                y[(row, v)] = s.y[(r, v)];
            }
            row += 1;
        }
    }

    let ctc = SpdMatrix::new(c.transpose() * &c)
        .map_err(|_| Error::InvalidArgument("rank-deficient covariate design".into()))?;
    let residual = &y - &c * ctc.solve(&(c.transpose() * &y))?;

    let mut out = cohort.clone();
    let mut row = 0;
    for s in &mut out.subjects {
        for r in 0..s.times.len() {
            for v in 0..h {
                s.y[(r, v)] = residual[(row, v)];
            }
            row += 1;
        }
    }
    Ok(out)
}

/// Assemble per-subject model inputs (design matrices + survival records)
/// from a validated cohort.
pub fn to_model_subjects(cohort: &Cohort, design: &DesignSpec) -> Result<Vec<SubjectModelData>> {
    cohort
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (x, w) = build_design(&s.times, design)?;
            Ok(SubjectModelData {
                id: s.id.clone(),
                long: Some(SubjectData::new(s.y.clone(), x, w)?),
                times: s.times.clone(),
                survival: cohort.survival.iter().map(|v| v[i].clone()).collect(),
            })
        })
        .collect()
}

/// Ground-truth generative parameters of one simulated cluster. Matrices
/// are plain nested vectors so scenarios serialize to flat config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterScenario {
    pub weight: f64,
    /// p x H fixed-effect coefficients, row-major.
    pub b: Vec<Vec<f64>>,
    /// q x q random-effect covariance.
    pub g: Vec<Vec<f64>>,
    pub sigma2: f64,
    /// H x H between-variable covariance.
    pub omega: Vec<Vec<f64>>,
    /// Per event variable, the piecewise-constant hazard levels.
    pub hazards: Vec<Vec<f64>>,
}

/// A full synthetic-cohort specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub n_subjects: usize,
    pub design: DesignSpec,
    pub visit_times: Vec<f64>,
    /// Per-visit whole-row dropout probability (first visit always kept).
    pub dropout: f64,
    /// Administrative censoring horizon; censoring times are uniform on
    /// (0, horizon].
    pub censor_horizon: f64,
    /// Width of the hazard grid; its span is the censoring horizon.
    pub grid_width: f64,
    pub clusters: Vec<ClusterScenario>,
    pub seed: u64,
}

impl SimScenario {
    /// Two well-separated planted populations with `h` longitudinal
    /// variables and one event variable.
    pub fn two_cluster_demo(n_subjects: usize, h: usize, seed: u64) -> Self {
        let intervals = ChangepointGrid::fixed_width(0.5, 6.0)
            .unwrap()
            .num_intervals();
        let cluster = |intercept: f64, slope: f64, lambda: f64| ClusterScenario {
            weight: 0.5,
            b: vec![vec![intercept; h], vec![slope; h]],
            g: vec![vec![0.1]],
            sigma2: 0.05,
            omega: (0..h)
                .map(|r| (0..h).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
                .collect(),
            hazards: vec![vec![lambda; intervals]],
        };
        Self {
            n_subjects,
            design: DesignSpec::default(),
            visit_times: vec![0.0, 1.0, 2.0, 3.0],
            dropout: 0.05,
            censor_horizon: 6.0,
            grid_width: 0.5,
            clusters: vec![cluster(0.0, 1.0, 0.2), cluster(2.0, -1.0, 1.5)],
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() || self.n_subjects == 0 {
            return Err(Error::InvalidArgument(
                "scenario needs at least one cluster and one subject".into(),
            ));
        }
        let weight_sum: f64 = self.clusters.iter().map(|c| c.weight).sum();
        if (weight_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "cluster weights sum to {weight_sum}, expected 1"
            )));
        }
        if self.visit_times.is_empty() {
            return Err(Error::InvalidArgument("empty visit schedule".into()));
        }
        if !(self.censor_horizon > 0.0) || !(self.grid_width > 0.0) {
            return Err(Error::InvalidArgument(
                "censoring horizon and grid width must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<ChangepointGrid> {
        ChangepointGrid::fixed_width(self.grid_width, self.censor_horizon)
    }
}

fn to_dmatrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(
            "matrix rows are empty or ragged".into(),
        ));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

/// Draw one matrix-normal deviate MN(0, row_cov, col_cov) via symmetric
/// square roots of both covariances.
pub fn sample_matrix_normal<R: Rng>(
    rng: &mut R,
    row_cov: &SpdMatrix,
    col_cov: &SpdMatrix,
) -> Result<DMatrix<f64>> {
    let z = DMatrix::from_fn(row_cov.dim(), col_cov.dim(), |_, _| {
        StandardNormal.sample(rng)
    });
    Ok(row_cov.sqrt()?.as_matrix() * z * col_cov.sqrt()?.as_matrix())
}

/// Inverse-transform sample of a piecewise-exponential event time; `None`
/// when the cumulative hazard over the grid is exhausted first.
fn sample_piecewise_event<R: Rng>(
    rng: &mut R,
    lambdas: &[f64],
    grid: &ChangepointGrid,
) -> Option<f64> {
    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let target = -u.ln();
    let mut cum = 0.0;
    let mut start = 0.0;
    for (j, &cut) in grid.cuts().iter().enumerate() {
        let width = cut - start;
        let lam = lambdas[j];
        if cum + lam * width >= target {
            return Some(start + (target - cum) / lam);
        }
        cum += lam * width;
        start = cut;
    }
    None
}

/// Simulate a cohort: cluster labels from the weights, longitudinal
/// blocks `Y = XB + WU + E` with matrix-normal random effects and noise,
/// piecewise-exponential event times, uniform administrative censoring,
/// and whole-visit dropout. Deterministic per seed.
pub fn simulate_cohort(scenario: &SimScenario) -> Result<(Cohort, Vec<usize>)> {
    scenario.validate()?;
    let grid = scenario.grid()?;
    let h = scenario.clusters[0].omega.len();
    let n_events = scenario.clusters[0].hazards.len();

    struct ClusterDraws {
        b: DMatrix<f64>,
        g: SpdMatrix,
        sigma: f64,
        omega: SpdMatrix,
        hazards: Vec<Vec<f64>>,
    }
    let mut clusters = Vec::with_capacity(scenario.clusters.len());
    for c in &scenario.clusters {
        if c.omega.len() != h || c.hazards.len() != n_events {
            return Err(Error::DimensionMismatch(
                "clusters disagree on variable counts".into(),
            ));
        }
        for haz in &c.hazards {
            if haz.len() != grid.num_intervals() {
                return Err(Error::DimensionMismatch(format!(
                    "hazard vector has {} levels but the grid has {} intervals",
                    haz.len(),
                    grid.num_intervals()
                )));
            }
        }
        clusters.push(ClusterDraws {
            b: to_dmatrix(&c.b)?,
            g: SpdMatrix::new(to_dmatrix(&c.g)?)?,
            sigma: c.sigma2.sqrt(),
            omega: SpdMatrix::new(to_dmatrix(&c.omega)?)?,
            hazards: c.hazards.clone(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut subjects = Vec::with_capacity(scenario.n_subjects);
    let mut survival: Vec<Vec<SurvivalRecord>> = vec![Vec::new(); n_events];
    let mut labels = Vec::with_capacity(scenario.n_subjects);

    for i in 0..scenario.n_subjects {
        let id = format!("s{:04}", i + 1);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut label = scenario.clusters.len() - 1;
        for (k, c) in scenario.clusters.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                label = k;
                break;
            }
        }
        labels.push(label);
        let cluster = &clusters[label];

        let times: Vec<f64> = scenario
            .visit_times
            .iter()
            .enumerate()
            .filter(|&(v, _)| v == 0 || rng.gen::<f64>() >= scenario.dropout)
            .map(|(_, &t)| t)
            .collect();
        let (x, w) = build_design(&times, &scenario.design)?;
        let u_mat = sample_matrix_normal(&mut rng, &cluster.g, &cluster.omega)?;
        let z = DMatrix::from_fn(times.len(), h, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let e = z * cluster.omega.sqrt()?.as_matrix() * cluster.sigma;
        let y = &x * &cluster.b + &w * u_mat + e;
        subjects.push(CohortSubject {
            id: id.clone(),
            times,
            y,
            covariates: None,
        });

        for (v, lambdas) in cluster.hazards.iter().enumerate() {
            let event = sample_piecewise_event(&mut rng, lambdas, &grid);
            let censor = rng.gen::<f64>().max(1e-12) * scenario.censor_horizon;
            let (t, d) = match event {
                Some(t_ev) if t_ev <= censor => (t_ev, 1),
                _ => (censor, 0),
            };
            survival[v].push(SurvivalRecord::new(id.clone(), t, d)?);
        }
    }

    let cohort = Cohort {
        subjects,
        variable_names: (1..=h).map(|v| format!("var_{v}")).collect(),
        covariate_names: Vec::new(),
        event_names: (1..=n_events).map(|v| format!("event_{v}")).collect(),
        survival,
    };
    Ok((cohort, labels))
}

/// Standard adjusted Rand index from the pair-counting contingency table.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "label vectors have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut rows: HashMap<usize, f64> = HashMap::new();
    let mut cols: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let sum_cells: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| choose2(v)).sum();
    let total = choose2(n as f64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        return Ok(1.0); // both partitions trivial
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

/// Minimum number (and fraction) of subjects clustered differently under
/// the best bijective matching of cluster labels, via Hungarian
/// assignment on the confusion matrix.
pub fn membership_diff(a: &[usize], b: &[usize]) -> Result<(usize, f64)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "label vectors have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok((0, 0.0));
    }
    let relabel = |labels: &[usize]| -> (Vec<usize>, usize) {
        let mut map = HashMap::new();
        let compact: Vec<usize> = labels
            .iter()
            .map(|&l| {
                let next = map.len();
                *map.entry(l).or_insert(next)
            })
            .collect();
        (compact, map.len())
    };
    let (ca, ka) = relabel(a);
    let (cb, kb) = relabel(b);
    let dim = ka.max(kb);
    let mut confusion = vec![vec![0i64; dim]; dim];
    for (&x, &y) in ca.iter().zip(&cb) {
        confusion[x][y] += 1;
    }
    let weights = KmMatrix::from_rows(confusion)
        .map_err(|e| Error::InvalidArgument(format!("confusion matrix: {e}")))?;
    let (agreement, _) = kuhn_munkres(&weights);
    let count = a.len() - agreement as usize;
    Ok((count, count as f64 / a.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_file(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    const LONG_OK: &str = "subject_id,time,bmi,fev\n\
                           a,0.0,21.0,3.1\n\
                           a,1.0,21.5,3.0\n\
                           a,2.0,22.0,2.9\n\
                           b,0.0,25.0,2.5\n\
                           b,1.0,25.5,2.4\n\
                           b,2.0,26.0,2.3\n";
    const SURV_OK: &str = "subject_id,time,event\na,4.0,1\nb,5.0,0\n";

    #[test]
    fn load_complete_two_subject_cohort() {
        let dir = tempfile::tempdir().unwrap();
        let long = write_file(dir.path(), "long.csv", LONG_OK);
        let surv = write_file(dir.path(), "death.csv", SURV_OK);
        let cohort = load_cohort(&long, &[surv], None).unwrap();
        assert_eq!(cohort.len(), 2);
        assert_eq!(cohort.h(), 2);
        assert_eq!(cohort.variable_names, vec!["bmi", "fev"]);
        assert_eq!(cohort.event_names, vec!["death"]);
        assert!(cohort.subjects.iter().all(|s| s.times.len() == 3));
        assert_eq!(cohort.survival[0][0].d, 1);
        assert_eq!(cohort.survival[0][1].t, 5.0);
    }

    #[test]
    fn partially_observed_visit_is_rejected_with_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let long = write_file(
            dir.path(),
            "long.csv",
            "subject_id,time,bmi,fev\na,0.0,21.0,3.1\na,1.0,,3.0\n",
        );
        let surv = write_file(dir.path(), "death.csv", "subject_id,time,event\na,4.0,1\n");
        let err = load_cohort(&long, &[surv], None).unwrap_err();
        match err {
            Error::Missingness { subject, time } => {
                assert_eq!(subject, "a");
                assert_eq!(time, 1.0);
            }
            other => panic!("expected missingness error, got {other:?}"),
        }
    }

    #[test]
    fn subject_absent_from_survival_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let long = write_file(dir.path(), "long.csv", LONG_OK);
        let surv = write_file(dir.path(), "death.csv", "subject_id,time,event\na,4.0,1\n");
        let err = load_cohort(&long, &[surv], None).unwrap_err();
        assert!(matches!(err, Error::Consistency(msg) if msg.contains('b')));
    }

    #[test]
    fn duplicate_visit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let long = write_file(
            dir.path(),
            "long.csv",
            "subject_id,time,bmi\na,0.0,21.0\na,0.0,22.0\n",
        );
        let surv = write_file(dir.path(), "death.csv", "subject_id,time,event\na,4.0,1\n");
        let err = load_cohort(&long, &[surv], None).unwrap_err();
        assert!(matches!(err, Error::DuplicateVisit { .. }));
    }

    #[test]
    fn malformed_header_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let long = write_file(dir.path(), "long.csv", "id,t,bmi\na,0.0,21.0\n");
        let surv = write_file(dir.path(), "death.csv", SURV_OK);
        let err = load_cohort(&long, &[surv], None).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }));
    }

    fn demo_cohort_with_covariate() -> Cohort {
        let dir = tempfile::tempdir().unwrap();
        let long = write_file(dir.path(), "long.csv", LONG_OK);
        let surv = write_file(dir.path(), "death.csv", SURV_OK);
        let cov = write_file(dir.path(), "cov.csv", "subject_id,age\na,50\nb,70\n");
        load_cohort(&long, &[surv], Some(&cov)).unwrap()
    }

    #[test]
    fn intercept_only_projection_mean_centers() {
        let cohort = demo_cohort_with_covariate();
        let projected = project_out_covariates(&cohort, &[]).unwrap();
        for v in 0..cohort.h() {
            let total: f64 = projected.subjects.iter().map(|s| s.y.column(v).sum()).sum();
            assert!(total.abs() < 1e-10, "column {v} not centered: {total}");
        }
    }

    #[test]
    fn exact_linear_dependence_projects_to_zero() {
        let mut cohort = demo_cohort_with_covariate();
        // First variable exactly linear in age: y = 2*age + 1.
        for s in &mut cohort.subjects {
            let age = s.covariates.as_ref().unwrap()[0];
            for r in 0..s.times.len() {
                s.y[(r, 0)] = 2.0 * age + 1.0;
            }
        }
        let projected = project_out_covariates(&cohort, &["age".into()]).unwrap();
        for s in &projected.subjects {
            for r in 0..s.times.len() {
                assert!(s.y[(r, 0)].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_design_and_projection_is_idempotent() {
        let mut cohort = demo_cohort_with_covariate();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in &mut cohort.subjects {
            for r in 0..s.times.len() {
                for v in 0..2 {
                    s.y[(r, v)] = rng.gen::<f64>() * 10.0 - 5.0;
                }
            }
        }
        let once = project_out_covariates(&cohort, &["age".into()]).unwrap();
        // orthogonality: sum(residual) and sum(age * residual) vanish
        for v in 0..2 {
            let (mut dot1, mut dot_age) = (0.0, 0.0);
            for s in &once.subjects {
                let age = s.covariates.as_ref().unwrap()[0];
                for r in 0..s.times.len() {
                    dot1 += s.y[(r, v)];
                    dot_age += age * s.y[(r, v)];
                }
            }
            assert!(dot1.abs() < 1e-8 && dot_age.abs() < 1e-8);
        }
        let twice = project_out_covariates(&once, &["age".into()]).unwrap();
        for (s1, s2) in once.subjects.iter().zip(&twice.subjects) {
            assert_eq!(s1.times, s2.times);
            assert!((&s1.y - &s2.y).abs().max() < 1e-10);
        }
    }

    #[test]
    fn noiseless_simulation_reproduces_fixed_effects() {
        let mut scenario = SimScenario::two_cluster_demo(20, 2, 3);
        for c in &mut scenario.clusters {
            c.sigma2 = 1e-12;
            c.g = vec![vec![1e-12]];
        }
        scenario.dropout = 0.0;
        let (cohort, labels) = simulate_cohort(&scenario).unwrap();
        for (s, &label) in cohort.subjects.iter().zip(&labels) {
            let b = to_dmatrix(&scenario.clusters[label].b).unwrap();
            let (x, _) = build_design(&s.times, &scenario.design).unwrap();
            assert!((&s.y - x * b).abs().max() < 1e-5);
        }
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let scenario = SimScenario::two_cluster_demo(30, 1, 42);
        let (a, la) = simulate_cohort(&scenario).unwrap();
        let (b, lb) = simulate_cohort(&scenario).unwrap();
        assert_eq!(la, lb);
        for (sa, sb) in a.subjects.iter().zip(&b.subjects) {
            assert_eq!(sa.times, sb.times);
            assert_eq!(sa.y, sb.y);
        }
        for (va, vb) in a.survival.iter().zip(&b.survival) {
            for (ra, rb) in va.iter().zip(vb) {
                assert_eq!((ra.t, ra.d), (rb.t, rb.d));
            }
        }
    }

    #[test]
    fn label_frequencies_match_weights() {
        let mut scenario = SimScenario::two_cluster_demo(2000, 1, 9);
        scenario.clusters[0].weight = 0.3;
        scenario.clusters[1].weight = 0.7;
        let (_, labels) = simulate_cohort(&scenario).unwrap();
        let freq = labels.iter().filter(|&&l| l == 0).count() as f64 / 2000.0;
        let se = (0.3f64 * 0.7 / 2000.0).sqrt();
        assert!((freq - 0.3).abs() < 3.0 * se, "freq {freq}");
    }

    #[test]
    fn constant_hazard_event_times_pass_ks_against_exponential() {
        // Single cluster, lambda = 1 everywhere, huge censoring horizon so
        // almost nothing is censored.
        let scenario = SimScenario {
            n_subjects: 2000,
            design: DesignSpec::default(),
            visit_times: vec![0.0, 1.0],
            dropout: 0.0,
            censor_horizon: 200.0,
            grid_width: 5.0,
            clusters: vec![ClusterScenario {
                weight: 1.0,
                b: vec![vec![0.0], vec![0.0]],
                g: vec![vec![0.1]],
                sigma2: 1.0,
                omega: vec![vec![1.0]],
                hazards: vec![vec![
                    1.0;
                    ChangepointGrid::fixed_width(5.0, 200.0).unwrap().num_intervals()
                ]],
            }],
            seed: 17,
        };
        let (cohort, _) = simulate_cohort(&scenario).unwrap();
        let mut events: Vec<f64> = cohort.survival[0]
            .iter()
            .filter(|r| r.d == 1)
            .map(|r| r.t)
            .collect();
        assert!(events.len() > 1900, "unexpected censoring rate");
        events.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = events.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, &t) in events.iter().enumerate() {
            let f = 1.0 - (-t).exp();
            ks = ks.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
        }
        let critical = 1.628 / n.sqrt(); // 1% level
        assert!(ks < critical, "KS {ks} >= {critical}");
    }

    #[test]
    fn matrix_normal_moments_match_kronecker_covariance() {
        let g = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5])).unwrap();
        let omega =
            SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 0.8])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        // 50k draws keep the sampling error of the smallest nonzero
        // entries (0.06) comfortably inside the 10% relative tolerance.
        let n = 50_000;
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let u = sample_matrix_normal(&mut rng, &g, &omega).unwrap();
            // column-major vectorization
            draws.push([u[(0, 0)], u[(1, 0)], u[(0, 1)], u[(1, 1)]]);
        }
        // true covariance of vec(U) is omega ⊗ g
        let kron = omega.as_matrix().kronecker(g.as_matrix());
        for i in 0..4 {
            for j in 0..4 {
                let emp: f64 =
                    draws.iter().map(|d| d[i] * d[j]).sum::<f64>() / n as f64;
                let truth = kron[(i, j)];
                if truth.abs() > 0.05 {
                    assert!(
                        (emp - truth).abs() / truth.abs() < 0.1,
                        "cov[{i},{j}]: empirical {emp}, true {truth}"
                    );
                } else {
                    assert!(emp.abs() < 0.05, "cov[{i},{j}]: empirical {emp}");
                }
            }
        }
    }

    #[test]
    fn ari_hand_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        let ari = adjusted_rand_index(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap();
        assert!((ari - (-0.5)).abs() < 1e-12, "got {ari}");
        assert!(adjusted_rand_index(&[0, 1], &[0, 1, 2]).is_err());
    }

    #[test]
    fn membership_diff_hand_examples() {
        assert_eq!(membership_diff(&[0, 1, 0], &[0, 1, 0]).unwrap(), (0, 0.0));
        let a = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let b = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        assert_eq!(membership_diff(&a, &b).unwrap(), (1, 0.1));
        // invariance to relabeling
        let b2 = [7, 7, 7, 7, 3, 3, 3, 3, 3, 3];
        assert_eq!(membership_diff(&a, &b2).unwrap(), (1, 0.1));
    }

    fn brute_force_diff(a: &[usize], b: &[usize], k: usize) -> usize {
        fn perms(k: usize) -> Vec<Vec<usize>> {
            if k == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in perms(k - 1) {
                for pos in 0..k {
                    let mut q = p.clone();
                    q.insert(pos, k - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(k)
            .into_iter()
            .map(|perm| {
                a.iter()
                    .zip(b)
                    .filter(|(&x, &y)| perm[x] != y)
                    .count()
            })
            .min()
            .unwrap()
    }

    #[test]
    fn membership_diff_matches_exhaustive_permutation_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = 12;
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let (count, frac) = membership_diff(&a, &b).unwrap();
            assert_eq!(count, brute_force_diff(&a, &b, 3));
            assert!((frac - count as f64 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn drop_variable_removes_one_column() {
        let cohort = demo_cohort_with_covariate();
        let dropped = cohort.drop_variable("bmi").unwrap();
        assert_eq!(dropped.variable_names, vec!["fev"]);
        assert_eq!(dropped.subjects[0].y.ncols(), 1);
        assert_eq!(dropped.subjects[0].y[(0, 0)], cohort.subjects[0].y[(0, 1)]);
        assert!(cohort.drop_variable("nope").is_err());
    }
}
