//! MAP fitting of the cluster-specific multivariate linear mixed model.
//!
//! The model for one subject is `Y_i = X_i B + W_i U_i + E_i` with
//! matrix-normal random effects `U_i ~ MN(0, G, Ω)` and noise
//! `E_i ~ MN(0, σ²I, Ω)`, so `Y_i ~ MN(X_i B, W_i G W_iᵀ + σ²I, Ω)`.
//! Fitting alternates between the `{B, G, σ²}` subproblem on whitened
//! data (whose columns are independent single-response mixed models
//! sharing G and σ²) and the closed-form inverse-Wishart mode update of Ω.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::matnorm::{MatNormParams, SpdMatrix, Woodbury};
use crate::{Error, Result};

/// Polynomial time bases for the fixed and random design matrices.
///
/// Powers `[0, 1]` give intercept + slope. The default design is linear
/// time in the fixed effects with a random intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub fixed_powers: Vec<u32>,
    pub random_powers: Vec<u32>,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self {
            fixed_powers: vec![0, 1],
            random_powers: vec![0],
        }
    }
}

impl DesignSpec {
    pub fn quadratic_time() -> Self {
        Self {
            fixed_powers: vec![0, 1, 2],
            random_powers: vec![0],
        }
    }

    pub fn p(&self) -> usize {
        self.fixed_powers.len()
    }

    pub fn q(&self) -> usize {
        self.random_powers.len()
    }
}

/// Evaluate the design bases at a subject's time points, producing the
/// fixed-effects matrix X (n x p) and random-effects matrix W (n x q).
pub fn build_design(times: &[f64], spec: &DesignSpec) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("empty time vector".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("times must be finite".into()));
    }
    let eval = |powers: &[u32]| {
        DMatrix::from_fn(times.len(), powers.len(), |r, c| times[r].powi(powers[c] as i32))
    };
    Ok((eval(&spec.fixed_powers), eval(&spec.random_powers)))
}

/// One mixture component's longitudinal parameter set.
#[derive(Debug, Clone)]
pub struct LmmParams {
    /// Fixed-effect coefficients, p x H.
    pub b: DMatrix<f64>,
    /// Random-effect covariance, q x q.
    pub g: SpdMatrix,
    /// Residual variance (row covariance is σ²I).
    pub sigma2: f64,
    /// Between-variable covariance, H x H, shared by random effects and
    /// noise.
    pub omega: SpdMatrix,
}

impl LmmParams {
    pub fn new(b: DMatrix<f64>, g: SpdMatrix, sigma2: f64, omega: SpdMatrix) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma2 must be positive, got {sigma2}"
            )));
        }
        if b.ncols() != omega.dim() {
            return Err(Error::DimensionMismatch(format!(
                "B has {} columns but Omega dim is {}",
                b.ncols(),
                omega.dim()
            )));
        }
        Ok(Self { b, g, sigma2, omega })
    }

    pub fn h(&self) -> usize {
        self.omega.dim()
    }
}

/// Hyperparameters for the component priors.
///
/// Ω carries the inverse-Wishart prior IW(Ψ, ν); G, σ² and B get weakly
/// informative conjugate forms (inverse-Wishart, inverse-gamma, and an
/// optional Gaussian precision on the whitened coefficients).
#[derive(Debug, Clone)]
pub struct LmmPriors {
    pub psi: SpdMatrix,
    pub nu: f64,
    pub g_psi: SpdMatrix,
    pub g_nu: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    pub b_prior_precision: f64,
}

impl LmmPriors {
    pub fn new(
        psi: SpdMatrix,
        nu: f64,
        g_psi: SpdMatrix,
        g_nu: f64,
        sigma2_shape: f64,
        sigma2_rate: f64,
        b_prior_precision: f64,
    ) -> Result<Self> {
        let h = psi.dim() as f64;
        let q = g_psi.dim() as f64;
        if nu <= h - 1.0 || g_nu <= q - 1.0 {
            return Err(Error::InvalidArgument(
                "inverse-Wishart degrees of freedom must exceed dim - 1".into(),
            ));
        }
        if !(sigma2_shape > 0.0) || !(sigma2_rate > 0.0) || b_prior_precision < 0.0 {
            return Err(Error::InvalidArgument(
                "sigma2 prior parameters must be positive and B precision nonnegative".into(),
            ));
        }
        Ok(Self {
            psi,
            nu,
            g_psi,
            g_nu,
            sigma2_shape,
            sigma2_rate,
            b_prior_precision,
        })
    }

    /// Weakly informative defaults for an H-variable, q-random-effect model:
    /// Ω ~ IW(I, H+2), G ~ IW(I, q+2), σ² ~ IG(2, 1), flat prior on B.
    pub fn default_for(h: usize, q: usize) -> Self {
        Self {
            psi: SpdMatrix::identity(h),
            nu: h as f64 + 2.0,
            g_psi: SpdMatrix::identity(q),
            g_nu: q as f64 + 2.0,
            sigma2_shape: 2.0,
            sigma2_rate: 1.0,
            b_prior_precision: 0.0,
        }
    }

    /// Log prior over (Ω, G, σ²); the flat/Gaussian B term is handled on
    /// the whitened scale inside the fit.
    pub fn log_density(&self, params: &LmmParams) -> Result<f64> {
        Ok(log_inv_wishart(&params.omega, &self.psi, self.nu)?
            + log_inv_wishart(&params.g, &self.g_psi, self.g_nu)?
            + log_inv_gamma(params.sigma2, self.sigma2_shape, self.sigma2_rate))
    }
}

/// Normalized inverse-Wishart log-density.
pub fn log_inv_wishart(x: &SpdMatrix, psi: &SpdMatrix, nu: f64) -> Result<f64> {
    let d = x.dim() as f64;
    let x_inv = x.inverse()?;
    let tr = (psi.as_matrix() * x_inv).trace();
    Ok(0.5 * nu * psi.log_det()? - 0.5 * nu * d * std::f64::consts::LN_2
        - ln_multigamma(x.dim(), 0.5 * nu)
        - 0.5 * (nu + d + 1.0) * x.log_det()?
        - 0.5 * tr)
}

/// Normalized inverse-gamma log-density (shape/rate parameterization).
pub fn log_inv_gamma(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

fn ln_multigamma(d: usize, a: f64) -> f64 {
    let mut s = 0.25 * (d * (d - 1)) as f64 * std::f64::consts::PI.ln();
    for j in 0..d {
        s += ln_gamma(a - 0.5 * j as f64);
    }
    s
}

/// One subject's longitudinal block with its evaluated designs.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl SubjectData {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        if y.nrows() != x.nrows() || y.nrows() != w.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "rows of Y ({}), X ({}), W ({}) differ",
                y.nrows(),
                x.nrows(),
                w.nrows()
            )));
        }
        Ok(Self { y, x, w })
    }

    pub fn n_rows(&self) -> usize {
        self.y.nrows()
    }
}

/// Marginal log-likelihood of one subject's block under the component,
/// with the N x N row covariance handled through the Woodbury paths.
pub fn lmm_subject_loglik(subject: &SubjectData, params: &LmmParams) -> Result<f64> {
    let n = subject.n_rows();
    let h = params.h();
    if subject.y.ncols() != h {
        return Err(Error::DimensionMismatch(format!(
            "subject has {} variables but Omega dim is {}",
            subject.y.ncols(),
            h
        )));
    }
    let wb = Woodbury::new(&subject.w, &params.g, params.sigma2)?;
    let resid = &subject.y - &subject.x * &params.b;
    let row_solved = wb.solve(&resid);
    let quad = (params.omega.solve(&resid.transpose())? * row_solved).trace();
    const LN_2PI: f64 = 1.837877066409345483560659472811;
    Ok(-0.5
        * ((n * h) as f64 * LN_2PI
            + h as f64 * wb.log_det()
            + n as f64 * params.omega.log_det()?
            + quad))
}

/// Σ_i R_iᵀ (W_i G W_iᵀ + σ²I)^{-1} R_i over the cluster, the H x H data
/// term of the Ω update.
pub fn residual_quadratic(subjects: &[SubjectData], params: &LmmParams) -> Result<DMatrix<f64>> {
    let h = params.h();
    let mut acc = DMatrix::zeros(h, h);
    for s in subjects {
        let wb = Woodbury::new(&s.w, &params.g, params.sigma2)?;
        let resid = &s.y - &s.x * &params.b;
        acc += resid.transpose() * wb.solve(&resid);
    }
    Ok(acc)
}

/// Closed-form conditional mode of Ω:
/// `Ω̂ = (Ψ + Σ RᵀV^{-1}R) / (ν + N_k + H + 1)` with `N_k` the total row
/// count of the cluster.
pub fn update_omega(
    residual_quad: &DMatrix<f64>,
    priors: &LmmPriors,
    n_rows: usize,
) -> Result<SpdMatrix> {
    let h = priors.psi.dim();
    if residual_quad.nrows() != h || residual_quad.ncols() != h {
        return Err(Error::DimensionMismatch(format!(
            "residual quadratic is {}x{} but Psi dim is {h}",
            residual_quad.nrows(),
            residual_quad.ncols()
        )));
    }
    let nu_hat = priors.nu + n_rows as f64;
    let psi_hat = priors.psi.as_matrix() + residual_quad;
    let sym = (&psi_hat + psi_hat.transpose()) * 0.5;
    SpdMatrix::new(sym / (nu_hat + h as f64 + 1.0))
}

/// Result of a coordinate-ascent MAP fit.
#[derive(Debug, Clone)]
pub struct LmmFit {
    pub params: LmmParams,
    pub log_posterior: f64,
    /// Objective after every outer iteration; nondecreasing to 1e-9.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Full MAP objective for a fixed cluster: Σ subject log-likelihoods plus
/// the component log priors.
pub fn lmm_log_posterior(
    subjects: &[SubjectData],
    params: &LmmParams,
    priors: &LmmPriors,
) -> Result<f64> {
    let mut obj = priors.log_density(params)?;
    for s in subjects {
        obj += lmm_subject_loglik(s, params)?;
    }
    if priors.b_prior_precision > 0.0 {
        // Gaussian prior applied on the whitened coefficient scale.
        let b_w = &params.b * params.omega.inv_sqrt()?.as_matrix();
        obj -= 0.5 * priors.b_prior_precision * b_w.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(obj)
}

const SIGMA2_FLOOR_LN: f64 = -23.0; // ~1e-10
const SIGMA2_CEIL_LN: f64 = 14.0; // ~1.2e6

/// Inner state while Ω is held fixed: whitened responses plus the
/// whitened-scale coefficients.
struct WhitenedProblem {
    y_w: Vec<DMatrix<f64>>,
    subjects_x: Vec<DMatrix<f64>>,
    subjects_w: Vec<DMatrix<f64>>,
    b_w: DMatrix<f64>,
}

impl WhitenedProblem {
    fn new(subjects: &[SubjectData], params: &LmmParams) -> Result<Self> {
        let inv_sqrt = params.omega.inv_sqrt()?;
        Ok(Self {
            y_w: subjects.iter().map(|s| &s.y * inv_sqrt.as_matrix()).collect(),
            subjects_x: subjects.iter().map(|s| s.x.clone()).collect(),
            subjects_w: subjects.iter().map(|s| s.w.clone()).collect(),
            b_w: &params.b * inv_sqrt.as_matrix(),
        })
    }

    /// Whitened-scale objective: independent-column likelihood plus the
    /// priors on G, σ², and the (whitened) B.
    fn objective(&self, g: &SpdMatrix, sigma2: f64, priors: &LmmPriors) -> Result<f64> {
        const LN_2PI: f64 = 1.837877066409345483560659472811;
        let mut obj = log_inv_wishart(g, &priors.g_psi, priors.g_nu)?
            + log_inv_gamma(sigma2, priors.sigma2_shape, priors.sigma2_rate);
        for i in 0..self.y_w.len() {
            let wb = Woodbury::new(&self.subjects_w[i], g, sigma2)?;
            let resid = &self.y_w[i] - &self.subjects_x[i] * &self.b_w;
            let solved = wb.solve(&resid);
            let quad = (resid.transpose() * solved).trace();
            let (n, h) = (resid.nrows() as f64, resid.ncols() as f64);
            obj += -0.5 * (n * h * LN_2PI + h * wb.log_det() + quad);
        }
        if priors.b_prior_precision > 0.0 {
            obj -= 0.5 * priors.b_prior_precision * self.b_w.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(obj)
    }

    /// GLS update of the whitened coefficients given (G, σ²). With the
    /// columns independent and sharing the row covariance, one p x p
    /// normal matrix serves every column.
    fn update_b(&mut self, g: &SpdMatrix, sigma2: f64, priors: &LmmPriors) -> Result<()> {
        let p = self.subjects_x[0].ncols();
        let h = self.y_w[0].ncols();
        let mut normal = DMatrix::<f64>::identity(p, p) * priors.b_prior_precision;
        let mut rhs = DMatrix::<f64>::zeros(p, h);
        for i in 0..self.y_w.len() {
            let wb = Woodbury::new(&self.subjects_w[i], g, sigma2)?;
            let vx = wb.solve(&self.subjects_x[i]);
            normal += self.subjects_x[i].transpose() * &vx;
            rhs += vx.transpose() * &self.y_w[i];
        }
        let chol = normal
            .cholesky()
            .ok_or_else(|| Error::DegenerateFit("singular GLS normal matrix".into()))?;
        self.b_w = chol.solve(&rhs);
        Ok(())
    }

    /// EM-style MAP update of G from the conditional moments of the
    /// random effects.
    fn update_g(&self, g: &SpdMatrix, sigma2: f64, priors: &LmmPriors) -> Result<SpdMatrix> {
        let q = g.dim();
        let h = self.y_w[0].ncols();
        let mut scatter = priors.g_psi.as_matrix().clone();
        let g_inv = g.inverse()?;
        for i in 0..self.y_w.len() {
            let w = &self.subjects_w[i];
            let prec = &g_inv + w.transpose() * w / sigma2;
            let cond_cov = prec
                .cholesky()
                .ok_or_else(|| Error::DegenerateFit("singular random-effect precision".into()))?
                .inverse();
            let resid = &self.y_w[i] - &self.subjects_x[i] * &self.b_w;
            let u_hat = &cond_cov * (w.transpose() * &resid) / sigma2; // q x H
            scatter += &u_hat * u_hat.transpose() + &cond_cov * h as f64;
        }
        let m = (self.y_w.len() * h) as f64;
        let sym = (&scatter + scatter.transpose()) * 0.5;
        SpdMatrix::new(sym / (priors.g_nu + m + q as f64 + 1.0))
    }

    /// One-dimensional mode search for σ² on the log scale. The bracket
    /// starts narrow around the current value (coordinate ascent moves σ²
    /// slowly) and expands whenever the maximizer lands on an edge.
    fn update_sigma2(&self, g: &SpdMatrix, sigma2: f64, priors: &LmmPriors) -> f64 {
        let f = |ln_s2: f64| -> f64 {
            self.objective(g, ln_s2.exp(), priors)
                .unwrap_or(f64::NEG_INFINITY)
        };
        let center = sigma2.ln();
        let mut half_width = 1.5;
        loop {
            let lo = (center - half_width).max(SIGMA2_FLOOR_LN);
            let hi = (center + half_width).min(SIGMA2_CEIL_LN);
            let best = crate::bpe::golden_section_max(&f, lo, hi, 1e-5);
            let at_edge = (best - lo < 1e-3 && lo > SIGMA2_FLOOR_LN)
                || (hi - best < 1e-3 && hi < SIGMA2_CEIL_LN);
            if !at_edge || half_width >= SIGMA2_CEIL_LN - SIGMA2_FLOOR_LN {
                return best.exp();
            }
            half_width *= 4.0;
        }
    }
}

/// Cold-start parameters: pooled OLS coefficients, residual-covariance Ω
/// (floored to SPD), G = 0.1 I, σ² from the whitened residual variance.
pub fn initial_params(subjects: &[SubjectData], q: usize) -> Result<LmmParams> {
    let p = subjects[0].x.ncols();
    let h = subjects[0].y.ncols();
    let total_rows: usize = subjects.iter().map(|s| s.n_rows()).sum();
    let mut xtx = DMatrix::<f64>::identity(p, p) * 1e-8;
    let mut xty = DMatrix::<f64>::zeros(p, h);
    for s in subjects {
        xtx += s.x.transpose() * &s.x;
        xty += s.x.transpose() * &s.y;
    }
    let b = xtx
        .cholesky()
        .ok_or_else(|| Error::DegenerateFit("singular pooled design".into()))?
        .solve(&xty);

    let mut scatter = DMatrix::<f64>::zeros(h, h);
    for s in subjects {
        let resid = &s.y - &s.x * &b;
        scatter += resid.transpose() * resid;
    }
    let mut omega_raw = scatter / (total_rows.max(2) as f64 - 1.0);
    // Floor to SPD: lift small/negative eigenvalues.
    let eig = nalgebra::SymmetricEigen::new((&omega_raw + omega_raw.transpose()) * 0.5);
    let max_ev = eig.eigenvalues.iter().cloned().fold(1e-6, f64::max);
    let floored = DVector::from_iterator(
        h,
        eig.eigenvalues.iter().map(|&e| e.max(1e-6 * max_ev)),
    );
    omega_raw = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    let omega = SpdMatrix::new((&omega_raw + omega_raw.transpose()) * 0.5)?;

    // Whitened residual variance as the σ² starting point.
    let inv_sqrt = omega.inv_sqrt()?;
    let mut ss = 0.0;
    for s in subjects {
        let resid = (&s.y - &s.x * &b) * inv_sqrt.as_matrix();
        ss += resid.iter().map(|v| v * v).sum::<f64>();
    }
    let sigma2 = (ss / (total_rows * h) as f64).max(1e-6);

    LmmParams::new(
        b,
        SpdMatrix::new(DMatrix::identity(q, q) * 0.1)?,
        sigma2,
        omega,
    )
}

/// Coordinate-ascent MAP fit: `{B, G, σ²}` on whitened data given Ω,
/// alternated with the closed-form Ω update, until the log posterior
/// stabilizes.
pub fn fit_lmm_map(
    subjects: &[SubjectData],
    priors: &LmmPriors,
    init: Option<&LmmParams>,
    tol: f64,
    max_iter: usize,
) -> Result<LmmFit> {
    if subjects.len() < 2 {
        return Err(Error::DegenerateFit(
            "random effects require at least two subjects in a cluster".into(),
        ));
    }
    let p = subjects[0].x.ncols();
    let total_rows: usize = subjects.iter().map(|s| s.n_rows()).sum();
    if total_rows <= p {
        return Err(Error::DegenerateFit(format!(
            "{total_rows} rows cannot identify {p} fixed-effect columns"
        )));
    }
    let q = subjects[0].w.ncols();
    let mut params = match init {
        Some(p0) => p0.clone(),
        None => initial_params(subjects, q)?,
    };

    let mut obj = lmm_log_posterior(subjects, &params, priors)?;
    let mut trace = vec![obj];
    let mut converged = false;
    // Tolerances are scale-aware: convergence is judged relative to the
    // objective's magnitude so large cohorts don't spin on absolute slack.
    let inner_max = 30;

    for _ in 0..max_iter {
        // Phase (a): {B, G, σ²} on whitened data, Ω fixed.
        let mut problem = WhitenedProblem::new(subjects, &params)?;
        let mut inner_obj = problem.objective(&params.g, params.sigma2, priors)?;
        for _ in 0..inner_max {
            problem.update_b(&params.g, params.sigma2, priors)?;
            let mut cur = problem.objective(&params.g, params.sigma2, priors)?;

            let sigma2_cand = problem.update_sigma2(&params.g, params.sigma2, priors);
            let sigma2_val = problem.objective(&params.g, sigma2_cand, priors)?;
            if sigma2_val >= cur {
                params.sigma2 = sigma2_cand;
                cur = sigma2_val;
            }

            let g_cand = problem.update_g(&params.g, params.sigma2, priors)?;
            let g_val = problem.objective(&g_cand, params.sigma2, priors)?;
            if g_val >= cur {
                params.g = g_cand;
                cur = g_val;
            }

            let done = cur - inner_obj < 1e-7 * (1.0 + inner_obj.abs());
            inner_obj = cur;
            if done {
                break;
            }
        }
        // Map coefficients back to the raw scale.
        params.b = &problem.b_w * params.omega.sqrt()?.as_matrix();

        // Phase (b): closed-form Ω update.
        let quad = residual_quadratic(subjects, &params)?;
        let omega_cand = update_omega(&quad, priors, total_rows)?;
        let mut cand = params.clone();
        cand.omega = omega_cand;
        let cand_obj = lmm_log_posterior(subjects, &cand, priors)?;
        let cur_obj = lmm_log_posterior(subjects, &params, priors)?;
        if cand_obj >= cur_obj {
            params = cand;
        }

        let new_obj = cand_obj.max(cur_obj);
        trace.push(new_obj);
        if (new_obj - obj).abs() < tol * (1.0 + obj.abs()) {
            obj = new_obj;
            converged = true;
            break;
        }
        obj = new_obj;
    }

    Ok(LmmFit {
        params,
        log_posterior: obj,
        trace,
        converged,
    })
}

/// Matrix-normal view of a subject's marginal distribution, used by tests
/// that cross-check against the dense Kronecker construction.
pub fn subject_matnorm_params(subject: &SubjectData, params: &LmmParams) -> Result<MatNormParams> {
    let row = &subject.w * params.g.as_matrix() * subject.w.transpose()
        + DMatrix::identity(subject.n_rows(), subject.n_rows()) * params.sigma2;
    MatNormParams::new(
        &subject.x * &params.b,
        SpdMatrix::new((&row + row.transpose()) * 0.5)?,
        params.omega.clone(),
    )
}
