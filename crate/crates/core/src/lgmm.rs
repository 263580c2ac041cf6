//! Random-intercept logistic regression.
//!
//! `logit p_ij = x_ijᵀβ + μ_i`, `μ_i ~ N(0, σ²)`, fitted by maximum marginal
//! likelihood. The random intercept is written `μ = σu` with `u ~ N(0, 1)`
//! so that `σ = 0` collapses to ordinary logistic regression without a
//! special case in the integrand. Each subject's integral over `u` uses
//! adaptive Gauss–Hermite quadrature centred at the mode of the integrand
//! (one node is the Laplace approximation).
//!
//! The optimizer is a damped Newton (Levenberg–Marquardt) iteration on
//! `(β, log σ)`; the Hessian comes from the Louis identity under the
//! quadrature posterior, which also gives the observed information used for
//! Wald inference.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{log_sigmoid, logistic, normal_two_sided_p};
use crate::table::{NumericTable, RowKey};

#[derive(Debug, Error)]
pub enum LgmmError {
    #[error("quadrature needs at least one node")]
    InvalidQuadPoints,
    #[error("linear predictor is not finite")]
    NonFinite,
    #[error("need at least {need} subjects, found {found}")]
    TooFewSubjects { need: usize, found: usize },
    #[error("outcome is constant")]
    ConstantOutcome,
    #[error("{what}: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("unknown feature {0}")]
    UnknownFeature(String),
    #[error("design has missing cells")]
    MissingValues,
    #[error("no rows for visit {0}")]
    EmptyVisit(u32),
}

pub type Result<T, E = LgmmError> = std::result::Result<T, E>;

/// Gauss–Hermite rule for `∫ e^{−z²} f(z) dz` (Golub–Welsch), nodes ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64 / 2.0).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|k| (eig.eigenvalues[k], PI.sqrt() * eig.eigenvectors[(0, k)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize to remove eigen-solver noise
    for k in 0..n / 2 {
        let (a, b) = (pairs[k], pairs[n - 1 - k]);
        let z = 0.5 * (b.0 - a.0);
        let w = 0.5 * (a.1 + b.1);
        pairs[k] = (-z, w);
        pairs[n - 1 - k] = (z, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// Observations grouped by subject, with covariates excluding the intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct LgmmDesign {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<bool>,
    pub keys: Vec<RowKey>,
    subjects: Vec<String>,
    groups: Vec<Vec<usize>>,
}

impl LgmmDesign {
    pub fn new(names: Vec<String>, x: DMatrix<f64>, y: Vec<bool>, keys: Vec<RowKey>) -> Result<Self> {
        if x.ncols() != names.len() {
            return Err(LgmmError::Dimension { what: "covariate names", expected: x.ncols(), found: names.len() });
        }
        for (what, len) in [("outcomes", y.len()), ("row keys", keys.len())] {
            if len != x.nrows() {
                return Err(LgmmError::Dimension { what, expected: x.nrows(), found: len });
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LgmmError::MissingValues);
        }
        let mut index: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, k) in keys.iter().enumerate() {
            index.entry(k.subject_id.as_str()).or_default().push(i);
        }
        let subjects = index.keys().map(|s| s.to_string()).collect();
        let groups = index.into_values().collect();
        Ok(LgmmDesign { names, x, y, keys, subjects, groups })
    }

    /// Builds a design from the named columns of a complete table. With
    /// `visit_covariate` the visit number is appended as a numeric column.
    pub fn from_table(table: &NumericTable, features: &[String], visit_covariate: bool) -> Result<Self> {
        let cols = features
            .iter()
            .map(|f| table.column_index(f).ok_or_else(|| LgmmError::UnknownFeature(f.clone())))
            .collect::<Result<Vec<_>>>()?;
        if cols.iter().any(|&c| table.missing.column(c).iter().any(|&m| m)) {
            return Err(LgmmError::MissingValues);
        }
        let mut x = table.data.select_columns(&cols);
        let mut names = features.to_vec();
        if visit_covariate {
            let p = x.ncols();
            x = x.insert_column(p, 0.0);
            for (i, k) in table.keys.iter().enumerate() {
                x[(i, p)] = k.visit as f64;
            }
            names.push("visit".into());
        }
        Self::new(names, x, table.outcome.clone(), table.keys.clone())
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    /// Row subset, regrouped.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.names.clone(),
            self.x.select_rows(rows),
            rows.iter().map(|&r| self.y[r]).collect(),
            rows.iter().map(|&r| self.keys[r].clone()).collect(),
        )
    }
}

/// Log-likelihood with gradient and Hessian over `(β, σ)` on the design's
/// own covariate scale.
#[derive(Clone, Debug)]
pub struct LoglikEval {
    pub loglik: f64,
    pub grad_beta: DVector<f64>,
    pub grad_sigma: f64,
    /// Order `(β₀, …, β_p, σ)`; present when requested.
    pub hessian: Option<DMatrix<f64>>,
}

struct Quadrature {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl Quadrature {
    fn new(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(LgmmError::InvalidQuadPoints);
        }
        let (nodes, weights) = gauss_hermite(q);
        let log_weights = nodes.iter().zip(&weights).map(|(z, w)| w.ln() + z * z).collect();
        Ok(Quadrature { nodes, log_weights })
    }
}

/// Per-subject contribution: value, score and Hessian in `(β, s)` where the
/// last coordinate is either `σ` or `log σ` depending on `log_sigma`.
struct SubjectTerm {
    loglik: f64,
    mode: f64,
    score: DVector<f64>,
    hessian: Option<DMatrix<f64>>,
}

fn log_lik_row(y: bool, eta: f64) -> f64 {
    log_sigmoid(if y { eta } else { -eta })
}

fn subject_mode(eta: &[f64], y: &[bool], sigma: f64) -> (f64, f64) {
    let g = |u: f64| eta.iter().zip(y).map(|(&e, &yy)| log_lik_row(yy, e + sigma * u)).sum::<f64>() - 0.5 * u * u;
    let mut u = 0.0;
    let mut gu = g(u);
    for _ in 0..100 {
        let (mut d1, mut w) = (0.0, 0.0);
        for (&e, &yy) in eta.iter().zip(y) {
            let p = logistic(e + sigma * u);
            d1 += (yy as u8 as f64) - p;
            w += p * (1.0 - p);
        }
        let grad = sigma * d1 - u;
        let mut step = grad / (sigma * sigma * w + 1.0);
        if step.abs() < 1e-12 {
            break;
        }
        // g is strictly concave, so halving always finds an ascent step
        let mut accepted = false;
        for _ in 0..60 {
            let cand = g(u + step);
            if cand >= gu {
                u += step;
                gu = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let w: f64 = eta.iter().map(|&e| {
        let p = logistic(e + sigma * u);
        p * (1.0 - p)
    }).sum();
    (u, sigma * sigma * w + 1.0)
}

fn subject_term(
    x: &DMatrix<f64>,
    rows: &[usize],
    y: &[bool],
    beta: &DVector<f64>,
    sigma: f64,
    log_sigma: bool,
    quad: &Quadrature,
    want_hessian: bool,
) -> Result<SubjectTerm> {
    let p1 = beta.len();
    let dim = p1 + 1;
    let row = |r: usize| -> DVector<f64> {
        let mut v = DVector::zeros(p1);
        v[0] = 1.0;
        for j in 1..p1 {
            v[j] = x[(r, j - 1)];
        }
        v
    };
    let xs: Vec<DVector<f64>> = rows.iter().map(|&r| row(r)).collect();
    let eta: Vec<f64> = xs.iter().map(|v| v.dot(beta)).collect();
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(LgmmError::NonFinite);
    }
    let ys: Vec<bool> = rows.iter().map(|&r| y[r]).collect();

    let (mode, curvature) = subject_mode(&eta, &ys, sigma);
    let tau = curvature.sqrt().recip();
    let q = quad.nodes.len();
    let us: Vec<f64> = quad.nodes.iter().map(|z| mode + SQRT_2 * tau * z).collect();
    let log_terms: Vec<f64> = us
        .iter()
        .zip(&quad.log_weights)
        .map(|(&u, lw)| lw + eta.iter().zip(&ys).map(|(&e, &yy)| log_lik_row(yy, e + sigma * u)).sum::<f64>() - 0.5 * u * u)
        .collect();
    let lse = crate::stats::logsumexp(&log_terms);
    let loglik = (SQRT_2 * tau).ln() - 0.5 * (2.0 * PI).ln() + lse;
    if !loglik.is_finite() {
        return Err(LgmmError::NonFinite);
    }
    let post: Vec<f64> = log_terms.iter().map(|t| (t - lse).exp()).collect();

    // derivative of the random-effect term σu with respect to the last coordinate
    let dsig = |u: f64| if log_sigma { sigma * u } else { u };
    let mut score = DVector::zeros(dim);
    let mut outer = DMatrix::zeros(dim, dim);
    let mut hess = DMatrix::zeros(dim, dim);
    for k in 0..q {
        let u = us[k];
        let mut s_k = DVector::zeros(dim);
        let mut sum_r = 0.0;
        let mut sum_w = 0.0;
        for (j, xv) in xs.iter().enumerate() {
            let pr = logistic(eta[j] + sigma * u);
            let r = (ys[j] as u8 as f64) - pr;
            let w = pr * (1.0 - pr);
            s_k.rows_mut(0, p1).axpy(r, xv, 1.0);
            sum_r += r;
            sum_w += w;
            if want_hessian {
                let c = post[k] * w;
                hess.view_mut((0, 0), (p1, p1)).ger(-c, xv, xv, 1.0);
                let cross = -c * dsig(u);
                for a in 0..p1 {
                    hess[(a, p1)] += cross * xv[a];
                    hess[(p1, a)] += cross * xv[a];
                }
            }
        }
        let ds = dsig(u);
        s_k[p1] = ds * sum_r;
        if want_hessian {
            let second = if log_sigma { sigma * u * sum_r } else { 0.0 };
            hess[(p1, p1)] += post[k] * (second - ds * ds * sum_w);
            outer.ger(post[k], &s_k, &s_k, 1.0);
        }
        score.axpy(post[k], &s_k, 1.0);
    }
    let hessian = want_hessian.then(|| {
        hess += outer;
        hess.ger(-1.0, &score, &score, 1.0);
        hess
    });
    Ok(SubjectTerm { loglik, mode, score, hessian })
}

struct Objective<'a> {
    design: &'a LgmmDesign,
    x: &'a DMatrix<f64>,
    quad: Quadrature,
}

struct Evaluation {
    loglik: f64,
    grad: DVector<f64>,
    hessian: Option<DMatrix<f64>>,
    modes: Vec<f64>,
}

impl Objective<'_> {
    fn evaluate(&self, beta: &DVector<f64>, sigma: f64, log_sigma: bool, want_hessian: bool) -> Result<Evaluation> {
        let d = self.design;
        let terms: Vec<SubjectTerm> = d
            .groups
            .par_iter()
            .map(|rows| subject_term(self.x, rows, &d.y, beta, sigma, log_sigma, &self.quad, want_hessian))
            .collect::<Result<_>>()?;
        let dim = beta.len() + 1;
        let mut loglik = 0.0;
        let mut grad = DVector::zeros(dim);
        let mut hessian = want_hessian.then(|| DMatrix::zeros(dim, dim));
        for t in &terms {
            loglik += t.loglik;
            grad += &t.score;
            if let (Some(h), Some(th)) = (hessian.as_mut(), t.hessian.as_ref()) {
                *h += th;
            }
        }
        Ok(Evaluation { loglik, grad, hessian, modes: terms.iter().map(|t| t.mode).collect() })
    }
}

fn check_beta(design: &LgmmDesign, beta: &[f64]) -> Result<()> {
    if beta.len() != design.x.ncols() + 1 {
        return Err(LgmmError::Dimension { what: "coefficients", expected: design.x.ncols() + 1, found: beta.len() });
    }
    Ok(())
}

/// Marginal log-likelihood. `beta[0]` is the intercept.
pub fn lgmm_loglik(design: &LgmmDesign, beta: &[f64], sigma_mu: f64, quad_points: usize) -> Result<f64> {
    Ok(lgmm_loglik_grad(design, beta, sigma_mu, quad_points, false)?.loglik)
}

/// Marginal log-likelihood with its gradient (and optionally Hessian) in
/// `(β, σ)`. At `σ = 0` the value is the plain logistic log-likelihood.
pub fn lgmm_loglik_grad(design: &LgmmDesign, beta: &[f64], sigma_mu: f64, quad_points: usize, hessian: bool) -> Result<LoglikEval> {
    check_beta(design, beta)?;
    let obj = Objective { design, x: &design.x, quad: Quadrature::new(quad_points)? };
    let b = DVector::from_column_slice(beta);
    let e = obj.evaluate(&b, sigma_mu, false, hessian)?;
    let p1 = beta.len();
    Ok(LoglikEval { loglik: e.loglik, grad_beta: e.grad.rows(0, p1).into_owned(), grad_sigma: e.grad[p1], hessian: e.hessian })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgmmConfig {
    #[serde(default = "default_quad")]
    pub quad_points: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Holds `σ = 0`, giving ordinary logistic regression.
    #[serde(default)]
    pub fix_sigma_zero: bool,
    /// Starting value for σ.
    #[serde(default = "default_sigma0")]
    pub sigma_start: f64,
}

fn default_quad() -> usize {
    15
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    200
}
fn default_true() -> bool {
    true
}
fn default_sigma0() -> f64 {
    0.5
}

impl Default for LgmmConfig {
    fn default() -> Self {
        LgmmConfig { quad_points: 15, tol: 1e-8, max_iter: 200, standardize: true, fix_sigma_zero: false, sigma_start: 0.5 }
    }
}

impl LgmmConfig {
    pub fn logistic() -> Self {
        LgmmConfig { fix_sigma_zero: true, ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitWarning {
    NotConverged,
    SeparationDetected,
    /// Some coefficients are not identified; their variances are NaN.
    SingularInformation,
    /// σ shrank to the boundary; β variances are conditional on σ.
    SigmaAtBoundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgmmFit {
    /// Covariate names, without the intercept.
    pub names: Vec<String>,
    /// `β₀, β₁, …` on the original covariate scale.
    pub beta: Vec<f64>,
    pub sigma_mu: f64,
    /// Posterior mode of each subject's intercept shift μ_i.
    pub mu_modes: BTreeMap<String, f64>,
    pub cov_beta: Vec<Vec<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub quad_points: usize,
    pub standardized: bool,
    /// Log-likelihood after every accepted step.
    pub trace: Vec<f64>,
    pub warnings: Vec<FitWarning>,
}

const SEPARATION_LIMIT: f64 = 20.0;
const GRAD_TOL: f64 = 1e-6;
const LOG_SIGMA_FLOOR: f64 = -25.0;

/// Column centring and scaling; constant columns are left unscaled.
struct Scaling {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Scaling {
    fn fit(x: &DMatrix<f64>, active: bool) -> Self {
        let p = x.ncols();
        if !active {
            return Scaling { mean: vec![0.0; p], scale: vec![1.0; p] };
        }
        let (mut mean, mut scale) = (vec![0.0; p], vec![1.0; p]);
        for j in 0..p {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let sd = crate::stats::sample_variance(&col).sqrt();
            if sd > 0.0 {
                mean[j] = crate::stats::mean(&col);
                scale[j] = sd;
            }
        }
        Scaling { mean, scale }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }

    /// Maps standardized coefficients to the original scale: `β = A β'`.
    fn jacobian(&self) -> DMatrix<f64> {
        let p = self.mean.len();
        let mut a = DMatrix::identity(p + 1, p + 1);
        for j in 0..p {
            a[(0, j + 1)] = -self.mean[j] / self.scale[j];
            a[(j + 1, j + 1)] = 1.0 / self.scale[j];
        }
        a
    }
}

/// Inverse of a symmetric positive definite block, restricted to the
/// coordinates with non-zero diagonal; others get NaN.
fn masked_inverse(info: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = info.nrows();
    let keep: Vec<usize> = (0..n).filter(|&i| info[(i, i)].abs() > 1e-12 * info.diagonal().amax().max(1e-300)).collect();
    let mut out = DMatrix::from_element(n, n, f64::NAN);
    let sub = info.select_rows(&keep).select_columns(&keep);
    let inv = sub.clone().cholesky().map(|c| c.inverse()).or_else(|| sub.try_inverse());
    match inv {
        Some(inv) => {
            for (a, &i) in keep.iter().enumerate() {
                for (b, &j) in keep.iter().enumerate() {
                    out[(i, j)] = inv[(a, b)];
                }
            }
            (out, keep.len() == n)
        }
        None => (out, false),
    }
}

pub fn lgmm_fit(design: &LgmmDesign, config: &LgmmConfig) -> Result<LgmmFit> {
    let need = if config.fix_sigma_zero { 1 } else { 2 };
    if design.n_subjects() < need {
        return Err(LgmmError::TooFewSubjects { need, found: design.n_subjects() });
    }
    if design.y.iter().all(|&v| v) || design.y.iter().all(|&v| !v) {
        return Err(LgmmError::ConstantOutcome);
    }
    let scaling = Scaling::fit(&design.x, config.standardize);
    let xs = scaling.apply(&design.x);
    let obj = Objective { design, x: &xs, quad: Quadrature::new(config.quad_points)? };
    let p1 = design.x.ncols() + 1;
    let rate = design.y.iter().filter(|&&v| v).count() as f64 / design.y.len() as f64;
    let mut beta = DVector::zeros(p1);
    beta[0] = (rate / (1.0 - rate)).ln();

    let mut warnings = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;

    let (converged, separated) = optimize(&obj, &mut beta, None, config, &mut trace, &mut iterations)?;
    let mut converged = converged;
    let mut separated = separated;
    let mut log_sigma = None;
    if !config.fix_sigma_zero && !separated {
        // the trace covers the final phase only, so it is monotone
        trace.clear();
        let mut s = config.sigma_start.max(1e-3).ln();
        let (c, sep) = optimize(&obj, &mut beta, Some(&mut s), config, &mut trace, &mut iterations)?;
        converged = c;
        separated = sep;
        log_sigma = Some(s);
    }
    let sigma = log_sigma.map_or(0.0, f64::exp);
    if separated {
        warnings.push(FitWarning::SeparationDetected);
    }
    if !converged {
        warnings.push(FitWarning::NotConverged);
    }

    let final_eval = obj.evaluate(&beta, sigma, true, true)?;
    let info = -final_eval.hessian.clone().expect("hessian requested");
    let at_boundary = log_sigma.is_some_and(|s| s < -6.0);
    if at_boundary {
        warnings.push(FitWarning::SigmaAtBoundary);
    }
    let cov_std = if log_sigma.is_some() && !at_boundary {
        let (full, ok) = masked_inverse(&info);
        if ok {
            full.view((0, 0), (p1, p1)).into_owned()
        } else {
            let (b, ok) = masked_inverse(&info.view((0, 0), (p1, p1)).into_owned());
            if !ok {
                warnings.push(FitWarning::SingularInformation);
            }
            b
        }
    } else {
        let (b, ok) = masked_inverse(&info.view((0, 0), (p1, p1)).into_owned());
        if !ok {
            warnings.push(FitWarning::SingularInformation);
        }
        b
    };
    let a = scaling.jacobian();
    let beta_orig = &a * &beta;
    // explicit sums so unidentified (NaN) coordinates do not leak through zero weights
    let mut cov = DMatrix::zeros(p1, p1);
    for i in 0..p1 {
        for j in 0..p1 {
            let mut acc = 0.0;
            for k in (0..p1).filter(|&k| a[(i, k)] != 0.0) {
                for l in (0..p1).filter(|&l| a[(j, l)] != 0.0) {
                    acc += a[(i, k)] * cov_std[(k, l)] * a[(j, l)];
                }
            }
            cov[(i, j)] = acc;
        }
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    let mu_modes = design.subjects.iter().cloned().zip(final_eval.modes.iter().map(|u| sigma * u)).collect();
    Ok(LgmmFit {
        names: design.names.clone(),
        beta: beta_orig.iter().copied().collect(),
        sigma_mu: sigma,
        mu_modes,
        cov_beta: (0..p1).map(|i| cov.row(i).iter().copied().collect()).collect(),
        loglik: final_eval.loglik,
        converged,
        iterations,
        quad_points: config.quad_points,
        standardized: config.standardize,
        trace,
        warnings,
    })
}

/// Levenberg–Marquardt ascent. Returns `(converged, separated)`.
fn optimize(
    obj: &Objective,
    beta: &mut DVector<f64>,
    mut log_sigma: Option<&mut f64>,
    config: &LgmmConfig,
    trace: &mut Vec<f64>,
    iterations: &mut usize,
) -> Result<(bool, bool)> {
    let p1 = beta.len();
    let free_sigma = log_sigma.is_some();
    let dim = if free_sigma { p1 + 1 } else { p1 };
    let sigma_of = |s: Option<f64>| s.map_or(0.0, f64::exp);
    let mut s = log_sigma.as_deref().copied();
    let mut current = obj.evaluate(beta, sigma_of(s), true, true)?;
    trace.push(current.loglik);
    let mut lambda = 1e-3;
    let mut budget = config.max_iter.saturating_sub(*iterations);
    let mut converged = false;
    let mut separated = false;
    while budget > 0 {
        let grad = current.grad.rows(0, dim).into_owned();
        let hess = current.hessian.as_ref().expect("hessian requested").view((0, 0), (dim, dim)).into_owned();
        if grad.amax() < GRAD_TOL && trace.len() > 1 {
            let prev = trace[trace.len() - 2];
            if (current.loglik - prev).abs() <= config.tol * (prev.abs() + config.tol) {
                converged = true;
                break;
            }
        }
        budget -= 1;
        *iterations += 1;
        let mut accepted = false;
        while lambda < 1e16 {
            let scale = (-hess.diagonal()).map(|d| d.abs().max(1e-8));
            let mut system = -&hess;
            for i in 0..dim {
                system[(i, i)] += lambda * scale[i];
            }
            let Some(chol) = system.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&grad);
            let mut cand_beta = beta.clone();
            cand_beta += step.rows(0, p1);
            let cand_s = s.map(|v| (v + step[p1]).max(LOG_SIGMA_FLOOR));
            let cand = match obj.evaluate(&cand_beta, sigma_of(cand_s), true, true) {
                Ok(e) if e.loglik.is_finite() => e,
                _ => {
                    lambda *= 10.0;
                    continue;
                }
            };
            if cand.loglik >= current.loglik {
                *beta = cand_beta;
                s = cand_s;
                current = cand;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no ascent direction left at machine precision
            converged = current.grad.rows(0, dim).amax() < GRAD_TOL.sqrt();
            break;
        }
        trace.push(current.loglik);
        if beta.iter().any(|b| b.abs() > SEPARATION_LIMIT) {
            separated = true;
            break;
        }
    }
    if let (Some(out), Some(v)) = (log_sigma.as_deref_mut(), s) {
        *out = v;
    }
    Ok((converged, separated))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    Population,
    Subject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    /// Subjects without a fitted mode, predicted at the population level.
    pub unknown_subjects: Vec<String>,
}

/// Probabilities for new rows; `x` has the fit's covariate columns.
pub fn lgmm_predict(fit: &LgmmFit, x: &DMatrix<f64>, keys: &[RowKey], mode: PredictMode) -> Result<Prediction> {
    if x.ncols() + 1 != fit.beta.len() {
        return Err(LgmmError::Dimension { what: "covariates", expected: fit.beta.len() - 1, found: x.ncols() });
    }
    if keys.len() != x.nrows() {
        return Err(LgmmError::Dimension { what: "row keys", expected: x.nrows(), found: keys.len() });
    }
    let mut unknown = std::collections::BTreeSet::new();
    let probabilities = (0..x.nrows())
        .map(|i| {
            let mut eta = fit.beta[0] + (0..x.ncols()).map(|j| fit.beta[j + 1] * x[(i, j)]).sum::<f64>();
            if mode == PredictMode::Subject {
                match fit.mu_modes.get(&keys[i].subject_id) {
                    Some(mu) => eta += mu,
                    None => {
                        unknown.insert(keys[i].subject_id.clone());
                    }
                }
            }
            logistic(eta)
        })
        .collect();
    Ok(Prediction { probabilities, unknown_subjects: unknown.into_iter().collect() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub variable: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_upper: f64,
    pub ci_lower: f64,
    pub p_value: f64,
    pub sig: String,
}

pub const WALD_CRITICAL: f64 = 1.96;

pub fn wald_row(variable: &str, estimate: f64, se: f64) -> WaldRow {
    let p_value = if estimate == 0.0 { 1.0 } else { normal_two_sided_p(estimate / se) };
    WaldRow {
        variable: variable.to_string(),
        estimate,
        se,
        ci_upper: estimate + WALD_CRITICAL * se,
        ci_lower: estimate - WALD_CRITICAL * se,
        p_value,
        sig: sig_code(p_value).to_string(),
    }
}

pub fn wald_table(fit: &LgmmFit) -> Vec<WaldRow> {
    std::iter::once("(Intercept)")
        .chain(fit.names.iter().map(String::as_str))
        .enumerate()
        .map(|(i, name)| wald_row(name, fit.beta[i], fit.cov_beta[i][i].sqrt()))
        .collect()
}

pub fn wald_csv(rows: &[WaldRow]) -> String {
    let mut out = String::from("variable,estimate,se,ci_upper,ci_lower,p_value,sig\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{},{}\n", r.variable, r.estimate, r.se, r.ci_upper, r.ci_lower, r.p_value, r.sig));
    }
    out
}

pub fn sig_code(p: f64) -> &'static str {
    match p {
        p if p < 0.001 => "***",
        p if p < 0.01 => "**",
        p if p < 0.05 => "*",
        p if p < 0.1 => "+",
        _ => "",
    }
}

/// Ordinary logistic regression on one visit's rows.
pub fn lr_fit_per_visit(table: &NumericTable, features: &[String], visit: u32, config: &LgmmConfig) -> Result<LgmmFit> {
    let rows: Vec<usize> = (0..table.nrows()).filter(|&i| table.keys[i].visit == visit).collect();
    if rows.is_empty() {
        return Err(LgmmError::EmptyVisit(visit));
    }
    let design = LgmmDesign::from_table(&table.select_rows(&rows), features, false)?;
    lgmm_fit(&design, &LgmmConfig { fix_sigma_zero: true, ..config.clone() })
}
