//! Bounded maximum likelihood, standard errors and AIC model comparison.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as Gaussian};
use thiserror::Error;

use crate::epimodel::{Baseline, Cohort, EpidemicParams, Likelihood, ModelError, Standardizer, TauR};
use crate::geonet::{Metric, PeerNetwork};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("likelihood is not finite at the initial point: {0}")]
    NonFiniteStart(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid fit configuration: {0}")]
    BadConfig(String),
    #[error("non-finite evaluation near parameter {index}")]
    NonFiniteDerivative { index: usize },
    #[error("fits describe different data sets ({0} vs {1})")]
    MixedData(String, String),
    #[error("no endemic-only fit to compare against")]
    NoEndemicFit,
    #[error("no fits to compare")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Peer effect `α` estimated.
    Epidemic,
    /// `α` fixed at zero and removed from the parameter vector.
    EndemicOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    CentralDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialValues {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub lambda0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub model: ModelKind,
    pub tau_r: TauR,
    /// First month of each baseline segment after the first.
    pub breakpoints: Vec<i32>,
    pub alpha_bounds: (f64, f64),
    /// Smallest baseline level; `λ_0` is optimized as `log λ_0` above it.
    pub lambda_floor: f64,
    pub initial: Option<InitialValues>,
    /// Projected-gradient tolerance, relative to `max(1, |loglik|)`.
    pub gradient_tol: f64,
    /// Smallest accepted step (max-norm, internal coordinates).
    pub step_tol: f64,
    pub max_iter: usize,
    /// Relative finite-difference step for gradients and Hessians.
    pub fd_step: f64,
    /// Jittered restarts in addition to the base start.
    pub restarts: usize,
    pub seed: u64,
    pub gradient: GradientMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Epidemic,
            tau_r: TauR::Infinite,
            breakpoints: Vec::new(),
            alpha_bounds: (0.0, 1.0),
            lambda_floor: 1e-12,
            initial: None,
            gradient_tol: 1e-6,
            step_tol: 1e-14,
            max_iter: 500,
            fd_step: 1e-5,
            restarts: 3,
            seed: 0,
            gradient: GradientMode::Analytic,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let (lo, hi) = self.alpha_bounds;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(FitError::BadConfig(format!("alpha bounds ({lo}, {hi}) not within 0 <= lo <= hi <= 1")));
        }
        if !(self.lambda_floor > 0.0 && self.lambda_floor < 1.0) {
            return Err(FitError::BadConfig("lambda floor must lie in (0, 1)".into()));
        }
        for (name, v) in [("gradient_tol", self.gradient_tol), ("step_tol", self.step_tol), ("fd_step", self.fd_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FitError::BadConfig(format!("{name} must be > 0")));
            }
        }
        if self.max_iter == 0 {
            return Err(FitError::BadConfig("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything that identifies which model a fit belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFingerprint {
    pub model: ModelKind,
    pub metric: Option<Metric>,
    pub tau_d_km: Option<f64>,
    pub tau_r: Option<TauR>,
    pub covariates: Vec<String>,
    pub breakpoints: Vec<i32>,
    pub standardizer: Option<Standardizer>,
    /// Content hash of the cohort the model was fitted on.
    pub data: String,
}

impl ModelFingerprint {
    /// Stable text key used for tie-breaking and labels.
    pub fn key(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        format!(
            "{}|{}|{}|{}|{}|{}",
            match self.model {
                ModelKind::Epidemic => "epidemic",
                ModelKind::EndemicOnly => "endemic",
            },
            opt(self.metric.map(|m| m.to_string())),
            opt(self.tau_d_km.map(|t| t.to_string())),
            opt(self.tau_r.map(|t| t.to_string())),
            self.covariates.join(","),
            self.breakpoints.iter().map(i32::to_string).collect::<Vec<_>>().join(","),
        )
    }
}

impl fmt::Display for ModelFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerTrace {
    pub starts: usize,
    pub best_start: usize,
    pub iterations: usize,
    pub evaluations: usize,
    pub projected_gradient: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub fingerprint: ModelFingerprint,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub se_alpha: Option<f64>,
    pub se_beta: Vec<Option<f64>>,
    pub se_lambda0: Vec<Option<f64>>,
    pub alpha_at_boundary: bool,
    pub lambda_at_boundary: Vec<bool>,
    pub loglik: f64,
    pub k: usize,
    pub aic: f64,
    pub converged: bool,
    pub trace: OptimizerTrace,
}

impl FitResult {
    pub fn model(&self) -> ModelKind {
        self.fingerprint.model
    }

    pub fn params(&self) -> EpidemicParams {
        EpidemicParams {
            alpha: self.alpha,
            beta: self.beta.clone(),
            baseline: Baseline {
                breakpoints: self.fingerprint.breakpoints.clone(),
                levels: self.lambda0.clone(),
            },
            tau_r: self.fingerprint.tau_r.unwrap_or(TauR::Infinite),
        }
    }

    /// Wald p-value of `α̂`.
    pub fn alpha_p_value(&self) -> Option<f64> {
        match self.model() {
            ModelKind::Epidemic => wald_p_value(self.alpha, self.se_alpha?),
            ModelKind::EndemicOnly => None,
        }
    }
}

pub fn aic(loglik: f64, k: usize) -> f64 {
    2.0 * k as f64 - 2.0 * loglik
}

/// Two-sided Wald p-value `2(1 - Φ(|θ/se|))`.
pub fn wald_p_value(estimate: f64, se: f64) -> Option<f64> {
    if !(se > 0.0 && se.is_finite() && estimate.is_finite()) {
        return None;
    }
    let z = (estimate / se).abs();
    let normal = Gaussian::standard();
    Some(2.0 * normal.sf(z))
}

/// Significance marks of a coefficient table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StarScale {
    /// `+` below 0.1, then `*`, `**`, `***` below 0.05, 0.01, 0.001.
    WithTenPercent,
    /// `*`, `**`, `***` below 0.05, 0.01, 0.001.
    Conventional,
}

pub fn stars(p: Option<f64>, scale: StarScale) -> &'static str {
    let Some(p) = p else { return "" };
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.1 && scale == StarScale::WithTenPercent {
        "+"
    } else {
        ""
    }
}

fn step_for(theta: f64, step: f64) -> f64 {
    step * theta.abs().max(1e-3)
}

/// Which stencil to use in coordinate `j` given optional box bounds.
fn stencil(theta: &[f64], j: usize, h: f64, bounds: Option<(&[f64], &[f64])>) -> (f64, f64) {
    let (lo, hi) = match bounds {
        Some((lo, hi)) => (lo[j], hi[j]),
        None => (f64::NEG_INFINITY, f64::INFINITY),
    };
    match (theta[j] - h >= lo, theta[j] + h <= hi) {
        (true, true) => (-h, h),
        (false, true) => (0.0, h),
        (true, false) => (-h, 0.0),
        (false, false) => (0.0, 0.0),
    }
}

fn shifted(theta: &[f64], j: usize, delta: f64) -> Vec<f64> {
    let mut v = theta.to_vec();
    v[j] += delta;
    v
}

/// Finite-difference gradient with per-coordinate step `step·max(|θ_j|, 1e-3)`;
/// one-sided where a central step would leave the box.
pub fn numerical_gradient<F>(f: F, theta: &[f64], step: f64, bounds: Option<(&[f64], &[f64])>) -> Result<Vec<f64>, FitError>
where
    F: Fn(&[f64]) -> f64,
{
    let f0 = f(theta);
    (0..theta.len())
        .map(|j| {
            let h = step_for(theta[j], step);
            let (a, b) = stencil(theta, j, h, bounds);
            if a == b {
                return Err(FitError::NonFiniteDerivative { index: j });
            }
            let fa = if a == 0.0 { f0 } else { f(&shifted(theta, j, a)) };
            let fb = if b == 0.0 { f0 } else { f(&shifted(theta, j, b)) };
            let d = (fb - fa) / (b - a);
            if d.is_finite() {
                Ok(d)
            } else {
                Err(FitError::NonFiniteDerivative { index: j })
            }
        })
        .collect()
}

/// Jacobian of a gradient map by finite differences, symmetrized.
pub fn hessian_from_gradient<G>(grad: G, theta: &[f64], step: f64, bounds: Option<(&[f64], &[f64])>) -> Result<DMatrix<f64>, FitError>
where
    G: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let n = theta.len();
    let g0 = grad(theta);
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let hj = step_for(theta[j], step);
        let (a, b) = stencil(theta, j, hj, bounds);
        if a == b {
            return Err(FitError::NonFiniteDerivative { index: j });
        }
        let eval = |d: f64| if d == 0.0 { g0.clone() } else { grad(&shifted(theta, j, d)) };
        let (Some(ga), Some(gb)) = (eval(a), eval(b)) else {
            return Err(FitError::NonFiniteDerivative { index: j });
        };
        for i in 0..n {
            h[(i, j)] = (gb[i] - ga[i]) / (b - a);
        }
    }
    let sym = (&h + h.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFiniteDerivative { index: 0 });
    }
    Ok(sym)
}

/// Hessian of `f` as the finite-difference Jacobian of its finite-difference
/// gradient, symmetrized.
pub fn numerical_hessian<F>(f: F, theta: &[f64], step: f64, bounds: Option<(&[f64], &[f64])>) -> Result<DMatrix<f64>, FitError>
where
    F: Fn(&[f64]) -> f64,
{
    hessian_from_gradient(|t| numerical_gradient(&f, t, step, bounds).ok(), theta, step, bounds)
}

/// `sqrt(diag((-H)^-1))`, or `None` when `-H` is not positive definite.
pub fn standard_errors(hessian: &DMatrix<f64>) -> Option<Vec<f64>> {
    if hessian.nrows() == 0 {
        return Some(Vec::new());
    }
    let chol = (-hessian).cholesky()?;
    let inv = chol.inverse();
    let se: Vec<f64> = inv.diagonal().iter().map(|v| v.sqrt()).collect();
    se.iter().all(|v| v.is_finite()).then_some(se)
}

/// Internal parameter layout: `[α]? β.. log λ..`.
struct Layout {
    has_alpha: bool,
    p: usize,
    m: usize,
}

impl Layout {
    fn len(&self) -> usize {
        usize::from(self.has_alpha) + self.p + self.m
    }

    fn beta_offset(&self) -> usize {
        usize::from(self.has_alpha)
    }

    fn lambda_offset(&self) -> usize {
        self.beta_offset() + self.p
    }

    fn split<'a>(&self, x: &'a [f64]) -> (f64, &'a [f64], &'a [f64]) {
        let alpha = if self.has_alpha { x[0] } else { 0.0 };
        (alpha, &x[self.beta_offset()..self.lambda_offset()], &x[self.lambda_offset()..])
    }
}

struct Objective<'a> {
    lik: &'a Likelihood,
    layout: Layout,
    config: &'a FitConfig,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Objective<'_> {
    /// `-loglik` at internal coordinates.
    fn value(&self, x: &[f64]) -> f64 {
        let (alpha, beta, loglam) = self.layout.split(x);
        let lambda: Vec<f64> = loglam.iter().map(|v| v.exp()).collect();
        match self.lik.log_likelihood(alpha, beta, &lambda) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    }

    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        match self.config.gradient {
            GradientMode::Analytic => {
                let (alpha, beta, loglam) = self.layout.split(x);
                let lambda: Vec<f64> = loglam.iter().map(|v| v.exp()).collect();
                let (ll, g) = self.lik.log_likelihood_with_gradient(alpha, beta, &lambda).ok()?;
                if !ll.is_finite() {
                    return None;
                }
                let mut out = Vec::with_capacity(self.layout.len());
                if self.layout.has_alpha {
                    out.push(-g.alpha);
                }
                out.extend(g.beta.iter().map(|v| -v));
                out.extend(g.lambda0.iter().zip(&lambda).map(|(d, l)| -d * l));
                out.iter().all(|v| v.is_finite()).then_some((-ll, out))
            }
            GradientMode::CentralDifference => {
                let f = self.value(x);
                if !f.is_finite() {
                    return None;
                }
                let g = numerical_gradient(|t| self.value(t), x, self.config.fd_step, Some((&self.lower, &self.upper))).ok()?;
                Some((f, g))
            }
        }
    }
}

mod optimizer {
    use super::*;

    pub(super) struct Outcome {
        pub x: Vec<f64>,
        pub f: f64,
        pub iterations: usize,
        pub evaluations: usize,
        pub projected_gradient: f64,
        pub converged: bool,
        pub status: &'static str,
    }

    fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
        x.iter()
            .zip(g)
            .zip(lower.iter().zip(upper))
            .map(|((&xi, &gi), (&lo, &hi))| ((xi - gi).clamp(lo, hi) - xi).abs())
            .fold(0.0, f64::max)
    }

    /// Coordinates held at a bound because the descent direction points outward.
    fn active(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<bool> {
        x.iter()
            .zip(g)
            .zip(lower.iter().zip(upper))
            .map(|((&xi, &gi), (&lo, &hi))| (xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0))
            .collect()
    }

    fn direction(h: &DMatrix<f64>, g: &[f64], fixed: &[bool]) -> Vec<f64> {
        let n = g.len();
        (0..n)
            .map(|i| {
                if fixed[i] {
                    0.0
                } else {
                    -(0..n).filter(|&j| !fixed[j]).map(|j| h[(i, j)] * g[j]).sum::<f64>()
                }
            })
            .collect()
    }

    /// Projected quasi-Newton (BFGS inverse update) with an Armijo
    /// backtracking search along the projected path.
    pub(super) fn minimize(obj: &Objective, x0: Vec<f64>, h0: &DMatrix<f64>) -> Option<Outcome> {
        let (lower, upper) = (&obj.lower, &obj.upper);
        let cfg = obj.config;
        let mut x = x0;
        project(&mut x, lower, upper);
        let (mut f, mut g) = obj.value_and_gradient(&x)?;
        let mut evaluations = 1;
        let mut h = h0.clone();
        let mut status = "iteration limit";
        let mut converged = false;
        let mut iterations = 0;
        let mut just_reset = true;
        while iterations < cfg.max_iter {
            let pg = projected_gradient_norm(&x, &g, lower, upper);
            if pg <= cfg.gradient_tol * f.abs().max(1.0) {
                converged = true;
                status = "gradient tolerance";
                break;
            }
            iterations += 1;
            let fixed = active(&x, &g, lower, upper);
            let mut d = direction(&h, &g, &fixed);
            let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                h = h0.clone();
                just_reset = true;
                d = direction(&h, &g, &fixed);
                slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
                if !(slope < 0.0) {
                    d = g.iter().zip(&fixed).map(|(gi, &a)| if a { 0.0 } else { -gi }).collect();
                }
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                project(&mut xn, lower, upper);
                let decrease: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
                evaluations += 1;
                if let Some((fnew, gnew)) = obj.value_and_gradient(&xn) {
                    if fnew <= f + 1e-4 * decrease {
                        accepted = Some((xn, fnew, gnew));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((xn, fnew, gnew)) = accepted else {
                if just_reset {
                    status = "line search failed";
                    break;
                }
                h = h0.clone();
                just_reset = true;
                continue;
            };
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
            let step = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            x = xn;
            let prev = f;
            f = fnew;
            g = gnew;
            just_reset = false;
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if sy > 1e-12 * sn * yn {
                let sv = DVector::from_vec(s);
                let yv = DVector::from_vec(y);
                let rho = 1.0 / sy;
                let n = sv.len();
                let eye = DMatrix::<f64>::identity(n, n);
                let left = &eye - rho * &sv * yv.transpose();
                let right = &eye - rho * &yv * sv.transpose();
                h = &left * &h * &right + rho * &sv * sv.transpose();
            }
            if step <= cfg.step_tol && (prev - f).abs() <= f64::EPSILON * f.abs().max(1.0) {
                status = "step tolerance";
                break;
            }
        }
        let projected_gradient = projected_gradient_norm(&x, &g, lower, upper);
        if !converged && projected_gradient <= cfg.gradient_tol * f.abs().max(1.0) {
            converged = true;
        }
        Some(Outcome {
            x,
            f,
            iterations,
            evaluations,
            projected_gradient,
            converged,
            status,
        })
    }
}

/// Initial inverse Hessian: reciprocal of the numerical curvature where it is
/// positive, 1 elsewhere.
fn initial_inverse_hessian(obj: &Objective, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let grad = |t: &[f64]| obj.value_and_gradient(t).map(|(_, g)| g);
    let diag: Vec<f64> = match hessian_from_gradient(grad, x, 1e-4, Some((&obj.lower, &obj.upper))) {
        Ok(h) => (0..n).map(|i| h[(i, i)]).collect(),
        Err(_) => vec![1.0; n],
    };
    DMatrix::from_fn(n, n, |i, j| {
        if i == j && diag[i] > 1e-8 && diag[i].is_finite() {
            1.0 / diag[i]
        } else if i == j {
            1.0
        } else {
            0.0
        }
    })
}

fn starting_point(lik: &Likelihood, layout: &Layout, config: &FitConfig) -> Result<Vec<f64>, FitError> {
    let floor = config.lambda_floor;
    let (alpha, beta, lambda) = match &config.initial {
        Some(init) => {
            if init.beta.len() != layout.p || init.lambda0.len() != layout.m {
                return Err(FitError::BadConfig("initial values have the wrong dimension".into()));
            }
            (init.alpha, init.beta.clone(), init.lambda0.clone())
        }
        None => {
            let lambda = lik
                .segment_totals()
                .into_iter()
                .map(|(events, months)| if months == 0 { 1e-6 } else { (events as f64 / months as f64).max(1e-6) })
                .collect();
            (1e-4, vec![0.0; layout.p], lambda)
        }
    };
    let mut x = Vec::with_capacity(layout.len());
    if layout.has_alpha {
        x.push(alpha.clamp(config.alpha_bounds.0, config.alpha_bounds.1));
    }
    x.extend(beta);
    x.extend(lambda.iter().map(|l| l.max(floor).ln()));
    Ok(x)
}

/// Maximum likelihood fit over a prepared likelihood.
pub fn fit_prepared(lik: &Likelihood, fingerprint: ModelFingerprint, config: &FitConfig) -> Result<FitResult, FitError> {
    config.validate()?;
    let layout = Layout {
        has_alpha: config.model == ModelKind::Epidemic,
        p: lik.covariate_count(),
        m: lik.segments(),
    };
    let mut lower = Vec::with_capacity(layout.len());
    let mut upper = Vec::with_capacity(layout.len());
    if layout.has_alpha {
        lower.push(config.alpha_bounds.0);
        upper.push(config.alpha_bounds.1);
    }
    lower.extend(std::iter::repeat_n(f64::NEG_INFINITY, layout.p));
    upper.extend(std::iter::repeat_n(f64::INFINITY, layout.p));
    lower.extend(std::iter::repeat_n(config.lambda_floor.ln(), layout.m));
    upper.extend(std::iter::repeat_n(f64::INFINITY, layout.m));
    let obj = Objective {
        lik,
        layout,
        config,
        lower,
        upper,
    };

    let base = starting_point(lik, &obj.layout, config)?;
    {
        let (a, b, l) = obj.layout.split(&base);
        let lam: Vec<f64> = l.iter().map(|v| v.exp()).collect();
        lik.log_likelihood(a, b, &lam).map_err(|e| FitError::NonFiniteStart(e.to_string()))?;
    }
    if obj.value_and_gradient(&base).is_none() {
        return Err(FitError::NonFiniteStart("gradient not finite".into()));
    }

    let mut starts = vec![base.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter: Normal<f64> = Normal::new(0.0, 0.5).expect("valid normal");
    for _ in 0..config.restarts {
        let mut x = base.clone();
        let off = obj.layout.beta_offset();
        if obj.layout.has_alpha {
            x[0] = (x[0] * (2.0 * jitter.sample(&mut rng)).exp()).clamp(obj.lower[0], obj.upper[0]);
        }
        for v in &mut x[off..] {
            *v += jitter.sample(&mut rng);
        }
        starts.push(x);
    }

    let h0 = initial_inverse_hessian(&obj, &base);
    let mut best: Option<(usize, optimizer::Outcome)> = None;
    let mut iterations = 0;
    let mut evaluations = 0;
    for (s, x0) in starts.into_iter().enumerate() {
        let h = if s == 0 { h0.clone() } else { initial_inverse_hessian(&obj, &x0) };
        let Some(out) = optimizer::minimize(&obj, x0, &h) else {
            continue;
        };
        iterations += out.iterations;
        evaluations += out.evaluations;
        let better = match &best {
            None => true,
            Some((_, b)) => out.f < b.f,
        };
        if better {
            best = Some((s, out));
        }
    }
    let Some((best_start, out)) = best else {
        return Err(FitError::NonFiniteStart("no start could be evaluated".into()));
    };

    let (alpha, beta, loglam) = obj.layout.split(&out.x);
    let beta = beta.to_vec();
    let lambda0: Vec<f64> = loglam.iter().map(|v| v.exp()).collect();
    let loglik = -out.f;
    let k = obj.layout.len();

    let weighted = lik.weighted_exposure(&beta);
    let lambda_at_boundary: Vec<bool> = lambda0.iter().zip(&weighted).map(|(l, w)| l * w < 1e-3).collect();
    let alpha_at_boundary = obj.layout.has_alpha && alpha <= config.alpha_bounds.0;

    let (se_alpha, se_beta, se_lambda0) = natural_standard_errors(lik, &obj.layout, alpha, &beta, &lambda0, &lambda_at_boundary, config);

    Ok(FitResult {
        fingerprint,
        alpha,
        beta,
        lambda0,
        se_alpha,
        se_beta,
        se_lambda0,
        alpha_at_boundary,
        lambda_at_boundary,
        loglik,
        k,
        aic: aic(loglik, k),
        converged: out.converged,
        trace: OptimizerTrace {
            starts: 1 + config.restarts,
            best_start,
            iterations,
            evaluations,
            projected_gradient: out.projected_gradient,
            status: out.status.to_string(),
        },
    })
}

/// SEs from the numerical Hessian of the log-likelihood in natural
/// coordinates. Baseline levels at their boundary are excluded from the
/// inversion and reported unavailable.
fn natural_standard_errors(
    lik: &Likelihood,
    layout: &Layout,
    alpha: f64,
    beta: &[f64],
    lambda0: &[f64],
    lambda_at_boundary: &[bool],
    config: &FitConfig,
) -> (Option<f64>, Vec<Option<f64>>, Vec<Option<f64>>) {
    let keep_lambda: Vec<usize> = (0..layout.m).filter(|&k| !lambda_at_boundary[k]).collect();
    let mut theta = Vec::new();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    if layout.has_alpha {
        theta.push(alpha);
        lower.push(config.alpha_bounds.0);
        upper.push(config.alpha_bounds.1);
    }
    theta.extend_from_slice(beta);
    lower.extend(std::iter::repeat_n(f64::NEG_INFINITY, layout.p));
    upper.extend(std::iter::repeat_n(f64::INFINITY, layout.p));
    for &k in &keep_lambda {
        theta.push(lambda0[k]);
        lower.push(0.0);
        upper.push(f64::INFINITY);
    }
    let a_off = usize::from(layout.has_alpha);
    let grad = |t: &[f64]| -> Option<Vec<f64>> {
        let a = if layout.has_alpha { t[0] } else { 0.0 };
        let b = &t[a_off..a_off + layout.p];
        let mut lam = lambda0.to_vec();
        for (slot, &k) in keep_lambda.iter().enumerate() {
            lam[k] = t[a_off + layout.p + slot];
        }
        let (ll, g) = lik.log_likelihood_with_gradient(a, b, &lam).ok()?;
        if !ll.is_finite() {
            return None;
        }
        let mut out = Vec::with_capacity(t.len());
        if layout.has_alpha {
            out.push(g.alpha);
        }
        out.extend_from_slice(&g.beta);
        out.extend(keep_lambda.iter().map(|&k| g.lambda0[k]));
        Some(out)
    };
    let se = hessian_from_gradient(grad, &theta, config.fd_step, Some((&lower, &upper)))
        .ok()
        .and_then(|h| standard_errors(&h));
    let mut lambda_se = vec![None; layout.m];
    match se {
        Some(se) => {
            for (slot, &k) in keep_lambda.iter().enumerate() {
                lambda_se[k] = Some(se[a_off + layout.p + slot]);
            }
            (
                layout.has_alpha.then(|| se[0]),
                se[a_off..a_off + layout.p].iter().map(|&v| Some(v)).collect(),
                lambda_se,
            )
        }
        None => (None, vec![None; layout.p], lambda_se),
    }
}

/// Fingerprint of a model on a cohort.
pub fn fingerprint_for(cohort: &Cohort, network: Option<&PeerNetwork>, config: &FitConfig) -> ModelFingerprint {
    let epidemic = config.model == ModelKind::Epidemic;
    ModelFingerprint {
        model: config.model,
        metric: network.filter(|_| epidemic).map(|n| n.metric),
        tau_d_km: network.filter(|_| epidemic).map(|n| n.tau_d_km),
        tau_r: epidemic.then_some(config.tau_r),
        covariates: cohort.covariate_names(),
        breakpoints: config.breakpoints.clone(),
        standardizer: cohort.standardizer.clone(),
        data: cohort.fingerprint(),
    }
}

/// Fit the model selected by `config.model` to the scored households of
/// `cohort`. The network is ignored for the endemic-only model.
pub fn fit_mle(cohort: &Cohort, network: &PeerNetwork, config: &FitConfig) -> Result<FitResult, FitError> {
    config.validate()?;
    let (net, tau_r) = match config.model {
        ModelKind::Epidemic => (network.clone(), config.tau_r),
        ModelKind::EndemicOnly => (PeerNetwork::empty(cohort.len()), TauR::Infinite),
    };
    let lik = Likelihood::new(cohort, &net, tau_r, &config.breakpoints)?;
    fit_prepared(&lik, fingerprint_for(cohort, Some(network), config), config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    PeerEffect,
    NoPeerEffect,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::PeerEffect => "peer effect",
            Verdict::NoPeerEffect => "no peer effect",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedFit {
    /// Position of the fit in the input slice.
    pub index: usize,
    pub aic: f64,
    pub delta_aic: f64,
    pub alpha_stars: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// AIC ascending, ties broken by fingerprint key.
    pub ranking: Vec<RankedFit>,
    pub verdict: Verdict,
    /// Input index of the lowest-AIC fit.
    pub best: usize,
    /// Input index of the endemic-only fit.
    pub endemic: usize,
}

/// Rank fits of one data set by AIC and decide whether peer effects are
/// supported: the best model must have `α̂ > 0` and strictly lower AIC than
/// the endemic-only fit.
pub fn compare_models(fits: &[FitResult]) -> Result<Comparison, FitError> {
    let first = fits.first().ok_or(FitError::Empty)?;
    if let Some(other) = fits.iter().find(|f| f.fingerprint.data != first.fingerprint.data) {
        return Err(FitError::MixedData(first.fingerprint.data.clone(), other.fingerprint.data.clone()));
    }
    let mut order: Vec<usize> = (0..fits.len()).collect();
    order.sort_by(|&a, &b| {
        fits[a]
            .aic
            .partial_cmp(&fits[b].aic)
            .unwrap_or(Ordering::Equal)
            .then_with(|| fits[a].fingerprint.key().cmp(&fits[b].fingerprint.key()))
            .then(a.cmp(&b))
    });
    let endemic = order
        .iter()
        .copied()
        .find(|&i| fits[i].model() == ModelKind::EndemicOnly)
        .ok_or(FitError::NoEndemicFit)?;
    let best = order[0];
    let verdict = if fits[best].model() == ModelKind::Epidemic && fits[best].alpha > 0.0 && fits[best].aic < fits[endemic].aic {
        Verdict::PeerEffect
    } else {
        Verdict::NoPeerEffect
    };
    let best_aic = fits[best].aic;
    let ranking = order
        .iter()
        .map(|&i| RankedFit {
            index: i,
            aic: fits[i].aic,
            delta_aic: fits[i].aic - best_aic,
            alpha_stars: stars(fits[i].alpha_p_value(), StarScale::WithTenPercent),
        })
        .collect();
    Ok(Comparison {
        ranking,
        verdict,
        best,
        endemic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epimodel::tests::{cohort, lambda_for};
    use crate::epimodel::CovariateMatrix;
    use approx::assert_abs_diff_eq;

    #[test]
    fn aic_formula() {
        assert_eq!(aic(-100.0, 2), 204.0);
        assert_eq!(aic(-100.0, 3) - aic(-100.0, 2), 2.0);
    }

    #[test]
    fn quadratic_derivatives() {
        let theta0 = [1.0, -2.0, 0.5];
        let f = |t: &[f64]| -t.iter().zip(&theta0).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let at = [0.3, 0.1, 2.0];
        let g = numerical_gradient(f, &at, 1e-5, None).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(g[j], -2.0 * (at[j] - theta0[j]), epsilon = 1e-8);
        }
        let h = numerical_hessian(f, &at, 1e-4, None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { -2.0 } else { 0.0 };
                assert_abs_diff_eq!(h[(i, j)], expect, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn one_sided_at_bounds() {
        let f = |t: &[f64]| -(t[0] - 0.3).powi(2);
        let lo = [0.0];
        let hi = [1.0];
        let g = numerical_gradient(f, &[0.0], 1e-5, Some((&lo, &hi))).unwrap();
        assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-6);
        let g = numerical_gradient(f, &[1.0], 1e-5, Some((&lo, &hi))).unwrap();
        assert_abs_diff_eq!(g[0], -1.4, epsilon = 1e-4);
    }

    #[test]
    fn gaussian_and_diagonal_standard_errors() {
        let sigma = 0.7;
        let f = |t: &[f64]| -(t[0] - 3.0).powi(2) / (2.0 * sigma * sigma);
        let h = numerical_hessian(f, &[3.0], 1e-3, None).unwrap();
        assert_abs_diff_eq!(standard_errors(&h).unwrap()[0], sigma, epsilon = 1e-6);
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-4.0, -25.0]));
        let se = standard_errors(&h).unwrap();
        assert_abs_diff_eq!(se[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(se[1], 0.2, epsilon = 1e-15);
        let indefinite = DMatrix::from_diagonal(&DVector::from_vec(vec![-4.0, 1.0]));
        assert!(standard_errors(&indefinite).is_none());
        assert!(standard_errors(&DMatrix::zeros(2, 2)).is_none());
    }

    #[test]
    fn geometric_score_matches_closed_form() {
        // isolated houses with activation times; loglik in μ is
        // Σ (t_i - 1) log(1-μ) + log μ  +  (never) T log(1-μ)
        let times = vec![Some(2), Some(5), None, Some(1), None];
        let horizon = 6;
        let c = cohort(times.clone(), times.clone(), horizon);
        let lik = Likelihood::new(&c, &PeerNetwork::empty(5), TauR::Infinite, &[]).unwrap();
        let mu: f64 = 0.2;
        let lambda = lambda_for(mu);
        let (_, g) = lik.log_likelihood_with_gradient(0.0, &[], &[lambda]).unwrap();
        let (mut fails, mut events) = (0.0, 0.0);
        for t in &times {
            match t {
                Some(t) => {
                    fails += f64::from(*t - 1);
                    events += 1.0;
                }
                None => fails += f64::from(horizon),
            }
        }
        let score_mu = events / mu - fails / (1.0 - mu);
        // dμ/dλ = 1 - μ
        assert_abs_diff_eq!(g.lambda0[0], score_mu * (1.0 - mu), epsilon = 1e-10);
        let f = |t: &[f64]| lik.log_likelihood(0.0, &[], &[t[0]]).unwrap();
        let num = numerical_gradient(f, &[lambda], 1e-5, None).unwrap();
        assert_abs_diff_eq!(num[0], g.lambda0[0], epsilon = 1e-5);
    }

    fn endemic_only() -> FitConfig {
        FitConfig {
            model: ModelKind::EndemicOnly,
            ..FitConfig::default()
        }
    }

    #[test]
    fn endemic_fit_matches_closed_form_rate() {
        // without covariates the MLE of μ is events / person-months
        let times: Vec<Option<i32>> = (0..40).map(|i| if i % 3 == 0 { Some(1 + (i % 7)) } else { None }).collect();
        let horizon = 10;
        let c = cohort(times.clone(), times.clone(), horizon);
        let fit = fit_mle(&c, &PeerNetwork::empty(40), &endemic_only()).unwrap();
        let events = times.iter().flatten().count() as f64;
        let months: f64 = times.iter().map(|t| t.map_or(f64::from(horizon), |t| f64::from(t))).sum();
        let mu_hat = events / months;
        assert!(fit.converged, "{:?}", fit.trace);
        assert_abs_diff_eq!(fit.lambda0[0], lambda_for(mu_hat), epsilon = 1e-6);
        assert_eq!(fit.k, 1);
        assert_eq!(fit.aic, 2.0 * 1.0 - 2.0 * fit.loglik);
        // Fisher SE of the geometric rate, mapped to λ via dλ/dμ = 1/(1-μ)
        let se_mu = (mu_hat * mu_hat * (1.0 - mu_hat) / events).sqrt();
        assert_abs_diff_eq!(fit.se_lambda0[0].unwrap(), se_mu / (1.0 - mu_hat), epsilon = 1e-5);
    }

    #[test]
    fn zero_activations_hit_the_boundary() {
        let c = cohort(vec![None; 10], vec![None; 10], 12);
        let fit = fit_mle(&c, &PeerNetwork::empty(10), &endemic_only()).unwrap();
        assert!(fit.lambda0[0] < 1e-6);
        assert!(fit.lambda_at_boundary[0]);
        assert_eq!(fit.se_lambda0[0], None);
    }

    #[test]
    fn analytic_and_numerical_gradient_modes_agree() {
        let times: Vec<Option<i32>> = (0..30).map(|i| if i % 4 == 0 { Some(2 + i % 5) } else { None }).collect();
        let mut c = cohort(times.clone(), times, 8);
        c.covariates = CovariateMatrix::from_rows(&(0..30).map(|i| vec![(i as f64 / 10.0).sin()]).collect::<Vec<_>>()).unwrap();
        let a = fit_mle(&c, &PeerNetwork::empty(30), &endemic_only()).unwrap();
        let n = fit_mle(
            &c,
            &PeerNetwork::empty(30),
            &FitConfig {
                gradient: GradientMode::CentralDifference,
                ..endemic_only()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(a.loglik, n.loglik, epsilon = 1e-6);
        assert_abs_diff_eq!(a.beta[0], n.beta[0], epsilon = 1e-3);
    }

    #[test]
    fn bad_config_rejected() {
        let c = cohort(vec![None], vec![None], 3);
        let cfg = FitConfig {
            alpha_bounds: (0.5, 0.2),
            ..FitConfig::default()
        };
        assert!(matches!(fit_mle(&c, &PeerNetwork::empty(1), &cfg), Err(FitError::BadConfig(_))));
        let cfg = FitConfig {
            gradient_tol: 0.0,
            ..FitConfig::default()
        };
        assert!(matches!(fit_mle(&c, &PeerNetwork::empty(1), &cfg), Err(FitError::BadConfig(_))));
    }

    fn fake_fit(model: ModelKind, alpha: f64, aic_value: f64, tau: f64, data: &str) -> FitResult {
        FitResult {
            fingerprint: ModelFingerprint {
                model,
                metric: (model == ModelKind::Epidemic).then_some(Metric::Euclidean),
                tau_d_km: (model == ModelKind::Epidemic).then_some(tau),
                tau_r: (model == ModelKind::Epidemic).then_some(TauR::Infinite),
                covariates: vec![],
                breakpoints: vec![],
                standardizer: None,
                data: data.into(),
            },
            alpha,
            beta: vec![],
            lambda0: vec![0.01],
            se_alpha: Some(alpha / 2.5),
            se_beta: vec![],
            se_lambda0: vec![Some(0.001)],
            alpha_at_boundary: alpha == 0.0,
            lambda_at_boundary: vec![false],
            loglik: -aic_value / 2.0 + 2.0,
            k: 2,
            aic: aic_value,
            converged: true,
            trace: OptimizerTrace {
                starts: 1,
                best_start: 0,
                iterations: 0,
                evaluations: 0,
                projected_gradient: 0.0,
                status: String::new(),
            },
        }
    }

    #[test]
    fn peer_effect_verdicts() {
        let fits = vec![
            fake_fit(ModelKind::EndemicOnly, 0.0, 2865.0, 0.0, "d"),
            fake_fit(ModelKind::Epidemic, 8e-5, 2855.0, 0.1, "d"),
        ];
        let cmp = compare_models(&fits).unwrap();
        assert_eq!(cmp.verdict, Verdict::PeerEffect);
        assert_eq!(cmp.best, 1);
        assert_eq!(cmp.ranking.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 0]);
        assert_eq!(cmp.ranking[0].alpha_stars, "*");

        let fits = vec![
            fake_fit(ModelKind::Epidemic, 1e-4, 214.0, 0.1, "d"),
            fake_fit(ModelKind::EndemicOnly, 0.0, 212.0, 0.0, "d"),
        ];
        assert_eq!(compare_models(&fits).unwrap().verdict, Verdict::NoPeerEffect);

        // best epidemic model with α̂ = 0 is not a peer effect
        let fits = vec![
            fake_fit(ModelKind::Epidemic, 0.0, 100.0, 0.1, "d"),
            fake_fit(ModelKind::EndemicOnly, 0.0, 101.0, 0.0, "d"),
        ];
        assert_eq!(compare_models(&fits).unwrap().verdict, Verdict::NoPeerEffect);
    }

    #[test]
    fn ties_break_on_fingerprint() {
        let fits = vec![
            fake_fit(ModelKind::Epidemic, 1e-3, 50.0, 0.3, "d"),
            fake_fit(ModelKind::Epidemic, 1e-3, 50.0, 0.1, "d"),
            fake_fit(ModelKind::EndemicOnly, 0.0, 60.0, 0.0, "d"),
        ];
        let a = compare_models(&fits).unwrap();
        assert_eq!(a.ranking.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 0, 2]);
        let reversed: Vec<_> = fits.iter().rev().cloned().collect();
        let b = compare_models(&reversed).unwrap();
        assert_eq!(b.ranking.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn mixed_data_rejected() {
        let fits = vec![
            fake_fit(ModelKind::EndemicOnly, 0.0, 60.0, 0.0, "a"),
            fake_fit(ModelKind::Epidemic, 1e-3, 50.0, 0.1, "b"),
        ];
        assert!(matches!(compare_models(&fits), Err(FitError::MixedData(_, _))));
        assert!(matches!(compare_models(&[]), Err(FitError::Empty)));
        assert!(matches!(
            compare_models(&[fake_fit(ModelKind::Epidemic, 1e-3, 50.0, 0.1, "a")]),
            Err(FitError::NoEndemicFit)
        ));
    }

    #[test]
    fn star_levels() {
        assert_eq!(stars(Some(0.0005), StarScale::WithTenPercent), "***");
        assert_eq!(stars(Some(0.005), StarScale::WithTenPercent), "**");
        assert_eq!(stars(Some(0.03), StarScale::WithTenPercent), "*");
        assert_eq!(stars(Some(0.07), StarScale::WithTenPercent), "+");
        assert_eq!(stars(Some(0.07), StarScale::Conventional), "");
        assert_eq!(stars(Some(0.5), StarScale::WithTenPercent), "");
        assert_eq!(stars(None, StarScale::WithTenPercent), "");
        assert_abs_diff_eq!(wald_p_value(1.959963984540054, 1.0).unwrap(), 0.05, epsilon = 1e-10);
        assert_eq!(wald_p_value(1.0, 0.0), None);
    }
}
