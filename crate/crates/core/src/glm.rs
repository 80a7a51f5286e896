//! Logistic regression of eventual participation on household covariates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{stars, wald_p_value, StarScale};
use crate::ingest::{Covariate, Household};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("need more observations ({n}) than coefficients ({p})")]
    TooFewRows { n: usize, p: usize },
    #[error("label {value} at row {row} is not 0 or 1")]
    BadLabel { row: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("design matrix is rank deficient (column `{0}` is collinear with others)")]
    RankDeficient(String),
    #[error("perfect or quasi-complete separation detected after {0} iterations; estimates diverge")]
    Separation(usize),
    #[error("IRLS did not converge in {0} iterations")]
    NotConverged(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogitConfig {
    pub max_iter: usize,
    /// Max-norm of the score, relative to the number of rows.
    pub tol: f64,
    /// L2 term added to the information matrix only when it cannot be factored.
    pub ridge: f64,
}

impl Default for LogitConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-10,
            ridge: 1e-8,
        }
    }
}

/// Affine feature transform `(x - center) / scale` applied before the fit
/// and again at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub names: Vec<String>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaling {
    pub fn identity(names: Vec<String>) -> Self {
        let p = names.len();
        Self {
            names,
            center: vec![0.0; p],
            scale: vec![1.0; p],
        }
    }

    /// Continuous covariates centered on the sample mean and expressed in
    /// reporting units (value per 10,000, areas per 10 m²); binary ones as is.
    pub fn reporting_units(households: &[Household], covariates: &[Covariate]) -> Self {
        let n = households.len().max(1) as f64;
        let center = covariates
            .iter()
            .map(|c| {
                if c.is_binary() {
                    0.0
                } else {
                    households.iter().map(|h| c.extract(h)).sum::<f64>() / n
                }
            })
            .collect();
        let scale = covariates
            .iter()
            .map(|c| match c {
                Covariate::Value => 10_000.0,
                Covariate::OutdoorArea => 10.0,
                _ => 1.0,
            })
            .collect();
        Self {
            names: covariates.iter().map(|c| c.name().to_string()).collect(),
            center,
            scale,
        }
    }

    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>, GlmError> {
        if raw.len() != self.names.len() {
            return Err(GlmError::Dimension(format!("{} features for {} columns", raw.len(), self.names.len())));
        }
        Ok(raw.iter().zip(&self.center).zip(&self.scale).map(|((x, c), s)| (x - c) / s).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    /// `constant` first, then the feature names.
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    pub loglik: f64,
    pub null_loglik: f64,
    /// McFadden: `1 - loglik / null_loglik`.
    pub pseudo_r2: f64,
    pub n: usize,
    pub iterations: usize,
    /// Ridge actually added to the information matrix (0 when not needed).
    pub ridge_used: f64,
    pub scaling: FeatureScaling,
}

impl LogitFit {
    /// A fit record from known coefficients, intercept first; no SEs.
    pub fn from_coefficients(scaling: FeatureScaling, coefficients: Vec<f64>) -> Result<Self, GlmError> {
        if coefficients.len() != scaling.names.len() + 1 {
            return Err(GlmError::Dimension("need an intercept plus one coefficient per feature".into()));
        }
        let mut terms = vec!["constant".to_string()];
        terms.extend(scaling.names.iter().cloned());
        Ok(Self {
            se: vec![f64::NAN; coefficients.len()],
            terms,
            coefficients,
            loglik: f64::NAN,
            null_loglik: f64::NAN,
            pseudo_r2: f64::NAN,
            n: 0,
            iterations: 0,
            ridge_used: 0.0,
            scaling,
        })
    }

    /// `(term, estimate, se, stars)` rows with conventional significance marks.
    pub fn coefficient_table(&self) -> Vec<(String, f64, f64, &'static str)> {
        self.terms
            .iter()
            .zip(&self.coefficients)
            .zip(&self.se)
            .map(|((t, &b), &se)| (t.clone(), b, se, stars(wald_p_value(b, se), StarScale::Conventional)))
            .collect()
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^eta)` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn bernoulli_loglik(eta: &DVector<f64>, y: &[f64]) -> f64 {
    eta.iter().zip(y).map(|(e, yi)| yi * e - softplus(*e)).sum()
}

/// Probability for one raw feature vector.
pub fn predict_prob(fit: &LogitFit, raw: &[f64]) -> Result<f64, GlmError> {
    let x = fit.scaling.apply(raw)?;
    let eta = fit.coefficients[0] + x.iter().zip(&fit.coefficients[1..]).map(|(a, b)| a * b).sum::<f64>();
    Ok(sigmoid(eta))
}

fn check_rank(x: &DMatrix<f64>, terms: &[String]) -> Result<(), GlmError> {
    let xtx = x.transpose() * x;
    let p = xtx.nrows();
    let d: Vec<f64> = (0..p).map(|j| xtx[(j, j)].sqrt()).collect();
    if let Some(j) = d.iter().position(|&v| v == 0.0) {
        return Err(GlmError::RankDeficient(terms[j].clone()));
    }
    let corr = DMatrix::from_fn(p, p, |i, j| xtx[(i, j)] / (d[i] * d[j]));
    let eig = SymmetricEigen::new(corr);
    let (k, &min) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    if min < 1e-10 {
        // the column loading most on the null direction
        let v = eig.eigenvectors.column(k);
        let j = (0..p).rev().max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
        return Err(GlmError::RankDeficient(terms[j].clone()));
    }
    Ok(())
}

/// Maximum likelihood logistic regression by iteratively reweighted least
/// squares. `rows` hold raw features; `scaling` maps them to model units.
pub fn fit_logistic(rows: &[Vec<f64>], labels: &[f64], scaling: FeatureScaling, config: &LogitConfig) -> Result<LogitFit, GlmError> {
    let n = rows.len();
    let p = scaling.names.len() + 1;
    if labels.len() != n {
        return Err(GlmError::Dimension(format!("{n} rows, {} labels", labels.len())));
    }
    if n <= p {
        return Err(GlmError::TooFewRows { n, p });
    }
    if let Some((row, &value)) = labels.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(GlmError::BadLabel { row, value });
    }
    let mut terms = vec!["constant".to_string()];
    terms.extend(scaling.names.iter().cloned());
    let mut data = Vec::with_capacity(n * p);
    for r in rows {
        data.push(1.0);
        data.extend(scaling.apply(r)?);
    }
    let x = DMatrix::from_row_slice(n, p, &data);
    check_rank(&x, &terms)?;

    let y = DVector::from_column_slice(labels);
    let rate = labels.iter().sum::<f64>() / n as f64;
    let null_loglik = if rate == 0.0 || rate == 1.0 {
        0.0
    } else {
        n as f64 * (rate * rate.ln() + (1.0 - rate) * (1.0 - rate).ln())
    };

    let mut beta = DVector::zeros(p);
    let mut ridge_used = 0.0f64;
    let mut iterations = 0;
    let mut converged = false;
    let mut info = DMatrix::zeros(p, p);
    while iterations < config.max_iter {
        iterations += 1;
        let eta = &x * &beta;
        let mu = eta.map(sigmoid);
        let w = mu.map(|m| m * (1.0 - m));
        let score = x.transpose() * (&y - &mu);
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= w[i].sqrt();
        }
        info = xw.transpose() * &xw;
        if score.amax() <= config.tol * n as f64 {
            converged = true;
            break;
        }
        let step = match info.clone().cholesky() {
            Some(c) => c.solve(&score),
            None => {
                ridge_used = config.ridge;
                let damped = &info + DMatrix::identity(p, p) * config.ridge;
                damped.cholesky().ok_or(GlmError::Separation(iterations))?.solve(&score)
            }
        };
        beta += step;
        if (&x * &beta).amax() > 35.0 {
            return Err(GlmError::Separation(iterations));
        }
    }
    if !converged {
        return Err(GlmError::NotConverged(iterations));
    }
    let cov = info
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(GlmError::Separation(iterations))?;
    let se = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    let loglik = bernoulli_loglik(&(&x * &beta), labels);
    let pseudo_r2 = if null_loglik == 0.0 { 0.0 } else { 1.0 - loglik / null_loglik };
    Ok(LogitFit {
        terms,
        coefficients: beta.iter().copied().collect(),
        se,
        loglik,
        null_loglik,
        pseudo_r2,
        n,
        iterations,
        ridge_used,
        scaling,
    })
}

/// Raw covariate rows and "ever applied" labels of households.
pub fn participation_data(households: &[Household], covariates: &[Covariate]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let rows = households
        .iter()
        .map(|h| covariates.iter().map(|c| c.extract(h)).collect())
        .collect();
    let labels = households.iter().map(|h| f64::from(u8::from(h.application.is_some()))).collect();
    (rows, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn names(k: usize) -> FeatureScaling {
        FeatureScaling::identity((1..=k).map(|j| format!("x{j}")).collect())
    }

    #[test]
    fn pool_participation_probabilities() {
        let scaling = FeatureScaling::identity(vec!["has_pool".into()]);
        let fit = LogitFit::from_coefficients(scaling, vec![-2.569, 0.599]).unwrap();
        assert_abs_diff_eq!(predict_prob(&fit, &[0.0]).unwrap(), 0.071, epsilon = 0.001);
        assert_abs_diff_eq!(predict_prob(&fit, &[1.0]).unwrap(), 0.122, epsilon = 0.001);
        assert_abs_diff_eq!(predict_prob(&fit, &[0.0]).unwrap(), 1.0 / (1.0 + 2.569f64.exp()), epsilon = 1e-15);
        assert!(matches!(predict_prob(&fit, &[0.0, 1.0]), Err(GlmError::Dimension(_))));
    }

    #[test]
    fn null_model_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 4000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let labels: Vec<f64> = (0..n).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let fit = fit_logistic(&rows, &labels, names(1), &LogitConfig::default()).unwrap();
        // intercept-only optimum is log(p/(1-p)); the slope is near zero
        assert!((fit.coefficients[1]).abs() < 3.0 * fit.se[1]);
        assert_abs_diff_eq!(fit.coefficients[0], (0.2f64 / 0.8).ln(), epsilon = 3.0 * fit.se[0]);
        let mean: f64 = rows.iter().map(|r| predict_prob(&fit, r).unwrap()).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(mean, 0.2, epsilon = 1e-9);
        assert!(fit.pseudo_r2 >= 0.0 && fit.pseudo_r2 < 0.01);
        assert_eq!(fit.ridge_used, 0.0);
    }

    #[test]
    fn score_equations_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 3000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal), f64::from(u8::from(rng.random_bool(0.3)))]).collect();
        let labels: Vec<f64> = rows
            .iter()
            .map(|r| f64::from(u8::from(rng.random::<f64>() < sigmoid(-1.0 + 0.8 * r[0] + 0.5 * r[1]))))
            .collect();
        let fit = fit_logistic(&rows, &labels, names(2), &LogitConfig::default()).unwrap();
        for j in 0..3 {
            let score: f64 = rows
                .iter()
                .zip(&labels)
                .map(|(r, y)| {
                    let x = if j == 0 { 1.0 } else { r[j - 1] };
                    (y - predict_prob(&fit, r).unwrap()) * x
                })
                .sum();
            assert!(score.abs() < 1e-6, "score {j} = {score}");
        }
        assert!(fit.pseudo_r2 > 0.0 && fit.pseudo_r2 < 1.0);
        assert!(fit.se.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn planted_coefficients_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 50_000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let labels: Vec<f64> = rows
            .iter()
            .map(|r| f64::from(u8::from(rng.random::<f64>() < sigmoid(-2.0 + 0.5 * r[0]))))
            .collect();
        let fit = fit_logistic(&rows, &labels, names(1), &LogitConfig::default()).unwrap();
        assert!((fit.coefficients[0] + 2.0).abs() < 3.0 * fit.se[0]);
        assert!((fit.coefficients[1] - 0.5).abs() < 3.0 * fit.se[1]);
    }

    #[test]
    fn separation_is_reported() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let labels: Vec<f64> = (0..20).map(|i| if i >= 10 { 1.0 } else { 0.0 }).collect();
        assert!(matches!(
            fit_logistic(&rows, &labels, names(1), &LogitConfig::default()),
            Err(GlmError::Separation(_))
        ));
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                vec![v, v]
            })
            .collect();
        let labels: Vec<f64> = (0..200).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        assert!(matches!(
            fit_logistic(&rows, &labels, names(2), &LogitConfig::default()),
            Err(GlmError::RankDeficient(_))
        ));
    }

    #[test]
    fn input_checks() {
        let rows = vec![vec![0.0]; 2];
        assert!(matches!(fit_logistic(&rows, &[0.0, 1.0], names(1), &LogitConfig::default()), Err(GlmError::TooFewRows { .. })));
        let rows = vec![vec![0.0]; 5];
        assert!(matches!(
            fit_logistic(&rows, &[0.0, 1.0, 0.5, 0.0, 1.0], names(1), &LogitConfig::default()),
            Err(GlmError::BadLabel { row: 2, .. })
        ));
    }

    #[test]
    fn reporting_units_scale_and_center() {
        let mk = |value: f64, area: f64, pool: bool| Household {
            id: "h".into(),
            x: 0.0,
            y: 0.0,
            build_year: 2000,
            value,
            outdoor_area: area,
            has_pool: pool,
            ownership_pct: 0.5,
            application: None,
            completion: None,
            multi_conversion: false,
        };
        let hs = vec![mk(50_000.0, 400.0, true), mk(70_000.0, 200.0, false)];
        let s = FeatureScaling::reporting_units(&hs, &[Covariate::Value, Covariate::OutdoorArea, Covariate::HasPool]);
        assert_eq!(s.apply(&[80_000.0, 310.0, 1.0]).unwrap(), vec![2.0, 1.0, 1.0]);
    }
}
