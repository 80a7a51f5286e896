//! Discrete-time SEIR model with autoinfection on a peer network.
//!
//! Time runs in months `1..=T`. A susceptible house activates (S→E) in month
//! `t` with probability `1 - (1-μ_i^t)(1-α)^{n_i^t}`, where `μ_i^t` is its
//! autoinfection probability and `n_i^t` the number of neighbors that were
//! infectious in month `t-1` (parallel updates). A house is infectious from
//! its completion month `t_I` for `τ_R` months (`t_I ..= t_I+τ_R-1`), so it
//! influences hazards in months `t_I+1 ..= t_I+τ_R`. Exposed houses are
//! invisible to their neighbors.
//!
//! The autoinfection probability follows the complementary log-log link
//! `μ = 1 - exp(-λ_0^t · exp(x·β))` with a piecewise-constant baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geonet::PeerNetwork;
use crate::ingest::{Covariate, EventTimeline, Household};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite hazard (linear predictor {0})")]
    NonFiniteHazard(f64),
    #[error("non-finite likelihood term for household `{0}`")]
    NonFiniteTerm(String),
    #[error("month {t} outside window 1..={horizon}")]
    OutOfWindow { t: i32, horizon: u32 },
    #[error("household `{0}` is not susceptible")]
    NotSusceptible(String),
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown hazard formulation `{0}`")]
    UnknownFormulation(String),
}

/// Recovery window in months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TauR {
    Finite(u32),
    Infinite,
}

impl TauR {
    /// Last month (inclusive) in which a house with completion `t_i` is infectious.
    fn last_infectious(self, t_i: i32) -> i64 {
        match self {
            TauR::Finite(r) => i64::from(t_i) + i64::from(r) - 1,
            TauR::Infinite => i64::MAX,
        }
    }
}

impl fmt::Display for TauR {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauR::Finite(r) => write!(f, "{r}"),
            TauR::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for TauR {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(TauR::Infinite),
            other => match other.parse::<u32>() {
                Ok(r) if r >= 1 => Ok(TauR::Finite(r)),
                _ => Err(ModelError::BadParams(format!("tau_R `{other}` must be an integer >= 1 or `inf`"))),
            },
        }
    }
}

impl Serialize for TauR {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TauR::Finite(r) => s.serialize_u32(*r),
            TauR::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for TauR {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(r) if r >= 1 => Ok(TauR::Finite(r)),
            Raw::Int(r) => Err(serde::de::Error::custom(format!("tau_R {r} must be >= 1"))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SeirState {
    S,
    E,
    I,
    R,
}

/// State at the end of month `t` given the event times.
pub fn state_at(exposed: Option<i32>, infectious: Option<i32>, tau_r: TauR, t: i32) -> SeirState {
    match exposed {
        Some(e) if e <= t => match infectious {
            Some(i) if i <= t => {
                if i64::from(t) <= tau_r.last_infectious(i) {
                    SeirState::I
                } else {
                    SeirState::R
                }
            }
            _ => SeirState::E,
        },
        _ => SeirState::S,
    }
}

/// Whether a neighbor that became infectious in `t_ki` counts in `n^t`,
/// i.e. was infectious during month `t-1`.
pub fn influences(t_ki: i32, t: i32, tau_r: TauR) -> bool {
    t_ki < t && i64::from(t) - 1 <= tau_r.last_infectious(t_ki)
}

/// Months in `1..t` during which neighbor `k` (infectious from `t_ki`)
/// entered the hazard, i.e. `min(t-1-t_ki, τ_R)` clamped at zero for
/// in-window `t_ki`. Only in-window months are counted for pre-study `t_ki`.
pub fn exposure_steps(t_ki: i32, t: i32, tau_r: TauR) -> u32 {
    let lo = i64::from(t_ki.max(0)) + 1;
    let hi = (i64::from(t) - 1).min(tau_r.last_infectious(t_ki).saturating_add(1));
    (hi - lo + 1).max(0) as u32
}

/// `log (1-α)^count` with `0 · log 0 = 0`.
pub fn peer_log_survival(alpha: f64, count: u32) -> f64 {
    if count == 0 {
        0.0
    } else {
        f64::from(count) * (-alpha).ln_1p()
    }
}

pub fn linear_predictor(x: &[f64], beta: &[f64]) -> f64 {
    x.iter().zip(beta).map(|(a, b)| a * b).sum()
}

/// Autoinfection probability `1 - exp(-λ_0 · e^{x·β})`; exactly 0 for `λ_0 = 0`.
pub fn autoinfection_prob(linear_predictor: f64, lambda0: f64) -> Result<f64, ModelError> {
    if lambda0 == 0.0 {
        return Ok(0.0);
    }
    let scale = linear_predictor.exp();
    let rate = lambda0 * scale;
    if !rate.is_finite() {
        return Err(ModelError::NonFiniteHazard(linear_predictor));
    }
    Ok(-(-rate).exp_m1())
}

/// Piecewise-constant baseline hazard; segment `k` starts at month
/// `breakpoints[k-1]` (segment 0 starts at month 1) and the last segment
/// extends indefinitely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub breakpoints: Vec<i32>,
    pub levels: Vec<f64>,
}

impl Baseline {
    pub fn constant(level: f64) -> Self {
        Self {
            breakpoints: Vec::new(),
            levels: vec![level],
        }
    }

    pub fn segment_of(breakpoints: &[i32], t: i32) -> usize {
        breakpoints.partition_point(|&b| b <= t)
    }

    pub fn at(&self, t: i32) -> f64 {
        self.levels[Self::segment_of(&self.breakpoints, t)]
    }
}

pub fn validate_breakpoints(breakpoints: &[i32], horizon: u32) -> Result<(), ModelError> {
    if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelError::BadParams("breakpoints must be strictly increasing".into()));
    }
    if breakpoints.iter().any(|&b| b <= 1 || b > horizon as i32) {
        return Err(ModelError::BadParams(format!(
            "breakpoints {breakpoints:?} must lie in 2..={horizon}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicParams {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub baseline: Baseline,
    pub tau_r: TauR,
}

impl EpidemicParams {
    pub fn validate(&self, covariates: usize) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ModelError::BadParams(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.beta.len() != covariates {
            return Err(ModelError::Dimension(format!(
                "{} coefficients for {covariates} covariates",
                self.beta.len()
            )));
        }
        if self.baseline.levels.len() != self.baseline.breakpoints.len() + 1 {
            return Err(ModelError::Dimension("baseline levels must be one more than breakpoints".into()));
        }
        if self.baseline.levels.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(ModelError::BadParams("baseline hazard must be finite and >= 0".into()));
        }
        if self.baseline.breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::BadParams("breakpoints must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Dense row-major covariate matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMatrix {
    columns: usize,
    values: Vec<f64>,
}

impl CovariateMatrix {
    pub fn new(columns: usize, values: Vec<f64>) -> Result<Self, ModelError> {
        if (columns == 0 && !values.is_empty()) || (columns > 0 && !values.len().is_multiple_of(columns)) {
            return Err(ModelError::Dimension(format!("{} values for {columns} columns", values.len())));
        }
        Ok(Self { columns, values })
    }

    /// `rows` households with no covariates.
    pub fn empty(rows: usize) -> Self {
        Self {
            columns: 0,
            values: Vec::with_capacity(rows),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let columns = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != columns) {
            return Err(ModelError::Dimension("ragged covariate rows".into()));
        }
        Self::new(columns, rows.concat())
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn row(&self, i: usize) -> &[f64] {
        if self.columns == 0 {
            &[]
        } else {
            &self.values[i * self.columns..(i + 1) * self.columns]
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            columns: self.columns,
            values: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }
}

/// Centering/scaling of covariates computed on a reference sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub covariates: Vec<Covariate>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Continuous covariates get mean/SD of `reference`; binary ones pass through.
    pub fn fit(households: &[Household], covariates: &[Covariate], reference: &[usize]) -> Self {
        let mut center = Vec::with_capacity(covariates.len());
        let mut scale = Vec::with_capacity(covariates.len());
        for &c in covariates {
            if c.is_binary() || reference.is_empty() {
                center.push(0.0);
                scale.push(1.0);
                continue;
            }
            let n = reference.len() as f64;
            let mean = reference.iter().map(|&i| c.extract(&households[i])).sum::<f64>() / n;
            let var = reference
                .iter()
                .map(|&i| (c.extract(&households[i]) - mean).powi(2))
                .sum::<f64>()
                / n;
            center.push(mean);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self {
            covariates: covariates.to_vec(),
            center,
            scale,
        }
    }

    pub fn transform_one(&self, h: &Household) -> Vec<f64> {
        self.covariates
            .iter()
            .enumerate()
            .map(|(j, c)| (c.extract(h) - self.center[j]) / self.scale[j])
            .collect()
    }

    pub fn transform(&self, households: &[Household]) -> CovariateMatrix {
        let values = households.iter().flat_map(|h| self.transform_one(h)).collect();
        CovariateMatrix {
            columns: self.covariates.len(),
            values,
        }
    }
}

/// Households entering one model: events, covariates, and which of them
/// are scored (core) versus context-only (buffer).
#[derive(Debug, Clone)]
pub struct Cohort {
    pub ids: Vec<String>,
    pub timeline: EventTimeline,
    pub covariates: CovariateMatrix,
    pub scored: Vec<bool>,
    /// How the covariate columns were derived from raw household fields.
    pub standardizer: Option<Standardizer>,
}

impl Cohort {
    pub fn new(
        ids: Vec<String>,
        timeline: EventTimeline,
        covariates: CovariateMatrix,
        scored: Vec<bool>,
    ) -> Result<Self, ModelError> {
        let n = timeline.len();
        let rows = if covariates.columns == 0 {
            n
        } else {
            covariates.values.len() / covariates.columns
        };
        if ids.len() != n || scored.len() != n || rows != n {
            return Err(ModelError::Dimension(format!(
                "cohort of {n} households with {} ids, {rows} covariate rows, {} scored flags",
                ids.len(),
                scored.len()
            )));
        }
        Ok(Self {
            ids,
            timeline,
            covariates,
            scored,
            standardizer: None,
        })
    }

    pub fn with_standardizer(mut self, standardizer: Standardizer) -> Self {
        self.standardizer = Some(standardizer);
        self
    }

    /// Covariate column names, `x1..xp` when no standardization record exists.
    pub fn covariate_names(&self) -> Vec<String> {
        match &self.standardizer {
            Some(s) => s.covariates.iter().map(|c| c.name().to_string()).collect(),
            None => (1..=self.covariates.columns()).map(|j| format!("x{j}")).collect(),
        }
    }

    /// Content hash of events, scoring flags and covariates.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.timeline.study_start.to_string().as_bytes());
        h.update(self.timeline.horizon.to_le_bytes());
        for i in 0..self.len() {
            h.update(self.ids[i].as_bytes());
            for t in [self.timeline.exposed[i], self.timeline.infectious[i]] {
                h.update(t.map_or(i64::MIN, i64::from).to_le_bytes());
            }
            h.update([u8::from(self.scored[i])]);
            for v in self.covariates.row(i) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn horizon(&self) -> u32 {
        self.timeline.horizon
    }

    /// Copy with events after `split` hidden.
    pub fn truncate(&self, split: u32) -> Cohort {
        Cohort {
            ids: self.ids.clone(),
            timeline: self.timeline.truncate(split),
            covariates: self.covariates.clone(),
            scored: self.scored.clone(),
            standardizer: self.standardizer.clone(),
        }
    }

    /// Scored households susceptible at the window start.
    pub fn at_risk(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.scored[i] && self.timeline.initially_susceptible(i))
    }

    fn check_network(&self, network: &PeerNetwork) -> Result<(), ModelError> {
        if network.len() != self.len() {
            return Err(ModelError::Dimension(format!(
                "network has {} nodes, cohort {}",
                network.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// `n_i^t`: neighbors of `i` that were infectious in month `t-1`.
pub fn infectious_neighbors(cohort: &Cohort, network: &PeerNetwork, i: usize, t: i32, tau_r: TauR) -> u32 {
    network
        .neighbors(i)
        .iter()
        .filter(|&&k| cohort.timeline.infectious[k].is_some_and(|tk| influences(tk, t, tau_r)))
        .count() as u32
}

fn check_susceptible(cohort: &Cohort, i: usize) -> Result<(), ModelError> {
    if cohort.timeline.initially_susceptible(i) {
        Ok(())
    } else {
        Err(ModelError::NotSusceptible(cohort.ids[i].clone()))
    }
}

fn month_log_survival(cohort: &Cohort, network: &PeerNetwork, params: &EpidemicParams, i: usize, t: i32, lp: f64) -> Result<f64, ModelError> {
    let mu = autoinfection_prob(lp, params.baseline.at(t))?;
    let n = infectious_neighbors(cohort, network, i, t, params.tau_r);
    Ok((-mu).ln_1p() + peer_log_survival(params.alpha, n))
}

/// Probability that house `i` activates exactly in month `t_i`, evaluated
/// month by month from the neighbors' histories.
pub fn activation_prob(
    cohort: &Cohort,
    network: &PeerNetwork,
    params: &EpidemicParams,
    i: usize,
    t_i: i32,
) -> Result<f64, ModelError> {
    cohort.check_network(network)?;
    check_susceptible(cohort, i)?;
    let horizon = cohort.horizon();
    if t_i < 1 || t_i > horizon as i32 {
        return Err(ModelError::OutOfWindow { t: t_i, horizon });
    }
    let lp = linear_predictor(cohort.covariates.row(i), &params.beta);
    let mut log_surv = 0.0;
    for t in 1..t_i {
        log_surv += month_log_survival(cohort, network, params, i, t, lp)?;
    }
    let last = month_log_survival(cohort, network, params, i, t_i, lp)?;
    Ok(log_surv.exp() * -last.exp_m1())
}

/// Probability that house `i` never activates in `1..=T`.
pub fn never_activation_prob(
    cohort: &Cohort,
    network: &PeerNetwork,
    params: &EpidemicParams,
    i: usize,
) -> Result<f64, ModelError> {
    cohort.check_network(network)?;
    check_susceptible(cohort, i)?;
    let lp = linear_predictor(cohort.covariates.row(i), &params.beta);
    let mut log_surv = 0.0;
    for t in 1..=cohort.horizon() as i32 {
        log_surv += month_log_survival(cohort, network, params, i, t, lp)?;
    }
    Ok(log_surv.exp())
}

/// Per-household sufficient statistics of the likelihood for one
/// `(network, τ_R, breakpoints)` configuration.
#[derive(Debug, Clone, PartialEq)]
struct RiskRecord {
    household: usize,
    /// Months survived (at risk without activating) per baseline segment.
    at_risk: Vec<u32>,
    /// Total `(1-α)` exponent accumulated over the survived months.
    exposure: u32,
    /// Segment and `n_i` of the activation month, for activators.
    event: Option<(usize, u32)>,
}

/// Log-likelihood gradient in natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub lambda0: Vec<f64>,
}

/// Precomputed likelihood for a cohort on a fixed network, recovery window
/// and baseline segmentation. Evaluation is linear in households and
/// independent of network density.
#[derive(Debug, Clone)]
pub struct Likelihood {
    ids: Vec<String>,
    covariates: CovariateMatrix,
    breakpoints: Vec<i32>,
    tau_r: TauR,
    records: Vec<RiskRecord>,
}

fn segment_months(breakpoints: &[i32], end: i32) -> Vec<u32> {
    let mut out = Vec::with_capacity(breakpoints.len() + 1);
    let mut start = 1;
    for k in 0..=breakpoints.len() {
        let stop = breakpoints.get(k).map_or(end, |&b| (b - 1).min(end));
        out.push((stop - start + 1).max(0) as u32);
        if let Some(&b) = breakpoints.get(k) {
            start = start.max(b);
        }
    }
    out
}

impl Likelihood {
    pub fn new(cohort: &Cohort, network: &PeerNetwork, tau_r: TauR, breakpoints: &[i32]) -> Result<Self, ModelError> {
        cohort.check_network(network)?;
        validate_breakpoints(breakpoints, cohort.horizon().max(1))
            .or_else(|e| if breakpoints.is_empty() { Ok(()) } else { Err(e) })?;
        let horizon = cohort.horizon() as i32;
        let records = cohort
            .at_risk()
            .map(|i| {
                let event = cohort.timeline.exposed[i].filter(|&t| t <= horizon);
                let end = event.map_or(horizon, |t| t - 1);
                let exposure = network
                    .neighbors(i)
                    .iter()
                    .filter_map(|&k| cohort.timeline.infectious[k])
                    .map(|tk| exposure_steps(tk, end + 1, tau_r))
                    .sum();
                RiskRecord {
                    household: i,
                    at_risk: segment_months(breakpoints, end),
                    exposure,
                    event: event.map(|t| {
                        (
                            Baseline::segment_of(breakpoints, t),
                            infectious_neighbors(cohort, network, i, t, tau_r),
                        )
                    }),
                }
            })
            .collect();
        Ok(Self {
            ids: cohort.ids.clone(),
            covariates: cohort.covariates.clone(),
            breakpoints: breakpoints.to_vec(),
            tau_r,
            records,
        })
    }

    pub fn tau_r(&self) -> TauR {
        self.tau_r
    }

    pub fn breakpoints(&self) -> &[i32] {
        &self.breakpoints
    }

    pub fn segments(&self) -> usize {
        self.breakpoints.len() + 1
    }

    pub fn covariate_count(&self) -> usize {
        self.covariates.columns()
    }

    /// Number of scored, initially susceptible households.
    pub fn at_risk_count(&self) -> usize {
        self.records.len()
    }

    pub fn activations(&self) -> usize {
        self.records.iter().filter(|r| r.event.is_some()).count()
    }

    /// Activations and person-months at risk per segment (activation month
    /// counted as at risk).
    pub fn segment_totals(&self) -> Vec<(usize, u64)> {
        let mut out = vec![(0usize, 0u64); self.segments()];
        for r in &self.records {
            for (k, &m) in r.at_risk.iter().enumerate() {
                out[k].1 += u64::from(m);
            }
            if let Some((k, _)) = r.event {
                out[k].0 += 1;
                out[k].1 += 1;
            }
        }
        out
    }

    /// Sum over households of `e^{x·β}` times months at risk, per segment.
    pub fn weighted_exposure(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.segments()];
        for r in &self.records {
            let w = linear_predictor(self.covariates.row(r.household), beta).exp();
            for (k, &m) in r.at_risk.iter().enumerate() {
                out[k] += w * f64::from(m);
            }
        }
        out
    }

    fn check(&self, alpha: f64, beta: &[f64], lambda0: &[f64]) -> Result<(), ModelError> {
        if beta.len() != self.covariates.columns() || lambda0.len() != self.segments() {
            return Err(ModelError::Dimension(format!(
                "expected {} coefficients and {} baseline levels",
                self.covariates.columns(),
                self.segments()
            )));
        }
        if !(0.0..=1.0).contains(&alpha) || lambda0.iter().any(|&l| !(l >= 0.0)) {
            return Err(ModelError::BadParams("alpha outside [0,1] or negative baseline".into()));
        }
        Ok(())
    }

    /// Per-household log-probability terms, in household order. Terms may
    /// be `-inf` for impossible observations.
    pub fn terms(&self, alpha: f64, beta: &[f64], lambda0: &[f64]) -> Result<Vec<(usize, f64)>, ModelError> {
        self.check(alpha, beta, lambda0)?;
        let log_q = (-alpha).ln_1p();
        self.records
            .iter()
            .map(|r| {
                let lp = linear_predictor(self.covariates.row(r.household), beta);
                let w = lp.exp();
                if !w.is_finite() {
                    return Err(ModelError::NonFiniteHazard(lp));
                }
                let cum: f64 = r.at_risk.iter().zip(lambda0).map(|(&m, l)| f64::from(m) * l).sum();
                let mut term = -w * cum + peer_term(r.exposure, log_q);
                if let Some((k, n)) = r.event {
                    let z = w * lambda0[k] - peer_term(n, log_q);
                    term += (-(-z).exp_m1()).ln();
                }
                Ok((r.household, term))
            })
            .collect()
    }

    pub fn log_likelihood(&self, alpha: f64, beta: &[f64], lambda0: &[f64]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (i, term) in self.terms(alpha, beta, lambda0)? {
            if !term.is_finite() {
                return Err(ModelError::NonFiniteTerm(self.ids[i].clone()));
            }
            total += term;
        }
        Ok(total)
    }

    /// Log-likelihood and its analytic gradient in `(α, β, λ_0)`.
    pub fn log_likelihood_with_gradient(
        &self,
        alpha: f64,
        beta: &[f64],
        lambda0: &[f64],
    ) -> Result<(f64, Gradient), ModelError> {
        self.check(alpha, beta, lambda0)?;
        let log_q = (-alpha).ln_1p();
        let dlogq = -1.0 / (1.0 - alpha);
        let mut total = 0.0;
        let mut grad = Gradient {
            alpha: 0.0,
            beta: vec![0.0; beta.len()],
            lambda0: vec![0.0; lambda0.len()],
        };
        for r in &self.records {
            let x = self.covariates.row(r.household);
            let lp = linear_predictor(x, beta);
            let w = lp.exp();
            if !w.is_finite() {
                return Err(ModelError::NonFiniteHazard(lp));
            }
            let cum: f64 = r.at_risk.iter().zip(lambda0).map(|(&m, l)| f64::from(m) * l).sum();
            let mut term = -w * cum + peer_term(r.exposure, log_q);
            // d/dβ of the linear predictor coefficient
            let mut dlp = -w * cum;
            for (k, &m) in r.at_risk.iter().enumerate() {
                grad.lambda0[k] -= w * f64::from(m);
            }
            if r.exposure > 0 {
                grad.alpha += f64::from(r.exposure) * dlogq;
            }
            if let Some((k, n)) = r.event {
                let z = w * lambda0[k] - peer_term(n, log_q);
                term += (-(-z).exp_m1()).ln();
                // d log(1 - e^{-z}) / dz
                let dz = 1.0 / z.exp_m1();
                grad.lambda0[k] += dz * w;
                dlp += dz * w * lambda0[k];
                if n > 0 {
                    grad.alpha -= dz * f64::from(n) * dlogq;
                }
            }
            if !term.is_finite() {
                return Err(ModelError::NonFiniteTerm(self.ids[r.household].clone()));
            }
            total += term;
            for (g, xj) in grad.beta.iter_mut().zip(x) {
                *g += dlp * xj;
            }
        }
        Ok((total, grad))
    }
}

fn peer_term(count: u32, log_q: f64) -> f64 {
    if count == 0 {
        0.0
    } else {
        f64::from(count) * log_q
    }
}

/// Total log-likelihood of the observed activations of the scored
/// households.
pub fn log_likelihood(cohort: &Cohort, network: &PeerNetwork, params: &EpidemicParams) -> Result<f64, ModelError> {
    params.validate(cohort.covariates.columns())?;
    Likelihood::new(cohort, network, params.tau_r, &params.baseline.breakpoints)?.log_likelihood(
        params.alpha,
        &params.beta,
        &params.baseline.levels,
    )
}

/// The three hazard formulations that describe the same conditional
/// activation probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// `1 - (1-α)^n (1-μ)` with `μ` from the cloglog mapping.
    Epidemic,
    /// `1 - (1-α)^n (e^{-λ_0})^{e^{x·β}}`.
    AdditiveMultiplicative,
    /// `1 - (e^{-λ_0})^{e^{x·β} e^{α n}}`.
    Multiplicative,
}

impl FromStr for Formulation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "epidemic" => Ok(Formulation::Epidemic),
            "additive_multiplicative" => Ok(Formulation::AdditiveMultiplicative),
            "multiplicative" => Ok(Formulation::Multiplicative),
            other => Err(ModelError::UnknownFormulation(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardInputs {
    pub alpha: f64,
    pub infectious_neighbors: u32,
    pub lambda0: f64,
    pub linear_predictor: f64,
}

pub fn hazard_rate(formulation: Formulation, inputs: HazardInputs) -> Result<f64, ModelError> {
    let HazardInputs {
        alpha,
        infectious_neighbors: n,
        lambda0,
        linear_predictor: lp,
    } = inputs;
    let peer = peer_log_survival(alpha, n);
    let h = match formulation {
        Formulation::Epidemic => {
            let mu = autoinfection_prob(lp, lambda0)?;
            -(peer + (-mu).ln_1p()).exp_m1()
        }
        Formulation::AdditiveMultiplicative => -(peer - lambda0 * lp.exp()).exp_m1(),
        // no baseline, no hazard, even when the peer term overflows
        Formulation::Multiplicative if lambda0 == 0.0 => 0.0,
        Formulation::Multiplicative => -(-lambda0 * (lp + alpha * f64::from(n)).exp()).exp_m1(),
    };
    if h.is_nan() {
        return Err(ModelError::NonFiniteHazard(lp));
    }
    Ok(h)
}

/// Hazard of household `i` in month `t`; it must still be susceptible.
pub fn household_hazard(
    formulation: Formulation,
    cohort: &Cohort,
    network: &PeerNetwork,
    params: &EpidemicParams,
    i: usize,
    t: i32,
) -> Result<f64, ModelError> {
    cohort.check_network(network)?;
    if cohort.timeline.exposed[i].is_some_and(|e| e < t) {
        return Err(ModelError::NotSusceptible(cohort.ids[i].clone()));
    }
    hazard_rate(
        formulation,
        HazardInputs {
            alpha: params.alpha,
            infectious_neighbors: infectious_neighbors(cohort, network, i, t, params.tau_r),
            lambda0: params.baseline.at(t),
            linear_predictor: linear_predictor(cohort.covariates.row(i), &params.beta),
        },
    )
}
