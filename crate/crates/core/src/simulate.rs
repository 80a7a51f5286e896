//! Forward Monte Carlo of the adoption process, synthetic data and
//! cross-validated prediction scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epimodel::{
    influences, linear_predictor, Baseline, Cohort, CovariateMatrix, EpidemicParams, ModelError, Standardizer, TauR,
};
use crate::geonet::{build_network, GeoError, Metric, PeerNetwork, Point, RoadGraph};
use crate::inference::{fit_mle, FitConfig, FitError, FitResult, ModelKind};
use crate::ingest::{Covariate, EventTimeline, Household, YearMonth};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation settings: {0}")]
    BadConfig(String),
    #[error("split month {split} leaves no test window in 1..={horizon}")]
    EmptyTestWindow { split: u32, horizon: u32 },
    #[error("curve lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("fit failed: {0}")]
    Fit(#[from] FitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// How long a newly exposed house stays invisible before it turns infectious.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposedLag {
    Fixed(u32),
    /// Uniform resampling of observed lags (months).
    Empirical(Vec<u32>),
}

impl Default for ExposedLag {
    fn default() -> Self {
        ExposedLag::Fixed(2)
    }
}

impl ExposedLag {
    fn sample(&self, rng: &mut impl Rng) -> u32 {
        match self {
            ExposedLag::Fixed(l) => *l,
            ExposedLag::Empirical(lags) => lags[rng.random_range(0..lags.len())],
        }
    }

    /// Observed `t_I - t_E` of houses with both events in the timeline;
    /// falls back to `fallback` months when there are none.
    pub fn empirical(timeline: &EventTimeline, fallback: u32) -> Self {
        let lags: Vec<u32> = timeline
            .exposed
            .iter()
            .zip(&timeline.infectious)
            .filter_map(|(e, i)| match (e, i) {
                (Some(e), Some(i)) if *e >= 1 && i >= e => Some((i - e) as u32),
                _ => None,
            })
            .collect();
        if lags.is_empty() {
            ExposedLag::Fixed(fallback)
        } else {
            ExposedLag::Empirical(lags)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub realizations: usize,
    pub seed: u64,
    pub lag: ExposedLag,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            realizations: 100,
            seed: 0,
            lag: ExposedLag::default(),
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<(), SimError> {
        if self.realizations == 0 {
            return Err(SimError::BadConfig("realizations must be >= 1".into()));
        }
        if matches!(&self.lag, ExposedLag::Empirical(l) if l.is_empty()) {
            return Err(SimError::BadConfig("empirical lag list is empty".into()));
        }
        Ok(())
    }
}

/// Random stream of realization `r` under a master seed.
pub fn realization_rng(seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng
}

/// Event times after a forward run; same conventions as [`EventTimeline`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub exposed: Vec<Option<i32>>,
    pub infectious: Vec<Option<i32>>,
}

impl Trajectory {
    pub fn participating_at(&self, i: usize, t: i32) -> bool {
        self.exposed[i].is_some_and(|e| e <= t)
    }
}

/// Simulates months `from+1 ..= until` with synchronous updates, starting
/// from the events of `initial` up to month `from`. Houses exposed by
/// `from` without an observed completion get one drawn from the lag rule,
/// no earlier than `from+1`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_forward(
    network: &PeerNetwork,
    covariates: &CovariateMatrix,
    params: &EpidemicParams,
    initial: &EventTimeline,
    from: i32,
    until: i32,
    lag: &ExposedLag,
    rng: &mut impl Rng,
) -> Trajectory {
    let n = initial.len();
    let tau = params.tau_r;
    let cut = |t: Option<i32>| t.filter(|&t| t <= from);
    let mut exposed: Vec<Option<i32>> = initial.exposed.iter().map(|&t| cut(t)).collect();
    let mut infectious: Vec<Option<i32>> = initial.infectious.iter().map(|&t| cut(t)).collect();
    for i in 0..n {
        if let (Some(e), None) = (exposed[i], infectious[i]) {
            infectious[i] = Some((e + lag.sample(rng) as i32).max(from + 1));
        }
    }

    let months = (until - from).max(0) as usize;
    // changes[m] holds houses whose influence starts (+) or stops (-) at month from+1+m
    let mut starts: Vec<Vec<usize>> = vec![Vec::new(); months + 1];
    let mut stops: Vec<Vec<usize>> = vec![Vec::new(); months + 1];
    let mut count = vec![0u32; n];
    let first = from + 1;
    let schedule = |k: usize, tk: i32, starts: &mut Vec<Vec<usize>>, stops: &mut Vec<Vec<usize>>| {
        let on = tk + 1;
        if on > first && on <= until {
            starts[(on - first) as usize].push(k);
        }
        if let TauR::Finite(r) = tau {
            let off = i64::from(tk) + i64::from(r) + 1;
            if off > i64::from(first) && off <= i64::from(until) {
                stops[(off - i64::from(first)) as usize].push(k);
            }
        }
    };
    for k in 0..n {
        if let Some(tk) = infectious[k] {
            if influences(tk, first, tau) {
                for &j in network.neighbors(k) {
                    count[j] += 1;
                }
            }
            schedule(k, tk, &mut starts, &mut stops);
        }
    }

    let scale: Vec<f64> = (0..n).map(|i| linear_predictor(covariates.row(i), &params.beta).exp()).collect();
    let log_q = (-params.alpha).ln_1p();
    for m in 0..months {
        let t = first + m as i32;
        if m > 0 {
            for &k in &starts[m] {
                for &j in network.neighbors(k) {
                    count[j] += 1;
                }
            }
            for &k in &stops[m] {
                for &j in network.neighbors(k) {
                    count[j] -= 1;
                }
            }
        }
        let lambda = params.baseline.at(t);
        let mut newly = Vec::new();
        for i in 0..n {
            if exposed[i].is_some() {
                continue;
            }
            let peer = if count[i] == 0 { 0.0 } else { f64::from(count[i]) * log_q };
            let h = -(peer - lambda * scale[i]).exp_m1();
            let u: f64 = rng.random();
            if u < h {
                newly.push(i);
            }
        }
        for i in newly {
            exposed[i] = Some(t);
            let ti = t + lag.sample(rng) as i32;
            infectious[i] = Some(ti);
            schedule(i, ti, &mut starts, &mut stops);
        }
    }
    Trajectory { exposed, infectious }
}

/// Mean and spread of the simulated participation ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCurve {
    pub months: Vec<i32>,
    pub mean: Vec<f64>,
    /// Sample SD across realizations; all zero when only one realization ran.
    pub sd: Vec<f64>,
    pub realizations: usize,
}

impl McCurve {
    pub fn sd_defined(&self) -> bool {
        self.realizations > 1
    }
}

/// Participation ratio over `core` (E, I or R) for months `from+1..=until`,
/// averaged over independent realizations.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_mean(
    network: &PeerNetwork,
    covariates: &CovariateMatrix,
    params: &EpidemicParams,
    initial: &EventTimeline,
    from: i32,
    until: i32,
    core: &[usize],
    config: &SimConfig,
) -> Result<McCurve, SimError> {
    config.validate()?;
    if core.is_empty() {
        return Err(SimError::BadConfig("no core households".into()));
    }
    let months: Vec<i32> = (from + 1..=until).collect();
    let denom = core.len() as f64;
    let curves: Vec<Vec<f64>> = (0..config.realizations)
        .into_par_iter()
        .map(|r| {
            let mut rng = realization_rng(config.seed, r as u64);
            let traj = simulate_forward(network, covariates, params, initial, from, until, &config.lag, &mut rng);
            months
                .iter()
                .map(|&t| core.iter().filter(|&&i| traj.participating_at(i, t)).count() as f64 / denom)
                .collect()
        })
        .collect();
    let reps = curves.len() as f64;
    let mut mean = vec![0.0; months.len()];
    for c in &curves {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= reps;
    }
    let mut sd = vec![0.0; months.len()];
    if curves.len() > 1 {
        for c in &curves {
            for ((s, v), m) in sd.iter_mut().zip(c).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut sd {
            *s = (*s / (reps - 1.0)).sqrt();
        }
    }
    Ok(McCurve {
        months,
        mean,
        sd,
        realizations: config.realizations,
    })
}

/// Root mean square deviation between two curves.
pub fn rmse(sim: &[f64], obs: &[f64]) -> Result<f64, SimError> {
    if sim.len() != obs.len() {
        return Err(SimError::LengthMismatch(sim.len(), obs.len()));
    }
    if sim.is_empty() {
        return Err(SimError::BadConfig("empty curves".into()));
    }
    let diffs: Vec<f64> = sim.iter().zip(obs).map(|(a, b)| a - b).collect();
    // scaled by the largest deviation so a constant offset comes back exactly
    let big = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if big == 0.0 {
        return Ok(0.0);
    }
    let mean_sq = diffs.iter().map(|d| (d / big).powi(2)).sum::<f64>() / diffs.len() as f64;
    Ok(big * mean_sq.sqrt())
}

/// Observed participation ratio of `core` for each month.
pub fn observed_curve(timeline: &EventTimeline, core: &[usize], months: &[i32]) -> Vec<f64> {
    let denom = core.len() as f64;
    months
        .iter()
        .map(|&t| core.iter().filter(|&&i| timeline.participating_at(i, t)).count() as f64 / denom)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub months: Vec<i32>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub observed: Vec<f64>,
    pub realizations: usize,
    pub rmse: f64,
    pub final_mean: f64,
    pub final_sd: f64,
    pub final_observed: f64,
}

impl PredictionReport {
    pub fn new(curve: McCurve, observed: Vec<f64>) -> Result<Self, SimError> {
        let rmse = rmse(&curve.mean, &observed)?;
        let last = curve.mean.len() - 1;
        Ok(Self {
            final_mean: curve.mean[last],
            final_sd: curve.sd[last],
            final_observed: observed[last],
            months: curve.months,
            mean: curve.mean,
            sd: curve.sd,
            observed,
            realizations: curve.realizations,
            rmse,
        })
    }

    pub fn sd_defined(&self) -> bool {
        self.realizations > 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub epidemic_fit: FitResult,
    pub endemic_fit: FitResult,
    pub epidemic: PredictionReport,
    pub endemic: PredictionReport,
    /// Final-month means differ by more than the larger of the two SDs.
    pub final_difference_significant: bool,
    pub note: Option<String>,
}

/// Fits the epidemic (using `fit_config.tau_r` on `network`) and the
/// endemic-only model on months `..= split`, then simulates both forward
/// from the observed state at `split` over the remaining months with common
/// random numbers and scores them against the observed core participation.
pub fn cross_validate(
    cohort: &Cohort,
    network: &PeerNetwork,
    split: u32,
    fit_config: &FitConfig,
    sim_config: &SimConfig,
) -> Result<CrossValidation, SimError> {
    let horizon = cohort.horizon();
    if split < 1 || split >= horizon {
        return Err(SimError::EmptyTestWindow { split, horizon });
    }
    sim_config.validate()?;
    let train = cohort.truncate(split);
    let breakpoints: Vec<i32> = fit_config.breakpoints.iter().copied().filter(|&b| b <= split as i32).collect();
    let epi_cfg = FitConfig {
        model: ModelKind::Epidemic,
        breakpoints: breakpoints.clone(),
        ..fit_config.clone()
    };
    let end_cfg = FitConfig {
        model: ModelKind::EndemicOnly,
        ..epi_cfg.clone()
    };
    let epidemic_fit = fit_mle(&train, network, &epi_cfg)?;
    let endemic_fit = fit_mle(&train, network, &end_cfg)?;

    let core: Vec<usize> = (0..cohort.len()).filter(|&i| cohort.scored[i]).collect();
    let initial = &train.timeline;
    let from = split as i32;
    let until = horizon as i32;
    let months: Vec<i32> = (from + 1..=until).collect();
    let observed = observed_curve(&cohort.timeline, &core, &months);

    let endemic_curve = monte_carlo_mean(
        network,
        &cohort.covariates,
        &endemic_fit.params(),
        initial,
        from,
        until,
        &core,
        sim_config,
    )?;
    let endemic = PredictionReport::new(endemic_curve.clone(), observed.clone())?;
    let (epidemic, note) = if epidemic_fit.alpha > 0.0 {
        let curve = monte_carlo_mean(
            network,
            &cohort.covariates,
            &epidemic_fit.params(),
            initial,
            from,
            until,
            &core,
            sim_config,
        )?;
        (PredictionReport::new(curve, observed)?, None)
    } else {
        (
            endemic.clone(),
            Some("alpha_hat = 0: epidemic model reduces to endemic-only, simulation not repeated".to_string()),
        )
    };
    let final_difference_significant = (epidemic.final_mean - endemic.final_mean).abs() > epidemic.final_sd.max(endemic.final_sd);
    Ok(CrossValidation {
        epidemic_fit,
        endemic_fit,
        epidemic,
        endemic,
        final_difference_significant,
        note,
    })
}

/// Simulates one trajectory from an all-susceptible start over `1..=horizon`.
/// Completions after the window are reported as unobserved.
pub fn generate_synthetic(
    network: &PeerNetwork,
    covariates: &CovariateMatrix,
    params: &EpidemicParams,
    study_start: YearMonth,
    horizon: u32,
    lag: &ExposedLag,
    rng: &mut impl Rng,
) -> EventTimeline {
    let n = network.len();
    let empty = EventTimeline {
        study_start,
        horizon,
        exposed: vec![None; n],
        infectious: vec![None; n],
    };
    let traj = simulate_forward(network, covariates, params, &empty, 0, horizon as i32, lag, rng);
    EventTimeline {
        study_start,
        horizon,
        exposed: traj.exposed,
        infectious: traj.infectious.into_iter().map(|t| t.filter(|&t| t <= horizon as i32)).collect(),
    }
}

/// Layout and planted parameters of a synthetic grid data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Houses per grid row.
    pub side: usize,
    /// Number of rows; square grid when absent.
    pub rows: Option<usize>,
    pub spacing_m: f64,
    pub study_start: YearMonth,
    pub horizon: u32,
    pub metric: Metric,
    pub tau_d_km: f64,
    pub alpha: f64,
    pub covariates: Vec<Covariate>,
    pub beta: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub breakpoints: Vec<i32>,
    pub tau_r: TauR,
    pub lag: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            side: 20,
            rows: None,
            spacing_m: 50.0,
            study_start: YearMonth::new(2004, 1).expect("valid month"),
            horizon: 120,
            metric: Metric::Euclidean,
            tau_d_km: 0.15,
            alpha: 0.002,
            covariates: vec![Covariate::Value, Covariate::OutdoorArea],
            beta: vec![0.4, -0.2],
            lambda0: vec![0.003, 0.001],
            breakpoints: vec![61],
            tau_r: TauR::Finite(12),
            lag: 2,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn households(&self) -> usize {
        self.side * self.rows.unwrap_or(self.side)
    }

    pub fn params(&self) -> EpidemicParams {
        EpidemicParams {
            alpha: self.alpha,
            beta: self.beta.clone(),
            baseline: Baseline {
                breakpoints: self.breakpoints.clone(),
                levels: self.lambda0.clone(),
            },
            tau_r: self.tau_r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub households: usize,
    pub activations: usize,
    pub network_fingerprint: String,
    pub standardizer: Standardizer,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub households: Vec<Household>,
    pub roads: RoadGraph,
    pub network: PeerNetwork,
    pub cohort: Cohort,
    pub manifest: SynthManifest,
}

/// Raw household attributes: build year ~ N(1993, 14.4) rounded, value
/// ~ N(54827, 51120) floored at 5000, outdoor area ~ N(415.8, 342.2)
/// floored at 0, ownership ~ N(0.67, 0.2) clipped to [0,1], pool
/// ~ Bernoulli(0.23).
fn draw_household(id: String, p: Point, rng: &mut impl Rng) -> Household {
    let mut z = || -> f64 { rng.sample(StandardNormal) };
    let build_year = (1993.0 + 14.42 * z()).round() as i32;
    let value = (54827.0 + 51120.0 * z()).max(5000.0);
    let outdoor_area = (415.8 + 342.2 * z()).max(0.0);
    let ownership_pct = (0.67 + 0.2 * z()).clamp(0.0, 1.0);
    let has_pool = Bernoulli::new(0.23).expect("valid probability").sample(rng);
    Household {
        id,
        x: p.x,
        y: p.y,
        build_year,
        value,
        outdoor_area,
        has_pool,
        ownership_pct,
        application: None,
        completion: None,
        multi_conversion: false,
    }
}

/// Street lattice around 2×2 blocks of houses, half a spacing off the lots.
fn block_roads(cols: usize, rows: usize, spacing: f64) -> Result<RoadGraph, GeoError> {
    let xlines = cols.div_ceil(2) + 1;
    let ylines = rows.div_ceil(2) + 1;
    let coord = |k: usize| (2 * k) as f64 * spacing - spacing / 2.0;
    let name = |a: usize, b: usize| format!("n{a}_{b}");
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for a in 0..xlines {
        for b in 0..ylines {
            nodes.push((name(a, b), Point::new(coord(a), coord(b))));
            if a + 1 < xlines {
                edges.push((format!("h{a}_{b}"), name(a, b), name(a + 1, b), None));
            }
            if b + 1 < ylines {
                edges.push((format!("v{a}_{b}"), name(a, b), name(a, b + 1), None));
            }
        }
    }
    RoadGraph::new(nodes, edges)
}

/// Builds a `side × rows` grid of houses with random attributes, the road
/// lattice, the peer network and one simulated adoption history. Planted
/// coefficients act on covariates standardized over all houses.
pub fn synthesize(spec: &SynthSpec) -> Result<SyntheticData, SimError> {
    if spec.side == 0 || spec.rows == Some(0) || !(spec.spacing_m > 0.0) {
        return Err(SimError::BadConfig("grid needs side, rows >= 1 and positive spacing".into()));
    }
    if spec.beta.len() != spec.covariates.len() {
        return Err(SimError::BadConfig("one coefficient per covariate required".into()));
    }
    let params = spec.params();
    params.validate(spec.covariates.len())?;
    crate::epimodel::validate_breakpoints(&spec.breakpoints, spec.horizon)?;

    let mut attr_rng = realization_rng(spec.seed, 0);
    let mut households: Vec<Household> = (0..spec.households())
        .map(|k| {
            let p = Point::new((k % spec.side) as f64 * spec.spacing_m, (k / spec.side) as f64 * spec.spacing_m);
            draw_household(format!("s{k:05}"), p, &mut attr_rng)
        })
        .collect();
    let roads = block_roads(spec.side, spec.rows.unwrap_or(spec.side), spec.spacing_m)?;
    let points: Vec<Point> = households.iter().map(Household::location).collect();
    let network = build_network(&points, spec.metric, spec.tau_d_km, Some(&roads))?;
    let all: Vec<usize> = (0..households.len()).collect();
    let standardizer = Standardizer::fit(&households, &spec.covariates, &all);
    let covariates = standardizer.transform(&households);

    let mut sim_rng = realization_rng(spec.seed, 1);
    let timeline = generate_synthetic(
        &network,
        &covariates,
        &params,
        spec.study_start,
        spec.horizon,
        &ExposedLag::Fixed(spec.lag),
        &mut sim_rng,
    );
    for (i, h) in households.iter_mut().enumerate() {
        if let Some(e) = timeline.exposed[i] {
            h.application = Some(YearMonth::from_index(spec.study_start, e));
            h.completion = Some(YearMonth::from_index(spec.study_start, e + spec.lag as i32));
        }
    }
    let activations = timeline.exposed.iter().flatten().count();
    let ids = households.iter().map(|h| h.id.clone()).collect();
    let n = households.len();
    let cohort = Cohort::new(ids, timeline, covariates, vec![true; n])?.with_standardizer(standardizer.clone());
    Ok(SyntheticData {
        manifest: SynthManifest {
            spec: spec.clone(),
            households: n,
            activations,
            network_fingerprint: network.fingerprint(),
            standardizer,
        },
        households,
        roads,
        network,
        cohort,
    })
}
