//! The `peerspread` batch front end.
//!
//! Every subcommand reads one JSON run configuration, writes CSV reports
//! and a `manifest.json` into the output directory, and exits nonzero with
//! a one-line diagnostic on failure. Relative paths in the configuration
//! are resolved against the configuration file's directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::epimodel::{Cohort, Standardizer, TauR};
use crate::geonet::{build_network, distance_regression, Metric, PeerNetwork, Point, RoadGraph};
use crate::glm::{fit_logistic, participation_data, FeatureScaling, LogitConfig};
use crate::inference::{compare_models, fit_mle, FitConfig, FitResult, ModelKind};
use crate::ingest::{
    discretize_events, load_households, select_neighborhood, Covariate, Household, LoadReport, NeighborhoodSample,
    PreStudyRule, YearMonth,
};
use crate::simulate::{cross_validate, synthesize, CrossValidation, ExposedLag, PredictionReport, SimConfig, SynthSpec};
use crate::{Error, Result};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "PEERSPREAD_THREADS";

/// Months held out for prediction in generated synthetic configurations.
pub const PREDICT_WINDOW: i32 = 36;

#[derive(Debug, Parser)]
#[command(name = "peerspread", version, about = "Peer-effect inference on spatial household networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build peer networks and distance summaries.
    Netbuild(Common),
    /// Fit the epidemic model over the grid plus the endemic-only model.
    Fit(Common),
    /// Cross-validated Monte Carlo prediction.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Last training month (YYYY-MM).
        #[arg(long)]
        split: Option<YearMonth>,
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Generate a synthetic data bundle.
    Synth(Common),
    /// Logistic regression of eventual participation.
    Logit(Common),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadFiles {
    pub nodes: PathBuf,
    pub edges: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborhoodSpec {
    pub name: String,
    pub seed_id: String,
    pub core_radius_m: f64,
    pub buffer_radius_m: f64,
}

/// One grid cell: metric, τ_d in km, recovery window.
type Cell = (Metric, f64, TauR);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub metrics: Vec<Metric>,
    pub tau_d_km: Vec<f64>,
    pub tau_r: Vec<TauR>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Euclidean],
            tau_d_km: vec![0.1, 0.2, 0.3],
            tau_r: vec![TauR::Finite(1), TauR::Finite(4), TauR::Finite(6), TauR::Finite(12), TauR::Infinite],
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() || self.tau_d_km.is_empty() || self.tau_r.is_empty() {
            return Err(Error::Usage("grid needs at least one metric, tau_d_km and tau_r".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &m in &self.metrics {
            for &d in &self.tau_d_km {
                for &r in &self.tau_r {
                    out.push((m, d, r));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LagSpec {
    /// Resample lags observed in the training window.
    #[default]
    Empirical,
    Fixed(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSpec {
    pub split: Option<YearMonth>,
    pub realizations: usize,
    pub lag: LagSpec,
    /// Cells to predict with; defaults to the fit grid.
    pub grid: Option<GridSpec>,
}

impl Default for PredictSpec {
    fn default() -> Self {
        Self {
            split: None,
            realizations: 100,
            lag: LagSpec::Empirical,
            grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LogitSpec {
    /// Defaults to the top-level covariates.
    pub covariates: Option<Vec<Covariate>>,
    pub config: LogitConfig,
}

/// The JSON run configuration shared by all subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub households: Option<PathBuf>,
    pub roads: Option<RoadFiles>,
    pub study_start: Option<YearMonth>,
    pub study_end: Option<YearMonth>,
    pub pre_study_rule: PreStudyRule,
    /// Empty means a single neighborhood `all` with every household as core.
    pub neighborhoods: Vec<NeighborhoodSpec>,
    pub covariates: Vec<Covariate>,
    /// First month of each baseline segment after the first.
    pub breakpoints: Vec<YearMonth>,
    pub grid: GridSpec,
    /// Optimizer settings; model, recovery window and breakpoints are set per cell.
    pub fit: FitConfig,
    pub predict: PredictSpec,
    pub synth: Option<SynthSpec>,
    pub logit: Option<LogitSpec>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Resolved invocation: configuration plus flag overrides.
struct Run {
    command: &'static str,
    config: RunConfig,
    config_path: PathBuf,
    base: PathBuf,
    seed: u64,
    out: PathBuf,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &'static str, common: &Common) -> Result<Self> {
        let text = fs::read_to_string(&common.config).map_err(io_err(&common.config))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Usage(format!("config {}: {e}", common.config.display())))?;
        let base = common.config.parent().map(Path::to_path_buf).unwrap_or_default();
        let seed = common.seed.or(config.seed).unwrap_or(0);
        let out = match (&common.out, &config.out) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => base.join(o),
            (None, None) => base.join("out"),
        };
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        Ok(Self {
            command,
            config,
            config_path: common.config.clone(),
            base,
            seed,
            out,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, label: &str, relative: &Path) -> PathBuf {
        let path = self.base.join(relative);
        self.inputs.push((label.to_string(), path.clone()));
        path
    }

    fn output(&mut self, relative: &str) -> Result<PathBuf> {
        let path = self.out.join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        self.outputs.push(relative.to_string());
        Ok(path)
    }

    fn write_text(&mut self, relative: &str, text: &str) -> Result<()> {
        let path = self.output(relative)?;
        fs::write(&path, text).map_err(io_err(&path))
    }

    fn write_json(&mut self, relative: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(relative, &text)
    }

    fn write_csv(&mut self, relative: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.output(relative)?;
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(io_err(&path))?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let mut inputs = BTreeMap::new();
        inputs.insert("config".to_string(), json!({"path": self.config_path.display().to_string(), "sha256": sha256_file(&self.config_path)?}));
        for (label, path) in &self.inputs {
            let rel = path.strip_prefix(&self.base).unwrap_or(path);
            inputs.insert(label.clone(), json!({"path": rel.display().to_string(), "sha256": sha256_file(path)?}));
        }
        self.outputs.sort();
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "inputs": inputs,
            "outputs": self.outputs,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.out.join("manifest.json");
        fs::write(&path, text).map_err(io_err(&path))
    }

    fn window(&self) -> Result<(YearMonth, YearMonth)> {
        match (self.config.study_start, self.config.study_end) {
            (Some(s), Some(e)) => Ok((s, e)),
            _ => Err(Error::Usage("config needs study_start and study_end".into())),
        }
    }

    fn households(&mut self) -> Result<(Vec<Household>, LoadReport)> {
        let rel = self
            .config
            .households
            .clone()
            .ok_or_else(|| Error::Usage("config needs a households file".into()))?;
        let path = self.input("households", &rel);
        let table = load_households(&path)?;
        Ok((table.analysis_set(), table.report()))
    }

    fn roads(&mut self, required: bool) -> Result<Option<RoadGraph>> {
        match self.config.roads.clone() {
            Some(files) => {
                let nodes = self.input("road_nodes", &files.nodes);
                let edges = self.input("road_edges", &files.edges);
                Ok(Some(RoadGraph::load(nodes, edges)?))
            }
            None if required => Err(Error::Usage("metric on_road requires a roads entry in the config".into())),
            None => Ok(None),
        }
    }

    fn breakpoints(&self, start: YearMonth, horizon: u32) -> Result<Vec<i32>> {
        let b: Vec<i32> = self.config.breakpoints.iter().map(|m| m.index_from(start)).collect();
        crate::epimodel::validate_breakpoints(&b, horizon)?;
        Ok(b)
    }
}

/// One neighborhood ready for modelling: members in core-then-buffer order.
struct Area {
    name: String,
    ids: Vec<String>,
    points: Vec<Point>,
    cohort: Cohort,
}

fn areas(run: &Run, households: &[Household], start: YearMonth, end: YearMonth) -> Result<Vec<Area>> {
    let samples: Vec<(String, NeighborhoodSample)> = if run.config.neighborhoods.is_empty() {
        vec![("all".to_string(), NeighborhoodSample::everything(households))]
    } else {
        run.config
            .neighborhoods
            .iter()
            .map(|n| Ok((n.name.clone(), select_neighborhood(households, &n.seed_id, n.core_radius_m, n.buffer_radius_m)?)))
            .collect::<Result<_>>()?
    };
    let timeline = discretize_events(households, start, end, run.config.pre_study_rule)?;
    samples
        .into_iter()
        .map(|(name, sample)| {
            let members = sample.members();
            let subset: Vec<Household> = members.iter().map(|&i| households[i].clone()).collect();
            let core: Vec<usize> = (0..sample.core.len()).collect();
            let standardizer = Standardizer::fit(&subset, &run.config.covariates, &core);
            let scored = (0..members.len()).map(|k| k < sample.core.len()).collect();
            let ids: Vec<String> = subset.iter().map(|h| h.id.clone()).collect();
            let cohort = Cohort::new(
                ids.clone(),
                timeline.subset(&members),
                standardizer.transform(&subset),
                scored,
            )?
            .with_standardizer(standardizer);
            Ok(Area {
                name,
                points: subset.iter().map(Household::location).collect(),
                ids,
                cohort,
            })
        })
        .collect()
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn uses_on_road(grids: &[&GridSpec]) -> bool {
    grids.iter().any(|g| g.metrics.contains(&Metric::OnRoad))
}

/// Networks for every (metric, τ_d) pair of a grid, in grid order.
fn networks(area: &Area, grid: &GridSpec, roads: Option<&RoadGraph>) -> Result<BTreeMap<(Metric, String), PeerNetwork>> {
    let mut out = BTreeMap::new();
    for &m in &grid.metrics {
        for &d in &grid.tau_d_km {
            let net = build_network(&area.points, m, d, roads)?;
            out.insert((m, d.to_string()), net);
        }
    }
    Ok(out)
}

fn cmd_netbuild(mut run: Run) -> Result<Run> {
    run.config.grid.validate()?;
    let (households, report) = run.households()?;
    let roads = run.roads(uses_on_road(&[&run.config.grid]))?;
    let (start, end) = run.window()?;
    let areas = areas(&run, &households, start, end)?;
    let mut summary = BTreeMap::new();
    for area in &areas {
        let nets = networks(area, &run.config.grid, roads.as_ref())?;
        let mut entries = Vec::new();
        for ((metric, tau), net) in &nets {
            let file = format!("{}/edges_{metric}_{tau}.csv", area.name);
            let mut buf = Vec::new();
            net.write_edges_csv(&area.ids, &mut buf)?;
            run.write_text(&file, &String::from_utf8_lossy(&buf))?;
            let degrees: Vec<usize> = (0..net.len()).map(|i| net.degree(i)).collect();
            entries.push(json!({
                "metric": metric,
                "tau_d_km": net.tau_d_km,
                "nodes": net.len(),
                "edges": net.edges().len(),
                "mean_degree": if degrees.is_empty() { 0.0 } else { degrees.iter().sum::<usize>() as f64 / degrees.len() as f64 },
                "degree_histogram": net.degree_histogram(),
                "fingerprint": net.fingerprint(),
                "edges_file": file,
            }));
        }
        let regression = match &roads {
            Some(g) if area.points.len() >= 2 => match distance_regression(&area.points, g) {
                Ok(r) => serde_json::to_value(r)?,
                Err(e) => json!({"error": e.to_string()}),
            },
            _ => serde_json::Value::Null,
        };
        summary.insert(area.name.clone(), json!({"networks": entries, "distance_regression": regression}));
    }
    run.write_json(
        "network_summary.json",
        &json!({"load_report": report.to_string(), "neighborhoods": summary}),
    )?;
    Ok(run)
}

fn fit_config(run: &Run, model: ModelKind, tau_r: TauR, breakpoints: &[i32]) -> FitConfig {
    FitConfig {
        model,
        tau_r,
        breakpoints: breakpoints.to_vec(),
        seed: run.seed,
        ..run.config.fit.clone()
    }
}

const FIT_HEADER: [&str; 11] = [
    "neighborhood",
    "metric",
    "tau_d",
    "tau_R",
    "alpha",
    "se_alpha",
    "loglik",
    "k",
    "aic",
    "converged",
    "verdict",
];

fn fit_row(area: &str, fit: &FitResult, verdict: &str) -> Vec<String> {
    let fp = &fit.fingerprint;
    vec![
        area.to_string(),
        fp.metric.map_or_else(|| "none".to_string(), |m| m.to_string()),
        opt_num(fp.tau_d_km),
        fp.tau_r.map(|t| t.to_string()).unwrap_or_default(),
        num(fit.alpha),
        opt_num(fit.se_alpha),
        num(fit.loglik),
        fit.k.to_string(),
        num(fit.aic),
        fit.converged.to_string(),
        verdict.to_string(),
    ]
}

fn cmd_fit(mut run: Run) -> Result<Run> {
    run.config.grid.validate()?;
    let (households, _) = run.households()?;
    let roads = run.roads(uses_on_road(&[&run.config.grid]))?;
    let (start, end) = run.window()?;
    let areas = areas(&run, &households, start, end)?;
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for area in &areas {
        let breakpoints = run.breakpoints(start, area.cohort.horizon())?;
        let nets = networks(area, &run.config.grid, roads.as_ref())?;
        let cells = run.config.grid.cells();
        let mut jobs: Vec<(Option<Cell>, FitConfig)> = cells
            .iter()
            .map(|&(m, d, r)| (Some((m, d, r)), fit_config(&run, ModelKind::Epidemic, r, &breakpoints)))
            .collect();
        jobs.push((None, fit_config(&run, ModelKind::EndemicOnly, TauR::Infinite, &breakpoints)));
        let empty = PeerNetwork::empty(area.cohort.len());
        let results: Vec<std::result::Result<FitResult, String>> = jobs
            .par_iter()
            .map(|(cell, cfg)| {
                let net = match cell {
                    Some((m, d, _)) => &nets[&(*m, d.to_string())],
                    None => &empty,
                };
                fit_mle(&area.cohort, net, cfg).map_err(|e| e.to_string())
            })
            .collect();
        let fits: Vec<FitResult> = results.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
        match compare_models(&fits) {
            Ok(cmp) => {
                let verdict = cmp.verdict.to_string();
                for r in &cmp.ranking {
                    let fit = &fits[r.index];
                    rows.push(fit_row(&area.name, fit, &verdict));
                    details.push(json!({
                        "neighborhood": area.name,
                        "rank": details.iter().filter(|d: &&serde_json::Value| d["neighborhood"] == area.name.as_str()).count() + 1,
                        "delta_aic": r.delta_aic,
                        "alpha_stars": r.alpha_stars,
                        "fit": fit,
                    }));
                }
            }
            Err(e) => {
                for fit in &fits {
                    rows.push(fit_row(&area.name, fit, &format!("error: {e}")));
                }
            }
        }
        for ((cell, _), res) in jobs.iter().zip(&results) {
            if let Err(e) = res {
                let (m, d, r) = match cell {
                    Some((m, d, r)) => (m.to_string(), num(*d), r.to_string()),
                    None => ("none".to_string(), String::new(), String::new()),
                };
                rows.push(vec![
                    area.name.clone(),
                    m,
                    d,
                    r,
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    "false".into(),
                    format!("error: {e}"),
                ]);
            }
        }
    }
    run.write_csv("fit_report.csv", &FIT_HEADER, &rows)?;
    run.write_json("fits.json", &details)?;
    Ok(run)
}

const PREDICT_HEADER: [&str; 13] = [
    "neighborhood",
    "model",
    "metric",
    "tau_d",
    "tau_R",
    "alpha",
    "rmse",
    "I_T_sim",
    "sd_I_T",
    "I_T_obs",
    "realizations",
    "final_diff_significant",
    "note",
];

fn write_curve(run: &mut Run, file: &str, report: &PredictionReport, start: YearMonth) -> Result<()> {
    let rows: Vec<Vec<String>> = (0..report.months.len())
        .map(|k| {
            vec![
                YearMonth::from_index(start, report.months[k]).to_string(),
                num(report.mean[k]),
                num(report.sd[k]),
                num(report.observed[k]),
            ]
        })
        .collect();
    run.write_csv(file, &["month", "I_sim_mean", "I_sim_sd", "I_obs"], &rows)
}

fn cmd_predict(mut run: Run, split: Option<YearMonth>, realizations: Option<usize>) -> Result<Run> {
    let grid = run.config.predict.grid.clone().unwrap_or_else(|| run.config.grid.clone());
    grid.validate()?;
    let (households, _) = run.households()?;
    let roads = run.roads(uses_on_road(&[&grid]))?;
    let (start, end) = run.window()?;
    let split = split
        .or(run.config.predict.split)
        .ok_or_else(|| Error::Usage("predict needs a split month (predict.split or --split)".into()))?;
    let realizations = realizations.unwrap_or(run.config.predict.realizations);
    let areas = areas(&run, &households, start, end)?;
    let split_index = split.index_from(start);
    if split_index < 1 {
        return Err(Error::Usage(format!("split {split} precedes the study start {start}")));
    }
    let mut rows = Vec::new();
    for area in &areas {
        let breakpoints = run.breakpoints(start, area.cohort.horizon())?;
        let nets = networks(area, &grid, roads.as_ref())?;
        let train = area.cohort.truncate(split_index as u32);
        let sim = SimConfig {
            realizations,
            seed: run.seed,
            lag: match run.config.predict.lag {
                LagSpec::Fixed(l) => ExposedLag::Fixed(l),
                LagSpec::Empirical => ExposedLag::empirical(&train.timeline, 2),
            },
        };
        let cells = grid.cells();
        let results: Vec<crate::Result<CrossValidation>> = cells
            .par_iter()
            .map(|&(m, d, r)| {
                let cfg = fit_config(&run, ModelKind::Epidemic, r, &breakpoints);
                Ok(cross_validate(&area.cohort, &nets[&(m, d.to_string())], split_index as u32, &cfg, &sim)?)
            })
            .collect();
        let mut area_rows: Vec<(f64, String, Vec<String>)> = Vec::new();
        let single = (realizations == 1).then_some("single realization: SD undefined");
        let mut endemic_done = false;
        for (&(m, d, r), res) in cells.iter().zip(results) {
            let cv = res?;
            let mut notes: Vec<&str> = cv.note.iter().map(String::as_str).chain(single).collect();
            let label = format!("epidemic_{m}_{d}_{r}");
            let file = format!("{}/curve_{label}.csv", area.name);
            write_curve(&mut run, &file, &cv.epidemic, start)?;
            let significant = cv.final_difference_significant.to_string();
            area_rows.push((
                cv.epidemic.rmse,
                label,
                vec![
                    area.name.clone(),
                    "epidemic".into(),
                    m.to_string(),
                    num(d),
                    r.to_string(),
                    num(cv.epidemic_fit.alpha),
                    num(cv.epidemic.rmse),
                    num(cv.epidemic.final_mean),
                    num(cv.epidemic.final_sd),
                    num(cv.epidemic.final_observed),
                    realizations.to_string(),
                    significant.clone(),
                    notes.join("; "),
                ],
            ));
            if !endemic_done {
                endemic_done = true;
                notes.retain(|n| Some(*n) == single);
                let file = format!("{}/curve_endemic.csv", area.name);
                write_curve(&mut run, &file, &cv.endemic, start)?;
                area_rows.push((
                    cv.endemic.rmse,
                    "endemic".into(),
                    vec![
                        area.name.clone(),
                        "endemic".into(),
                        "none".into(),
                        String::new(),
                        String::new(),
                        "0".into(),
                        num(cv.endemic.rmse),
                        num(cv.endemic.final_mean),
                        num(cv.endemic.final_sd),
                        num(cv.endemic.final_observed),
                        realizations.to_string(),
                        String::new(),
                        notes.join("; "),
                    ],
                ));
            }
        }
        area_rows.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        rows.extend(area_rows.into_iter().map(|(_, _, r)| r));
    }
    run.write_csv("predict_report.csv", &PREDICT_HEADER, &rows)?;
    Ok(run)
}

fn cmd_synth(mut run: Run) -> Result<Run> {
    let mut spec = run.config.synth.clone().unwrap_or_default();
    spec.seed = run.seed;
    let data = synthesize(&spec)?;
    let mut buf = Vec::new();
    crate::ingest::write_households(&data.households, &mut buf)?;
    run.write_text("households.csv", &String::from_utf8_lossy(&buf))?;
    let mut buf = Vec::new();
    data.roads.write_nodes(&mut buf)?;
    run.write_text("road_nodes.csv", &String::from_utf8_lossy(&buf))?;
    let mut buf = Vec::new();
    data.roads.write_edges(&mut buf)?;
    run.write_text("road_edges.csv", &String::from_utf8_lossy(&buf))?;
    run.write_json("synth_manifest.json", &data.manifest)?;

    // a configuration that fits and predicts the bundle as generated
    let at = |i: i32| YearMonth::from_index(spec.study_start, i);
    let bundle = RunConfig {
        households: Some("households.csv".into()),
        roads: Some(RoadFiles {
            nodes: "road_nodes.csv".into(),
            edges: "road_edges.csv".into(),
        }),
        study_start: Some(spec.study_start),
        study_end: Some(at(spec.horizon as i32)),
        covariates: spec.covariates.clone(),
        breakpoints: spec.breakpoints.iter().map(|&b| at(b)).collect(),
        grid: GridSpec {
            metrics: vec![spec.metric],
            tau_d_km: vec![spec.tau_d_km],
            tau_r: vec![spec.tau_r],
        },
        predict: PredictSpec {
            split: Some(at((spec.horizon as i32 - PREDICT_WINDOW).max(spec.horizon as i32 / 2).max(1))),
            lag: LagSpec::Fixed(spec.lag),
            ..PredictSpec::default()
        },
        seed: Some(spec.seed),
        ..RunConfig::default()
    };
    run.write_json("config.json", &bundle)?;
    Ok(run)
}

fn cmd_logit(mut run: Run) -> Result<Run> {
    let (households, _) = run.households()?;
    let (_, end) = run.window()?;
    let spec = run.config.logit.clone().unwrap_or_default();
    let covariates = spec.covariates.unwrap_or_else(|| run.config.covariates.clone());
    if covariates.is_empty() {
        return Err(Error::Usage("logit needs at least one covariate".into()));
    }
    let mut in_window = households.clone();
    for h in &mut in_window {
        if h.application.is_some_and(|a| a > end) {
            h.application = None;
        }
    }
    let (rows, labels) = participation_data(&in_window, &covariates);
    let scaling = FeatureScaling::reporting_units(&in_window, &covariates);
    let fit = fit_logistic(&rows, &labels, scaling, &spec.config)?;
    let mut table: Vec<Vec<String>> = fit
        .coefficient_table()
        .into_iter()
        .map(|(t, b, se, s)| vec![t, num(b), num(se), s.to_string()])
        .collect();
    table.push(vec!["N".into(), fit.n.to_string(), String::new(), String::new()]);
    table.push(vec!["pseudo_R2".into(), num(fit.pseudo_r2), String::new(), "mcfadden".into()]);
    run.write_csv("logit_report.csv", &["term", "estimate", "se", "stars"], &table)?;
    run.write_json("logit_fit.json", &fit)?;
    Ok(run)
}

/// Runs one invocation from command-line arguments (including the program name).
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    let run = match &cli.command {
        Command::Netbuild(c) => cmd_netbuild(Run::new("netbuild", c)?)?,
        Command::Fit(c) => cmd_fit(Run::new("fit", c)?)?,
        Command::Predict {
            common,
            split,
            realizations,
        } => cmd_predict(Run::new("predict", common)?, *split, *realizations)?,
        Command::Synth(c) => cmd_synth(Run::new("synth", c)?)?,
        Command::Logit(c) => cmd_logit(Run::new("logit", c)?)?,
    };
    run.finish()
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("peerspread: {THREADS_ENV} must be a positive integer, got `{v}`");
                return 2;
            }
        }
    }
    let args: Vec<OsString> = std::env::args_os().collect();
    if args.len() <= 1 || args.iter().skip(1).any(|a| a == "--help" || a == "-h" || a == "--version" || a == "-V") {
        // let clap print help/version text itself
        if let Err(e) = Cli::try_parse_from(&args) {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    }
    match run(args) {
        Ok(()) => 0,
        Err(Error::Usage(msg)) => {
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("peerspread: {line}");
            2
        }
        Err(e) => {
            eprintln!("peerspread: {e}");
            1
        }
    }
}
