//! Household records, month discretization and neighborhood sampling.
//!
//! Dates are calendar months (`YYYY-MM`). A study window `[start, end]` maps
//! them onto 1-based month indices, so an application filed in the start
//! month has index 1. Events before the window keep their (zero or
//! negative) offsets so that pre-study adopters can still influence their
//! neighbors; events after the window are never observed (`None`).

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geonet::{euclidean_distance, Point};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: duplicate household id `{id}`")]
    DuplicateId { line: u64, id: String },
    #[error("invalid month `{0}`, expected YYYY-MM")]
    BadMonth(String),
    #[error("study start {start} is after study end {end}")]
    EmptyWindow { start: YearMonth, end: YearMonth },
    #[error("unknown seed household `{0}`")]
    UnknownSeed(String),
    #[error("radii must be positive (core {core}, buffer {buffer})")]
    BadRadius { core: f64, buffer: f64 },
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    year: i32,
    month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        (1..=12).contains(&month).then_some(Self { year, month })
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u32 {
        self.month
    }

    fn ordinal(self) -> i64 {
        i64::from(self.year) * 12 + i64::from(self.month) - 1
    }

    fn from_ordinal(ordinal: i64) -> Self {
        Self {
            year: ordinal.div_euclid(12) as i32,
            month: ordinal.rem_euclid(12) as u32 + 1,
        }
    }

    /// Signed number of months from `origin` to `self`.
    pub fn months_since(self, origin: YearMonth) -> i64 {
        self.ordinal() - origin.ordinal()
    }

    pub fn add_months(self, months: i64) -> Self {
        Self::from_ordinal(self.ordinal() + months)
    }

    /// 1-based month index of `self` in a window starting at `start`.
    pub fn index_from(self, start: YearMonth) -> i32 {
        (self.months_since(start) + 1) as i32
    }

    /// Calendar month of 1-based index `index` in a window starting at `start`.
    pub fn from_index(start: YearMonth, index: i32) -> Self {
        start.add_months(i64::from(index) - 1)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IngestError::BadMonth(s.to_string());
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        YearMonth::new(year, month).ok_or_else(bad)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One parcel with its covariates and (possibly absent) program events.
#[derive(Debug, Clone, PartialEq)]
pub struct Household {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub build_year: i32,
    pub value: f64,
    pub outdoor_area: f64,
    pub has_pool: bool,
    pub ownership_pct: f64,
    pub application: Option<YearMonth>,
    pub completion: Option<YearMonth>,
    pub multi_conversion: bool,
}

impl Household {
    pub fn location(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn pre2003(&self) -> bool {
        self.build_year <= 2003
    }

    /// Reason this record cannot enter the analysis set, if any.
    pub fn validate(&self) -> Option<String> {
        if !(self.x.is_finite() && self.y.is_finite()) {
            return Some("non-finite coordinates".into());
        }
        if !(self.outdoor_area >= 0.0) {
            return Some(format!("negative outdoor_area {}", self.outdoor_area));
        }
        if !(self.value >= 0.0) {
            return Some(format!("negative value {}", self.value));
        }
        if !(0.0..=1.0).contains(&self.ownership_pct) {
            return Some(format!("ownership_pct {} outside [0,1]", self.ownership_pct));
        }
        match (self.application, self.completion) {
            (None, Some(_)) => Some("completion without application".into()),
            (Some(a), Some(c)) if a > c => Some(format!("application {a} after completion {c}")),
            _ => None,
        }
    }
}

/// Household covariates usable in the hazard and logistic models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    BuildYear,
    Value,
    OutdoorArea,
    HasPool,
    OwnershipPct,
    Pre2003,
}

impl Covariate {
    pub const ALL: [Covariate; 6] = [
        Covariate::BuildYear,
        Covariate::Value,
        Covariate::OutdoorArea,
        Covariate::HasPool,
        Covariate::OwnershipPct,
        Covariate::Pre2003,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::BuildYear => "build_year",
            Covariate::Value => "value",
            Covariate::OutdoorArea => "outdoor_area",
            Covariate::HasPool => "has_pool",
            Covariate::OwnershipPct => "ownership_pct",
            Covariate::Pre2003 => "pre2003",
        }
    }

    /// Binary indicators enter models as 0/1 and are never rescaled.
    pub fn is_binary(self) -> bool {
        matches!(self, Covariate::HasPool | Covariate::Pre2003)
    }

    pub fn extract(self, h: &Household) -> f64 {
        match self {
            Covariate::BuildYear => f64::from(h.build_year),
            Covariate::Value => h.value,
            Covariate::OutdoorArea => h.outdoor_area,
            Covariate::HasPool => f64::from(u8::from(h.has_pool)),
            Covariate::OwnershipPct => h.ownership_pct,
            Covariate::Pre2003 => f64::from(u8::from(h.pre2003())),
        }
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Covariate {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Covariate::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| IngestError::UnknownCovariate(s.to_string()))
    }
}

pub const HOUSEHOLD_HEADER: [&str; 11] = [
    "id",
    "x",
    "y",
    "build_year",
    "value",
    "outdoor_area",
    "has_pool",
    "ownership_pct",
    "application_date",
    "completion_date",
    "multi_conversion",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowStatus {
    Included,
    MultiConversion,
    Invalid(String),
}

/// Counts reconciling a household file against the analysis set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub excluded_by_flag: usize,
    pub excluded_invalid: usize,
}

impl LoadReport {
    pub fn included(&self) -> usize {
        self.loaded - self.excluded_by_flag - self.excluded_invalid
    }
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "loaded={} excluded_by_flag={} excluded_invalid={}",
            self.loaded, self.excluded_by_flag, self.excluded_invalid
        )
    }
}

/// Every parsed row, with exclusions flagged rather than dropped.
#[derive(Debug, Clone)]
pub struct HouseholdTable {
    pub households: Vec<Household>,
    pub status: Vec<RowStatus>,
}

impl HouseholdTable {
    pub fn report(&self) -> LoadReport {
        let mut report = LoadReport {
            loaded: self.households.len(),
            ..LoadReport::default()
        };
        for status in &self.status {
            match status {
                RowStatus::Included => {}
                RowStatus::MultiConversion => report.excluded_by_flag += 1,
                RowStatus::Invalid(_) => report.excluded_invalid += 1,
            }
        }
        report
    }

    /// Households that enter the analysis.
    pub fn analysis_set(&self) -> Vec<Household> {
        self.households
            .iter()
            .zip(&self.status)
            .filter(|(_, s)| **s == RowStatus::Included)
            .map(|(h, _)| h.clone())
            .collect()
    }
}

pub fn load_households(path: impl AsRef<Path>) -> Result<HouseholdTable, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_households(file)
}

fn parse_field<T: FromStr>(record: &csv::StringRecord, col: usize, line: u64) -> Result<T, IngestError> {
    let raw = record.get(col).unwrap_or("").trim();
    raw.parse().map_err(|_| IngestError::Malformed {
        line,
        message: format!("cannot parse {} from `{raw}`", HOUSEHOLD_HEADER[col]),
    })
}

fn parse_bool(record: &csv::StringRecord, col: usize, line: u64) -> Result<bool, IngestError> {
    match record.get(col).unwrap_or("").trim() {
        "true" | "1" | "TRUE" | "True" => Ok(true),
        "false" | "0" | "FALSE" | "False" => Ok(false),
        other => Err(IngestError::Malformed {
            line,
            message: format!("cannot parse {} from `{other}`", HOUSEHOLD_HEADER[col]),
        }),
    }
}

fn parse_month(record: &csv::StringRecord, col: usize, line: u64) -> Result<Option<YearMonth>, IngestError> {
    let raw = record.get(col).unwrap_or("").trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse().map(Some).map_err(|_| IngestError::Malformed {
        line,
        message: format!("unparseable {} `{raw}`", HOUSEHOLD_HEADER[col]),
    })
}

pub fn read_households<R: Read>(reader: R) -> Result<HouseholdTable, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(HOUSEHOLD_HEADER.iter().copied()) {
        return Err(IngestError::Header {
            expected: HOUSEHOLD_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }

    let mut households = Vec::new();
    let mut status = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            IngestError::Malformed {
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(IngestError::Malformed {
                line,
                message: "empty id".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(IngestError::DuplicateId { line, id });
        }
        let h = Household {
            id,
            x: parse_field(&record, 1, line)?,
            y: parse_field(&record, 2, line)?,
            build_year: parse_field(&record, 3, line)?,
            value: parse_field(&record, 4, line)?,
            outdoor_area: parse_field(&record, 5, line)?,
            has_pool: parse_bool(&record, 6, line)?,
            ownership_pct: parse_field(&record, 7, line)?,
            application: parse_month(&record, 8, line)?,
            completion: parse_month(&record, 9, line)?,
            multi_conversion: parse_bool(&record, 10, line)?,
        };
        status.push(if h.multi_conversion {
            RowStatus::MultiConversion
        } else if let Some(reason) = h.validate() {
            RowStatus::Invalid(reason)
        } else {
            RowStatus::Included
        });
        households.push(h);
    }
    Ok(HouseholdTable { households, status })
}

pub fn write_households<W: Write>(households: &[Household], writer: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HOUSEHOLD_HEADER)?;
    let month = |m: Option<YearMonth>| m.map(|m| m.to_string()).unwrap_or_default();
    for h in households {
        w.write_record([
            h.id.clone(),
            h.x.to_string(),
            h.y.to_string(),
            h.build_year.to_string(),
            h.value.to_string(),
            h.outdoor_area.to_string(),
            h.has_pool.to_string(),
            h.ownership_pct.to_string(),
            month(h.application),
            month(h.completion),
            h.multi_conversion.to_string(),
        ])?;
    }
    w.flush().map_err(|source| IngestError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

/// How completions before the study window are treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreStudyRule {
    /// Keep the true (non-positive) month offsets: a pre-study adopter is
    /// infectious at the window start if it completed within the recovery
    /// window, recovered otherwise.
    #[default]
    KeepHistory,
    /// Pre-study completers start recovered and never influence anyone.
    Recovered,
}

/// Month-indexed event times over the study window `1..=horizon`.
///
/// `None` means the event is not observed in the window (`∞`). Values `<= 0`
/// are events before the window, i.e. the household is not susceptible at
/// the start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub study_start: YearMonth,
    pub horizon: u32,
    pub exposed: Vec<Option<i32>>,
    pub infectious: Vec<Option<i32>>,
}

impl EventTimeline {
    pub fn len(&self) -> usize {
        self.exposed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exposed.is_empty()
    }

    pub fn study_end(&self) -> YearMonth {
        YearMonth::from_index(self.study_start, self.horizon as i32)
    }

    /// Susceptible at month 0.
    pub fn initially_susceptible(&self, i: usize) -> bool {
        self.exposed[i].is_none_or(|t| t >= 1)
    }

    /// Has applied (state E, I or R) at the end of month `t`.
    pub fn participating_at(&self, i: usize, t: i32) -> bool {
        self.exposed[i].is_some_and(|e| e <= t)
    }

    /// Observation truncated to months `..= split`; later events become `None`.
    pub fn truncate(&self, split: u32) -> EventTimeline {
        let cut = |t: Option<i32>| t.filter(|&t| t <= split as i32);
        EventTimeline {
            study_start: self.study_start,
            horizon: split,
            exposed: self.exposed.iter().map(|&t| cut(t)).collect(),
            infectious: self.infectious.iter().map(|&t| cut(t)).collect(),
        }
    }

    /// Restriction to the given household indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> EventTimeline {
        EventTimeline {
            study_start: self.study_start,
            horizon: self.horizon,
            exposed: indices.iter().map(|&i| self.exposed[i]).collect(),
            infectious: indices.iter().map(|&i| self.infectious[i]).collect(),
        }
    }
}

/// Maps application/completion months onto window indices.
pub fn discretize_events(
    households: &[Household],
    study_start: YearMonth,
    study_end: YearMonth,
    rule: PreStudyRule,
) -> Result<EventTimeline, IngestError> {
    if study_start > study_end {
        return Err(IngestError::EmptyWindow {
            start: study_start,
            end: study_end,
        });
    }
    let index = |m: Option<YearMonth>| {
        m.filter(|&m| m <= study_end).map(|m| m.index_from(study_start))
    };
    let mut exposed = Vec::with_capacity(households.len());
    let mut infectious = Vec::with_capacity(households.len());
    for h in households {
        let e = index(h.application);
        let mut i = index(h.completion);
        // Application after the window hides the completion too.
        if e.is_none() {
            i = None;
        }
        if rule == PreStudyRule::Recovered && i.is_some_and(|t| t <= 0) {
            i = None;
        }
        exposed.push(e);
        infectious.push(i);
    }
    Ok(EventTimeline {
        study_start,
        horizon: (study_end.months_since(study_start) + 1) as u32,
        exposed,
        infectious,
    })
}

/// Core households around a seed parcel plus the surrounding buffer ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSample {
    pub seed_id: String,
    pub core_radius: f64,
    pub buffer_radius: f64,
    /// Indices into the household slice, ascending.
    pub core: Vec<usize>,
    pub buffer: Vec<usize>,
}

impl NeighborhoodSample {
    /// Core indices followed by buffer indices; the order used for networks.
    pub fn members(&self) -> Vec<usize> {
        self.core.iter().chain(&self.buffer).copied().collect()
    }

    /// Every household in the slice as core, no buffer.
    pub fn everything(households: &[Household]) -> Self {
        Self {
            seed_id: String::new(),
            core_radius: f64::INFINITY,
            buffer_radius: 0.0,
            core: (0..households.len()).collect(),
            buffer: Vec::new(),
        }
    }
}

/// Closed core ball of `core_radius` around the seed; buffer ring
/// `(core_radius, core_radius + buffer_radius]`.
pub fn select_neighborhood(
    households: &[Household],
    seed_id: &str,
    core_radius: f64,
    buffer_radius: f64,
) -> Result<NeighborhoodSample, IngestError> {
    if !(core_radius > 0.0 && buffer_radius > 0.0) {
        return Err(IngestError::BadRadius {
            core: core_radius,
            buffer: buffer_radius,
        });
    }
    let seed = households
        .iter()
        .find(|h| h.id == seed_id)
        .ok_or_else(|| IngestError::UnknownSeed(seed_id.to_string()))?
        .location();
    let outer = core_radius + buffer_radius;
    let mut core = Vec::new();
    let mut buffer = Vec::new();
    for (i, h) in households.iter().enumerate() {
        let d = euclidean_distance(seed, h.location());
        if d <= core_radius {
            core.push(i);
        } else if d <= outer {
            buffer.push(i);
        }
    }
    Ok(NeighborhoodSample {
        seed_id: seed_id.to_string(),
        core_radius,
        buffer_radius,
        core,
        buffer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ym(s: &str) -> YearMonth {
        s.parse().unwrap()
    }

    fn house(id: &str, x: f64, y: f64) -> Household {
        Household {
            id: id.into(),
            x,
            y,
            build_year: 1990,
            value: 50_000.0,
            outdoor_area: 400.0,
            has_pool: false,
            ownership_pct: 0.7,
            application: None,
            completion: None,
            multi_conversion: false,
        }
    }

    const HEADER: &str = "id,x,y,build_year,value,outdoor_area,has_pool,ownership_pct,application_date,completion_date,multi_conversion\n";

    #[test]
    fn three_clean_rows() {
        let csv = format!(
            "{HEADER}a,0,0,1990,1000,10,false,0.5,2004-03,2004-05,false\n\
             b,1,0,2005,1000,10,true,0.5,,,false\n\
             c,2,0,1980,1000,10,0,1,2010-01,,0\n"
        );
        let table = read_households(csv.as_bytes()).unwrap();
        assert_eq!(table.households.len(), 3);
        assert_eq!(table.report(), LoadReport { loaded: 3, excluded_by_flag: 0, excluded_invalid: 0 });
        assert!(table.households[1].has_pool);
        assert!(!table.households[1].pre2003());
    }

    #[test]
    fn multi_conversion_is_flagged_not_dropped() {
        let csv = format!("{HEADER}a,0,0,1990,1000,10,false,0.5,2004-03,2004-05,true\n");
        let table = read_households(csv.as_bytes()).unwrap();
        assert_eq!(table.households.len(), 1);
        assert_eq!(table.report().excluded_by_flag, 1);
        assert!(table.analysis_set().is_empty());
    }

    #[test]
    fn negative_area_is_invalid() {
        let csv = format!("{HEADER}a,0,0,1990,1000,-5,false,0.5,,,false\n");
        let table = read_households(csv.as_bytes()).unwrap();
        assert_eq!(table.report().excluded_invalid, 1);
        assert!(matches!(table.status[0], RowStatus::Invalid(_)));
        assert_eq!(table.report().to_string(), "loaded=1 excluded_by_flag=0 excluded_invalid=1");
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = format!("{HEADER}a,0,0,1990,1000,10,false,0.5,,,false\nb,zero,0,1990,1000,10,false,0.5,,,false\n");
        match read_households(csv.as_bytes()) {
            Err(IngestError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let csv = format!("{HEADER}a,0,0,1990,1000,10,false,0.5,2004-13,,false\n");
        assert!(matches!(read_households(csv.as_bytes()), Err(IngestError::Malformed { line: 2, .. })));
    }

    #[test]
    fn duplicate_id_and_header_errors() {
        let csv = format!("{HEADER}a,0,0,1990,1000,10,false,0.5,,,false\na,0,0,1990,1000,10,false,0.5,,,false\n");
        assert!(matches!(read_households(csv.as_bytes()), Err(IngestError::DuplicateId { line: 3, .. })));
        assert!(matches!(read_households("id,x\n".as_bytes()), Err(IngestError::Header { .. })));
        assert!(matches!(load_households("/nonexistent/households.csv"), Err(IngestError::Io { .. })));
    }

    #[test]
    fn month_offsets() {
        let start = ym("2004-01");
        let end = ym("2015-12");
        let mut a = house("a", 0.0, 0.0);
        a.application = Some(start);
        let b = house("b", 0.0, 0.0);
        let mut c = house("c", 0.0, 0.0);
        c.application = Some(ym("2004-04"));
        c.completion = Some(ym("2004-06"));
        let tl = discretize_events(&[a, b, c], start, end, PreStudyRule::KeepHistory).unwrap();
        assert_eq!(tl.horizon, 144);
        assert_eq!(tl.exposed, vec![Some(1), None, Some(4)]);
        assert_eq!(tl.infectious, vec![None, None, Some(6)]);
    }

    #[test]
    fn window_edges() {
        let start = ym("2004-01");
        let end = ym("2004-12");
        let mut early = house("early", 0.0, 0.0);
        early.application = Some(ym("2003-01"));
        early.completion = Some(ym("2003-06"));
        let mut late = house("late", 0.0, 0.0);
        late.application = Some(ym("2004-12"));
        late.completion = Some(ym("2005-02"));
        let mut after = house("after", 0.0, 0.0);
        after.application = Some(ym("2005-01"));
        after.completion = Some(ym("2005-02"));
        let hs = [early, late, after];
        let tl = discretize_events(&hs, start, end, PreStudyRule::KeepHistory).unwrap();
        assert_eq!(tl.exposed, vec![Some(-11), Some(12), None]);
        assert_eq!(tl.infectious, vec![Some(-6), None, None]);
        assert!(!tl.initially_susceptible(0));
        assert!(tl.initially_susceptible(1));
        let tl = discretize_events(&hs, start, end, PreStudyRule::Recovered).unwrap();
        assert_eq!(tl.infectious[0], None);
        assert!(discretize_events(&hs, end, start, PreStudyRule::KeepHistory).is_err());
    }

    #[test]
    fn truncation_hides_future() {
        let tl = EventTimeline {
            study_start: ym("2004-01"),
            horizon: 10,
            exposed: vec![Some(2), Some(5), Some(9)],
            infectious: vec![Some(4), Some(7), None],
        };
        let tr = tl.truncate(6);
        assert_eq!(tr.horizon, 6);
        assert_eq!(tr.exposed, vec![Some(2), Some(5), None]);
        assert_eq!(tr.infectious, vec![Some(4), None, None]);
    }

    #[test]
    fn neighborhood_seed_alone() {
        let hs = [house("s", 10.0, 10.0)];
        let s = select_neighborhood(&hs, "s", 1500.0, 500.0).unwrap();
        assert_eq!(s.core, vec![0]);
        assert!(s.buffer.is_empty());
        assert!(matches!(select_neighborhood(&hs, "x", 1.0, 1.0), Err(IngestError::UnknownSeed(_))));
        assert!(select_neighborhood(&hs, "s", 0.0, 1.0).is_err());
    }

    #[test]
    fn neighborhood_closed_core_boundary() {
        let hs = [house("s", 0.0, 0.0), house("edge", 1500.0, 0.0), house("ring", 2000.0, 0.0), house("out", 2000.1, 0.0)];
        let s = select_neighborhood(&hs, "s", 1500.0, 500.0).unwrap();
        assert_eq!(s.core, vec![0, 1]);
        assert_eq!(s.buffer, vec![2]);
    }

    #[test]
    fn neighborhood_grid_matches_brute_force() {
        let mut hs = Vec::new();
        for i in 0..50 {
            for j in 0..50 {
                hs.push(house(&format!("{i}_{j}"), i as f64 * 100.0, j as f64 * 100.0));
            }
        }
        let s = select_neighborhood(&hs, "25_25", 1500.0, 500.0).unwrap();
        // Integer lattice counts in grid units around (25,25).
        let mut core = 0;
        let mut ring = 0;
        for i in 0..50i64 {
            for j in 0..50i64 {
                let d2 = (i - 25).pow(2) + (j - 25).pow(2);
                if d2 <= 225 {
                    core += 1;
                } else if d2 <= 400 {
                    ring += 1;
                }
            }
        }
        assert_eq!(s.core.len(), core);
        assert_eq!(s.buffer.len(), ring);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_household(idx: usize) -> impl Strategy<Value = Household> {
            (
                -1e6f64..1e6,
                -1e6f64..1e6,
                1900i32..2020,
                0.0f64..1e6,
                0.0f64..5e3,
                any::<bool>(),
                0.0f64..=1.0,
                proptest::option::of((0i64..200, 0i64..10)),
                any::<bool>(),
            )
                .prop_map(move |(x, y, by, v, oa, pool, own, ev, mc)| {
                    let base = YearMonth::new(2000, 1).unwrap();
                    Household {
                        id: format!("h{idx}"),
                        x,
                        y,
                        build_year: by,
                        value: v,
                        outdoor_area: oa,
                        has_pool: pool,
                        ownership_pct: own,
                        application: ev.map(|(a, _)| base.add_months(a)),
                        completion: ev.map(|(a, l)| base.add_months(a + l)),
                        multi_conversion: mc,
                    }
                })
        }

        proptest! {
            #[test]
            fn load_serialize_round_trip(hs in (1usize..8).prop_flat_map(|n| (0..n).map(arb_household).collect::<Vec<_>>())) {
                let mut buf = Vec::new();
                write_households(&hs, &mut buf).unwrap();
                let table = read_households(buf.as_slice()).unwrap();
                prop_assert_eq!(&table.households, &hs);
                let mut again = Vec::new();
                write_households(&table.households, &mut again).unwrap();
                prop_assert_eq!(buf, again);
            }

            #[test]
            fn discretization_is_monotone(a in 0i64..400, b in 0i64..400) {
                let start = YearMonth::new(2004, 1).unwrap();
                let end = YearMonth::new(2040, 1).unwrap();
                let mut h1 = house("1", 0.0, 0.0);
                let mut h2 = house("2", 0.0, 0.0);
                h1.application = Some(YearMonth::new(2001, 1).unwrap().add_months(a));
                h2.application = Some(YearMonth::new(2001, 1).unwrap().add_months(b));
                let tl = discretize_events(&[h1.clone(), h2.clone()], start, end, PreStudyRule::KeepHistory).unwrap();
                if h1.application <= h2.application {
                    prop_assert!(tl.exposed[0] <= tl.exposed[1]);
                }
            }

            #[test]
            fn neighborhood_partitions(pts in proptest::collection::vec((-3000f64..3000.0, -3000f64..3000.0), 1..60)) {
                let hs: Vec<_> = pts.iter().enumerate().map(|(i, &(x, y))| house(&i.to_string(), x, y)).collect();
                let s = select_neighborhood(&hs, "0", 1500.0, 500.0).unwrap();
                let core: HashSet<_> = s.core.iter().collect();
                prop_assert!(s.buffer.iter().all(|b| !core.contains(b)));
                for &c in &s.core {
                    prop_assert!(euclidean_distance(hs[0].location(), hs[c].location()) <= 1500.0);
                }
            }
        }
    }
}
