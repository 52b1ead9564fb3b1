//! City-day panel: CSV ingestion, station aggregation, imputation and a
//! seeded synthetic generator.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::SeedStream;

/// The closed set of observed variables, in export column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variable {
    #[serde(rename = "TV")]
    Tv,
    #[serde(rename = "NOx")]
    Nox,
    #[serde(rename = "PM25")]
    Pm25,
    #[serde(rename = "Tmean")]
    Tmean,
    #[serde(rename = "HDD")]
    Hdd,
    #[serde(rename = "VP")]
    Vp,
    #[serde(rename = "WS")]
    Ws,
    #[serde(rename = "WG")]
    Wg,
    #[serde(rename = "meanRH")]
    MeanRh,
    #[serde(rename = "SD")]
    Sd,
    #[serde(rename = "PP")]
    Pp,
}

impl Variable {
    pub const ALL: [Variable; 11] = [
        Variable::Tv,
        Variable::Nox,
        Variable::Pm25,
        Variable::Tmean,
        Variable::Hdd,
        Variable::Vp,
        Variable::Ws,
        Variable::Wg,
        Variable::MeanRh,
        Variable::Sd,
        Variable::Pp,
    ];

    /// Traffic plus the eight weather covariates driving the pollutant rate.
    pub const REGRESSORS: [Variable; 9] = [
        Variable::Tv,
        Variable::Tmean,
        Variable::Hdd,
        Variable::Vp,
        Variable::Ws,
        Variable::Wg,
        Variable::MeanRh,
        Variable::Sd,
        Variable::Pp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Tv => "TV",
            Variable::Nox => "NOx",
            Variable::Pm25 => "PM25",
            Variable::Tmean => "Tmean",
            Variable::Hdd => "HDD",
            Variable::Vp => "VP",
            Variable::Ws => "WS",
            Variable::Wg => "WG",
            Variable::MeanRh => "meanRH",
            Variable::Sd => "SD",
            Variable::Pp => "PP",
        }
    }

    pub fn index(self) -> usize {
        Variable::ALL.iter().position(|&v| v == self).unwrap()
    }

    pub fn non_negative(self) -> bool {
        !matches!(self, Variable::Tmean | Variable::Vp)
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Variable::ALL
            .iter()
            .copied()
            .find(|v| v.name() == t || (t == "PM2.5" && *v == Variable::Pm25))
            .ok_or_else(|| Error::Spec(format!("unknown variable `{t}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pollutant {
    #[serde(rename = "NOx")]
    Nox,
    #[serde(rename = "PM25")]
    Pm25,
}

impl Pollutant {
    pub const ALL: [Pollutant; 2] = [Pollutant::Nox, Pollutant::Pm25];

    pub fn variable(self) -> Variable {
        match self {
            Pollutant::Nox => Variable::Nox,
            Pollutant::Pm25 => Variable::Pm25,
        }
    }

    pub fn name(self) -> &'static str {
        self.variable().name()
    }
}

impl fmt::Display for Pollutant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pollutant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<Variable>()? {
            Variable::Nox => Ok(Pollutant::Nox),
            Variable::Pm25 => Ok(Pollutant::Pm25),
            other => Err(Error::Spec(format!("{other} is not a pollutant"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub date: NaiveDate,
    pub city: String,
    pub station: String,
    pub variable: Variable,
    /// `None` is the missing marker.
    pub value: Option<f64>,
}

/// Maps logical fields onto CSV header names.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub date: String,
    pub city: String,
    pub station: String,
    pub variable: String,
    pub value: String,
    /// Inclusive bounds for accepted dates.
    pub date_range: Option<(NaiveDate, NaiveDate)>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            city: "city".into(),
            station: "station".into(),
            variable: "variable".into(),
            value: "value".into(),
            date_range: None,
        }
    }
}

/// Parse long-format observations. Unparseable values become missing
/// markers; malformed dates and unknown variables are row errors.
pub fn parse_csv<R: Read>(source: R, schema: &CsvSchema) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            column: name.to_string(),
        })
    };
    let i_date = col(&schema.date)?;
    let i_city = col(&schema.city)?;
    let i_station = col(&schema.station)?;
    let i_var = col(&schema.variable)?;
    let i_value = col(&schema.value)?;

    let mut out = Vec::new();
    for (k, row) in reader.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let date = NaiveDate::parse_from_str(field(i_date), "%Y-%m-%d").map_err(|e| Error::Row {
            row: line,
            message: format!("malformed date `{}`: {e}", field(i_date)),
        })?;
        if let Some((lo, hi)) = schema.date_range {
            if date < lo || date > hi {
                return Err(Error::Row {
                    row: line,
                    message: format!("date {date} outside {lo}..={hi}"),
                });
            }
        }
        let variable = field(i_var).parse::<Variable>().map_err(|e| Error::Row {
            row: line,
            message: e.to_string(),
        })?;
        let value = field(i_value).parse::<f64>().ok().filter(|v| v.is_finite());
        out.push(RawRecord {
            date,
            city: field(i_city).to_string(),
            station: field(i_station).to_string(),
            variable,
            value,
        });
    }
    Ok(out)
}

/// Per-city, per-day grid over [`Variable::ALL`] with a gap-free date axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CityDailyPanel {
    cities: Vec<String>,
    start: NaiveDate,
    days: usize,
    values: Vec<Option<f64>>,
    imputed: Vec<bool>,
}

const NVAR: usize = 11;

impl CityDailyPanel {
    /// An all-missing panel.
    pub fn new(cities: Vec<String>, start: NaiveDate, days: usize) -> Self {
        let n = cities.len() * days * NVAR;
        Self {
            cities,
            start,
            days,
            values: vec![None; n],
            imputed: vec![false; n],
        }
    }

    fn idx(&self, city: usize, day: usize, var: Variable) -> usize {
        (city * self.days + day) * NVAR + var.index()
    }

    pub fn cities(&self) -> &[String] {
        &self.cities
    }

    pub fn n_days(&self) -> usize {
        self.days
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + Duration::days(day as i64)
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.days).map(|d| self.date(d)).collect()
    }

    pub fn city_index(&self, name: &str) -> Option<usize> {
        self.cities.iter().position(|c| c == name)
    }

    pub fn get(&self, city: usize, day: usize, var: Variable) -> Option<f64> {
        self.values[self.idx(city, day, var)]
    }

    pub fn set(&mut self, city: usize, day: usize, var: Variable, value: Option<f64>) {
        let i = self.idx(city, day, var);
        self.values[i] = value;
    }

    pub fn is_imputed(&self, city: usize, day: usize, var: Variable) -> bool {
        self.imputed[self.idx(city, day, var)]
    }

    pub fn column(&self, city: usize, var: Variable) -> Vec<Option<f64>> {
        (0..self.days).map(|d| self.get(city, d, var)).collect()
    }

    /// Column with missing cells rejected.
    pub fn complete_column(&self, city: usize, var: Variable) -> Result<Vec<f64>> {
        self.column(city, var)
            .into_iter()
            .enumerate()
            .map(|(d, v)| {
                v.ok_or_else(|| {
                    Error::Contract(format!(
                        "panel not imputed: {} {} {} missing",
                        self.cities[city],
                        self.date(d),
                        var
                    ))
                })
            })
            .collect()
    }

    pub fn n_cells(&self) -> usize {
        self.values.len()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.missing_count() as f64 / self.n_cells() as f64
        }
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// Check the non-negativity invariant.
    pub fn validate(&self) -> Result<()> {
        for c in 0..self.cities.len() {
            for d in 0..self.days {
                for var in Variable::ALL {
                    if let Some(v) = self.get(c, d, var) {
                        if !v.is_finite() || (var.non_negative() && v < 0.0) {
                            return Err(Error::Row {
                                row: d,
                                message: format!(
                                    "{} {} {var} = {v} violates panel invariants",
                                    self.cities[c],
                                    self.date(d)
                                ),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Write one CSV per city plus a sidecar listing imputed cells.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (c, city) in self.cities.iter().enumerate() {
            let path = dir.join(format!("{city}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["date".to_string()];
            header.extend(Variable::ALL.iter().map(|v| v.name().to_string()));
            w.write_record(&header)?;
            for d in 0..self.days {
                let mut rec = vec![self.date(d).to_string()];
                for var in Variable::ALL {
                    rec.push(self.get(c, d, var).map(|v| v.to_string()).unwrap_or_default());
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
            written.push(path);

            let side = dir.join(format!("{city}_imputed.csv"));
            let mut w = csv::Writer::from_path(&side)?;
            w.write_record(["date", "variable"])?;
            for d in 0..self.days {
                for var in Variable::ALL {
                    if self.is_imputed(c, d, var) {
                        w.write_record([self.date(d).to_string(), var.name().to_string()])?;
                    }
                }
            }
            w.flush()?;
            written.push(side);
        }
        Ok(written)
    }

    /// Read a directory written by [`CityDailyPanel::write_dir`]; cities in the given order.
    pub fn read_dir(dir: &Path, cities: &[String]) -> Result<Self> {
        if cities.is_empty() {
            return Err(Error::EmptyInput("no cities listed".into()));
        }
        let mut per_city = Vec::new();
        for city in cities {
            let path = dir.join(format!("{city}.csv"));
            if !path.exists() {
                return Err(Error::MissingArtifact {
                    path,
                    hint: "run `ingest` or `synth` first".into(),
                });
            }
            let mut r = csv::Reader::from_path(&path)?;
            let headers = r.headers()?.clone();
            let vars: Vec<Variable> = headers
                .iter()
                .skip(1)
                .map(str::parse)
                .collect::<Result<_>>()?;
            let mut rows = Vec::new();
            for (k, rec) in r.records().enumerate() {
                let rec = rec?;
                let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| Error::Row {
                    row: k + 2,
                    message: e.to_string(),
                })?;
                let vals: Vec<Option<f64>> = (1..rec.len()).map(|i| rec[i].parse().ok()).collect();
                rows.push((date, vals));
            }
            let mut imputed = Vec::new();
            let side = dir.join(format!("{city}_imputed.csv"));
            if side.exists() {
                let mut r = csv::Reader::from_path(&side)?;
                for rec in r.records() {
                    let rec = rec?;
                    let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
                        .map_err(|e| Error::Row { row: 0, message: e.to_string() })?;
                    imputed.push((date, rec[1].parse::<Variable>()?));
                }
            }
            per_city.push((vars, rows, imputed));
        }
        let start = per_city[0].1.first().map(|r| r.0).ok_or_else(|| Error::EmptyInput("empty panel file".into()))?;
        let days = per_city[0].1.len();
        let mut panel = CityDailyPanel::new(cities.to_vec(), start, days);
        for (c, (vars, rows, imputed)) in per_city.into_iter().enumerate() {
            if rows.len() != days {
                return Err(Error::Shape(format!("city {} has {} days, expected {days}", cities[c], rows.len())));
            }
            for (d, (date, vals)) in rows.into_iter().enumerate() {
                if date != panel.date(d) {
                    return Err(Error::Row { row: d + 2, message: format!("date axis gap at {date}") });
                }
                for (var, v) in vars.iter().zip(vals) {
                    panel.set(c, d, *var, v);
                }
            }
            for (date, var) in imputed {
                let d = (date - start).num_days();
                if d >= 0 && (d as usize) < days {
                    let i = panel.idx(c, d as usize, var);
                    panel.imputed[i] = true;
                }
            }
        }
        Ok(panel)
    }
}

/// Average stations into city-level daily values on a densified date axis.
pub fn aggregate_city_daily(records: &[RawRecord]) -> Result<CityDailyPanel> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records to aggregate".into()));
    }
    let mut cities: Vec<String> = records.iter().map(|r| r.city.clone()).collect();
    cities.sort();
    cities.dedup();
    let start = records.iter().map(|r| r.date).min().unwrap();
    let end = records.iter().map(|r| r.date).max().unwrap();
    let days = (end - start).num_days() as usize + 1;

    // (sum, count) per cell; integer-free accumulation order is by (city, day, var)
    let mut acc: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        let c = cities.binary_search(&r.city).unwrap();
        let d = (r.date - start).num_days() as usize;
        let e = acc.entry((c, d, r.variable.index())).or_default();
        if let Some(v) = r.value {
            e.push(v);
        }
    }
    let mut panel = CityDailyPanel::new(cities, start, days);
    for ((c, d, v), mut vals) in acc {
        if vals.is_empty() {
            continue;
        }
        // sort so the mean is independent of station order down to the last bit
        vals.sort_by(f64::total_cmp);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        panel.set(c, d, Variable::ALL[v], Some(mean));
    }
    Ok(panel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub missing_fraction_before: f64,
    pub missing_fraction_after: f64,
    pub imputed_counts: BTreeMap<Variable, usize>,
    pub iterations_used: usize,
}

impl ImputationReport {
    pub fn total_imputed(&self) -> usize {
        self.imputed_counts.values().sum()
    }
}

/// Iterative OLS imputation, city by city.
///
/// Missing cells start at the city/variable observed mean; each incomplete
/// variable is then regressed (with intercept) on every other variable's
/// current values over its observed rows and its missing cells refilled,
/// until the largest change in an imputed value drops below `tol` or
/// `max_iter` sweeps have run. Observed cells are never touched.
pub fn impute_missing(
    panel: &CityDailyPanel,
    max_iter: usize,
    tol: f64,
) -> Result<(CityDailyPanel, ImputationReport)> {
    let before = panel.missing_fraction();
    let results: Vec<Result<(Vec<Vec<f64>>, Vec<Vec<bool>>, usize)>> = (0..panel.cities.len())
        .into_par_iter()
        .map(|c| impute_city(panel, c, max_iter, tol))
        .collect();

    let mut out = panel.clone();
    let mut counts: BTreeMap<Variable, usize> = Variable::ALL.iter().map(|&v| (v, 0)).collect();
    let mut iterations = 0;
    for (c, res) in results.into_iter().enumerate() {
        let (cols, missing, iters) = res?;
        iterations = iterations.max(iters);
        for (vi, var) in Variable::ALL.iter().enumerate() {
            for d in 0..panel.days {
                if missing[vi][d] {
                    let i = out.idx(c, d, *var);
                    out.values[i] = Some(cols[vi][d]);
                    out.imputed[i] = true;
                    *counts.get_mut(var).unwrap() += 1;
                }
            }
        }
    }
    let report = ImputationReport {
        missing_fraction_before: before,
        missing_fraction_after: out.missing_fraction(),
        imputed_counts: counts,
        iterations_used: iterations,
    };
    Ok((out, report))
}

type CityImputation = (Vec<Vec<f64>>, Vec<Vec<bool>>, usize);

fn impute_city(panel: &CityDailyPanel, c: usize, max_iter: usize, tol: f64) -> Result<CityImputation> {
    let days = panel.days;
    let mut cols = vec![vec![0.0; days]; NVAR];
    let mut missing = vec![vec![false; days]; NVAR];
    for (vi, var) in Variable::ALL.iter().enumerate() {
        let col = panel.column(c, *var);
        let observed: Vec<f64> = col.iter().flatten().copied().collect();
        if observed.is_empty() {
            return Err(Error::Unimputable {
                city: panel.cities[c].clone(),
                variable: var.name().to_string(),
            });
        }
        let mean = linalg::mean(&observed);
        for (d, v) in col.iter().enumerate() {
            match v {
                Some(x) => cols[vi][d] = *x,
                None => {
                    cols[vi][d] = mean;
                    missing[vi][d] = true;
                }
            }
        }
    }
    let incomplete: Vec<usize> = (0..NVAR).filter(|&vi| missing[vi].iter().any(|&m| m)).collect();
    if incomplete.is_empty() {
        return Ok((cols, missing, 0));
    }
    let mut used = 0;
    for iter in 1..=max_iter {
        used = iter;
        let mut max_change: f64 = 0.0;
        for &vi in &incomplete {
            let others: Vec<usize> = (0..NVAR).filter(|&k| k != vi).collect();
            let obs_rows: Vec<usize> = (0..days).filter(|&d| !missing[vi][d]).collect();
            let design = |rows: &[usize]| {
                DMatrix::from_fn(rows.len(), others.len() + 1, |r, j| {
                    if j == 0 {
                        1.0
                    } else {
                        cols[others[j - 1]][rows[r]]
                    }
                })
            };
            let x = design(&obs_rows);
            let y = DVector::from_iterator(obs_rows.len(), obs_rows.iter().map(|&d| cols[vi][d]));
            let beta = linalg::least_squares(&x, &y);
            let miss_rows: Vec<usize> = (0..days).filter(|&d| missing[vi][d]).collect();
            let pred = design(&miss_rows) * &beta;
            let nonneg = Variable::ALL[vi].non_negative();
            for (k, &d) in miss_rows.iter().enumerate() {
                let mut v = pred[k];
                if nonneg {
                    v = v.max(0.0);
                }
                max_change = max_change.max((v - cols[vi][d]).abs());
                cols[vi][d] = v;
            }
        }
        if max_change < tol {
            break;
        }
    }
    Ok((cols, missing, used))
}

/// Planted effect of one covariate on a pollutant: `linear` multiplies the
/// standardized variable, `quadratic` multiplies the standardized square of
/// the raw variable (the same columns a degree-2 design produces).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantedEffect {
    #[serde(default)]
    pub linear: f64,
    #[serde(default)]
    pub quadratic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamics {
    /// Pollutant is the planted function of same-day covariates.
    Static,
    /// `y[t+1] = y[t] + scale·(drive(x[t]) + noise) − relaxation·(y[t] − base)`.
    RateLaw { relaxation: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollutantModel {
    pub intercept: f64,
    /// Concentration units per unit of planted signal.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub effects: BTreeMap<Variable, PlantedEffect>,
    /// Additive per-city level shifts (missing entries are 0).
    #[serde(default)]
    pub city_offsets: Vec<f64>,
    #[serde(default = "static_dynamics")]
    pub dynamics: Dynamics,
}

fn one() -> f64 {
    1.0
}

fn static_dynamics() -> Dynamics {
    Dynamics::Static
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub cities: usize,
    pub days: usize,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: NaiveDate,
    pub nox: PollutantModel,
    pub pm25: PollutantModel,
    /// Standard deviation of the pollutant noise in planted-signal units.
    pub noise_sd: f64,
    pub missing_rate: f64,
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2009, 1, 1).unwrap()
}

pub const DEFAULT_CITIES: [&str; 3] = ["Oslo", "Bergen", "Trondheim"];

impl Default for SyntheticConfig {
    fn default() -> Self {
        let eff = |pairs: &[(Variable, f64, f64)]| {
            pairs
                .iter()
                .map(|&(v, linear, quadratic)| (v, PlantedEffect { linear, quadratic }))
                .collect()
        };
        Self {
            cities: 3,
            days: 3652,
            seed: 42,
            start: default_start(),
            nox: PollutantModel {
                intercept: 80.0,
                scale: 22.0,
                effects: eff(&[
                    (Variable::Hdd, 1.0, 0.6),
                    (Variable::Tv, 0.9, 0.0),
                    (Variable::MeanRh, 0.5, 0.0),
                    (Variable::Sd, 0.4, 0.0),
                    (Variable::Ws, -0.5, 0.0),
                ]),
                city_offsets: vec![10.0, -5.0, -8.0],
                dynamics: Dynamics::Static,
            },
            pm25: PollutantModel {
                intercept: 10.2,
                scale: 2.6,
                effects: eff(&[
                    (Variable::Hdd, 0.9, 0.7),
                    (Variable::Tv, 0.6, 0.0),
                    (Variable::MeanRh, 0.4, 0.0),
                    (Variable::Sd, 0.5, 0.0),
                ]),
                city_offsets: vec![0.8, -0.4, -0.6],
                dynamics: Dynamics::Static,
            },
            noise_sd: 1.0,
            missing_rate: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cities == 0 {
            return Err(Error::Config("synthetic cities must be ≥ 1".into()));
        }
        if self.days < 30 {
            return Err(Error::Config("synthetic days must be ≥ 30".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("missing_rate must lie in [0, 1)".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be ≥ 0".into()));
        }
        for m in [&self.nox, &self.pm25] {
            if m.effects.keys().any(|v| matches!(v, Variable::Nox | Variable::Pm25)) {
                return Err(Error::Config("pollutants cannot drive pollutants".into()));
            }
        }
        Ok(())
    }

    pub fn city_names(&self) -> Vec<String> {
        (0..self.cities)
            .map(|c| {
                DEFAULT_CITIES
                    .get(c)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("City{}", c + 1))
            })
            .collect()
    }
}

/// Seeded synthetic panel with seasonal weather, traffic and planted pollutants.
///
/// Weather follows an annual sinusoid with autocorrelated anomalies; snow
/// accumulates on sub-zero precipitation days and melts above zero; HDD is
/// `max(0, 17 − Tmean)`. Planted covariate signals use z-scores pooled over
/// the whole panel. Pollutants are clipped at zero.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<CityDailyPanel> {
    config.validate()?;
    let streams = SeedStream::new(config.seed);
    let names = config.city_names();
    let mut panel = CityDailyPanel::new(names, config.start, config.days);
    let days = config.days;

    for c in 0..config.cities {
        let mut rng = streams.rng_indexed("weather", c as u64);
        let normal = |rng: &mut crate::rng::StreamRng| -> f64 { StandardNormal.sample(rng) };
        let city_t = [0.0, 1.5, -1.0].get(c).copied().unwrap_or(0.5 * c as f64 - 1.0);
        let city_rain = [0.0, 2.5, 0.8].get(c).copied().unwrap_or(0.5);
        let city_tv = [1.25, 0.85, 0.9].get(c).copied().unwrap_or(1.0);
        let rain_amount = Exp::new(1.0 / (4.0 + city_rain)).unwrap();
        let mut t_anom = 0.0;
        let mut rh_anom = 0.0;
        let mut snow: f64 = 0.0;
        for d in 0..days {
            let date = panel.date(d);
            let doy = date.ordinal() as f64;
            let season = (2.0 * std::f64::consts::PI * (doy - 105.0) / 365.25).sin();
            t_anom = 0.7 * t_anom + 2.2 * normal(&mut rng);
            let tmean = (6.0 + city_t + 9.5 * season + t_anom).clamp(-23.0, 34.0);
            let hdd = crate::features::compute_hdd(tmean);
            rh_anom = 0.6 * rh_anom + 5.0 * normal(&mut rng);
            let rh = (77.0 - 9.0 * season + rh_anom).clamp(20.0, 100.0);
            // Tetens saturation vapour pressure, kPa
            let vp = 0.6108 * (17.27 * tmean / (tmean + 237.3)).exp() * rh / 100.0;
            let ws = (3.6f64.ln() + 0.35 * normal(&mut rng)).exp();
            let wg = 1.8 * ws + 1.2 * normal(&mut rng).abs();
            let pp = if rng.random::<f64>() < 0.45 {
                rain_amount.sample(&mut rng)
            } else {
                0.0
            };
            if tmean < 0.5 {
                snow += pp;
            } else {
                snow = (snow - 0.9 * tmean - 0.3 * pp).max(0.0);
            }
            let weekday = date.weekday().num_days_from_monday();
            let week_factor = if weekday >= 5 { 0.72 } else { 1.06 };
            let tv = (1082.0 * city_tv * week_factor * (1.0 - 0.12 * season) * (1.0 + 0.08 * normal(&mut rng)))
                .max(0.0);
            panel.set(c, d, Variable::Tmean, Some(tmean));
            panel.set(c, d, Variable::Hdd, Some(hdd));
            panel.set(c, d, Variable::MeanRh, Some(rh));
            panel.set(c, d, Variable::Vp, Some(vp));
            panel.set(c, d, Variable::Ws, Some(ws));
            panel.set(c, d, Variable::Wg, Some(wg.max(0.0)));
            panel.set(c, d, Variable::Pp, Some(pp));
            panel.set(c, d, Variable::Sd, Some(snow));
            panel.set(c, d, Variable::Tv, Some(tv));
        }
    }

    // pooled z-scores of every covariate and of its raw square
    let mut z: BTreeMap<Variable, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for var in Variable::REGRESSORS {
        let raw: Vec<f64> = (0..config.cities)
            .flat_map(|c| (0..days).map(move |d| (c, d)))
            .map(|(c, d)| panel.get(c, d, var).unwrap())
            .collect();
        let sq: Vec<f64> = raw.iter().map(|x| x * x).collect();
        z.insert(var, (standardize(&raw), standardize(&sq)));
    }

    for pollutant in Pollutant::ALL {
        let model = match pollutant {
            Pollutant::Nox => &config.nox,
            Pollutant::Pm25 => &config.pm25,
        };
        let noise = Normal::new(0.0, config.noise_sd.max(0.0)).unwrap();
        for c in 0..config.cities {
            let mut rng = streams.rng_indexed(&format!("noise-{pollutant}"), c as u64);
            let base = model.intercept + model.city_offsets.get(c).copied().unwrap_or(0.0);
            let drive = |d: usize| -> f64 {
                model
                    .effects
                    .iter()
                    .map(|(var, e)| {
                        let (zl, zq) = &z[var];
                        let k = c * days + d;
                        e.linear * zl[k] + e.quadratic * zq[k]
                    })
                    .sum()
            };
            match model.dynamics {
                Dynamics::Static => {
                    for d in 0..days {
                        let eps = if config.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        let y = base + model.scale * (drive(d) + eps);
                        panel.set(c, d, pollutant.variable(), Some(y.max(0.0)));
                    }
                }
                Dynamics::RateLaw { relaxation } => {
                    let mut y = base;
                    for d in 0..days {
                        panel.set(c, d, pollutant.variable(), Some(y));
                        let eps = if config.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        y = (y + model.scale * (drive(d) + eps) - relaxation * (y - base)).max(0.0);
                    }
                }
            }
        }
    }

    if config.missing_rate > 0.0 {
        let mut rng = streams.rng("missing");
        let n = panel.values.len();
        let k = (config.missing_rate * n as f64).round() as usize;
        let mut cells: Vec<usize> = (0..n).collect();
        cells.shuffle(&mut rng);
        for &i in &cells[..k] {
            panel.values[i] = None;
        }
    }
    Ok(panel)
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let m = linalg::mean(xs);
    let s = linalg::pop_sd(xs);
    if s == 0.0 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - m) / s).collect()
}

/// Pooled z-scores used by the generator; exposed so callers can check planted signals.
pub fn pooled_zscores(panel: &CityDailyPanel, var: Variable, squared: bool) -> Result<Vec<f64>> {
    let mut raw = Vec::with_capacity(panel.cities.len() * panel.days);
    for c in 0..panel.cities.len() {
        for v in panel.complete_column(c, var)? {
            raw.push(if squared { v * v } else { v });
        }
    }
    Ok(standardize(&raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn parse_single_row() {
        let src = "date,city,station,variable,value\n2009-01-01,Oslo,S1,NOx,80.4\n";
        let recs = parse_csv(src.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].value, Some(80.4));
        assert_eq!(recs[0].variable, Variable::Nox);
        assert_eq!(recs[0].city, "Oslo");
    }

    #[test]
    fn parse_empty_value_is_missing() {
        let src = "date,city,station,variable,value\n2009-01-01,Oslo,S1,PM25,\n2009-01-02,Oslo,S1,PM25,abc\n";
        let recs = parse_csv(src.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(recs[0].value, None);
        assert_eq!(recs[1].value, None);
    }

    #[test]
    fn parse_missing_city_column() {
        let src = "date,station,variable,value\n2009-01-01,S1,NOx,1\n";
        match parse_csv(src.as_bytes(), &CsvSchema::default()) {
            Err(Error::Schema { column }) => assert_eq!(column, "city"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn parse_malformed_date_reports_row() {
        let src = "date,city,station,variable,value\n2009-01-01,Oslo,S1,NOx,1\n2009-13-01,Oslo,S1,NOx,1\n";
        match parse_csv(src.as_bytes(), &CsvSchema::default()) {
            Err(Error::Row { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn parse_date_outside_range() {
        let schema = CsvSchema {
            date_range: Some((d("2009-01-01"), d("2018-12-31"))),
            ..CsvSchema::default()
        };
        let src = "date,city,station,variable,value\n2020-01-01,Oslo,S1,NOx,1\n";
        assert!(matches!(parse_csv(src.as_bytes(), &schema), Err(Error::Row { row: 2, .. })));
    }

    fn rec(date: &str, station: &str, v: Option<f64>) -> RawRecord {
        RawRecord {
            date: d(date),
            city: "Oslo".into(),
            station: station.into(),
            variable: Variable::Nox,
            value: v,
        }
    }

    #[test]
    fn aggregate_means_and_missing() {
        let p = aggregate_city_daily(&[rec("2009-01-01", "S1", Some(10.0))]).unwrap();
        assert_eq!(p.get(0, 0, Variable::Nox), Some(10.0));

        let p = aggregate_city_daily(&[
            rec("2009-01-01", "S1", Some(10.0)),
            rec("2009-01-01", "S2", Some(20.0)),
        ])
        .unwrap();
        assert_eq!(p.get(0, 0, Variable::Nox), Some(15.0));

        let p = aggregate_city_daily(&[rec("2009-01-01", "S1", None), rec("2009-01-01", "S2", None)]).unwrap();
        assert_eq!(p.get(0, 0, Variable::Nox), None);
    }

    #[test]
    fn aggregate_densifies_date_axis() {
        let p = aggregate_city_daily(&[rec("2009-01-01", "S1", Some(1.0)), rec("2009-01-05", "S1", Some(2.0))]).unwrap();
        assert_eq!(p.n_days(), 5);
        assert_eq!(p.get(0, 2, Variable::Nox), None);
        assert_eq!(p.get(0, 4, Variable::Nox), Some(2.0));
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(matches!(aggregate_city_daily(&[]), Err(Error::EmptyInput(_))));
    }

    fn complete_panel(days: usize, seed: u64) -> CityDailyPanel {
        let cfg = SyntheticConfig {
            cities: 1,
            days,
            seed,
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg).unwrap()
    }

    #[test]
    fn impute_complete_panel_is_fixed_point() {
        let p = complete_panel(60, 1);
        let (out, report) = impute_missing(&p, 10, 1e-9).unwrap();
        assert_eq!(out, p);
        assert_eq!(report.total_imputed(), 0);
        assert_eq!(report.missing_fraction_before, 0.0);
        assert_eq!(report.iterations_used, 0);
    }

    #[test]
    fn impute_exact_linear_relation() {
        let mut p = complete_panel(60, 2);
        for day in 0..60 {
            let x = (day % 7) as f64 + 1.0 + 0.1 * day as f64;
            p.set(0, day, Variable::Tv, Some(x));
            p.set(0, day, Variable::Nox, Some(2.0 * x));
        }
        p.set(0, 10, Variable::Tv, Some(3.0));
        p.set(0, 10, Variable::Nox, None);
        let tol = 1e-9;
        let (out, report) = impute_missing(&p, 50, tol).unwrap();
        let v = out.get(0, 10, Variable::Nox).unwrap();
        assert!((v - 6.0).abs() < 1e-6, "imputed {v}");
        assert!(out.is_imputed(0, 10, Variable::Nox));
        assert_eq!(report.imputed_counts[&Variable::Nox], 1);
        assert_eq!(report.missing_fraction_after, 0.0);
    }

    #[test]
    fn impute_reports_missing_fraction() {
        // 1 city × 1000 days × 11 variables = 11000 cells; 868 missing = 7.89%
        let mut p = complete_panel(1000, 3);
        let mut cells: Vec<usize> = (0..p.n_cells()).collect();
        cells.shuffle(&mut crate::rng::rng_from_seed(9));
        for &i in &cells[..868] {
            p.values[i] = None;
        }
        let (out, report) = impute_missing(&p, 20, 1e-6).unwrap();
        assert!((report.missing_fraction_before - 0.0789).abs() <= 1e-4);
        assert_eq!(report.missing_fraction_after, 0.0);
        assert_eq!(report.total_imputed(), 868);
        assert!(out.is_complete());
        for c in 0..p.n_cells() {
            if let Some(v) = p.values[c] {
                assert_eq!(out.values[c], Some(v));
                assert!(!out.imputed[c]);
            } else {
                assert!(out.imputed[c]);
            }
        }
        // idempotent
        let (again, r2) = impute_missing(&out, 20, 1e-6).unwrap();
        assert_eq!(again, out);
        assert_eq!(r2.total_imputed(), 0);
    }

    #[test]
    fn impute_unimputable_variable() {
        let mut p = complete_panel(40, 4);
        for day in 0..40 {
            p.set(0, day, Variable::Sd, None);
        }
        assert!(matches!(impute_missing(&p, 5, 1e-6), Err(Error::Unimputable { .. })));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            days: 200,
            missing_rate: 0.05,
            ..SyntheticConfig::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
    }

    #[test]
    fn synthetic_noiseless_planted_function() {
        let mut cfg = SyntheticConfig {
            cities: 2,
            days: 120,
            noise_sd: 0.0,
            ..SyntheticConfig::default()
        };
        cfg.nox = PollutantModel {
            intercept: 0.0,
            scale: 1.0,
            effects: [(Variable::Tv, PlantedEffect { linear: 3.0, quadratic: 0.0 })].into(),
            city_offsets: vec![],
            dynamics: Dynamics::Static,
        };
        let p = generate_synthetic(&cfg).unwrap();
        let z = pooled_zscores(&p, Variable::Tv, false).unwrap();
        for c in 0..2 {
            for day in 0..120 {
                let want = (3.0 * z[c * 120 + day]).max(0.0);
                let got = p.get(c, day, Variable::Nox).unwrap();
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_pm25_marginals_match_reported_scale() {
        let p = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let vals: Vec<f64> = (0..3).flat_map(|c| p.complete_column(c, Variable::Pm25).unwrap()).collect();
        let mean = linalg::mean(&vals);
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        assert!((8.0..=13.0).contains(&mean), "PM25 mean {mean}");
        assert!(max <= 60.0, "PM25 max {max}");
        p.validate().unwrap();
    }

    #[test]
    fn synthetic_hdd_matches_temperature() {
        let p = generate_synthetic(&SyntheticConfig { days: 400, ..SyntheticConfig::default() }).unwrap();
        for c in 0..3 {
            for day in 0..400 {
                let t = p.get(c, day, Variable::Tmean).unwrap();
                assert_eq!(p.get(c, day, Variable::Hdd).unwrap(), (17.0 - t).max(0.0));
            }
        }
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let cfg = SyntheticConfig { days: 10, ..SyntheticConfig::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SyntheticConfig { missing_rate: 1.0, ..SyntheticConfig::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn panel_dir_round_trip() {
        let cfg = SyntheticConfig { days: 40, missing_rate: 0.1, ..SyntheticConfig::default() };
        let p = generate_synthetic(&cfg).unwrap();
        let (p, _) = impute_missing(&p, 5, 1e-6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.write_dir(dir.path()).unwrap();
        let back = CityDailyPanel::read_dir(dir.path(), p.cities()).unwrap();
        assert_eq!(back, p);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn aggregation_is_station_order_invariant(vals in proptest::collection::vec(0.0f64..500.0, 1..8), seed in 0u64..1000) {
            let date = NaiveDate::from_ymd_opt(2010, 5, 1).unwrap();
            let recs: Vec<RawRecord> = vals.iter().enumerate().map(|(i, &v)| RawRecord {
                date, city: "Bergen".into(), station: format!("S{i}"), variable: Variable::Pm25, value: Some(v),
            }).collect();
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut crate::rng::rng_from_seed(seed));
            let a = aggregate_city_daily(&recs).unwrap();
            let b = aggregate_city_daily(&shuffled).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn synthetic_missing_rate_is_respected(rate in 0.0f64..0.5, seed in 0u64..100) {
            // 1 × 1000 × 11 = 11000 cells
            let cfg = SyntheticConfig { cities: 1, days: 1000, seed, missing_rate: rate, ..SyntheticConfig::default() };
            let p = generate_synthetic(&cfg).unwrap();
            prop_assert!((p.missing_fraction() - rate).abs() <= 0.01);
        }
    }
}
