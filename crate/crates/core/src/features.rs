//! Regressor construction: HDD, raw-scale polynomial powers, calendar
//! dummies, fixed-effect encodings, train-only standardization and
//! per-city chronological splits.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::dataset::{CityDailyPanel, Pollutant, Variable};
use crate::error::{Error, Result};

/// Heating degree days against the 17 °C threshold.
pub fn compute_hdd(tmean: f64) -> f64 {
    (17.0 - tmean).max(0.0)
}

/// Fill missing HDD cells from observed Tmean; returns how many were filled.
pub fn derive_hdd(panel: &mut CityDailyPanel) -> usize {
    let mut filled = 0;
    for c in 0..panel.cities().len() {
        for d in 0..panel.n_days() {
            if panel.get(c, d, Variable::Hdd).is_none() {
                if let Some(t) = panel.get(c, d, Variable::Tmean) {
                    panel.set(c, d, Variable::Hdd, Some(compute_hdd(t)));
                    filled += 1;
                }
            }
        }
    }
    filled
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedEffectKey {
    City,
    Year,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub base: Vec<Variable>,
    pub degree: u8,
    pub time_dummies: bool,
    pub fixed_effects: Vec<FixedEffectKey>,
    pub target: Pollutant,
}

impl FeatureSpec {
    pub fn new(target: Pollutant) -> Self {
        Self {
            base: Variable::REGRESSORS.to_vec(),
            degree: 3,
            time_dummies: true,
            fixed_effects: vec![FixedEffectKey::City, FixedEffectKey::Year],
            target,
        }
    }

    /// Build from variable names, rejecting unknown names.
    pub fn from_names(names: &[&str], degree: u8, target: Pollutant) -> Result<Self> {
        let base = names.iter().map(|n| n.parse::<Variable>()).collect::<Result<Vec<_>>>()?;
        let spec = Self {
            base,
            degree,
            time_dummies: false,
            fixed_effects: vec![],
            target,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.degree) {
            return Err(Error::Spec(format!("degree {} not in 1..=3", self.degree)));
        }
        if self.base.contains(&self.target.variable()) {
            return Err(Error::Spec(format!("target {} cannot be a regressor", self.target)));
        }
        let mut seen = self.base.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.base.len() {
            return Err(Error::Spec("duplicate base variable".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Continuous,
    Dummy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowKey {
    pub city: usize,
    pub day: usize,
    pub date: NaiveDate,
}

/// Row-major feature matrix indexed by (city, date).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub cities: Vec<String>,
    pub rows: Vec<RowKey>,
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub values: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(cities: Vec<String>, rows: Vec<RowKey>, names: Vec<String>, kinds: Vec<ColumnKind>, values: Vec<f64>) -> Result<Self> {
        if names.len() != kinds.len() || values.len() != rows.len() * names.len() {
            return Err(Error::Shape("design dimensions disagree".into()));
        }
        Ok(Self { cities, rows, names, kinds, values })
    }

    /// Continuous-only matrix from named columns; rows get dummy keys.
    pub fn from_columns(names: &[&str], columns: &[Vec<f64>]) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) || names.len() != columns.len() {
            return Err(Error::Shape("columns of unequal length".into()));
        }
        let epoch = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        let rows = (0..n)
            .map(|i| RowKey { city: 0, day: i, date: epoch + chrono::Duration::days(i as i64) })
            .collect();
        let p = columns.len();
        let mut values = vec![0.0; n * p];
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                values[i * p + j] = *v;
            }
        }
        Self::new(
            vec!["all".into()],
            rows,
            names.iter().map(|s| s.to_string()).collect(),
            vec![ColumnKind::Continuous; p],
            values,
        )
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let p = self.n_cols();
        &self.values[row * p..(row + 1) * p]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Sub-matrix with the listed columns, in the listed order.
    pub fn select_columns(&self, cols: &[usize]) -> DesignMatrix {
        let mut values = Vec::with_capacity(self.n_rows() * cols.len());
        for r in 0..self.n_rows() {
            for &c in cols {
                values.push(self.get(r, c));
            }
        }
        DesignMatrix {
            cities: self.cities.clone(),
            rows: self.rows.clone(),
            names: cols.iter().map(|&c| self.names[c].clone()).collect(),
            kinds: cols.iter().map(|&c| self.kinds[c]).collect(),
            values,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols());
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        DesignMatrix {
            cities: self.cities.clone(),
            rows: rows.iter().map(|&r| self.rows[r].clone()).collect(),
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            values,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["city".to_string(), "date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (r, key) in self.rows.iter().enumerate() {
            let mut rec = vec![self.cities[key.city].clone(), key.date.to_string()];
            rec.extend(self.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn power_name(var: Variable, power: u8) -> String {
    if power == 1 {
        var.name().to_string()
    } else {
        format!("{}^{}", var.name(), power)
    }
}

const WEEKDAYS: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

/// Expand a fully imputed panel into the regression design.
///
/// Powers are taken on the raw scale. Each one-hot group drops its first
/// level; dummy columns that are all zero are dropped with a warning.
pub fn build_design(panel: &CityDailyPanel, spec: &FeatureSpec) -> Result<DesignMatrix> {
    spec.validate()?;
    let ncity = panel.cities().len();
    let days = panel.n_days();
    let mut rows = Vec::with_capacity(ncity * days);
    for c in 0..ncity {
        for d in 0..days {
            rows.push(RowKey { city: c, day: d, date: panel.date(d) });
        }
    }
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();

    for &var in &spec.base {
        let raw: Vec<f64> = (0..ncity)
            .map(|c| panel.complete_column(c, var))
            .collect::<Result<Vec<_>>>()?
            .concat();
        for power in 1..=spec.degree {
            names.push(power_name(var, power));
            kinds.push(ColumnKind::Continuous);
            columns.push(raw.iter().map(|x| x.powi(i32::from(power))).collect());
        }
    }

    let mut dummy = |label: String, f: &dyn Fn(&RowKey) -> bool| {
        let col: Vec<f64> = rows.iter().map(|r| if f(r) { 1.0 } else { 0.0 }).collect();
        if col.iter().all(|&v| v == 0.0) {
            log::warn!("dropping all-zero dummy column {label}");
            return;
        }
        names.push(label);
        kinds.push(ColumnKind::Dummy);
        columns.push(col);
    };

    if spec.time_dummies {
        for (k, wd) in WEEKDAYS.iter().enumerate().skip(1) {
            dummy(format!("DW_{wd}"), &|r: &RowKey| r.date.weekday().num_days_from_monday() as usize == k);
        }
        for dom in 2..=31u32 {
            dummy(format!("DM_{dom}"), &|r: &RowKey| r.date.day() == dom);
        }
        for month in 2..=12u32 {
            dummy(format!("MY_{month}"), &|r: &RowKey| r.date.month() == month);
        }
    }
    for key in &spec.fixed_effects {
        match key {
            FixedEffectKey::City => {
                for (c, city) in panel.cities().iter().enumerate().skip(1) {
                    dummy(format!("city_{city}"), &|r: &RowKey| r.city == c);
                }
            }
            FixedEffectKey::Year => {
                let first = panel.date(0).year();
                let last = panel.date(days.saturating_sub(1)).year();
                for y in (first + 1)..=last {
                    dummy(format!("year_{y}"), &|r: &RowKey| r.date.year() == y);
                }
            }
        }
    }

    let p = columns.len();
    let n = rows.len();
    let mut values = vec![0.0; n * p];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            values[i * p + j] = *v;
        }
    }
    DesignMatrix::new(panel.cities().to_vec(), rows, names, kinds, values)
}

/// Per-column mean and population sd over train rows; `None` for dummies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<String>,
    pub stats: Vec<Option<(f64, f64)>>,
}

pub fn fit_standardizer(matrix: &DesignMatrix, train_rows: &[usize]) -> Result<Standardizer> {
    if train_rows.len() < 2 {
        return Err(Error::Argument("need at least 2 train rows to standardize".into()));
    }
    let n = train_rows.len() as f64;
    let mut stats = Vec::with_capacity(matrix.n_cols());
    for j in 0..matrix.n_cols() {
        if matrix.kinds[j] == ColumnKind::Dummy {
            stats.push(None);
            continue;
        }
        let mean = train_rows.iter().map(|&r| matrix.get(r, j)).sum::<f64>() / n;
        let var = train_rows.iter().map(|&r| (matrix.get(r, j) - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::DegenerateColumn { column: matrix.names[j].clone() });
        }
        stats.push(Some((mean, sd)));
    }
    Ok(Standardizer { columns: matrix.names.clone(), stats })
}

fn check_columns(std: &Standardizer, matrix: &DesignMatrix) -> Result<()> {
    if std.columns != matrix.names {
        return Err(Error::Shape(format!(
            "standardizer has {} columns, matrix has {} (or names differ)",
            std.columns.len(),
            matrix.names.len()
        )));
    }
    Ok(())
}

pub fn apply_standardizer(std: &Standardizer, matrix: &DesignMatrix) -> Result<DesignMatrix> {
    check_columns(std, matrix)?;
    let mut out = matrix.clone();
    let p = matrix.n_cols();
    for r in 0..matrix.n_rows() {
        for (j, s) in std.stats.iter().enumerate() {
            if let Some((m, sd)) = s {
                out.values[r * p + j] = (matrix.values[r * p + j] - m) / sd;
            }
        }
    }
    Ok(out)
}

pub fn invert_standardizer(std: &Standardizer, matrix: &DesignMatrix) -> Result<DesignMatrix> {
    check_columns(std, matrix)?;
    let mut out = matrix.clone();
    let p = matrix.n_cols();
    for r in 0..matrix.n_rows() {
        for (j, s) in std.stats.iter().enumerate() {
            if let Some((m, sd)) = s {
                out.values[r * p + j] = matrix.values[r * p + j] * sd + m;
            }
        }
    }
    Ok(out)
}

/// Train/test rows over a city-major row layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Row count per city; city `c` owns rows `offset(c)..offset(c)+city_rows[c]`.
    pub city_rows: Vec<usize>,
}

impl SplitIndex {
    pub fn offset(&self, city: usize) -> usize {
        self.city_rows[..city].iter().sum()
    }

    /// (city, row-within-city) of a global row.
    pub fn locate(&self, row: usize) -> Option<(usize, usize)> {
        let mut off = 0;
        for (c, &n) in self.city_rows.iter().enumerate() {
            if row < off + n {
                return Some((c, row - off));
            }
            off += n;
        }
        None
    }

    pub fn is_train(&self, row: usize) -> bool {
        self.train.binary_search(&row).is_ok()
    }

    /// Check disjointness, coverage and per-city temporal order given each row's date.
    pub fn validate(&self, row_dates: &[NaiveDate]) -> Result<()> {
        let total: usize = self.city_rows.iter().sum();
        if row_dates.len() != total || self.train.len() + self.test.len() != total {
            return Err(Error::Split("split does not cover every row exactly once".into()));
        }
        let mut seen = vec![false; total];
        for &r in self.train.iter().chain(&self.test) {
            if r >= total || seen[r] {
                return Err(Error::Split(format!("row {r} duplicated or out of range")));
            }
            seen[r] = true;
        }
        for c in 0..self.city_rows.len() {
            let off = self.offset(c);
            let range = off..off + self.city_rows[c];
            let max_train = self.train.iter().filter(|r| range.contains(r)).map(|&r| row_dates[r]).max();
            let min_test = self.test.iter().filter(|r| range.contains(r)).map(|&r| row_dates[r]).min();
            if let (Some(a), Some(b)) = (max_train, min_test) {
                if a >= b {
                    return Err(Error::Leakage(format!(
                        "city {c}: train date {a} is not before test date {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// First ⌊fraction·n⌋ rows of each city train, the rest test.
pub fn chronological_split(city_rows: &[usize], fraction: f64) -> Result<SplitIndex> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} not in (0, 1)")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut off = 0;
    for (c, &n) in city_rows.iter().enumerate() {
        if n < 2 {
            return Err(Error::Split(format!("city {c} has {n} rows; need ≥ 2")));
        }
        let k = (fraction * n as f64).floor() as usize;
        train.extend(off..off + k);
        test.extend(off + k..off + n);
        off += n;
    }
    Ok(SplitIndex { train, test, city_rows: city_rows.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};

    #[test]
    fn derive_hdd_fills_only_missing_cells() {
        let mut p = CityDailyPanel::new(vec!["A".into()], chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), 3);
        p.set(0, 0, Variable::Tmean, Some(10.0));
        p.set(0, 1, Variable::Tmean, Some(20.0));
        p.set(0, 1, Variable::Hdd, Some(1.5));
        assert_eq!(derive_hdd(&mut p), 1);
        assert_eq!(p.get(0, 0, Variable::Hdd), Some(7.0));
        assert_eq!(p.get(0, 1, Variable::Hdd), Some(1.5));
        assert_eq!(p.get(0, 2, Variable::Hdd), None);
    }

    #[test]
    fn hdd_threshold() {
        assert_eq!(compute_hdd(17.0), 0.0);
        assert_eq!(compute_hdd(20.0), 0.0);
        assert_eq!(compute_hdd(0.0), 17.0);
    }

    fn panel(cities: usize, days: usize) -> CityDailyPanel {
        generate_synthetic(&SyntheticConfig { cities, days, ..SyntheticConfig::default() }).unwrap()
    }

    #[test]
    fn design_column_counts() {
        let p = panel(1, 40);
        let spec = FeatureSpec {
            base: vec![Variable::Tv, Variable::Hdd],
            degree: 1,
            time_dummies: false,
            fixed_effects: vec![],
            target: Pollutant::Nox,
        };
        assert_eq!(build_design(&p, &spec).unwrap().n_cols(), 2);
    }

    #[test]
    fn design_powers_on_raw_scale() {
        let mut p = panel(1, 40);
        p.set(0, 0, Variable::Tv, Some(2.0));
        let spec = FeatureSpec {
            base: vec![Variable::Tv],
            degree: 3,
            time_dummies: false,
            fixed_effects: vec![],
            target: Pollutant::Nox,
        };
        let m = build_design(&p, &spec).unwrap();
        assert_eq!(m.names, vec!["TV", "TV^2", "TV^3"]);
        assert_eq!(m.row(0), &[2.0, 4.0, 8.0]);
        for r in 0..m.n_rows() {
            assert_eq!(m.get(r, 1), m.get(r, 0).powi(2));
        }
    }

    #[test]
    fn design_fixed_effect_counts() {
        // 2009-01-01 .. 2018-12-31
        let p = panel(3, 3652);
        let spec = FeatureSpec {
            base: vec![],
            degree: 1,
            time_dummies: false,
            fixed_effects: vec![FixedEffectKey::City, FixedEffectKey::Year],
            target: Pollutant::Pm25,
        };
        let m = build_design(&p, &spec).unwrap();
        assert_eq!(m.n_cols(), 2 + 9);
        assert!(m.kinds.iter().all(|k| *k == ColumnKind::Dummy));
        assert!(m.values.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn design_time_dummies() {
        let p = panel(1, 400);
        let mut spec = FeatureSpec::new(Pollutant::Nox);
        spec.base = vec![];
        spec.fixed_effects = vec![];
        let m = build_design(&p, &spec).unwrap();
        assert_eq!(m.n_cols(), 6 + 30 + 11);
        // short window: no 31st in the first 30 days only, but 400 days cover all
        let short = panel(1, 30);
        let m = build_design(&short, &spec).unwrap();
        // January only: DM_2..DM_30 present, DM_31 and MY_* absent
        assert_eq!(m.n_cols(), 6 + 29);
    }

    #[test]
    fn design_rejects_bad_spec() {
        assert!(matches!(FeatureSpec::from_names(&["TV", "CO2"], 1, Pollutant::Nox), Err(Error::Spec(_))));
        assert!(matches!(FeatureSpec::from_names(&["TV", "NOx"], 1, Pollutant::Nox), Err(Error::Spec(_))));
        assert!(matches!(FeatureSpec::from_names(&["TV"], 4, Pollutant::Nox), Err(Error::Spec(_))));
    }

    #[test]
    fn standardizer_hand_values() {
        let m = DesignMatrix::from_columns(&["x"], &[vec![1.0, 3.0]]).unwrap();
        let s = fit_standardizer(&m, &[0, 1]).unwrap();
        assert_eq!(s.stats[0], Some((2.0, 1.0)));
        let z = apply_standardizer(&s, &m).unwrap();
        assert_eq!(z.column(0), vec![-1.0, 1.0]);
    }

    #[test]
    fn standardizer_skips_dummies_and_rejects_constants() {
        let mut m = DesignMatrix::from_columns(&["x", "d"], &[vec![1.0, 2.0, 4.0], vec![0.0, 1.0, 0.0]]).unwrap();
        m.kinds[1] = ColumnKind::Dummy;
        let s = fit_standardizer(&m, &[0, 1, 2]).unwrap();
        assert!(s.stats[1].is_none());
        let z = apply_standardizer(&s, &m).unwrap();
        assert_eq!(z.column(1), vec![0.0, 1.0, 0.0]);

        let c = DesignMatrix::from_columns(&["c"], &[vec![5.0, 5.0, 5.0]]).unwrap();
        match fit_standardizer(&c, &[0, 1, 2]) {
            Err(Error::DegenerateColumn { column }) => assert_eq!(column, "c"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn standardizer_apply_mean_maps_to_zero_and_shape_errors() {
        let m = DesignMatrix::from_columns(&["x"], &[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = fit_standardizer(&m, &[0, 1, 2]).unwrap();
        assert_eq!(apply_standardizer(&s, &m).unwrap().get(1, 0), 0.0);
        let s2 = Standardizer { columns: vec!["x".into()], stats: vec![Some((2.0, 1.0))] };
        let one = DesignMatrix::from_columns(&["x"], &[vec![3.0]]).unwrap();
        assert_eq!(apply_standardizer(&s2, &one).unwrap().get(0, 0), 1.0);
        let other = DesignMatrix::from_columns(&["y"], &[vec![1.0]]).unwrap();
        assert!(matches!(apply_standardizer(&s, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn split_examples() {
        let s = chronological_split(&[10], 0.8).unwrap();
        assert_eq!(s.train, (0..8).collect::<Vec<_>>());
        assert_eq!(s.test, vec![8, 9]);
        let s = chronological_split(&[5], 0.8).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (4, 1));
        let s = chronological_split(&[10, 10], 0.8).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (16, 4));
        assert_eq!(s.locate(12), Some((1, 2)));
        assert!(matches!(chronological_split(&[10, 1], 0.8), Err(Error::Split(_))));
        assert!(matches!(chronological_split(&[10], 1.0), Err(Error::Split(_))));
    }

    #[test]
    fn split_validate_detects_leakage() {
        let p = panel(2, 50);
        let m = build_design(&p, &FeatureSpec { base: vec![Variable::Tv], degree: 1, time_dummies: false, fixed_effects: vec![], target: Pollutant::Nox }).unwrap();
        let dates: Vec<NaiveDate> = m.rows.iter().map(|r| r.date).collect();
        let s = chronological_split(&[50, 50], 0.8).unwrap();
        s.validate(&dates).unwrap();
        let mut bad = s.clone();
        bad.train.swap_remove(0);
        bad.test.push(0);
        bad.train.sort_unstable();
        bad.test.sort_unstable();
        assert!(matches!(bad.validate(&dates), Err(Error::Leakage(_))));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn hdd_nonnegative_and_zero_iff_warm(t in -40.0f64..45.0) {
            let h = compute_hdd(t);
            prop_assert!(h >= 0.0);
            prop_assert_eq!(h == 0.0, t >= 17.0);
        }

        #[test]
        fn standardized_train_columns_are_unit(xs in proptest::collection::vec(-1e3f64..1e3, 3..60)) {
            prop_assume!(crate::linalg::pop_sd(&xs) > 1e-3);
            let m = DesignMatrix::from_columns(&["x"], &[xs.clone()]).unwrap();
            let rows: Vec<usize> = (0..xs.len()).collect();
            let s = fit_standardizer(&m, &rows).unwrap();
            let z = apply_standardizer(&s, &m).unwrap().column(0);
            prop_assert!(crate::linalg::mean(&z).abs() <= 1e-10);
            prop_assert!((crate::linalg::pop_sd(&z) - 1.0).abs() <= 1e-10);
            let back = invert_standardizer(&s, &apply_standardizer(&s, &m).unwrap()).unwrap();
            for (a, b) in back.column(0).iter().zip(&xs) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn split_is_leakage_free(counts in proptest::collection::vec(2usize..200, 1..5), frac in 0.05f64..0.95) {
            let s = chronological_split(&counts, frac).unwrap();
            for c in 0..counts.len() {
                let off = s.offset(c);
                let range = off..off + counts[c];
                let max_train = s.train.iter().filter(|r| range.contains(r)).max();
                let min_test = s.test.iter().filter(|r| range.contains(r)).min();
                if let (Some(a), Some(b)) = (max_train, min_test) {
                    prop_assert!(a < b);
                }
            }
            prop_assert_eq!(s.train.len() + s.test.len(), counts.iter().sum::<usize>());
        }
    }
}
