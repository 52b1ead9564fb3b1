//! RMSE metrics, the LSTM-vs-PBDL comparison table, and plot-data export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{predict, write_predictions_csv, Architecture, SequenceDataset, TrainedModel};

pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Shape(format!("{} predictions vs {} actuals", predicted.len(), actual.len())));
    }
    if predicted.is_empty() {
        return Err(Error::EmptyInput("rmse of empty vectors".into()));
    }
    let sse: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum();
    Ok((sse / predicted.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub city: String,
    pub pollutant: String,
    pub model: Architecture,
    pub rmse_standardized: f64,
    pub rmse_raw: f64,
    /// Raw-scale mean and max of the city's pollutant series.
    pub target_mean: f64,
    pub target_max: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.rows {
            if !(r.rmse_standardized >= 0.0 && r.rmse_raw >= 0.0) {
                return Err(Error::Contract(format!("negative or NaN RMSE for {} {}", r.city, r.pollutant)));
            }
            if !seen.insert((r.city.clone(), r.pollutant.clone(), r.model)) {
                return Err(Error::Contract(format!("duplicate metrics row for {} {} {:?}", r.city, r.pollutant, r.model)));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let rows = rd.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Ok(Self { rows, metadata: BTreeMap::new() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Winner {
    #[serde(rename = "PBDL")]
    Pbdl,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "tie")]
    Tie,
    #[serde(rename = "incomplete")]
    Incomplete,
}

impl Winner {
    pub fn label(self) -> &'static str {
        match self {
            Winner::Pbdl => "PBDL",
            Winner::Lstm => "LSTM",
            Winner::Tie => "tie",
            Winner::Incomplete => "incomplete",
        }
    }
}

pub fn winner(lstm: Option<f64>, pbdl: Option<f64>) -> Winner {
    match (lstm, pbdl) {
        (Some(l), Some(p)) if l == p => Winner::Tie,
        (Some(l), Some(p)) if p < l => Winner::Pbdl,
        (Some(_), Some(_)) => Winner::Lstm,
        _ => Winner::Incomplete,
    }
}

/// Concentration a better model buys back: `scale · (lstm − pbdl)`.
pub fn accuracy_gain(scale: f64, lstm_rmse: f64, pbdl_rmse: f64) -> f64 {
    scale * (lstm_rmse - pbdl_rmse)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub city: String,
    pub pollutant: String,
    pub lstm_rmse: Option<f64>,
    pub pbdl_rmse: Option<f64>,
    pub winner: Winner,
    pub gain_mean_ugm3: Option<f64>,
    pub gain_max_ugm3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ComparisonTable {
    pub fn row(&self, city: &str, pollutant: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.city == city && r.pollutant == pollutant)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["city", "pollutant", "lstm_rmse", "pbdl_rmse", "winner", "gain_mean_ugm3", "gain_max_ugm3"])?;
        for r in &self.rows {
            w.write_record([
                r.city.clone(),
                r.pollutant.clone(),
                opt(r.lstm_rmse),
                opt(r.pbdl_rmse),
                r.winner.label().to_string(),
                opt(r.gain_mean_ugm3),
                opt(r.gain_max_ugm3),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let parse = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Contract(format!("bad number `{s}` in comparison table")))
            }
        };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let winner = match &rec[4] {
                "PBDL" => Winner::Pbdl,
                "LSTM" => Winner::Lstm,
                "tie" => Winner::Tie,
                "incomplete" => Winner::Incomplete,
                other => return Err(Error::Contract(format!("unknown winner `{other}`"))),
            };
            rows.push(ComparisonRow {
                city: rec[0].to_string(),
                pollutant: rec[1].to_string(),
                lstm_rmse: parse(&rec[2])?,
                pbdl_rmse: parse(&rec[3])?,
                winner,
                gain_mean_ugm3: parse(&rec[5])?,
                gain_max_ugm3: parse(&rec[6])?,
            });
        }
        Ok(Self { rows })
    }
}

/// Merge per-model metric reports into one row per (city, pollutant) using
/// standardized RMSE. Every report must cover the same cells.
pub fn compare_models(reports: &[MetricsReport]) -> Result<ComparisonTable> {
    type Cell = (String, String);
    let mut cells: Option<std::collections::BTreeSet<Cell>> = None;
    let mut merged: BTreeMap<Cell, (Option<f64>, Option<f64>, f64, f64)> = BTreeMap::new();
    for rep in reports {
        rep.validate()?;
        let these: std::collections::BTreeSet<Cell> = rep.rows.iter().map(|r| (r.city.clone(), r.pollutant.clone())).collect();
        match &cells {
            None => cells = Some(these),
            Some(c) if *c != these => {
                return Err(Error::Alignment("metric reports cover different (city, pollutant) cells".into()));
            }
            Some(_) => {}
        }
        for r in &rep.rows {
            let e = merged.entry((r.city.clone(), r.pollutant.clone())).or_insert((None, None, r.target_mean, r.target_max));
            let slot = match r.model {
                Architecture::Lstm => &mut e.0,
                Architecture::Pbdl => &mut e.1,
            };
            if slot.is_some() {
                return Err(Error::Alignment(format!("{} {} reported twice for {:?}", r.city, r.pollutant, r.model)));
            }
            *slot = Some(r.rmse_standardized);
        }
    }
    let rows = merged
        .into_iter()
        .map(|((city, pollutant), (lstm, pbdl, mean, max))| {
            let both = lstm.zip(pbdl);
            ComparisonRow {
                city,
                pollutant,
                lstm_rmse: lstm,
                pbdl_rmse: pbdl,
                winner: winner(lstm, pbdl),
                gain_mean_ugm3: both.map(|(l, p)| accuracy_gain(mean, l, p)),
                gain_max_ugm3: both.map(|(l, p)| accuracy_gain(max, l, p)),
            }
        })
        .collect();
    Ok(ComparisonTable { rows })
}

/// Loss trace and actual-vs-predicted CSVs for one model; returns the paths.
pub fn export_plot_data(model: &TrainedModel, test: &SequenceDataset, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let trace = dir.join(format!("{stem}_loss.csv"));
    let preds = dir.join(format!("{stem}_predictions.csv"));
    model.trace.write_csv(&trace)?;
    let predicted = predict(model, test)?;
    write_predictions_csv(&preds, test, &predicted)?;
    Ok(vec![trace, preds])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(model: Architecture, cells: &[(&str, &str, f64)]) -> MetricsReport {
        MetricsReport {
            rows: cells
                .iter()
                .map(|&(c, p, r)| MetricRow {
                    city: c.into(),
                    pollutant: p.into(),
                    model,
                    rmse_standardized: r,
                    rmse_raw: r,
                    target_mean: 10.88,
                    target_max: 53.0,
                })
                .collect(),
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn rmse_hand_values() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 2.0);
        let a = [1.0, 4.0, 2.0, 9.0];
        let m = crate::linalg::mean(&a);
        assert!((rmse(&[m; 4], &a).unwrap() - crate::linalg::pop_sd(&a)).abs() < 1e-12);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn winners() {
        let t = compare_models(&[
            report(Architecture::Lstm, &[("Trondheim", "PM25", 1.0320), ("Bergen", "NOx", 1.0190)]),
            report(Architecture::Pbdl, &[("Trondheim", "PM25", 0.4448), ("Bergen", "NOx", 1.0442)]),
        ])
        .unwrap();
        assert_eq!(t.row("Trondheim", "PM25").unwrap().winner, Winner::Pbdl);
        assert_eq!(t.row("Bergen", "NOx").unwrap().winner, Winner::Lstm);
        assert_eq!(winner(Some(0.5), Some(0.5)), Winner::Tie);
        assert_eq!(winner(None, Some(0.5)), Winner::Incomplete);
    }

    #[test]
    fn gain_reproduces_published_arithmetic() {
        let g = accuracy_gain(10.88, 1.0320, 0.4448);
        assert!((g - 6.388736).abs() < 1e-12);
        assert_eq!(format!("{g:.2}"), "6.39");
        assert_eq!(format!("{:.2}", accuracy_gain(53.0, 1.0320, 0.4448)), "31.12");
    }

    #[test]
    fn coverage_mismatch_is_an_alignment_error() {
        let r = compare_models(&[
            report(Architecture::Lstm, &[("Oslo", "NOx", 0.7640)]),
            report(Architecture::Pbdl, &[("Bergen", "NOx", 0.7458)]),
        ]);
        assert!(matches!(r, Err(Error::Alignment(_))));
    }

    #[test]
    fn comparison_csv_round_trip() {
        let t = compare_models(&[
            report(Architecture::Pbdl, &[("Oslo", "NOx", 0.7458)]),
            report(Architecture::Lstm, &[("Oslo", "NOx", 0.7640)]),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cmp.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(ComparisonTable::read_csv(&p).unwrap(), t);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("city,pollutant,lstm_rmse,pbdl_rmse,winner,gain_mean_ugm3,gain_max_ugm3\n"));
    }
}
