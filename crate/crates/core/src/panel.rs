//! Fixed-effects polynomial panel regression and significance ranking.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{CityDailyPanel, Variable};
use crate::error::{Error, Result};
use crate::features::{ColumnKind, DesignMatrix};
use crate::linalg;

pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub coefficient: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub fixed_effect: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelModelFit {
    /// Intercept first, then design columns in order.
    pub terms: Vec<Term>,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
    pub n: usize,
    pub p: usize,
}

impl PanelModelFit {
    pub fn term(&self, name: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.term(name).map(|t| t.coefficient)
    }

    pub fn fixed_effects(&self) -> impl Iterator<Item = (&str, f64)> {
        self.terms.iter().filter(|t| t.fixed_effect).map(|t| (t.name.as_str(), t.coefficient))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["feature", "coefficient", "std_error", "t_stat"])?;
        for t in &self.terms {
            w.write_record([
                t.name.clone(),
                t.coefficient.to_string(),
                t.std_error.to_string(),
                t.t_stat.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// OLS with an intercept through the normal equations.
///
/// `XᵀX` is factored with a rank-revealing symmetric eigendecomposition;
/// standard errors are homoskedastic, `σ̂²(XᵀX)⁻¹` with `σ̂² = SSR/(n − p)`.
/// All-zero dummy columns are dropped before fitting. `fe_keys` names the
/// design columns reported as fixed effects.
pub fn fit_panel_ols(design: &DesignMatrix, response: &[f64], fe_keys: &[String]) -> Result<PanelModelFit> {
    let n = design.n_rows();
    if response.len() != n {
        return Err(Error::Shape(format!("response has {} rows, design {n}", response.len())));
    }
    let keep: Vec<usize> = (0..design.n_cols())
        .filter(|&j| {
            let drop = design.kinds[j] == ColumnKind::Dummy && (0..n).all(|r| design.get(r, j) == 0.0);
            if drop {
                log::warn!("dropping all-zero dummy {}", design.names[j]);
            }
            !drop
        })
        .collect();
    let p = keep.len() + 1;
    if p >= n {
        return Err(Error::Argument(format!("need more rows ({n}) than parameters ({p})")));
    }
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(keep.iter().map(|&j| design.names[j].clone()));

    let x = DMatrix::from_fn(n, p, |r, j| if j == 0 { 1.0 } else { design.get(r, keep[j - 1]) });
    let y = DVector::from_column_slice(response);
    let gram = x.transpose() * &x;
    let factor = linalg::factor_gram(&gram, 1e-12).map_err(|cols| Error::Collinearity {
        columns: cols.into_iter().map(|c| names[c].clone()).collect(),
    })?;
    let xty = x.transpose() * &y;
    let beta = &factor.inverse * xty;
    let fitted = &x * &beta;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let ssr: f64 = residuals.iter().map(|e| e * e).sum();
    let ybar = linalg::mean(response);
    let sst: f64 = response.iter().map(|v| (v - ybar).powi(2)).sum();
    let r_squared = if sst > 0.0 { (1.0 - ssr / sst).clamp(0.0, 1.0) } else { 1.0 };
    let sigma2 = ssr / (n - p) as f64;

    let terms = names
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let se = (sigma2 * factor.inverse[(j, j)]).max(0.0).sqrt();
            let coefficient = beta[j];
            let t_stat = if se > 0.0 {
                coefficient / se
            } else if coefficient == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(coefficient)
            };
            Term {
                fixed_effect: fe_keys.contains(&name),
                name,
                coefficient,
                std_error: se,
                t_stat,
            }
        })
        .collect();
    Ok(PanelModelFit { terms, r_squared, residuals, n, p })
}

/// Fixed-effect column names produced by [`crate::features::build_design`].
pub fn fixed_effect_columns(design: &DesignMatrix) -> Vec<String> {
    design
        .names
        .iter()
        .filter(|n| n.starts_with("city_") || n.starts_with("year_"))
        .cloned()
        .collect()
}

/// Non-intercept, non-fixed-effect terms by descending |t|, ties by name.
/// `k` larger than the number of terms is truncated with a warning.
pub fn rank_features_by_significance(fit: &PanelModelFit, k: usize) -> Vec<String> {
    let mut terms: Vec<&Term> = fit.terms.iter().filter(|t| t.name != INTERCEPT && !t.fixed_effect).collect();
    terms.sort_by(|a, b| {
        b.t_stat
            .abs()
            .partial_cmp(&a.t_stat.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });
    if k > terms.len() {
        log::warn!("requested top {k} features but the fit has {}", terms.len());
    }
    terms.into_iter().take(k).map(|t| t.name.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.values[i][j])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![String::new()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.names.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pairwise Pearson correlations of named columns.
pub fn correlation_matrix(names: &[String], columns: &[Vec<f64>]) -> Result<CorrelationMatrix> {
    let n = columns.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(Error::Argument("correlation needs at least 2 rows".into()));
    }
    if columns.iter().any(|c| c.len() != n) || names.len() != columns.len() {
        return Err(Error::Shape("columns of unequal length".into()));
    }
    let centered: Vec<(Vec<f64>, f64)> = names
        .iter()
        .zip(columns)
        .map(|(name, col)| {
            let m = linalg::mean(col);
            let c: Vec<f64> = col.iter().map(|v| v - m).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::DegenerateColumn { column: name.clone() });
            }
            Ok((c, norm))
        })
        .collect::<Result<_>>()?;
    let p = names.len();
    let mut values = vec![vec![0.0; p]; p];
    for i in 0..p {
        values[i][i] = 1.0;
        for j in (i + 1)..p {
            let dot: f64 = centered[i].0.iter().zip(&centered[j].0).map(|(a, b)| a * b).sum();
            let r = (dot / (centered[i].1 * centered[j].1)).clamp(-1.0, 1.0);
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix { names: names.to_vec(), values })
}

pub fn correlation_of_design(design: &DesignMatrix) -> Result<CorrelationMatrix> {
    let cols: Vec<Vec<f64>> = (0..design.n_cols()).map(|j| design.column(j)).collect();
    correlation_matrix(&design.names, &cols)
}

/// Correlations of panel variables pooled over cities.
pub fn correlation_of_panel(panel: &CityDailyPanel, vars: &[Variable]) -> Result<CorrelationMatrix> {
    let cols = vars
        .iter()
        .map(|&v| {
            Ok((0..panel.cities().len())
                .map(|c| panel.complete_column(c, v))
                .collect::<Result<Vec<_>>>()?
                .concat())
        })
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = vars.iter().map(|v| v.name().to_string()).collect();
    correlation_matrix(&names, &cols)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ranking_is_scale_invariant(scale in 0.01f64..100.0, col in 0usize..3, seed in 0u64..1000) {
            let mut rng = crate::rng::rng_from_seed(seed);
            use rand::Rng;
            let n = 120;
            let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
            let y: Vec<f64> = (0..n).map(|i| 3.0 * cols[0][i] + 1.0 * cols[1][i] + 0.2 * cols[2][i] + 0.3 * rng.random::<f64>()).collect();
            let d = DesignMatrix::from_columns(&["a", "b", "c"], &cols).unwrap();
            let mut scaled = cols.clone();
            for v in &mut scaled[col] { *v *= scale; }
            let d2 = DesignMatrix::from_columns(&["a", "b", "c"], &scaled).unwrap();
            let r1 = rank_features_by_significance(&fit_panel_ols(&d, &y, &[]).unwrap(), 3);
            let r2 = rank_features_by_significance(&fit_panel_ols(&d2, &y, &[]).unwrap(), 3);
            prop_assert_eq!(r1, r2);
        }
    }
}
