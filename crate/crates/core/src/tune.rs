//! Seeded random hyperparameter search.

use std::path::Path;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{train_lstm, train_pbdl, LstmConfig, ModelConfig, PbdlConfig, SequenceDataset, TrainedModel};
use crate::rng::SeedStream;

/// LSTM domains. A sampled network has an input layer, `layers` middle
/// layers and a last layer; every layer draws its own units and dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmSpace {
    pub units: Vec<usize>,
    pub dropout: Vec<f64>,
    pub layers: Vec<usize>,
    pub learning_rate: Vec<f64>,
    /// Fields that are not searched (epochs, batch size, L2).
    pub base: LstmConfig,
}

impl Default for LstmSpace {
    fn default() -> Self {
        Self {
            units: (32..=512).step_by(16).collect(),
            dropout: vec![0.2, 0.4, 0.6, 0.8],
            layers: vec![1, 2, 3, 4],
            learning_rate: vec![1e-2, 1e-3, 1e-4],
            base: LstmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbdlSpace {
    pub learning_rate: Vec<f64>,
    pub units: Vec<usize>,
    pub layers: Vec<usize>,
    pub l2: Vec<Option<f64>>,
    /// Not in the published ranges; added so the ODE weight is tuned too.
    pub ode_weight: Vec<f64>,
    pub base: PbdlConfig,
}

impl Default for PbdlSpace {
    fn default() -> Self {
        Self {
            learning_rate: vec![1e-4, 5e-4, 1e-3, 5e-3, 1e-2],
            units: (50..=200).collect(),
            layers: vec![1, 2, 3, 4],
            l2: vec![None, Some(1e-2), Some(1e-3)],
            ode_weight: vec![0.1, 1.0, 10.0],
            base: PbdlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum SearchSpace {
    Lstm(LstmSpace),
    Pbdl(PbdlSpace),
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let empty = match self {
            SearchSpace::Lstm(s) => {
                s.units.is_empty() || s.dropout.is_empty() || s.layers.is_empty() || s.learning_rate.is_empty()
            }
            SearchSpace::Pbdl(s) => {
                s.units.is_empty()
                    || s.layers.is_empty()
                    || s.learning_rate.is_empty()
                    || s.l2.is_empty()
                    || s.ode_weight.is_empty()
            }
        };
        if empty {
            return Err(Error::Config("every search domain must be non-empty".into()));
        }
        Ok(())
    }

    /// True when the space searches a hyperparameter the published ranges omit.
    pub fn extends_published_ranges(&self) -> bool {
        matches!(self, SearchSpace::Pbdl(_))
    }
}

/// One uniform, independent draw per hyperparameter.
pub fn sample_config(space: &SearchSpace, seed: u64) -> Result<ModelConfig> {
    space.validate()?;
    let mut rng = crate::rng::rng_from_seed(seed);
    let config = match space {
        SearchSpace::Lstm(s) => {
            let learning_rate = *s.learning_rate.choose(&mut rng).unwrap();
            let middle = *s.layers.choose(&mut rng).unwrap();
            let total = middle + 2;
            let mut units = Vec::with_capacity(total);
            let mut dropout = Vec::with_capacity(total);
            for _ in 0..total {
                units.push(*s.units.choose(&mut rng).unwrap());
                dropout.push(*s.dropout.choose(&mut rng).unwrap());
            }
            ModelConfig::Lstm(LstmConfig { units, dropout, learning_rate, ..s.base.clone() })
        }
        SearchSpace::Pbdl(s) => {
            let learning_rate = *s.learning_rate.choose(&mut rng).unwrap();
            let units = *s.units.choose(&mut rng).unwrap();
            let layers = *s.layers.choose(&mut rng).unwrap();
            let l2 = *s.l2.choose(&mut rng).unwrap();
            let ode_weight = *s.ode_weight.choose(&mut rng).unwrap();
            ModelConfig::Pbdl(PbdlConfig { units: vec![units; layers], learning_rate, l2, ode_weight, ..s.base.clone() })
        }
    };
    Ok(config)
}

pub fn with_seed(config: &ModelConfig, seed: u64) -> ModelConfig {
    match config {
        ModelConfig::Lstm(c) => ModelConfig::Lstm(LstmConfig { seed, ..c.clone() }),
        ModelConfig::Pbdl(c) => ModelConfig::Pbdl(PbdlConfig { seed, ..c.clone() }),
    }
}

pub fn train_config(config: &ModelConfig, train: &SequenceDataset) -> Result<TrainedModel> {
    match config {
        ModelConfig::Lstm(c) => train_lstm(train, c),
        ModelConfig::Pbdl(c) => train_pbdl(train, c),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: ModelConfig,
    pub seeds: Vec<u64>,
    pub val_losses: Vec<f64>,
    pub mean_val_loss: f64,
    pub status: TrialStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub trials: Vec<Trial>,
    pub best_index: usize,
    pub best_config: ModelConfig,
    pub extended_space: bool,
}

impl TuneReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["trial", "config_json", "mean_val_loss", "status"])?;
        for t in &self.trials {
            let status = match t.status {
                TrialStatus::Ok => "ok",
                TrialStatus::Failed => "failed",
            };
            w.write_record([
                t.index.to_string(),
                serde_json::to_string(&t.config)?,
                t.mean_val_loss.to_string(),
                status.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn validation_loss(model: &TrainedModel, val: &SequenceDataset) -> Result<f64> {
    let pred = model.predict_standardized(val)?;
    Ok(pred.iter().zip(&val.targets).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / val.len() as f64)
}

/// Sample `trials` configurations, train each `runs_per_trial` times with
/// derived seeds, and keep the lowest mean validation loss (earliest on
/// ties). A diverging run fails its trial with infinite loss.
pub fn random_search(
    space: &SearchSpace,
    trials: usize,
    runs_per_trial: usize,
    train: &SequenceDataset,
    val: &SequenceDataset,
    seed: u64,
) -> Result<TuneReport> {
    space.validate()?;
    if trials == 0 || runs_per_trial == 0 {
        return Err(Error::Argument("trials and runs per trial must be at least 1".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyInput("validation set is empty".into()));
    }
    let seeds = SeedStream::new(seed);
    let results: Vec<Result<Trial>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let config = sample_config(space, seeds.seed_indexed("trial", k as u64))?;
            let run_seeds: Vec<u64> = (0..runs_per_trial)
                .map(|r| seeds.seed_indexed(&format!("trial/{k}/run"), r as u64))
                .collect();
            let mut val_losses = Vec::with_capacity(runs_per_trial);
            let mut failed = false;
            for &s in &run_seeds {
                match train_config(&with_seed(&config, s), train).and_then(|m| validation_loss(&m, val)) {
                    Ok(loss) if loss.is_finite() => val_losses.push(loss),
                    Ok(_) | Err(Error::Divergence { .. }) => {
                        log::warn!("trial {k} diverged");
                        failed = true;
                        val_losses.push(f64::INFINITY);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let mean_val_loss = if failed {
                f64::INFINITY
            } else {
                val_losses.iter().sum::<f64>() / val_losses.len() as f64
            };
            Ok(Trial {
                index: k,
                config,
                seeds: run_seeds,
                val_losses,
                mean_val_loss,
                status: if failed { TrialStatus::Failed } else { TrialStatus::Ok },
            })
        })
        .collect();
    let trials: Vec<Trial> = results.into_iter().collect::<Result<_>>()?;
    let best_index = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Ok)
        .min_by(|a, b| a.mean_val_loss.total_cmp(&b.mean_val_loss).then(a.index.cmp(&b.index)))
        .map(|t| t.index)
        .ok_or(Error::AllTrialsFailed)?;
    Ok(TuneReport {
        best_config: trials[best_index].config.clone(),
        best_index,
        extended_space: space.extends_published_ranges(),
        trials,
    })
}
