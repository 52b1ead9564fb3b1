//! Batch command-line front end. Every command reads a JSON run
//! configuration, writes its artifacts under the output directory and
//! records a manifest with the digests of what it read and wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cluster::{cut_dendrogram, hierarchical, kmeans, write_assignments, Linkage, VariablePointSet};
use crate::dataset::{
    aggregate_city_daily, generate_synthetic, impute_missing, parse_csv, CityDailyPanel, CsvSchema, Pollutant,
    SyntheticConfig, Variable,
};
use crate::error::{Error, Result};
use crate::eval::{compare_models, export_plot_data, rmse, ComparisonTable, MetricRow, MetricsReport};
use crate::features::{build_design, chronological_split, FeatureSpec, FixedEffectKey, SplitIndex};
use crate::forecaster::{
    build_sequences, predict, target_stats, write_predictions_csv, Architecture, LstmConfig, ModelConfig, PbdlConfig,
    SequenceDataset, TrainedModel,
};
use crate::forest::{fit_forest, oob_permutation_importance, ForestParams};
use crate::panel::{correlation_of_panel, fit_panel_ols, fixed_effect_columns, rank_features_by_significance};
use crate::rng::SeedStream;
use crate::tune::{random_search, train_config, with_seed, LstmSpace, PbdlSpace, SearchSpace};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format observation CSVs (`date,city,station,variable,value`).
    pub paths: Vec<PathBuf>,
    #[serde(default)]
    pub date_from: Option<NaiveDate>,
    #[serde(default)]
    pub date_to: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputationConfig {
    pub max_iter: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {
    pub base: Vec<Variable>,
    pub degree: u8,
    pub time_dummies: bool,
    pub fixed_effects: Vec<FixedEffectKey>,
    /// Features kept by the significance ranking.
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub linkage: Linkage,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub window: usize,
    /// Tail of the training windows held out for tuning.
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmByPollutant {
    pub nox: LstmConfig,
    pub pm25: LstmConfig,
}

impl LstmByPollutant {
    pub fn get(&self, p: Pollutant) -> &LstmConfig {
        match p {
            Pollutant::Nox => &self.nox,
            Pollutant::Pm25 => &self.pm25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub pbdl: PbdlConfig,
    pub lstm: LstmByPollutant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub trials: usize,
    pub runs_per_trial: usize,
    pub pbdl: PbdlSpace,
    pub lstm: LstmSpace,
    /// Train with the tuned configuration when one exists.
    pub use_tuned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: Option<DataConfig>,
    /// Its `seed` is replaced by one derived from the master seed.
    pub synthetic: Option<SyntheticConfig>,
    pub pollutants: Vec<Pollutant>,
    pub imputation: ImputationConfig,
    pub features: FeaturesConfig,
    pub cluster: ClusterConfig,
    pub forest: ForestConfig,
    pub split: SplitConfig,
    pub models: ModelsConfig,
    pub tune: TuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("airphys-out"),
            data: None,
            synthetic: Some(SyntheticConfig::default()),
            pollutants: Pollutant::ALL.to_vec(),
            imputation: ImputationConfig { max_iter: 50, tol: 1e-6 },
            features: FeaturesConfig {
                base: Variable::REGRESSORS.to_vec(),
                degree: 3,
                time_dummies: true,
                fixed_effects: vec![FixedEffectKey::City, FixedEffectKey::Year],
                top_k: 10,
            },
            cluster: ClusterConfig { k: 3, linkage: Linkage::Average, max_iter: 100 },
            forest: ForestConfig { trees: 500, mtry: None, min_leaf: 5, repeats: 1 },
            split: SplitConfig { train_fraction: 0.8, window: crate::forecaster::DEFAULT_WINDOW, validation_fraction: 0.2 },
            models: ModelsConfig {
                pbdl: PbdlConfig::default(),
                lstm: LstmByPollutant { nox: LstmConfig::tuned(Pollutant::Nox), pm25: LstmConfig::tuned(Pollutant::Pm25) },
            },
            tune: TuneConfig {
                trials: 10,
                runs_per_trial: 2,
                pbdl: PbdlSpace::default(),
                lstm: LstmSpace::default(),
                use_tuned: true,
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.is_some() == self.synthetic.is_some() {
            return Err(Error::Config("exactly one of `data` and `synthetic` must be set".into()));
        }
        if let Some(d) = &self.data {
            if d.paths.is_empty() {
                return Err(Error::Config("`data.paths` is empty".into()));
            }
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.pollutants.is_empty() {
            return Err(Error::Config("`pollutants` is empty".into()));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::Config("`split.train_fraction` must lie in (0, 1)".into()));
        }
        if !(self.split.validation_fraction > 0.0 && self.split.validation_fraction < 1.0) {
            return Err(Error::Config("`split.validation_fraction` must lie in (0, 1)".into()));
        }
        if self.split.window == 0 {
            return Err(Error::Config("`split.window` must be ≥ 1".into()));
        }
        self.models.pbdl.validate()?;
        self.models.lstm.nox.validate()?;
        self.models.lstm.pm25.validate()?;
        if self.tune.trials == 0 || self.tune.runs_per_trial == 0 {
            return Err(Error::Config("`tune.trials` and `tune.runs_per_trial` must be ≥ 1".into()));
        }
        SearchSpace::Pbdl(self.tune.pbdl.clone()).validate()?;
        SearchSpace::Lstm(self.tune.lstm.clone()).validate()?;
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Recursively overlay `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Set a dotted key; numeric segments index arrays. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("`{key}`: `{part}` is not an array index")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("`{key}`: index {idx} out of range")))?
            }
            Value::Object(map) => {
                if !last && !map.get(*part).is_some_and(|v| v.is_object() || v.is_array()) {
                    map.insert(part.to_string(), Value::Object(Default::default()));
                }
                map.entry(part.to_string()).or_insert(Value::Null)
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().unwrap().entry(part.to_string()).or_insert(Value::Null)
            }
            _ => return Err(Error::Config(format!("`{key}`: cannot descend into a scalar at `{part}`"))),
        };
    }
    *node = value;
    Ok(())
}

/// Defaults, overlaid with the config file, overlaid with `--set` pairs.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default())?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        let user: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?;
        if user.get("data").is_some() && user.get("synthetic").is_none() {
            doc["synthetic"] = Value::Null;
        }
        merge(&mut doc, user);
    }
    for o in overrides {
        if o.starts_with("data.") || o.starts_with("data=") {
            doc["synthetic"] = Value::Null;
        }
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Pbdl,
    Lstm,
    All,
}

impl ModelChoice {
    fn architectures(self) -> Vec<Architecture> {
        match self {
            ModelChoice::Pbdl => vec![Architecture::Pbdl],
            ModelChoice::Lstm => vec![Architecture::Lstm],
            ModelChoice::All => vec![Architecture::Lstm, Architecture::Pbdl],
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "airphys", version, about = "Air-quality feature selection and pollutant forecasting")]
pub struct Cli {
    /// JSON run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted-key override, e.g. `--set models.pbdl.epochs=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse long-format CSVs, aggregate to city-day and impute.
    Ingest,
    /// Generate a synthetic city-day panel.
    Synth,
    /// Build the regression design and correlation matrix.
    Features,
    /// Fit panel OLS and rank regressors by |t|.
    Panel,
    /// K-means and hierarchical clustering of variables.
    Cluster,
    /// Random forest with out-of-bag permutation importance.
    Forest,
    /// Random hyperparameter search.
    Tune {
        #[arg(long, value_enum, default_value = "all")]
        model: ModelChoice,
    },
    /// Train per-city forecasters.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        model: ModelChoice,
    },
    /// Predict the test windows and compare models.
    Evaluate,
    /// Rebuild the comparison from stored predictions plus a feature-selection summary.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Synth => "synth",
            Command::Features => "features",
            Command::Panel => "panel",
            Command::Cluster => "cluster",
            Command::Forest => "forest",
            Command::Tune { .. } => "tune",
            Command::Train { .. } => "train",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }
}

/// Exit code for an error: 1 configuration, 3 divergence, 2 everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Spec(_) => 1,
        Error::Divergence { .. } | Error::AllTrialsFailed => 3,
        _ => 2,
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub master_seed: u64,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the output directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub created_unix: u64,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    streams: SeedStream,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    fn seed(&mut self, name: &str) -> u64 {
        let s = self.streams.seed(name);
        self.seeds.insert(name.to_string(), s);
        s
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn input(&mut self, p: &Path) -> Result<()> {
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p.to_path_buf(), hint: "run the upstream command first".into() });
        }
        let d = sha256_file(p)?;
        self.inputs.insert(self.rel(p), d);
        Ok(())
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn write_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
        self.outputs.push(path);
        Ok(())
    }

    fn manifest(&self, command: &str, dir: &Path) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(self.rel(p), sha256_file(p)?);
        }
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let m = Manifest {
            command: command.into(),
            version: VERSION.into(),
            master_seed: self.cfg.seed,
            config_sha256: self.cfg.digest()?,
            seeds: self.seeds.clone(),
            inputs: self.inputs.clone(),
            outputs,
            created_unix,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    /// Read the panel written by `ingest`/`synth`, recording its files as inputs.
    fn load_panel(&mut self) -> Result<CityDailyPanel> {
        let dir = self.out.join("data");
        let cities_path = dir.join("cities.json");
        if !cities_path.exists() {
            return Err(Error::MissingArtifact { path: cities_path, hint: "run `ingest` or `synth` first".into() });
        }
        self.input(&cities_path)?;
        let cities: Vec<String> = serde_json::from_str(&std::fs::read_to_string(&cities_path)?)?;
        for c in &cities {
            self.input(&dir.join(format!("{c}.csv")))?;
        }
        let panel = CityDailyPanel::read_dir(&dir, &cities)?;
        if !panel.is_complete() {
            return Err(Error::Contract("stored panel still has missing cells".into()));
        }
        Ok(panel)
    }

    fn split_for(&self, panel: &CityDailyPanel) -> Result<SplitIndex> {
        chronological_split(&vec![panel.n_days(); panel.cities().len()], self.cfg.split.train_fraction)
    }

    fn feature_spec(&self, target: Pollutant) -> FeatureSpec {
        let f = &self.cfg.features;
        FeatureSpec {
            base: f.base.clone(),
            degree: f.degree,
            time_dummies: f.time_dummies,
            fixed_effects: f.fixed_effects.clone(),
            target,
        }
    }
}

fn store_panel(ctx: &mut Ctx, panel: &CityDailyPanel, report: &crate::dataset::ImputationReport) -> Result<PathBuf> {
    let dir = ctx.dir("data")?;
    let written = panel.write_dir(&dir)?;
    ctx.outputs.extend(written);
    ctx.write_json(dir.join("cities.json"), &panel.cities())?;
    ctx.write_json(dir.join("imputation.json"), report)?;
    Ok(dir)
}

fn cmd_ingest(ctx: &mut Ctx) -> Result<PathBuf> {
    let data = ctx.cfg.data.clone().ok_or_else(|| Error::Config("`ingest` needs a `data` section".into()))?;
    let schema = CsvSchema {
        date_range: match (data.date_from, data.date_to) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(Error::Config("set both `data.date_from` and `data.date_to` or neither".into())),
        },
        ..CsvSchema::default()
    };
    let mut records = Vec::new();
    for p in &data.paths {
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p.clone(), hint: "check `data.paths`".into() });
        }
        ctx.inputs.insert(p.to_string_lossy().into_owned(), sha256_file(p)?);
        records.extend(parse_csv(std::fs::File::open(p)?, &schema)?);
    }
    let mut raw = aggregate_city_daily(&records)?;
    crate::features::derive_hdd(&mut raw);
    let (panel, report) = impute_missing(&raw, ctx.cfg.imputation.max_iter, ctx.cfg.imputation.tol)?;
    store_panel(ctx, &panel, &report)
}

fn cmd_synth(ctx: &mut Ctx) -> Result<PathBuf> {
    let mut synth = ctx.cfg.synthetic.clone().ok_or_else(|| Error::Config("`synth` needs a `synthetic` section".into()))?;
    synth.seed = ctx.seed("synthetic");
    let raw = generate_synthetic(&synth)?;
    let (panel, report) = impute_missing(&raw, ctx.cfg.imputation.max_iter, ctx.cfg.imputation.tol)?;
    store_panel(ctx, &panel, &report)
}

fn cmd_features(ctx: &mut Ctx) -> Result<PathBuf> {
    let panel = ctx.load_panel()?;
    let dir = ctx.dir("features")?;
    for p in ctx.cfg.pollutants.clone() {
        let design = build_design(&panel, &ctx.feature_spec(p))?;
        let path = dir.join(format!("design_{}.csv", p.name()));
        design.write_csv(&path)?;
        ctx.outputs.push(path);
    }
    let corr = correlation_of_panel(&panel, &Variable::ALL)?;
    let path = dir.join("correlation.csv");
    corr.write_csv(&path)?;
    ctx.outputs.push(path);
    Ok(dir)
}

fn cmd_panel(ctx: &mut Ctx) -> Result<PathBuf> {
    let panel = ctx.load_panel()?;
    let dir = ctx.dir("panel")?;
    for p in ctx.cfg.pollutants.clone() {
        let design = build_design(&panel, &ctx.feature_spec(p))?;
        let response: Vec<f64> = (0..panel.cities().len())
            .map(|c| panel.complete_column(c, p.variable()))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let fit = fit_panel_ols(&design, &response, &fixed_effect_columns(&design))?;
        let fit_path = dir.join(format!("{}_fit.csv", p.name()));
        fit.write_csv(&fit_path)?;
        ctx.outputs.push(fit_path);

        let ranked = rank_features_by_significance(&fit, ctx.cfg.features.top_k);
        let path = dir.join(format!("{}_ranking.csv", p.name()));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["rank", "feature", "t_stat"])?;
        for (i, name) in ranked.iter().enumerate() {
            let t = fit.term(name).map(|t| t.t_stat).unwrap_or(f64::NAN);
            w.write_record([(i + 1).to_string(), name.clone(), t.to_string()])?;
        }
        w.flush()?;
        ctx.outputs.push(path);
    }
    Ok(dir)
}

fn cmd_cluster(ctx: &mut Ctx) -> Result<PathBuf> {
    let panel = ctx.load_panel()?;
    let dir = ctx.dir("cluster")?;
    let points = VariablePointSet::from_panel(&panel, &Variable::ALL)?;
    let cfg = ctx.cfg.cluster.clone();
    let km = kmeans(&points, cfg.k, ctx.seed("kmeans"), cfg.max_iter)?;
    let path = dir.join("kmeans.csv");
    write_assignments(&path, &points.names, &km.assignments)?;
    ctx.outputs.push(path);
    ctx.write_json(
        dir.join("kmeans.json"),
        &serde_json::json!({ "k": km.k, "inertia": km.inertia, "iterations": km.iterations, "inertia_trace": km.inertia_trace }),
    )?;
    let dendrogram = hierarchical(&points, cfg.linkage)?;
    let path = dir.join("dendrogram.csv");
    dendrogram.write_csv(&path)?;
    ctx.outputs.push(path);
    let labels = cut_dendrogram(&dendrogram, cfg.k)?;
    let path = dir.join("hierarchical.csv");
    write_assignments(&path, &points.names, &labels)?;
    ctx.outputs.push(path);
    Ok(dir)
}

fn cmd_forest(ctx: &mut Ctx) -> Result<PathBuf> {
    let panel = ctx.load_panel()?;
    let dir = ctx.dir("forest")?;
    for p in ctx.cfg.pollutants.clone() {
        let spec = FeatureSpec {
            base: ctx.cfg.features.base.clone(),
            degree: 1,
            time_dummies: false,
            fixed_effects: vec![],
            target: p,
        };
        let x = build_design(&panel, &spec)?;
        let y: Vec<f64> = (0..panel.cities().len())
            .map(|c| panel.complete_column(c, p.variable()))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let fc = ctx.cfg.forest.clone();
        let defaults = ForestParams::defaults(x.n_cols(), ctx.seed(&format!("forest/{}", p.name())));
        let params = ForestParams { trees: fc.trees, mtry: fc.mtry.unwrap_or(defaults.mtry), min_leaf: fc.min_leaf, ..defaults };
        let forest = fit_forest(&x, &y, params)?;
        let seed = ctx.seed(&format!("importance/{}", p.name()));
        let report = oob_permutation_importance(&forest, &x, &y, fc.repeats, seed)?;
        let path = dir.join(format!("{}_importance.csv", p.name()));
        report.write_csv(&path)?;
        ctx.outputs.push(path);
    }
    Ok(dir)
}

fn sequences(ctx: &Ctx, panel: &CityDailyPanel, p: Pollutant) -> Result<(SequenceDataset, SequenceDataset)> {
    build_sequences(panel, p, ctx.cfg.split.window, &ctx.split_for(panel)?, None)
}

fn stem(p: Pollutant, a: Architecture) -> String {
    format!("{}_{}", p.name(), a.name().to_lowercase())
}

fn cmd_tune(ctx: &mut Ctx, choice: ModelChoice) -> Result<PathBuf> {
    let panel = ctx.load_panel()?;
    let dir = ctx.dir("tune")?;
    for p in ctx.cfg.pollutants.clone() {
        let (train, _) = sequences(ctx, &panel, p)?;
        let (fit, val) = train.chronological_tail(ctx.cfg.split.validation_fraction)?;
        for arch in choice.architectures() {
            let space = match arch {
                Architecture::Pbdl => SearchSpace::Pbdl(ctx.cfg.tune.pbdl.clone()),
                Architecture::Lstm => SearchSpace::Lstm(ctx.cfg.tune.lstm.clone()),
            };
            let name = stem(p, arch);
            let seed = ctx.seed(&format!("tune/{name}"));
            let report = random_search(&space, ctx.cfg.tune.trials, ctx.cfg.tune.runs_per_trial, &fit, &val, seed)?;
            let path = dir.join(format!("{name}.csv"));
            report.write_csv(&path)?;
            ctx.outputs.push(path);
            ctx.write_json(dir.join(format!("{name}_best.json")), &report.best_config)?;
        }
    }
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub city: String,
    pub pollutant: Pollutant,
    pub model: Architecture,
    pub file: String,
    pub seed: u64,
}

fn read_index<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), hint: hint.into() });
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn cmd_train(ctx: &mut Ctx, choice: ModelChoice) -> Result<PathBuf> {
    let panel = ctx.load_panel()?;
    let dir = ctx.dir("models")?;
    let index_path = dir.join("index.json");
    let mut index: BTreeMap<(Pollutant, Architecture, String), ModelEntry> = if index_path.exists() {
        read_index::<ModelEntry>(&index_path, "")?
            .into_iter()
            .map(|e| ((e.pollutant, e.model, e.city.clone()), e))
            .collect()
    } else {
        BTreeMap::new()
    };
    for p in ctx.cfg.pollutants.clone() {
        let (train, _) = sequences(ctx, &panel, p)?;
        for arch in choice.architectures() {
            let name = stem(p, arch);
            let tuned = ctx.out.join("tune").join(format!("{name}_best.json"));
            let base = if ctx.cfg.tune.use_tuned && tuned.exists() {
                ctx.input(&tuned)?;
                serde_json::from_str::<ModelConfig>(&std::fs::read_to_string(&tuned)?)?
            } else {
                match arch {
                    Architecture::Pbdl => ModelConfig::Pbdl(ctx.cfg.models.pbdl.clone()),
                    Architecture::Lstm => ModelConfig::Lstm(ctx.cfg.models.lstm.get(p).clone()),
                }
            };
            let jobs: Vec<(usize, u64)> = (0..panel.cities().len())
                .map(|c| (c, ctx.streams.seed_indexed(&format!("train/{name}"), c as u64)))
                .collect();
            let models = jobs
                .par_iter()
                .map(|&(c, seed)| train_config(&with_seed(&base, seed), &train.for_city(c)))
                .collect::<Result<Vec<TrainedModel>>>()?;
            for ((c, seed), model) in jobs.into_iter().zip(models) {
                let city = panel.cities()[c].clone();
                ctx.seeds.insert(format!("train/{name}/{city}"), seed);
                let file = format!("{city}_{name}.json");
                let path = dir.join(&file);
                std::fs::write(&path, model.to_json()?)?;
                ctx.outputs.push(path);
                let trace = dir.join(format!("{city}_{name}_loss.csv"));
                model.trace.write_csv(&trace)?;
                ctx.outputs.push(trace);
                index.insert((p, arch, city.clone()), ModelEntry { city, pollutant: p, model: arch, file, seed });
            }
        }
    }
    let entries: Vec<ModelEntry> = index.into_values().collect();
    ctx.write_json(index_path, &entries)?;
    Ok(dir)
}

/// One stored prediction file plus the raw-scale statistics needed to
/// standardize its RMSE and compute accuracy gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub city: String,
    pub pollutant: String,
    pub model: Architecture,
    pub file: String,
    pub target_sd: f64,
    pub target_mean: f64,
    pub target_max: f64,
}

/// Per-model metric reports computed from prediction CSVs.
pub fn metrics_from_predictions(dir: &Path, entries: &[PredictionEntry]) -> Result<Vec<MetricsReport>> {
    let mut by_model: BTreeMap<Architecture, MetricsReport> = BTreeMap::new();
    for e in entries {
        let path = dir.join(&e.file);
        if !path.exists() {
            return Err(Error::MissingArtifact { path, hint: "prediction file listed in index.json".into() });
        }
        let mut rd = csv::Reader::from_path(&path)?;
        let mut actual = Vec::new();
        let mut predicted = Vec::new();
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Row { row: row + 1, message: format!("bad number in {}", e.file) })
            };
            actual.push(num(2)?);
            predicted.push(num(3)?);
        }
        if !(e.target_sd > 0.0) {
            return Err(Error::Contract(format!("target_sd for {} must be positive", e.file)));
        }
        let raw = rmse(&predicted, &actual)?;
        by_model.entry(e.model).or_default().rows.push(MetricRow {
            city: e.city.clone(),
            pollutant: e.pollutant.clone(),
            model: e.model,
            rmse_standardized: raw / e.target_sd,
            rmse_raw: raw,
            target_mean: e.target_mean,
            target_max: e.target_max,
        });
    }
    Ok(by_model.into_values().collect())
}

fn cmd_evaluate(ctx: &mut Ctx) -> Result<PathBuf> {
    let panel = ctx.load_panel()?;
    let models_dir = ctx.out.join("models");
    let index_path = models_dir.join("index.json");
    let entries: Vec<ModelEntry> = read_index(&index_path, "run `train` first")?;
    ctx.input(&index_path)?;
    let pred_dir = ctx.dir("predictions")?;
    let eval_dir = ctx.dir("eval")?;
    let split = ctx.split_for(&panel)?;
    let mut pred_entries = Vec::new();
    for e in &entries {
        let path = models_dir.join(&e.file);
        ctx.input(&path)?;
        let model = TrainedModel::from_json(&std::fs::read_to_string(&path)?)?;
        let c = panel
            .city_index(&e.city)
            .ok_or_else(|| Error::Alignment(format!("model city {} is not in the panel", e.city)))?;
        let stds = (model.input_standardizer.clone(), model.target_standardizer.clone());
        let (_, test) = build_sequences(&panel, e.pollutant, model.window, &split, Some(&stds))?;
        let test = test.for_city(c);
        let predicted = predict(&model, &test)?;
        let name = format!("{}_{}", e.city, stem(e.pollutant, e.model));
        let file = format!("{name}.csv");
        let pred_path = pred_dir.join(&file);
        write_predictions_csv(&pred_path, &test, &predicted)?;
        ctx.outputs.push(pred_path);
        ctx.outputs.extend(export_plot_data(&model, &test, &eval_dir.join("plots"), &name)?);
        let series = panel.complete_column(c, e.pollutant.variable())?;
        let (_, sd) = target_stats(&model.target_standardizer)?;
        pred_entries.push(PredictionEntry {
            city: e.city.clone(),
            pollutant: e.pollutant.name().to_string(),
            model: e.model,
            file,
            target_sd: sd,
            target_mean: crate::linalg::mean(&series),
            target_max: series.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    ctx.write_json(pred_dir.join("index.json"), &pred_entries)?;
    let mut reports = metrics_from_predictions(&pred_dir, &pred_entries)?;
    let metrics_path = eval_dir.join("metrics.csv");
    let mut all = MetricsReport::default();
    for r in &mut reports {
        r.metadata.insert("master_seed".into(), ctx.cfg.seed.to_string());
        r.metadata.insert("config_sha256".into(), ctx.cfg.digest()?);
        all.rows.extend(r.rows.iter().cloned());
    }
    all.write_csv(&metrics_path)?;
    ctx.outputs.push(metrics_path);
    let table = compare_models(&reports)?;
    let cmp = eval_dir.join("comparison.csv");
    table.write_csv(&cmp)?;
    ctx.outputs.push(cmp);
    Ok(eval_dir)
}

/// Comparison table from `predictions/index.json` under `out`.
pub fn report_comparison(out: &Path) -> Result<ComparisonTable> {
    let dir = out.join("predictions");
    let entries: Vec<PredictionEntry> = read_index(&dir.join("index.json"), "run `evaluate` first")?;
    compare_models(&metrics_from_predictions(&dir, &entries)?)
}

fn cmd_report(ctx: &mut Ctx) -> Result<PathBuf> {
    let pred_dir = ctx.out.join("predictions");
    let index_path = pred_dir.join("index.json");
    let entries: Vec<PredictionEntry> = read_index(&index_path, "run `evaluate` first")?;
    ctx.input(&index_path)?;
    for e in &entries {
        ctx.input(&pred_dir.join(&e.file))?;
    }
    let table = compare_models(&metrics_from_predictions(&pred_dir, &entries)?)?;
    let dir = ctx.dir("report")?;
    let cmp = dir.join("comparison.csv");
    table.write_csv(&cmp)?;
    ctx.outputs.push(cmp);

    let summary = dir.join("feature_selection.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record(["pollutant", "method", "rank", "feature", "score"])?;
    for p in Pollutant::ALL {
        let sources = [
            ("panel_ols", ctx.out.join("panel").join(format!("{}_ranking.csv", p.name())), [0usize, 1, 2]),
            ("forest_pct_inc_mse", ctx.out.join("forest").join(format!("{}_importance.csv", p.name())), [2, 0, 1]),
        ];
        for (method, path, [rank_col, feature_col, score_col]) in sources {
            if !path.exists() {
                continue;
            }
            ctx.input(&path)?;
            let mut rows = Vec::new();
            for rec in csv::Reader::from_path(&path)?.records() {
                let rec = rec?;
                let rank: usize = rec[rank_col].parse().map_err(|_| Error::Contract(format!("bad rank in {}", path.display())))?;
                rows.push((rank, rec[feature_col].to_string(), rec[score_col].to_string()));
            }
            rows.sort();
            for (rank, feature, score) in rows {
                w.write_record([p.name().to_string(), method.to_string(), rank.to_string(), feature, score])?;
            }
        }
    }
    w.flush()?;
    ctx.outputs.push(summary);
    Ok(dir)
}

fn configure_threads() {
    if let Some(n) = std::env::var("AIRPHYS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("AIRPHYS_THREADS ignored: {e}");
            }
        }
    }
}

/// Run one command; returns the directory holding its artifacts.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("out={}", serde_json::to_string(out)?));
    }
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", cfg.out.display())))?;
    configure_threads();
    let mut ctx = Ctx {
        out: cfg.out.clone(),
        streams: SeedStream::new(cfg.seed),
        cfg,
        seeds: BTreeMap::new(),
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
    };
    let dir = match &cli.command {
        Command::Ingest => cmd_ingest(&mut ctx)?,
        Command::Synth => cmd_synth(&mut ctx)?,
        Command::Features => cmd_features(&mut ctx)?,
        Command::Panel => cmd_panel(&mut ctx)?,
        Command::Cluster => cmd_cluster(&mut ctx)?,
        Command::Forest => cmd_forest(&mut ctx)?,
        Command::Tune { model } => cmd_tune(&mut ctx, *model)?,
        Command::Train { model } => cmd_train(&mut ctx, *model)?,
        Command::Evaluate => cmd_evaluate(&mut ctx)?,
        Command::Report => cmd_report(&mut ctx)?,
    };
    ctx.manifest(cli.command.name(), &dir)?;
    Ok(dir)
}

/// Parse arguments, run, and map errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(dir) => {
            log::info!("{} wrote {}", cli.command.name(), dir.display());
            0
        }
        Err(e) => {
            eprintln!("airphys {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn dotted_overrides() {
        let cfg = load_config(None, &["models.pbdl.epochs=3".into(), "split.window=5".into(), "models.pbdl.units.0=9".into()])
            .unwrap();
        assert_eq!(cfg.models.pbdl.epochs, 3);
        assert_eq!(cfg.split.window, 5);
        assert_eq!(cfg.models.pbdl.units, vec![9]);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let e = load_config(None, &["split.windw=5".into()]).unwrap_err();
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn data_and_synthetic_are_exclusive() {
        let cfg = load_config(None, &[r#"data={"paths":["x.csv"]}"#.into()]).unwrap();
        assert!(cfg.synthetic.is_none());
        let mut both = RunConfig::default();
        both.data = Some(DataConfig { paths: vec!["x.csv".into()], date_from: None, date_to: None });
        assert!(matches!(both.validate(), Err(Error::Config(_))));
        let mut neither = RunConfig::default();
        neither.synthetic = None;
        assert!(matches!(neither.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_config_file_is_a_config_error() {
        let e = load_config(Some(Path::new("/nonexistent/airphys.json")), &[]).unwrap_err();
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Divergence { epoch: 3 }), 3);
        assert_eq!(exit_code(&Error::MissingArtifact { path: "x".into(), hint: String::new() }), 2);
        assert_eq!(exit_code(&Error::Config(String::new())), 1);
    }
}
