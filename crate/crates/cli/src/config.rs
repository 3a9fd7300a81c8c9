//! Experiment configuration: a flat `key = value` file, optionally a grid
//! file, then command-line overrides.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `dataset` | `simulated` | rating directory, or `simulated` for the built-in generator |
//! | `format` | `triplets` | `triplets` (`train.txt`/`test.txt`) or `dense` (`train.ascii`/`test.ascii`) |
//! | `methods` | `bpr,ubpr,upl` | comma-separated method names |
//! | `runs` | `50` | final runs per method |
//! | `seed` | `0` | base seed; run `r` uses `seed + r` |
//! | `epsilon_train` / `epsilon_test` | `0.1` / `0.0` | relevance floor of the generated splits |
//! | `validation_fraction` | `0.1` | share of training pairs held out for selection |
//! | `dims` / `lambdas` / `clips` | `100,200,300` / `1e-7,1e-5,1e-3` / `0,-0.1,-1,-10` | search grid |
//! | `wmf_weight` | `10` | WMF confidence weight |
//! | `ks` | `3,5,8` | ranking cutoffs |
//! | `cohorts` | `true` | also report cold-start users and rare items |
//! | `relevance` | `binary` | `binary` test draws or `probability` |
//! | `learning_rate`, `batch_size`, `max_epochs`, `patience`, `init_scale` | `0.001`, `256`, `200`, `5`, `0.01` | optimisation |
//! | `pointwise_sampling` | `full` | `full` matrix or a negatives-per-click ratio |
//! | `propensity_power` | `0.5` | exponent of the popularity propensity |
//! | `r_max` | `5` | top rating |
//! | `sim_users`, `sim_items`, `sim_train_per_user`, `sim_test_per_user` | `120`, `150`, `24`, `16` | generator size |
//! | `out` | `results` | output directory |
//! | `threads` | `0` | worker threads, 0 for all cores |
//!
//! `out` and `threads` do not affect results and are left out of the config hash.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use upl_core::dataset::{RatingFormat, SimulationConfig, DEFAULT_R_MAX};
use upl_core::evaluation::{RelevanceMode, DEFAULT_KS};
use upl_core::kv::KvDocument;
use upl_core::losses::{Method, DEFAULT_WMF_WEIGHT};
use upl_core::propensity::PropensityConfig;
use upl_core::trainer::{PointwiseSampling, TrainConfig};
use upl_core::{Error, Result};

pub const KEYS: &[&str] = &[
    "dataset",
    "format",
    "methods",
    "runs",
    "seed",
    "epsilon_train",
    "epsilon_test",
    "validation_fraction",
    "dims",
    "lambdas",
    "clips",
    "wmf_weight",
    "ks",
    "cohorts",
    "relevance",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "init_scale",
    "pointwise_sampling",
    "propensity_power",
    "r_max",
    "sim_users",
    "sim_items",
    "sim_train_per_user",
    "sim_test_per_user",
    "out",
    "threads",
];

pub const GRID_KEYS: &[&str] = &["dims", "lambdas", "clips"];

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub clips: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            dims: vec![100, 200, 300],
            lambdas: vec![1e-7, 1e-5, 1e-3],
            clips: vec![0.0, -0.1, -1.0, -10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Simulated,
    Directory(PathBuf),
}

impl Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetSource::Simulated => f.write_str("simulated"),
            DatasetSource::Directory(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub format: RatingFormat,
    pub methods: Vec<Method>,
    pub runs: usize,
    pub seed: u64,
    pub epsilon_train: f64,
    pub epsilon_test: f64,
    pub validation_fraction: f64,
    pub grid: Grid,
    pub wmf_weight: f64,
    pub ks: Vec<usize>,
    pub cohorts: bool,
    pub relevance: RelevanceMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub init_scale: f64,
    pub pointwise_sampling: PointwiseSampling,
    pub propensity_power: f64,
    pub r_max: u8,
    pub sim_users: usize,
    pub sim_items: usize,
    pub sim_train_per_user: usize,
    pub sim_test_per_user: usize,
    pub out: PathBuf,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sim = SimulationConfig::default();
        Self {
            dataset: DatasetSource::Simulated,
            format: RatingFormat::Triplets,
            methods: vec![Method::Bpr, Method::Ubpr, Method::Upl],
            runs: 50,
            seed: 0,
            epsilon_train: 0.1,
            epsilon_test: 0.0,
            validation_fraction: 0.1,
            grid: Grid::default(),
            wmf_weight: DEFAULT_WMF_WEIGHT,
            ks: DEFAULT_KS.to_vec(),
            cohorts: true,
            relevance: RelevanceMode::Binary,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            init_scale: train.init_scale,
            pointwise_sampling: train.pointwise_sampling,
            propensity_power: PropensityConfig::default().power,
            r_max: DEFAULT_R_MAX,
            sim_users: sim.num_users,
            sim_items: sim.num_items,
            sim_train_per_user: sim.train_per_user,
            sim_test_per_user: sim.test_per_user,
            out: PathBuf::from("results"),
            threads: 0,
        }
    }
}

fn bad(origin: &Path, key: &str, msg: impl Display) -> Error {
    Error::Config(format!("{}: `{key}`: {msg}", origin.display()))
}

fn parse_list<T: FromStr>(raw: &str, key: &str, origin: &Path) -> Result<Vec<T>>
where
    T::Err: Display,
{
    let items = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| bad(origin, key, format!("`{s}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(bad(origin, key, "empty list"));
    }
    Ok(items)
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn float(x: f64) -> String {
    format!("{x:?}")
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_document(&KvDocument::read(path)?, path, KEYS)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let origin = Path::new("<config>");
        let mut cfg = Self::default();
        cfg.apply_document(&KvDocument::parse(text, origin)?, origin, KEYS)?;
        Ok(cfg)
    }

    /// Overrides the grid with the keys of a grid file.
    pub fn apply_grid_file(&mut self, path: &Path) -> Result<()> {
        self.apply_document(&KvDocument::read(path)?, path, GRID_KEYS)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let origin = Path::new("<override>");
        let mut doc = KvDocument::default();
        doc.push(key, value);
        self.apply_document(&doc, origin, KEYS)
    }

    fn apply_document(&mut self, doc: &KvDocument, origin: &Path, allowed: &[&str]) -> Result<()> {
        doc.check_keys(allowed, origin)?;
        for e in doc.entries() {
            let (key, v) = (e.key.as_str(), e.value.as_str());
            let scalar = |msg: &dyn Display| bad(origin, key, format!("`{v}`: {msg}"));
            macro_rules! num {
                ($t:ty) => {
                    v.parse::<$t>().map_err(|e| scalar(&e))?
                };
            }
            match key {
                "dataset" => {
                    self.dataset = if v == "simulated" {
                        DatasetSource::Simulated
                    } else {
                        DatasetSource::Directory(PathBuf::from(v))
                    }
                }
                "format" => self.format = v.parse()?,
                "methods" => self.methods = parse_list(v, key, origin)?,
                "runs" => self.runs = num!(usize),
                "seed" => self.seed = num!(u64),
                "epsilon_train" => self.epsilon_train = num!(f64),
                "epsilon_test" => self.epsilon_test = num!(f64),
                "validation_fraction" => self.validation_fraction = num!(f64),
                "dims" => self.grid.dims = parse_list(v, key, origin)?,
                "lambdas" => self.grid.lambdas = parse_list(v, key, origin)?,
                "clips" => self.grid.clips = parse_list(v, key, origin)?,
                "wmf_weight" => self.wmf_weight = num!(f64),
                "ks" => self.ks = parse_list(v, key, origin)?,
                "cohorts" => self.cohorts = num!(bool),
                "relevance" => self.relevance = v.parse()?,
                "learning_rate" => self.learning_rate = num!(f64),
                "batch_size" => self.batch_size = num!(usize),
                "max_epochs" => self.max_epochs = num!(usize),
                "patience" => self.patience = num!(usize),
                "init_scale" => self.init_scale = num!(f64),
                "pointwise_sampling" => self.pointwise_sampling = v.parse()?,
                "propensity_power" => self.propensity_power = num!(f64),
                "r_max" => self.r_max = num!(u8),
                "sim_users" => self.sim_users = num!(usize),
                "sim_items" => self.sim_items = num!(usize),
                "sim_train_per_user" => self.sim_train_per_user = num!(usize),
                "sim_test_per_user" => self.sim_test_per_user = num!(usize),
                "out" => self.out = PathBuf::from(v),
                "threads" => self.threads = num!(usize),
                other => return Err(bad(origin, other, "unknown key")),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.runs == 0 {
            return err("runs must be >= 1".into());
        }
        if self.methods.is_empty() {
            return err("no methods selected".into());
        }
        if self.grid.dims.is_empty() || self.grid.lambdas.is_empty() || self.grid.clips.is_empty() {
            return err("grid must be non-empty".into());
        }
        if self.grid.dims.contains(&0) {
            return err("grid dims must be >= 1".into());
        }
        if let Some(c) = self.grid.clips.iter().find(|c| !(-10.0..=0.0).contains(*c)) {
            return err(format!("clip {c} outside [-10, 0]"));
        }
        if let Some(l) = self.grid.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return err(format!("lambda {l} must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.epsilon_train) || !(0.0..1.0).contains(&self.epsilon_test) {
            return err("epsilon values must lie in [0, 1)".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return err(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            ));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return err("ks must be a non-empty list of positive cutoffs".into());
        }
        if !self.ks.contains(&5) {
            return err("ks must include 5, the selection cutoff".into());
        }
        if self.wmf_weight.is_nan() || self.wmf_weight < 1.0 {
            return err(format!("wmf_weight {} must be >= 1", self.wmf_weight));
        }
        if self.propensity_power.is_nan() || self.propensity_power <= 0.0 {
            return err("propensity_power must be > 0".into());
        }
        self.base_train_config().validate()
    }

    /// Training settings shared by every grid point.
    pub fn base_train_config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.grid.dims[0],
            lambda: self.grid.lambdas[0],
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            init_scale: self.init_scale,
            validation_k: 5,
            pointwise_sampling: self.pointwise_sampling,
        }
    }

    pub fn propensity_config(&self) -> PropensityConfig {
        PropensityConfig {
            power: self.propensity_power,
            ..PropensityConfig::default()
        }
    }

    pub fn simulation_config(&self) -> SimulationConfig {
        SimulationConfig {
            num_users: self.sim_users,
            num_items: self.sim_items,
            train_per_user: self.sim_train_per_user,
            test_per_user: self.sim_test_per_user,
            seed: self.seed,
            ..SimulationConfig::default()
        }
    }

    /// Every result-affecting setting in a fixed order.
    pub fn canonical_text(&self) -> String {
        let mut doc = KvDocument::default();
        doc.push("dataset", &self.dataset);
        doc.push("format", self.format);
        doc.push("methods", join(&self.methods));
        doc.push("runs", self.runs);
        doc.push("seed", self.seed);
        doc.push("epsilon_train", float(self.epsilon_train));
        doc.push("epsilon_test", float(self.epsilon_test));
        doc.push("validation_fraction", float(self.validation_fraction));
        doc.push("dims", join(&self.grid.dims));
        doc.push(
            "lambdas",
            self.grid
                .lambdas
                .iter()
                .map(|x| float(*x))
                .collect::<Vec<_>>()
                .join(","),
        );
        doc.push(
            "clips",
            self.grid.clips.iter().map(|x| float(*x)).collect::<Vec<_>>().join(","),
        );
        doc.push("wmf_weight", float(self.wmf_weight));
        doc.push("ks", join(&self.ks));
        doc.push("cohorts", self.cohorts);
        doc.push("relevance", self.relevance);
        doc.push("learning_rate", float(self.learning_rate));
        doc.push("batch_size", self.batch_size);
        doc.push("max_epochs", self.max_epochs);
        doc.push("patience", self.patience);
        doc.push("init_scale", float(self.init_scale));
        doc.push("pointwise_sampling", self.pointwise_sampling);
        doc.push("propensity_power", float(self.propensity_power));
        doc.push("r_max", self.r_max);
        if self.dataset == DatasetSource::Simulated {
            doc.push("sim_users", self.sim_users);
            doc.push("sim_items", self.sim_items);
            doc.push("sim_train_per_user", self.sim_train_per_user);
            doc.push("sim_test_per_user", self.sim_test_per_user);
        }
        doc.to_text()
    }

    /// SHA-256 of [`canonical_text`](Self::canonical_text), hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }
}
