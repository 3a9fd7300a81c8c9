//! Grid search, repeated runs and per-run artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use upl_core::dataset::{generate_semi_synthetic, load_train_test, simulate_ratings, split_validation};
use upl_core::evaluation::{evaluate, Cohort, CohortContext, CohortSpec};
use upl_core::losses::{LossSpec, Method};
use upl_core::trainer::{train_upl_from, train_with_observer, TrainConfig, TrainInputs};
use upl_core::{
    Error, ExplicitRatings, FactorModel, ImplicitDataset, MetricReport, PropensityTable, Result, Split, TrainRun,
};

use crate::config::{DatasetSource, ExperimentConfig};
use crate::report;

/// Seeds of one run, all derived from `base + run`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub run_seed: u64,
    pub train_data: u64,
    pub test_data: u64,
    pub split: u64,
    pub model: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl RunSeeds {
    pub fn new(base: u64, run: usize) -> Self {
        let run_seed = base.wrapping_add(run as u64);
        let s = splitmix(run_seed);
        Self {
            run_seed,
            train_data: splitmix(s ^ 1),
            test_data: splitmix(s ^ 2),
            split: splitmix(s ^ 3),
            model: splitmix(s ^ 4),
        }
    }
}

pub fn dataset_files(dir: &Path, format: upl_core::RatingFormat) -> Result<(PathBuf, PathBuf)> {
    let candidates: &[(&str, &str)] = match format {
        upl_core::RatingFormat::Triplets => &[
            ("train.txt", "test.txt"),
            (
                "ydata-ymusic-rating-study-v1_0-train.txt",
                "ydata-ymusic-rating-study-v1_0-test.txt",
            ),
        ],
        upl_core::RatingFormat::Dense => &[("train.ascii", "test.ascii")],
    };
    for (tr, te) in candidates {
        let (a, b) = (dir.join(tr), dir.join(te));
        if a.is_file() && b.is_file() {
            return Ok((a, b));
        }
    }
    let names: Vec<String> = candidates.iter().map(|(a, b)| format!("{a} + {b}")).collect();
    Err(Error::Config(format!(
        "{}: no {format} rating files found (looked for {})",
        dir.display(),
        names.join(", ")
    )))
}

/// Explicit train (MNAR) and test (MCAR) ratings over a shared id space.
pub fn load_ratings(cfg: &ExperimentConfig) -> Result<(ExplicitRatings, ExplicitRatings)> {
    match &cfg.dataset {
        DatasetSource::Simulated => simulate_ratings(&cfg.simulation_config()),
        DatasetSource::Directory(dir) => {
            let (train, test) = dataset_files(dir, cfg.format)?;
            load_train_test(&train, &test, cfg.format, cfg.r_max)
        }
    }
}

/// Everything one run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct RunData {
    pub run: usize,
    pub seeds: RunSeeds,
    /// Training clicks before the validation hold-out; defines the cohorts.
    pub train_full: ImplicitDataset,
    pub train: ImplicitDataset,
    pub validation: ImplicitDataset,
    pub test: ImplicitDataset,
    pub propensities: PropensityTable,
    pub cohorts: CohortContext,
}

impl RunData {
    pub fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs {
            train: &self.train,
            validation: Some(&self.validation),
            propensities: &self.propensities,
            relevance: None,
        }
    }
}

pub fn prepare_run(
    ratings: &(ExplicitRatings, ExplicitRatings),
    cfg: &ExperimentConfig,
    run: usize,
) -> Result<RunData> {
    let seeds = RunSeeds::new(cfg.seed, run);
    let train_full = generate_semi_synthetic(&ratings.0, cfg.epsilon_train, seeds.train_data, Split::Train)?;
    let test = generate_semi_synthetic(&ratings.1, cfg.epsilon_test, seeds.test_data, Split::Test)?;
    let (train, validation) = split_validation(&train_full, cfg.validation_fraction, seeds.split)?;
    let propensities = PropensityTable::from_dataset(&train, cfg.propensity_config())?;
    let cohorts = CohortContext::from_train(&train_full, CohortSpec::default());
    Ok(RunData {
        run,
        seeds,
        train_full,
        train,
        validation,
        test,
        propensities,
        cohorts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub dim: usize,
    pub lambda: f64,
    pub clip: Option<f64>,
}

pub fn grid_points(cfg: &ExperimentConfig, method: Method) -> Vec<HyperParams> {
    let clips: Vec<Option<f64>> = if method.needs_clip() {
        cfg.grid.clips.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };
    let mut out = Vec::new();
    for &dim in &cfg.grid.dims {
        for &lambda in &cfg.grid.lambdas {
            for &clip in &clips {
                out.push(HyperParams { dim, lambda, clip });
            }
        }
    }
    out
}

pub fn loss_spec(cfg: &ExperimentConfig, method: Method, hp: &HyperParams) -> Result<LossSpec> {
    let weight = (method == Method::Wmf).then_some(cfg.wmf_weight);
    LossSpec::new(method, hp.clip, weight)
}

pub fn train_config(cfg: &ExperimentConfig, hp: &HyperParams, seed: u64) -> TrainConfig {
    TrainConfig {
        dim: hp.dim,
        lambda: hp.lambda,
        seed,
        ..cfg.base_train_config()
    }
}

/// Trains `method` on one run's data. UPL needs the run's Rel-MF model.
pub fn train_method(
    data: &RunData,
    cfg: &ExperimentConfig,
    method: Method,
    hp: &HyperParams,
    relmf: Option<&FactorModel>,
    log: &mut Vec<String>,
) -> Result<TrainRun> {
    let tc = train_config(cfg, hp, data.seeds.model ^ method_salt(method));
    if method == Method::Upl {
        let relmf = relmf.ok_or_else(|| Error::Config("upl needs a trained relmf model".into()))?;
        let run = train_upl_from(data.inputs(), relmf, &tc)?;
        log.extend(run.log.iter().map(|r| r.log_line(tc.validation_k)));
        return Ok(run);
    }
    let spec = loss_spec(cfg, method, hp)?;
    train_with_observer(data.inputs(), &tc, &spec, &mut |r| {
        log.push(r.log_line(tc.validation_k))
    })
}

fn method_salt(method: Method) -> u64 {
    Method::ALL.iter().position(|m| *m == method).unwrap_or(0) as u64 * 0x1000_0000_0001
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub method: Method,
    pub params: HyperParams,
    pub validation_dcg: f64,
}

/// Best grid point by validation DCG@5 on `data`; ties keep the earlier point.
pub fn select(
    data: &RunData,
    cfg: &ExperimentConfig,
    method: Method,
    relmf: Option<&FactorModel>,
) -> Result<Selection> {
    let points = grid_points(cfg, method);
    let scores: Vec<Result<f64>> = points
        .par_iter()
        .map(|hp| train_method(data, cfg, method, hp, relmf, &mut Vec::new()).map(|r| r.best_validation))
        .collect();
    let mut best: Option<Selection> = None;
    for (hp, score) in points.iter().zip(scores) {
        let score = score?;
        if best.is_none_or(|b| score > b.validation_dcg) {
            best = Some(Selection {
                method,
                params: *hp,
                validation_dcg: score,
            });
        }
    }
    best.ok_or_else(|| Error::Config("empty grid".into()))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: Method,
    pub run: usize,
    pub seed: u64,
    pub reports: Vec<MetricReport>,
    pub log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub method: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub out: PathBuf,
    pub config_hash: String,
    pub selections: Vec<Selection>,
    pub outcomes: Vec<RunOutcome>,
    pub failures: Vec<Failure>,
}

pub fn cohorts(cfg: &ExperimentConfig) -> Vec<Cohort> {
    if cfg.cohorts {
        Cohort::ALL.to_vec()
    } else {
        vec![Cohort::All]
    }
}

fn evaluate_run(
    cfg: &ExperimentConfig,
    data: &RunData,
    method: Method,
    model: &FactorModel,
) -> Result<Vec<MetricReport>> {
    evaluate(
        model,
        &data.test,
        &data.cohorts,
        &cohorts(cfg),
        &cfg.ks,
        cfg.relevance,
        method.name(),
        data.run,
    )
}

/// Runs the full protocol and writes every artifact under `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment_inner(cfg))
}

fn run_experiment_inner(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let hash = cfg.hash();
    let ratings = load_ratings(cfg)?;
    let runs: Vec<RunData> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| prepare_run(&ratings, cfg, r))
        .collect::<Result<_>>()?;

    let mut failures = Vec::new();
    let mut selections: Vec<Selection> = Vec::new();
    let fail = |failures: &mut Vec<Failure>, method: &str, stage: &str, e: &Error| {
        failures.push(Failure {
            method: method.to_string(),
            stage: stage.to_string(),
            message: e.to_string(),
        })
    };

    // UPL reads relevance off a Rel-MF model tuned and trained per run.
    let mut relmf_models: Option<Vec<FactorModel>> = None;
    let mut relmf_selection: Option<Selection> = None;
    if cfg.methods.contains(&Method::Upl) {
        let stage = select(&runs[0], cfg, Method::RelMf, None).and_then(|sel| {
            let models = runs
                .par_iter()
                .map(|d| train_method(d, cfg, Method::RelMf, &sel.params, None, &mut Vec::new()).map(|r| r.model))
                .collect::<Result<Vec<_>>>()?;
            Ok((sel, models))
        });
        match stage {
            Ok((sel, models)) => {
                if !cfg.methods.contains(&Method::RelMf) {
                    selections.push(sel);
                }
                relmf_selection = Some(sel);
                relmf_models = Some(models);
            }
            Err(e) => fail(&mut failures, Method::Upl.name(), "relmf", &e),
        }
    }

    let mut outcomes = Vec::new();
    for &method in &cfg.methods {
        if method == Method::Upl && relmf_models.is_none() {
            continue;
        }
        let relmf0 = relmf_models.as_ref().map(|m| &m[0]);
        let selected = match (method, relmf_selection) {
            (Method::RelMf, Some(sel)) => Ok(sel),
            _ => select(&runs[0], cfg, method, relmf0),
        };
        let sel = match selected {
            Ok(s) => s,
            Err(e) => {
                fail(&mut failures, method.name(), "grid", &e);
                continue;
            }
        };
        selections.push(sel);
        let results: Vec<Result<RunOutcome>> = runs
            .par_iter()
            .map(|data| {
                let relmf = relmf_models.as_ref().map(|m| &m[data.run]);
                let mut log = Vec::new();
                let run = train_method(data, cfg, method, &sel.params, relmf, &mut log)?;
                Ok(RunOutcome {
                    method,
                    run: data.run,
                    seed: data.seeds.run_seed,
                    reports: evaluate_run(cfg, data, method, &run.model)?,
                    log,
                })
            })
            .collect();
        let mut method_outcomes = Vec::with_capacity(results.len());
        let mut failed = false;
        for (r, res) in results.into_iter().enumerate() {
            match res {
                Ok(o) => method_outcomes.push(o),
                Err(e) => {
                    fail(&mut failures, method.name(), &format!("run {r}"), &e);
                    failed = true;
                }
            }
        }
        if !failed {
            outcomes.extend(method_outcomes);
        }
    }

    let result = ExperimentResult {
        out: cfg.out.clone(),
        config_hash: hash,
        selections,
        outcomes,
        failures,
    };
    write_artifacts(cfg, &result)?;
    report::aggregate_dir(&cfg.out)?;
    Ok(result)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn runs_tsv(hash: &str, ks: &[usize], outcomes: &[RunOutcome]) -> String {
    let mut out = format!("# config_hash={hash}\nmethod\trun\tseed\tcohort\tusers");
    for k in ks {
        write!(out, "\tdcg@{k}\trecall@{k}\tmap@{k}").unwrap();
    }
    out.push('\n');
    for o in outcomes {
        for rep in &o.reports {
            write!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                o.method, o.run, o.seed, rep.cohort, rep.users
            )
            .unwrap();
            if rep.values.is_empty() {
                out.push_str(&"\tNA".repeat(3 * ks.len()));
            }
            for v in &rep.values {
                write!(out, "\t{:.10}\t{:.10}\t{:.10}", v.dcg, v.recall, v.map).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

fn write_artifacts(cfg: &ExperimentConfig, res: &ExperimentResult) -> Result<()> {
    let out = &cfg.out;
    mkdir(out)?;
    write(
        &out.join("config.txt"),
        &format!("# config_hash={}\n{}", res.config_hash, cfg.canonical_text()),
    )?;

    let mut sel = format!(
        "# config_hash={}\nmethod\tdim\tlambda\tclip\tvalidation_dcg@5\n",
        res.config_hash
    );
    for s in &res.selections {
        let clip = s.params.clip.map_or_else(|| "NA".to_string(), |c| format!("{c:?}"));
        writeln!(
            sel,
            "{}\t{}\t{:?}\t{}\t{:.10}",
            s.method, s.params.dim, s.params.lambda, clip, s.validation_dcg
        )
        .unwrap();
    }
    write(&out.join("selected.tsv"), &sel)?;

    write(
        &out.join("runs.tsv"),
        &runs_tsv(&res.config_hash, &cfg.ks, &res.outcomes),
    )?;

    let mut fails = format!("# config_hash={}\nmethod\tstage\tmessage\n", res.config_hash);
    for f in &res.failures {
        writeln!(
            fails,
            "{}\t{}\t{}",
            f.method,
            f.stage,
            f.message.replace(['\t', '\n'], " ")
        )
        .unwrap();
    }
    write(&out.join("failures.tsv"), &fails)?;

    let logs = out.join("logs");
    mkdir(&logs)?;
    for o in &res.outcomes {
        let mut text = format!(
            "# config_hash={} method={} run={} seed={}\n",
            res.config_hash, o.method, o.run, o.seed
        );
        for line in &o.log {
            text.push_str(line);
            text.push('\n');
        }
        write(&logs.join(format!("{}_run{:03}.log", o.method, o.run)), &text)?;
    }
    Ok(())
}
