//! Handlers behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use upl_core::losses::Method;
use upl_core::oracle::{bundled_worlds, run_suite, SuiteReport, SyntheticWorld, VerifyMode};
use upl_core::{Error, Result};

use crate::cli::{Cli, Command, ExperimentArgs, ModeArg, ReportArgs, TrainArgs, VerifyArgs};
use crate::config::ExperimentConfig;
use crate::experiment::{self, load_ratings, prepare_run, train_method, HyperParams};
use crate::report;

/// What a command left behind, for the exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Finished, but some check or method failed.
    Failed,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Prepare(a) => prepare(&a),
        Command::Train(a) => train(&a),
        Command::Experiment(a) => run_experiment(&a),
        Command::Verify(a) => verify(&a),
        Command::Report(a) => report_cmd(&a),
    }
}

/// Defaults, then the config file, then the grid file, then flags, then `--set`.
pub fn resolve_config(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::read(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &a.grid_file {
        cfg.apply_grid_file(p)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(v) = &a.dataset {
        flags.push(("dataset", v.clone()));
    }
    if let Some(v) = &a.format {
        flags.push(("format", v.clone()));
    }
    if let Some(v) = &a.methods {
        flags.push(("methods", v.clone()));
    }
    if let Some(v) = a.runs {
        flags.push(("runs", v.to_string()));
    }
    if let Some(v) = a.seed {
        flags.push(("seed", v.to_string()));
    }
    if let Some(v) = a.epsilon_train {
        flags.push(("epsilon_train", v.to_string()));
    }
    if let Some(v) = a.epsilon_test {
        flags.push(("epsilon_test", v.to_string()));
    }
    if let Some(v) = &a.out {
        flags.push(("out", v.display().to_string()));
    }
    if let Some(v) = a.threads {
        flags.push(("threads", v.to_string()));
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, text).map_err(io(path))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Writes run 0's splits, propensity tables and id maps under `out/data`.
pub fn prepare(a: &ExperimentArgs) -> Result<Outcome> {
    let cfg = resolve_config(a)?;
    let ratings = load_ratings(&cfg)?;
    let data = prepare_run(&ratings, &cfg, 0)?;
    let dir = cfg.out.join("data");
    let ids = Some((ratings.0.user_ids(), ratings.0.item_ids()));
    data.train_full.write_dir(&dir.join("train_full"), ids)?;
    data.train.write_dir(&dir.join("train"), ids)?;
    data.validation.write_dir(&dir.join("validation"), ids)?;
    data.test.write_dir(&dir.join("test"), ids)?;
    data.propensities.write_tables(&dir)?;
    write(
        &dir.join("config.txt"),
        &format!("# config_hash={}\n{}", cfg.hash(), cfg.canonical_text()),
    )?;
    println!(
        "prepared {}: {} train, {} validation, {} test pairs",
        dir.display(),
        data.train.pairs().len(),
        data.validation.pairs().len(),
        data.test.pairs().len()
    );
    Ok(Outcome::Ok)
}

/// One method, one hyper-parameter point, one run.
pub fn train(a: &TrainArgs) -> Result<Outcome> {
    let cfg = resolve_config(&a.common)?;
    let method: Method = match &a.method {
        Some(m) => m.parse()?,
        None => cfg.methods[0],
    };
    let hp = HyperParams {
        dim: a.dim.unwrap_or(cfg.grid.dims[0]),
        lambda: a.lambda.unwrap_or(cfg.grid.lambdas[0]),
        clip: if method.needs_clip() {
            Some(a.clip.unwrap_or(cfg.grid.clips[0]))
        } else {
            None
        },
    };
    pool(cfg.threads)?.install(|| {
        let ratings = load_ratings(&cfg)?;
        let data = prepare_run(&ratings, &cfg, a.run)?;
        let relmf = if method == Method::Upl {
            let sel = experiment::select(&data, &cfg, Method::RelMf, None)?;
            Some(train_method(&data, &cfg, Method::RelMf, &sel.params, None, &mut Vec::new())?.model)
        } else {
            None
        };
        let mut log = Vec::new();
        let run = train_method(&data, &cfg, method, &hp, relmf.as_ref(), &mut log)?;
        let reports = upl_core::evaluation::evaluate(
            &run.model,
            &data.test,
            &data.cohorts,
            &experiment::cohorts(&cfg),
            &cfg.ks,
            cfg.relevance,
            method.name(),
            a.run,
        )?;
        let stem = format!("{}_run{:03}", method, a.run);
        let hash = cfg.hash();
        run.model.save(&cfg.out.join(format!("{stem}.model")))?;
        let mut text = format!(
            "# config_hash={hash} method={method} run={} best_epoch={}\n",
            a.run, run.best_epoch
        );
        for line in &log {
            text.push_str(line);
            text.push('\n');
        }
        write(&cfg.out.join(format!("{stem}.log")), &text)?;
        let outcome = experiment::RunOutcome {
            method,
            run: a.run,
            seed: data.seeds.run_seed,
            reports,
            log,
        };
        let tsv = experiment::runs_tsv(&hash, &cfg.ks, std::slice::from_ref(&outcome));
        write(&cfg.out.join(format!("{stem}.metrics.tsv")), &tsv)?;
        // Everything but the hash line.
        print!("{}", tsv.split_once('\n').map_or("", |(_, rows)| rows));
        Ok(Outcome::Ok)
    })
}

pub fn run_experiment(a: &ExperimentArgs) -> Result<Outcome> {
    let cfg = resolve_config(a)?;
    let res = experiment::run_experiment(&cfg)?;
    for s in &res.selections {
        println!(
            "selected\t{}\tdim={}\tlambda={:?}\tclip={}\tvalidation_dcg@5={:.6}",
            s.method,
            s.params.dim,
            s.params.lambda,
            s.params.clip.map_or_else(|| "NA".into(), |c| format!("{c:?}")),
            s.validation_dcg
        );
    }
    for f in &res.failures {
        eprintln!("failed\t{}\t{}\t{}", f.method, f.stage, f.message);
    }
    println!("wrote {}", res.out.display());
    Ok(if res.failures.is_empty() {
        Outcome::Ok
    } else {
        Outcome::Failed
    })
}

/// The bundled worlds plus the default world shipped with the binary.
pub fn default_worlds() -> Result<Vec<SyntheticWorld>> {
    let mut worlds = bundled_worlds();
    worlds.push(SyntheticWorld::parse(
        include_str!("../worlds/default.world"),
        Path::new("default.world"),
    )?);
    Ok(worlds)
}

pub fn verify_suite(a: &VerifyArgs) -> Result<SuiteReport> {
    let worlds = if a.worlds.is_empty() {
        default_worlds()?
    } else {
        a.worlds
            .iter()
            .map(|p| SyntheticWorld::read(p))
            .collect::<Result<_>>()?
    };
    let (mode, samples) = match a.mode {
        ModeArg::Auto => (VerifyMode::Auto, Some(a.samples as usize)),
        ModeArg::Exact => (VerifyMode::Exact, None),
        ModeArg::Mc => (VerifyMode::MonteCarlo, Some(a.samples as usize)),
    };
    pool(a.threads.unwrap_or(0))?.install(|| run_suite(&worlds, mode, samples, a.seed))
}

pub fn verify(a: &VerifyArgs) -> Result<Outcome> {
    let suite = verify_suite(a)?;
    for c in &suite.checks {
        println!("{c}");
    }
    if let Some(dir) = &a.out {
        let path: PathBuf = dir.join("oracle.tsv");
        write(&path, &suite.reports_tsv())?;
    }
    let failed = suite.checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", suite.checks.len());
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::Failed })
}

pub fn report_cmd(a: &ReportArgs) -> Result<Outcome> {
    let summary = report::aggregate_dir(&a.out)?;
    let cmp = report::comparisons(&summary);
    print!("{}", report::significance_tsv(&cmp, None));
    Ok(Outcome::Ok)
}
