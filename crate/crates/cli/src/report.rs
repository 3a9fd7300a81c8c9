//! Aggregation of `runs.tsv` into summary tables and significance tests.
//!
//! Both `experiment` and `report` build their tables from the written
//! `runs.tsv`, so re-aggregating an output directory reproduces the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use upl_core::evaluation::{mean_var, one_tailed_t_test};
use upl_core::{Error, Result};

/// One parsed `runs.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunsTable {
    pub config_hash: Option<String>,
    /// Metric column names, e.g. `dcg@5`.
    pub metrics: Vec<String>,
    pub rows: Vec<RunRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub method: String,
    pub run: usize,
    pub seed: u64,
    pub cohort: String,
    pub users: usize,
    /// Empty when the cohort had no users in that run.
    pub values: Vec<f64>,
}

const FIXED: [&str; 5] = ["method", "run", "seed", "cohort", "users"];

pub fn parse_runs(text: &str, origin: &Path) -> Result<RunsTable> {
    let perr = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut hash = None;
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let n = idx + 1;
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(h) = rest.trim().strip_prefix("config_hash=") {
                hash = Some(h.to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let Some(cols) = &header else {
            if fields.len() < FIXED.len() || fields[..FIXED.len()] != FIXED {
                return Err(perr(
                    n,
                    "header must start with method, run, seed, cohort, users".into(),
                ));
            }
            header = Some(fields.iter().map(|s| s.to_string()).collect());
            continue;
        };
        if fields.len() != cols.len() {
            return Err(perr(
                n,
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| perr(n, format!("`{}` in column `{}` is not a number", fields[i], cols[i])))
        };
        rows.push(RunRow {
            method: fields[0].to_string(),
            run: fields[1]
                .parse()
                .map_err(|_| perr(n, format!("bad run `{}`", fields[1])))?,
            seed: fields[2]
                .parse()
                .map_err(|_| perr(n, format!("bad seed `{}`", fields[2])))?,
            cohort: fields[3].to_string(),
            users: fields[4]
                .parse()
                .map_err(|_| perr(n, format!("bad user count `{}`", fields[4])))?,
            values: if fields[FIXED.len()..].iter().all(|f| *f == "NA") {
                Vec::new()
            } else {
                (FIXED.len()..fields.len()).map(num).collect::<Result<_>>()?
            },
        });
    }
    let header = header.ok_or_else(|| perr(0, "missing header".into()))?;
    Ok(RunsTable {
        config_hash: hash,
        metrics: header[FIXED.len()..].to_vec(),
        rows,
    })
}

/// Mean of every metric per `(cohort, method)`, methods in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub metrics: Vec<String>,
    pub cohorts: Vec<String>,
    pub methods: Vec<String>,
    /// `(cohort, method)` -> per-metric samples over runs.
    pub samples: BTreeMap<(String, String), Vec<Vec<f64>>>,
}

impl Summary {
    pub fn from_table(t: &RunsTable) -> Self {
        let mut cohorts: Vec<String> = Vec::new();
        let mut methods: Vec<String> = Vec::new();
        let mut samples: BTreeMap<(String, String), Vec<Vec<f64>>> = BTreeMap::new();
        for r in t.rows.iter().filter(|r| !r.values.is_empty()) {
            if !cohorts.contains(&r.cohort) {
                cohorts.push(r.cohort.clone());
            }
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
            let cols = samples
                .entry((r.cohort.clone(), r.method.clone()))
                .or_insert_with(|| vec![Vec::new(); t.metrics.len()]);
            for (c, v) in cols.iter_mut().zip(&r.values) {
                c.push(*v);
            }
        }
        Self {
            metrics: t.metrics.clone(),
            cohorts,
            methods,
            samples,
        }
    }

    pub fn runs(&self, cohort: &str, method: &str) -> usize {
        self.column(cohort, method, 0).map_or(0, <[f64]>::len)
    }

    pub fn column(&self, cohort: &str, method: &str, metric: usize) -> Option<&[f64]> {
        self.samples
            .get(&(cohort.to_string(), method.to_string()))
            .map(|cols| cols[metric].as_slice())
    }

    pub fn mean(&self, cohort: &str, method: &str, metric: usize) -> Option<f64> {
        self.column(cohort, method, metric).map(|c| mean_var(c).0)
    }
}

/// UPL against the best other method, per cohort and metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub cohort: String,
    pub metric: String,
    pub target: String,
    pub target_mean: f64,
    pub competitor: String,
    pub competitor_mean: f64,
    pub t: Option<f64>,
    pub df: Option<f64>,
    pub p_value: Option<f64>,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// The target is `upl` when present, otherwise the method with the highest
/// mean; the competitor is the best remaining method.
pub fn comparisons(s: &Summary) -> Vec<Comparison> {
    let mut out = Vec::new();
    if s.methods.len() < 2 {
        return out;
    }
    for cohort in &s.cohorts {
        for (m, metric) in s.metrics.iter().enumerate() {
            let mut ranked: Vec<(&String, f64)> = s
                .methods
                .iter()
                .filter_map(|name| s.mean(cohort, name, m).map(|v| (name, v)))
                .collect();
            if ranked.len() < 2 {
                continue;
            }
            let target_idx = ranked
                .iter()
                .position(|(n, _)| n.as_str() == "upl")
                .unwrap_or_else(|| best_index(&ranked));
            let (target, target_mean) = ranked.remove(target_idx);
            let (competitor, competitor_mean) = ranked[best_index(&ranked)];
            let test = one_tailed_t_test(
                s.column(cohort, target, m).unwrap_or(&[]),
                s.column(cohort, competitor, m).unwrap_or(&[]),
            )
            .ok();
            out.push(Comparison {
                cohort: cohort.clone(),
                metric: metric.clone(),
                target: target.clone(),
                target_mean,
                competitor: competitor.clone(),
                competitor_mean,
                t: test.map(|t| t.t),
                df: test.map(|t| t.df),
                p_value: test.map(|t| t.p_value),
            });
        }
    }
    out
}

/// First index with the maximal mean.
fn best_index(ranked: &[(&String, f64)]) -> usize {
    let mut best = 0;
    for (i, (_, v)) in ranked.iter().enumerate() {
        if *v > ranked[best].1 {
            best = i;
        }
    }
    best
}

/// `recall@5` -> `Recall@5`, `dcg@5` -> `DCG@5`.
fn metric_label(m: &str) -> String {
    match m.split_once('@') {
        Some(("recall", k)) => format!("Recall@{k}"),
        _ => m.to_uppercase(),
    }
}

fn hash_line(hash: Option<&str>) -> String {
    format!("# config_hash={}\n", hash.unwrap_or("unknown"))
}

pub fn summary_tsv(s: &Summary, hash: Option<&str>) -> String {
    let mut out = hash_line(hash);
    out.push_str("cohort\tmethod\truns");
    for m in &s.metrics {
        write!(out, "\t{m}").unwrap();
    }
    out.push('\n');
    for cohort in &s.cohorts {
        for method in &s.methods {
            if s.runs(cohort, method) == 0 {
                continue;
            }
            write!(out, "{cohort}\t{method}\t{}", s.runs(cohort, method)).unwrap();
            for m in 0..s.metrics.len() {
                write!(out, "\t{:.6}", s.mean(cohort, method, m).unwrap_or(f64::NAN)).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn significance_tsv(cmp: &[Comparison], hash: Option<&str>) -> String {
    let mut out = hash_line(hash);
    out.push_str("cohort\tmetric\tmethod\tmean\tcompetitor\tcompetitor_mean\tt\tdf\tp_value\tsignificant\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    for c in cmp {
        let sig = c.p_value.is_some_and(|p| p < SIGNIFICANCE_LEVEL);
        writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{}\t{:.6}\t{}\t{}\t{}\t{}",
            c.cohort,
            c.metric,
            c.target,
            c.target_mean,
            c.competitor,
            c.competitor_mean,
            opt(c.t),
            opt(c.df),
            c.p_value.map_or_else(|| "NA".to_string(), |p| format!("{p:.6e}")),
            sig
        )
        .unwrap();
    }
    out
}

/// Markdown tables, one per cohort: methods as rows, metric x K as columns.
/// A `*` marks a mean significantly above the best competitor.
pub fn summary_markdown(s: &Summary, cmp: &[Comparison], hash: Option<&str>) -> String {
    let mut out = String::from("# Results\n\n");
    writeln!(out, "Config hash: `{}`\n", hash.unwrap_or("unknown")).unwrap();
    for cohort in &s.cohorts {
        let runs = s.methods.iter().map(|m| s.runs(cohort, m)).max().unwrap_or(0);
        writeln!(out, "## {cohort} ({runs} runs)\n").unwrap();
        out.push_str("| method |");
        for m in &s.metrics {
            write!(out, " {} |", metric_label(m)).unwrap();
        }
        out.push_str("\n|---|");
        for _ in &s.metrics {
            out.push_str("---:|");
        }
        out.push('\n');
        for method in &s.methods {
            if s.runs(cohort, method) == 0 {
                continue;
            }
            write!(out, "| {method} |").unwrap();
            for (m, metric) in s.metrics.iter().enumerate() {
                let mean = s.mean(cohort, method, m).unwrap_or(f64::NAN);
                let sig = cmp.iter().any(|c| {
                    &c.cohort == cohort
                        && &c.metric == metric
                        && &c.target == method
                        && c.p_value.is_some_and(|p| p < SIGNIFICANCE_LEVEL)
                        && c.target_mean > c.competitor_mean
                });
                write!(out, " {mean:.5}{} |", if sig { "*" } else { "" }).unwrap();
            }
            out.push('\n');
        }
        out.push('\n');
    }
    writeln!(
        out,
        "`*`: one-tailed Welch t-test against the best competitor, p < {SIGNIFICANCE_LEVEL}."
    )
    .unwrap();
    out
}

/// Rebuilds `summary.tsv`, `summary.md` and `significance.tsv` from `dir/runs.tsv`.
pub fn aggregate_dir(dir: &Path) -> Result<Summary> {
    let path = dir.join("runs.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let table = parse_runs(&text, &path)?;
    let summary = Summary::from_table(&table);
    let cmp = comparisons(&summary);
    let hash = table.config_hash.as_deref();
    for (name, body) in [
        ("summary.tsv", summary_tsv(&summary, hash)),
        ("significance.tsv", significance_tsv(&cmp, hash)),
        ("summary.md", summary_markdown(&summary, &cmp, hash)),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::Io { path: p, source: e })?;
    }
    Ok(summary)
}
