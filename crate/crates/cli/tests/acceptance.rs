//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 6 and 7 need the public Coat dataset. Point `COAT_DIR` at a
//! directory holding `train.ascii` and `test.ascii` and run
//! `cargo test -p upl-cli --release --test acceptance -- --ignored --nocapture`.
//! Without it they are reported as BLOCKED, never as passing.

use std::fs;
use std::io::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upl_cli::report::parse_runs;
use upl_core::evaluation::rank_metrics;
use upl_core::losses::{sigmoid_pair_loss, upl_pair_weight_from_posterior, LossSpec, Method, PairSample, PointSample};
use upl_core::oracle::{
    bundled_worlds, compare_variances, exact_expectation, ideal_risk, low_exposure_worlds, mc_draws, random_worlds,
    Estimator, MAX_EXACT_CELLS,
};

type Outcome = std::result::Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Outcome);
/// Scores, relevance, K, then the expected DCG, Recall and AP.
type Fixture = (Vec<f64>, Vec<f64>, usize, f64, f64, f64);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let worlds = random_worlds();
    ensure(worlds.len() >= 20, || format!("only {} worlds", worlds.len()))?;
    let mut worst: f64 = 0.0;
    for w in &worlds {
        ensure(w.cells() <= MAX_EXACT_CELLS, || {
            format!("{} has {} cells", w.name, w.cells())
        })?;
        let ideal = ideal_risk(w);
        for est in [Estimator::Upl, Estimator::Ubpr] {
            let e = exact_expectation(w, &est).map_err(|e| e.to_string())?;
            let gap = (e - ideal).abs();
            worst = worst.max(gap);
            ensure(gap <= 1e-10, || format!("{} {est}: |E - R| = {gap:e}", w.name))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} worlds, max |E - R_ideal| = {worst:.2e}, {secs:.2}s",
        worlds.len()
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut best = (f64::NEG_INFINITY, String::new());
    for w in bundled_worlds() {
        if w.cells() > MAX_EXACT_CELLS {
            continue;
        }
        let bias = exact_expectation(&w, &Estimator::UbprClipped(0.0)).map_err(|e| e.to_string())? - ideal_risk(&w);
        if bias > best.0 {
            best = (bias, w.name.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(best.0 > 1e-3, || format!("max clipping bias {:e}", best.0))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("max clipping bias {:.4e} on {}, {secs:.2}s", best.0, best.1))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let worlds = low_exposure_worlds();
    let mut parts = Vec::new();
    for (k, w) in worlds.iter().enumerate() {
        ensure(w.theta().iter().all(|&t| t <= 0.2), || {
            format!("{} has theta > 0.2", w.name)
        })?;
        let draws =
            mc_draws(w, &[Estimator::Ubpr, Estimator::Upl], 100_000, 77 + k as u64).map_err(|e| e.to_string())?;
        let cmp = compare_variances(&draws[0], &draws[1]).map_err(|e| e.to_string())?;
        ensure(cmp.ratio > 1.0 && cmp.p_value < 0.01, || {
            format!("{}: ratio {:.3}, p {:.3e}", w.name, cmp.ratio, cmp.p_value)
        })?;
        parts.push(format!("{} ratio {:.2} p {:.1e}", w.name, cmp.ratio, cmp.p_value));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{}, {secs:.2}s", parts.join("; ")))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn criterion_4() -> Outcome {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut losses = 0;
    for method in Method::ALL {
        let spec = match method {
            Method::Ubpr | Method::UbprClipped => LossSpec::new(method, Some(-1.0), None),
            Method::Wmf => LossSpec::new(method, None, Some(10.0)),
            m => Ok(LossSpec::default_for(m)),
        }
        .map_err(|e| e.to_string())?;
        let mut points = 0;
        while points < 100 {
            if method.is_pairwise() {
                let sample = PairSample {
                    user: 0,
                    pos: 0,
                    neg: 1,
                    c_j: method.samples_any_negative() && rng.random_bool(0.5),
                    theta_i: rng.random_range(0.05..1.0),
                    theta_j: rng.random_range(0.05..1.0),
                    gamma_hat_j: rng.random_range(0.0..0.95),
                };
                let (si, sj) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
                let f = |a: f64, b: f64| spec.pair_term(&sample, a, b).map(|t| t.value).unwrap_or(f64::NAN);
                if let Some(t) = spec.clip_threshold() {
                    let raw = LossSpec::default_for(Method::UbprNClip)
                        .pair_term(&sample, si, sj)
                        .map_err(|e| e.to_string())?
                        .value;
                    if (raw - t).abs() < 1e-3 {
                        continue;
                    }
                }
                let t = spec.pair_term(&sample, si, sj).map_err(|e| e.to_string())?;
                let n_i = (f(si + H, sj) - f(si - H, sj)) / (2.0 * H);
                let n_j = (f(si, sj + H) - f(si, sj - H)) / (2.0 * H);
                worst = worst.max(rel_err(t.d_si, n_i)).max(rel_err(t.d_sj, n_j));
            } else {
                let sample = PointSample {
                    user: 0,
                    item: 0,
                    clicked: rng.random_bool(0.5),
                    theta_click: rng.random_range(0.05..1.0),
                    theta_nonclick: rng.random_range(0.05..1.0),
                };
                let s = rng.random_range(-4.0..4.0);
                let f = |x: f64| spec.point_term(&sample, x).map(|t| t.value).unwrap_or(f64::NAN);
                let analytic = spec.point_term(&sample, s).map_err(|e| e.to_string())?.d_s;
                worst = worst.max(rel_err(analytic, (f(s + H) - f(s - H)) / (2.0 * H)));
            }
            ensure(worst < 1e-4, || format!("{method}: relative error {worst:e}"))?;
            points += 1;
        }
        losses += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{losses} losses x 100 points, max relative error {worst:.2e}"))
}

fn criterion_5() -> Outcome {
    let l3 = 1.0 / 3f64.log2();
    // Expected values worked out by hand.
    let fixtures: Vec<Fixture> = vec![
        (vec![0.9], vec![1.0], 3, 1.0, 1.0, 1.0),
        (vec![0.9, 0.1], vec![0.0, 1.0], 3, l3, 1.0, 0.5),
        (
            vec![0.4, 0.3, 0.2, 0.1],
            vec![1.0, 0.0, 1.0, 0.0],
            3,
            1.5,
            1.0,
            5.0 / 6.0,
        ),
        (
            vec![0.1, 0.2, 0.3, 0.4, 0.5],
            vec![1.0, 1.0, 0.0, 0.0, 0.0],
            3,
            0.0,
            0.0,
            0.0,
        ),
        (
            vec![5.0, 4.0, 3.0, 2.0, 1.0],
            vec![0.0, 1.0, 1.0, 0.0, 1.0],
            5,
            l3 + 0.5 + 1.0 / 6f64.log2(),
            1.0,
            (0.5 + 2.0 / 3.0 + 0.6) / 3.0,
        ),
        (
            vec![5.0, 4.0, 3.0, 2.0, 1.0],
            vec![0.0, 1.0, 1.0, 0.0, 1.0],
            2,
            l3,
            1.0 / 3.0,
            1.0 / 6.0,
        ),
    ];
    for (n, (s, r, k, dcg, recall, map)) in fixtures.iter().enumerate() {
        let m = rank_metrics(s, r, *k)
            .map_err(|e| e.to_string())?
            .ok_or_else(|| format!("fixture {n}: no relevant item"))?;
        for (name, got, want) in [
            ("dcg", m.dcg, *dcg),
            ("recall", m.recall, *recall),
            ("map", m.map, *map),
        ] {
            ensure((got - want).abs() <= 1e-15, || {
                format!("fixture {n} {name}: {got} vs {want}")
            })?;
        }
    }
    Ok(format!("{} fixtures, DCG@3 at rank 2 = {l3:.5}", fixtures.len()))
}

const COAT_HELP: &str = "set COAT_DIR to the Coat data and run the ignored coat test";

fn criterion_6_status() -> Outcome {
    Err(match std::env::var_os("COAT_DIR") {
        Some(d) => format!(
            "NOT RUN here; COAT_DIR={} is set, run with --ignored",
            Path::new(&d).display()
        ),
        None => COAT_HELP.into(),
    })
}

fn experiment_with_config(config: &Path, out: &Path) -> std::result::Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_upl"))
        .args(["experiment", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("experiment.cfg");
    fs::write(
        &config,
        "methods = bpr,ubpr,upl\nruns = 3\nseed = 11\ndims = 4,6\nlambdas = 1e-5\nclips = 0,-1\n\
         max_epochs = 4\nlearning_rate = 0.01\nsim_users = 40\nsim_items = 50\n\
         sim_train_per_user = 12\nsim_test_per_user = 8\n",
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    experiment_with_config(&config, &a)?;
    experiment_with_config(&config, &b)?;
    let tables = [
        "runs.tsv",
        "summary.tsv",
        "summary.md",
        "significance.tsv",
        "selected.tsv",
    ];
    for name in tables {
        let x = fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(x == y, || format!("{name} differs"))?;
    }
    Ok(format!("{} tables byte-identical across reruns", tables.len()))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let clipped = LossSpec::new(Method::UbprClipped, Some(0.0), None).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let theta_i: f64 = rng.random_range(1e-3..=1.0);
        let theta_j: f64 = rng.random_range(1e-3..=1.0);
        let (si, sj) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
        let c_j = rng.random_bool(0.5);
        let upl = if c_j {
            0.0
        } else {
            upl_pair_weight_from_posterior(theta_i, theta_j, theta_j).map_err(|e| e.to_string())?
                * sigmoid_pair_loss(si, sj).value
        };
        let sample = PairSample {
            user: 0,
            pos: 0,
            neg: 1,
            c_j,
            theta_i,
            theta_j,
            gamma_hat_j: 0.0,
        };
        let ubpr = clipped.pair_term(&sample, si, sj).map_err(|e| e.to_string())?.value;
        worst = worst.max((upl - ubpr).abs());
    }
    ensure(worst <= 1e-12, || format!("max gap {worst:e}"))?;
    Ok(format!("10000 points, max gap {worst:.2e}"))
}

/// Straight to the process stdout so the lines survive libtest's capture.
fn report(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run(f: fn() -> Outcome) -> Outcome {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        (1, "exact unbiasedness", criterion_1),
        (2, "clipping bias", criterion_2),
        (3, "variance ordering", criterion_3),
        (4, "gradient correctness", criterion_4),
        (5, "metric correctness", criterion_5),
        (6, "coat reproduction", criterion_6_status),
        (7, "nclip vs clipped on coat", criterion_6_status),
        (8, "determinism", criterion_8),
        (9, "identity check", criterion_9),
    ];
    let mut failed = Vec::new();
    // Start below libtest's "test acceptance_criteria ..." prefix.
    report(String::new());
    for (n, name, f) in criteria {
        match run(f) {
            Ok(detail) => report(format!("criterion {n} PASS {name}: {detail}")),
            Err(detail) if n == 6 || n == 7 => report(format!("criterion {n} BLOCKED {name}: {detail}")),
            Err(detail) => {
                report(format!("criterion {n} FAIL {name}: {detail}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

/// Mean DCG@5 per method in the `all` cohort of an experiment directory.
fn mean_dcg5(dir: &Path) -> Vec<(String, f64)> {
    let path = dir.join("runs.tsv");
    let table = parse_runs(&fs::read_to_string(&path).unwrap(), &path).unwrap();
    let col = table.metrics.iter().position(|m| m == "dcg@5").unwrap();
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in table.rows.iter().filter(|r| r.cohort == "all") {
        match out.iter_mut().find(|(m, _, _)| *m == r.method) {
            Some(e) => {
                e.1 += r.values[col];
                e.2 += 1;
            }
            None => out.push((r.method.clone(), r.values[col], 1)),
        }
    }
    out.into_iter().map(|(m, s, n)| (m, s / n as f64)).collect()
}

fn coat_results() -> Option<Vec<(String, f64)>> {
    let Some(coat) = std::env::var_os("COAT_DIR") else {
        report(COAT_HELP.to_string());
        return None;
    };
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_upl"))
        .args([
            "experiment",
            "--format",
            "dense",
            "--methods",
            "bpr,ubpr,ubpr_nclip,upl",
            "--runs",
            "10",
            "--dataset",
        ])
        .arg(&coat)
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let means = mean_dcg5(out.path());
    report(format!("coat mean DCG@5: {means:?}"));
    Some(means)
}

fn lookup(means: &[(String, f64)], m: &str) -> f64 {
    means.iter().find(|(n, _)| n == m).map(|(_, v)| *v).unwrap()
}

#[test]
#[ignore = "needs the Coat dataset in COAT_DIR"]
fn criterion_6_and_7_coat() {
    let Some(means) = coat_results() else { return };
    let (upl, ubpr, bpr, nclip) = (
        lookup(&means, "upl"),
        lookup(&means, "ubpr"),
        lookup(&means, "bpr"),
        lookup(&means, "ubpr_nclip"),
    );
    let c6 = upl > ubpr && ubpr > bpr && (upl - 0.12886).abs() <= 0.015;
    let c7 = nclip <= ubpr;
    println!(
        "criterion 6 {} coat reproduction: upl {upl:.5} ubpr {ubpr:.5} bpr {bpr:.5}",
        if c6 { "PASS" } else { "FAIL" }
    );
    println!(
        "criterion 7 {} nclip vs clipped: nclip {nclip:.5} ubpr {ubpr:.5}",
        if c7 { "PASS" } else { "FAIL" }
    );
    assert!(c6 && c7);
}
