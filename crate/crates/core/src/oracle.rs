//! Ground truth for the pairwise estimators on small synthetic worlds.
//!
//! A world fixes, for every `(user, item)` cell, an exposure probability
//! `theta`, a relevance probability `gamma` and a model score. Exposure and
//! relevance are independent across cells and of each other; a click is
//! `o * r`.
//!
//! Estimators are evaluated full-batch on the induced clicks: every ordered
//! pair `(i, j)`, `i != j`, of one user with `c_i = 1`, term computed exactly
//! as the trainer computes it. Exact moments enumerate all `4^cells` joint
//! `(o, r)` outcomes; Monte Carlo draws outcomes i.i.d.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::evaluation::Scorer;
use crate::kv::KvDocument;
use crate::losses::{sigmoid_pair_loss, LossSpec, Method, PairSample};
use crate::{Error, Result};

pub const MAX_EXACT_CELLS: usize = 10;
pub const MIN_MC_SAMPLES: usize = 10_000;
/// Dimension cap for worlds read from text.
pub const MAX_WORLD_SIDE: usize = 12;

const MC_CHUNK: usize = 4096;
const ENUM_CHUNKS: u64 = 256;

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub name: String,
    num_users: usize,
    num_items: usize,
    theta: Vec<f64>,
    gamma: Vec<f64>,
    scores: Vec<f64>,
}

impl SyntheticWorld {
    /// Row-major `num_users x num_items` tables. Requires `theta` in `(0, 1]`,
    /// `gamma` in `[0, 1]` and `theta * gamma < 1` in every cell.
    pub fn new(
        name: impl Into<String>,
        num_users: usize,
        num_items: usize,
        theta: Vec<f64>,
        gamma: Vec<f64>,
        scores: Vec<f64>,
    ) -> Result<Self> {
        let cells = num_users * num_items;
        if cells == 0 {
            return Err(Error::domain("world has no cells"));
        }
        for (what, v) in [("theta", &theta), ("gamma", &gamma), ("scores", &scores)] {
            if v.len() != cells {
                return Err(Error::domain(format!(
                    "{what} has {} values, expected {cells}",
                    v.len()
                )));
            }
        }
        for c in 0..cells {
            let (t, g) = (theta[c], gamma[c]);
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::domain(format!("theta {t} at cell {c} outside (0, 1]")));
            }
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::domain(format!("gamma {g} at cell {c} outside [0, 1]")));
            }
            if t * g >= 1.0 {
                return Err(Error::Singularity(format!("theta * gamma = 1 at cell {c}")));
            }
            if !scores[c].is_finite() {
                return Err(Error::domain(format!("score at cell {c} is not finite")));
            }
        }
        Ok(Self {
            name: name.into(),
            num_users,
            num_items,
            theta,
            gamma,
            scores,
        })
    }

    /// Same probabilities, scores taken from `model`.
    pub fn with_model(mut self, model: &dyn Scorer) -> Result<Self> {
        for u in 0..self.num_users {
            for i in 0..self.num_items {
                self.scores[u * self.num_items + i] = model.score(u, i);
            }
        }
        let (name, nu, ni) = (self.name.clone(), self.num_users, self.num_items);
        Self::new(name, nu, ni, self.theta, self.gamma, self.scores)
    }

    /// Uniform `theta` in `theta_range`, `gamma` in `gamma_range`, standard
    /// normal scores.
    pub fn random(
        name: impl Into<String>,
        num_users: usize,
        num_items: usize,
        theta_range: (f64, f64),
        gamma_range: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = num_users * num_items;
        let mut theta = Vec::with_capacity(cells);
        let mut gamma = Vec::with_capacity(cells);
        let mut scores = Vec::with_capacity(cells);
        for _ in 0..cells {
            theta.push(theta_range.0 + (theta_range.1 - theta_range.0) * rng.random::<f64>());
            gamma.push(gamma_range.0 + (gamma_range.1 - gamma_range.0) * rng.random::<f64>());
            scores.push(StandardNormal.sample(&mut rng));
        }
        Self::new(name, num_users, num_items, theta, gamma, scores)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn cells(&self) -> usize {
        self.num_users * self.num_items
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    fn cell(&self, u: usize, i: usize) -> usize {
        u * self.num_items + i
    }

    /// Every ordered pair `(cell_i, cell_j)` sharing a user.
    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_users).flat_map(move |u| {
            (0..self.num_items).flat_map(move |i| {
                (0..self.num_items)
                    .filter(move |&j| j != i)
                    .map(move |j| (self.cell(u, i), self.cell(u, j)))
            })
        })
    }

    fn pair_loss(&self, ci: usize, cj: usize) -> f64 {
        sigmoid_pair_loss(self.scores[ci], self.scores[cj]).value
    }

    pub fn all_theta_at_most(&self, bound: f64) -> bool {
        self.theta.iter().all(|&t| t <= bound)
    }

    /// Parses the world text format:
    ///
    /// ```text
    /// name = small
    /// users = 1
    /// items = 3
    /// theta = 0.2 0.5 0.9
    /// gamma = 0.7 0.4 0.1
    /// scores = 0.3 -0.2 0.7   # optional; drawn from `seed` when absent
    /// ```
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let doc = KvDocument::parse(text, origin)?;
        doc.check_keys(&["name", "users", "items", "theta", "gamma", "scores", "seed"], origin)?;
        let parse_count = |key: &str| -> Result<usize> {
            let v: usize = doc
                .parse_value(key, origin)?
                .ok_or_else(|| Error::Config(format!("{}: missing `{key}`", origin.display())))?;
            if v == 0 || v > MAX_WORLD_SIDE {
                return Err(Error::Config(format!(
                    "{}: `{key}` = {v} outside 1..={MAX_WORLD_SIDE}",
                    origin.display()
                )));
            }
            Ok(v)
        };
        let nu = parse_count("users")?;
        let ni = parse_count("items")?;
        let table = |key: &str| -> Result<Option<Vec<f64>>> {
            let Some(raw) = doc.get(key) else { return Ok(None) };
            let line = doc.entries().iter().find(|e| e.key == key).map_or(0, |e| e.line);
            raw.split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        path: origin.to_path_buf(),
                        line,
                        message: format!("`{t}` in `{key}` is not a number"),
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        let theta = table("theta")?.ok_or_else(|| Error::Config(format!("{}: missing `theta`", origin.display())))?;
        let gamma = table("gamma")?.ok_or_else(|| Error::Config(format!("{}: missing `gamma`", origin.display())))?;
        let scores = match table("scores")? {
            Some(s) => s,
            None => {
                let seed: u64 = doc.parse_value("seed", origin)?.unwrap_or(0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..nu * ni).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
        };
        let name = doc.get("name").unwrap_or("world").to_string();
        Self::new(name, nu, ni, theta, gamma, scores)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        format!(
            "name = {}\nusers = {}\nitems = {}\ntheta = {}\ngamma = {}\nscores = {}\n",
            self.name,
            self.num_users,
            self.num_items,
            join(&self.theta),
            join(&self.gamma),
            join(&self.scores)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    /// UPL with the true relevance.
    Upl,
    /// UPL fed per-cell relevance estimates.
    UplWithGammaHat(Vec<f64>),
    /// Unclipped UBPR with the true propensities.
    Ubpr,
    /// UBPR with every term clipped from below at the threshold.
    UbprClipped(f64),
    Bpr,
    Zero,
}

impl Estimator {
    pub fn name(&self) -> String {
        match self {
            Estimator::Upl => "upl".into(),
            Estimator::UplWithGammaHat(_) => "upl_gamma_hat".into(),
            Estimator::Ubpr => "ubpr".into(),
            Estimator::UbprClipped(t) => format!("ubpr_clipped@{t}"),
            Estimator::Bpr => "bpr".into(),
            Estimator::Zero => "zero".into(),
        }
    }

    /// Per pair, the term value when `c_i = 1` and `c_j` is 0 or 1.
    fn pair_table(&self, world: &SyntheticWorld) -> Result<Vec<PairEntry>> {
        let (spec, gamma_hat): (Option<LossSpec>, Option<&[f64]>) = match self {
            Estimator::Upl => (Some(LossSpec::default_for(Method::Upl)), Some(world.gamma())),
            Estimator::UplWithGammaHat(g) => {
                if g.len() != world.cells() {
                    return Err(Error::domain(format!(
                        "gamma_hat has {} values, world has {} cells",
                        g.len(),
                        world.cells()
                    )));
                }
                (Some(LossSpec::default_for(Method::Upl)), Some(g.as_slice()))
            }
            Estimator::Ubpr => (Some(LossSpec::default_for(Method::UbprNClip)), None),
            Estimator::UbprClipped(t) => (Some(LossSpec::new(Method::UbprClipped, Some(*t), None)?), None),
            Estimator::Bpr => (Some(LossSpec::default_for(Method::Bpr)), None),
            Estimator::Zero => (None, None),
        };
        let Some(spec) = spec else { return Ok(Vec::new()) };
        // BPR and UPL only pair clicks with non-clicks.
        let any_negative = spec.method().samples_any_negative();
        world
            .pairs()
            .map(|(ci, cj)| {
                let term = |c_j: bool| -> Result<f64> {
                    if c_j && !any_negative {
                        return Ok(0.0);
                    }
                    let sample = PairSample {
                        user: ci / world.num_items,
                        pos: ci % world.num_items,
                        neg: cj % world.num_items,
                        c_j,
                        theta_i: world.theta[ci],
                        theta_j: world.theta[cj],
                        gamma_hat_j: gamma_hat.map_or(0.0, |g| g[cj]),
                    };
                    Ok(spec.pair_term(&sample, world.scores[ci], world.scores[cj])?.value)
                };
                Ok(PairEntry {
                    ci,
                    cj,
                    if_unclicked: term(false)?,
                    if_clicked: term(true)?,
                })
            })
            .collect()
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, Copy)]
struct PairEntry {
    ci: usize,
    cj: usize,
    if_unclicked: f64,
    if_clicked: f64,
}

fn evaluate_pairs(table: &[PairEntry], clicked: impl Fn(usize) -> bool) -> f64 {
    let mut s = NeumaierSum::default();
    for p in table {
        if clicked(p.ci) {
            s.add(if clicked(p.cj) { p.if_clicked } else { p.if_unclicked });
        }
    }
    s.value()
}

/// `sum over users, ordered i != j of gamma_i (1 - gamma_j) L(s_i, s_j)`.
pub fn ideal_risk(world: &SyntheticWorld) -> f64 {
    let mut s = NeumaierSum::default();
    for (ci, cj) in world.pairs() {
        s.add(world.gamma[ci] * (1.0 - world.gamma[cj]) * world.pair_loss(ci, cj));
    }
    s.value()
}

/// Probability of every click mask (bit `c` = cell `c` clicked), obtained by
/// summing over all `4^cells` joint exposure/relevance outcomes.
pub fn click_mask_distribution(world: &SyntheticWorld) -> Result<Vec<f64>> {
    let cells = world.cells();
    if cells > MAX_EXACT_CELLS {
        return Err(Error::EnumerationBound {
            cells,
            max: MAX_EXACT_CELLS,
        });
    }
    // Per cell, probability of (o, r) in the order (0,0), (0,1), (1,0), (1,1).
    let outcome_p: Vec<[f64; 4]> = (0..cells)
        .map(|c| {
            let (t, g) = (world.theta[c], world.gamma[c]);
            [(1.0 - t) * (1.0 - g), (1.0 - t) * g, t * (1.0 - g), t * g]
        })
        .collect();
    let total: u64 = 1 << (2 * cells);
    let chunks = ENUM_CHUNKS.min(total);
    let per_chunk = total.div_ceil(chunks);
    let partials: Vec<Vec<NeumaierSum>> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut acc = vec![NeumaierSum::default(); 1 << cells];
            let end = ((k + 1) * per_chunk).min(total);
            for outcome in k * per_chunk..end {
                let mut p = 1.0;
                let mut mask = 0usize;
                for (c, probs) in outcome_p.iter().enumerate() {
                    let digit = ((outcome >> (2 * c)) & 3) as usize;
                    p *= probs[digit];
                    if digit == 3 {
                        mask |= 1 << c;
                    }
                }
                acc[mask].add(p);
            }
            acc
        })
        .collect();
    let mut out = vec![NeumaierSum::default(); 1 << cells];
    for part in &partials {
        for (o, p) in out.iter_mut().zip(part) {
            o.add(p.value());
        }
    }
    Ok(out.iter().map(NeumaierSum::value).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

fn exact_from_distribution(world: &SyntheticWorld, dist: &[f64], est: &Estimator) -> Result<Moments> {
    let table = est.pair_table(world)?;
    let values: Vec<f64> = (0..dist.len())
        .map(|mask| evaluate_pairs(&table, |c| mask >> c & 1 == 1))
        .collect();
    let mut mean = NeumaierSum::default();
    for (p, v) in dist.iter().zip(&values) {
        mean.add(p * v);
    }
    let mean = mean.value();
    let mut var = NeumaierSum::default();
    for (p, v) in dist.iter().zip(&values) {
        var.add(p * (v - mean) * (v - mean));
    }
    Ok(Moments {
        mean,
        variance: var.value(),
    })
}

/// Exact mean and variance of the estimator's full-batch empirical risk.
pub fn exact_moments(world: &SyntheticWorld, est: &Estimator) -> Result<Moments> {
    let dist = click_mask_distribution(world)?;
    exact_from_distribution(world, &dist, est)
}

pub fn exact_expectation(world: &SyntheticWorld, est: &Estimator) -> Result<f64> {
    Ok(exact_moments(world, est)?.mean)
}

/// Per-draw estimator values for `samples` i.i.d. outcome draws; one column per
/// estimator, all estimators seeing the same draws.
pub fn mc_draws(world: &SyntheticWorld, ests: &[Estimator], samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if samples < MIN_MC_SAMPLES {
        return Err(Error::Config(format!(
            "Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {samples}"
        )));
    }
    let tables = ests.iter().map(|e| e.pair_table(world)).collect::<Result<Vec<_>>>()?;
    let chunks = samples.div_ceil(MC_CHUNK);
    let parts: Vec<Vec<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let n = MC_CHUNK.min(samples - k * MC_CHUNK);
            let mut cols = vec![Vec::with_capacity(n); tables.len()];
            let mut clicked = vec![false; world.cells()];
            for _ in 0..n {
                for (c, slot) in clicked.iter_mut().enumerate() {
                    let o = rng.random::<f64>() < world.theta[c];
                    let r = rng.random::<f64>() < world.gamma[c];
                    *slot = o && r;
                }
                for (col, table) in cols.iter_mut().zip(&tables) {
                    col.push(evaluate_pairs(table, |c| clicked[c]));
                }
            }
            cols
        })
        .collect();
    let mut out = vec![Vec::with_capacity(samples); ests.len()];
    for part in parts {
        for (o, p) in out.iter_mut().zip(part) {
            o.extend(p);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McMoments {
    pub mean: f64,
    /// Unbiased sample variance of the per-draw risk.
    pub variance: f64,
    pub std_error: f64,
    pub samples: usize,
}

pub fn mc_summary(values: &[f64]) -> McMoments {
    let n = values.len();
    let mut s = NeumaierSum::default();
    for v in values {
        s.add(*v);
    }
    let mean = s.value() / n as f64;
    let mut ss = NeumaierSum::default();
    for v in values {
        ss.add((v - mean) * (v - mean));
    }
    let variance = if n > 1 { ss.value() / (n - 1) as f64 } else { 0.0 };
    McMoments {
        mean,
        variance,
        std_error: (variance / n as f64).sqrt(),
        samples: n,
    }
}

pub fn mc_moments(world: &SyntheticWorld, est: &Estimator, samples: usize, seed: u64) -> Result<McMoments> {
    let draws = mc_draws(world, std::slice::from_ref(est), samples, seed)?;
    Ok(mc_summary(&draws[0]))
}

/// Variance expression for UPL with every ordered pair and every triple
/// `(i, j, k)`, `k != i, j`, of a user included:
///
/// `sum_{i,j} (1/theta_i - gamma_i) gamma_i (1-gamma_j)^2 L_ij^2 / (1 - theta_j gamma_j)^2`
/// `+ sum_{i,j,k} (1/theta_i - gamma_i) gamma_i (1-gamma_j)(1-gamma_k) L_ij L_ik / ((1 - theta_j gamma_j)(1 - theta_k gamma_k))`
pub fn closed_form_variance_upl(world: &SyntheticWorld) -> f64 {
    let n = world.num_items;
    let mut s = NeumaierSum::default();
    for u in 0..world.num_users {
        for i in 0..n {
            let ci = world.cell(u, i);
            let (ti, gi) = (world.theta[ci], world.gamma[ci]);
            let lead = (1.0 / ti - gi) * gi;
            let factor = |j: usize| {
                let cj = world.cell(u, j);
                let (tj, gj) = (world.theta[cj], world.gamma[cj]);
                (1.0 - gj) * world.pair_loss(ci, cj) / (1.0 - tj * gj)
            };
            for j in (0..n).filter(|&j| j != i) {
                let fj = factor(j);
                s.add(lead * fj * fj);
                for k in (0..n).filter(|&k| k != i && k != j) {
                    s.add(lead * fj * factor(k));
                }
            }
        }
    }
    s.value()
}

/// Same-draw comparison of two estimators' variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComparison {
    pub variance_a: f64,
    pub variance_b: f64,
    pub ratio: f64,
    pub z: f64,
    /// One-sided p-value for `Var(a) > Var(b)`.
    pub p_value: f64,
    pub samples: usize,
}

/// Paired test on `D_k = (a_k - mean a)^2 - (b_k - mean b)^2`; `E[D] > 0`
/// iff `Var(a) > Var(b)`. Normal approximation for the mean of `D`.
pub fn compare_variances(a: &[f64], b: &[f64]) -> Result<VarianceComparison> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Estimation(
            "paired variance test needs two equal samples of size >= 2".into(),
        ));
    }
    let ma = mc_summary(a);
    let mb = mc_summary(b);
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma.mean).powi(2) - (y - mb.mean).powi(2))
        .collect();
    let md = mc_summary(&d);
    let (z, p_value) = if md.std_error > 0.0 {
        let z = md.mean / md.std_error;
        let normal = Normal::standard();
        (z, normal.sf(z))
    } else if md.mean > 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        (0.0, 0.5)
    };
    Ok(VarianceComparison {
        variance_a: ma.variance,
        variance_b: mb.variance,
        ratio: ma.variance / mb.variance,
        z,
        p_value,
        samples: a.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    pub world: String,
    pub estimator: String,
    pub ideal_risk: f64,
    pub exact_expectation: Option<f64>,
    pub exact_variance: Option<f64>,
    /// Exact when enumerable, otherwise the Monte Carlo mean minus the ideal risk.
    pub bias: f64,
    pub mc_mean: Option<f64>,
    pub mc_variance: Option<f64>,
    pub mc_std_error: Option<f64>,
    /// UPL only.
    pub closed_form_variance: Option<f64>,
    pub sample_count: usize,
}

impl EstimatorReport {
    pub const TSV_HEADER: &'static str = "world\testimator\tideal_risk\texact_expectation\texact_variance\tbias\tmc_mean\tmc_variance\tmc_std_error\tclosed_form_variance\tclosed_form_ratio\tsamples";

    /// Closed form over the Monte Carlo (else exact) variance. Not expected to be 1.
    pub fn closed_form_ratio(&self) -> Option<f64> {
        let reference = self.mc_variance.or(self.exact_variance)?;
        let cf = self.closed_form_variance?;
        (reference > 0.0).then(|| cf / reference)
    }

    pub fn tsv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.12e}"));
        format!(
            "{}\t{}\t{:.12e}\t{}\t{}\t{:.12e}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.world,
            self.estimator,
            self.ideal_risk,
            opt(self.exact_expectation),
            opt(self.exact_variance),
            self.bias,
            opt(self.mc_mean),
            opt(self.mc_variance),
            opt(self.mc_std_error),
            opt(self.closed_form_variance),
            opt(self.closed_form_ratio()),
            self.sample_count
        )
    }
}

/// Exact moments when the world is enumerable, Monte Carlo when `samples` is
/// given. At least one of the two must be available.
pub fn estimator_report(
    world: &SyntheticWorld,
    est: &Estimator,
    samples: Option<usize>,
    seed: u64,
) -> Result<EstimatorReport> {
    let exact = if world.cells() <= MAX_EXACT_CELLS {
        Some(exact_moments(world, est)?)
    } else {
        None
    };
    let mc = samples.map(|n| mc_moments(world, est, n, seed)).transpose()?;
    build_report(world, est, exact, mc)
}

fn build_report(
    world: &SyntheticWorld,
    est: &Estimator,
    exact: Option<Moments>,
    mc: Option<McMoments>,
) -> Result<EstimatorReport> {
    let ideal = ideal_risk(world);
    let bias = match (exact, mc) {
        (Some(e), _) => e.mean - ideal,
        (None, Some(m)) => m.mean - ideal,
        (None, None) => {
            return Err(Error::EnumerationBound {
                cells: world.cells(),
                max: MAX_EXACT_CELLS,
            })
        }
    };
    Ok(EstimatorReport {
        world: world.name.clone(),
        estimator: est.name(),
        ideal_risk: ideal,
        exact_expectation: exact.map(|e| e.mean),
        exact_variance: exact.map(|e| e.variance),
        bias,
        mc_mean: mc.map(|m| m.mean),
        mc_variance: mc.map(|m| m.variance),
        mc_std_error: mc.map(|m| m.std_error),
        closed_form_variance: matches!(est, Estimator::Upl).then(|| closed_form_variance_upl(world)),
        sample_count: mc.map_or(0, |m| m.samples),
    })
}

pub const EXACT_TOLERANCE: f64 = 1e-10;
pub const CLIP_BIAS_MIN: f64 = 1e-3;
pub const MC_AGREEMENT_SE: f64 = 4.0;
pub const VARIANCE_ORDER_ALPHA: f64 = 0.01;
pub const LOW_EXPOSURE_THETA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VerifyMode {
    /// Exact where enumerable, Monte Carlo where samples are given.
    #[default]
    Auto,
    /// Exact only; worlds above the cell cap are an error.
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub world: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}\t{}\t{}\t{}", self.world, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
    pub reports: Vec<EstimatorReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn reports_tsv(&self) -> String {
        let mut out = String::from(EstimatorReport::TSV_HEADER);
        out.push('\n');
        for r in &self.reports {
            out.push_str(&r.tsv_row());
            out.push('\n');
        }
        out
    }
}

pub fn suite_estimators() -> Vec<Estimator> {
    vec![
        Estimator::Upl,
        Estimator::Ubpr,
        Estimator::UbprClipped(0.0),
        Estimator::Bpr,
        Estimator::Zero,
    ]
}

/// Every invariant of the estimators on every world.
///
/// Per world: exact unbiasedness of UPL and unclipped UBPR, non-negative
/// clipping bias, agreement of exact and Monte Carlo means, and on
/// low-exposure worlds the variance ordering of UBPR over UPL. Across worlds:
/// some world shows a clipping bias above [`CLIP_BIAS_MIN`].
pub fn run_suite(
    worlds: &[SyntheticWorld],
    mode: VerifyMode,
    samples: Option<usize>,
    seed: u64,
) -> Result<SuiteReport> {
    if mode == VerifyMode::MonteCarlo && samples.is_none() {
        return Err(Error::Config("Monte Carlo mode needs a sample count".into()));
    }
    if let Some(n) = samples {
        if n < MIN_MC_SAMPLES {
            return Err(Error::Config(format!(
                "Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {n}"
            )));
        }
    }
    let ests = suite_estimators();
    let mut suite = SuiteReport::default();
    let mut max_clip_bias: Option<f64> = None;
    for (w, world) in worlds.iter().enumerate() {
        let enumerable = world.cells() <= MAX_EXACT_CELLS;
        if mode == VerifyMode::Exact && !enumerable {
            return Err(Error::EnumerationBound {
                cells: world.cells(),
                max: MAX_EXACT_CELLS,
            });
        }
        let use_exact = enumerable && mode != VerifyMode::MonteCarlo;
        if !use_exact && samples.is_none() {
            return Err(Error::EnumerationBound {
                cells: world.cells(),
                max: MAX_EXACT_CELLS,
            });
        }
        let dist = if use_exact {
            Some(click_mask_distribution(world)?)
        } else {
            None
        };
        let exact: Vec<Option<Moments>> = ests
            .iter()
            .map(|e| dist.as_ref().map(|d| exact_from_distribution(world, d, e)).transpose())
            .collect::<Result<_>>()?;
        let draws = match (mode, samples) {
            (VerifyMode::Exact, _) | (_, None) => None,
            (_, Some(n)) => Some(mc_draws(world, &ests, n, seed.wrapping_add(w as u64))?),
        };
        let ideal = ideal_risk(world);
        let mut push = |name: &str, passed: bool, detail: String| {
            suite.checks.push(Check {
                world: world.name.clone(),
                name: name.to_string(),
                passed,
                detail,
            })
        };

        for (idx, name) in [(0, "upl_unbiased_exact"), (1, "ubpr_unbiased_exact")] {
            if let Some(m) = exact[idx] {
                let gap = (m.mean - ideal).abs();
                push(name, gap <= EXACT_TOLERANCE, format!("|E - R_ideal| = {gap:.3e}"));
            }
        }
        if let Some(m) = exact[2] {
            let bias = m.mean - ideal;
            max_clip_bias = Some(max_clip_bias.map_or(bias, |b: f64| b.max(bias)));
            push(
                "ubpr_clipped_bias_nonnegative",
                bias >= -EXACT_TOLERANCE,
                format!("bias = {bias:.6e}"),
            );
        }
        if let Some(cols) = &draws {
            let mc: Vec<McMoments> = cols.iter().map(|c| mc_summary(c)).collect();
            for ((est, m), e) in ests.iter().zip(&mc).zip(&exact) {
                let target = e.map_or(ideal, |e| e.mean);
                // Without enumeration only the unbiased estimators have a known mean.
                if e.is_none() && !matches!(est, Estimator::Upl | Estimator::Ubpr | Estimator::Zero) {
                    continue;
                }
                let gap = (m.mean - target).abs();
                let ok = gap <= MC_AGREEMENT_SE * m.std_error + 1e-12;
                push(
                    &format!("{}_mc_agreement", est.name()),
                    ok,
                    format!("|mc - exact| = {gap:.3e}, se = {:.3e}", m.std_error),
                );
            }
            if world.all_theta_at_most(LOW_EXPOSURE_THETA) {
                let cmp = compare_variances(&cols[1], &cols[0])?;
                push(
                    "variance_ubpr_gt_upl",
                    cmp.ratio > 1.0 && cmp.p_value < VARIANCE_ORDER_ALPHA,
                    format!("ratio = {:.4}, p = {:.3e}", cmp.ratio, cmp.p_value),
                );
            }
            for (i, est) in ests.iter().enumerate() {
                suite.reports.push(build_report(world, est, exact[i], Some(mc[i]))?);
            }
        } else {
            for (i, est) in ests.iter().enumerate() {
                suite.reports.push(build_report(world, est, exact[i], None)?);
            }
        }
    }
    if let Some(b) = max_clip_bias {
        suite.checks.push(Check {
            world: "*".into(),
            name: "ubpr_clipped_bias_exhibited".into(),
            passed: b > CLIP_BIAS_MIN,
            detail: format!("max bias = {b:.6e}"),
        });
    }
    Ok(suite)
}

/// Twenty random admissible worlds of at most ten cells.
pub fn random_worlds() -> Vec<SyntheticWorld> {
    const SHAPES: [(usize, usize); 10] = [
        (1, 2),
        (1, 3),
        (1, 4),
        (1, 5),
        (2, 2),
        (2, 3),
        (2, 4),
        (2, 5),
        (3, 3),
        (1, 10),
    ];
    (0..20)
        .map(|k| {
            let (nu, ni) = SHAPES[k % SHAPES.len()];
            SyntheticWorld::random(
                format!("random_{k:02}"),
                nu,
                ni,
                (0.05, 1.0),
                (0.02, 0.98),
                1000 + k as u64,
            )
            .expect("random world parameters are admissible")
        })
        .collect()
}

/// A world whose zero-clipped UBPR is visibly biased: clicked negatives with
/// moderate propensity make many UBPR terms negative.
pub fn clipping_world() -> SyntheticWorld {
    SyntheticWorld::new(
        "clipping",
        1,
        3,
        vec![0.3, 0.5, 0.4],
        vec![0.8, 0.6, 0.7],
        vec![0.4, 0.1, -0.3],
    )
    .expect("admissible")
}

/// Worlds with every `theta <= 0.2`.
pub fn low_exposure_worlds() -> Vec<SyntheticWorld> {
    let uniform = SyntheticWorld::new(
        "low_uniform",
        1,
        4,
        vec![0.1; 4],
        vec![0.5; 4],
        vec![0.5, -0.2, 0.1, -0.6],
    )
    .expect("admissible");
    let mut out = vec![uniform];
    for (k, (nu, ni)) in [(2usize, 4usize), (2, 5), (3, 3)].into_iter().enumerate() {
        out.push(
            SyntheticWorld::random(
                format!("low_random_{k}"),
                nu,
                ni,
                (0.05, 0.2),
                (0.2, 0.8),
                2000 + k as u64,
            )
            .expect("admissible"),
        );
    }
    out
}

pub fn bundled_worlds() -> Vec<SyntheticWorld> {
    let mut out = random_worlds();
    out.push(clipping_world());
    out.extend(low_exposure_worlds());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_ideal(gamma: &[f64], scores: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..gamma.len() {
            for j in 0..gamma.len() {
                if i != j {
                    let d = scores[i] - scores[j];
                    total += gamma[i] * (1.0 - gamma[j]) * (1.0 + (-d).exp()).ln();
                }
            }
        }
        total
    }

    #[test]
    fn ideal_risk_matches_independent_sum() {
        let w = SyntheticWorld::new("t", 1, 3, vec![0.5; 3], vec![0.9, 0.5, 0.1], vec![0.3, -0.2, 0.7]).unwrap();
        // Frozen from a separate script over the six ordered pairs.
        assert!((ideal_risk(&w) - 1.5822879364240585).abs() < 1e-12);
        assert!((ideal_risk(&w) - brute_force_ideal(w.gamma(), w.scores())).abs() < 1e-12);
    }

    #[test]
    fn ideal_risk_degenerate_relevance() {
        let w = SyntheticWorld::new("t", 1, 2, vec![0.5; 2], vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert!((ideal_risk(&w) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ideal_risk_invariant_under_item_permutation_with_equal_gamma() {
        let a = SyntheticWorld::new("a", 1, 3, vec![0.5; 3], vec![0.4; 3], vec![0.1, 0.9, -0.4]).unwrap();
        let b = SyntheticWorld::new("b", 1, 3, vec![0.5; 3], vec![0.4; 3], vec![-0.4, 0.1, 0.9]).unwrap();
        assert!((ideal_risk(&a) - ideal_risk(&b)).abs() < 1e-14);
    }

    #[test]
    fn mask_distribution_is_the_click_model() {
        let w = SyntheticWorld::random("w", 1, 4, (0.1, 1.0), (0.0, 1.0), 9).unwrap();
        let dist = click_mask_distribution(&w).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for (mask, p) in dist.iter().enumerate() {
            let expect: f64 = (0..4)
                .map(|c| {
                    let q = w.theta()[c] * w.gamma()[c];
                    if mask >> c & 1 == 1 {
                        q
                    } else {
                        1.0 - q
                    }
                })
                .product();
            assert!((p - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn eleven_cells_hit_the_enumeration_bound() {
        let w = SyntheticWorld::random("big", 1, 11, (0.1, 0.9), (0.1, 0.9), 0).unwrap();
        match exact_expectation(&w, &Estimator::Upl) {
            Err(Error::EnumerationBound { cells: 11, max: 10 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bundled_worlds_are_unbiased_for_upl_and_ubpr() {
        for w in bundled_worlds() {
            let ideal = ideal_risk(&w);
            for est in [Estimator::Upl, Estimator::Ubpr] {
                let e = exact_expectation(&w, &est).unwrap();
                assert!((e - ideal).abs() < EXACT_TOLERANCE, "{} {est}: {e} vs {ideal}", w.name);
            }
        }
    }

    #[test]
    fn clipping_world_is_biased() {
        let w = clipping_world();
        let bias = exact_expectation(&w, &Estimator::UbprClipped(0.0)).unwrap() - ideal_risk(&w);
        assert!(bias > CLIP_BIAS_MIN, "{bias}");
    }

    #[test]
    fn bpr_on_clicks_is_biased_toward_exposure() {
        let w = clipping_world();
        let bias = exact_expectation(&w, &Estimator::Bpr).unwrap() - ideal_risk(&w);
        assert!(bias.abs() > 1e-3);
    }

    #[test]
    fn zero_estimator_has_zero_variance() {
        let w = clipping_world();
        let m = mc_moments(&w, &Estimator::Zero, MIN_MC_SAMPLES, 1).unwrap();
        assert_eq!((m.mean, m.variance), (0.0, 0.0));
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(mc_moments(&clipping_world(), &Estimator::Upl, 10, 0).is_err());
    }

    #[test]
    fn monte_carlo_within_four_standard_errors() {
        let w = clipping_world();
        for est in suite_estimators() {
            let exact = exact_expectation(&w, &est).unwrap();
            let m = mc_moments(&w, &est, 200_000, 5).unwrap();
            assert!(
                (m.mean - exact).abs() <= 4.0 * m.std_error + 1e-12,
                "{est}: {} vs {exact}",
                m.mean
            );
        }
    }

    #[test]
    fn exact_variance_matches_monte_carlo() {
        let w = clipping_world();
        let e = exact_moments(&w, &Estimator::Upl).unwrap();
        let m = mc_moments(&w, &Estimator::Upl, 200_000, 6).unwrap();
        assert!((m.variance / e.variance - 1.0).abs() < 0.03);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let w = clipping_world();
        let a = mc_moments(&w, &Estimator::Ubpr, 20_000, 3).unwrap();
        let b = mc_moments(&w, &Estimator::Ubpr, 20_000, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ubpr_variance_exceeds_upl_at_low_exposure() {
        let w = &low_exposure_worlds()[0];
        let cols = mc_draws(w, &[Estimator::Upl, Estimator::Ubpr], 100_000, 17).unwrap();
        let cmp = compare_variances(&cols[1], &cols[0]).unwrap();
        assert!(cmp.ratio > 1.0 && cmp.p_value < 0.01, "{cmp:?}");
    }

    #[test]
    fn closed_form_two_item_world_is_first_sum_only() {
        let w = SyntheticWorld::new("p", 1, 2, vec![0.5, 0.4], vec![0.6, 0.3], vec![0.2, -0.1]).unwrap();
        let l = |a: f64, b: f64| (1.0 + (b - a).exp()).ln();
        let first = |ti: f64, gi: f64, tj: f64, gj: f64, lij: f64| {
            (1.0 / ti - gi) * gi * (1.0 - gj).powi(2) * lij * lij / (1.0 - tj * gj).powi(2)
        };
        let hand = first(0.5, 0.6, 0.4, 0.3, l(0.2, -0.1)) + first(0.4, 0.3, 0.5, 0.6, l(-0.1, 0.2));
        assert!((closed_form_variance_upl(&w) - hand).abs() < 1e-14);
    }

    #[test]
    fn closed_form_vanishes_without_loss() {
        // No relevant item: every term carries gamma_i = 0.
        let w = SyntheticWorld::new("z", 1, 3, vec![1.0, 0.5, 0.5], vec![0.0, 0.0, 0.0], vec![0.0; 3]).unwrap();
        assert_eq!(closed_form_variance_upl(&w), 0.0);
    }

    #[test]
    fn world_text_round_trip() {
        let w = clipping_world();
        let back = SyntheticWorld::parse(&w.to_text(), Path::new("w.txt")).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn world_text_rejects_unknown_keys_and_bad_tables() {
        let p = Path::new("w.txt");
        assert!(SyntheticWorld::parse(
            "users = 1\nitems = 2\ntheta = 0.5 0.5\ngamma = 0.1 0.1\ncolour = red\n",
            p
        )
        .is_err());
        assert!(SyntheticWorld::parse("users = 1\nitems = 2\ntheta = 0.5\ngamma = 0.1 0.1\n", p).is_err());
        assert!(SyntheticWorld::parse("users = 1\nitems = 2\ntheta = 0.5 1.5\ngamma = 0.1 0.1\n", p).is_err());
        let w = SyntheticWorld::parse("users = 1\nitems = 2\ntheta = 0.5 0.5\ngamma = 0.1 0.1\nseed = 4\n", p).unwrap();
        assert_eq!(w.scores().len(), 2);
    }

    #[test]
    fn suite_passes_on_bundled_worlds_exactly() {
        let report = run_suite(&bundled_worlds(), VerifyMode::Exact, None, 0).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c}");
        }
        assert!(report.checks.iter().any(|c| c.name == "ubpr_clipped_bias_exhibited"));
    }

    #[test]
    fn gamma_hat_error_biases_upl() {
        let w = clipping_world();
        let perturbed: Vec<f64> = w.gamma().iter().map(|g| (g * 0.5).max(0.01)).collect();
        let bias = exact_expectation(&w, &Estimator::UplWithGammaHat(perturbed)).unwrap() - ideal_risk(&w);
        assert!(bias.abs() > 1e-3);
        let exact = exact_expectation(&w, &Estimator::UplWithGammaHat(w.gamma().to_vec())).unwrap();
        assert!((exact - ideal_risk(&w)).abs() < EXACT_TOLERANCE);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn upl_and_ubpr_unbiased_on_random_worlds(nu in 1usize..=2, ni in 2usize..=4, seed in any::<u64>()) {
            let w = SyntheticWorld::random("p", nu, ni, (0.02, 1.0), (0.0, 1.0), seed).unwrap();
            let ideal = ideal_risk(&w);
            for est in [Estimator::Upl, Estimator::Ubpr] {
                let e = exact_expectation(&w, &est).unwrap();
                prop_assert!((e - ideal).abs() < EXACT_TOLERANCE * ideal.abs().max(1.0));
            }
            let clipped = exact_expectation(&w, &Estimator::UbprClipped(0.0)).unwrap();
            prop_assert!(clipped >= ideal - EXACT_TOLERANCE);
        }

        #[test]
        fn upl_draws_are_never_negative(seed in any::<u64>()) {
            let w = SyntheticWorld::random("p", 1, 4, (0.05, 1.0), (0.0, 1.0), seed).unwrap();
            let dist = click_mask_distribution(&w).unwrap();
            let table = Estimator::Upl.pair_table(&w).unwrap();
            for mask in 0..dist.len() {
                prop_assert!(evaluate_pairs(&table, |c| mask >> c & 1 == 1) >= 0.0);
            }
        }
    }
}
