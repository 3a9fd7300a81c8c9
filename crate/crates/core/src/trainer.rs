//! Mini-batch training for every method.
//!
//! One epoch pairs every training click with one sampled negative (pairwise
//! methods) or visits the pointwise sample set once. After each epoch the
//! validation DCG@K decides early stopping and the best snapshot is returned.
//!
//! Batch objective: mean of the per-sample terms plus
//! `lambda * sum of squared entries of the rows touched by the batch`.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::dataset::ImplicitDataset;
use crate::evaluation::mean_dcg;
use crate::losses::{sigmoid, LossSpec, Method, PairSample, PointSample};
use crate::model::{FactorModel, DEFAULT_INIT_SCALE};
use crate::propensity::PropensityTable;
use crate::{Error, Result};

pub const GAMMA_HAT_MIN: f64 = 1e-6;
pub const GAMMA_HAT_MAX: f64 = 1.0 - 1e-6;
const MAX_RESAMPLE: usize = 1000;

/// How pointwise methods enumerate their training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointwiseSampling {
    /// Every `(user, item)` cell once per epoch; unclicked cells are negatives.
    FullMatrix,
    /// Every click plus `ratio` uniformly drawn unclicked cells per click.
    NegativeRatio(usize),
}

impl fmt::Display for PointwiseSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PointwiseSampling::FullMatrix => f.write_str("full"),
            PointwiseSampling::NegativeRatio(k) => write!(f, "{k}"),
        }
    }
}

impl std::str::FromStr for PointwiseSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(PointwiseSampling::FullMatrix);
        }
        s.parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
            .map(PointwiseSampling::NegativeRatio)
            .ok_or_else(|| Error::Config(format!("pointwise sampling `{s}` is neither `full` nor a ratio >= 1")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub init_scale: f64,
    /// Cutoff of the validation DCG used for early stopping.
    pub validation_k: usize,
    pub pointwise_sampling: PointwiseSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            lambda: 1e-5,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 5,
            seed: 0,
            init_scale: DEFAULT_INIT_SCALE,
            validation_k: 5,
            pointwise_sampling: PointwiseSampling::FullMatrix,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.validation_k == 0 {
            return Err(Error::Config("validation_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Estimated relevance `gamma_hat(u, i)` consumed by UPL.
pub trait RelevanceSource: Sync {
    fn relevance(&self, user: usize, item: usize) -> f64;
}

impl<F: Fn(usize, usize) -> f64 + Sync> RelevanceSource for F {
    fn relevance(&self, user: usize, item: usize) -> f64 {
        self(user, item)
    }
}

pub fn clamp_relevance(p: f64) -> f64 {
    p.clamp(GAMMA_HAT_MIN, GAMMA_HAT_MAX)
}

/// Relevance read off a trained Rel-MF model: clamped `sigmoid(score)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelMfRelevance {
    pub model: FactorModel,
}

impl RelevanceSource for RelMfRelevance {
    fn relevance(&self, user: usize, item: usize) -> f64 {
        clamp_relevance(sigmoid(self.model.score_unchecked(user, item)))
    }
}

#[derive(Debug, Clone)]
pub enum Batch {
    Pairs(Vec<PairSample>),
    Points(Vec<PointSample>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Pairs(v) => v.len(),
            Batch::Points(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws training samples for one method from one training split.
pub struct Sampler<'a> {
    train: &'a ImplicitDataset,
    props: &'a PropensityTable,
    method: Method,
    pointwise: PointwiseSampling,
    relevance: Option<&'a dyn RelevanceSource>,
    positives: Vec<(usize, usize)>,
    /// Sorted clicked items per user.
    clicked: Vec<Vec<usize>>,
}

impl<'a> Sampler<'a> {
    pub fn new(
        train: &'a ImplicitDataset,
        props: &'a PropensityTable,
        method: Method,
        pointwise: PointwiseSampling,
        relevance: Option<&'a dyn RelevanceSource>,
    ) -> Result<Self> {
        if props.num_items() != train.num_items() {
            return Err(Error::Config(format!(
                "propensity table covers {} items, dataset has {}",
                props.num_items(),
                train.num_items()
            )));
        }
        if method == Method::Upl && relevance.is_none() {
            return Err(Error::Config("upl needs estimated relevance".into()));
        }
        let mut clicked = vec![Vec::new(); train.num_users()];
        let mut positives = Vec::new();
        for p in train.clicks() {
            clicked[p.user].push(p.item);
            positives.push((p.user, p.item));
        }
        if positives.is_empty() {
            return Err(Error::Config("training split has no clicks".into()));
        }
        if method.is_pairwise() && !method.samples_any_negative() {
            let n = train.num_items();
            if clicked.iter().all(|c| c.is_empty() || c.len() == n) {
                return Err(Error::Config("no user has an unclicked item to pair with".into()));
            }
        }
        Ok(Self {
            train,
            props,
            method,
            pointwise,
            relevance,
            positives,
            clicked,
        })
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    /// Number of items `u` has not clicked.
    pub fn num_negatives(&self, user: usize) -> usize {
        self.train.num_items() - self.clicked[user].len()
    }

    fn is_clicked(&self, user: usize, item: usize) -> bool {
        self.clicked[user].binary_search(&item).is_ok()
    }

    fn draw_unclicked(&self, user: usize, rng: &mut impl Rng) -> Option<usize> {
        let n = self.train.num_items();
        let k = self.clicked[user].len();
        if k >= n {
            return None;
        }
        // Rejection is fast while the user has clicked a minority of items.
        if k * 2 <= n {
            loop {
                let j = rng.random_range(0..n);
                if !self.is_clicked(user, j) {
                    return Some(j);
                }
            }
        }
        let target = rng.random_range(0..n - k);
        (0..n).filter(|j| !self.is_clicked(user, *j)).nth(target)
    }

    fn pair_for(&self, user: usize, pos: usize, rng: &mut impl Rng) -> Option<PairSample> {
        let neg = if self.method.samples_any_negative() {
            rng.random_range(0..self.train.num_items())
        } else {
            self.draw_unclicked(user, rng)?
        };
        let gamma_hat_j = match (self.method, self.relevance) {
            (Method::Upl, Some(src)) => src.relevance(user, neg),
            _ => 0.0,
        };
        Some(PairSample {
            user,
            pos,
            neg,
            c_j: self.is_clicked(user, neg),
            theta_i: self.props.theta_click[pos],
            theta_j: self.props.theta_click[neg],
            gamma_hat_j,
        })
    }

    fn point(&self, user: usize, item: usize) -> PointSample {
        PointSample {
            user,
            item,
            clicked: self.is_clicked(user, item),
            theta_click: self.props.theta_click[item],
            theta_nonclick: self.props.theta_nonclick[item],
        }
    }

    fn pair_with_fallback(&self, user: usize, pos: usize, rng: &mut impl Rng) -> Result<PairSample> {
        if let Some(s) = self.pair_for(user, pos, rng) {
            return Ok(s);
        }
        for _ in 0..MAX_RESAMPLE {
            let (u, i) = self.positives[rng.random_range(0..self.positives.len())];
            if let Some(s) = self.pair_for(u, i, rng) {
                return Ok(s);
            }
        }
        Err(Error::Config("could not find a positive with an unclicked item".into()))
    }

    fn random_unclicked_cell(&self, rng: &mut impl Rng) -> Result<(usize, usize)> {
        for _ in 0..MAX_RESAMPLE * 100 {
            let u = rng.random_range(0..self.train.num_users());
            let j = rng.random_range(0..self.train.num_items());
            if !self.is_clicked(u, j) {
                return Ok((u, j));
            }
        }
        Err(Error::Config("no unclicked cell found".into()))
    }

    /// `batch_size` i.i.d. samples.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
        if self.method.is_pairwise() {
            let mut out = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                let (u, i) = self.positives[rng.random_range(0..self.positives.len())];
                out.push(self.pair_with_fallback(u, i, rng)?);
            }
            Ok(Batch::Pairs(out))
        } else {
            let mut out = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                let (u, i) = match self.pointwise {
                    PointwiseSampling::FullMatrix => (
                        rng.random_range(0..self.train.num_users()),
                        rng.random_range(0..self.train.num_items()),
                    ),
                    PointwiseSampling::NegativeRatio(k) => {
                        if rng.random_range(0..=k) == 0 {
                            self.positives[rng.random_range(0..self.positives.len())]
                        } else {
                            self.random_unclicked_cell(rng)?
                        }
                    }
                };
                out.push(self.point(u, i));
            }
            Ok(Batch::Points(out))
        }
    }

    /// One epoch worth of batches.
    pub fn epoch(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Batch>> {
        if self.method.is_pairwise() {
            let mut order = self.positives.clone();
            order.shuffle(rng);
            let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
            for chunk in order.chunks(batch_size) {
                let pairs = chunk
                    .iter()
                    .map(|&(u, i)| self.pair_with_fallback(u, i, rng))
                    .collect::<Result<Vec<_>>>()?;
                batches.push(Batch::Pairs(pairs));
            }
            return Ok(batches);
        }
        let cells: Vec<(usize, usize)> = match self.pointwise {
            PointwiseSampling::FullMatrix => {
                let ni = self.train.num_items();
                let mut flat: Vec<u32> = (0..(self.train.num_users() * ni) as u32).collect();
                flat.shuffle(rng);
                flat.into_iter().map(|f| (f as usize / ni, f as usize % ni)).collect()
            }
            PointwiseSampling::NegativeRatio(k) => {
                let mut cells = self.positives.clone();
                for _ in 0..k * self.positives.len() {
                    cells.push(self.random_unclicked_cell(rng)?);
                }
                cells.shuffle(rng);
                cells
            }
        };
        Ok(cells
            .chunks(batch_size)
            .map(|chunk| Batch::Points(chunk.iter().map(|&(u, i)| self.point(u, i)).collect()))
            .collect())
    }
}

/// Objective value of `batch` under `spec` at the current parameters.
pub fn batch_loss(model: &FactorModel, spec: &LossSpec, lambda: f64, batch: &Batch) -> Result<f64> {
    let n = batch.len().max(1) as f64;
    let mut users = std::collections::BTreeSet::new();
    let mut items = std::collections::BTreeSet::new();
    let mut total = 0.0;
    match batch {
        Batch::Pairs(pairs) => {
            for s in pairs {
                let t = spec.pair_term(
                    s,
                    model.score_unchecked(s.user, s.pos),
                    model.score_unchecked(s.user, s.neg),
                )?;
                total += t.value;
                users.insert(s.user);
                items.insert(s.pos);
                items.insert(s.neg);
            }
        }
        Batch::Points(points) => {
            for s in points {
                total += spec.point_term(s, model.score_unchecked(s.user, s.item))?.value;
                users.insert(s.user);
                items.insert(s.item);
            }
        }
    }
    Ok(total / n + lambda * model.l2_penalty(&users, &items))
}

/// Sparse gradient of a batch objective: one entry per touched row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub users: BTreeMap<usize, Vec<f64>>,
    pub items: BTreeMap<usize, Vec<f64>>,
}

fn axpy(acc: &mut BTreeMap<usize, Vec<f64>>, row: usize, d: usize, a: f64, x: &[f64]) {
    let g = acc.entry(row).or_insert_with(|| vec![0.0; d]);
    for (gk, xk) in g.iter_mut().zip(x) {
        *gk += a * xk;
    }
}

/// Value and parameter gradient of [`batch_loss`].
pub fn batch_gradient(model: &FactorModel, spec: &LossSpec, lambda: f64, batch: &Batch) -> Result<BatchGradient> {
    let d = model.dim();
    let n = batch.len().max(1) as f64;
    let mut out = BatchGradient::default();
    let mut total = 0.0;
    match batch {
        Batch::Pairs(pairs) => {
            for s in pairs {
                let t = spec.pair_term(
                    s,
                    model.score_unchecked(s.user, s.pos),
                    model.score_unchecked(s.user, s.neg),
                )?;
                total += t.value;
                let (a_i, a_j) = (t.d_si / n, t.d_sj / n);
                axpy(&mut out.users, s.user, d, a_i, model.item_row(s.pos));
                axpy(&mut out.users, s.user, d, a_j, model.item_row(s.neg));
                axpy(&mut out.items, s.pos, d, a_i, model.user_row(s.user));
                axpy(&mut out.items, s.neg, d, a_j, model.user_row(s.user));
            }
        }
        Batch::Points(points) => {
            for s in points {
                let t = spec.point_term(s, model.score_unchecked(s.user, s.item))?;
                total += t.value;
                let a = t.d_s / n;
                axpy(&mut out.users, s.user, d, a, model.item_row(s.item));
                axpy(&mut out.items, s.item, d, a, model.user_row(s.user));
            }
        }
    }
    let mut penalty = 0.0;
    for (&u, g) in out.users.iter_mut() {
        for (gk, pk) in g.iter_mut().zip(model.user_row(u)) {
            penalty += pk * pk;
            *gk += 2.0 * lambda * pk;
        }
    }
    for (&i, g) in out.items.iter_mut() {
        for (gk, pk) in g.iter_mut().zip(model.item_row(i)) {
            penalty += pk * pk;
            *gk += 2.0 * lambda * pk;
        }
    }
    out.loss = total / n + lambda * penalty;
    Ok(out)
}

/// Adam state for both factor matrices.
pub struct Optimizer {
    adam: AdamConfig,
    user_state: AdamState,
    item_state: AdamState,
}

impl Optimizer {
    pub fn new(model: &FactorModel, learning_rate: f64) -> Self {
        Self {
            adam: AdamConfig::with_learning_rate(learning_rate),
            user_state: AdamState::new(model.num_users(), model.dim()),
            item_state: AdamState::new(model.num_items(), model.dim()),
        }
    }

    /// One Adam step on `batch`; returns the batch objective before the step.
    pub fn step(&mut self, model: &mut FactorModel, spec: &LossSpec, lambda: f64, batch: &Batch) -> Result<f64> {
        let grad = batch_gradient(model, spec, lambda, batch)?;
        self.user_state.advance();
        self.item_state.advance();
        for (u, g) in &grad.users {
            self.user_state.update_row(&self.adam, *u, model.user_row_mut(*u), g);
        }
        for (i, g) in &grad.items {
            self.item_state.update_row(&self.adam, *i, model.item_row_mut(*i), g);
        }
        Ok(grad.loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch objective over the epoch.
    pub loss: f64,
    pub validation: f64,
    pub factor_norm: f64,
}

impl EpochRecord {
    /// One structured log line.
    pub fn log_line(&self, validation_k: usize) -> String {
        format!(
            "epoch={}\tloss={:.8}\tvalidation_dcg@{}={:.8}\tfactor_norm={:.8}",
            self.epoch, self.loss, validation_k, self.validation, self.factor_norm
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub loss_spec: LossSpec,
    /// Best-validation snapshot.
    pub model: FactorModel,
    pub validation_curve: Vec<f64>,
    pub log: Vec<EpochRecord>,
    pub epochs_trained: usize,
    pub best_epoch: usize,
    pub best_validation: f64,
}

/// Everything a training run reads besides its configuration.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub train: &'a ImplicitDataset,
    /// Early-stopping split; without it every epoch runs and the lowest
    /// training loss wins.
    pub validation: Option<&'a ImplicitDataset>,
    pub propensities: &'a PropensityTable,
    pub relevance: Option<&'a dyn RelevanceSource>,
}

pub fn train(inputs: TrainInputs<'_>, config: &TrainConfig, spec: &LossSpec) -> Result<TrainRun> {
    train_with_observer(inputs, config, spec, &mut |_| {})
}

pub fn train_with_observer(
    inputs: TrainInputs<'_>,
    config: &TrainConfig,
    spec: &LossSpec,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainRun> {
    config.validate()?;
    let method = spec.method();
    if method == Method::Ideal {
        return Err(Error::Config(
            "the ideal risk needs ground-truth relevance for every pair; evaluate it with the oracle".into(),
        ));
    }
    if (method == Method::Upl) != inputs.relevance.is_some() {
        return Err(Error::Config(
            "estimated relevance must be supplied exactly when training upl".into(),
        ));
    }
    let train = inputs.train;
    let sampler = Sampler::new(
        train,
        inputs.propensities,
        method,
        config.pointwise_sampling,
        inputs.relevance,
    )?;
    let mut model = FactorModel::init(
        train.num_users(),
        train.num_items(),
        config.dim,
        config.seed,
        config.init_scale,
    )?;
    let mut opt = Optimizer::new(&model, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5a3b_1e00_0000);

    let mut best = model.clone();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        let batches = sampler.epoch(config.batch_size, &mut rng)?;
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let loss = opt.step(&mut model, spec, config.lambda, batch)?;
            if !loss.is_finite() || !model.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    message: format!("non-finite objective {loss}"),
                });
            }
            loss_sum += loss;
        }
        let loss = loss_sum / batches.len().max(1) as f64;
        let metric = match inputs.validation {
            Some(val) => mean_dcg(&model, val, config.validation_k)?,
            None => -loss,
        };
        let record = EpochRecord {
            epoch,
            loss,
            validation: metric,
            factor_norm: model.frobenius_norm(),
        };
        on_epoch(&record);
        log.push(record);
        if metric > best_metric {
            best_metric = metric;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    Ok(TrainRun {
        config: *config,
        loss_spec: *spec,
        model: best,
        validation_curve: log.iter().map(|r| r.validation).collect(),
        epochs_trained: log.len(),
        log,
        best_epoch,
        best_validation: best_metric,
    })
}

#[derive(Debug, Clone)]
pub struct UplPipelineRun {
    pub relmf: TrainRun,
    pub upl: TrainRun,
}

/// Trains Rel-MF, reads clamped relevance estimates off it, then trains UPL.
pub fn run_upl_pipeline(
    inputs: TrainInputs<'_>,
    config_relmf: &TrainConfig,
    config_upl: &TrainConfig,
) -> Result<UplPipelineRun> {
    let relmf_inputs = TrainInputs {
        relevance: None,
        ..inputs
    };
    let relmf = train(relmf_inputs, config_relmf, &LossSpec::default_for(Method::RelMf))?;
    let upl = train_upl_from(inputs, &relmf.model, config_upl)?;
    Ok(UplPipelineRun { relmf, upl })
}

/// UPL stage on top of an already trained Rel-MF model.
pub fn train_upl_from(inputs: TrainInputs<'_>, relmf: &FactorModel, config: &TrainConfig) -> Result<TrainRun> {
    let source = RelMfRelevance { model: relmf.clone() };
    let upl_inputs = TrainInputs {
        relevance: Some(&source),
        ..inputs
    };
    train(upl_inputs, config, &LossSpec::default_for(Method::Upl))
}
