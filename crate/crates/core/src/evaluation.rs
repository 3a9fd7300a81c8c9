//! Ranking metrics over per-user candidate sets, cohort slicing and the
//! one-tailed Welch t-test used to compare methods across runs.
//!
//! With gains `rel_r` at 1-based rank `r`:
//!
//! * `DCG@K = sum_{r<=K} rel_r / log2(r + 1)`
//! * `Recall@K = sum_{r<=K} rel_r / sum_r rel_r`
//! * `AP@K = (1 / sum_r rel_r) sum_{r<=K} rel_r * precision@r`
//!
//! Equal scores are broken by ascending candidate position, which is
//! ascending item index for candidate lists built from a dataset.

use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::ImplicitDataset;
use crate::model::FactorModel;
use crate::{Error, Result};

pub const DEFAULT_KS: [usize; 3] = [3, 5, 8];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    pub dcg: f64,
    pub recall: f64,
    pub map: f64,
}

/// Anything that scores `(user, item)`.
pub trait Scorer {
    fn score(&self, user: usize, item: usize) -> f64;
}

impl Scorer for FactorModel {
    fn score(&self, user: usize, item: usize) -> f64 {
        self.score_unchecked(user, item)
    }
}

impl<F: Fn(usize, usize) -> f64> Scorer for F {
    fn score(&self, user: usize, item: usize) -> f64 {
        self(user, item)
    }
}

/// Metrics at a single cutoff; `None` when no candidate is relevant.
pub fn rank_metrics(scores: &[f64], relevance: &[f64], k: usize) -> Result<Option<RankMetrics>> {
    Ok(rank_metrics_at(scores, relevance, &[k])?.map(|mut v| v.remove(0)))
}

/// Metrics at several cutoffs from a single sort.
pub fn rank_metrics_at(scores: &[f64], relevance: &[f64], ks: &[usize]) -> Result<Option<Vec<RankMetrics>>> {
    if scores.is_empty() {
        return Err(Error::domain("cannot rank an empty candidate list"));
    }
    if scores.len() != relevance.len() {
        return Err(Error::domain(format!(
            "{} scores but {} relevance labels",
            scores.len(),
            relevance.len()
        )));
    }
    if ks.contains(&0) {
        return Err(Error::domain("cutoff K must be >= 1"));
    }
    let total: f64 = relevance.iter().sum();
    if total <= 0.0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let max_k = ks.iter().copied().max().unwrap_or(0).min(order.len());
    // Prefix sums over ranks 1..=max_k.
    let mut dcg = Vec::with_capacity(max_k + 1);
    let mut hits = Vec::with_capacity(max_k + 1);
    let mut ap = Vec::with_capacity(max_k + 1);
    dcg.push(0.0);
    hits.push(0.0);
    ap.push(0.0);
    for (pos, &idx) in order.iter().take(max_k).enumerate() {
        let rank = (pos + 1) as f64;
        let rel = relevance[idx];
        let h = hits[pos] + rel;
        dcg.push(dcg[pos] + rel / (rank + 1.0).log2());
        hits.push(h);
        ap.push(ap[pos] + rel * h / rank);
    }
    Ok(Some(
        ks.iter()
            .map(|&k| {
                let k = k.min(max_k);
                RankMetrics {
                    dcg: dcg[k],
                    recall: hits[k] / total,
                    map: ap[k] / total,
                }
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cohort {
    All,
    ColdStartUsers,
    RareItems,
}

impl Cohort {
    pub const ALL: [Cohort; 3] = [Cohort::All, Cohort::ColdStartUsers, Cohort::RareItems];

    pub fn name(self) -> &'static str {
        match self {
            Cohort::All => "all",
            Cohort::ColdStartUsers => "cold_start_users",
            Cohort::RareItems => "rare_items",
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cohort {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Cohort::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown cohort `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CohortSpec {
    /// Items with fewer training clicks are rare.
    pub rare_item_click_threshold: u64,
    /// Users with fewer training clicks are cold-start.
    pub cold_start_user_click_threshold: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            rare_item_click_threshold: 100,
            cold_start_user_click_threshold: 6,
        }
    }
}

/// Training click counts the cohorts are defined against.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortContext {
    pub spec: CohortSpec,
    pub user_clicks: Vec<u64>,
    pub item_clicks: Vec<u64>,
}

impl CohortContext {
    pub fn from_train(train: &ImplicitDataset, spec: CohortSpec) -> Self {
        Self {
            spec,
            user_clicks: train.user_click_counts(),
            item_clicks: train.item_click_counts(),
        }
    }

    fn includes_user(&self, cohort: Cohort, user: usize) -> bool {
        match cohort {
            Cohort::ColdStartUsers => {
                self.user_clicks.get(user).copied().unwrap_or(0) < self.spec.cold_start_user_click_threshold
            }
            Cohort::All | Cohort::RareItems => true,
        }
    }

    fn credits_item(&self, cohort: Cohort, item: usize) -> bool {
        match cohort {
            Cohort::RareItems => self.item_clicks.get(item).copied().unwrap_or(0) < self.spec.rare_item_click_threshold,
            Cohort::All | Cohort::ColdStartUsers => true,
        }
    }
}

/// Which test label counts as relevance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RelevanceMode {
    /// The Bernoulli draw stored with each test pair.
    #[default]
    Binary,
    /// The relevance probability itself; a lower-variance diagnostic.
    Probability,
}

impl fmt::Display for RelevanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelevanceMode::Binary => "binary",
            RelevanceMode::Probability => "probability",
        })
    }
}

impl FromStr for RelevanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "binary" => Ok(RelevanceMode::Binary),
            "probability" => Ok(RelevanceMode::Probability),
            other => Err(Error::Config(format!("unknown relevance mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMetrics {
    pub k: usize,
    pub dcg: f64,
    pub recall: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub run: usize,
    pub cohort: Cohort,
    /// Users that contributed to the averages.
    pub users: usize,
    /// One entry per cutoff, empty when no user qualified.
    pub values: Vec<KMetrics>,
}

impl MetricReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.values.iter().find(|v| v.k == k)
    }

    pub fn dcg_at(&self, k: usize) -> Option<f64> {
        self.at(k).map(|v| v.dcg)
    }
}

/// Ranks each user's test candidates and averages the metrics over users
/// with at least one relevant candidate, per cohort.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    scorer: &dyn Scorer,
    test: &ImplicitDataset,
    ctx: &CohortContext,
    cohorts: &[Cohort],
    ks: &[usize],
    mode: RelevanceMode,
    method: &str,
    run: usize,
) -> Result<Vec<MetricReport>> {
    let mut reports: Vec<MetricReport> = Vec::with_capacity(cohorts.len());
    let mut scores = Vec::new();
    let mut rel = Vec::new();
    for &cohort in cohorts {
        let mut sums = vec![[0.0f64; 3]; ks.len()];
        let mut users = 0usize;
        for u in 0..test.num_users() {
            let candidates = test.user_pairs(u);
            if candidates.is_empty() || !ctx.includes_user(cohort, u) {
                continue;
            }
            scores.clear();
            rel.clear();
            for p in candidates {
                scores.push(scorer.score(u, p.item));
                let gain = match mode {
                    RelevanceMode::Binary => f64::from(u8::from(p.relevant)),
                    RelevanceMode::Probability => p.gamma,
                };
                rel.push(if ctx.credits_item(cohort, p.item) { gain } else { 0.0 });
            }
            if let Some(per_k) = rank_metrics_at(&scores, &rel, ks)? {
                users += 1;
                for (acc, m) in sums.iter_mut().zip(per_k) {
                    acc[0] += m.dcg;
                    acc[1] += m.recall;
                    acc[2] += m.map;
                }
            }
        }
        let values = if users == 0 {
            Vec::new()
        } else {
            let n = users as f64;
            ks.iter()
                .zip(&sums)
                .map(|(&k, s)| KMetrics {
                    k,
                    dcg: s[0] / n,
                    recall: s[1] / n,
                    map: s[2] / n,
                })
                .collect()
        };
        reports.push(MetricReport {
            method: method.to_string(),
            run,
            cohort,
            users,
            values,
        });
    }
    Ok(reports)
}

/// Mean DCG@k over the candidates of `split`, relevance = click.
pub fn mean_dcg(scorer: &dyn Scorer, split: &ImplicitDataset, k: usize) -> Result<f64> {
    let ctx = CohortContext {
        spec: CohortSpec::default(),
        user_clicks: Vec::new(),
        item_clicks: Vec::new(),
    };
    let reports = evaluate(scorer, split, &ctx, &[Cohort::All], &[k], RelevanceMode::Binary, "", 0)?;
    Ok(reports[0].dcg_at(k).unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// `P(T >= t)` under `mean(a) = mean(b)`.
    pub p_value: f64,
    /// Both samples have zero variance; `p_value` follows a convention.
    pub degenerate: bool,
}

/// Welch two-sample t-test of `mean(a) > mean(b)`.
pub fn one_tailed_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::domain("t-test needs at least two values per sample"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = va / na;
    let sb = vb / nb;
    let se2 = sa + sb;
    if se2 == 0.0 {
        let p_value = match ma.partial_cmp(&mb) {
            Some(std::cmp::Ordering::Greater) => 0.0,
            Some(std::cmp::Ordering::Less) => 1.0,
            _ => 0.5,
        };
        return Ok(TTest {
            t: 0.0,
            df: na + nb - 2.0,
            p_value,
            degenerate: true,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Estimation(e.to_string()))?;
    Ok(TTest {
        t,
        df,
        p_value: dist.sf(t),
        degenerate: false,
    })
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Interaction, Split};
    use proptest::prelude::*;

    #[test]
    fn perfect_single_item() {
        let m = rank_metrics(&[0.9], &[1.0], 3).unwrap().unwrap();
        assert_eq!((m.dcg, m.recall, m.map), (1.0, 1.0, 1.0));
    }

    #[test]
    fn relevant_item_at_rank_two() {
        let m = rank_metrics(&[0.9, 0.1], &[0.0, 1.0], 3).unwrap().unwrap();
        assert!((m.dcg - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((m.dcg - 0.63093).abs() < 1e-5);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.map, 0.5);
    }

    #[test]
    fn no_relevant_items_excluded_and_empty_rejected() {
        assert_eq!(rank_metrics(&[0.3, 0.2], &[0.0, 0.0], 3).unwrap(), None);
        assert!(rank_metrics(&[], &[], 3).is_err());
        assert!(rank_metrics(&[0.1], &[1.0, 0.0], 3).is_err());
    }

    #[test]
    fn ties_break_by_position() {
        // Equal scores: position 0 ranks first.
        let m = rank_metrics(&[0.5, 0.5], &[0.0, 1.0], 1).unwrap().unwrap();
        assert_eq!(m.recall, 0.0);
        let m = rank_metrics(&[0.5, 0.5], &[1.0, 0.0], 1).unwrap().unwrap();
        assert_eq!(m.recall, 1.0);
    }

    #[test]
    fn welch_matches_reference_values() {
        // Frozen from scipy.stats.ttest_ind(equal_var=False, alternative="greater").
        let t = one_tailed_t_test(&[0.5, 0.6, 0.7], &[0.4, 0.5, 0.6]).unwrap();
        assert!((t.t - 1.2247448713915892).abs() < 1e-9);
        assert!((t.p_value - 0.1439320673633454).abs() < 1e-6);
        let t = one_tailed_t_test(&[0.12, 0.15, 0.11, 0.14, 0.13], &[0.10, 0.12, 0.09, 0.13]).unwrap();
        assert!((t.p_value - 0.06679385565652632).abs() < 1e-6);
    }

    #[test]
    fn welch_edge_cases() {
        let a = [0.3, 0.4, 0.5];
        let t = one_tailed_t_test(&a, &a).unwrap();
        assert_eq!(t.p_value, 0.5);
        let same = [0.2, 0.2];
        let t = one_tailed_t_test(&same, &same).unwrap();
        assert!(t.degenerate && t.p_value == 0.5);
        let a = [1.0, 1.0 + 1e-9, 1.0 - 1e-9, 1.0];
        let b = [0.0, 1e-9, -1e-9, 0.0];
        assert!(one_tailed_t_test(&a, &b).unwrap().p_value < 1e-6);
        assert!(one_tailed_t_test(&[1.0], &b).is_err());
    }

    fn world_2_users() -> ImplicitDataset {
        let p = |user, item, relevant| Interaction {
            user,
            item,
            gamma: if relevant { 1.0 } else { 0.0 },
            relevant,
        };
        ImplicitDataset::new(
            2,
            3,
            Split::Test,
            0.0,
            0,
            5,
            vec![
                p(0, 0, false),
                p(0, 1, true),
                p(0, 2, false),
                p(1, 0, true),
                p(1, 1, false),
                p(1, 2, true),
            ],
        )
        .unwrap()
    }

    #[test]
    fn evaluate_averages_hand_computed_users() {
        let test = world_2_users();
        // Scores: item 2 > item 0 > item 1 for everyone.
        let scorer = |_: usize, i: usize| [0.5, 0.1, 0.9][i];
        let ctx = CohortContext {
            spec: CohortSpec::default(),
            user_clicks: vec![10, 10],
            item_clicks: vec![0, 0, 0],
        };
        let reports = evaluate(
            &scorer,
            &test,
            &ctx,
            &[Cohort::All],
            &[1, 3],
            RelevanceMode::Binary,
            "x",
            0,
        )
        .unwrap();
        let r = &reports[0];
        assert_eq!(r.users, 2);
        // user 0: relevant item 1 at rank 3 -> DCG@3 = 1/log2(4) = 0.5, AP@3 = 1/3
        // user 1: relevant items 2, 0 at ranks 1, 2 -> DCG@3 = 1 + 1/log2(3), AP@3 = 1
        let k3 = r.at(3).unwrap();
        assert!((k3.dcg - (0.5 + 1.0 + 1.0 / 3f64.log2()) / 2.0).abs() < 1e-12);
        assert!((k3.map - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((k3.recall - 1.0).abs() < 1e-12);
        let k1 = r.at(1).unwrap();
        assert!((k1.recall - (0.0 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cold_start_cohort_can_be_empty() {
        let test = world_2_users();
        let scorer = |_: usize, i: usize| i as f64;
        let ctx = CohortContext {
            spec: CohortSpec::default(),
            user_clicks: vec![6, 9],
            item_clicks: vec![500, 500, 500],
        };
        let reports = evaluate(
            &scorer,
            &test,
            &ctx,
            &Cohort::ALL,
            &DEFAULT_KS,
            RelevanceMode::Binary,
            "x",
            0,
        )
        .unwrap();
        assert_eq!(reports[1].cohort, Cohort::ColdStartUsers);
        assert_eq!(reports[1].users, 0);
        assert!(reports[1].values.is_empty());
        // No rare items either: nothing is credited.
        assert_eq!(reports[2].users, 0);
    }

    #[test]
    fn rare_items_restrict_credit_only() {
        let test = world_2_users();
        let scorer = |_: usize, i: usize| [0.5, 0.1, 0.9][i];
        let ctx = CohortContext {
            spec: CohortSpec::default(),
            user_clicks: vec![1, 1],
            item_clicks: vec![500, 500, 3],
        };
        let reports = evaluate(
            &scorer,
            &test,
            &ctx,
            &[Cohort::RareItems],
            &[1],
            RelevanceMode::Binary,
            "x",
            0,
        )
        .unwrap();
        // Only user 1 has a relevant rare item (item 2), ranked first.
        assert_eq!(reports[0].users, 1);
        assert_eq!(reports[0].dcg_at(1), Some(1.0));
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_monotone_transform(
            scores in proptest::collection::vec(-3.0f64..3.0, 1..12),
            seed in 0u64..1000,
        ) {
            let rel: Vec<f64> = (0..scores.len()).map(|i| f64::from(u8::from((seed >> (i % 10)) & 1 == 1))).collect();
            prop_assume!(rel.iter().sum::<f64>() > 0.0);
            let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 7.0).collect();
            let a = rank_metrics_at(&scores, &rel, &[1, 3, 5, 8]).unwrap().unwrap();
            let b = rank_metrics_at(&transformed, &rel, &[1, 3, 5, 8]).unwrap().unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.windows(2) {
                prop_assert!(w[0].recall <= w[1].recall);
                prop_assert!(w[0].dcg <= w[1].dcg);
            }
            for m in &a {
                prop_assert!((0.0..=1.0).contains(&m.recall));
                prop_assert!((0.0..=1.0).contains(&m.map));
                prop_assert!(m.dcg >= 0.0);
            }
        }

        #[test]
        fn all_relevant_recall_is_k_over_n(n in 1usize..15, k in 1usize..20) {
            let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let rel = vec![1.0; n];
            let m = rank_metrics(&scores, &rel, k).unwrap().unwrap();
            prop_assert_eq!(m.recall, k.min(n) as f64 / n as f64);
        }
    }
}
