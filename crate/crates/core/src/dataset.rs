//! Explicit-rating ingestion and semi-synthetic implicit feedback.
//!
//! Star ratings are turned into relevance probabilities, a binary relevance
//! label is drawn once per rated pair, and exposure is the fact that the pair
//! was rated at all. Clicks are `exposure * relevance`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kv::KvDocument;
use crate::{Error, Result};

pub const DEFAULT_R_MAX: u8 = 5;
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingFormat {
    /// `user<TAB>item<TAB>rating` lines.
    Triplets,
    /// Whitespace-separated integer matrix, one row per user, `0` = unrated.
    Dense,
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplets" | "tsv" | "yahoo" => Ok(RatingFormat::Triplets),
            "dense" | "ascii" | "coat" => Ok(RatingFormat::Dense),
            other => Err(Error::Config(format!("unknown rating format `{other}`"))),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatingFormat::Triplets => "triplets",
            RatingFormat::Dense => "dense",
        })
    }
}

/// Dense index <-> raw identifier mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdIndex {
    pub fn positional(n: usize) -> Self {
        let mut index = Self::default();
        for i in 0..n {
            index.intern(&i.to_string());
        }
        index
    }

    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&idx) = self.lookup.get(raw) {
            return idx;
        }
        let idx = self.ids.len();
        self.ids.push(raw.to_string());
        self.lookup.insert(raw.to_string(), idx);
        idx
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.lookup.get(raw).copied()
    }

    pub fn raw(&self, idx: usize) -> Option<&str> {
        self.ids.get(idx).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for id in &self.ids {
            text.push_str(id);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut index = Self::default();
        for (n, line) in text.lines().enumerate() {
            if index.get(line).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: format!("duplicate id `{line}`"),
                });
            }
            index.intern(line);
        }
        Ok(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitRatings {
    num_users: usize,
    num_items: usize,
    r_max: u8,
    entries: Vec<Rating>,
    users: IdIndex,
    items: IdIndex,
}

impl ExplicitRatings {
    /// Builds a validated rating set with positional ids. Entries are sorted
    /// by `(user, item)`.
    pub fn new(num_users: usize, num_items: usize, r_max: u8, entries: Vec<Rating>) -> Result<Self> {
        Self::with_ids(
            num_users,
            num_items,
            r_max,
            entries,
            IdIndex::positional(num_users),
            IdIndex::positional(num_items),
        )
    }

    fn with_ids(
        num_users: usize,
        num_items: usize,
        r_max: u8,
        mut entries: Vec<Rating>,
        users: IdIndex,
        items: IdIndex,
    ) -> Result<Self> {
        if r_max == 0 {
            return Err(Error::domain("r_max must be at least 1"));
        }
        for e in &entries {
            if e.user >= num_users || e.item >= num_items {
                return Err(Error::domain(format!(
                    "entry ({}, {}) outside {num_users} x {num_items}",
                    e.user, e.item
                )));
            }
            if e.rating == 0 || e.rating > r_max {
                return Err(Error::domain(format!(
                    "rating {} for ({}, {}) outside [1, {r_max}]",
                    e.rating, e.user, e.item
                )));
            }
        }
        entries.sort_unstable();
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].user, w[0].item) == (w[1].user, w[1].item))
        {
            return Err(Error::Integrity(format!(
                "pair ({}, {}) rated more than once",
                w[0].user, w[0].item
            )));
        }
        Ok(Self {
            num_users,
            num_items,
            r_max,
            entries,
            users,
            items,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn r_max(&self) -> u8 {
        self.r_max
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    pub fn user_ids(&self) -> &IdIndex {
        &self.users
    }

    pub fn item_ids(&self) -> &IdIndex {
        &self.items
    }

    /// Grows the index space, e.g. so a train and a test file share dimensions.
    pub fn expand_to(&mut self, num_users: usize, num_items: usize) {
        self.num_users = self.num_users.max(num_users);
        self.num_items = self.num_items.max(num_items);
    }
}

/// Loads one rating file with fresh id maps.
pub fn load_triplets(path: &Path, format: RatingFormat) -> Result<ExplicitRatings> {
    let mut users = IdIndex::default();
    let mut items = IdIndex::default();
    load_with_index(path, format, DEFAULT_R_MAX, &mut users, &mut items)
}

/// Loads a train and a test file over a shared id space.
pub fn load_train_test(
    train: &Path,
    test: &Path,
    format: RatingFormat,
    r_max: u8,
) -> Result<(ExplicitRatings, ExplicitRatings)> {
    let mut users = IdIndex::default();
    let mut items = IdIndex::default();
    let mut train = load_with_index(train, format, r_max, &mut users, &mut items)?;
    let mut test = load_with_index(test, format, r_max, &mut users, &mut items)?;
    let (nu, ni) = (users.len(), items.len());
    for set in [&mut train, &mut test] {
        set.expand_to(nu, ni);
        set.users = users.clone();
        set.items = items.clone();
    }
    Ok((train, test))
}

/// Loads ratings, interning raw ids into `users` / `items`. Rating `0` means
/// unrated in both formats and is skipped.
pub fn load_with_index(
    path: &Path,
    format: RatingFormat,
    r_max: u8,
    users: &mut IdIndex,
    items: &mut IdIndex,
) -> Result<ExplicitRatings> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut entries = Vec::new();
    let mut dense_width: Option<usize> = None;
    let mut dense_row = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match format {
            RatingFormat::Triplets => {
                let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
                if fields.len() != 3 {
                    return Err(parse_err(
                        line_no,
                        format!("expected 3 tab-separated fields, found {}", fields.len()),
                    ));
                }
                let rating: i64 = fields[2]
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("rating `{}` is not an integer", fields[2])))?;
                check_rating(rating, r_max, path, line_no)?;
                if rating == 0 {
                    continue;
                }
                let user = users.intern(fields[0]);
                let item = items.intern(fields[1]);
                entries.push(Rating {
                    user,
                    item,
                    rating: rating as u8,
                });
            }
            RatingFormat::Dense => {
                let row: Vec<i64> = trimmed
                    .split_whitespace()
                    .map(|tok| {
                        tok.parse::<i64>()
                            .map_err(|_| parse_err(line_no, format!("`{tok}` is not an integer")))
                    })
                    .collect::<Result<_>>()?;
                match dense_width {
                    None => dense_width = Some(row.len()),
                    Some(w) if w != row.len() => {
                        return Err(parse_err(
                            line_no,
                            format!("row has {} columns, expected {w}", row.len()),
                        ))
                    }
                    _ => {}
                }
                let user = users.intern(&dense_row.to_string());
                for (col, &rating) in row.iter().enumerate() {
                    let item = items.intern(&col.to_string());
                    check_rating(rating, r_max, path, line_no)?;
                    if rating > 0 {
                        entries.push(Rating {
                            user,
                            item,
                            rating: rating as u8,
                        });
                    }
                }
                dense_row += 1;
            }
        }
    }

    let mut sorted = entries.clone();
    sorted.sort_unstable();
    if let Some(w) = sorted
        .windows(2)
        .find(|w| (w[0].user, w[0].item) == (w[1].user, w[1].item))
    {
        return Err(Error::Integrity(format!(
            "{}: pair ({}, {}) rated more than once",
            path.display(),
            users.raw(w[0].user).unwrap_or("?"),
            items.raw(w[0].item).unwrap_or("?"),
        )));
    }

    ExplicitRatings::with_ids(users.len(), items.len(), r_max, entries, users.clone(), items.clone())
}

fn check_rating(rating: i64, r_max: u8, path: &Path, line: usize) -> Result<()> {
    if rating < 0 || rating > i64::from(r_max) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("domain error: rating {rating} outside [0, {r_max}]"),
        });
    }
    Ok(())
}

/// `epsilon + (1 - epsilon) * (2^rating - 1) / (2^r_max - 1)`.
pub fn rating_to_relevance(rating: u8, epsilon: f64, r_max: u8) -> Result<f64> {
    if rating == 0 || rating > r_max {
        return Err(Error::domain(format!("rating {rating} outside [1, {r_max}]")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::domain(format!("epsilon {epsilon} outside [0, 1)")));
    }
    let num = 2f64.powi(i32::from(rating)) - 1.0;
    let den = 2f64.powi(i32::from(r_max)) - 1.0;
    Ok(epsilon + (1.0 - epsilon) * num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One exposed `(user, item)` pair. Clicked iff `relevant`, since `o = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    /// Ground-truth relevance probability.
    pub gamma: f64,
    /// Bernoulli(gamma) draw.
    pub relevant: bool,
}

impl Interaction {
    pub fn clicked(&self) -> bool {
        self.relevant
    }
}

/// Exposed pairs of one split, sorted by `(user, item)`, with a per-user
/// offset table for fast lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitDataset {
    num_users: usize,
    num_items: usize,
    split: Split,
    epsilon: f64,
    seed: u64,
    r_max: u8,
    pairs: Vec<Interaction>,
    offsets: Vec<usize>,
}

impl ImplicitDataset {
    pub fn new(
        num_users: usize,
        num_items: usize,
        split: Split,
        epsilon: f64,
        seed: u64,
        r_max: u8,
        mut pairs: Vec<Interaction>,
    ) -> Result<Self> {
        pairs.sort_by_key(|p| (p.user, p.item));
        for p in &pairs {
            if p.user >= num_users || p.item >= num_items {
                return Err(Error::domain(format!(
                    "pair ({}, {}) outside {num_users} x {num_items}",
                    p.user, p.item
                )));
            }
            if !(0.0..=1.0).contains(&p.gamma) {
                return Err(Error::domain(format!(
                    "relevance probability {} outside [0, 1]",
                    p.gamma
                )));
            }
        }
        if let Some(w) = pairs
            .windows(2)
            .find(|w| (w[0].user, w[0].item) == (w[1].user, w[1].item))
        {
            return Err(Error::Integrity(format!(
                "pair ({}, {}) listed twice",
                w[0].user, w[0].item
            )));
        }
        let mut offsets = vec![0usize; num_users + 1];
        for p in &pairs {
            offsets[p.user + 1] += 1;
        }
        for u in 0..num_users {
            offsets[u + 1] += offsets[u];
        }
        Ok(Self {
            num_users,
            num_items,
            split,
            epsilon,
            seed,
            r_max,
            pairs,
            offsets,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn r_max(&self) -> u8 {
        self.r_max
    }

    /// All exposed pairs.
    pub fn pairs(&self) -> &[Interaction] {
        &self.pairs
    }

    pub fn user_pairs(&self, user: usize) -> &[Interaction] {
        &self.pairs[self.offsets[user]..self.offsets[user + 1]]
    }

    pub fn clicks(&self) -> impl Iterator<Item = &Interaction> + '_ {
        self.pairs.iter().filter(|p| p.relevant)
    }

    pub fn num_clicks(&self) -> usize {
        self.clicks().count()
    }

    pub fn is_exposed(&self, user: usize, item: usize) -> bool {
        self.find(user, item).is_some()
    }

    pub fn is_clicked(&self, user: usize, item: usize) -> bool {
        self.find(user, item).is_some_and(|p| p.relevant)
    }

    pub fn find(&self, user: usize, item: usize) -> Option<&Interaction> {
        if user >= self.num_users {
            return None;
        }
        let row = self.user_pairs(user);
        row.binary_search_by_key(&item, |p| p.item).ok().map(|k| &row[k])
    }

    pub fn item_click_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_items];
        for p in self.clicks() {
            counts[p.item] += 1;
        }
        counts
    }

    pub fn user_click_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_users];
        for p in self.clicks() {
            counts[p.user] += 1;
        }
        counts
    }

    fn with_pairs(&self, split: Split, pairs: Vec<Interaction>) -> Result<Self> {
        Self::new(
            self.num_users,
            self.num_items,
            split,
            self.epsilon,
            self.seed,
            self.r_max,
            pairs,
        )
    }

    /// Writes `meta.txt`, `pairs.tsv` and the optional id maps to `dir`.
    pub fn write_dir(&self, dir: &Path, ids: Option<(&IdIndex, &IdIndex)>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = KvDocument::default();
        meta.push("format_version", DATASET_FORMAT_VERSION);
        meta.push("split", self.split);
        meta.push("num_users", self.num_users);
        meta.push("num_items", self.num_items);
        meta.push("pairs", self.pairs.len());
        meta.push("clicks", self.num_clicks());
        meta.push("epsilon", self.epsilon);
        meta.push("seed", self.seed);
        meta.push("r_max", self.r_max);
        let meta_path = dir.join("meta.txt");
        std::fs::write(&meta_path, meta.to_text()).map_err(|e| Error::io(&meta_path, e))?;

        let pairs_path = dir.join("pairs.tsv");
        let file = std::fs::File::create(&pairs_path).map_err(|e| Error::io(&pairs_path, e))?;
        let mut w = BufWriter::new(file);
        for p in &self.pairs {
            writeln!(w, "{}\t{}\t{:?}\t{}", p.user, p.item, p.gamma, u8::from(p.relevant))
                .map_err(|e| Error::io(&pairs_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&pairs_path, e))?;

        if let Some((users, items)) = ids {
            users.write(&dir.join("user_ids.txt"))?;
            items.write(&dir.join("item_ids.txt"))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.txt");
        let meta = KvDocument::read(&meta_path)?;
        meta.check_keys(
            &[
                "format_version",
                "split",
                "num_users",
                "num_items",
                "pairs",
                "clicks",
                "epsilon",
                "seed",
                "r_max",
            ],
            &meta_path,
        )?;
        let version: u32 = required(&meta, "format_version", &meta_path)?;
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported dataset format version {version}",
                meta_path.display()
            )));
        }
        let split: Split = meta.require("split", &meta_path)?.parse()?;
        let num_users: usize = required(&meta, "num_users", &meta_path)?;
        let num_items: usize = required(&meta, "num_items", &meta_path)?;
        let expected_pairs: usize = required(&meta, "pairs", &meta_path)?;
        let epsilon: f64 = required(&meta, "epsilon", &meta_path)?;
        let seed: u64 = required(&meta, "seed", &meta_path)?;
        let r_max: u8 = required(&meta, "r_max", &meta_path)?;

        let pairs_path = dir.join("pairs.tsv");
        let text = std::fs::read_to_string(&pairs_path).map_err(|e| Error::io(&pairs_path, e))?;
        let mut pairs = Vec::with_capacity(expected_pairs);
        for (idx, line) in text.lines().enumerate() {
            let bad = |message: String| Error::Parse {
                path: pairs_path.clone(),
                line: idx + 1,
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let user = f[0].parse().map_err(|_| bad(format!("bad user `{}`", f[0])))?;
            let item = f[1].parse().map_err(|_| bad(format!("bad item `{}`", f[1])))?;
            let gamma = f[2].parse().map_err(|_| bad(format!("bad gamma `{}`", f[2])))?;
            let relevant = match f[3] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("bad relevance flag `{other}`"))),
            };
            pairs.push(Interaction {
                user,
                item,
                gamma,
                relevant,
            });
        }
        if pairs.len() != expected_pairs {
            return Err(Error::Integrity(format!(
                "{}: {} pairs on disk, metadata says {expected_pairs}",
                pairs_path.display(),
                pairs.len()
            )));
        }
        Self::new(num_users, num_items, split, epsilon, seed, r_max, pairs)
    }
}

fn required<T>(meta: &KvDocument, key: &str, path: &Path) -> Result<T>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    meta.parse_value(key, path)?.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: format!("missing key `{key}`"),
    })
}

/// Reads the id maps written next to a dataset, if present.
pub fn read_id_maps(dir: &Path) -> Result<Option<(IdIndex, IdIndex)>> {
    let users: PathBuf = dir.join("user_ids.txt");
    let items: PathBuf = dir.join("item_ids.txt");
    if !users.exists() || !items.exists() {
        return Ok(None);
    }
    Ok(Some((IdIndex::read(&users)?, IdIndex::read(&items)?)))
}

/// Turns rated pairs into exposed pairs with Bernoulli relevance draws.
/// Unrated pairs are unexposed and never clicked.
pub fn generate_semi_synthetic(
    ratings: &ExplicitRatings,
    epsilon: f64,
    seed: u64,
    split: Split,
) -> Result<ImplicitDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(ratings.entries().len());
    for e in ratings.entries() {
        let gamma = rating_to_relevance(e.rating, epsilon, ratings.r_max())?;
        let relevant = rng.random::<f64>() < gamma;
        pairs.push(Interaction {
            user: e.user,
            item: e.item,
            gamma,
            relevant,
        });
    }
    ImplicitDataset::new(
        ratings.num_users(),
        ratings.num_items(),
        split,
        epsilon,
        seed,
        ratings.r_max(),
        pairs,
    )
}

/// Moves `floor(fraction * pairs)` exposed pairs, chosen uniformly at random,
/// into a validation split.
pub fn split_validation(
    dataset: &ImplicitDataset,
    fraction: f64,
    seed: u64,
) -> Result<(ImplicitDataset, ImplicitDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::domain(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let n = dataset.pairs().len();
    let n_val = (fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut in_val = vec![false; n];
    for &k in &order[..n_val] {
        in_val[k] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (k, p) in dataset.pairs().iter().enumerate() {
        if in_val[k] {
            val.push(*p);
        } else {
            train.push(*p);
        }
    }
    Ok((
        dataset.with_pairs(Split::Train, train)?,
        dataset.with_pairs(Split::Validation, val)?,
    ))
}

/// Knobs for [`simulate_ratings`], a generator of MNAR-train / MCAR-test
/// star ratings with popularity-driven exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    pub train_per_user: usize,
    pub test_per_user: usize,
    /// Zipf exponent of item popularity.
    pub popularity_skew: f64,
    /// How strongly users select items they like for rating.
    pub selection_strength: f64,
    /// Share of users that rate only a quarter of `train_per_user` items,
    /// so a cold-start cohort exists.
    pub light_user_share: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            num_users: 120,
            num_items: 150,
            latent_dim: 4,
            train_per_user: 24,
            test_per_user: 16,
            popularity_skew: 1.0,
            selection_strength: 1.0,
            light_user_share: 0.2,
            seed: 0,
        }
    }
}

/// Draws a synthetic explicit-rating world shaped like the public MNAR/MCAR
/// benchmarks: training ratings are biased towards popular and preferred
/// items, test ratings are on uniformly random items.
pub fn simulate_ratings(cfg: &SimulationConfig) -> Result<(ExplicitRatings, ExplicitRatings)> {
    use rand_distr::{Distribution, StandardNormal};

    if cfg.num_users == 0 || cfg.num_items == 0 || cfg.latent_dim == 0 {
        return Err(Error::domain("simulation needs users, items and latent_dim > 0"));
    }
    if cfg.train_per_user + cfg.test_per_user > cfg.num_items {
        return Err(Error::domain("train_per_user + test_per_user exceeds num_items"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let k = cfg.latent_dim;
    let user_f: Vec<f64> = (0..cfg.num_users * k).map(|_| normal(&mut rng)).collect();
    let item_f: Vec<f64> = (0..cfg.num_items * k).map(|_| normal(&mut rng)).collect();
    let item_bias: Vec<f64> = (0..cfg.num_items).map(|_| 0.5 * normal(&mut rng)).collect();

    // Popularity ranks are a random permutation so index order carries no signal.
    let mut ranks: Vec<usize> = (0..cfg.num_items).collect();
    ranks.shuffle(&mut rng);
    let popularity: Vec<f64> = ranks
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-cfg.popularity_skew))
        .collect();

    let scale = (k as f64).sqrt();
    let rating_of = |u: usize, i: usize| -> u8 {
        let dot: f64 = (0..k).map(|f| user_f[u * k + f] * item_f[i * k + f]).sum::<f64>() / scale;
        let z = dot + item_bias[i];
        match z {
            z if z < -1.0 => 1,
            z if z < -0.3 => 2,
            z if z < 0.3 => 3,
            z if z < 1.0 => 4,
            _ => 5,
        }
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in 0..cfg.num_users {
        let ratings: Vec<u8> = (0..cfg.num_items).map(|i| rating_of(u, i)).collect();
        // Weighted sampling without replacement via exponential keys.
        let mut keyed: Vec<(f64, usize)> = (0..cfg.num_items)
            .map(|i| {
                let w = popularity[i] * (cfg.selection_strength * f64::from(ratings[i])).exp();
                let e: f64 = -rng.random::<f64>().max(f64::MIN_POSITIVE).ln();
                (e / w, i)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n_train = if rng.random::<f64>() < cfg.light_user_share {
            (cfg.train_per_user / 4).max(1)
        } else {
            cfg.train_per_user
        };
        let chosen: Vec<usize> = keyed[..n_train].iter().map(|&(_, i)| i).collect();
        for &i in &chosen {
            train.push(Rating {
                user: u,
                item: i,
                rating: ratings[i],
            });
        }
        let mut rest: Vec<usize> = (0..cfg.num_items).filter(|i| !chosen.contains(i)).collect();
        rest.shuffle(&mut rng);
        for &i in &rest[..cfg.test_per_user] {
            test.push(Rating {
                user: u,
                item: i,
                rating: ratings[i],
            });
        }
    }
    Ok((
        ExplicitRatings::new(cfg.num_users, cfg.num_items, DEFAULT_R_MAX, train)?,
        ExplicitRatings::new(cfg.num_users, cfg.num_items, DEFAULT_R_MAX, test)?,
    ))
}
