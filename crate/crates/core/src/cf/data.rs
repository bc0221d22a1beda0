use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::error::{FwlsError, Result};

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 5.0;

pub(crate) fn clip_rating(r: f64) -> f64 {
    r.clamp(MIN_RATING, MAX_RATING)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: u32,
    pub item: u32,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Blend,
    Test,
}

/// Knobs of the latent-factor rating generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_factors: usize,
    pub noise_sd: f64,
    pub global_mean: f64,
    pub user_bias_sd: f64,
    pub item_bias_sd: f64,
    /// Standard deviation of each latent coordinate.
    pub factor_sd: f64,
    /// Items are grouped into this many clusters sharing a factor centroid;
    /// 0 disables clustering.
    pub item_clusters: usize,
    /// Mean of the lognormal per-user rating count.
    pub mean_ratings_per_user: f64,
    /// Log-space spread of per-user rating counts.
    pub user_count_sigma: f64,
    pub min_ratings_per_user: usize,
    /// Zipf exponent of item popularity.
    pub item_popularity_exponent: f64,
    pub blend_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            n_factors: 8,
            noise_sd: 0.3,
            global_mean: 3.6,
            user_bias_sd: 0.35,
            item_bias_sd: 0.45,
            factor_sd: 0.5,
            item_clusters: 0,
            mean_ratings_per_user: 50.0,
            user_count_sigma: 1.1,
            min_ratings_per_user: 2,
            item_popularity_exponent: 1.2,
            blend_fraction: 0.1,
            test_fraction: 0.1,
            seed: 20090901,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FwlsError::Config(m.to_string()));
        if self.n_users == 0 || self.n_items == 0 {
            return bad("n_users and n_items must be positive");
        }
        if self.min_ratings_per_user == 0 || self.min_ratings_per_user > self.n_items {
            return bad("min_ratings_per_user must lie in 1..=n_items");
        }
        if !(self.mean_ratings_per_user > 0.0) {
            return bad("mean_ratings_per_user must be positive");
        }
        for (name, v) in [
            ("noise_sd", self.noise_sd),
            ("user_bias_sd", self.user_bias_sd),
            ("item_bias_sd", self.item_bias_sd),
            ("factor_sd", self.factor_sd),
            ("user_count_sigma", self.user_count_sigma),
            ("item_popularity_exponent", self.item_popularity_exponent),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if !self.global_mean.is_finite() {
            return bad("global_mean must be finite");
        }
        let (b, t) = (self.blend_fraction, self.test_fraction);
        if !(b >= 0.0 && t >= 0.0 && b + t < 1.0) {
            return bad("blend_fraction and test_fraction must be non-negative and sum below 1");
        }
        Ok(())
    }
}

/// Ratings with a split label each. Ratings are sorted by `(user, item)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    n_users: usize,
    n_items: usize,
    ratings: Vec<Rating>,
    splits: Vec<Split>,
}

impl RatingDataset {
    /// Validates and wraps labelled ratings.
    pub fn new(n_users: usize, n_items: usize, ratings: Vec<Rating>, splits: Vec<Split>) -> Result<Self> {
        if ratings.len() != splits.len() {
            return Err(FwlsError::dims("split labels", ratings.len(), splits.len()));
        }
        let mut order: Vec<usize> = (0..ratings.len()).collect();
        order.sort_by_key(|&i| (ratings[i].user, ratings[i].item));
        let ratings: Vec<Rating> = order.iter().map(|&i| ratings[i]).collect();
        let splits: Vec<Split> = order.iter().map(|&i| splits[i]).collect();
        let ds = Self {
            n_users,
            n_items,
            ratings,
            splits,
        };
        ds.check_invariants()?;
        Ok(ds)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.ratings.len());
        let mut user_in_train = vec![false; self.n_users];
        let mut item_in_train = vec![false; self.n_items];
        for (r, s) in self.ratings.iter().zip(&self.splits) {
            if r.user as usize >= self.n_users {
                return Err(FwlsError::IndexOutOfRange {
                    what: "user",
                    index: r.user as usize,
                    bound: self.n_users,
                });
            }
            if r.item as usize >= self.n_items {
                return Err(FwlsError::IndexOutOfRange {
                    what: "item",
                    index: r.item as usize,
                    bound: self.n_items,
                });
            }
            if !(MIN_RATING..=MAX_RATING).contains(&r.value) {
                return Err(FwlsError::InvalidArgument(format!(
                    "rating {} for user {} item {} is outside [1, 5]",
                    r.value, r.user, r.item
                )));
            }
            if !seen.insert((r.user, r.item)) {
                return Err(FwlsError::InvalidArgument(format!(
                    "duplicate rating for user {} item {}",
                    r.user, r.item
                )));
            }
            if *s == Split::Train {
                user_in_train[r.user as usize] = true;
                item_in_train[r.item as usize] = true;
            }
        }
        if let Some(u) = user_in_train.iter().position(|&b| !b) {
            return Err(FwlsError::InvalidArgument(format!("user {u} has no train rating")));
        }
        if let Some(i) = item_in_train.iter().position(|&b| !b) {
            return Err(FwlsError::InvalidArgument(format!("item {i} has no train rating")));
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Ratings carrying `split`, in `(user, item)` order.
    pub fn split_ratings(&self, split: Split) -> Vec<Rating> {
        self.ratings
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(r, _)| *r)
            .collect()
    }

    /// The only view models and meta-features are allowed to learn from.
    pub fn train_set(&self) -> TrainSet {
        TrainSet::new(self.n_users, self.n_items, self.split_ratings(Split::Train))
            .expect("validated dataset has a non-empty train split")
    }

    /// Per-user rating counts over all splits.
    pub fn user_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_users];
        for r in &self.ratings {
            c[r.user as usize] += 1;
        }
        c
    }

    /// Stable byte serialization used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.ratings.len() * 17);
        out.extend_from_slice(&(self.n_users as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_items as u64).to_le_bytes());
        for (r, s) in self.ratings.iter().zip(&self.splits) {
            out.extend_from_slice(&r.user.to_le_bytes());
            out.extend_from_slice(&r.item.to_le_bytes());
            out.extend_from_slice(&r.value.to_le_bytes());
            out.push(*s as u8);
        }
        out
    }
}

/// Train-split ratings with per-user and per-item indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    n_users: usize,
    n_items: usize,
    ratings: Vec<Rating>,
    by_user: Vec<Vec<(u32, f64)>>,
    by_item: Vec<Vec<(u32, f64)>>,
}

impl TrainSet {
    pub fn new(n_users: usize, n_items: usize, ratings: Vec<Rating>) -> Result<Self> {
        if ratings.is_empty() {
            return Err(FwlsError::InvalidArgument("train split is empty".into()));
        }
        let mut by_user = vec![Vec::new(); n_users];
        let mut by_item = vec![Vec::new(); n_items];
        for r in &ratings {
            let (u, i) = (r.user as usize, r.item as usize);
            if u >= n_users || i >= n_items {
                return Err(FwlsError::InvalidArgument(format!(
                    "train rating ({}, {}) outside {n_users} users x {n_items} items",
                    r.user, r.item
                )));
            }
            if !r.value.is_finite() {
                return Err(FwlsError::InvalidArgument(format!(
                    "non-finite train rating for user {} item {}",
                    r.user, r.item
                )));
            }
            by_user[u].push((r.item, r.value));
            by_item[i].push((r.user, r.value));
        }
        for v in by_user.iter_mut() {
            v.sort_by_key(|p| p.0);
        }
        for v in by_item.iter_mut() {
            v.sort_by_key(|p| p.0);
        }
        Ok(Self {
            n_users,
            n_items,
            ratings,
            by_user,
            by_item,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    /// `(item, value)` pairs of user `u`, sorted by item.
    pub fn user_ratings(&self, u: usize) -> &[(u32, f64)] {
        self.by_user.get(u).map_or(&[], |v| v.as_slice())
    }

    /// `(user, value)` pairs of item `i`, sorted by user.
    pub fn item_ratings(&self, i: usize) -> &[(u32, f64)] {
        self.by_item.get(i).map_or(&[], |v| v.as_slice())
    }

    pub fn mean(&self) -> f64 {
        self.ratings.iter().map(|r| r.value).sum::<f64>() / self.ratings.len() as f64
    }
}

fn round_random(x: f64, rng: &mut impl Rng) -> usize {
    let base = x.floor();
    let extra = if rng.random::<f64>() < x - base { 1.0 } else { 0.0 };
    (base + extra) as usize
}

/// Draws a synthetic dataset from the latent-factor model.
pub fn generate(cfg: &GeneratorConfig) -> Result<RatingDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |sd: f64| Normal::new(0.0, sd).expect("sd validated non-negative");
    let (nu, ni, nf) = (cfg.n_users, cfg.n_items, cfg.n_factors);

    let user_bias: Vec<f64> = (0..nu).map(|_| normal(cfg.user_bias_sd).sample(&mut rng)).collect();
    let item_bias: Vec<f64> = (0..ni).map(|_| normal(cfg.item_bias_sd).sample(&mut rng)).collect();
    let p: Vec<f64> = (0..nu * nf).map(|_| normal(cfg.factor_sd).sample(&mut rng)).collect();
    let q: Vec<f64> = if cfg.item_clusters > 0 {
        let centroids: Vec<f64> = (0..cfg.item_clusters * nf)
            .map(|_| normal(cfg.factor_sd).sample(&mut rng))
            .collect();
        let jitter = normal(0.3 * cfg.factor_sd);
        (0..ni * nf)
            .map(|k| {
                let (i, f) = (k / nf.max(1), k % nf.max(1));
                centroids[(i % cfg.item_clusters) * nf + f] + jitter.sample(&mut rng)
            })
            .collect()
    } else {
        (0..ni * nf).map(|_| normal(cfg.factor_sd).sample(&mut rng)).collect()
    };

    let mut ranks: Vec<usize> = (0..ni).collect();
    ranks.shuffle(&mut rng);
    let weight: Vec<f64> = ranks
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-cfg.item_popularity_exponent))
        .collect();

    let sigma = cfg.user_count_sigma;
    let mu_log = cfg.mean_ratings_per_user.ln() - 0.5 * sigma * sigma;
    let counts_dist = LogNormal::new(mu_log, sigma).map_err(|e| FwlsError::Config(e.to_string()))?;
    let eps = normal(cfg.noise_sd);

    let mut ratings = Vec::new();
    let mut keys: Vec<(f64, u32)> = Vec::with_capacity(ni);
    for u in 0..nu {
        let count = (counts_dist.sample(&mut rng).round() as usize).clamp(cfg.min_ratings_per_user, ni);
        // weighted sampling without replacement: keep the largest ln(U)/w
        keys.clear();
        keys.extend((0..ni).map(|i| (rng.random::<f64>().ln() / weight[i], i as u32)));
        if count < ni {
            keys.select_nth_unstable_by(count, |a, b| b.0.total_cmp(&a.0));
        }
        let mut chosen: Vec<u32> = keys[..count].iter().map(|k| k.1).collect();
        chosen.sort_unstable();
        for i in chosen {
            let iu = i as usize;
            let dot: f64 = (0..nf).map(|f| p[u * nf + f] * q[iu * nf + f]).sum();
            let value = clip_rating(cfg.global_mean + user_bias[u] + item_bias[iu] + dot + eps.sample(&mut rng));
            ratings.push(Rating {
                user: u as u32,
                item: i,
                value,
            });
        }
    }

    // every item needs at least one rating: hand orphans to random users
    let mut rated = vec![false; ni];
    for r in &ratings {
        rated[r.item as usize] = true;
    }
    for i in 0..ni {
        if !rated[i] {
            loop {
                let u = rng.random_range(0..nu) as u32;
                if !ratings.iter().any(|r| r.user == u && r.item == i as u32) {
                    let v = cfg.global_mean + user_bias[u as usize] + item_bias[i] + eps.sample(&mut rng);
                    ratings.push(Rating {
                        user: u,
                        item: i as u32,
                        value: clip_rating(v),
                    });
                    break;
                }
            }
        }
    }
    ratings.sort_by_key(|r| (r.user, r.item));

    let splits = assign_splits(&ratings, nu, ni, cfg.blend_fraction, cfg.test_fraction, &mut rng);
    RatingDataset::new(nu, ni, ratings, splits)
}

/// Per-user stratified split with randomized rounding. Each user keeps at
/// least one train rating and every item is moved into train if it would
/// otherwise have none.
fn assign_splits(
    ratings: &[Rating],
    n_users: usize,
    n_items: usize,
    blend_fraction: f64,
    test_fraction: f64,
    rng: &mut impl Rng,
) -> Vec<Split> {
    let mut splits = vec![Split::Train; ratings.len()];
    let mut start = 0;
    while start < ratings.len() {
        let u = ratings[start].user;
        let end = start + ratings[start..].iter().take_while(|r| r.user == u).count();
        let n = end - start;
        let mut idx: Vec<usize> = (start..end).collect();
        idx.shuffle(rng);
        let mut n_test = round_random(test_fraction * n as f64, rng);
        let mut n_blend = round_random(blend_fraction * n as f64, rng);
        while n_test + n_blend >= n {
            if n_blend >= n_test && n_blend > 0 {
                n_blend -= 1;
            } else {
                n_test -= 1;
            }
        }
        for (k, &r) in idx.iter().enumerate() {
            splits[r] = if k < n_test {
                Split::Test
            } else if k < n_test + n_blend {
                Split::Blend
            } else {
                Split::Train
            };
        }
        start = end;
    }
    debug_assert!(n_users > 0);

    let mut item_train = vec![false; n_items];
    for (r, s) in ratings.iter().zip(&splits) {
        if *s == Split::Train {
            item_train[r.item as usize] = true;
        }
    }
    for (k, r) in ratings.iter().enumerate() {
        let i = r.item as usize;
        if !item_train[i] {
            splits[k] = Split::Train;
            item_train[i] = true;
        }
    }
    splits
}

/// Reads `user,item,rating[,split]` rows; split is one of
/// `train`/`blend`/`test` and defaults to `train`. Users and items are
/// dense zero-based ids.
pub fn read_ratings_csv(path: &Path) -> Result<RatingDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| FwlsError::io(path, e))?;
    let source = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let parse_err = |line: u64, message: String| FwlsError::Parse {
        path: source.clone(),
        line,
        message,
    };
    let mut ratings = Vec::new();
    let mut splits = Vec::new();
    let (mut nu, mut ni) = (0usize, 0usize);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 3 {
            return Err(parse_err(line, format!("expected at least 3 fields, found {}", rec.len())));
        }
        let user: u32 = rec[0]
            .parse()
            .map_err(|_| parse_err(line, format!("bad user id {:?}", &rec[0])))?;
        let item: u32 = rec[1]
            .parse()
            .map_err(|_| parse_err(line, format!("bad item id {:?}", &rec[1])))?;
        let value: f64 = rec[2]
            .parse()
            .map_err(|_| parse_err(line, format!("bad rating {:?}", &rec[2])))?;
        let split = match rec.get(3).unwrap_or("train") {
            "" | "train" => Split::Train,
            "blend" => Split::Blend,
            "test" => Split::Test,
            other => return Err(parse_err(line, format!("unknown split {other:?}"))),
        };
        nu = nu.max(user as usize + 1);
        ni = ni.max(item as usize + 1);
        ratings.push(Rating { user, item, value });
        splits.push(split);
    }
    RatingDataset::new(nu, ni, ratings, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_users: 300,
            n_items: 120,
            mean_ratings_per_user: 25.0,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn generated_dataset_satisfies_invariants() {
        let ds = generate(&small()).unwrap();
        ds.check_invariants().unwrap();
        assert!(ds.ratings().iter().all(|r| (1.0..=5.0).contains(&r.value)));
        let n = ds.len() as f64;
        let test = ds.split_len(Split::Test) as f64 / n;
        let blend = ds.split_len(Split::Blend) as f64 / n;
        assert!((test - 0.1).abs() < 0.03, "test share {test}");
        assert!((blend - 0.1).abs() < 0.03, "blend share {blend}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small()).unwrap().to_bytes();
        let b = generate(&small()).unwrap().to_bytes();
        assert_eq!(a, b);
        let c = generate(&GeneratorConfig { seed: 7, ..small() }).unwrap().to_bytes();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_factorless_ratings_are_clipped_biases() {
        let cfg = GeneratorConfig {
            noise_sd: 0.0,
            n_factors: 0,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        // rebuild the biases from the same stream prefix
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ub: Vec<f64> = (0..cfg.n_users)
            .map(|_| Normal::new(0.0, cfg.user_bias_sd).unwrap().sample(&mut rng))
            .collect();
        let ib: Vec<f64> = (0..cfg.n_items)
            .map(|_| Normal::new(0.0, cfg.item_bias_sd).unwrap().sample(&mut rng))
            .collect();
        for r in ds.ratings() {
            let expect = clip_rating(cfg.global_mean + ub[r.user as usize] + ib[r.item as usize]);
            assert_eq!(r.value, expect);
        }
    }

    #[test]
    fn default_user_counts_span_two_orders_of_magnitude() {
        let ds = generate(&GeneratorConfig::default()).unwrap();
        let counts = ds.user_counts();
        let lo = *counts.iter().min().unwrap() as f64;
        let hi = *counts.iter().max().unwrap() as f64;
        assert!(hi / lo >= 100.0, "counts span {lo}..{hi}");
        assert!((80_000..=125_000).contains(&ds.len()), "{} ratings", ds.len());
    }

    #[test]
    fn dataset_rejects_duplicates_and_missing_train() {
        let r = |u, i| Rating {
            user: u,
            item: i,
            value: 3.0,
        };
        let dup = RatingDataset::new(1, 1, vec![r(0, 0), r(0, 0)], vec![Split::Train; 2]);
        assert!(dup.is_err());
        let no_train = RatingDataset::new(1, 2, vec![r(0, 0), r(0, 1)], vec![Split::Train, Split::Test]);
        assert!(no_train.is_err());
        let out_of_range = RatingDataset::new(
            1,
            1,
            vec![Rating {
                user: 0,
                item: 0,
                value: 6.0,
            }],
            vec![Split::Train],
        );
        assert!(out_of_range.is_err());
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(generate(&GeneratorConfig {
            n_users: 0,
            ..small()
        })
        .is_err());
        assert!(generate(&GeneratorConfig {
            test_fraction: 0.6,
            blend_fraction: 0.5,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn ratings_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(&path, "user,item,rating,split\n0,0,4,train\n0,1,3.5,test\n1,1,2,train\n1,0,5,\n").unwrap();
        let ds = read_ratings_csv(&path).unwrap();
        assert_eq!((ds.n_users(), ds.n_items(), ds.len()), (2, 2, 4));
        assert_eq!(ds.split_len(Split::Test), 1);
        std::fs::write(&path, "user,item,rating\n0,x,4\n").unwrap();
        match read_ratings_csv(&path) {
            Err(FwlsError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
