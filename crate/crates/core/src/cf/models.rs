use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::data::{clip_rating, TrainSet};
use crate::error::{FwlsError, Result};
use crate::par;

/// A trained per-pair rating predictor.
pub trait Predictor: Sync {
    fn name(&self) -> &str;

    /// Predicted rating, clipped to the rating scale.
    fn predict(&self, user: usize, item: usize) -> f64;

    fn predict_pairs(&self, pairs: &[(u32, u32)]) -> Vec<f64> {
        pairs.iter().map(|&(u, i)| self.predict(u as usize, i as usize)).collect()
    }
}

/// Baseline `μ + b_u + b_i` with shrunken offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEffects {
    mu: f64,
    user_offset: Vec<f64>,
    item_offset: Vec<f64>,
}

fn shrunk_mean(sum: f64, n: usize, alpha: f64) -> f64 {
    let denom = n as f64 + alpha;
    if denom > 0.0 {
        sum / denom
    } else {
        0.0
    }
}

/// Fits the user offset on `r − μ`, then the item offset on the residual
/// after the user offset. `sweeps > 1` repeats the pair of passes, each
/// time refitting users against the current item offsets.
pub fn train_global_effects(train: &TrainSet, alpha: f64, sweeps: usize) -> GlobalEffects {
    let mu = train.mean();
    let mut user_offset = vec![0.0; train.n_users()];
    let mut item_offset = vec![0.0; train.n_items()];
    for _ in 0..sweeps.max(1) {
        for (u, b) in user_offset.iter_mut().enumerate() {
            let rs = train.user_ratings(u);
            let sum: f64 = rs.iter().map(|&(i, r)| r - mu - item_offset[i as usize]).sum();
            *b = shrunk_mean(sum, rs.len(), alpha);
        }
        for (i, b) in item_offset.iter_mut().enumerate() {
            let rs = train.item_ratings(i);
            let sum: f64 = rs.iter().map(|&(u, r)| r - mu - user_offset[u as usize]).sum();
            *b = shrunk_mean(sum, rs.len(), alpha);
        }
    }
    GlobalEffects {
        mu,
        user_offset,
        item_offset,
    }
}

impl GlobalEffects {
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn user_offset(&self, u: usize) -> f64 {
        self.user_offset.get(u).copied().unwrap_or(0.0)
    }

    pub fn item_offset(&self, i: usize) -> f64 {
        self.item_offset.get(i).copied().unwrap_or(0.0)
    }
}

impl Predictor for GlobalEffects {
    fn name(&self) -> &str {
        "global_effects"
    }

    fn predict(&self, user: usize, item: usize) -> f64 {
        clip_rating(self.mu + self.user_offset(user) + self.item_offset(item))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfConfig {
    pub n_factors: usize,
    pub learn_rate: f64,
    pub reg: f64,
    pub epochs: usize,
    pub init_sd: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            n_factors: 10,
            learn_rate: 0.01,
            reg: 0.05,
            epochs: 30,
            init_sd: 0.1,
            seed: 17,
        }
    }
}

/// Biased matrix factorization `μ + b_u + b_i + p_u·q_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFactorization {
    n_factors: usize,
    mu: f64,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
}

impl MatrixFactorization {
    /// Untrained parameters: zero biases, Gaussian factors.
    pub fn init(train: &TrainSet, cfg: &MfConfig) -> Result<Self> {
        if cfg.n_factors == 0 {
            return Err(FwlsError::InvalidArgument("matrix factorization needs at least one factor".into()));
        }
        if !(cfg.init_sd.is_finite() && cfg.init_sd >= 0.0) {
            return Err(FwlsError::InvalidArgument("init_sd must be finite and non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dist = Normal::new(0.0, cfg.init_sd).expect("checked above");
        let f = cfg.n_factors;
        Ok(Self {
            n_factors: f,
            mu: train.mean(),
            user_bias: vec![0.0; train.n_users()],
            item_bias: vec![0.0; train.n_items()],
            p: (0..train.n_users() * f).map(|_| dist.sample(&mut rng)).collect(),
            q: (0..train.n_items() * f).map(|_| dist.sample(&mut rng)).collect(),
        })
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    fn raw(&self, u: usize, i: usize) -> f64 {
        let f = self.n_factors;
        let (Some(pu), Some(qi)) = (self.p.get(u * f..(u + 1) * f), self.q.get(i * f..(i + 1) * f)) else {
            return self.mu;
        };
        let dot: f64 = pu.iter().zip(qi).map(|(a, b)| a * b).sum();
        self.mu + self.user_bias[u] + self.item_bias[i] + dot
    }

    fn is_finite(&self) -> bool {
        self.user_bias
            .iter()
            .chain(&self.item_bias)
            .chain(&self.p)
            .chain(&self.q)
            .all(|v| v.is_finite())
    }
}

/// SGD on regularized squared error over the train split. Each epoch visits
/// the ratings in a seeded shuffled order.
pub fn train_mf(train: &TrainSet, cfg: &MfConfig) -> Result<MatrixFactorization> {
    let mut m = MatrixFactorization::init(train, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let f = cfg.n_factors;
    let (lr, reg) = (cfg.learn_rate, cfg.reg);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let r = train.ratings()[k];
            let (u, i) = (r.user as usize, r.item as usize);
            let e = r.value - m.raw(u, i);
            m.user_bias[u] += lr * (e - reg * m.user_bias[u]);
            m.item_bias[i] += lr * (e - reg * m.item_bias[i]);
            for c in 0..f {
                let pu = m.p[u * f + c];
                let qi = m.q[i * f + c];
                m.p[u * f + c] += lr * (e * qi - reg * pu);
                m.q[i * f + c] += lr * (e * pu - reg * qi);
            }
        }
        if !m.is_finite() {
            return Err(FwlsError::TrainingDiverged { epoch: epoch + 1 });
        }
    }
    Ok(m)
}

impl Predictor for MatrixFactorization {
    fn name(&self) -> &str {
        "mf"
    }

    fn predict(&self, user: usize, item: usize) -> f64 {
        clip_rating(self.raw(user, item))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    pub min_overlap: usize,
    pub shrink: f64,
    /// Shrinkage of the fallback global-effects model.
    pub fallback_alpha: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 30,
            min_overlap: 3,
            shrink: 100.0,
            fallback_alpha: 25.0,
        }
    }
}

/// Item-item neighbourhood model over user-mean-centred ratings.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemKnn {
    n_items: usize,
    k: usize,
    sim: Vec<f64>,
    user_mean: Vec<f64>,
    centred: Vec<Vec<(u32, f64)>>,
    fallback: GlobalEffects,
}

/// Shrunk Pearson correlation from overlap sums; 0 below `min_overlap` or
/// when either side has no spread.
#[allow(clippy::too_many_arguments)]
fn shrunk_pearson(n: usize, sx: f64, sy: f64, sxx: f64, syy: f64, sxy: f64, min_overlap: usize, shrink: f64) -> f64 {
    if n < min_overlap.max(2) {
        return 0.0;
    }
    let nf = n as f64;
    let cov = sxy - sx * sy / nf;
    let vx = sxx - sx * sx / nf;
    let vy = syy - sy * sy / nf;
    if vx <= 1e-12 || vy <= 1e-12 {
        return 0.0;
    }
    let rho = (cov / (vx * vy).sqrt()).clamp(-1.0, 1.0);
    rho * nf / (nf + shrink)
}

pub fn train_item_knn(train: &TrainSet, cfg: &KnnConfig) -> Result<ItemKnn> {
    if cfg.k == 0 {
        return Err(FwlsError::InvalidArgument("item KNN needs k >= 1".into()));
    }
    if !(cfg.shrink.is_finite() && cfg.shrink >= 0.0) {
        return Err(FwlsError::InvalidArgument("KNN shrink must be finite and non-negative".into()));
    }
    let (nu, ni) = (train.n_users(), train.n_items());
    let user_mean: Vec<f64> = (0..nu)
        .map(|u| {
            let rs = train.user_ratings(u);
            if rs.is_empty() {
                0.0
            } else {
                rs.iter().map(|p| p.1).sum::<f64>() / rs.len() as f64
            }
        })
        .collect();
    let centred: Vec<Vec<(u32, f64)>> = (0..nu)
        .map(|u| train.user_ratings(u).iter().map(|&(i, r)| (i, r - user_mean[u])).collect())
        .collect();

    let rows: Vec<Vec<f64>> = par::map_indexed(ni, |i| {
        // overlap sums of item i against every other item
        let mut n = vec![0usize; ni];
        let mut s = vec![[0.0f64; 5]; ni];
        for &(u, _) in train.item_ratings(i) {
            let zs = &centred[u as usize];
            let x = zs[zs.binary_search_by_key(&(i as u32), |p| p.0).expect("indexed rating")].1;
            for &(j, y) in zs {
                let j = j as usize;
                n[j] += 1;
                let a = &mut s[j];
                a[0] += x;
                a[1] += y;
                a[2] += x * x;
                a[3] += y * y;
                a[4] += x * y;
            }
        }
        (0..ni)
            .map(|j| {
                if j == i {
                    0.0
                } else {
                    let a = s[j];
                    shrunk_pearson(n[j], a[0], a[1], a[2], a[3], a[4], cfg.min_overlap, cfg.shrink)
                }
            })
            .collect()
    });
    let sim = rows.into_iter().flatten().collect();

    Ok(ItemKnn {
        n_items: ni,
        k: cfg.k,
        sim,
        user_mean,
        centred,
        fallback: train_global_effects(train, cfg.fallback_alpha, 1),
    })
}

impl ItemKnn {
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        if i < self.n_items && j < self.n_items {
            self.sim[i * self.n_items + j]
        } else {
            0.0
        }
    }

    /// Neighbour-based prediction, or `None` when the user rated no
    /// positively correlated item.
    pub fn neighbour_prediction(&self, user: usize, item: usize) -> Option<f64> {
        if item >= self.n_items {
            return None;
        }
        let zs = self.centred.get(user)?;
        let row = &self.sim[item * self.n_items..(item + 1) * self.n_items];
        let mut cand: Vec<(f64, f64)> = zs
            .iter()
            .filter_map(|&(j, z)| {
                let s = row[j as usize];
                (s > 0.0 && j as usize != item).then_some((s, z))
            })
            .collect();
        if cand.is_empty() {
            return None;
        }
        if cand.len() > self.k {
            cand.select_nth_unstable_by(self.k, |a, b| b.0.total_cmp(&a.0));
            cand.truncate(self.k);
        }
        let (num, den) = cand.iter().fold((0.0, 0.0), |(n, d), &(s, z)| (n + s * z, d + s));
        Some(self.user_mean[user] + num / den)
    }
}

impl Predictor for ItemKnn {
    fn name(&self) -> &str {
        "item_knn"
    }

    fn predict(&self, user: usize, item: usize) -> f64 {
        match self.neighbour_prediction(user, item) {
            Some(p) => clip_rating(p),
            None => self.fallback.predict(user, item),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cf::data::{generate, GeneratorConfig, Rating, Split};

    fn rating(user: u32, item: u32, value: f64) -> Rating {
        Rating { user, item, value }
    }

    fn rmse(p: &dyn Predictor, rs: &[Rating]) -> f64 {
        let sse: f64 = rs
            .iter()
            .map(|r| (p.predict(r.user as usize, r.item as usize) - r.value).powi(2))
            .sum();
        (sse / rs.len() as f64).sqrt()
    }

    fn toy_train() -> TrainSet {
        TrainSet::new(
            3,
            3,
            vec![
                rating(0, 0, 5.0),
                rating(0, 1, 3.0),
                rating(1, 0, 4.0),
                rating(1, 2, 2.0),
                rating(2, 1, 1.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn global_effects_hand_values() {
        let t = toy_train();
        let ge = train_global_effects(&t, 1.0, 1);
        let mu = 3.0;
        assert_eq!(ge.mu(), mu);
        let bu = [(2.0 + 0.0) / 3.0, (1.0 - 1.0) / 3.0, (1.0 - 3.0f64) / 2.0];
        for (u, b) in bu.iter().enumerate() {
            assert!((ge.user_offset(u) - b).abs() < 1e-15);
        }
        let bi0 = ((5.0 - mu - bu[0]) + (4.0 - mu - bu[1])) / 3.0;
        assert!((ge.item_offset(0) - bi0).abs() < 1e-15);
    }

    #[test]
    fn global_effects_limits() {
        let t = toy_train();
        let ge = train_global_effects(&t, 1e15, 1);
        for u in 0..3 {
            for i in 0..3 {
                assert!((ge.predict(u, i) - ge.mu()).abs() < 1e-12);
            }
        }
        // unseen user: mu + item offset
        let ge = train_global_effects(&t, 25.0, 1);
        assert_eq!(ge.predict(99, 0), clip_rating(ge.mu() + ge.item_offset(0)));
    }

    #[test]
    fn global_effects_recover_noiseless_additive_ratings() {
        let cfg = GeneratorConfig {
            n_users: 400,
            n_items: 150,
            n_factors: 0,
            noise_sd: 0.0,
            mean_ratings_per_user: 60.0,
            user_count_sigma: 0.3,
            min_ratings_per_user: 10,
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let train = ds.train_set();
        let ge = train_global_effects(&train, 0.0, 50);
        let train_rmse = rmse(&ge, train.ratings());
        let test_rmse = rmse(&ge, &ds.split_ratings(Split::Test));
        assert!(train_rmse <= 0.05, "train {train_rmse}");
        assert!(test_rmse <= 0.05, "test {test_rmse}");
    }

    #[test]
    fn mf_recovers_rank_one_toy() {
        let a = [1.0, 1.3, 1.6, 1.9, 2.2];
        let b = [1.0, 1.1, 1.5, 2.0, 2.2];
        let mut rs = Vec::new();
        for (u, au) in a.iter().enumerate() {
            for (i, bi) in b.iter().enumerate() {
                rs.push(rating(u as u32, i as u32, au * bi));
            }
        }
        let t = TrainSet::new(5, 5, rs.clone()).unwrap();
        let cfg = MfConfig {
            n_factors: 1,
            learn_rate: 0.02,
            reg: 0.0,
            epochs: 3000,
            init_sd: 0.3,
            seed: 3,
        };
        let m = train_mf(&t, &cfg).unwrap();
        let e = rmse(&m, &rs);
        assert!(e <= 0.05, "rank-1 train rmse {e}");
    }

    #[test]
    fn mf_zero_learn_rate_keeps_init() {
        let t = toy_train();
        let cfg = MfConfig {
            learn_rate: 0.0,
            epochs: 5,
            ..MfConfig::default()
        };
        let trained = train_mf(&t, &cfg).unwrap();
        let init = MatrixFactorization::init(&t, &cfg).unwrap();
        assert_eq!(trained, init);
    }

    #[test]
    fn mf_divergence_names_epoch() {
        let t = toy_train();
        let cfg = MfConfig {
            learn_rate: 1e6,
            epochs: 10,
            ..MfConfig::default()
        };
        match train_mf(&t, &cfg) {
            Err(FwlsError::TrainingDiverged { epoch }) => assert!((1..=10).contains(&epoch)),
            other => panic!("{other:?}"),
        }
        assert!(train_mf(
            &t,
            &MfConfig {
                n_factors: 0,
                ..MfConfig::default()
            }
        )
        .is_err());
    }

    #[test]
    fn mf_is_deterministic() {
        let ds = generate(&GeneratorConfig {
            n_users: 100,
            n_items: 60,
            mean_ratings_per_user: 15.0,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let t = ds.train_set();
        let cfg = MfConfig {
            epochs: 3,
            ..MfConfig::default()
        };
        assert_eq!(train_mf(&t, &cfg).unwrap(), train_mf(&t, &cfg).unwrap());
    }

    #[test]
    fn identical_items_approach_unit_similarity() {
        let mut prev = 0.0;
        for n_users in [5u32, 50, 500, 5000] {
            let mut rs = Vec::new();
            for u in 0..n_users {
                let v = 1.0 + (u % 5) as f64;
                rs.push(rating(u, 0, v));
                rs.push(rating(u, 1, v));
                rs.push(rating(u, 2, 3.0));
            }
            let t = TrainSet::new(n_users as usize, 3, rs).unwrap();
            let knn = train_item_knn(&t, &KnnConfig::default()).unwrap();
            let s = knn.similarity(0, 1);
            let n = n_users as f64;
            assert!((s - n / (n + 100.0)).abs() < 1e-9, "n={n_users} s={s}");
            assert!(s > prev);
            prev = s;
        }
        assert!(prev > 0.98);
    }

    #[test]
    fn knn_overlap_floor_and_fallback() {
        let t = toy_train();
        let knn = train_item_knn(&t, &KnnConfig::default()).unwrap();
        // every pair overlaps in at most one user
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(knn.similarity(i, j), 0.0);
            }
        }
        assert!(knn.neighbour_prediction(2, 0).is_none());
        let ge = train_global_effects(&t, 25.0, 1);
        assert_eq!(knn.predict(2, 0), ge.predict(2, 0));
        assert!(train_item_knn(&t, &KnnConfig { k: 0, ..KnnConfig::default() }).is_err());
    }

    #[test]
    fn knn_hand_prediction() {
        // items 0 and 1 move together, item 2 is the target user's history
        let mut rs = Vec::new();
        for u in 0..10u32 {
            let v = 1.0 + (u % 4) as f64;
            rs.push(rating(u, 0, v));
            rs.push(rating(u, 1, v));
            rs.push(rating(u, 2, 6.0 - v));
        }
        rs.push(rating(10, 1, 4.0));
        rs.push(rating(10, 2, 2.0));
        let t = TrainSet::new(11, 3, rs).unwrap();
        let knn = train_item_knn(&t, &KnnConfig { shrink: 0.0, ..KnnConfig::default() }).unwrap();
        assert!((knn.similarity(0, 1) - 1.0).abs() < 1e-12);
        assert!(knn.similarity(0, 2) < 0.0);
        // only item 1 is a positive neighbour of item 0 for user 10
        let p = knn.neighbour_prediction(10, 0).unwrap();
        assert!((p - 4.0).abs() < 1e-12, "{p}");
    }

    #[test]
    fn clustered_generator_knn_beats_global_effects() {
        let cfg = GeneratorConfig {
            n_users: 800,
            n_items: 200,
            item_clusters: 5,
            factor_sd: 0.6,
            noise_sd: 0.4,
            mean_ratings_per_user: 50.0,
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let t = ds.train_set();
        let test = ds.split_ratings(Split::Test);
        let ge = train_global_effects(&t, 25.0, 1);
        let knn = train_item_knn(&t, &KnnConfig::default()).unwrap();
        let (eg, ek) = (rmse(&ge, &test), rmse(&knn, &test));
        assert!(ek < eg, "knn {ek} vs ge {eg}");
    }
}
