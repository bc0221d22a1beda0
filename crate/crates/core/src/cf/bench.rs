use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::data::{generate, GeneratorConfig, RatingDataset, Split, TrainSet};
use super::features::{compute_meta_features, MetaFeatureSpec};
use super::models::{train_global_effects, train_item_knn, train_mf, KnnConfig, MfConfig, Predictor};
use crate::cv::{
    cv_predictions, fit_design, forward_select, make_folds, predict_design, rmse, BlendDesign, CvReport, FoldPlan,
};
use crate::design::StackedDataset;
use crate::error::{FwlsError, Result};
use crate::par;

/// Benchmark settings. Every key is optional in the TOML file; missing
/// keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    // generator
    pub n_users: usize,
    pub n_items: usize,
    pub n_factors: usize,
    pub noise_sd: f64,
    pub global_mean: f64,
    pub user_bias_sd: f64,
    pub item_bias_sd: f64,
    pub factor_sd: f64,
    pub item_clusters: usize,
    pub mean_ratings_per_user: f64,
    pub user_count_sigma: f64,
    pub min_ratings_per_user: usize,
    pub item_popularity_exponent: f64,
    pub blend_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    // global effects
    pub ge_alpha: f64,
    pub ge_sweeps: usize,
    // matrix factorization
    pub mf_factors: usize,
    pub mf_learn_rate: f64,
    pub mf_reg: f64,
    pub mf_epochs: usize,
    pub mf_init_sd: f64,
    pub mf_seed: u64,
    // item neighbours
    pub knn_k: usize,
    pub knn_min_overlap: usize,
    pub knn_shrink: f64,
    // blending
    pub lambda: f64,
    pub folds: usize,
    pub cv_seed: u64,
    /// Meta-feature ids in candidate order; the first must be the constant.
    pub features: Vec<u32>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let mf = MfConfig::default();
        let knn = KnnConfig::default();
        Self {
            n_users: g.n_users,
            n_items: g.n_items,
            n_factors: g.n_factors,
            noise_sd: g.noise_sd,
            global_mean: g.global_mean,
            user_bias_sd: g.user_bias_sd,
            item_bias_sd: g.item_bias_sd,
            factor_sd: g.factor_sd,
            item_clusters: g.item_clusters,
            mean_ratings_per_user: g.mean_ratings_per_user,
            user_count_sigma: g.user_count_sigma,
            min_ratings_per_user: g.min_ratings_per_user,
            item_popularity_exponent: g.item_popularity_exponent,
            blend_fraction: g.blend_fraction,
            test_fraction: g.test_fraction,
            seed: g.seed,
            ge_alpha: 25.0,
            ge_sweeps: 1,
            mf_factors: mf.n_factors,
            mf_learn_rate: mf.learn_rate,
            mf_reg: mf.reg,
            mf_epochs: mf.epochs,
            mf_init_sd: mf.init_sd,
            mf_seed: mf.seed,
            knn_k: knn.k,
            knn_min_overlap: knn.min_overlap,
            knn_shrink: knn.shrink,
            lambda: 0.01,
            folds: 10,
            cv_seed: 1,
            features: MetaFeatureSpec::ALL.iter().map(|s| s.id()).collect(),
        }
    }
}

impl BenchmarkConfig {
    /// A smaller profile for smoke runs.
    pub fn quick() -> Self {
        Self {
            n_users: 600,
            n_items: 200,
            mean_ratings_per_user: 40.0,
            mf_epochs: 20,
            folds: 5,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| FwlsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FwlsError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            FwlsError::Config(m) => FwlsError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Reseeds the generator, the MF initialisation and the fold shuffle
    /// from one master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.mf_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
        self.cv_seed = seed.wrapping_mul(0xbf58_476d_1ce4_e5b9).wrapping_add(2);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator().validate()?;
        let specs = self.specs()?;
        if specs.first() != Some(&MetaFeatureSpec::Constant) {
            return Err(FwlsError::Config("the first meta-feature must be the constant (id 1)".into()));
        }
        for (k, s) in specs.iter().enumerate() {
            if specs[..k].contains(s) {
                return Err(FwlsError::Config(format!("meta-feature {} listed twice", s.id())));
            }
        }
        if self.folds < 2 {
            return Err(FwlsError::Config("folds must be at least 2".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(FwlsError::Config("lambda must be finite and non-negative".into()));
        }
        if !(self.ge_alpha >= 0.0) {
            return Err(FwlsError::Config("ge_alpha must be non-negative".into()));
        }
        if self.mf_factors == 0 || self.knn_k == 0 {
            return Err(FwlsError::Config("mf_factors and knn_k must be positive".into()));
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_users: self.n_users,
            n_items: self.n_items,
            n_factors: self.n_factors,
            noise_sd: self.noise_sd,
            global_mean: self.global_mean,
            user_bias_sd: self.user_bias_sd,
            item_bias_sd: self.item_bias_sd,
            factor_sd: self.factor_sd,
            item_clusters: self.item_clusters,
            mean_ratings_per_user: self.mean_ratings_per_user,
            user_count_sigma: self.user_count_sigma,
            min_ratings_per_user: self.min_ratings_per_user,
            item_popularity_exponent: self.item_popularity_exponent,
            blend_fraction: self.blend_fraction,
            test_fraction: self.test_fraction,
            seed: self.seed,
        }
    }

    pub fn mf(&self) -> MfConfig {
        MfConfig {
            n_factors: self.mf_factors,
            learn_rate: self.mf_learn_rate,
            reg: self.mf_reg,
            epochs: self.mf_epochs,
            init_sd: self.mf_init_sd,
            seed: self.mf_seed,
        }
    }

    pub fn knn(&self) -> KnnConfig {
        KnnConfig {
            k: self.knn_k,
            min_overlap: self.knn_min_overlap,
            shrink: self.knn_shrink,
            fallback_alpha: self.ge_alpha,
        }
    }

    pub fn specs(&self) -> Result<Vec<MetaFeatureSpec>> {
        self.features.iter().map(|&id| MetaFeatureSpec::from_id(id)).collect()
    }
}

/// Stacked blend and test splits ready for blending.
#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub ratings: RatingDataset,
    pub blend: StackedDataset,
    pub test: StackedDataset,
    /// `(user, item)` of each blend row.
    pub blend_pairs: Vec<(u32, u32)>,
    pub test_pairs: Vec<(u32, u32)>,
}

fn stack(
    train: &TrainSet,
    ratings: &RatingDataset,
    split: Split,
    models: &[&dyn Predictor],
    specs: &[MetaFeatureSpec],
) -> Result<(StackedDataset, Vec<(u32, u32)>)> {
    let rs = ratings.split_ratings(split);
    let pairs: Vec<(u32, u32)> = rs.iter().map(|r| (r.user, r.item)).collect();
    let targets: Vec<f64> = rs.iter().map(|r| r.value).collect();
    let cols: Vec<Vec<f64>> = models.iter().map(|m| m.predict_pairs(&pairs)).collect();
    let mut g = Vec::with_capacity(pairs.len() * models.len());
    for r in 0..pairs.len() {
        g.extend(cols.iter().map(|c| c[r]));
    }
    let f = compute_meta_features(train, &pairs, specs)?;
    let ids = pairs.iter().map(|(u, i)| format!("{u}:{i}")).collect();
    let ds = StackedDataset::new(targets, g, models.len(), f, specs.len())?
        .with_row_ids(ids)?
        .with_names(
            models.iter().map(|m| m.name().to_string()).collect(),
            specs.iter().map(|s| s.name().to_string()).collect(),
        )?;
    Ok((ds, pairs))
}

/// Generates ratings, trains the base models on the train split and
/// stacks their predictions with meta-features on the blend and test
/// splits.
pub fn prepare(cfg: &BenchmarkConfig) -> Result<BenchmarkData> {
    cfg.validate()?;
    let specs = cfg.specs()?;
    let ratings = generate(&cfg.generator())?;
    let train = ratings.train_set();
    let (ge, (mf, knn)) = par::join(
        || train_global_effects(&train, cfg.ge_alpha, cfg.ge_sweeps),
        || par::join(|| train_mf(&train, &cfg.mf()), || train_item_knn(&train, &cfg.knn())),
    );
    let (mf, knn) = (mf?, knn?);
    let models: [&dyn Predictor; 3] = [&ge, &mf, &knn];
    let (blend, blend_pairs) = stack(&train, &ratings, Split::Blend, &models, &specs)?;
    let (test, test_pairs) = stack(&train, &ratings, Split::Test, &models, &specs)?;
    Ok(BenchmarkData {
        ratings,
        blend,
        test,
        blend_pairs,
        test_pairs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyResult {
    pub name: String,
    pub detail: String,
    /// Out-of-sample RMSE on the blend split (K-fold for fitted blends).
    pub cv_rmse: f64,
    pub test_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub strategies: Vec<StrategyResult>,
    pub selection: CvReport,
    pub selected_names: Vec<String>,
    pub n_train: usize,
    pub n_blend: usize,
    pub n_test: usize,
}

pub const BEST_SINGLE: &str = "best_single";
pub const UNIFORM_AVERAGE: &str = "uniform_average";
pub const STANDARD_STACKING: &str = "standard_stacking";
pub const MERGED_BASELINE: &str = "merged_baseline";
pub const FWLS: &str = "fwls";

impl BenchmarkReport {
    pub fn strategy(&self, name: &str) -> Option<&StrategyResult> {
        self.strategies.iter().find(|s| s.name == name)
    }

    fn get(&self, name: &str) -> &StrategyResult {
        self.strategy(name).expect("every strategy is reported")
    }

    /// Standard-stacking RMSE minus FWLS RMSE on the blend split.
    pub fn fwls_gain_cv(&self) -> f64 {
        self.get(STANDARD_STACKING).cv_rmse - self.get(FWLS).cv_rmse
    }

    pub fn fwls_gain_test(&self) -> f64 {
        self.get(STANDARD_STACKING).test_rmse - self.get(FWLS).test_rmse
    }

    /// Share of the FWLS gain over standard stacking that the merged
    /// baseline achieves, on the blend split.
    pub fn merged_share_cv(&self) -> f64 {
        (self.get(STANDARD_STACKING).cv_rmse - self.get(MERGED_BASELINE).cv_rmse) / self.fwls_gain_cv()
    }

    pub fn merged_share_test(&self) -> f64 {
        (self.get(STANDARD_STACKING).test_rmse - self.get(MERGED_BASELINE).test_rmse) / self.fwls_gain_test()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,detail,cv_rmse,test_rmse\n");
        for r in &self.strategies {
            writeln!(s, "{},{},{},{}", r.name, r.detail, r.cv_rmse, r.test_rmse).unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.strategies.iter().map(|r| r.name.len()).max().unwrap_or(8).max(8);
        let dw = self.strategies.iter().map(|r| r.detail.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        writeln!(
            s,
            "ratings: train {}  blend {}  test {}",
            self.n_train, self.n_blend, self.n_test
        )
        .unwrap();
        writeln!(s, "{:<w$}  {:<dw$}  {:>10}  {:>10}", "strategy", "detail", "cv_rmse", "test_rmse").unwrap();
        for r in &self.strategies {
            writeln!(
                s,
                "{:<w$}  {:<dw$}  {:>10.6}  {:>10.6}",
                r.name, r.detail, r.cv_rmse, r.test_rmse
            )
            .unwrap();
        }
        writeln!(s, "selected meta-features: {}", self.selected_names.join(", ")).unwrap();
        s
    }
}

fn fitted(
    name: &str,
    detail: String,
    data: &BenchmarkData,
    design: BlendDesign<'_>,
    lambda: f64,
    plan: &FoldPlan,
) -> Result<StrategyResult> {
    let cv = cv_predictions(&data.blend, design, lambda, plan)?;
    let v = fit_design(&data.blend, design, lambda)?;
    let pred = predict_design(&data.test, design, &v)?;
    Ok(StrategyResult {
        name: name.into(),
        detail,
        cv_rmse: cv.rmse,
        test_rmse: rmse(&pred, data.test.targets()),
    })
}

/// Compares the five blending strategies on prepared data.
pub fn evaluate(data: &BenchmarkData, cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let (blend, test) = (&data.blend, &data.test);
    let plan = make_folds(blend.n_rows(), cfg.folds, cfg.cv_seed)?;
    let lambda = cfg.lambda;

    let single: Vec<(f64, f64)> = (0..blend.n_models())
        .map(|m| {
            (
                rmse(&blend.model_column(m), blend.targets()),
                rmse(&test.model_column(m), test.targets()),
            )
        })
        .collect();
    let best = (0..single.len())
        .min_by(|&a, &b| single[a].0.total_cmp(&single[b].0))
        .expect("at least one model");
    let average = |ds: &StackedDataset| -> Vec<f64> {
        (0..ds.n_rows())
            .map(|r| ds.model_row(r).iter().sum::<f64>() / ds.n_models() as f64)
            .collect()
    };

    let candidates: Vec<usize> = (1..blend.n_features()).collect();
    let selection = forward_select(blend, &candidates, lambda, &plan)?;
    let selected = selection.selected.clone();
    let selected_names = selected.iter().map(|&j| blend.feature_names()[j].clone()).collect::<Vec<_>>();

    let strategies = vec![
        StrategyResult {
            name: BEST_SINGLE.into(),
            detail: blend.model_names()[best].clone(),
            cv_rmse: single[best].0,
            test_rmse: single[best].1,
        },
        StrategyResult {
            name: UNIFORM_AVERAGE.into(),
            detail: format!("{} models", blend.n_models()),
            cv_rmse: rmse(&average(blend), blend.targets()),
            test_rmse: rmse(&average(test), test.targets()),
        },
        fitted(
            STANDARD_STACKING,
            blend.feature_names()[0].clone(),
            data,
            BlendDesign::Fwls(&[0]),
            lambda,
            &plan,
        )?,
        fitted(
            MERGED_BASELINE,
            format!("{} inputs", selected.len()),
            data,
            BlendDesign::Merged(&selected),
            lambda,
            &plan,
        )?,
        fitted(
            FWLS,
            format!("{} features", selected.len()),
            data,
            BlendDesign::Fwls(&selected),
            lambda,
            &plan,
        )?,
    ];

    Ok(BenchmarkReport {
        strategies,
        selection,
        selected_names,
        n_train: data.ratings.split_len(Split::Train),
        n_blend: blend.n_rows(),
        n_test: test.n_rows(),
    })
}

/// Full pipeline: [`prepare`] then [`evaluate`].
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let data = prepare(cfg)?;
    evaluate(&data, cfg)
}
