use super::data::TrainSet;
use crate::error::{FwlsError, Result};

/// Implemented meta-features. The discriminant is the formula id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetaFeatureSpec {
    /// Constant 1.
    Constant = 1,
    /// `ln(n_item + 1)`.
    LogItemSupport = 2,
    /// `ln(n_user + 1)`.
    LogUserSupport = 3,
    /// Product of the two log supports.
    SupportProduct = 4,
    /// Sample standard deviation of the user's ratings, 0 below two ratings.
    UserStdev = 5,
    /// Sample standard deviation of the item's ratings, 0 below two ratings.
    ItemStdev = 6,
    /// Mean of `ln(n_item + 1)` over the items the user rated.
    UserItemSupport = 7,
}

impl MetaFeatureSpec {
    pub const ALL: [MetaFeatureSpec; 7] = [
        MetaFeatureSpec::Constant,
        MetaFeatureSpec::LogItemSupport,
        MetaFeatureSpec::LogUserSupport,
        MetaFeatureSpec::SupportProduct,
        MetaFeatureSpec::UserStdev,
        MetaFeatureSpec::ItemStdev,
        MetaFeatureSpec::UserItemSupport,
    ];

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|s| s.id() == id)
            .ok_or(FwlsError::UnknownMetaFeature(id))
    }

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            MetaFeatureSpec::Constant => crate::design::CONSTANT_NAME,
            MetaFeatureSpec::LogItemSupport => "log_item_support",
            MetaFeatureSpec::LogUserSupport => "log_user_support",
            MetaFeatureSpec::SupportProduct => "support_product",
            MetaFeatureSpec::UserStdev => "user_stdev",
            MetaFeatureSpec::ItemStdev => "item_stdev",
            MetaFeatureSpec::UserItemSupport => "user_item_support",
        }
    }
}

fn sample_stdev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

struct Stats {
    log_user: Vec<f64>,
    log_item: Vec<f64>,
    user_sd: Vec<f64>,
    item_sd: Vec<f64>,
    user_item_support: Vec<f64>,
}

impl Stats {
    fn new(train: &TrainSet) -> Self {
        let log_item: Vec<f64> = (0..train.n_items())
            .map(|i| (train.item_ratings(i).len() as f64 + 1.0).ln())
            .collect();
        let log_user = (0..train.n_users())
            .map(|u| (train.user_ratings(u).len() as f64 + 1.0).ln())
            .collect();
        let user_sd = (0..train.n_users())
            .map(|u| sample_stdev(train.user_ratings(u).iter().map(|p| p.1)))
            .collect();
        let item_sd = (0..train.n_items())
            .map(|i| sample_stdev(train.item_ratings(i).iter().map(|p| p.1)))
            .collect();
        let user_item_support = (0..train.n_users())
            .map(|u| {
                let rs = train.user_ratings(u);
                if rs.is_empty() {
                    0.0
                } else {
                    rs.iter().map(|&(i, _)| log_item[i as usize]).sum::<f64>() / rs.len() as f64
                }
            })
            .collect();
        Self {
            log_user,
            log_item,
            user_sd,
            item_sd,
            user_item_support,
        }
    }
}

/// Row-major `pairs.len() × specs.len()` matrix of meta-feature values,
/// computed from train-split statistics only.
pub fn compute_meta_features(train: &TrainSet, pairs: &[(u32, u32)], specs: &[MetaFeatureSpec]) -> Result<Vec<f64>> {
    let st = Stats::new(train);
    let mut out = Vec::with_capacity(pairs.len() * specs.len());
    for &(u, i) in pairs {
        let (u, i) = (u as usize, i as usize);
        if u >= train.n_users() {
            return Err(FwlsError::IndexOutOfRange {
                what: "user",
                index: u,
                bound: train.n_users(),
            });
        }
        if i >= train.n_items() {
            return Err(FwlsError::IndexOutOfRange {
                what: "item",
                index: i,
                bound: train.n_items(),
            });
        }
        for spec in specs {
            out.push(match spec {
                MetaFeatureSpec::Constant => 1.0,
                MetaFeatureSpec::LogItemSupport => st.log_item[i],
                MetaFeatureSpec::LogUserSupport => st.log_user[u],
                MetaFeatureSpec::SupportProduct => st.log_item[i] * st.log_user[u],
                MetaFeatureSpec::UserStdev => st.user_sd[u],
                MetaFeatureSpec::ItemStdev => st.item_sd[i],
                MetaFeatureSpec::UserItemSupport => st.user_item_support[u],
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cf::data::Rating;

    fn toy() -> TrainSet {
        let r = |user, item, value| Rating { user, item, value };
        // user 2 has no train ratings
        TrainSet::new(3, 2, vec![r(0, 0, 4.0), r(0, 1, 2.0), r(1, 0, 5.0)]).unwrap()
    }

    #[test]
    fn ids_round_trip_and_unknown_id_fails() {
        for s in MetaFeatureSpec::ALL {
            assert_eq!(MetaFeatureSpec::from_id(s.id()).unwrap(), s);
        }
        assert!(matches!(MetaFeatureSpec::from_id(0), Err(FwlsError::UnknownMetaFeature(0))));
        assert!(matches!(MetaFeatureSpec::from_id(8), Err(FwlsError::UnknownMetaFeature(8))));
    }

    #[test]
    fn three_user_toy_matches_hand_values() {
        let t = toy();
        let pairs = [(0, 0), (1, 1), (2, 0)];
        let m = compute_meta_features(&t, &pairs, &MetaFeatureSpec::ALL).unwrap();
        let ln = |x: f64| x.ln();
        let sd_u0 = 2.0f64.sqrt(); // ratings 4, 2
        let sd_i0 = 0.5f64.sqrt(); // ratings 4, 5
        let expect = [
            // user 0 (2 ratings), item 0 (2 ratings)
            [1.0, ln(3.0), ln(3.0), ln(3.0) * ln(3.0), sd_u0, sd_i0, (ln(3.0) + ln(2.0)) / 2.0],
            // user 1 (1 rating), item 1 (1 rating)
            [1.0, ln(2.0), ln(2.0), ln(2.0) * ln(2.0), 0.0, 0.0, ln(3.0)],
            // user 2 (no ratings), item 0
            [1.0, ln(3.0), 0.0, 0.0, 0.0, sd_i0, 0.0],
        ];
        for (row, e) in m.chunks(7).zip(expect) {
            for (a, b) in row.iter().zip(e) {
                assert!((a - b).abs() < 1e-15, "{row:?} vs {e:?}");
            }
        }
    }

    #[test]
    fn product_feature_is_exact_product() {
        let t = toy();
        let pairs = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 1)];
        let specs = [
            MetaFeatureSpec::LogItemSupport,
            MetaFeatureSpec::LogUserSupport,
            MetaFeatureSpec::SupportProduct,
        ];
        let m = compute_meta_features(&t, &pairs, &specs).unwrap();
        for row in m.chunks(3) {
            assert_eq!(row[2], row[0] * row[1]);
        }
    }

    #[test]
    fn out_of_range_pairs_fail() {
        let t = toy();
        assert!(compute_meta_features(&t, &[(3, 0)], &MetaFeatureSpec::ALL).is_err());
        assert!(compute_meta_features(&t, &[(0, 2)], &MetaFeatureSpec::ALL).is_err());
    }
}
