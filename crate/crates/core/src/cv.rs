//! K-fold out-of-sample evaluation of blends.
//!
//! Every fold's blend is fit on the other `K−1` folds and predicts only its
//! own rows; the reported RMSE pools all `N` out-of-sample predictions.
//! Per-fold Gram partials are accumulated once and the training statistics
//! for fold `k` are the sum of the partials of every other fold, so the
//! cost of a CV run is one pass over the data plus `K` small solves.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::design::{dot, StackedDataset};
use crate::error::{FwlsError, Result};
use crate::gram::GramSums;
use crate::par;
use crate::solver::solve_sums;

/// Improvement a forward-selection candidate must beat.
pub const SELECTION_TOLERANCE: f64 = 1e-7;

/// Default ridge grid for [`select_lambda`].
pub const LAMBDA_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// Assignment of rows to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    n_rows: usize,
    k: usize,
    seed: u64,
    assignment: Vec<usize>,
}

/// Balanced, seeded fold assignment: rows are shuffled and dealt round-robin,
/// so fold sizes differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(FwlsError::InvalidArgument(format!(
            "fold count must satisfy 2 <= k <= n (k={k}, n={n})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        assignment[row] = pos % k;
    }
    Ok(FoldPlan {
        n_rows: n,
        k,
        seed,
        assignment,
    })
}

impl FoldPlan {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn fold_of(&self, row: usize) -> usize {
        self.assignment[row]
    }

    /// Rows of `fold`, ascending.
    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n_rows).filter(|&r| self.assignment[r] == fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Which regressors a CV fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendDesign<'a> {
    /// FWLS over the listed meta-features: `f_j · g_i` for `j` in the list.
    Fwls(&'a [usize]),
    /// Models and meta-features as separate additive regressors:
    /// `[g_1..g_L, f_j for j in the list]`.
    Merged(&'a [usize]),
}

impl BlendDesign<'_> {
    fn features(&self) -> &[usize] {
        match self {
            BlendDesign::Fwls(f) | BlendDesign::Merged(f) => f,
        }
    }

    pub fn dim(&self, ds: &StackedDataset) -> usize {
        match self {
            BlendDesign::Fwls(f) => f.len() * ds.n_models(),
            BlendDesign::Merged(f) => ds.n_models() + f.len(),
        }
    }

    fn validate(&self, ds: &StackedDataset) -> Result<()> {
        if let BlendDesign::Fwls(f) = self {
            if f.is_empty() {
                return Err(FwlsError::InvalidArgument("FWLS feature subset is empty".into()));
            }
        }
        for &j in self.features() {
            if j >= ds.n_features() {
                return Err(FwlsError::IndexOutOfRange {
                    what: "meta-feature",
                    index: j,
                    bound: ds.n_features(),
                });
            }
        }
        Ok(())
    }

    #[inline]
    fn expand(&self, ds: &StackedDataset, row: usize, out: &mut [f64]) {
        let g = ds.model_row(row);
        let f = ds.meta_row(row);
        match self {
            BlendDesign::Fwls(sel) => {
                for (chunk, &j) in out.chunks_exact_mut(g.len()).zip(sel.iter()) {
                    let fj = f[j];
                    for (o, &gi) in chunk.iter_mut().zip(g) {
                        *o = fj * gi;
                    }
                }
            }
            BlendDesign::Merged(sel) => {
                out[..g.len()].copy_from_slice(g);
                for (o, &j) in out[g.len()..].iter_mut().zip(sel.iter()) {
                    *o = f[j];
                }
            }
        }
    }
}

/// Bookkeeping for one fold's fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldFit {
    pub held_out: usize,
    /// Folds whose rows entered this fit.
    pub trained_on: Vec<usize>,
    pub n_train: u64,
    pub n_predicted: usize,
    pub coefficients: Vec<f64>,
}

/// Out-of-sample predictions for every row plus per-fold bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct CvPredictions {
    pub predictions: Vec<f64>,
    pub fits: Vec<FoldFit>,
    pub rmse: f64,
}

fn pooled_rmse(pred: &[f64], y: &[f64]) -> f64 {
    let sse: f64 = pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum();
    (sse / y.len() as f64).sqrt()
}

/// Runs the K-fold protocol for `design` and returns every out-of-sample
/// prediction.
pub fn cv_predictions(
    ds: &StackedDataset,
    design: BlendDesign<'_>,
    lambda: f64,
    plan: &FoldPlan,
) -> Result<CvPredictions> {
    if plan.n_rows() != ds.n_rows() {
        return Err(FwlsError::dims("fold plan rows", ds.n_rows(), plan.n_rows()));
    }
    design.validate(ds)?;
    let d = design.dim(ds);
    let k = plan.k();
    let folds: Vec<Vec<usize>> = (0..k).map(|f| plan.fold_rows(f)).collect();

    let partials: Vec<GramSums> = par::map_indexed(k, |f| {
        let mut sums = GramSums::new(d);
        let mut buf = vec![0.0; d];
        for &r in &folds[f] {
            design.expand(ds, r, &mut buf);
            sums.add_row(&buf, ds.target(r));
        }
        sums
    });

    let fits: Vec<Result<(FoldFit, Vec<(usize, f64)>)>> = par::map_indexed(k, |held| {
        let mut train = GramSums::new(d);
        let mut trained_on = Vec::with_capacity(k - 1);
        for (f, p) in partials.iter().enumerate() {
            if f != held {
                train.merge_from(p)?;
                trained_on.push(f);
            }
        }
        let sol = solve_sums(&train, lambda)?;
        let mut buf = vec![0.0; d];
        let preds = folds[held]
            .iter()
            .map(|&r| {
                design.expand(ds, r, &mut buf);
                (r, dot(&buf, &sol.v))
            })
            .collect::<Vec<_>>();
        Ok((
            FoldFit {
                held_out: held,
                trained_on,
                n_train: train.n_rows(),
                n_predicted: preds.len(),
                coefficients: sol.v,
            },
            preds,
        ))
    });

    let mut predictions = vec![f64::NAN; ds.n_rows()];
    let mut out_fits = Vec::with_capacity(k);
    for fit in fits {
        let (fit, preds) = fit?;
        assert!(!fit.trained_on.contains(&fit.held_out), "fold leaked into its own fit");
        assert_eq!(fit.n_train as usize + fit.n_predicted, ds.n_rows());
        for (r, p) in preds {
            predictions[r] = p;
        }
        out_fits.push(fit);
    }
    let rmse = pooled_rmse(&predictions, ds.targets());
    Ok(CvPredictions {
        predictions,
        fits: out_fits,
        rmse,
    })
}

/// Fits `design` on every row of `ds` and returns the coefficients in the
/// design's column order.
pub fn fit_design(ds: &StackedDataset, design: BlendDesign<'_>, lambda: f64) -> Result<Vec<f64>> {
    design.validate(ds)?;
    let d = design.dim(ds);
    let mut sums = GramSums::new(d);
    let mut buf = vec![0.0; d];
    for r in 0..ds.n_rows() {
        design.expand(ds, r, &mut buf);
        sums.add_row(&buf, ds.target(r));
    }
    Ok(solve_sums(&sums, lambda)?.v)
}

/// Applies coefficients from [`fit_design`] to every row of `ds`.
pub fn predict_design(ds: &StackedDataset, design: BlendDesign<'_>, v: &[f64]) -> Result<Vec<f64>> {
    design.validate(ds)?;
    let d = design.dim(ds);
    if v.len() != d {
        return Err(FwlsError::dims("design coefficients", d, v.len()));
    }
    let mut buf = vec![0.0; d];
    Ok((0..ds.n_rows())
        .map(|r| {
            design.expand(ds, r, &mut buf);
            dot(&buf, v)
        })
        .collect())
}

/// Root mean squared difference of two equal-length vectors.
pub fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    pooled_rmse(pred, y)
}

/// Pooled out-of-sample RMSE of an FWLS blend over `features`.
pub fn cv_rmse(ds: &StackedDataset, features: &[usize], lambda: f64, plan: &FoldPlan) -> Result<f64> {
    Ok(cv_predictions(ds, BlendDesign::Fwls(features), lambda, plan)?.rmse)
}

/// Same protocol with meta-features as additive regressors next to the
/// models (no interactions). An all-ones column among `features` acts as an
/// intercept.
pub fn merged_baseline_rmse(ds: &StackedDataset, features: &[usize], lambda: f64, plan: &FoldPlan) -> Result<f64> {
    Ok(cv_predictions(ds, BlendDesign::Merged(features), lambda, plan)?.rmse)
}

/// Picks the `λ` from `grid` with the lowest pooled CV RMSE (first wins on
/// ties).
pub fn select_lambda(
    ds: &StackedDataset,
    design: BlendDesign<'_>,
    grid: &[f64],
    plan: &FoldPlan,
) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let rmse = cv_predictions(ds, design, lambda, plan)?.rmse;
        if best.is_none_or(|(_, b)| rmse < b) {
            best = Some((lambda, rmse));
        }
    }
    best.ok_or_else(|| FwlsError::InvalidArgument("lambda grid is empty".into()))
}

/// One line of a cumulative report.
#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    /// Size of the cumulative meta-feature set.
    pub m: usize,
    pub feature: String,
    pub oos_rmse: f64,
}

/// Cumulative meta-feature report: row `m` is the RMSE using the first `m`
/// accepted meta-features.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub rows: Vec<CvRow>,
    /// Candidates tried and turned down, with the RMSE they reached.
    pub rejected: Vec<(String, f64)>,
    /// Indices of the accepted meta-features, base feature first.
    pub selected: Vec<usize>,
    pub lambda: f64,
    pub seed: u64,
    pub k: usize,
}

impl CvReport {
    pub fn final_rmse(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.oos_rmse)
    }

    /// `m,feature,oos_rmse` with full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("m,feature,oos_rmse\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.m, csv_field(&r.feature), r.oos_rmse);
        }
        s
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.feature.chars().count())
            .chain(std::iter::once("Meta-Feature".len()))
            .max()
            .unwrap_or(12);
        let mut s = String::new();
        let _ = writeln!(s, "RMSE using cumulative meta-feature sets ({}-fold CV, lambda={}, seed={})", self.k, self.lambda, self.seed);
        let _ = writeln!(s, "{:>3}  {:<width$}  {:>12}", "m", "Meta-Feature", "CV RMSE");
        let _ = writeln!(s, "{}", "-".repeat(3 + 2 + width + 2 + 12));
        for r in &self.rows {
            let _ = writeln!(s, "{:>3}  {:<width$}  {:>12.6}", r.m, r.feature, r.oos_rmse);
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Greedy forward meta-feature selection in the given candidate order.
/// Meta-feature 0 (the constant) is the base set; a candidate is kept iff it
/// lowers the pooled CV RMSE by more than [`SELECTION_TOLERANCE`].
pub fn forward_select(ds: &StackedDataset, candidates: &[usize], lambda: f64, plan: &FoldPlan) -> Result<CvReport> {
    if candidates.contains(&0) {
        return Err(FwlsError::InvalidArgument(
            "meta-feature 0 is the base set and cannot be a candidate".into(),
        ));
    }
    let mut selected = vec![0usize];
    let mut current = cv_rmse(ds, &selected, lambda, plan)?;
    let names = ds.feature_names();
    let mut rows = vec![CvRow {
        m: 1,
        feature: names[0].clone(),
        oos_rmse: current,
    }];
    let mut rejected = Vec::new();
    for &c in candidates {
        if selected.contains(&c) {
            continue;
        }
        let mut trial = selected.clone();
        trial.push(c);
        let rmse = cv_rmse(ds, &trial, lambda, plan)?;
        if rmse < current - SELECTION_TOLERANCE {
            selected = trial;
            current = rmse;
            rows.push(CvRow {
                m: selected.len(),
                feature: names[c].clone(),
                oos_rmse: rmse,
            });
        } else {
            rejected.push((names[c].clone(), rmse));
        }
    }
    Ok(CvReport {
        rows,
        rejected,
        selected,
        lambda,
        seed: plan.seed(),
        k: plan.k(),
    })
}

/// Cumulative report over `features` taken in the given order, keeping
/// every one: row `m` uses the first `m` entries.
pub fn cumulative_report(ds: &StackedDataset, features: &[usize], lambda: f64, plan: &FoldPlan) -> Result<CvReport> {
    if features.is_empty() {
        return Err(FwlsError::InvalidArgument("no meta-features to report on".into()));
    }
    for (k, f) in features.iter().enumerate() {
        if features[..k].contains(f) {
            return Err(FwlsError::InvalidArgument(format!("meta-feature {f} listed twice")));
        }
    }
    let names = ds.feature_names();
    let rows = (1..=features.len())
        .map(|m| {
            let rmse = cv_rmse(ds, &features[..m], lambda, plan)?;
            let j = features[m - 1];
            Ok(CvRow {
                m,
                feature: names[j].clone(),
                oos_rmse: rmse,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport {
        rows,
        rejected: Vec::new(),
        selected: features.to_vec(),
        lambda,
        seed: plan.seed(),
        k: plan.k(),
    })
}
