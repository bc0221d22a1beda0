//! Domain types for feature-weighted stacking and the expansion of one
//! example's (model predictions, meta-features) pair into product columns.
//!
//! The blend is `b(x) = Σ_ij v_ij · f_j(x) · g_i(x)`: a linear regression over
//! all `M·L` products of a meta-feature with a model prediction. Product
//! columns are laid out meta-feature-major with models varying fastest, so
//! column `j·L + i` holds `f_j · g_i`. This order is also the on-disk order of
//! state files.

use crate::error::{FwlsError, Result};

/// Name used for injected all-ones columns.
pub const CONSTANT_NAME: &str = "const";

/// Layout of the product columns for `n_models` models and `n_features`
/// meta-features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DesignMapping {
    n_models: usize,
    n_features: usize,
}

impl DesignMapping {
    pub fn new(n_models: usize, n_features: usize) -> Result<Self> {
        if n_models == 0 || n_features == 0 {
            return Err(FwlsError::InvalidArgument(format!(
                "design needs at least one model and one meta-feature (got L={n_models}, M={n_features})"
            )));
        }
        Ok(Self {
            n_models,
            n_features,
        })
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Total number of product columns, `M·L`.
    pub fn dim(&self) -> usize {
        self.n_models * self.n_features
    }

    pub fn column_index(&self, model: usize, feature: usize) -> Result<usize> {
        if model >= self.n_models {
            return Err(FwlsError::IndexOutOfRange {
                what: "model",
                index: model,
                bound: self.n_models,
            });
        }
        if feature >= self.n_features {
            return Err(FwlsError::IndexOutOfRange {
                what: "meta-feature",
                index: feature,
                bound: self.n_features,
            });
        }
        Ok(feature * self.n_models + model)
    }

    /// Inverse of [`column_index`](Self::column_index): `(model, feature)`.
    pub fn model_feature(&self, column: usize) -> Result<(usize, usize)> {
        if column >= self.dim() {
            return Err(FwlsError::IndexOutOfRange {
                what: "column",
                index: column,
                bound: self.dim(),
            });
        }
        Ok((column % self.n_models, column / self.n_models))
    }

    /// Writes the product row for predictions `g` and meta-features `f` into
    /// `out`.
    pub fn design_row_into(&self, g: &[f64], f: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_lengths(g, f)?;
        if out.len() != self.dim() {
            return Err(FwlsError::dims("design row buffer", self.dim(), out.len()));
        }
        expand_row(g, f, out);
        Ok(())
    }

    pub fn design_row(&self, g: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.design_row_into(g, f, &mut out)?;
        Ok(out)
    }

    pub(crate) fn check_lengths(&self, g: &[f64], f: &[f64]) -> Result<()> {
        if g.len() != self.n_models {
            return Err(FwlsError::dims("model predictions", self.n_models, g.len()));
        }
        if f.len() != self.n_features {
            return Err(FwlsError::dims("meta-features", self.n_features, f.len()));
        }
        Ok(())
    }
}

/// Unchecked product expansion; `out.len()` must equal `g.len() * f.len()`.
#[inline]
pub(crate) fn expand_row(g: &[f64], f: &[f64], out: &mut [f64]) {
    for (chunk, &fj) in out.chunks_exact_mut(g.len()).zip(f) {
        for (o, &gi) in chunk.iter_mut().zip(g) {
            *o = fj * gi;
        }
    }
}

/// Affine rescaling of meta-features, `(f - mean) / scale`, fit on a
/// training set and reused unchanged at prediction time. Columns with zero
/// spread (such as the constant column) are passed through.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &StackedDataset) -> Self {
        let m = ds.n_features();
        let n = ds.n_rows() as f64;
        let mut means = vec![0.0; m];
        for r in 0..ds.n_rows() {
            for (acc, v) in means.iter_mut().zip(ds.meta_row(r)) {
                *acc += v;
            }
        }
        means.iter_mut().for_each(|x| *x /= n);
        let mut vars = vec![0.0; m];
        for r in 0..ds.n_rows() {
            for ((acc, v), mu) in vars.iter_mut().zip(ds.meta_row(r)).zip(&means) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let mut scales = Vec::with_capacity(m);
        for (mean, var) in means.iter_mut().zip(vars) {
            let sd = (var / n).sqrt();
            if sd > 0.0 {
                scales.push(sd);
            } else {
                // identity for degenerate columns
                *mean = 0.0;
                scales.push(1.0);
            }
        }
        Self { means, scales }
    }

    pub fn apply_row(&self, f: &[f64], out: &mut [f64]) {
        for ((o, v), (mu, s)) in out
            .iter_mut()
            .zip(f)
            .zip(self.means.iter().zip(&self.scales))
        {
            *o = (v - mu) / s;
        }
    }

    pub fn apply(&self, ds: &StackedDataset) -> Result<StackedDataset> {
        if self.means.len() != ds.n_features() {
            return Err(FwlsError::dims(
                "standardizer width",
                ds.n_features(),
                self.means.len(),
            ));
        }
        let mut out = ds.clone();
        let m = ds.n_features();
        for r in 0..ds.n_rows() {
            let row = &mut out.meta_feats[r * m..(r + 1) * m];
            let src = ds.meta_row(r);
            self.apply_row(src, row);
        }
        Ok(out)
    }
}

/// Fitted blend weights `v_ij`, flat in [`DesignMapping`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendCoefficients {
    mapping: DesignMapping,
    v: Vec<f64>,
    lambda: f64,
    standardizer: Option<Standardizer>,
}

impl BlendCoefficients {
    pub fn new(mapping: DesignMapping, v: Vec<f64>, lambda: f64) -> Result<Self> {
        if v.len() != mapping.dim() {
            return Err(FwlsError::dims("coefficient vector", mapping.dim(), v.len()));
        }
        if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
            return Err(FwlsError::InvalidArgument(format!(
                "coefficient {pos} is not finite"
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(FwlsError::InvalidArgument(format!(
                "lambda must be a finite non-negative number, got {lambda}"
            )));
        }
        Ok(Self {
            mapping,
            v,
            lambda,
            standardizer: None,
        })
    }

    pub fn zeros(mapping: DesignMapping) -> Self {
        Self {
            mapping,
            v: vec![0.0; mapping.dim()],
            lambda: 0.0,
            standardizer: None,
        }
    }

    pub fn with_standardizer(mut self, standardizer: Standardizer) -> Result<Self> {
        if standardizer.means.len() != self.mapping.n_features() {
            return Err(FwlsError::dims(
                "standardizer width",
                self.mapping.n_features(),
                standardizer.means.len(),
            ));
        }
        self.standardizer = Some(standardizer);
        Ok(self)
    }

    pub fn mapping(&self) -> DesignMapping {
        self.mapping
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn standardizer(&self) -> Option<&Standardizer> {
        self.standardizer.as_ref()
    }

    /// `v_ij` for model `i` and meta-feature `j`.
    pub fn get(&self, model: usize, feature: usize) -> Result<f64> {
        Ok(self.v[self.mapping.column_index(model, feature)?])
    }

    /// Effective weight of each model at meta-feature values `f`:
    /// `w_i = Σ_j v_ij f_j`.
    pub fn model_weights(&self, f: &[f64]) -> Result<Vec<f64>> {
        let l = self.mapping.n_models();
        if f.len() != self.mapping.n_features() {
            return Err(FwlsError::dims("meta-features", self.mapping.n_features(), f.len()));
        }
        let f = self.standardized(f);
        let mut w = vec![0.0; l];
        for (chunk, fj) in self.v.chunks_exact(l).zip(f.iter()) {
            for (wi, vij) in w.iter_mut().zip(chunk) {
                *wi += vij * fj;
            }
        }
        Ok(w)
    }

    /// Blended prediction `Σ_ij v_ij f_j g_i`. Evaluated as the dot product of
    /// the design row with `v`, so it matches the regression exactly.
    pub fn predict(&self, g: &[f64], f: &[f64]) -> Result<f64> {
        self.mapping.check_lengths(g, f)?;
        let f = self.standardized(f);
        let mut row = vec![0.0; self.mapping.dim()];
        expand_row(g, &f, &mut row);
        Ok(dot(&row, &self.v))
    }

    /// Predictions for every row of `ds`.
    pub fn predict_dataset(&self, ds: &StackedDataset) -> Result<Vec<f64>> {
        if ds.n_models() != self.mapping.n_models() || ds.n_features() != self.mapping.n_features() {
            return Err(FwlsError::MappingMismatch {
                left_models: self.mapping.n_models(),
                left_features: self.mapping.n_features(),
                right_models: ds.n_models(),
                right_features: ds.n_features(),
            });
        }
        let mut row = vec![0.0; self.mapping.dim()];
        let mut fbuf = vec![0.0; self.mapping.n_features()];
        Ok((0..ds.n_rows())
            .map(|r| {
                let f = match &self.standardizer {
                    Some(s) => {
                        s.apply_row(ds.meta_row(r), &mut fbuf);
                        &fbuf[..]
                    }
                    None => ds.meta_row(r),
                };
                expand_row(ds.model_row(r), f, &mut row);
                dot(&row, &self.v)
            })
            .collect())
    }

    fn standardized(&self, f: &[f64]) -> Vec<f64> {
        match &self.standardizer {
            Some(s) => {
                let mut out = vec![0.0; f.len()];
                s.apply_row(f, &mut out);
                out
            }
            None => f.to_vec(),
        }
    }
}

/// Free-function form of [`BlendCoefficients::predict`].
pub fn blend_predict(coeffs: &BlendCoefficients, g: &[f64], f: &[f64]) -> Result<f64> {
    coeffs.predict(g, f)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The stacking training set: per row a target, `L` model predictions and
/// `M` meta-feature values. Row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedDataset {
    n_rows: usize,
    n_models: usize,
    n_features: usize,
    targets: Vec<f64>,
    model_preds: Vec<f64>,
    meta_feats: Vec<f64>,
    row_ids: Option<Vec<String>>,
    model_names: Vec<String>,
    feature_names: Vec<String>,
}

impl StackedDataset {
    /// Builds a dataset from row-major matrices, rejecting any non-finite
    /// value.
    pub fn new(
        targets: Vec<f64>,
        model_preds: Vec<f64>,
        n_models: usize,
        meta_feats: Vec<f64>,
        n_features: usize,
    ) -> Result<Self> {
        let n_rows = targets.len();
        if n_rows == 0 {
            return Err(FwlsError::InvalidArgument("dataset has no rows".into()));
        }
        if n_models == 0 || n_features == 0 {
            return Err(FwlsError::InvalidArgument(format!(
                "dataset needs at least one model and one meta-feature (got L={n_models}, M={n_features})"
            )));
        }
        if model_preds.len() != n_rows * n_models {
            return Err(FwlsError::dims("model prediction matrix", n_rows * n_models, model_preds.len()));
        }
        if meta_feats.len() != n_rows * n_features {
            return Err(FwlsError::dims("meta-feature matrix", n_rows * n_features, meta_feats.len()));
        }
        let ds = Self {
            n_rows,
            n_models,
            n_features,
            targets,
            model_preds,
            meta_feats,
            row_ids: None,
            model_names: (1..=n_models).map(|i| format!("g{i}")).collect(),
            feature_names: (1..=n_features).map(|j| format!("f{j}")).collect(),
        };
        ds.validate_finite()?;
        Ok(ds)
    }

    pub fn with_row_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_rows {
            return Err(FwlsError::dims("row ids", self.n_rows, ids.len()));
        }
        self.row_ids = Some(ids);
        Ok(self)
    }

    pub fn with_names(mut self, model_names: Vec<String>, feature_names: Vec<String>) -> Result<Self> {
        if model_names.len() != self.n_models {
            return Err(FwlsError::dims("model names", self.n_models, model_names.len()));
        }
        if feature_names.len() != self.n_features {
            return Err(FwlsError::dims("feature names", self.n_features, feature_names.len()));
        }
        self.model_names = model_names;
        self.feature_names = feature_names;
        Ok(self)
    }

    fn validate_finite(&self) -> Result<()> {
        for r in 0..self.n_rows {
            let bad = |column: String| FwlsError::NonFinite {
                row: r,
                row_id: self.row_ids.as_ref().map(|ids| ids[r].clone()),
                column,
            };
            if !self.targets[r].is_finite() {
                return Err(bad("y".into()));
            }
            if let Some(i) = self.model_row(r).iter().position(|v| !v.is_finite()) {
                return Err(bad(format!("g{}", i + 1)));
            }
            if let Some(j) = self.meta_row(r).iter().position(|v| !v.is_finite()) {
                return Err(bad(format!("f{}", j + 1)));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn mapping(&self) -> DesignMapping {
        DesignMapping {
            n_models: self.n_models,
            n_features: self.n_features,
        }
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn target(&self, row: usize) -> f64 {
        self.targets[row]
    }

    pub fn model_row(&self, row: usize) -> &[f64] {
        &self.model_preds[row * self.n_models..(row + 1) * self.n_models]
    }

    pub fn meta_row(&self, row: usize) -> &[f64] {
        &self.meta_feats[row * self.n_features..(row + 1) * self.n_features]
    }

    pub fn row_ids(&self) -> Option<&[String]> {
        self.row_ids.as_deref()
    }

    pub fn model_names(&self) -> &[String] {
        &self.model_names
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Column `j` of the meta-feature matrix.
    pub fn meta_column(&self, feature: usize) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.meta_row(r)[feature]).collect()
    }

    /// Column `i` of the model prediction matrix.
    pub fn model_column(&self, model: usize) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.model_row(r)[model]).collect()
    }

    /// Returns a copy with an all-ones meta-feature prepended (`add_f0`)
    /// and/or an all-ones model prepended (`add_g0`). Not idempotent: each
    /// call prepends again.
    pub fn augment_constants(&self, add_f0: bool, add_g0: bool) -> StackedDataset {
        let l = self.n_models + usize::from(add_g0);
        let m = self.n_features + usize::from(add_f0);
        let mut model_preds = Vec::with_capacity(self.n_rows * l);
        let mut meta_feats = Vec::with_capacity(self.n_rows * m);
        for r in 0..self.n_rows {
            if add_g0 {
                model_preds.push(1.0);
            }
            model_preds.extend_from_slice(self.model_row(r));
            if add_f0 {
                meta_feats.push(1.0);
            }
            meta_feats.extend_from_slice(self.meta_row(r));
        }
        let mut model_names = Vec::with_capacity(l);
        if add_g0 {
            model_names.push(CONSTANT_NAME.to_string());
        }
        model_names.extend(self.model_names.iter().cloned());
        let mut feature_names = Vec::with_capacity(m);
        if add_f0 {
            feature_names.push(CONSTANT_NAME.to_string());
        }
        feature_names.extend(self.feature_names.iter().cloned());
        StackedDataset {
            n_rows: self.n_rows,
            n_models: l,
            n_features: m,
            targets: self.targets.clone(),
            model_preds,
            meta_feats,
            row_ids: self.row_ids.clone(),
            model_names,
            feature_names,
        }
    }

    /// Keeps only the listed meta-feature columns, in the given order.
    pub fn select_features(&self, features: &[usize]) -> Result<StackedDataset> {
        if features.is_empty() {
            return Err(FwlsError::InvalidArgument("feature subset is empty".into()));
        }
        for &j in features {
            if j >= self.n_features {
                return Err(FwlsError::IndexOutOfRange {
                    what: "meta-feature",
                    index: j,
                    bound: self.n_features,
                });
            }
        }
        let mut meta_feats = Vec::with_capacity(self.n_rows * features.len());
        for r in 0..self.n_rows {
            let row = self.meta_row(r);
            meta_feats.extend(features.iter().map(|&j| row[j]));
        }
        Ok(StackedDataset {
            n_features: features.len(),
            meta_feats,
            feature_names: features.iter().map(|&j| self.feature_names[j].clone()).collect(),
            ..self.clone()
        })
    }

    /// Rows at `indices`, in that order.
    pub fn subset_rows(&self, indices: &[usize]) -> Result<StackedDataset> {
        if indices.is_empty() {
            return Err(FwlsError::InvalidArgument("row subset is empty".into()));
        }
        let mut targets = Vec::with_capacity(indices.len());
        let mut model_preds = Vec::with_capacity(indices.len() * self.n_models);
        let mut meta_feats = Vec::with_capacity(indices.len() * self.n_features);
        for &r in indices {
            if r >= self.n_rows {
                return Err(FwlsError::IndexOutOfRange {
                    what: "row",
                    index: r,
                    bound: self.n_rows,
                });
            }
            targets.push(self.targets[r]);
            model_preds.extend_from_slice(self.model_row(r));
            meta_feats.extend_from_slice(self.meta_row(r));
        }
        Ok(StackedDataset {
            n_rows: indices.len(),
            targets,
            model_preds,
            meta_feats,
            row_ids: self
                .row_ids
                .as_ref()
                .map(|ids| indices.iter().map(|&r| ids[r].clone()).collect()),
            ..self.clone()
        })
    }

    /// Appends a model column (new last model).
    pub fn push_model(&self, name: &str, values: &[f64]) -> Result<StackedDataset> {
        if values.len() != self.n_rows {
            return Err(FwlsError::dims("new model column", self.n_rows, values.len()));
        }
        let l = self.n_models + 1;
        let mut model_preds = Vec::with_capacity(self.n_rows * l);
        for r in 0..self.n_rows {
            model_preds.extend_from_slice(self.model_row(r));
            model_preds.push(values[r]);
        }
        let mut model_names = self.model_names.clone();
        model_names.push(name.to_string());
        let ds = StackedDataset {
            n_models: l,
            model_preds,
            model_names,
            ..self.clone()
        };
        ds.validate_finite()?;
        Ok(ds)
    }

    /// Appends a meta-feature column (new last meta-feature).
    pub fn push_feature(&self, name: &str, values: &[f64]) -> Result<StackedDataset> {
        if values.len() != self.n_rows {
            return Err(FwlsError::dims("new meta-feature column", self.n_rows, values.len()));
        }
        let m = self.n_features + 1;
        let mut meta_feats = Vec::with_capacity(self.n_rows * m);
        for r in 0..self.n_rows {
            meta_feats.extend_from_slice(self.meta_row(r));
            meta_feats.push(values[r]);
        }
        let mut feature_names = self.feature_names.clone();
        feature_names.push(name.to_string());
        let ds = StackedDataset {
            n_features: m,
            meta_feats,
            feature_names,
            ..self.clone()
        };
        ds.validate_finite()?;
        Ok(ds)
    }

    /// Row count plus a 64-bit hash of the row ids (0 when the dataset has
    /// no ids). Used to detect misaligned streams when extending a state.
    pub fn fingerprint(&self) -> u64 {
        match &self.row_ids {
            Some(ids) => fingerprint_ids(ids.iter().map(String::as_str)),
            None => 0,
        }
    }
}

/// FNV-1a over the ids with a separator byte; never returns 0.
pub fn fingerprint_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    for id in ids {
        h.write(id.as_bytes());
        h.write_u8(0x1f);
    }
    h.finish().max(1)
}
