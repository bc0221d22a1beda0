//! Single-pass accumulation of the normal-equation sufficient statistics
//! `AᵀA`, `Aᵀy` and `yᵀy` without materializing the design matrix `A`.
//!
//! Rows are expanded one at a time into their `M·L` products and folded into
//! a packed lower triangle. Rows are summed plainly inside chunks of
//! [`CHUNK_ROWS`]; each finished chunk is added to the running total. Memory
//! is `O(D²)` regardless of the number of rows.
//!
//! States are additive, so disjoint row blocks can be accumulated on
//! separate workers and merged afterwards. [`parallel_accumulate`] splits
//! rows into contiguous blocks by worker index and merges them left to
//! right, which makes its result independent of scheduling. Without the
//! `parallel` feature the same blocks are processed sequentially.

use crate::design::{expand_row, DesignMapping, StackedDataset};
use crate::error::{FwlsError, Result};
use crate::linalg::{packed_index, packed_len, tri_offset, unpack_symmetric, Cholesky};

/// Rows summed into a chunk partial before it is added to the total.
pub const CHUNK_ROWS: usize = 4096;

/// `AᵀA` (packed lower triangle), `Aᵀy`, `yᵀy` and the row count for an
/// arbitrary `dim`-column design.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSums {
    dim: usize,
    gram: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
    n_rows: u64,
}

impl GramSums {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gram: vec![0.0; packed_len(dim)],
            xty: vec![0.0; dim],
            yty: 0.0,
            n_rows: 0,
        }
    }

    pub(crate) fn from_parts(dim: usize, gram: Vec<f64>, xty: Vec<f64>, yty: f64, n_rows: u64) -> Self {
        debug_assert_eq!(gram.len(), packed_len(dim));
        debug_assert_eq!(xty.len(), dim);
        Self {
            dim,
            gram,
            xty,
            yty,
            n_rows,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> u64 {
        self.n_rows
    }

    /// Packed lower triangle of `AᵀA`, row-major.
    pub fn gram_packed(&self) -> &[f64] {
        &self.gram
    }

    pub fn gram_at(&self, r: usize, c: usize) -> f64 {
        self.gram[packed_index(r, c)]
    }

    /// `AᵀA` as a full symmetric row-major matrix.
    pub fn gram_full(&self) -> Vec<f64> {
        unpack_symmetric(&self.gram, self.dim)
    }

    pub fn xty(&self) -> &[f64] {
        &self.xty
    }

    pub fn yty(&self) -> f64 {
        self.yty
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.gram[tri_offset(i) + i]).sum()
    }

    /// Largest absolute entry of `AᵀA`.
    pub fn gram_max_abs(&self) -> f64 {
        self.gram.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Adds one already-expanded design row. No finiteness check.
    #[inline]
    pub fn add_row(&mut self, a: &[f64], y: f64) {
        debug_assert_eq!(a.len(), self.dim);
        let mut off = 0;
        for (r, &ar) in a.iter().enumerate() {
            let row = &mut self.gram[off..off + r + 1];
            for (p, &ac) in row.iter_mut().zip(&a[..=r]) {
                *p += ar * ac;
            }
            self.xty[r] += ar * y;
            off += r + 1;
        }
        self.yty += y * y;
        self.n_rows += 1;
    }

    /// Componentwise sum with `other`.
    pub fn merge_from(&mut self, other: &GramSums) -> Result<()> {
        if self.dim != other.dim {
            return Err(FwlsError::dims("gram dimension", self.dim, other.dim));
        }
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        for (a, b) in self.xty.iter_mut().zip(&other.xty) {
            *a += b;
        }
        self.yty += other.yty;
        self.n_rows += other.n_rows;
        Ok(())
    }

    fn clear(&mut self) {
        self.gram.iter_mut().for_each(|v| *v = 0.0);
        self.xty.iter_mut().for_each(|v| *v = 0.0);
        self.yty = 0.0;
        self.n_rows = 0;
    }

    /// Heap bytes held by this accumulator.
    pub fn heap_bytes(&self) -> usize {
        (self.gram.capacity() + self.xty.capacity()) * std::mem::size_of::<f64>()
    }
}

/// Chunked accumulation: a chunk partial plus a running total, both `O(D²)`.
pub(crate) struct ChunkedAccumulator {
    total: GramSums,
    chunk: GramSums,
    in_chunk: usize,
}

impl ChunkedAccumulator {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            total: GramSums::new(dim),
            chunk: GramSums::new(dim),
            in_chunk: 0,
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, a: &[f64], y: f64) {
        self.chunk.add_row(a, y);
        self.in_chunk += 1;
        if self.in_chunk == CHUNK_ROWS {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if self.in_chunk > 0 {
            // dims always agree here
            let _ = self.total.merge_from(&self.chunk);
            self.chunk.clear();
            self.in_chunk = 0;
        }
    }

    pub(crate) fn finish(mut self) -> GramSums {
        self.flush();
        self.total
    }
}

/// One stacking row: model predictions `g`, meta-features `f`, target `y`.
pub trait AsRow {
    fn g(&self) -> &[f64];
    fn f(&self) -> &[f64];
    fn y(&self) -> f64;
}

/// Borrowed row.
#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    pub g: &'a [f64],
    pub f: &'a [f64],
    pub y: f64,
}

impl AsRow for Row<'_> {
    fn g(&self) -> &[f64] {
        self.g
    }
    fn f(&self) -> &[f64] {
        self.f
    }
    fn y(&self) -> f64 {
        self.y
    }
}

/// Owned row, for generated streams.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedRow {
    pub g: Vec<f64>,
    pub f: Vec<f64>,
    pub y: f64,
}

impl AsRow for OwnedRow {
    fn g(&self) -> &[f64] {
        &self.g
    }
    fn f(&self) -> &[f64] {
        &self.f
    }
    fn y(&self) -> f64 {
        self.y
    }
}

/// Random-access row provider for block-parallel accumulation.
pub trait RowSource: Sync {
    fn mapping(&self) -> DesignMapping;
    fn n_rows(&self) -> usize;
    /// Writes row `row` into `g` and `f` and returns its target.
    fn fill_row(&self, row: usize, g: &mut [f64], f: &mut [f64]) -> f64;
    /// Row id fingerprint, 0 when unknown.
    fn fingerprint(&self) -> u64 {
        0
    }
}

impl RowSource for StackedDataset {
    fn mapping(&self) -> DesignMapping {
        StackedDataset::mapping(self)
    }
    fn n_rows(&self) -> usize {
        StackedDataset::n_rows(self)
    }
    fn fill_row(&self, row: usize, g: &mut [f64], f: &mut [f64]) -> f64 {
        g.copy_from_slice(self.model_row(row));
        f.copy_from_slice(self.meta_row(row));
        self.target(row)
    }
    fn fingerprint(&self) -> u64 {
        StackedDataset::fingerprint(self)
    }
}

fn check_finite_row(index: usize, g: &[f64], f: &[f64], y: f64) -> Result<()> {
    let bad = |column: String| {
        Err(FwlsError::NonFinite {
            row: index,
            row_id: None,
            column,
        })
    };
    if !y.is_finite() {
        return bad("y".into());
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return bad(format!("g{}", i + 1));
    }
    if let Some(j) = f.iter().position(|v| !v.is_finite()) {
        return bad(format!("f{}", j + 1));
    }
    Ok(())
}

/// Persistent sufficient statistics of an FWLS regression.
#[derive(Debug, Clone, PartialEq)]
pub struct GramState {
    mapping: DesignMapping,
    sums: GramSums,
    fingerprint: u64,
}

impl GramState {
    pub fn new(mapping: DesignMapping) -> Self {
        Self {
            mapping,
            sums: GramSums::new(mapping.dim()),
            fingerprint: 0,
        }
    }

    pub(crate) fn from_sums(mapping: DesignMapping, sums: GramSums, fingerprint: u64) -> Self {
        debug_assert_eq!(mapping.dim(), sums.dim());
        Self {
            mapping,
            sums,
            fingerprint,
        }
    }

    pub fn mapping(&self) -> DesignMapping {
        self.mapping
    }

    pub fn dim(&self) -> usize {
        self.mapping.dim()
    }

    pub fn sums(&self) -> &GramSums {
        &self.sums
    }

    pub fn n_rows(&self) -> u64 {
        self.sums.n_rows
    }

    pub fn yty(&self) -> f64 {
        self.sums.yty
    }

    pub fn xty(&self) -> &[f64] {
        &self.sums.xty
    }

    pub fn gram_packed(&self) -> &[f64] {
        &self.sums.gram
    }

    pub fn gram_full(&self) -> Vec<f64> {
        self.sums.gram_full()
    }

    pub fn gram_at(&self, r: usize, c: usize) -> f64 {
        self.sums.gram_at(r, c)
    }

    pub fn gram_max_abs(&self) -> f64 {
        self.sums.gram_max_abs()
    }

    /// Row-id fingerprint of the accumulated stream (0 = unknown).
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn with_fingerprint(mut self, fingerprint: u64) -> Self {
        self.fingerprint = fingerprint;
        self
    }

    /// Heap bytes held by the state.
    pub fn heap_bytes(&self) -> usize {
        self.sums.heap_bytes()
    }

    /// Folds `rows` into the state. On error the state is left unchanged.
    pub fn accumulate<I>(&mut self, rows: I) -> Result<()>
    where
        I: IntoIterator,
        I::Item: AsRow,
    {
        let mut acc = ChunkedAccumulator::new(self.dim());
        let mut buf = vec![0.0; self.dim()];
        for (k, row) in rows.into_iter().enumerate() {
            let (g, f, y) = (row.g(), row.f(), row.y());
            self.mapping.check_lengths(g, f)?;
            check_finite_row(k, g, f, y)?;
            expand_row(g, f, &mut buf);
            acc.push(&buf, y);
        }
        self.absorb(acc.finish());
        Ok(())
    }

    /// Accumulates a whole dataset (sequentially) and records its
    /// fingerprint.
    pub fn from_dataset(ds: &StackedDataset) -> Self {
        let mut st = Self::new(ds.mapping());
        st.sums = accumulate_block(ds, 0..ds.n_rows());
        st.fingerprint = ds.fingerprint();
        st
    }

    fn absorb(&mut self, sums: GramSums) {
        if self.sums.n_rows == 0 {
            self.sums = sums;
        } else if sums.n_rows > 0 {
            let _ = self.sums.merge_from(&sums);
        }
    }

    /// Componentwise sum of two states over the same mapping.
    pub fn merge(&self, other: &GramState) -> Result<GramState> {
        if self.mapping != other.mapping {
            return Err(FwlsError::MappingMismatch {
                left_models: self.mapping.n_models(),
                left_features: self.mapping.n_features(),
                right_models: other.mapping.n_models(),
                right_features: other.mapping.n_features(),
            });
        }
        let mut out = self.clone();
        out.sums.merge_from(&other.sums)?;
        out.fingerprint = match (self.sums.n_rows, other.sums.n_rows) {
            (_, 0) => self.fingerprint,
            (0, _) => other.fingerprint,
            _ => 0,
        };
        Ok(out)
    }

    /// Checks the structural invariants: finite entries, non-negative
    /// diagonal, and positive semidefiniteness (Cholesky of `AᵀA + εI` with
    /// `ε = 1e-8 · max diag`).
    pub fn check_invariants(&self) -> Result<()> {
        let s = &self.sums;
        if s.gram.iter().chain(&s.xty).any(|v| !v.is_finite()) || !s.yty.is_finite() {
            return Err(FwlsError::InvalidArgument("gram state holds non-finite values".into()));
        }
        if s.yty < 0.0 {
            return Err(FwlsError::InvalidArgument("yᵀy is negative".into()));
        }
        let mut max_diag = 0.0_f64;
        for i in 0..s.dim {
            let d = s.gram[tri_offset(i) + i];
            if d < 0.0 {
                return Err(FwlsError::InvalidArgument(format!(
                    "gram diagonal entry {i} is negative ({d})"
                )));
            }
            max_diag = max_diag.max(d);
        }
        if max_diag > 0.0 && Cholesky::factor_packed(&s.gram, s.dim, 1e-8 * max_diag).is_none() {
            return Err(FwlsError::InvalidArgument(
                "gram matrix is not positive semidefinite".into(),
            ));
        }
        Ok(())
    }

    /// Splices a block of new product columns (from a new model or a new
    /// meta-feature) into the state, remapping to the canonical layout of
    /// the enlarged design.
    pub fn extend_columns(&self, block: &ColumnBlock) -> Result<GramState> {
        if block.old_mapping != self.mapping {
            return Err(FwlsError::MappingMismatch {
                left_models: self.mapping.n_models(),
                left_features: self.mapping.n_features(),
                right_models: block.old_mapping.n_models(),
                right_features: block.old_mapping.n_features(),
            });
        }
        if block.n_rows != self.n_rows() {
            return Err(FwlsError::RowCountMismatch {
                expected: self.n_rows(),
                actual: block.n_rows,
            });
        }
        let new_mapping = block.new_mapping();
        let d_new = new_mapping.dim();
        let sources = block.column_sources();
        let mut gram = vec![0.0; packed_len(d_new)];
        let mut xty = vec![0.0; d_new];
        for r in 0..d_new {
            xty[r] = match sources[r] {
                ColumnSource::Old(p) => self.sums.xty[p],
                ColumnSource::New(q) => block.xty[q],
            };
            let off = tri_offset(r);
            for c in 0..=r {
                gram[off + c] = match (sources[r], sources[c]) {
                    (ColumnSource::Old(p), ColumnSource::Old(q)) => self.sums.gram_at(p, q),
                    (ColumnSource::Old(p), ColumnSource::New(q))
                    | (ColumnSource::New(q), ColumnSource::Old(p)) => block.cross_at(q, p),
                    (ColumnSource::New(a), ColumnSource::New(b)) => block.corner_at(a, b),
                };
            }
        }
        Ok(GramState {
            mapping: new_mapping,
            sums: GramSums::from_parts(d_new, gram, xty, self.sums.yty, self.sums.n_rows),
            fingerprint: self.fingerprint,
        })
    }
}

/// Accumulates rows `range` of `src` with the chunked summation.
pub fn accumulate_block<S: RowSource + ?Sized>(src: &S, range: std::ops::Range<usize>) -> GramSums {
    let mapping = src.mapping();
    let mut g = vec![0.0; mapping.n_models()];
    let mut f = vec![0.0; mapping.n_features()];
    let mut buf = vec![0.0; mapping.dim()];
    let mut acc = ChunkedAccumulator::new(mapping.dim());
    for r in range {
        let y = src.fill_row(r, &mut g, &mut f);
        expand_row(&g, &f, &mut buf);
        acc.push(&buf, y);
    }
    acc.finish()
}

/// Contiguous row blocks, one per worker: block `w` is
/// `[w·N/W, (w+1)·N/W)`. Empty blocks are dropped.
pub fn partition_plan(n_rows: usize, n_workers: usize) -> Vec<std::ops::Range<usize>> {
    let w = n_workers.max(1);
    (0..w)
        .map(|k| (k * n_rows / w)..((k + 1) * n_rows / w))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Accumulates `src` on `n_workers` contiguous blocks and merges them in
/// block order. Rows are assumed finite (datasets validate on ingestion).
pub fn parallel_accumulate<S: RowSource + ?Sized>(src: &S, n_workers: usize) -> Result<GramState> {
    if n_workers == 0 {
        return Err(FwlsError::InvalidArgument("n_workers must be at least 1".into()));
    }
    let mapping = src.mapping();
    let plan = partition_plan(src.n_rows(), n_workers);
    let partials = run_blocks(src, &plan, n_workers)?;
    let mut total = GramSums::new(mapping.dim());
    let mut first = true;
    for p in partials {
        if first {
            total = p;
            first = false;
        } else {
            total.merge_from(&p)?;
        }
    }
    Ok(GramState::from_sums(mapping, total, src.fingerprint()))
}

#[cfg(feature = "parallel")]
fn run_blocks<S: RowSource + ?Sized>(
    src: &S,
    plan: &[std::ops::Range<usize>],
    n_workers: usize,
) -> Result<Vec<GramSums>> {
    use rayon::prelude::*;
    if plan.len() <= 1 {
        return Ok(plan.iter().map(|r| accumulate_block(src, r.clone())).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n_workers)
        .build()
        .map_err(|e| FwlsError::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(|| {
        plan.par_iter()
            .map(|r| accumulate_block(src, r.clone()))
            .collect()
    }))
}

#[cfg(not(feature = "parallel"))]
fn run_blocks<S: RowSource + ?Sized>(
    src: &S,
    plan: &[std::ops::Range<usize>],
    _n_workers: usize,
) -> Result<Vec<GramSums>> {
    Ok(plan.iter().map(|r| accumulate_block(src, r.clone())).collect())
}

/// What a [`ColumnBlock`] adds to the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtensionKind {
    /// One more model: `M` new columns `f_j · g_new`.
    NewModel,
    /// One more meta-feature: `L` new columns `g_i · f_new`.
    NewFeature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ColumnSource {
    Old(usize),
    New(usize),
}

/// The entries of `AᵀA` and `Aᵀy` that involve a new model or meta-feature:
/// cross products with the existing columns, the new-by-new corner, and the
/// new part of `Aᵀy`. New columns are numbered by the other index (meta-
/// feature for a new model, model for a new meta-feature).
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnBlock {
    kind: ExtensionKind,
    old_mapping: DesignMapping,
    /// `k × D_old`, row `q` holds `Σ a_new[q] · a_old`.
    cross: Vec<f64>,
    /// packed lower triangle, `k × k`
    corner: Vec<f64>,
    xty: Vec<f64>,
    n_rows: u64,
    multiply_adds: u64,
}

impl ColumnBlock {
    pub fn kind(&self) -> ExtensionKind {
        self.kind
    }

    pub fn old_mapping(&self) -> DesignMapping {
        self.old_mapping
    }

    pub fn n_rows(&self) -> u64 {
        self.n_rows
    }

    /// Number of new columns.
    pub fn width(&self) -> usize {
        self.xty.len()
    }

    /// Multiply-adds spent on cross and corner entries.
    pub fn multiply_adds(&self) -> u64 {
        self.multiply_adds
    }

    pub fn new_mapping(&self) -> DesignMapping {
        let (l, m) = (self.old_mapping.n_models(), self.old_mapping.n_features());
        match self.kind {
            ExtensionKind::NewModel => DesignMapping::new(l + 1, m),
            ExtensionKind::NewFeature => DesignMapping::new(l, m + 1),
        }
        .expect("enlarged mapping is non-empty")
    }

    pub fn cross_at(&self, new_col: usize, old_col: usize) -> f64 {
        self.cross[new_col * self.old_mapping.dim() + old_col]
    }

    pub fn corner_at(&self, a: usize, b: usize) -> f64 {
        self.corner[packed_index(a, b)]
    }

    pub fn new_xty(&self) -> &[f64] {
        &self.xty
    }

    /// Where each column of the enlarged canonical layout comes from.
    pub(crate) fn column_sources(&self) -> Vec<ColumnSource> {
        let old_l = self.old_mapping.n_models();
        let old_m = self.old_mapping.n_features();
        let new = self.new_mapping();
        (0..new.dim())
            .map(|c| {
                let (i, j) = (c % new.n_models(), c / new.n_models());
                match self.kind {
                    ExtensionKind::NewModel if i == old_l => ColumnSource::New(j),
                    ExtensionKind::NewFeature if j == old_m => ColumnSource::New(i),
                    _ => ColumnSource::Old(j * old_l + i),
                }
            })
            .collect()
    }
}

/// Streams rows of the original data together with the new column and
/// accumulates only the entries that involve the new column.
pub struct ColumnBlockBuilder {
    block: ColumnBlock,
    old: Vec<f64>,
    new: Vec<f64>,
}

impl ColumnBlockBuilder {
    pub fn new(old_mapping: DesignMapping, kind: ExtensionKind) -> Self {
        let k = match kind {
            ExtensionKind::NewModel => old_mapping.n_features(),
            ExtensionKind::NewFeature => old_mapping.n_models(),
        };
        let d = old_mapping.dim();
        Self {
            block: ColumnBlock {
                kind,
                old_mapping,
                cross: vec![0.0; k * d],
                corner: vec![0.0; packed_len(k)],
                xty: vec![0.0; k],
                n_rows: 0,
                multiply_adds: 0,
            },
            old: vec![0.0; d],
            new: vec![0.0; k],
        }
    }

    /// Adds one row: the original `g`, `f`, `y` and the new model prediction
    /// or meta-feature value for that row.
    pub fn push(&mut self, g: &[f64], f: &[f64], new_value: f64, y: f64) -> Result<()> {
        let b = &mut self.block;
        b.old_mapping.check_lengths(g, f)?;
        check_finite_row(b.n_rows as usize, g, f, y)?;
        if !new_value.is_finite() {
            return Err(FwlsError::NonFinite {
                row: b.n_rows as usize,
                row_id: None,
                column: "new column".into(),
            });
        }
        expand_row(g, f, &mut self.old);
        let other = match b.kind {
            ExtensionKind::NewModel => f,
            ExtensionKind::NewFeature => g,
        };
        for (n, &o) in self.new.iter_mut().zip(other) {
            *n = o * new_value;
        }
        let d = self.old.len();
        let k = self.new.len();
        for (q, &nq) in self.new.iter().enumerate() {
            let row = &mut b.cross[q * d..(q + 1) * d];
            for (p, &a) in row.iter_mut().zip(&self.old) {
                *p += nq * a;
            }
            let off = tri_offset(q);
            for (p, &nc) in b.corner[off..off + q + 1].iter_mut().zip(&self.new[..=q]) {
                *p += nq * nc;
            }
            b.xty[q] += nq * y;
        }
        b.n_rows += 1;
        b.multiply_adds += (k * d + packed_len(k)) as u64;
        Ok(())
    }

    pub fn finish(self) -> ColumnBlock {
        self.block
    }
}
