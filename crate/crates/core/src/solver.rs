//! Ridge (Tikhonov) solves of `(AᵀA + λI) v = Aᵀy` from accumulated
//! sufficient statistics, training RMSE without revisiting rows, and the
//! incremental paths: Sherman-Morrison rank-one updates for new rows and
//! bordered inverse updates for new columns.

use crate::design::{dot, expand_row, BlendCoefficients, DesignMapping};
use crate::error::{FwlsError, Result};
use crate::gram::{ColumnBlock, ColumnSource, GramState, GramSums};
use crate::linalg::{packed_matvec, Cholesky};

/// Default ridge parameter.
pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Jitter levels (relative to `trace(AᵀA)/D`) tried when `λ = 0` is singular.
pub const JITTER_LEVELS: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Slack below zero tolerated in the residual energy before clamping.
pub const RESIDUAL_CLAMP: f64 = 1e-10;

/// Minimum Sherman-Morrison denominator `1 + aᵀ K a`.
pub const MIN_SM_DENOMINATOR: f64 = 1e-12;

/// Solution of a ridge system on a plain [`GramSums`].
#[derive(Debug, Clone)]
pub struct RidgeSolution {
    pub v: Vec<f64>,
    /// `λ` plus any jitter that was needed.
    pub effective_lambda: f64,
    pub jitter: Option<f64>,
    pub factor: Cholesky,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(FwlsError::InvalidArgument(format!(
            "lambda must be a finite non-negative number, got {lambda}"
        )));
    }
    Ok(())
}

/// Factors `AᵀA + λI`, escalating through [`JITTER_LEVELS`] when `λ = 0`
/// and the plain system is singular.
fn factor_with_jitter(sums: &GramSums, lambda: f64) -> Result<(Cholesky, f64, Option<f64>)> {
    let d = sums.dim();
    if let Some(f) = Cholesky::factor_packed(sums.gram_packed(), d, lambda) {
        return Ok((f, lambda, None));
    }
    if lambda == 0.0 {
        let base = sums.trace() / d as f64;
        for level in JITTER_LEVELS {
            let jitter = level * base;
            if jitter > 0.0 {
                if let Some(f) = Cholesky::factor_packed(sums.gram_packed(), d, jitter) {
                    return Ok((f, jitter, Some(jitter)));
                }
            }
        }
    }
    Err(FwlsError::Singular { lambda })
}

/// Solves the ridge system for an arbitrary design, with one step of
/// iterative refinement.
pub fn solve_sums(sums: &GramSums, lambda: f64) -> Result<RidgeSolution> {
    check_lambda(lambda)?;
    if sums.n_rows() == 0 {
        return Err(FwlsError::InvalidArgument("cannot solve with zero accumulated rows".into()));
    }
    let (factor, effective_lambda, jitter) = factor_with_jitter(sums, lambda)?;
    let mut v = factor.solve(sums.xty());
    // refinement: r = b - (G + λI) v
    let d = sums.dim();
    let mut r = vec![0.0; d];
    packed_matvec(sums.gram_packed(), d, &v, &mut r);
    for ((ri, bi), vi) in r.iter_mut().zip(sums.xty()).zip(&v) {
        *ri = bi - (*ri + effective_lambda * vi);
    }
    factor.solve_in_place(&mut r);
    for (vi, di) in v.iter_mut().zip(&r) {
        *vi += di;
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(FwlsError::Singular { lambda });
    }
    Ok(RidgeSolution {
        v,
        effective_lambda,
        jitter,
        factor,
    })
}

/// `‖(AᵀA + λI) v − Aᵀy‖₂ / ‖Aᵀy‖₂`.
pub fn relative_residual(sums: &GramSums, v: &[f64], lambda: f64) -> f64 {
    let d = sums.dim();
    let mut r = vec![0.0; d];
    packed_matvec(sums.gram_packed(), d, v, &mut r);
    let num: f64 = r
        .iter()
        .zip(sums.xty())
        .zip(v)
        .map(|((gv, b), vi)| (gv + lambda * vi - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let den = sums.xty().iter().map(|b| b * b).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Mean squared residual from sufficient statistics:
/// `(yᵀy − 2vᵀAᵀy + vᵀAᵀAv) / N`.
pub fn sums_mse(sums: &GramSums, v: &[f64]) -> Result<f64> {
    if v.len() != sums.dim() {
        return Err(FwlsError::dims("coefficient vector", sums.dim(), v.len()));
    }
    if sums.n_rows() == 0 {
        return Err(FwlsError::InvalidArgument("no accumulated rows".into()));
    }
    let mut gv = vec![0.0; sums.dim()];
    packed_matvec(sums.gram_packed(), sums.dim(), v, &mut gv);
    let energy = sums.yty() - 2.0 * dot(v, sums.xty()) + dot(v, &gv);
    let mse = energy / sums.n_rows() as f64;
    if mse >= 0.0 {
        Ok(mse)
    } else if mse >= -RESIDUAL_CLAMP {
        Ok(0.0)
    } else {
        Err(FwlsError::NegativeResidual { value: mse })
    }
}

/// A solved blend: coefficients, the regularization actually applied, the
/// in-sample RMSE and the factorization for later reuse.
#[derive(Debug, Clone)]
pub struct SolvedBlend {
    pub coeffs: BlendCoefficients,
    /// Requested `λ`.
    pub lambda: f64,
    /// `λ` including jitter.
    pub effective_lambda: f64,
    pub jitter: Option<f64>,
    pub train_rmse: f64,
    pub factor_cache: Option<Cholesky>,
}

pub fn solve(gs: &GramState, lambda: f64) -> Result<SolvedBlend> {
    let sol = solve_sums(gs.sums(), lambda)?;
    let coeffs = BlendCoefficients::new(gs.mapping(), sol.v, lambda)?;
    let train_rmse = sums_mse(gs.sums(), coeffs.as_slice())?.sqrt();
    Ok(SolvedBlend {
        coeffs,
        lambda,
        effective_lambda: sol.effective_lambda,
        jitter: sol.jitter,
        train_rmse,
        factor_cache: Some(sol.factor),
    })
}

/// In-sample RMSE of `coeffs` computed from the sufficient statistics alone.
pub fn training_rmse(gs: &GramState, coeffs: &BlendCoefficients) -> Result<f64> {
    if coeffs.mapping() != gs.mapping() {
        return Err(FwlsError::MappingMismatch {
            left_models: gs.mapping().n_models(),
            left_features: gs.mapping().n_features(),
            right_models: coeffs.mapping().n_models(),
            right_features: coeffs.mapping().n_features(),
        });
    }
    Ok(sums_mse(gs.sums(), coeffs.as_slice())?.sqrt())
}

/// Explicit inverse `K = (AᵀA + λI)⁻¹` with `Aᵀy`, kept for `O(D²)` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseState {
    mapping: DesignMapping,
    /// full symmetric `D × D`, row-major
    inv: Vec<f64>,
    xty: Vec<f64>,
    lambda: f64,
    n_rows: u64,
    scratch: Vec<f64>,
}

impl InverseState {
    /// Inverts `AᵀA + λI` of `gs`. Fails with [`FwlsError::Singular`] when the
    /// shifted system is not positive definite (no jitter on this path).
    pub fn from_gram(gs: &GramState, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let f = Cholesky::factor_packed(gs.gram_packed(), gs.dim(), lambda)
            .ok_or(FwlsError::Singular { lambda })?;
        Ok(Self::from_factor(gs, &f, lambda))
    }

    /// Reuses the factorization cached by [`solve`].
    pub fn from_solved(gs: &GramState, solved: &SolvedBlend) -> Result<Self> {
        match &solved.factor_cache {
            Some(f) if f.dim() == gs.dim() => Ok(Self::from_factor(gs, f, solved.effective_lambda)),
            _ => Self::from_gram(gs, solved.effective_lambda),
        }
    }

    fn from_factor(gs: &GramState, f: &Cholesky, lambda: f64) -> Self {
        Self {
            mapping: gs.mapping(),
            inv: f.inverse(),
            xty: gs.xty().to_vec(),
            lambda,
            n_rows: gs.n_rows(),
            scratch: vec![0.0; gs.dim()],
        }
    }

    pub fn mapping(&self) -> DesignMapping {
        self.mapping
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_rows(&self) -> u64 {
        self.n_rows
    }

    pub fn inverse(&self) -> &[f64] {
        &self.inv
    }

    pub fn xty(&self) -> &[f64] {
        &self.xty
    }

    /// `v = K Aᵀy`.
    pub fn coefficients(&self) -> Vec<f64> {
        let d = self.mapping.dim();
        (0..d).map(|r| dot(&self.inv[r * d..(r + 1) * d], &self.xty)).collect()
    }

    pub fn blend(&self) -> Result<BlendCoefficients> {
        BlendCoefficients::new(self.mapping, self.coefficients(), self.lambda)
    }

    /// Adds one data row with the Sherman-Morrison identity
    /// `K' = K − (K a)(K a)ᵀ / (1 + aᵀ K a)`, `a` being the row's products.
    pub fn add_datapoint(&mut self, g: &[f64], f: &[f64], y: f64) -> Result<()> {
        self.mapping.check_lengths(g, f)?;
        if !y.is_finite() || g.iter().chain(f).any(|v| !v.is_finite()) {
            return Err(FwlsError::NonFinite {
                row: self.n_rows as usize,
                row_id: None,
                column: "update row".into(),
            });
        }
        let d = self.mapping.dim();
        let mut a = vec![0.0; d];
        expand_row(g, f, &mut a);
        let ka = &mut self.scratch;
        for (r, out) in ka.iter_mut().enumerate() {
            *out = dot(&self.inv[r * d..(r + 1) * d], &a);
        }
        let denom = 1.0 + dot(&a, ka);
        if !(denom > MIN_SM_DENOMINATOR) || !denom.is_finite() {
            return Err(FwlsError::DegenerateUpdate { denominator: denom });
        }
        for r in 0..d {
            let s = ka[r] / denom;
            if s == 0.0 {
                continue;
            }
            // lower triangle then mirror keeps K exactly symmetric
            for c in 0..=r {
                self.inv[r * d + c] -= s * ka[c];
            }
        }
        for r in 0..d {
            for c in 0..r {
                self.inv[c * d + r] = self.inv[r * d + c];
            }
        }
        for (x, ai) in self.xty.iter_mut().zip(&a) {
            *x += ai * y;
        }
        self.n_rows += 1;
        Ok(())
    }

    /// Grows the inverse by the columns of `block` one at a time (bordering),
    /// then permutes into the enlarged canonical layout. `O(D² k)` for `k`
    /// new columns instead of a fresh `O(D³)` inversion.
    pub fn extend_columns(&self, block: &ColumnBlock) -> Result<InverseState> {
        if block.old_mapping() != self.mapping {
            return Err(FwlsError::MappingMismatch {
                left_models: self.mapping.n_models(),
                left_features: self.mapping.n_features(),
                right_models: block.old_mapping().n_models(),
                right_features: block.old_mapping().n_features(),
            });
        }
        if block.n_rows() != self.n_rows {
            return Err(FwlsError::RowCountMismatch {
                expected: self.n_rows,
                actual: block.n_rows(),
            });
        }
        let d_old = self.mapping.dim();
        let k = block.width();
        // working order: old columns, then new columns 0..k
        let mut inv = self.inv.clone();
        let mut n = d_old;
        for q in 0..k {
            // b = column of the new entry against everything so far
            let b: Vec<f64> = (0..n)
                .map(|p| {
                    if p < d_old {
                        block.cross_at(q, p)
                    } else {
                        block.corner_at(q, p - d_old)
                    }
                })
                .collect();
            let c = block.corner_at(q, q) + self.lambda;
            let w: Vec<f64> = (0..n).map(|r| dot(&inv[r * n..(r + 1) * n], &b)).collect();
            let schur = c - dot(&b, &w);
            if !(schur > MIN_SM_DENOMINATOR * c.abs().max(1.0)) {
                return Err(FwlsError::DegenerateUpdate { denominator: schur });
            }
            let m = n + 1;
            let mut grown = vec![0.0; m * m];
            for r in 0..n {
                for cc in 0..n {
                    grown[r * m + cc] = inv[r * n + cc] + w[r] * w[cc] / schur;
                }
                grown[r * m + n] = -w[r] / schur;
                grown[n * m + r] = -w[r] / schur;
            }
            grown[n * m + n] = 1.0 / schur;
            inv = grown;
            n = m;
        }
        // permute working order -> canonical
        let sources = block.column_sources();
        let pos = |s: ColumnSource| match s {
            ColumnSource::Old(p) => p,
            ColumnSource::New(q) => d_old + q,
        };
        let d_new = sources.len();
        let mut out = vec![0.0; d_new * d_new];
        for (r, &sr) in sources.iter().enumerate() {
            let pr = pos(sr);
            for (c, &sc) in sources.iter().enumerate() {
                out[r * d_new + c] = inv[pr * n + pos(sc)];
            }
        }
        let xty = sources
            .iter()
            .map(|&s| match s {
                ColumnSource::Old(p) => self.xty[p],
                ColumnSource::New(q) => block.new_xty()[q],
            })
            .collect();
        Ok(InverseState {
            mapping: block.new_mapping(),
            inv: out,
            xty,
            lambda: self.lambda,
            n_rows: self.n_rows,
            scratch: vec![0.0; d_new],
        })
    }
}
