//! Small dense kernels for symmetric positive-definite systems. Matrices are
//! row-major `Vec<f64>`; symmetric matrices in packed storage keep the lower
//! triangle row by row (`(r, c)` with `c <= r` at `r(r+1)/2 + c`).

#[inline]
pub(crate) fn tri_offset(row: usize) -> usize {
    row * (row + 1) / 2
}

#[inline]
pub(crate) fn packed_index(r: usize, c: usize) -> usize {
    if c <= r {
        tri_offset(r) + c
    } else {
        tri_offset(c) + r
    }
}

pub(crate) fn packed_len(dim: usize) -> usize {
    tri_offset(dim)
}

/// Expands a packed lower triangle into a full symmetric row-major matrix.
pub fn unpack_symmetric(packed: &[f64], dim: usize) -> Vec<f64> {
    let mut full = vec![0.0; dim * dim];
    for r in 0..dim {
        let off = tri_offset(r);
        for c in 0..=r {
            let v = packed[off + c];
            full[r * dim + c] = v;
            full[c * dim + r] = v;
        }
    }
    full
}

/// Full symmetric matrix times vector, reading only the packed triangle.
pub(crate) fn packed_matvec(packed: &[f64], dim: usize, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for r in 0..dim {
        let row = &packed[tri_offset(r)..tri_offset(r) + r + 1];
        let mut acc = 0.0;
        for (c, &v) in row.iter().enumerate() {
            acc += v * x[c];
            if c != r {
                out[c] += v * x[r];
            }
        }
        out[r] += acc;
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factors the symmetric matrix given as a packed lower triangle plus a
    /// diagonal shift. Returns `None` when a pivot is not safely positive
    /// (relative to the largest diagonal entry), i.e. the shifted matrix is
    /// numerically singular or indefinite.
    pub fn factor_packed(packed: &[f64], dim: usize, shift: f64) -> Option<Self> {
        let mut l = vec![0.0; packed_len(dim)];
        let max_diag = (0..dim)
            .map(|i| packed[tri_offset(i) + i] + shift)
            .fold(0.0_f64, f64::max);
        if !(max_diag > 0.0) || !max_diag.is_finite() {
            return None;
        }
        let floor = max_diag * dim as f64 * f64::EPSILON;
        for r in 0..dim {
            let ro = tri_offset(r);
            for c in 0..=r {
                let co = tri_offset(c);
                let mut s = packed[ro + c];
                if c == r {
                    s += shift;
                }
                let (lr, lc) = (&l[ro..ro + c], &l[co..co + c]);
                s -= lr.iter().zip(lc).map(|(a, b)| a * b).sum::<f64>();
                if c == r {
                    if !(s > floor) || !s.is_finite() {
                        return None;
                    }
                    l[ro + r] = s.sqrt();
                } else {
                    l[ro + c] = s / l[co + c];
                }
            }
        }
        Some(Self { dim, l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        // L y = b
        for r in 0..n {
            let ro = tri_offset(r);
            let s: f64 = self.l[ro..ro + r].iter().zip(&b[..r]).map(|(a, x)| a * x).sum();
            b[r] = (b[r] - s) / self.l[ro + r];
        }
        // Lᵀ x = y
        for r in (0..n).rev() {
            let mut s = b[r];
            for k in r + 1..n {
                s -= self.l[tri_offset(k) + r] * b[k];
            }
            b[r] = s / self.l[tri_offset(r) + r];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Explicit inverse as a full symmetric row-major matrix.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[c] = 1.0;
            self.solve_in_place(&mut e);
            for r in 0..n {
                inv[r * n + c] = e[r];
            }
        }
        // exact symmetry
        for r in 0..n {
            for c in 0..r {
                let v = 0.5 * (inv[r * n + c] + inv[c * n + r]);
                inv[r * n + c] = v;
                inv[c * n + r] = v;
            }
        }
        inv
    }
}
