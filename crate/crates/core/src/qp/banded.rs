//! Cholesky factorization of symmetric positive-definite band matrices.
//!
//! Storage is row-wise lower band: `band[i * (b + 1) + (b - (i - j))]` holds
//! `L[i][j]` for `i - b <= j <= i`.

use nalgebra::DMatrix;

#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedCholesky {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (self.bw + j - i)
    }

    /// Factors the band of `m` (entries farther than `bw` from the diagonal are
    /// ignored). Returns `None` if `m` is not positive definite.
    pub fn factor(m: &DMatrix<f64>, bw: usize) -> Option<Self> {
        let n = m.nrows();
        let mut f = BandedCholesky {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        };
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = m[(i, j)];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= f.band[f.idx(i, k)] * f.band[f.idx(j, k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    let id = f.idx(i, i);
                    f.band[id] = s.sqrt();
                } else {
                    let id = f.idx(i, j);
                    f.band[id] = s / f.band[f.idx(j, j)];
                }
            }
        }
        Some(f)
    }

    /// Solves `L Lᵀ x = b` in place.
    pub fn solve_mut(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[self.idx(i, k)] * b[k];
            }
            b[i] = s / self.band[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n.min(i + bw + 1) {
                s -= self.band[self.idx(k, i)] * b[k];
            }
            b[i] = s / self.band[self.idx(i, i)];
        }
    }
}

/// Half-bandwidth of the nonzero pattern of a square matrix.
pub fn bandwidth(m: &DMatrix<f64>) -> usize {
    let mut bw = 0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if m[(i, j)] != 0.0 {
                bw = bw.max(i.abs_diff(j));
            }
        }
    }
    bw
}
