//! Banded LU with partial pivoting, LAPACK-style storage.
//!
//! Each string of the array contributes a narrow banded diagonal block to the
//! Newton matrix; the string currents and the terminal voltage couple those
//! blocks through a low-rank border. The blocks are factored here, the border
//! is handled by a dense Schur complement in the solver.

/// Band matrix with `kl` subdiagonals and `ku` superdiagonals. Storage keeps
/// `kl` extra superdiagonal rows so row swaps during pivoting have room to
/// fill in.
#[derive(Debug, Clone)]
pub(crate) struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    /// Row-major band storage: entry (i, j) lives at
    /// `data[(kl + ku + i - j) * n + j]` for `j - ku - kl <= i <= j + kl`.
    data: Vec<f64>,
}

/// Factored form of a [`BandMatrix`].
#[derive(Debug, Clone)]
pub(crate) struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>,
    ipiv: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SingularBand {
    pub column: usize,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Self {
            n,
            kl,
            ku,
            data: vec![0.0; (2 * kl + ku + 1) * n],
        }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(i + self.ku + self.kl >= j && i <= j + self.kl, "({i},{j}) outside band");
        (self.kl + self.ku + i - j) * self.n + j
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    /// In-place LU with partial pivoting.
    pub fn factor(mut self) -> Result<BandLu, SingularBand> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            // Pivot search down the column.
            let mut jp = 0;
            let mut best = self.data[(kl + ku) * n + j].abs();
            for p in 1..=km {
                let v = self.data[(kl + ku + p) * n + j].abs();
                if v > best {
                    best = v;
                    jp = p;
                }
            }
            ipiv[j] = j + jp;
            if best == 0.0 {
                return Err(SingularBand { column: j });
            }
            let jend = (j + ku + kl).min(n - 1);
            if jp != 0 {
                for col in j..=jend {
                    let a = (kl + ku + j - col) * n + col;
                    let b = (kl + ku + j + jp - col) * n + col;
                    self.data.swap(a, b);
                }
            }
            let piv = self.data[(kl + ku) * n + j];
            for p in 1..=km {
                self.data[(kl + ku + p) * n + j] /= piv;
            }
            for col in (j + 1)..=jend {
                let u = self.data[(kl + ku + j - col) * n + col];
                if u != 0.0 {
                    for p in 1..=km {
                        self.data[(kl + ku + j + p - col) * n + col] -=
                            self.data[(kl + ku + p) * n + j] * u;
                    }
                }
            }
        }
        Ok(BandLu {
            n,
            kl,
            ku,
            data: self.data,
            ipiv,
        })
    }
}

impl BandLu {
    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        debug_assert_eq!(rhs.len(), n);
        for j in 0..n {
            if self.ipiv[j] != j {
                rhs.swap(j, self.ipiv[j]);
            }
            let km = kl.min(n - 1 - j);
            let bj = rhs[j];
            if bj != 0.0 {
                for p in 1..=km {
                    rhs[j + p] -= self.data[(kl + ku + p) * n + j] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            rhs[j] /= self.data[(kl + ku) * n + j];
            let xj = rhs[j];
            if xj != 0.0 {
                let top = j.saturating_sub(ku + kl);
                for i in top..j {
                    rhs[i] -= self.data[(kl + ku + i - j) * n + j] * xj;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_banded(rng: &mut impl Rng, n: usize, kl: usize, ku: usize) -> (BandMatrix, DMatrix<f64>) {
        let mut band = BandMatrix::zeros(n, kl, ku);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if j + kl >= i && i + ku >= j {
                    let v: f64 = rng.random_range(-1.0..1.0)
                        + if i == j { 2.0 * (rng.random_range(0..2) as f64) - 1.0 } else { 0.0 };
                    band.add(i, j, v);
                    dense[(i, j)] = v;
                }
            }
        }
        (band, dense)
    }

    #[test]
    fn matches_dense_lu_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let kl = rng.random_range(0..3.min(n));
            let ku = rng.random_range(0..3.min(n));
            let (band, dense) = random_banded(&mut rng, n, kl, ku);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let lu = match band.factor() {
                Ok(lu) => lu,
                Err(_) => continue,
            };
            let mut x = b.clone();
            lu.solve_in_place(&mut x);
            let residual = &dense * DVector::from_vec(x) - DVector::from_vec(b);
            let scale = dense.amax().max(1.0);
            assert!(
                residual.amax() <= 1e-9 * scale,
                "band solve residual {} for n={n} kl={kl} ku={ku}",
                residual.amax()
            );
        }
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        // [[0, 1], [1, 0]] has zero diagonal but is well-conditioned.
        let mut band = BandMatrix::zeros(2, 1, 1);
        band.add(0, 1, 1.0);
        band.add(1, 0, 1.0);
        let lu = band.factor().expect("factorable");
        let mut x = vec![3.0, 7.0];
        lu.solve_in_place(&mut x);
        assert_eq!(x, vec![7.0, 3.0]);
    }

    #[test]
    fn reports_singularity() {
        let mut band = BandMatrix::zeros(2, 1, 1);
        band.add(0, 0, 1.0);
        band.add(1, 0, 2.0);
        // Column 1 entirely zero.
        assert_eq!(band.factor().unwrap_err(), SingularBand { column: 1 });
    }
}
