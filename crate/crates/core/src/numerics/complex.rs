//! Dense complex matrices for the non-differentiable solvers.

use super::NumericsError;
pub use num_complex::Complex64 as C64;

/// Largest accepted condition estimate for [`ComplexMatrix::solve_hpd`].
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn column(v: &[C64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn row_vector(v: &[C64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    /// Square diagonal matrix with `v` on the diagonal.
    pub fn diag(v: &[C64]) -> Self {
        let n = v.len();
        let mut m = Self::zeros(n, n);
        for (i, &x) in v.iter().enumerate() {
            m.data[i * n + i] = x;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[C64]) {
        for (r, &x) in v.iter().enumerate() {
            self.set(r, c, x);
        }
    }

    pub fn mul(&self, other: &ComplexMatrix) -> Result<ComplexMatrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "complex_mul",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.data[i * self.cols + p];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                let brow = other.row(p);
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn hermitian(&self) -> ComplexMatrix {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn scale(&self, s: C64) -> ComplexMatrix {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &ComplexMatrix) -> Result<ComplexMatrix, NumericsError> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(NumericsError::ShapeMismatch {
                op: "complex_add",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn frob_norm_sqr(&self) -> f64 {
        self.data.iter().map(|x| x.norm_sqr()).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sqr().sqrt()
    }

    /// Lower Cholesky factor of a Hermitian positive-definite matrix. Only
    /// the lower triangle of `self` is read.
    pub fn cholesky(&self) -> Result<ComplexMatrix, NumericsError> {
        if self.rows != self.cols {
            return Err(NumericsError::ShapeMismatch {
                op: "cholesky",
                lhs: vec![self.rows, self.cols],
                rhs: vec![self.cols, self.rows],
            });
        }
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self.get(j, j).re;
            for p in 0..j {
                d -= l.get(j, p).norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(NumericsError::IllConditioned {
                    estimate: f64::INFINITY,
                });
            }
            let ljj = d.sqrt();
            l.set(j, j, C64::new(ljj, 0.0));
            for i in j + 1..n {
                let mut s = self.get(i, j);
                for p in 0..j {
                    s -= l.get(i, p) * l.get(j, p).conj();
                }
                l.set(i, j, s / ljj);
            }
        }
        Ok(l)
    }

    /// Solve `A x = b` for Hermitian positive-definite `A` (self). `b` may
    /// have several columns. Rejects systems whose condition estimate
    /// `(max L_ii / min L_ii)^2` exceeds [`MAX_CONDITION`].
    pub fn solve_hpd(&self, b: &ComplexMatrix) -> Result<ComplexMatrix, NumericsError> {
        if b.rows != self.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "solve_hpd",
                lhs: vec![self.rows, self.cols],
                rhs: vec![b.rows, b.cols],
            });
        }
        let l = self.cholesky()?;
        let n = self.rows;
        let diag: Vec<f64> = (0..n).map(|i| l.get(i, i).re).collect();
        let hi = diag.iter().cloned().fold(0.0, f64::max);
        let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let estimate = (hi / lo).powi(2);
        if estimate > MAX_CONDITION {
            return Err(NumericsError::IllConditioned { estimate });
        }
        let mut x = b.clone();
        for c in 0..b.cols {
            // forward: L y = b
            for i in 0..n {
                let mut s = x.get(i, c);
                for p in 0..i {
                    s -= l.get(i, p) * x.get(p, c);
                }
                x.set(i, c, s / diag[i]);
            }
            // backward: L^H x = y
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for p in i + 1..n {
                    s -= l.get(p, i).conj() * x.get(p, c);
                }
                x.set(i, c, s / diag[i]);
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix {
        ComplexMatrix::from_fn(rows, cols, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn diag_times_ones() {
        let d = ComplexMatrix::diag(&[c(1.0, 0.0), c(0.0, 1.0)]);
        let ones = ComplexMatrix::column(&[c(1.0, 0.0), c(1.0, 0.0)]);
        assert_eq!(d.mul(&ones).unwrap().data(), &[c(1.0, 0.0), c(0.0, 1.0)]);
    }

    #[test]
    fn hermitian_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 5, &mut rng);
        assert_eq!(a.hermitian().hermitian(), a);
    }

    #[test]
    fn solve_scaled_identity() {
        let a = ComplexMatrix::identity(3).scale(c(2.0, 0.0));
        let b = ComplexMatrix::column(&[c(1.0, 2.0), c(-3.0, 0.5), c(0.0, 4.0)]);
        let x = a.solve_hpd(&b).unwrap();
        for (xi, bi) in x.data().iter().zip(b.data()) {
            assert!((xi - bi / 2.0).norm() < 1e-15);
        }
    }

    #[test]
    fn solve_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let b0 = random(6, 6, &mut rng);
            let a = b0.mul(&b0.hermitian()).unwrap().add(&ComplexMatrix::identity(6)).unwrap();
            let b = random(6, 2, &mut rng);
            let x = a.solve_hpd(&b).unwrap();
            let r = a.mul(&x).unwrap().add(&b.scale(c(-1.0, 0.0))).unwrap();
            assert!(r.frob_norm() / b.frob_norm() < 1e-10);
        }
    }

    #[test]
    fn ill_conditioned_rejected() {
        let a = ComplexMatrix::diag(&[c(1.0, 0.0), c(1e-14, 0.0)]);
        let b = ComplexMatrix::column(&[c(1.0, 0.0), c(1.0, 0.0)]);
        assert!(matches!(a.solve_hpd(&b), Err(NumericsError::IllConditioned { .. })));
        let singular = ComplexMatrix::zeros(2, 2);
        assert!(singular.solve_hpd(&b).is_err());
    }

    #[test]
    fn mul_shape_error() {
        let a = ComplexMatrix::zeros(2, 3);
        assert!(a.mul(&a).is_err());
    }
}
