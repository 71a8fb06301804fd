//! Dense vector/matrix arithmetic, activations, and a seeded deterministic RNG.
//!
//! Everything is plain `f64` with hand-rolled loops: the models here are tiny
//! (a handful of hidden units), and keeping the arithmetic free of external
//! numerical dependencies makes it auditable end to end.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from explicit rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch {
                    op: "Matrix::from_rows",
                    expected: format!("{c} columns"),
                    got: format!("{} columns", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * v`; requires `v.len() == self.cols`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "matvec",
                expected: format!("vector of len {}", self.cols),
                got: format!("len {}", v.len()),
            });
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v) {
                acc += a * b;
            }
            out[r] = acc;
        }
        Ok(out)
    }

    /// `self^T * v`; requires `v.len() == self.rows`.
    pub fn matvec_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch {
                op: "matvec_transpose",
                expected: format!("vector of len {}", self.rows),
                got: format!("len {}", v.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let vr = v[r];
            for (o, a) in out.iter_mut().zip(row) {
                *o += vr * a;
            }
        }
        Ok(out)
    }

    /// Rank-1 accumulation: `self += scale * (col ⊗ row)`.
    ///
    /// `col.len()` must equal `self.rows` and `row.len()` must equal `self.cols`.
    pub fn add_outer_scaled(&mut self, col: &[f64], row: &[f64], scale: f64) {
        debug_assert_eq!(col.len(), self.rows);
        debug_assert_eq!(row.len(), self.cols);
        for (r, &cv) in col.iter().enumerate() {
            if cv == 0.0 {
                continue;
            }
            let dst = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (d, &rv) in dst.iter_mut().zip(row) {
                *d += scale * cv * rv;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cholesky factorization `self = L L^T` for a symmetric positive-definite
    /// matrix. Returns the lower-triangular factor.
    pub fn cholesky(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch {
                op: "cholesky",
                expected: "square matrix".into(),
                got: format!("{}x{}", self.rows, self.cols),
            });
        }
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.get(i, j);
                for k in 0..j {
                    sum -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::SingularCovariance {
                            detail: Some(format!("leading minor {} has pivot {sum}", i + 1)),
                        });
                    }
                    l.set(i, j, sum.sqrt());
                } else {
                    l.set(i, j, sum / l.get(j, j));
                }
            }
        }
        Ok(l)
    }

    /// Solve `self * x = b` given that `self` is SPD, via its Cholesky factor.
    pub fn solve_spd(&self, b: &[f64]) -> Result<Vec<f64>> {
        let l = self.cholesky()?;
        Ok(l.cholesky_solve(b))
    }

    /// Solve `L L^T x = b` where `self` is the lower Cholesky factor.
    pub fn cholesky_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.rows;
        debug_assert_eq!(b.len(), n);
        // forward substitution L y = b
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= self.get(i, k) * y[k];
            }
            y[i] = sum / self.get(i, i);
        }
        // back substitution L^T x = y
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= self.get(k, i) * x[k];
            }
            x[i] = sum / self.get(i, i);
        }
        x
    }
}

/// Numerically safe logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid derivative evaluated from the pre-activation.
pub fn sigmoid_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Tanh derivative evaluated from the pre-activation.
pub fn tanh_deriv(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

pub fn sigmoid_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid(v)).collect()
}

pub fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.tanh()).collect()
}

/// Deterministic seeded RNG. The algorithm is SplitMix64 (Steele, Lea &
/// Flood's 64-bit mixer over a Weyl sequence with increment 0x9E3779B97F4A7C15)
/// and is frozen: identical seeds produce identical streams on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent child stream; used to give subsystems their own
    /// reproducible streams from one master seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut r = Rng::new(seed ^ stream.wrapping_mul(0xA24BAED4963EE407));
        // decorrelate from the raw xor
        r.next_u64();
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is ~2^-53 for the sizes used here; acceptable.
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Random matrix with i.i.d. uniform entries in [lo, hi].
pub fn uniform_init(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Result<Matrix> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument {
            what: "uniform_init",
            why: format!("lo ({lo}) must be < hi ({hi})"),
        });
    }
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.uniform(lo, hi);
    }
    Ok(m)
}

/// Random vector with i.i.d. uniform entries in [lo, hi].
pub fn uniform_init_vec(rng: &mut Rng, len: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument {
            what: "uniform_init",
            why: format!("lo ({lo}) must be < hi ({hi})"),
        });
    }
    Ok((0..len).map(|_| rng.uniform(lo, hi)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_identity_and_zero() {
        let id = Matrix::identity(3);
        assert_eq!(id.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let z = Matrix::zeros(2, 3);
        assert_eq!(z.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn matvec_hand_case() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let m = Matrix::zeros(2, 3);
        assert!(m.matvec(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn matvec_transpose_agrees_with_explicit_transpose() {
        let mut rng = Rng::new(7);
        let m = uniform_init(&mut rng, 4, 3, -1.0, 1.0).unwrap();
        let v: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let got = m.matvec_transpose(&v).unwrap();
        let mut want = vec![0.0; 3];
        for c in 0..3 {
            for r in 0..4 {
                want[c] += m.get(r, c) * v[r];
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn matvec_distributes_over_addition() {
        let mut rng = Rng::new(42);
        for _ in 0..20 {
            let m = uniform_init(&mut rng, 10, 10, -2.0, 2.0).unwrap();
            let a: Vec<f64> = (0..10).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let b: Vec<f64> = (0..10).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = m.matvec(&sum).unwrap();
            let ra = m.matvec(&a).unwrap();
            let rb = m.matvec(&b).unwrap();
            for i in 0..10 {
                assert!((lhs[i] - (ra[i] + rb[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.7310585786300049).abs() < 1e-15);
        // saturates without overflow
        assert_eq!(sigmoid(500.0), 1.0);
        assert_eq!(sigmoid(-500.0), sigmoid(-500.0)); // finite, no NaN
        assert!(sigmoid(-500.0) >= 0.0);
    }

    #[test]
    fn tanh_points() {
        assert_eq!(0.0f64.tanh(), 0.0);
        assert!((0.5f64.tanh() - 0.46211715726000974).abs() < 1e-15);
        for x in [0.1f64, 0.9, 1.3, 4.2] {
            assert_eq!(x.tanh(), -(-x).tanh()); // odd function
        }
    }

    #[test]
    fn sigmoid_deriv_identity() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let x = rng.uniform(-30.0, 30.0);
            let s = sigmoid(x);
            assert!((sigmoid_deriv(x) - s * (1.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn activation_derivs_match_finite_differences() {
        let mut rng = Rng::new(11);
        let h = 1e-6;
        for _ in 0..100 {
            let x = rng.uniform(-3.0, 3.0);
            let fd_sig = (sigmoid(x + h) - sigmoid(x - h)) / (2.0 * h);
            let fd_tanh = ((x + h).tanh() - (x - h).tanh()) / (2.0 * h);
            let rs = (sigmoid_deriv(x) - fd_sig).abs() / fd_sig.abs().max(1e-12);
            let rt = (tanh_deriv(x) - fd_tanh).abs() / fd_tanh.abs().max(1e-12);
            assert!(rs < 1e-8, "sigmoid deriv mismatch at {x}: rel {rs}");
            assert!(rt < 1e-8, "tanh deriv mismatch at {x}: rel {rt}");
        }
    }

    #[test]
    fn uniform_init_range_and_determinism() {
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        let ma = uniform_init(&mut a, 20, 50, -0.05, 0.05).unwrap();
        let mb = uniform_init(&mut b, 20, 50, -0.05, 0.05).unwrap();
        assert_eq!(ma.data(), mb.data());
        assert!(ma.data().iter().all(|&v| (-0.05..=0.05).contains(&v)));

        // tight range containment over many draws
        let mut r = Rng::new(5);
        let lo = 1.0 - 1e-9;
        for _ in 0..10_000 {
            let v = r.uniform(lo, 1.0);
            assert!((lo..=1.0).contains(&v));
        }
    }

    #[test]
    fn uniform_init_rejects_bad_range() {
        let mut rng = Rng::new(1);
        assert!(uniform_init(&mut rng, 2, 2, 0.5, 0.5).is_err());
        assert!(uniform_init(&mut rng, 2, 2, 1.0, -1.0).is_err());
    }

    #[test]
    fn uniform_sample_mean_within_three_standard_errors() {
        let mut rng = Rng::new(2024);
        let (lo, hi) = (-0.05, 0.05);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += rng.uniform(lo, hi);
        }
        let mean = sum / n as f64;
        let se = (hi - lo) / (12.0f64).sqrt() / (n as f64).sqrt();
        assert!(
            (mean - (lo + hi) / 2.0).abs() < 3.0 * se,
            "mean {mean} vs expected {} (se {se})",
            (lo + hi) / 2.0
        );
    }

    #[test]
    fn cholesky_solves_spd_system() {
        // A = B B^T + eps I is SPD
        let b = Matrix::from_rows(&[
            vec![2.0, 0.3, 0.1],
            vec![-0.5, 1.5, 0.2],
            vec![0.7, -0.2, 1.1],
        ])
        .unwrap();
        let mut a = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += b.get(i, k) * b.get(j, k);
                }
                a.set(i, j, s + if i == j { 1e-6 } else { 0.0 });
            }
        }
        let rhs = vec![1.0, -2.0, 0.5];
        let x = a.solve_spd(&rhs).unwrap();
        let back = a.matvec(&x).unwrap();
        for i in 0..3 {
            assert!((back[i] - rhs[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(m.cholesky().is_err());
    }
}
