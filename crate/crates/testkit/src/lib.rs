//! Independent numerical oracles for the stws test suites.
//!
//! Everything here is deliberately written as straight-line textbook code,
//! sharing no routines with the crate under test: a naive DFT, a Householder
//! QR least-squares solver, Gaussian elimination with partial pivoting,
//! central finite differences, and an exact binomial sign test.

use num_complex::Complex64;

/// Naive O(n^2) DFT of a real sequence, one-sided output (n/2 + 1 bins),
/// analysis sign convention `exp(-2 pi i k n / N)`.
pub fn naive_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let bins = n / 2 + 1;
    let mut out = Vec::with_capacity(bins);
    for k in 0..bins {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let phase = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
            acc += Complex64::new(phase.cos(), phase.sin()) * v;
        }
        out.push(acc);
    }
    out
}

/// Dense complex matrix in row-major storage.
#[derive(Debug, Clone)]
pub struct CMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Least-squares solution of `A x = b` via Householder QR with column norms
/// checked for rank; requires `rows >= cols` and full column rank.
pub fn qr_least_squares(a: &CMatrix, b: &[Complex64]) -> Vec<Complex64> {
    assert_eq!(a.rows, b.len());
    assert!(a.rows >= a.cols);
    let (m, n) = (a.rows, a.cols);
    let mut r = a.clone();
    let mut y: Vec<Complex64> = b.to_vec();

    // Householder triangularization applied to [A | b].
    for k in 0..n {
        // Column norm below the diagonal.
        let mut norm_sq = 0.0;
        for i in k..m {
            norm_sq += r.at(i, k).norm_sqr();
        }
        let norm = norm_sq.sqrt();
        if norm == 0.0 {
            continue;
        }
        let akk = r.at(k, k);
        let alpha = if akk.norm() == 0.0 {
            Complex64::new(-norm, 0.0)
        } else {
            -akk / akk.norm() * norm
        };
        // v = x - alpha e1
        let mut v: Vec<Complex64> = (k..m).map(|i| r.at(i, k)).collect();
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        // Apply H = I - 2 v v^H / (v^H v) to the trailing columns and to y.
        for c in k..n {
            let mut dot = Complex64::new(0.0, 0.0);
            for (i, vi) in v.iter().enumerate() {
                dot += vi.conj() * r.at(k + i, c);
            }
            let coef = dot * 2.0 / vnorm_sq;
            for (i, vi) in v.iter().enumerate() {
                let cur = r.at(k + i, c);
                r.set(k + i, c, cur - coef * vi);
            }
        }
        let mut dot = Complex64::new(0.0, 0.0);
        for (i, vi) in v.iter().enumerate() {
            dot += vi.conj() * y[k + i];
        }
        let coef = dot * 2.0 / vnorm_sq;
        for (i, vi) in v.iter().enumerate() {
            y[k + i] -= coef * vi;
        }
    }

    // Back substitution on the upper-triangular system.
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for k in (0..n).rev() {
        let mut acc = y[k];
        for c in k + 1..n {
            acc -= r.at(k, c) * x[c];
        }
        let diag = r.at(k, k);
        x[k] = if diag.norm() > 0.0 {
            acc / diag
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    x
}

/// Solve the square system `A x = b` by Gaussian elimination with partial
/// pivoting. Panics on a numerically singular pivot.
pub fn ge_solve(a: &CMatrix, b: &[Complex64]) -> Vec<Complex64> {
    assert_eq!(a.rows, a.cols);
    assert_eq!(a.rows, b.len());
    let n = a.rows;
    let mut m = a.clone();
    let mut y = b.to_vec();

    for k in 0..n {
        let mut pivot = k;
        let mut best = m.at(k, k).norm();
        for i in k + 1..n {
            let mag = m.at(i, k).norm();
            if mag > best {
                best = mag;
                pivot = i;
            }
        }
        assert!(best > 1e-300, "singular matrix in ge_solve");
        if pivot != k {
            for c in 0..n {
                let tmp = m.at(k, c);
                m.set(k, c, m.at(pivot, c));
                m.set(pivot, c, tmp);
            }
            y.swap(k, pivot);
        }
        let inv = Complex64::new(1.0, 0.0) / m.at(k, k);
        for i in k + 1..n {
            let factor = m.at(i, k) * inv;
            for c in k..n {
                let v = m.at(i, c) - factor * m.at(k, c);
                m.set(i, c, v);
            }
            let yk = y[k];
            y[i] -= factor * yk;
        }
    }

    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for k in (0..n).rev() {
        let mut acc = y[k];
        for c in k + 1..n {
            acc -= m.at(k, c) * x[c];
        }
        x[k] = acc / m.at(k, k);
    }
    x
}

/// Central finite-difference gradient of a scalar function of a flat
/// parameter vector.
pub fn central_difference<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut work = point.to_vec();
    for i in 0..point.len() {
        work[i] = point[i] + step;
        let plus = f(&work);
        work[i] = point[i] - step;
        let minus = f(&work);
        work[i] = point[i];
        grads.push((plus - minus) / (2.0 * step));
    }
    grads
}

/// Relative error between two gradient entries with an absolute floor so that
/// near-zero pairs compare as equal.
pub fn grad_relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// One-sided paired sign test: probability of observing at least `wins`
/// successes in `trials` fair coin flips (ties excluded by the caller).
pub fn sign_test_p_value(wins: usize, trials: usize) -> f64 {
    assert!(wins <= trials);
    // Exact binomial tail, computed in log space for stability.
    let ln_fact = |n: usize| -> f64 { (1..=n).map(|i| (i as f64).ln()).sum() };
    let ln_n_fact = ln_fact(trials);
    let mut p = 0.0;
    for k in wins..=trials {
        let ln_choose = ln_n_fact - ln_fact(k) - ln_fact(trials - k);
        p += (ln_choose - (trials as f64) * std::f64::consts::LN_2).exp();
    }
    p.min(1.0)
}
