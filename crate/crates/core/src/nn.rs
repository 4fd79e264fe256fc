//! Dense f64 kernels, cross-entropy, Adam and a central-difference gradient
//! checker. Everything the captioner's hand-written backward pass needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix. Vectors and biases are `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
        Self { rows, cols, data }
    }

    /// Seeded uniform matrix, for tests and tools.
    pub fn seeded(rows: usize, cols: usize, scale: f64, seed: u64) -> Self {
        Self::uniform(rows, cols, scale, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", self.shape(), other.shape())));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{op} {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }
}

/// Gradients of `C = A·B` given `dC`: `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(a: &Matrix, b: &Matrix, d_out: &Matrix) -> Result<(Matrix, Matrix)> {
    if d_out.shape() != (a.rows, b.cols) {
        return Err(Error::Shape(format!(
            "matmul_backward: d_out {:?} for {:?} x {:?}",
            d_out.shape(),
            a.shape(),
            b.shape()
        )));
    }
    Ok((d_out.matmul(&b.transpose())?, a.transpose().matmul(d_out)?))
}

/// `out = xᵀ·W` for a row vector `x` of length `W.rows`.
pub fn vec_mat(x: &[f64], w: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.iter_mut().for_each(|o| *o = 0.0);
    vec_mat_acc(x, w, out);
}

/// `out += xᵀ·W`.
pub fn vec_mat_acc(x: &[f64], w: &Matrix, out: &mut [f64]) {
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wv;
        }
    }
}

/// `out += W·g`, i.e. the input gradient of [`vec_mat`].
pub fn mat_vec_acc(w: &Matrix, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(g.len(), w.cols);
    debug_assert_eq!(out.len(), w.rows);
    for (o, row) in out.iter_mut().zip(w.data.chunks_exact(w.cols)) {
        *o += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dW += x ⊗ g`, the weight gradient of [`vec_mat`].
pub fn outer_acc(dw: &mut Matrix, x: &[f64], g: &[f64]) {
    debug_assert_eq!((x.len(), g.len()), dw.shape());
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (d, &gv) in dw.row_mut(k).iter_mut().zip(g) {
            *d += xk * gv;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Input gradient of sigmoid given its output `y`.
pub fn sigmoid_backward(y: f64, dy: f64) -> f64 {
    dy * y * (1.0 - y)
}

/// Input gradient of tanh given its output `y`.
pub fn tanh_backward(y: f64, dy: f64) -> f64 {
    dy * (1.0 - y * y)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

/// `(-log softmax(logits)[target], softmax(logits) - onehot(target))`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!("target {target} out of range for {} logits", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut grad: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = grad.iter().sum();
    let loss = z.ln() - (logits[target] - max);
    grad.iter_mut().for_each(|g| *g /= z);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Matrix]) -> Self {
        Self {
            config,
            t: 0,
            m: params.iter().map(|p| p.zeros_like()).collect(),
            v: params.iter().map(|p| p.zeros_like()).collect(),
        }
    }

    /// One update. Fails without touching anything if a gradient is
    /// non-finite or a shape disagrees.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} moments, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "adam: param {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }

        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and the central difference
/// `(f(p+ε) - f(p-ε)) / 2ε`, over `coords` (all coordinates when `None`).
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], analytic: &[f64], eps: f64, coords: Option<&[usize]>) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length must match parameter length");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = loss_fn(&p);
        p[i] = orig - eps;
        let minus = loss_fn(&p);
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_is_neutral() {
        let x = Matrix::seeded(5, 3, 1.0, 1);
        assert_eq!(Matrix::identity(5).matmul(&x).unwrap(), x);
        assert_eq!(x.matmul(&Matrix::identity(3)).unwrap(), x);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Matrix::seeded(7, 11, 2.0, 2);
        let b = Matrix::seeded(11, 5, 2.0, 3);
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        for (x, y) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
        assert!(a.add(&Matrix::zeros(3, 2)).is_err());
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(matmul_backward(&a, &Matrix::zeros(3, 4), &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn vec_kernels_agree_with_matmul() {
        let w = Matrix::seeded(4, 6, 1.0, 4);
        let x = Matrix::seeded(1, 4, 1.0, 5);
        let mut out = vec![0.0; 6];
        vec_mat(x.as_slice(), &w, &mut out);
        let want = x.matmul(&w).unwrap();
        for (a, b) in out.iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
        let g = Matrix::seeded(1, 6, 1.0, 6);
        let (dx, dw) = matmul_backward(&x, &w, &g).unwrap();
        let mut dx2 = vec![0.0; 4];
        mat_vec_acc(&w, g.as_slice(), &mut dx2);
        let mut dw2 = w.zeros_like();
        outer_acc(&mut dw2, x.as_slice(), g.as_slice());
        for (a, b) in dx.as_slice().iter().zip(&dx2) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in dw.as_slice().iter().zip(dw2.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    /// Each backward kernel against central differences of a random linear
    /// read-out of its forward.
    #[test]
    fn backward_kernels_pass_grad_check() {
        let a = Matrix::seeded(3, 4, 1.0, 10);
        let b = Matrix::seeded(4, 2, 1.0, 11);
        let probe = Matrix::seeded(3, 2, 1.0, 12);
        let readout = |m: &Matrix| -> f64 { m.as_slice().iter().zip(probe.as_slice()).map(|(x, y)| x * y).sum() };
        let (da, db) = matmul_backward(&a, &b, &probe).unwrap();
        let err_a = grad_check(
            |p| readout(&Matrix::from_vec(3, 4, p.to_vec()).unwrap().matmul(&b).unwrap()),
            a.as_slice(),
            da.as_slice(),
            1e-6,
            None,
        );
        let err_b = grad_check(
            |p| readout(&a.matmul(&Matrix::from_vec(4, 2, p.to_vec()).unwrap()).unwrap()),
            b.as_slice(),
            db.as_slice(),
            1e-6,
            None,
        );
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");

        let x = Matrix::seeded(1, 6, 2.0, 13);
        let w = Matrix::seeded(1, 6, 1.0, 14);
        let dot =
            |xs: &[f64], f: &dyn Fn(f64) -> f64| -> f64 { xs.iter().zip(w.as_slice()).map(|(&v, c)| f(v) * c).sum() };
        let sig_grad: Vec<f64> =
            x.as_slice().iter().zip(w.as_slice()).map(|(&v, &c)| sigmoid_backward(sigmoid(v), c)).collect();
        let tanh_grad: Vec<f64> =
            x.as_slice().iter().zip(w.as_slice()).map(|(&v, &c)| tanh_backward(v.tanh(), c)).collect();
        let e1 = grad_check(|p| dot(p, &sigmoid), x.as_slice(), &sig_grad, 1e-6, None);
        let e2 = grad_check(|p| dot(p, &f64::tanh), x.as_slice(), &tanh_grad, 1e-6, None);
        assert!(e1 < 1e-6 && e2 < 1e-6, "{e1} {e2}");

        let logits = Matrix::seeded(1, 9, 3.0, 15);
        let (_, ce_grad) = softmax_cross_entropy(logits.as_slice(), 4).unwrap();
        let e3 = grad_check(|p| softmax_cross_entropy(p, 4).unwrap().0, logits.as_slice(), &ce_grad, 1e-6, None);
        assert!(e3 < 1e-6, "{e3}");
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let (loss, grad) = softmax_cross_entropy(&[0.0; 7], 3).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-15);
        assert!((loss - 1.945910).abs() < 1e-6);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-15);

        let mut logits = vec![0.0; 5];
        logits[2] = 1000.0;
        let (loss, _) = softmax_cross_entropy(&logits, 2).unwrap();
        assert!((0.0..1e-9).contains(&loss));
        assert!(softmax_cross_entropy(&logits, 5).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_sum() {
        let logits = Matrix::seeded(1, 12, 4.0, 20);
        let l = logits.as_slice();
        for target in 0..12 {
            let z: f64 = l.iter().map(|x| x.exp()).sum();
            let oracle = -(l[target].exp() / z).ln();
            let (loss, grad) = softmax_cross_entropy(l, target).unwrap();
            assert!((loss - oracle).abs() < 1e-10);
            for (k, g) in grad.iter().enumerate() {
                let p = l[k].exp() / z - if k == target { 1.0 } else { 0.0 };
                assert!((g - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_single_scalar_step() {
        let mut p = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &[&p]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        // m_hat = v_hat = 1 on the first step: Δ = lr / (1 + eps)
        let want = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.get(0, 0) - want).abs() < 1e-15);
        assert!((0.5 - p.get(0, 0) - 0.1).abs() < 1e-8);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_grad_and_zero_lr_are_fixed_points() {
        let orig = Matrix::seeded(3, 3, 1.0, 30);
        let g = Matrix::seeded(3, 3, 1.0, 31);
        let zero = orig.zeros_like();

        let mut p = orig.clone();
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..3 {
            st.step(&mut [&mut p], &[&zero]).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(st.t, 3);

        // moments decay geometrically under zero gradients
        st.step(&mut [&mut p], &[&g]).unwrap();
        let (m1, v1) = (st.m[0].clone(), st.v[0].clone());
        st.step(&mut [&mut p], &[&zero]).unwrap();
        for (a, b) in st.m[0].as_slice().iter().zip(m1.as_slice()) {
            assert_eq!(*a, 0.9 * b);
        }
        for (a, b) in st.v[0].as_slice().iter().zip(v1.as_slice()) {
            assert_eq!(*a, 0.999 * b);
        }

        let mut p1 = orig.clone();
        let mut st = AdamState::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &[&p1]);
        for _ in 0..5 {
            st.step(&mut [&mut p1], &[&g]).unwrap();
        }
        assert_eq!(p1, orig);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = Matrix::zeros(1, 2);
        let g = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        let err = st.step(&mut [&mut p], &[&g]).unwrap_err();
        assert!(err.to_string().starts_with("divergence"));
        assert_eq!(st.t, 0);
        assert_eq!(p, Matrix::zeros(1, 2));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = Matrix::seeded(4, 4, 10.0, 40);
        let mut b = Matrix::seeded(1, 4, 10.0, 41);
        let before = clip_global_norm(&mut [&mut a, &mut b], 1.5);
        assert!(before > 1.5);
        let after = (a.sum_sq() + b.sum_sq()).sqrt();
        assert!(after <= 1.5 + 1e-12);

        let mut c = Matrix::from_vec(1, 2, vec![0.1, 0.1]).unwrap();
        let orig = c.clone();
        clip_global_norm(&mut [&mut c], 5.0);
        assert_eq!(c, orig);
    }

    #[test]
    fn grad_check_quadratic_and_planted_fault() {
        let p: Vec<f64> = Matrix::seeded(1, 20, 3.0, 50).as_slice().to_vec();
        let half_sq = |q: &[f64]| 0.5 * q.iter().map(|x| x * x).sum::<f64>();
        let err = grad_check(half_sq, &p, &p, 1e-4, None);
        assert!(err < 1e-9, "{err}");

        let doubled: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let err = grad_check(half_sq, &p, &doubled, 1e-4, None);
        assert!(err > 0.3);

        let err = grad_check(half_sq, &p, &doubled, 1e-4, Some(&[0, 3]));
        assert!(err > 0.3);
    }
}
