//! Dense row-major f64 tensors and the elementary differentiable layers.
//!
//! Everything downstream (activations, parameters, gradients, auxiliary
//! variables, multipliers) is a `Tensor`. Operations are pure functions:
//! equal inputs give bit-identical outputs, and outputs on finite inputs
//! stay finite.

use crate::error::Error;
use crate::rng::SeededRng;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::input(format!(
                "shape {shape:?} does not describe a buffer of {} elements",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// He-style init: entries ~ N(0, 2/fan_in).
    pub fn he_init(rows: usize, cols: usize, rng: &mut SeededRng) -> Self {
        let std = (2.0 / rows as f64).sqrt();
        let mut t = Tensor::zeros(&[rows, cols]);
        rng.fill_normal(&mut t.data, std);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dimension(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, a: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * a).collect(),
        }
    }

    /// `self += a * x`, elementwise.
    pub fn axpy(&mut self, a: f64, x: &Tensor) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.axpy(1.0, other)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sq_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sq_l2().sqrt()
    }

    /// `self @ rhs` for 2-D operands.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::dimension("matmul", &self.shape, &rhs.shape));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let lrow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &l) in lrow.iter().enumerate() {
                let rrow = &rhs.data[p * m..(p + 1) * m];
                for (o, &r) in orow.iter_mut().zip(rrow) {
                    *o += l * r;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self @ rhs^T`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[1] {
            return Err(Error::dimension("matmul_nt", &self.shape, &rhs.shape));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], rhs.shape[0]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let lrow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let rrow = &rhs.data[j * k..(j + 1) * k];
                out[i * m + j] = lrow.iter().zip(rrow).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self^T @ rhs`.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[0] != rhs.shape[0] {
            return Err(Error::dimension("matmul_tn", &self.shape, &rhs.shape));
        }
        let (b, n, m) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; n * m];
        for r in 0..b {
            let lrow = &self.data[r * n..(r + 1) * n];
            let rrow = &rhs.data[r * m..(r + 1) * m];
            for (i, &l) in lrow.iter().enumerate() {
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &v) in orow.iter_mut().zip(rrow) {
                    *o += l * v;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Column sums of a 2-D tensor (bias gradients).
    pub fn col_sum(&self) -> Tensor {
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(&self.data[i * m..(i + 1) * m]) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![m],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise map with access to a random stream, in storage order.
    pub fn map_with_rng(
        &self,
        rng: &mut SeededRng,
        mut f: impl FnMut(f64, &mut SeededRng) -> f64,
    ) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v, rng)).collect(),
        }
    }
}

/// `x @ w + b` broadcast over rows.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::dimension("affine", x.shape(), w.shape()));
    }
    if b.len() != w.shape()[1] {
        return Err(Error::dimension("affine bias", w.shape(), b.shape()));
    }
    let mut out = x.matmul(w)?;
    let m = out.cols();
    for i in 0..out.rows() {
        for (o, &bv) in out.data[i * m..(i + 1) * m].iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of relu: passes `grad` where `pre > 0`, zero elsewhere.
pub fn relu_backward(pre: &Tensor, grad: &Tensor) -> Result<Tensor> {
    pre.check_same_shape(grad, "relu_backward")?;
    let data = pre
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: pre.shape.clone(),
        data,
    })
}

/// Mean cross-entropy over the batch with a numerically stabilized softmax.
///
/// Returns the loss and its gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::dimension(
            "softmax_cross_entropy",
            logits.shape(),
            &[0, 0],
        ));
    }
    let (batch, classes) = (logits.rows(), logits.cols());
    if batch == 0 || labels.len() != batch {
        return Err(Error::input(format!(
            "softmax_cross_entropy: {} labels for batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = Tensor::zeros(&[batch, classes]);
    let mut loss = 0.0;
    for i in 0..batch {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (row[labels[i]] - max);
        let grow = &mut grad.data[i * classes..(i + 1) * classes];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            grow[j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss / batch as f64, grad))
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// The independent oracle for every analytic backward pass in the crate:
/// it never touches the code paths it is used to check.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite_diff_grad requires h > 0");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative elementwise error, with an absolute floor for near-zero
/// entries: below magnitude 1e-3 the test degrades to an absolute bound,
/// since central differences carry ~1e-10 of truncation/roundoff noise that
/// would otherwise swamp the ratio on dead gradient paths. Shared by all
/// gradient-check suites.
pub fn max_rel_err(got: &Tensor, want: &Tensor) -> f64 {
    assert_eq!(got.shape(), want.shape());
    got.data
        .iter()
        .zip(&want.data)
        .map(|(&g, &w)| (g - w).abs() / w.abs().max(1e-3))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_buffer() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn affine_identity_weights() {
        let x = Tensor::from_rows(&[&[1.0, 2.0]]);
        let w = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::vector(vec![0.0, 0.0]);
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_zero_weights_pass_bias() {
        let x = Tensor::from_rows(&[&[1.0, 2.0]]);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_matches_triple_loop_oracle() {
        let mut rng = SeededRng::new(100);
        let x = Tensor::he_init(2, 3, &mut rng);
        let w = Tensor::he_init(3, 2, &mut rng);
        let b = Tensor::vector(vec![0.3, -0.7]);
        let got = affine(&x, &w, &b).unwrap();
        // Independent naive evaluation.
        for i in 0..2 {
            for j in 0..2 {
                let mut want = b.data()[j];
                for m in 0..3 {
                    want += x.data()[i * 3 + m] * w.data()[m * 2 + j];
                }
                assert!((got.data()[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        let err = affine(&x, &w, &b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn relu_sign_cases() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::vector(vec![0.5, 3.0]);
        assert_eq!(relu(&pos).data(), pos.data());
    }

    #[test]
    fn relu_matches_scalar_loop() {
        let mut rng = SeededRng::new(8);
        let x = Tensor::he_init(4, 5, &mut rng);
        let got = relu(&x);
        for (g, &v) in got.data().iter().zip(x.data()) {
            assert_eq!(*g, if v > 0.0 { v } else { 0.0 });
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_rows_sum_to_zero() {
        let mut rng = SeededRng::new(21);
        let logits = Tensor::he_init(3, 5, &mut rng);
        let (_, grad) = softmax_cross_entropy(&logits, &[1, 4, 0]).unwrap();
        for i in 0..3 {
            let s: f64 = grad.row(i).iter().sum();
            assert!(s.abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let mut rng = SeededRng::new(33);
        let logits = Tensor::he_init(2, 4, &mut rng);
        let labels = [2usize, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let fd = finite_diff_grad(
            |t| softmax_cross_entropy(t, &labels).unwrap().0,
            &logits,
            1e-5,
        );
        assert!(max_rel_err(&grad, &fd) <= 1e-6);
    }

    #[test]
    fn cross_entropy_decreases_as_correct_logit_grows() {
        let mut prev = f64::INFINITY;
        for scale in [0.0, 1.0, 5.0, 20.0, 100.0] {
            let logits = Tensor::from_rows(&[&[scale, 0.0, 0.0]]);
            let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
            assert!(loss >= 0.0);
            assert!(loss < prev || scale == 0.0);
            prev = loss;
        }
        assert!(prev <= 1e-6, "saturated loss {prev}");
    }

    #[test]
    fn finite_diff_known_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_constant_function() {
        let x = Tensor::vector(vec![0.5, -0.5, 2.0]);
        let g = finite_diff_grad(|_| 3.25, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_exact_on_quadratics() {
        // Central differences are exact for degree <= 2 up to rounding.
        let mut rng = SeededRng::new(77);
        let x = Tensor::he_init(1, 6, &mut rng);
        let g = finite_diff_grad(
            |t| {
                t.data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i as f64 + 1.0) * v * v + 0.5 * v)
                    .sum()
            },
            &x,
            1e-4,
        );
        for (i, (&gv, &xv)) in g.data().iter().zip(x.data()).enumerate() {
            let want = 2.0 * (i as f64 + 1.0) * xv + 0.5;
            assert!((gv - want).abs() < 1e-10, "coord {i}: {gv} vs {want}");
        }
    }

    #[test]
    fn ops_are_deterministic() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::he_init(3, 3, &mut rng);
        let w = Tensor::he_init(3, 3, &mut SeededRng::new(5));
        let b = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let a = affine(&x, &w, &b).unwrap();
        let bb = affine(&x, &w, &b).unwrap();
        assert_eq!(a.data(), bb.data());
    }
}
