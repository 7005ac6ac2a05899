//! Fixed-capacity external memory of past glimpse features, and the learned
//! quadratic-form distance used to compare against it.
//!
//! Slots hold tracked tensors: a read at a later frame backpropagates into
//! the frame that wrote the slot. Eviction only drops the bank's handle,
//! so reads that happened while a slot was resident still receive
//! gradients.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MemorySlot<S> {
    pub feature: Tensor<S>,
    /// One importance weight per worker, the assignment probability at write
    /// time.
    pub importance: Tensor<S>,
    /// 1-based frame index of the write.
    pub timestamp: usize,
}

/// FIFO store of at most `capacity` slots. Timestamps are written in
/// nondecreasing order, so insertion order equals age order and eviction
/// drops the oldest slot (first-written among equal timestamps).
#[derive(Debug, Clone)]
pub struct MemoryBank<S> {
    slots: VecDeque<MemorySlot<S>>,
    capacity: usize,
}

impl<S: Scalar> MemoryBank<S> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::parameter("memory", "capacity must be positive"));
        }
        Ok(MemoryBank {
            slots: VecDeque::with_capacity(capacity + 1),
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots(&self) -> impl Iterator<Item = &MemorySlot<S>> {
        self.slots.iter()
    }

    pub fn write(&mut self, feature: Tensor<S>, importance: Tensor<S>, timestamp: usize) {
        if let Some(back) = self.slots.back() {
            debug_assert!(
                back.timestamp <= timestamp,
                "memory writes must not go back in time"
            );
        }
        self.slots.push_back(MemorySlot {
            feature,
            importance,
            timestamp,
        });
        while self.slots.len() > self.capacity {
            self.slots.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }
}

impl<S: Scalar> Tape<S> {
    /// sqrt((x - y)' D (x - y)) between two feature vectors, with the
    /// pre-sqrt value clamped at zero so an indefinite D stays finite.
    /// The clamped region (and the tip at zero) backpropagates zeros.
    pub fn quad_dist(&self, x: &Tensor<S>, y: &Tensor<S>, d: &Tensor<S>) -> Result<Tensor<S>> {
        let n = x.numel();
        if x.shape().len() != 1 || y.shape().len() != 1 || y.numel() != n {
            return Err(Error::parameter(
                "quad_dist",
                format!("feature lengths differ: {} vs {}", n, y.numel()),
            ));
        }
        if d.shape() != [n, n] {
            return Err(Error::shape("quad_dist", d.shape(), x.shape()));
        }
        let u: Vec<S> = {
            let xd = x.data();
            let yd = y.data();
            xd.iter().zip(yd.iter()).map(|(a, b)| *a - *b).collect()
        };
        let dd = d.data();
        let mut q = S::zero();
        for i in 0..n {
            let mut row = S::zero();
            for j in 0..n {
                row = row + dd[i * n + j] * u[j];
            }
            q = q + u[i] * row;
        }
        drop(dd);
        let dist = q.max(S::zero()).sqrt();
        let (out, track) = self.finish(&[x, y, d], Tensor::scalar(dist));
        if track {
            let (x, y, d, o) = (x.clone(), y.clone(), d.clone(), out.clone());
            self.push_node(&out, move || {
                let g = match o.grad() {
                    Some(g) => g[0],
                    None => return,
                };
                let val = o.scalar_value();
                let mut dx = vec![S::zero(); n];
                let mut dmat = vec![S::zero(); n * n];
                if val > S::zero() {
                    let scale = g / (S::lit(2.0) * val);
                    let dd = d.data();
                    for i in 0..n {
                        let mut acc = S::zero();
                        for j in 0..n {
                            // (D + D') u
                            acc = acc + (dd[i * n + j] + dd[j * n + i]) * u[j];
                            dmat[i * n + j] = scale * u[i] * u[j];
                        }
                        dx[i] = scale * acc;
                    }
                }
                x.accumulate_grad(&dx);
                let dy: Vec<S> = dx.iter().map(|v| -*v).collect();
                y.accumulate_grad(&dy);
                d.accumulate_grad(&dmat);
            });
        }
        Ok(out)
    }
}

/// Inverse of the regularized sample covariance of the given features:
/// D = (Cov + eps I)^-1 with the unbiased 1/(n-1) estimator. Returns the
/// row-major matrix, explicitly symmetrized.
pub fn inverse_covariance<S: Scalar>(features: &[Vec<S>], eps: f64) -> Result<Vec<S>> {
    let n = features.len();
    let dim = match features.first() {
        Some(f) => f.len(),
        None => return Err(Error::parameter("inverse_covariance", "no samples")),
    };
    if n < dim + 1 {
        return Err(Error::parameter(
            "inverse_covariance",
            format!("{} samples cannot estimate a {}x{} covariance", n, dim, dim),
        ));
    }
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::parameter(
            "inverse_covariance",
            "feature lengths are inconsistent",
        ));
    }
    let mut mean = vec![0.0f64; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v.to_f64_lossy();
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; dim * dim];
    for f in features {
        let centered: Vec<f64> = f
            .iter()
            .zip(&mean)
            .map(|(v, m)| v.to_f64_lossy() - m)
            .collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for (i, c) in cov.iter_mut().enumerate() {
        *c /= denom;
        if i % (dim + 1) == 0 {
            *c += eps;
        }
    }
    let inv = spd_inverse(&cov, dim)?;
    Ok(inv
        .iter()
        .map(|v| S::from_f64(*v).expect("finite inverse entry"))
        .collect())
}

/// Dense SPD inverse via Cholesky; result symmetrized.
fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::numeric(
                        "spd_inverse",
                        format!("matrix not positive definite at pivot {}", i),
                    ));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut inv = vec![0.0f64; n * n];
    let mut col = vec![0.0f64; n];
    for e in 0..n {
        // L y = e_col, forward.
        for i in 0..n {
            let mut s = if i == e { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * n + k] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
        // L' x = y, backward.
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s -= l[k * n + i] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
        for i in 0..n {
            inv[i * n + e] = col[i];
        }
    }
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = avg;
            inv[j * n + i] = avg;
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::pseudo_random;

    fn slot_of(feature: Vec<f64>, importance: Vec<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let f = Tensor::from_vec(&[feature.len()], feature).unwrap();
        let w = Tensor::from_vec(&[importance.len()], importance).unwrap();
        (f, w)
    }

    #[test]
    fn bank_evicts_oldest_first() {
        let mut bank = MemoryBank::<f64>::new(8).unwrap();
        for t in 1..=3usize {
            for g in 0..3 {
                let (f, w) = slot_of(vec![t as f64, g as f64], vec![1.0]);
                bank.write(f, w, t);
            }
        }
        assert_eq!(bank.len(), 8);
        // Nine written, one evicted: the first glimpse of frame 1.
        let front = bank.slots().next().unwrap();
        assert_eq!(front.timestamp, 1);
        assert_eq!(front.feature.data().to_vec(), vec![1.0, 1.0]);
        assert_eq!(bank.slots().filter(|s| s.timestamp == 1).count(), 2);
    }

    #[test]
    fn bank_never_exceeds_capacity() {
        let mut bank = MemoryBank::<f64>::new(5).unwrap();
        let mut expected_front = 0usize;
        for step in 0..100usize {
            let (f, w) = slot_of(vec![step as f64], vec![0.5]);
            bank.write(f, w, step + 1);
            assert!(bank.len() <= 5);
            if step >= 5 {
                expected_front = step - 4;
            }
            let front = bank.slots().next().unwrap();
            assert_eq!(front.feature.data()[0] as usize, expected_front);
        }
        assert!(MemoryBank::<f64>::new(0).is_err());
    }

    #[test]
    fn distance_zero_at_coincidence_and_euclidean_under_identity() {
        let tape = Tape::<f64>::no_grad();
        let d = Tensor::from_vec(&[3, 3], pseudo_random(9, 5)).unwrap();
        let x = Tensor::from_vec(&[3], vec![0.4, -1.0, 2.0]).unwrap();
        let same = tape.quad_dist(&x, &x.clone(), &d).unwrap();
        assert_eq!(same.scalar_value(), 0.0);

        let eye = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let a = Tensor::from_vec(&[3], vec![3.0, 4.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.0, 0.0, 1.0]).unwrap();
        let dist = tape.quad_dist(&a, &b, &eye).unwrap();
        assert!((dist.scalar_value() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn distance_matches_brute_force_quadratic_form() {
        let tape = Tape::<f64>::no_grad();
        for trial in 0..5 {
            let base = pseudo_random(9, 30 + trial);
            // SPD via A A' + I.
            let mut spd = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        spd[i * 3 + j] += base[i * 3 + k] * base[j * 3 + k];
                    }
                }
                spd[i * 3 + i] += 1.0;
            }
            let d = Tensor::from_vec(&[3, 3], spd.clone()).unwrap();
            let xv = pseudo_random(3, 40 + trial);
            let yv = pseudo_random(3, 50 + trial);
            let x = Tensor::from_vec(&[3], xv.clone()).unwrap();
            let y = Tensor::from_vec(&[3], yv.clone()).unwrap();
            let got = tape.quad_dist(&x, &y, &d).unwrap().scalar_value();
            let u: Vec<f64> = xv.iter().zip(&yv).map(|(a, b)| a - b).collect();
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += u[i] * spd[i * 3 + j] * u[j];
                }
            }
            assert!((got - q.max(0.0).sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn indefinite_forms_clamp_to_zero_without_gradient_noise() {
        let tape = Tape::<f64>::new();
        let neg = Tensor::from_vec(&[2, 2], vec![-1.0, 0.0, 0.0, -1.0])
            .unwrap()
            .with_grad();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let y = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap().with_grad();
        let dist = tape.quad_dist(&x, &y, &neg).unwrap();
        assert_eq!(dist.scalar_value(), 0.0);
        tape.backward(&dist).unwrap();
        assert!(x.grad().unwrap().iter().all(|v| *v == 0.0));
        assert!(y.grad().unwrap().iter().all(|v| *v == 0.0));
        assert!(neg.grad().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        let x0 = vec![0.7, -0.2, 0.9];
        let y0 = vec![0.1, 0.4, -0.3];
        let d0 = {
            let base = pseudo_random(9, 60);
            let mut spd = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        spd[i * 3 + j] += base[i * 3 + k] * base[j * 3 + k];
                    }
                }
                spd[i * 3 + i] += 0.5;
            }
            spd
        };
        type Grads = (f64, Vec<f64>, Vec<f64>, Vec<f64>);
        let run = |xv: &[f64], yv: &[f64], dv: &[f64]| -> Grads {
            let tape = Tape::new();
            let x = Tensor::from_vec(&[3], xv.to_vec()).unwrap().with_grad();
            let y = Tensor::from_vec(&[3], yv.to_vec()).unwrap().with_grad();
            let d = Tensor::from_vec(&[3, 3], dv.to_vec()).unwrap().with_grad();
            let dist = tape.quad_dist(&x, &y, &d).unwrap();
            tape.backward(&dist).unwrap();
            (
                dist.scalar_value(),
                x.grad().unwrap(),
                y.grad().unwrap(),
                d.grad().unwrap(),
            )
        };
        let (_, gx, gy, gd) = run(&x0, &y0, &d0);
        let eps = 1e-6;
        let check = |analytic: f64, fp: f64, fm: f64, what: &str| {
            let num = (fp - fm) / (2.0 * eps);
            let rel = (analytic - num).abs() / (1e-8f64).max(analytic.abs() + num.abs());
            assert!(rel < 1e-6, "{}", what);
        };
        for i in 0..3 {
            let mut p = x0.clone();
            p[i] += eps;
            let (fp, ..) = run(&p, &y0, &d0);
            p[i] -= 2.0 * eps;
            let (fm, ..) = run(&p, &y0, &d0);
            check(gx[i], fp, fm, &format!("x[{}]", i));
        }
        for i in 0..3 {
            let mut p = y0.clone();
            p[i] += eps;
            let (fp, ..) = run(&x0, &p, &d0);
            p[i] -= 2.0 * eps;
            let (fm, ..) = run(&x0, &p, &d0);
            check(gy[i], fp, fm, &format!("y[{}]", i));
        }
        for i in 0..9 {
            let mut p = d0.clone();
            p[i] += eps;
            let (fp, ..) = run(&x0, &y0, &p);
            p[i] -= 2.0 * eps;
            let (fm, ..) = run(&x0, &y0, &p);
            check(gd[i], fp, fm, &format!("d[{}]", i));
        }
    }

    #[test]
    fn scalar_covariance_inverts_exactly() {
        let feats = vec![vec![1.0f64], vec![3.0]];
        // Unbiased variance of {1, 3} is 2.
        let d = inverse_covariance::<f64>(&feats, 1e-3).unwrap();
        assert!((d[0] - 1.0 / (2.0 + 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn inverse_times_covariance_is_identity() {
        let dim = 4;
        let n = 50;
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                pseudo_random(dim, 100 + i as u64)
                    .iter()
                    .map(|v| v * (1.0 + i as f64 / n as f64))
                    .collect()
            })
            .collect();
        let eps = 1e-3;
        let d = inverse_covariance::<f64>(&feats, eps).unwrap();
        // Recompute the regularized covariance the slow way and multiply.
        let mut mean = vec![0.0; dim];
        for f in &feats {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; dim * dim];
        for f in &feats {
            for i in 0..dim {
                for j in 0..dim {
                    cov[i * dim + j] += (f[i] - mean[i]) * (f[j] - mean[j]);
                }
            }
        }
        for (idx, c) in cov.iter_mut().enumerate() {
            *c /= (n - 1) as f64;
            if idx % (dim + 1) == 0 {
                *c += eps;
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                let mut prod = 0.0;
                for k in 0..dim {
                    prod += d[i * dim + k] * cov[k * dim + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod - expect).abs() < 1e-8, "({},{}) = {}", i, j, prod);
            }
        }
        // Symmetry is explicit.
        for i in 0..dim {
            for j in 0..dim {
                assert_eq!(d[i * dim + j], d[j * dim + i]);
            }
        }
    }

    #[test]
    fn whitened_data_yields_near_identity() {
        // Box-Muller standard normals from the fixture stream.
        let dim = 3;
        let n = 4000;
        let uni = pseudo_random(2 * n * dim, 777);
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..dim)
                    .map(|j| {
                        let a = 0.5 * (uni[2 * (i * dim + j)] + 1.0);
                        let b = 0.5 * (uni[2 * (i * dim + j) + 1] + 1.0);
                        let r = (-2.0 * a.max(1e-12).ln()).sqrt();
                        r * (2.0 * std::f64::consts::PI * b).cos()
                    })
                    .collect()
            })
            .collect();
        let d = inverse_covariance::<f64>(&feats, 1e-3).unwrap();
        for i in 0..dim {
            for j in 0..dim {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (d[i * dim + j] - expect).abs() < 0.15,
                    "({},{}) = {}",
                    i,
                    j,
                    d[i * dim + j]
                );
            }
        }
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let feats = vec![vec![1.0f64, 2.0], vec![3.0, 4.0]];
        assert!(inverse_covariance::<f64>(&feats, 1e-3).is_err());
        assert!(inverse_covariance::<f64>(&[], 1e-3).is_err());
    }
}
