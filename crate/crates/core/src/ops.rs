//! Differentiable primitive operations.
//!
//! Every op computes its output eagerly, marks it for tracking when any
//! input is tracked, and pushes one backward node onto the tape. Backward
//! closures accumulate into input gradient slots; they never overwrite.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Dot product with four independent accumulators. The fixed summation order
/// keeps results reproducible while giving the compiler room to vectorize.
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] = acc[0] + a[j] * b[j];
        acc[1] = acc[1] + a[j + 1] * b[j + 1];
        acc[2] = acc[2] + a[j + 2] * b[j + 2];
        acc[3] = acc[3] + a[j + 3] * b[j + 3];
    }
    let mut tail = S::zero();
    for j in chunks * 4..a.len() {
        tail = tail + a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// y += alpha * x
pub(crate) fn axpy<S: Scalar>(y: &mut [S], alpha: S, x: &[S]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub(crate) fn finish(&self, inputs: &[&Tensor<S>], mut out: Tensor<S>) -> (Tensor<S>, bool) {
        let track = self.track(inputs);
        out.set_requires_grad(track);
        (out, track)
    }

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
        let (out, track) = self.finish(&[a, b], Tensor::from_vec(a.shape(), data)?);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    if a.requires_grad() {
                        a.accumulate_grad(&g);
                    }
                    if b.requires_grad() {
                        b.accumulate_grad(&g);
                    }
                }
            });
        }
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
        let (out, track) = self.finish(&[a, b], Tensor::from_vec(a.shape(), data)?);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    if a.requires_grad() {
                        a.accumulate_grad(&g);
                    }
                    if b.requires_grad() {
                        let neg: Vec<S> = g.iter().map(|v| -*v).collect();
                        b.accumulate_grad(&neg);
                    }
                }
            });
        }
        Ok(out)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
        let (out, track) = self.finish(&[a, b], Tensor::from_vec(a.shape(), data)?);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    if a.requires_grad() {
                        let da: Vec<S> = g.iter().zip(b.data()).map(|(g, y)| *g * *y).collect();
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let db: Vec<S> = g.iter().zip(a.data()).map(|(g, x)| *g * *x).collect();
                        b.accumulate_grad(&db);
                    }
                }
            });
        }
        Ok(out)
    }

    /// Elementwise y = alpha * x + beta with constant coefficients.
    pub fn affine(&self, x: &Tensor<S>, alpha: S, beta: S) -> Tensor<S> {
        let data = x.data().iter().map(|v| alpha * *v + beta).collect();
        let (out, track) = self.finish(
            &[x],
            Tensor::from_vec(x.shape(), data).expect("same shape"),
        );
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let dx: Vec<S> = g.iter().map(|v| alpha * *v).collect();
                    x.accumulate_grad(&dx);
                }
            });
        }
        out
    }

    pub fn relu(&self, x: &Tensor<S>) -> Tensor<S> {
        let data = x.data().iter().map(|v| v.max(S::zero())).collect();
        let (out, track) = self.finish(
            &[x],
            Tensor::from_vec(x.shape(), data).expect("same shape"),
        );
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    // Subgradient 0 at the kink.
                    let dx: Vec<S> = g
                        .iter()
                        .zip(x.data())
                        .map(|(g, v)| if *v > S::zero() { *g } else { S::zero() })
                        .collect();
                    x.accumulate_grad(&dx);
                }
            });
        }
        out
    }

    pub fn sigmoid(&self, x: &Tensor<S>) -> Tensor<S> {
        let data = x.data().iter().map(|v| stable_sigmoid(*v)).collect();
        let (out, track) = self.finish(
            &[x],
            Tensor::from_vec(x.shape(), data).expect("same shape"),
        );
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let dx: Vec<S> = g
                        .iter()
                        .zip(o.data())
                        .map(|(g, y)| *g * *y * (S::one() - *y))
                        .collect();
                    x.accumulate_grad(&dx);
                }
            });
        }
        out
    }

    pub fn tanh(&self, x: &Tensor<S>) -> Tensor<S> {
        let data = x.data().iter().map(|v| v.tanh()).collect();
        let (out, track) = self.finish(
            &[x],
            Tensor::from_vec(x.shape(), data).expect("same shape"),
        );
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let dx: Vec<S> = g
                        .iter()
                        .zip(o.data())
                        .map(|(g, y)| *g * (S::one() - *y * *y))
                        .collect();
                    x.accumulate_grad(&dx);
                }
            });
        }
        out
    }

    /// Temperature softmax over a 1-D tensor: softmax(x / alpha), computed
    /// with max subtraction so large logits cannot overflow.
    pub fn softmax_temp(&self, x: &Tensor<S>, alpha: S) -> Result<Tensor<S>> {
        if x.shape().len() != 1 || x.numel() == 0 {
            return Err(Error::parameter(
                "softmax_temp",
                format!("expects a non-empty vector, got shape {:?}", x.shape()),
            ));
        }
        if !(alpha > S::zero()) || !alpha.is_finite() {
            return Err(Error::parameter(
                "softmax_temp",
                format!("temperature must be finite and > 0, got {}", alpha),
            ));
        }
        let m = x.data().iter().cloned().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = x.data().iter().map(|v| ((*v - m) / alpha).exp()).collect();
        let z: S = exps.iter().cloned().sum();
        let data: Vec<S> = exps.iter().map(|e| *e / z).collect();
        let (out, track) = self.finish(&[x], Tensor::from_vec(x.shape(), data)?);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let y = o.data();
                    let gy = dot(&g, y);
                    let dx: Vec<S> = g
                        .iter()
                        .zip(y)
                        .map(|(gi, yi)| *yi * (*gi - gy) / alpha)
                        .collect();
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Matrix product of row-major 2-D tensors: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut data = vec![S::zero(); m * n];
        {
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                let row = &mut data[i * n..(i + 1) * n];
                for p in 0..k {
                    axpy(row, ad[i * k + p], &bd[p * n..(p + 1) * n]);
                }
            }
        }
        let (out, track) = self.finish(&[a, b], Tensor::from_vec(&[m, n], data)?);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let (ad, bd) = (a.data(), b.data());
                    if a.requires_grad() {
                        // da = g . b^T
                        let mut da = vec![S::zero(); m * k];
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                da[i * k + p] = dot(gi, &bd[p * n..(p + 1) * n]);
                            }
                        }
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        // db = a^T . g
                        let mut db = vec![S::zero(); k * n];
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                axpy(&mut db[p * n..(p + 1) * n], ad[i * k + p], gi);
                            }
                        }
                        b.accumulate_grad(&db);
                    }
                }
            });
        }
        Ok(out)
    }

    /// Fully connected layer: y = W x (+ bias), W is [out_dim, in_dim].
    pub fn linear(&self, w: &Tensor<S>, x: &Tensor<S>, bias: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        if w.shape().len() != 2 || x.shape().len() != 1 || w.shape()[1] != x.numel() {
            return Err(Error::shape("linear", w.shape(), x.shape()));
        }
        let (od, id) = (w.shape()[0], w.shape()[1]);
        if let Some(b) = bias {
            if b.shape() != [od] {
                return Err(Error::shape("linear", w.shape(), b.shape()));
            }
        }
        let wd = w.data();
        let xd = x.data();
        let mut data = vec![S::zero(); od];
        for o in 0..od {
            data[o] = dot(&wd[o * id..(o + 1) * id], xd);
        }
        if let Some(b) = bias {
            for (y, bv) in data.iter_mut().zip(b.data()) {
                *y = *y + *bv;
            }
        }
        let mut inputs = vec![w, x];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let (out, track) = self.finish(&inputs, Tensor::from_vec(&[od], data)?);
        if track {
            let (w, x, o) = (w.clone(), x.clone(), out.clone());
            let bias = bias.cloned();
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let (wd, xd) = (w.data(), x.data());
                    if w.requires_grad() {
                        let mut dw = vec![S::zero(); od * id];
                        for o_i in 0..od {
                            axpy(&mut dw[o_i * id..(o_i + 1) * id], g[o_i], xd);
                        }
                        w.accumulate_grad(&dw);
                    }
                    if x.requires_grad() {
                        let mut dx = vec![S::zero(); id];
                        for o_i in 0..od {
                            axpy(&mut dx, g[o_i], &wd[o_i * id..(o_i + 1) * id]);
                        }
                        x.accumulate_grad(&dx);
                    }
                    if let Some(b) = &bias {
                        if b.requires_grad() {
                            b.accumulate_grad(&g);
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    /// y = A x (+ beta) with a constant coefficient matrix, A is m x n flat.
    pub fn linear_const(
        &self,
        x: &Tensor<S>,
        a: Vec<S>,
        m: usize,
        beta: Option<Vec<S>>,
    ) -> Result<Tensor<S>> {
        let n = x.numel();
        if a.len() != m * n {
            return Err(Error::parameter(
                "linear_const",
                format!("matrix has {} entries, expected {}x{}", a.len(), m, n),
            ));
        }
        let xd = x.data();
        let mut data = vec![S::zero(); m];
        for o in 0..m {
            data[o] = dot(&a[o * n..(o + 1) * n], xd);
        }
        if let Some(b) = &beta {
            for (y, bv) in data.iter_mut().zip(b) {
                *y = *y + *bv;
            }
        }
        let (out, track) = self.finish(&[x], Tensor::from_vec(&[m], data)?);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let mut dx = vec![S::zero(); n];
                    for o_i in 0..m {
                        axpy(&mut dx, g[o_i], &a[o_i * n..(o_i + 1) * n]);
                    }
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Concatenates 1-D tensors in argument order.
    pub fn concat1d(&self, parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::parameter("concat1d", "needs at least one input"));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let total = data.len();
        let (out, track) = self.finish(parts, Tensor::from_vec(&[total], data)?);
        if track {
            let parts: Vec<Tensor<S>> = parts.iter().map(|p| (*p).clone()).collect();
            let o = out.clone();
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let mut off = 0;
                    for p in &parts {
                        if p.requires_grad() {
                            p.accumulate_grad(&g[off..off + p.numel()]);
                        }
                        off += p.numel();
                    }
                }
            });
        }
        Ok(out)
    }

    /// Contiguous flat slice reshaped to `out_shape`. Covers both vector
    /// ranges and leading-axis selection of row-major tensors.
    pub fn slice(&self, x: &Tensor<S>, offset: usize, out_shape: &[usize]) -> Result<Tensor<S>> {
        let len: usize = out_shape.iter().product();
        if offset + len > x.numel() {
            return Err(Error::parameter(
                "slice",
                format!(
                    "range {}..{} out of bounds for {} elements",
                    offset,
                    offset + len,
                    x.numel()
                ),
            ));
        }
        let data = x.data()[offset..offset + len].to_vec();
        let (out, track) = self.finish(&[x], Tensor::from_vec(out_shape, data)?);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    x.accumulate_grad_range(offset, &g);
                }
            });
        }
        Ok(out)
    }

    /// Mean over all leading axes; output keeps only the last axis.
    /// GAP over [H,W,C] or [T,H,W,C] maps both land here.
    pub fn mean_leading(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.shape().is_empty() {
            return Err(Error::parameter("mean_leading", "scalar input"));
        }
        let c = *x.shape().last().expect("non-empty shape");
        let lead = x.numel() / c;
        if lead == 0 || c == 0 {
            return Err(Error::parameter("mean_leading", "empty tensor"));
        }
        let inv = S::one() / S::from_usize(lead).expect("count fits scalar");
        let mut data = vec![S::zero(); c];
        for row in x.data().chunks_exact(c) {
            for (acc, v) in data.iter_mut().zip(row) {
                *acc = *acc + *v;
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        let (out, track) = self.finish(&[x], Tensor::from_vec(&[c], data)?);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let mut dx = vec![S::zero(); x.numel()];
                    for row in dx.chunks_exact_mut(c) {
                        for (d, gv) in row.iter_mut().zip(&g) {
                            *d = *gv * inv;
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Sum of every element, reduced to a single-value tensor.
    pub fn sum_all(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.numel() == 0 {
            return Err(Error::parameter("sum_all", "empty tensor"));
        }
        let total = x.data().iter().copied().sum::<S>();
        let (out, track) = self.finish(&[x], Tensor::from_vec(&[1], vec![total])?);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    x.accumulate_grad(&vec![g[0]; x.numel()]);
                }
            });
        }
        Ok(out)
    }

    /// Elementwise sum of any number of same-shape tensors.
    pub fn add_many(&self, xs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if xs.is_empty() {
            return Err(Error::parameter("add_many", "needs at least one input"));
        }
        for x in &xs[1..] {
            same_shape("add_many", xs[0], x)?;
        }
        let mut data = xs[0].data().to_vec();
        for x in &xs[1..] {
            for (acc, v) in data.iter_mut().zip(x.data()) {
                *acc = *acc + *v;
            }
        }
        let (out, track) = self.finish(xs, Tensor::from_vec(xs[0].shape(), data)?);
        if track {
            let xs: Vec<Tensor<S>> = xs.iter().map(|x| (*x).clone()).collect();
            let o = out.clone();
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    for x in &xs {
                        if x.requires_grad() {
                            x.accumulate_grad(&g);
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    /// Adds a per-channel bias over the last axis: y[.., c] = x[.., c] + b[c].
    pub fn bias_channels(&self, x: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let c = *x.shape().last().unwrap_or(&0);
        if b.shape() != [c] || c == 0 {
            return Err(Error::shape("bias_channels", x.shape(), b.shape()));
        }
        let bd = b.data();
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, bv) in row.iter_mut().zip(bd) {
                *v = *v + *bv;
            }
        }
        let (out, track) = self.finish(&[x, b], Tensor::from_vec(x.shape(), data)?);
        if track {
            let (x, b, o) = (x.clone(), b.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    if x.requires_grad() {
                        x.accumulate_grad(&g);
                    }
                    if b.requires_grad() {
                        let mut db = vec![S::zero(); c];
                        for row in g.chunks_exact(c) {
                            for (acc, gv) in db.iter_mut().zip(row) {
                                *acc = *acc + *gv;
                            }
                        }
                        b.accumulate_grad(&db);
                    }
                }
            });
        }
        Ok(out)
    }

    /// Convex-style combination sum_g p[g] * vs[g] of equal-length vectors.
    pub fn weighted_sum_vecs(&self, p: &Tensor<S>, vs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if p.shape().len() != 1 || p.numel() != vs.len() || vs.is_empty() {
            return Err(Error::parameter(
                "weighted_sum_vecs",
                format!("{} weights for {} vectors", p.numel(), vs.len()),
            ));
        }
        for v in &vs[1..] {
            same_shape("weighted_sum_vecs", vs[0], v)?;
        }
        let n = vs[0].numel();
        let mut data = vec![S::zero(); n];
        for (g, v) in p.data().iter().zip(vs) {
            axpy(&mut data, *g, v.data());
        }
        let mut inputs: Vec<&Tensor<S>> = vec![p];
        inputs.extend_from_slice(vs);
        let (out, track) = self.finish(&inputs, Tensor::from_vec(vs[0].shape(), data)?);
        if track {
            let p = p.clone();
            let vs: Vec<Tensor<S>> = vs.iter().map(|v| (*v).clone()).collect();
            let o = out.clone();
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    if p.requires_grad() {
                        let dp: Vec<S> = vs.iter().map(|v| dot(&g, v.data())).collect();
                        p.accumulate_grad(&dp);
                    }
                    for (w, v) in p.data().iter().zip(&vs) {
                        if v.requires_grad() {
                            let dv: Vec<S> = g.iter().map(|gi| *gi * *w).collect();
                            v.accumulate_grad(&dv);
                        }
                    }
                }
            });
        }
        Ok(out)
    }

    /// Euclidean distance ||a - b|| of same-shape tensors, as a scalar.
    /// Gradient is zero at coincident points.
    pub fn euclid(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("euclid", a, b)?;
        let sq: S = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum();
        let d = sq.sqrt();
        let (out, track) = self.finish(&[a, b], Tensor::scalar(d));
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let d = o.scalar_value();
                    if d <= S::zero() {
                        return;
                    }
                    let s = g[0] / d;
                    let diff: Vec<S> = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(x, y)| (*x - *y) * s)
                        .collect();
                    if a.requires_grad() {
                        a.accumulate_grad(&diff);
                    }
                    if b.requires_grad() {
                        let neg: Vec<S> = diff.iter().map(|v| -*v).collect();
                        b.accumulate_grad(&neg);
                    }
                }
            });
        }
        Ok(out)
    }

    /// Minimum of scalar tensors; gradient flows to the first minimizer.
    pub fn min_stack(&self, xs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if xs.is_empty() {
            return Err(Error::parameter("min_stack", "needs at least one input"));
        }
        let mut best = 0;
        for (i, x) in xs.iter().enumerate() {
            if x.numel() != 1 {
                return Err(Error::parameter("min_stack", "inputs must be scalars"));
            }
            if x.scalar_value() < xs[best].scalar_value() {
                best = i;
            }
        }
        let (out, track) = self.finish(xs, Tensor::scalar(xs[best].scalar_value()));
        if track {
            let chosen = xs[best].clone();
            let o = out.clone();
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    if chosen.requires_grad() {
                        chosen.accumulate_grad(&g);
                    }
                }
            });
        }
        Ok(out)
    }

    /// y = 1 / (1 + x) for a scalar input.
    pub fn inv1p(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.numel() != 1 {
            return Err(Error::parameter("inv1p", "expects a scalar"));
        }
        let y = S::one() / (S::one() + x.scalar_value());
        let (out, track) = self.finish(&[x], Tensor::scalar(y));
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let y = o.scalar_value();
                    x.accumulate_grad(&[-g[0] * y * y]);
                }
            });
        }
        Ok(out)
    }

    /// Sum of masked squared errors: sum_i mask[i] * (pred[i] - target[i])^2.
    /// Target and mask are constants; the caller divides by the valid count.
    pub fn masked_sq_err(
        &self,
        pred: &Tensor<S>,
        target: &Tensor<S>,
        mask: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        same_shape("masked_sq_err", pred, target)?;
        same_shape("masked_sq_err", pred, mask)?;
        let mut acc = S::zero();
        for ((p, t), m) in pred.data().iter().zip(target.data()).zip(mask.data()) {
            let d = *p - *t;
            acc = acc + *m * d * d;
        }
        let (out, track) = self.finish(&[pred], Tensor::scalar(acc));
        if track {
            let (p, t, m, o) = (pred.clone(), target.clone(), mask.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let two = S::lit(2.0);
                    let dp: Vec<S> = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .zip(m.data())
                        .map(|((pv, tv), mv)| g[0] * two * *mv * (*pv - *tv))
                        .collect();
                    p.accumulate_grad(&dp);
                }
            });
        }
        Ok(out)
    }

    /// Negative log of one probability: -ln(max(probs[idx], floor)).
    pub fn neg_log_indexed(&self, probs: &Tensor<S>, idx: usize, floor: S) -> Result<Tensor<S>> {
        if probs.shape().len() != 1 || idx >= probs.numel() {
            return Err(Error::parameter(
                "neg_log_indexed",
                format!("index {} out of range for shape {:?}", idx, probs.shape()),
            ));
        }
        let p = probs.data()[idx];
        let y = -p.max(floor).ln();
        let (out, track) = self.finish(&[probs], Tensor::scalar(y));
        if track {
            let (probs, o) = (probs.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let p = probs.data()[idx];
                    if p < floor {
                        return;
                    }
                    let mut dp = vec![S::zero(); probs.numel()];
                    dp[idx] = -g[0] / p;
                    probs.accumulate_grad(&dp);
                }
            });
        }
        Ok(out)
    }

    /// Glimpse parameter squashing: tanh for the center, scaled sigmoid into
    /// (s_min, s_max) for the two scales. `tie_scales` reuses the first scale
    /// logit for both outputs.
    pub fn squash_glimpse(
        &self,
        raw: &Tensor<S>,
        s_min: S,
        s_max: S,
        tie_scales: bool,
    ) -> Result<Tensor<S>> {
        if raw.shape() != [4] {
            return Err(Error::parameter(
                "squash_glimpse",
                format!("expects 4 raw values, got shape {:?}", raw.shape()),
            ));
        }
        if !(s_max > s_min) || !s_min.is_finite() || !s_max.is_finite() {
            return Err(Error::parameter(
                "squash_glimpse",
                format!("scale range ({}, {}) is invalid", s_min, s_max),
            ));
        }
        let r = raw.data();
        let span = s_max - s_min;
        let sig2 = stable_sigmoid(r[2]);
        let sig3 = stable_sigmoid(r[3]);
        let data = vec![
            r[0].tanh(),
            r[1].tanh(),
            s_min + span * sig2,
            if tie_scales {
                s_min + span * sig2
            } else {
                s_min + span * sig3
            },
        ];
        let (out, track) = self.finish(&[raw], Tensor::from_vec(&[4], data)?);
        if track {
            let (raw, o) = (raw.clone(), out.clone());
            self.push_node(&out, move || {
                if let Some(g) = o.grad() {
                    let y = o.data();
                    let mut dr = vec![S::zero(); 4];
                    dr[0] = g[0] * (S::one() - y[0] * y[0]);
                    dr[1] = g[1] * (S::one() - y[1] * y[1]);
                    let d2 = span * sig2 * (S::one() - sig2);
                    if tie_scales {
                        dr[2] = (g[2] + g[3]) * d2;
                    } else {
                        dr[2] = g[2] * d2;
                        dr[3] = g[3] * span * sig3 * (S::one() - sig3);
                    }
                    raw.accumulate_grad(&dr);
                }
            });
        }
        Ok(out)
    }

    /// Min-max normalization of a vector to [0, 1]. A degenerate span maps
    /// everything to zero with zero gradient.
    pub fn minmax_normalize(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.shape().len() != 1 || x.numel() == 0 {
            return Err(Error::parameter(
                "minmax_normalize",
                format!("expects a non-empty vector, got shape {:?}", x.shape()),
            ));
        }
        let xd = x.data();
        let mut amin = 0;
        let mut amax = 0;
        for (i, v) in xd.iter().enumerate() {
            if *v < xd[amin] {
                amin = i;
            }
            if *v > xd[amax] {
                amax = i;
            }
        }
        let (lo, hi) = (xd[amin], xd[amax]);
        let span = hi - lo;
        let degenerate = !(span > S::zero());
        let data: Vec<S> = if degenerate {
            vec![S::zero(); xd.len()]
        } else {
            xd.iter().map(|v| (*v - lo) / span).collect()
        };
        let (out, track) = self.finish(&[x], Tensor::from_vec(x.shape(), data)?);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push_node(&out, move || {
                if degenerate {
                    // Flat input: output is constant zero, gradient is zero.
                    if o.grad().is_some() {
                        x.accumulate_grad(&vec![S::zero(); x.numel()]);
                    }
                    return;
                }
                if let Some(g) = o.grad() {
                    let xd = x.data();
                    let mut dx = vec![S::zero(); xd.len()];
                    let inv = S::one() / span;
                    let inv2 = inv * inv;
                    for (i, gi) in g.iter().enumerate() {
                        let num = xd[i] - lo;
                        dx[i] = dx[i] + *gi * inv;
                        dx[amin] = dx[amin] + *gi * (num * inv2 - inv);
                        dx[amax] = dx[amax] - *gi * num * inv2;
                    }
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
