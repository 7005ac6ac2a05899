//! Gated recurrent unit with full update/reset gates and biases.
//!
//! Convention: z is the update gate and weights the fresh candidate,
//! h' = (1 - z) * h_prev + z * tanh-candidate, so a saturated-open update
//! gate replaces the state outright. Gate inputs are [x, h_prev] in that
//! order; the candidate sees [x, r * h_prev].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One cell's weights: each gate has a [hidden, x_dim + hidden] matrix and a
/// [hidden] bias. No parameters are shared between cells.
#[derive(Clone)]
pub struct GruParams<S: Scalar> {
    pub wz: Tensor<S>,
    pub bz: Tensor<S>,
    pub wr: Tensor<S>,
    pub br: Tensor<S>,
    pub wh: Tensor<S>,
    pub bh: Tensor<S>,
}

impl<S: Scalar> GruParams<S> {
    pub fn hidden_dim(&self) -> usize {
        self.wz.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.wz.shape()[1] - self.wz.shape()[0]
    }

    fn validate(&self, h: usize, e: usize) -> Result<()> {
        let gate = [h, e + h];
        for (name, w, b) in [
            ("wz", &self.wz, &self.bz),
            ("wr", &self.wr, &self.br),
            ("wh", &self.wh, &self.bh),
        ] {
            if w.shape() != gate {
                return Err(Error::parameter(
                    "gru_cell",
                    format!("{} has shape {:?}, expected {:?}", name, w.shape(), gate),
                ));
            }
            if b.shape() != [h] {
                return Err(Error::parameter(
                    "gru_cell",
                    format!("{} bias has shape {:?}, expected [{}]", name, b.shape(), h),
                ));
            }
        }
        Ok(())
    }
}

/// Registers one cell's weights under `prefix`.{wz,bz,wr,br,wh,bh}.
/// Gate matrices draw from the usual fan-in uniform; biases start at zero.
pub fn init_gru<S: Scalar>(
    store: &mut crate::params::ParamStore<S>,
    prefix: &str,
    hidden: usize,
    input_dim: usize,
    rng: &mut impl rand::Rng,
) -> Result<()> {
    let fan_in = input_dim + hidden;
    for gate in ["wz", "wr", "wh"] {
        store.init_uniform(
            &format!("{}.{}", prefix, gate),
            &[hidden, fan_in],
            fan_in,
            rng,
        )?;
    }
    for gate in ["bz", "br", "bh"] {
        store.insert_values(
            &format!("{}.{}", prefix, gate),
            &[hidden],
            vec![S::zero(); hidden],
        )?;
    }
    Ok(())
}

/// Assembles cheap handles to a registered cell's weights.
pub fn gru_from_store<S: Scalar>(
    store: &crate::params::ParamStore<S>,
    prefix: &str,
) -> Result<GruParams<S>> {
    Ok(GruParams {
        wz: store.get(&format!("{}.wz", prefix))?.clone(),
        bz: store.get(&format!("{}.bz", prefix))?.clone(),
        wr: store.get(&format!("{}.wr", prefix))?.clone(),
        br: store.get(&format!("{}.br", prefix))?.clone(),
        wh: store.get(&format!("{}.wh", prefix))?.clone(),
        bh: store.get(&format!("{}.bh", prefix))?.clone(),
    })
}

/// Single recurrence step: returns the next hidden state.
pub fn gru_cell<S: Scalar>(
    tape: &Tape<S>,
    h_prev: &Tensor<S>,
    x: &Tensor<S>,
    p: &GruParams<S>,
) -> Result<Tensor<S>> {
    if h_prev.shape().len() != 1 || x.shape().len() != 1 {
        return Err(Error::shape("gru_cell", h_prev.shape(), x.shape()));
    }
    let (h, e) = (h_prev.numel(), x.numel());
    p.validate(h, e)?;

    let xh = tape.concat1d(&[x, h_prev])?;
    let z = tape.sigmoid(&tape.linear(&p.wz, &xh, Some(&p.bz))?);
    let r = tape.sigmoid(&tape.linear(&p.wr, &xh, Some(&p.br))?);
    let rh = tape.mul(&r, h_prev)?;
    let xrh = tape.concat1d(&[x, &rh])?;
    let cand = tape.tanh(&tape.linear(&p.wh, &xrh, Some(&p.bh))?);
    let keep = tape.mul(&tape.affine(&z, -S::one(), S::one()), h_prev)?;
    let fresh = tape.mul(&z, &cand)?;
    tape.add(&keep, &fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::pseudo_random;

    fn params(h: usize, e: usize, seed: u64, bz_shift: f64) -> GruParams<f64> {
        let g = h * (e + h);
        let mut bz = pseudo_random(h, seed + 3);
        for v in bz.iter_mut() {
            *v += bz_shift;
        }
        GruParams {
            wz: Tensor::from_vec(&[h, e + h], pseudo_random(g, seed)).unwrap(),
            bz: Tensor::from_vec(&[h], bz).unwrap(),
            wr: Tensor::from_vec(&[h, e + h], pseudo_random(g, seed + 1)).unwrap(),
            br: Tensor::from_vec(&[h], pseudo_random(h, seed + 4)).unwrap(),
            wh: Tensor::from_vec(&[h, e + h], pseudo_random(g, seed + 2)).unwrap(),
            bh: Tensor::from_vec(&[h], pseudo_random(h, seed + 5)).unwrap(),
        }
    }

    #[test]
    fn zero_everything_stays_zero() {
        let tape = Tape::<f64>::no_grad();
        let p = GruParams {
            wz: Tensor::zeros(&[3, 5]),
            bz: Tensor::zeros(&[3]),
            wr: Tensor::zeros(&[3, 5]),
            br: Tensor::zeros(&[3]),
            wh: Tensor::zeros(&[3, 5]),
            bh: Tensor::zeros(&[3]),
        };
        let h = gru_cell(&tape, &Tensor::zeros(&[3]), &Tensor::zeros(&[2]), &p).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn saturated_update_gate_emits_candidate() {
        let tape = Tape::<f64>::no_grad();
        let p = params(3, 2, 100, 50.0);
        let h_prev = Tensor::from_vec(&[3], pseudo_random(3, 200)).unwrap();
        let x = Tensor::from_vec(&[2], pseudo_random(2, 201)).unwrap();
        let h = gru_cell(&tape, &h_prev, &x, &p).unwrap();

        // Candidate computed by hand with the same r gate.
        let xh: Vec<f64> = x.data().iter().chain(h_prev.data()).cloned().collect();
        let mut cand = vec![0.0; 3];
        for o in 0..3 {
            let mut pre = p.bh.data()[o];
            for i in 0..2 {
                pre += p.wh.data()[o * 5 + i] * x.data()[i];
            }
            for j in 0..3 {
                let mut pre_r = p.br.data()[j];
                for i in 0..5 {
                    pre_r += p.wr.data()[j * 5 + i] * xh[i];
                }
                let r = 1.0 / (1.0 + (-pre_r).exp());
                pre += p.wh.data()[o * 5 + 2 + j] * r * h_prev.data()[j];
            }
            cand[o] = pre.tanh();
        }
        for (hv, cv) in h.data().iter().zip(&cand) {
            assert!((hv - cv).abs() < 1e-8, "state {} vs candidate {}", hv, cv);
        }
    }

    #[test]
    fn rejects_mismatched_parameter_shapes() {
        let tape = Tape::<f64>::no_grad();
        let mut p = params(3, 2, 300, 0.0);
        p.wh = Tensor::zeros(&[3, 4]);
        assert!(gru_cell(&tape, &Tensor::zeros(&[3]), &Tensor::zeros(&[2]), &p).is_err());
    }

    #[test]
    fn two_step_unroll_gradients_match_finite_differences() {
        let h_dim = 3;
        let e_dim = 2;
        let g = h_dim * (e_dim + h_dim);
        let x1 = pseudo_random(e_dim, 400);
        let x2 = pseudo_random(e_dim, 401);
        let proj = pseudo_random(h_dim, 402);

        // Flattened parameter vector: wz, bz, wr, br, wh, bh.
        let mut theta = Vec::new();
        for seed in [410, 411, 412] {
            theta.extend(pseudo_random(g, seed));
            theta.extend(pseudo_random(h_dim, seed + 10));
        }

        let run = |tv: &[f64]| {
            let tape = Tape::new();
            let mut off = 0;
            let mut take = |n: usize, shape: &[usize]| {
                let t = Tensor::from_vec(shape, tv[off..off + n].to_vec())
                    .unwrap()
                    .with_grad();
                off += n;
                t
            };
            let p = GruParams {
                wz: take(g, &[h_dim, e_dim + h_dim]),
                bz: take(h_dim, &[h_dim]),
                wr: take(g, &[h_dim, e_dim + h_dim]),
                br: take(h_dim, &[h_dim]),
                wh: take(g, &[h_dim, e_dim + h_dim]),
                bh: take(h_dim, &[h_dim]),
            };
            let x1t = Tensor::from_vec(&[e_dim], x1.clone()).unwrap();
            let x2t = Tensor::from_vec(&[e_dim], x2.clone()).unwrap();
            let h0 = Tensor::zeros(&[h_dim]);
            let h1 = gru_cell(&tape, &h0, &x1t, &p).unwrap();
            let h2 = gru_cell(&tape, &h1, &x2t, &p).unwrap();
            let loss = tape.linear_const(&h2, proj.clone(), 1, None).unwrap();
            tape.backward(&loss).unwrap();
            let mut grad = Vec::new();
            for t in [&p.wz, &p.bz, &p.wr, &p.br, &p.wh, &p.bh] {
                grad.extend(t.grad().unwrap());
            }
            (loss.scalar_value(), grad)
        };

        let (_, analytic) = run(&theta);
        let eps = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / 1e-8f64.max(a.abs() + n.abs());
        for i in (0..theta.len()).step_by(5) {
            let mut p = theta.clone();
            p[i] += eps;
            let mut m = theta.clone();
            m[i] -= eps;
            let n = (run(&p).0 - run(&m).0) / (2.0 * eps);
            assert!(
                rel(analytic[i], n) < 1e-4,
                "coord {}: analytic={} numeric={}",
                i,
                analytic[i],
                n
            );
        }
    }
}
