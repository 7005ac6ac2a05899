//! Adam with bias correction, applied to a named subset of a parameter
//! store. State is keyed by parameter name so it can ride along in
//! checkpoints.

use std::collections::BTreeMap;

use saccade::params::ParamStore;
use saccade::scalar::Scalar;
use saccade::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Result<Adam<S>> {
        if !(lr > 0.0) {
            return Err(Error::parameter("adam", format!("lr must be > 0, got {}", lr)));
        }
        Ok(Adam {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over `names`, reading each parameter's accumulated
    /// gradient. Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore<S>, names: &[String]) -> Result<()> {
        self.step_count += 1;
        let c1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let c2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let b1 = S::lit(self.beta1);
        let b2 = S::lit(self.beta2);
        let one_b1 = S::lit(1.0 - self.beta1);
        let one_b2 = S::lit(1.0 - self.beta2);
        let lr1 = S::lit(self.lr / c1);
        let inv_c2 = S::lit(1.0 / c2);
        let eps = S::lit(self.eps);
        for name in names {
            let grad: Vec<S> = {
                let p = store.get(name)?;
                match p.grad() {
                    Some(g) => g,
                    None => vec![S::zero(); p.numel()],
                }
            };
            for (i, g) in grad.iter().enumerate() {
                if !g.is_finite() {
                    return Err(Error::numeric(
                        "adam",
                        format!("non-finite gradient at {}[{}]: {:?}", name, i, g),
                    ));
                }
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); grad.len()]);
            if m.len() != grad.len() {
                return Err(Error::parameter(
                    "adam",
                    format!("state size changed for {}", name),
                ));
            }
            let data = store.get_mut(name)?.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let vhat = v[i] * inv_c2;
                data[i] = data[i] - lr1 * m[i] / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Flattens the state for checkpointing: moment vectors per parameter
    /// plus the step counter.
    pub fn state_entries(&self) -> Vec<(String, Vec<S>)> {
        let mut out = vec![(
            "opt.step".to_string(),
            vec![S::lit(self.step_count as f64)],
        )];
        for (name, m) in &self.m {
            out.push((format!("opt.m.{}", name), m.clone()));
        }
        for (name, v) in &self.v {
            out.push((format!("opt.v.{}", name), v.clone()));
        }
        out
    }

    /// Rebuilds state saved by `state_entries`.
    pub fn restore(&mut self, entries: &[(String, Vec<S>)]) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.step_count = 0;
        for (name, values) in entries {
            if name == "opt.step" {
                let raw = values
                    .first()
                    .map(|s| s.to_f64_lossy())
                    .unwrap_or(f64::NAN);
                if !(raw.is_finite() && raw >= 0.0 && raw.fract() == 0.0) {
                    return Err(Error::checkpoint(format!("bad optimizer step count {}", raw)));
                }
                self.step_count = raw as u64;
            } else if let Some(p) = name.strip_prefix("opt.m.") {
                self.m.insert(p.to_string(), values.clone());
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                self.v.insert(p.to_string(), values.clone());
            } else {
                return Err(Error::checkpoint(format!(
                    "unrecognized optimizer entry {:?}",
                    name
                )));
            }
        }
        Ok(())
    }
}
