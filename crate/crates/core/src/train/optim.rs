//! Adam with bias correction, global-norm clipping and the linear
//! warm-up/decay learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far (any parameter).
    pub step: u64,
    moments: BTreeMap<String, Moments>,
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Tensor<f32>,
    v: Tensor<f32>,
    /// Updates this parameter has received; drives its bias correction.
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates received by one parameter.
    pub fn param_steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.t)
    }

    /// Apply one update to every parameter that has a gradient. Parameters
    /// without one keep their values and moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} is not finite at optimizer step {}",
                    self.step + 1
                )));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::Mismatch(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t as i32);
            let c2 = 1.0 - b2.powi(st.t as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = f64::from(gi);
                let m_new = b1 * f64::from(*mi) + (1.0 - b1) * gi;
                let v_new = b2 * f64::from(*vi) + (1.0 - b2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let upd = lr * (m_new / c1) / ((v_new / c2).sqrt() + self.eps);
                *x = (f64::from(*x) - upd) as f32;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Moment buffers as a named-tensor store (`{param}.m`, `{param}.v`).
    pub fn moments_store(&self) -> ParamStore {
        let mut s = ParamStore::default();
        for (name, st) in &self.moments {
            s.insert(format!("{name}.m"), st.m.clone());
            s.insert(format!("{name}.v"), st.v.clone());
        }
        s
    }

    /// Per-parameter update counts, for the run state file.
    pub fn param_step_counts(&self) -> BTreeMap<String, u64> {
        self.moments.iter().map(|(n, s)| (n.clone(), s.t)).collect()
    }

    pub fn restore(step: u64, moments: &ParamStore, counts: &BTreeMap<String, u64>) -> Result<Self> {
        let mut out = Self {
            step,
            ..Self::default()
        };
        for (name, &t) in counts {
            let get = |suffix: &str| {
                moments
                    .get(&format!("{name}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| Error::Mismatch(format!("optimizer state lacks {name}.{suffix}")))
            };
            out.moments.insert(name.clone(), Moments { m: get("m")?, v: get("v")?, t });
        }
        if moments.len() != 2 * counts.len() {
            return Err(Error::Mismatch(format!(
                "optimizer state has {} buffers for {} parameters",
                moments.len(),
                counts.len()
            )));
        }
        Ok(out)
    }
}

/// Rescale gradients so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, then linear decay to
/// 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::Config(format!(
            "{warmup_steps} warm-up steps exceed the {total_steps} total steps"
        )));
    }
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond schedule end {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(base_lr);
    }
    Ok(base_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
}
