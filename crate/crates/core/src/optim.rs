//! AdamW, the linear warmup/decay schedule and token-weighted gradient
//! accumulation.

use serde::{Deserialize, Serialize};
use tagmt_tensor::checkpoint::Checkpoint;
use tagmt_tensor::{Grads, ParamStore, Real, Tensor};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear rise from 0 to `base_lr` over the warmup, then linear decay to 0
/// at `total_steps`; 0 afterwards.
pub fn lr_at(s: &ScheduleConfig, base_lr: f64, step: u64) -> f64 {
    if step < s.warmup_steps {
        return base_lr * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.total_steps {
        return if s.total_steps == s.warmup_steps && step == s.total_steps {
            base_lr
        } else {
            0.0
        };
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    base_lr * (s.total_steps - step) as f64 / span
}

/// Decoupled-decay Adam. Decay is skipped for parameters the `decays`
/// predicate rejects.
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    pub fn new(
        config: AdamWConfig,
        params: &ParamStore<T>,
        decays: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        config.validate()?;
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Ok(AdamW {
            m: zeros(),
            v: zeros(),
            decay: params.iter().map(|(_, n, _)| decays(n)).collect(),
            step: 0,
            config,
        })
    }

    /// One update with learning rate `lr`. Gradients are checked before
    /// anything is modified.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Optimizer(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        let clip = match self.config.clip_norm {
            Some(c) => {
                let norm = grads.global_norm();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let clip = T::from_f64(clip);
        let shrink = T::from_f64(1.0 - lr * c.weight_decay);
        for (i, (id, g)) in grads.iter().enumerate() {
            let theta = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let decay = self.decay[i] && c.weight_decay > 0.0;
            for (((p, &g), m), v) in theta
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g * clip;
                if decay {
                    *p *= shrink;
                }
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments and step count, keyed by parameter name.
    pub fn state_checkpoint(&self, params: &ParamStore<T>) -> Result<Checkpoint<T>> {
        let mut ck = Checkpoint::new();
        ck.meta.insert("step".into(), self.step.to_string());
        ck.meta
            .insert("adamw".into(), serde_json::to_string(&self.config)?);
        for ((_, name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            ck.tensors.push((format!("m.{name}"), m.clone()));
            ck.tensors.push((format!("v.{name}"), v.clone()));
        }
        Ok(ck)
    }

    pub fn restore(&mut self, ck: &Checkpoint<T>, params: &ParamStore<T>) -> Result<()> {
        let bad = |m: String| Error::Optimizer(format!("optimizer state: {m}"));
        self.step = ck
            .meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing step".into()))?;
        for (i, (_, name, t)) in params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let s = ck
                    .get(&format!("{prefix}.{name}"))
                    .ok_or_else(|| bad(format!("no {prefix} for {name}")))?;
                if s.shape() != t.shape() {
                    return Err(bad(format!("shape of {prefix}.{name}")));
                }
                *slot = s.clone();
            }
        }
        Ok(())
    }
}

/// Sums micro-batch gradients weighted by their target token counts;
/// [`Accumulator::flush`] returns the token-weighted mean.
pub struct Accumulator<T> {
    pub factor: usize,
    sum: Option<Grads<T>>,
    weight: f64,
    count: usize,
}

impl<T: Real> Accumulator<T> {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config(
                "accumulation factor must be at least 1".into(),
            ));
        }
        Ok(Accumulator {
            factor,
            sum: None,
            weight: 0.0,
            count: 0,
        })
    }

    /// Adds the gradient of a per-token mean loss over `n_tokens` tokens.
    pub fn accumulate(&mut self, grads: &Grads<T>, n_tokens: usize) {
        let w = T::from_f64(n_tokens as f64);
        match &mut self.sum {
            Some(s) => s.add_scaled(grads, w),
            None => {
                let mut s = grads.clone();
                s.scale(w);
                self.sum = Some(s);
            }
        }
        self.weight += n_tokens as f64;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn ready(&self) -> bool {
        self.count >= self.factor
    }

    pub fn flush(&mut self) -> Result<Grads<T>> {
        let mut s = self
            .sum
            .take()
            .ok_or_else(|| Error::Optimizer("flush called with no accumulated gradients".into()))?;
        if self.weight > 0.0 {
            s.scale(T::from_f64(1.0 / self.weight));
        }
        self.weight = 0.0;
        self.count = 0;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tagmt_tensor::Tape;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[1], &[x]).unwrap());
        s
    }

    fn grads_of(g: f64) -> Grads<f64> {
        let store = scalar_store(0.0);
        let mut gr = Grads::zeros_like(&store);
        let id = store.id("w").unwrap();
        gr.get_mut(id).data_mut()[0] = g;
        gr
    }

    #[test]
    fn schedule_points() {
        let s = ScheduleConfig {
            warmup_steps: 100,
            total_steps: 1000,
        };
        assert_eq!(lr_at(&s, 2.0, 0), 0.0);
        assert_eq!(lr_at(&s, 2.0, 100), 2.0);
        assert!((lr_at(&s, 2.0, 550) - 1.0).abs() < 1e-12);
        assert_eq!(lr_at(&s, 2.0, 1000), 0.0);
        assert_eq!(lr_at(&s, 2.0, 5000), 0.0);
        assert!(ScheduleConfig {
            warmup_steps: 5,
            total_steps: 4
        }
        .validate()
        .is_err());
    }

    #[test]
    fn first_adam_step() {
        let mut p = scalar_store(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p, |_| true).unwrap();
        opt.update(&mut p, &grads_of(1.0), 0.1).unwrap();
        let w = p.get(p.id("w").unwrap()).data()[0];
        assert!((w - 0.9).abs() < 1e-6, "{w}");
    }

    #[test]
    fn zero_gradient_and_pure_decay() {
        let mut p = scalar_store(3.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
            |_| true,
        )
        .unwrap();
        opt.update(&mut p, &grads_of(0.0), 0.1).unwrap();
        assert_eq!(p.get(p.id("w").unwrap()).data()[0], 3.0);

        let mut p = scalar_store(3.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.01,
                ..Default::default()
            },
            &p,
            |_| true,
        )
        .unwrap();
        opt.update(&mut p, &grads_of(0.0), 0.1).unwrap();
        assert_eq!(p.get(p.id("w").unwrap()).data()[0], 3.0 * (1.0 - 0.001));
    }

    #[test]
    fn exempt_parameters_do_not_decay() {
        let mut p = scalar_store(3.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            &p,
            |_| false,
        )
        .unwrap();
        opt.update(&mut p, &grads_of(0.0), 0.1).unwrap();
        assert_eq!(p.get(p.id("w").unwrap()).data()[0], 3.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p, |_| true).unwrap();
        let err = opt.update(&mut p, &grads_of(f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn flush_without_accumulate_errors() {
        let mut acc = Accumulator::<f64>::new(2).unwrap();
        assert!(acc.flush().is_err());
    }

    #[test]
    fn factor_one_is_identity() {
        let p = scalar_store(1.0);
        let g = grads_of(0.37);
        let mut acc = Accumulator::new(1).unwrap();
        acc.accumulate(&g, 11);
        assert!(acc.ready());
        let out = acc.flush().unwrap();
        assert!((out.get(p.id("w").unwrap()).data()[0] - 0.37).abs() < 1e-15);
    }

    /// Loss = mean over tokens of (w·x_i − y_i)²; micro-batches of unequal
    /// size recombine to the full-batch gradient.
    #[test]
    fn unequal_micro_batches_match_full_batch() {
        let xs: Vec<f64> = (0..10).map(|i| 0.3 * i as f64 - 1.0).collect();
        let ys: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let p = scalar_store(0.7);
        let id = p.id("w").unwrap();
        let grad = |lo: usize, hi: usize| {
            let mut tape = Tape::new();
            let w = tape.param(&p, id);
            let w = tape.reshape(w, &[1, 1]).unwrap();
            let x = tape.constant(Tensor::from_f64(&[hi - lo, 1], &xs[lo..hi]).unwrap());
            let y = tape.constant(Tensor::from_f64(&[hi - lo, 1], &ys[lo..hi]).unwrap());
            let wx = tape.matmul(x, w).unwrap();
            let ny = tape.scale(y, -1.0);
            let r = tape.add(wx, ny).unwrap();
            let sq = tape.mul(r, r).unwrap();
            let l = tape.mean(sq);
            tape.backward(l, &p).unwrap()
        };
        let full = grad(0, 10).get(id).data()[0];
        let mut acc = Accumulator::new(3).unwrap();
        for (lo, hi) in [(0, 2), (2, 7), (7, 10)] {
            acc.accumulate(&grad(lo, hi), hi - lo);
        }
        let combined = acc.flush().unwrap().get(id).data()[0];
        assert!((full - combined).abs() < 1e-12, "{full} vs {combined}");
    }

    #[test]
    fn state_round_trip() {
        let mut p = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p, |_| true).unwrap();
        opt.update(&mut p, &grads_of(0.5), 0.01).unwrap();
        let ck = opt.state_checkpoint(&p).unwrap();
        let mut fresh = AdamW::new(AdamWConfig::default(), &p, |_| true).unwrap();
        fresh
            .restore(
                &Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(),
                &p,
            )
            .unwrap();
        let mut p2 = p.clone();
        opt.update(&mut p, &grads_of(-0.2), 0.01).unwrap();
        fresh.update(&mut p2, &grads_of(-0.2), 0.01).unwrap();
        assert_eq!(
            p.get(p.id("w").unwrap()).data(),
            p2.get(p2.id("w").unwrap()).data()
        );
    }
}
