use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    SgdMomentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        nesterov: bool,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Step decay: the rate is multiplied by `factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}

/// What to do with a non-finite gradient entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonFinitePolicy {
    #[default]
    Reject,
    SkipParam,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepReport {
    pub updated: usize,
    pub skipped: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub policy: NonFinitePolicy,
    step: u64,
    epoch: usize,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule, weight_decay: f64) -> Result<Self> {
        let bad = |field: &str, reason: String| Error::Config {
            field: format!("optimizer.{field}"),
            reason,
        };
        if !(schedule.base_lr.is_finite() && schedule.base_lr > 0.0) {
            return Err(bad("lr", format!("must be positive, got {}", schedule.base_lr)));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(bad("weight_decay", format!("must be non-negative, got {weight_decay}")));
        }
        match kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(bad("kind", "adam betas must lie in [0, 1)".into()));
                }
                if !(eps > 0.0) {
                    return Err(bad("kind", "adam eps must be positive".into()));
                }
            }
            OptimizerKind::SgdMomentum { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(bad("kind", "momentum must lie in [0, 1)".into()));
                }
            }
        }
        Ok(Self {
            kind,
            schedule,
            weight_decay,
            policy: NonFinitePolicy::Reject,
            step: 0,
            epoch: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn with_policy(mut self, policy: NonFinitePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr_at(self.epoch)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Second-moment estimates (Adam only).
    pub fn second_moments(&self) -> &[Option<Tensor<T>>] {
        &self.second
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<StepReport> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: grads.len(),
            });
        }
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        let mut report = StepReport::default();
        let mut live = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            g.expect_shape(p.shape(), "gradient shape")?;
            if g.data().iter().any(|v| !v.is_finite()) {
                match self.policy {
                    NonFinitePolicy::Reject => return Err(Error::NonFiniteGradient(format!("#{i}"))),
                    NonFinitePolicy::SkipParam => {
                        report.skipped.push(i);
                        continue;
                    }
                }
            }
            live.push(i);
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = T::of(self.lr());
        let wd = T::of(self.weight_decay);
        for i in live {
            let g = grads[i].as_ref().expect("live gradient");
            let p = &mut params[i];
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(p.shape()));
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(p.shape()));
                    let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let c1 = T::one() - b1.powi(t);
                    let c2 = T::one() - b2.powi(t);
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((w, &gi), mi), vi) in it {
                        let gi = gi + wd * *w;
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *w -= lr * mh / (vh.sqrt() + e);
                    }
                }
                OptimizerKind::SgdMomentum { momentum, nesterov } => {
                    let mu = T::of(momentum);
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                        let gi = gi + wd * *w;
                        *vi = mu * *vi + gi;
                        let d = if nesterov { gi + mu * *vi } else { *vi };
                        *w -= lr * d;
                    }
                }
            }
            report.updated += 1;
        }
        Ok(report)
    }
}
