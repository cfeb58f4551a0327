use serde::{Deserialize, Serialize};

use super::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnBuffers<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Set once statistics are final; lowering refuses unfrozen layers.
    pub frozen: bool,
}

impl<T: Real> BnBuffers<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("batch norm eps must be positive".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidArgument("batch norm momentum must lie in (0, 1)".into()));
        }
        if self.running_var.iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidArgument("running variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// A batch-norm layer: trainable affine parameters plus running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Index into the owning model's buffer list.
    pub buffers: usize,
}

/// Per-channel mean and biased variance over (n, h, w).
fn channel_stats<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w) = x.nchw()?;
    let m = n * h * w;
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let plane = h * w;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for s_i in 0..n {
            let off = (s_i * c + ch) * plane;
            s += x.data()[off..off + plane].iter().copied().sum::<T>();
        }
        let mu = s / T::of(m as f64);
        let mut v = T::zero();
        for s_i in 0..n {
            let off = (s_i * c + ch) * plane;
            for &val in &x.data()[off..off + plane] {
                v += (val - mu) * (val - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / T::of(m as f64);
    }
    Ok((mean, var))
}

impl<T: Real> Tape<T> {
    /// Batch normalization over NCHW input. Training mode normalizes with batch
    /// statistics and updates `buffers`; eval mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        buffers: &mut BnBuffers<T>,
        training: bool,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        let (n, c, h, w) = xv.nchw()?;
        if c != buffers.channels() || self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::ShapeMismatch {
                context: "batch norm channels",
                expected: vec![buffers.channels()],
                actual: vec![c],
            });
        }
        let m = n * h * w;
        if m == 0 {
            return Err(Error::EmptyBatch);
        }
        let eps = T::of(buffers.eps);
        let (mean, var) = if training {
            let (mean, var) = channel_stats(&xv)?;
            let mom = T::of(buffers.momentum);
            let unbias = if m > 1 { T::of(m as f64 / (m as f64 - 1.0)) } else { T::one() };
            for ch in 0..c {
                buffers.running_mean[ch] = (T::one() - mom) * buffers.running_mean[ch] + mom * mean[ch];
                buffers.running_var[ch] = (T::one() - mom) * buffers.running_var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (buffers.running_mean.clone(), buffers.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let plane = h * w;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        let shape = xv.shape().to_vec();
        Ok(self.push("batch_norm", out, &[x, gamma, beta], move || {
            move |dy: &Tensor<T>| {
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxh = vec![T::zero(); c];
                let mut sum_dxh_xh = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for i in off..off + plane {
                            let g = dy.data()[i];
                            dgamma[ch] += g * xhat[i];
                            dbeta[ch] += g;
                            let dxh = g * gv[ch];
                            sum_dxh[ch] += dxh;
                            sum_dxh_xh[ch] += dxh * xhat[i];
                        }
                    }
                }
                let mf = T::of(m as f64);
                let mut dx = vec![T::zero(); dy.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for i in off..off + plane {
                            let dxh = dy.data()[i] * gv[ch];
                            dx[i] = if training {
                                inv_std[ch] / mf * (mf * dxh - sum_dxh[ch] - xhat[i] * sum_dxh_xh[ch])
                            } else {
                                dxh * inv_std[ch]
                            };
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&shape, dx).expect("bn dx")),
                    Some(Tensor::from_vec(&[c], dgamma).expect("bn dgamma")),
                    Some(Tensor::from_vec(&[c], dbeta).expect("bn dbeta")),
                ]
            }
        }))
    }
}
