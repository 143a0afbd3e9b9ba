//! Batch and layer normalization kernels.

use crate::error::{Error, Result};

use super::{Mode, Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
enum Layout {
    /// `[B, C, spatial...]`, statistics per channel.
    Channel {
        batch: usize,
        channels: usize,
        inner: usize,
        batch_stats: bool,
    },
    /// `[rows, C]`, statistics per row.
    LastAxis { rows: usize, channels: usize },
}

pub(crate) struct NormSaved<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    layout: Layout,
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, the convention for running estimates.
    pub var_unbiased: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running(&self, mean: &mut Tensor<T>, var: &mut Tensor<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &m) in mean.data_mut().iter_mut().zip(&self.mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in var.data_mut().iter_mut().zip(&self.var_unbiased) {
            *r = keep * *r + momentum * v;
        }
    }
}

pub(crate) struct NormGrads<T> {
    pub x: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn check_affine<T: Real>(op: &'static str, c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] {
        return Err(Error::shape(op, gamma.shape(), &[c]));
    }
    if beta.shape() != [c] {
        return Err(Error::shape(op, beta.shape(), &[c]));
    }
    Ok(())
}

pub(crate) fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    mode: Mode,
) -> Result<(Tensor<T>, NormSaved<T>, Option<BatchStats<T>>)> {
    if x.rank() < 2 {
        return Err(Error::shape("batch_norm", x.shape(), &[]));
    }
    let (batch, channels) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    check_affine("batch_norm", channels, gamma, beta)?;
    check_affine("batch_norm running stats", channels, running_mean, running_var)?;
    let batch_stats = mode == Mode::Train;
    if batch_stats && batch < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch norm in train mode needs batch >= 2, got {batch}"
        )));
    }
    let xd = x.data();
    let n = batch * inner;
    let n_t = T::from_usize(n).expect("count fits");
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    let mut var_unbiased = vec![T::zero(); channels];
    if batch_stats {
        for c in 0..channels {
            let chunks = (0..batch).map(|b| &xd[(b * channels + c) * inner..][..inner]);
            let m = chunks.clone().flatten().copied().sum::<T>() / n_t;
            let ss: T = chunks.flatten().map(|&v| (v - m) * (v - m)).sum();
            mean[c] = m;
            var[c] = ss / n_t;
            var_unbiased[c] = ss / T::from_usize(n - 1).expect("count fits");
        }
    } else {
        mean.copy_from_slice(running_mean.data());
        var.copy_from_slice(running_var.data());
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * inner;
            let (m, s, gm, bt) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            for i in off..off + inner {
                let h = (xd[i] - m) * s;
                xhat.data_mut()[i] = h;
                out.data_mut()[i] = gm * h + bt;
            }
        }
    }
    let saved = NormSaved {
        xhat,
        inv_std,
        layout: Layout::Channel {
            batch,
            channels,
            inner,
            batch_stats,
        },
    };
    let stats = batch_stats.then_some(BatchStats { mean, var_unbiased });
    Ok((out, saved, stats))
}

pub(crate) fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormSaved<T>)> {
    let Some(&channels) = x.shape().last() else {
        return Err(Error::shape("layer_norm", x.shape(), &[]));
    };
    check_affine("layer_norm", channels, gamma, beta)?;
    let rows = x.numel() / channels.max(1);
    let c_t = T::from_usize(channels).expect("count fits");
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(rows);
    for (r, row) in x.data().chunks_exact(channels).enumerate() {
        let m = row.iter().copied().sum::<T>() / c_t;
        let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / c_t;
        let s = T::one() / (v + eps).sqrt();
        inv_std.push(s);
        let off = r * channels;
        for (j, &a) in row.iter().enumerate() {
            let h = (a - m) * s;
            xhat.data_mut()[off + j] = h;
            out.data_mut()[off + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    let saved = NormSaved {
        xhat,
        inv_std,
        layout: Layout::LastAxis { rows, channels },
    };
    Ok((out, saved))
}

pub(crate) fn backward<T: Real>(saved: &NormSaved<T>, gamma: &Tensor<T>, g: &Tensor<T>) -> Result<NormGrads<T>> {
    let xh = saved.xhat.data();
    let gd = g.data();
    let gm = gamma.data();
    let mut dx = Tensor::zeros(saved.xhat.shape());
    match saved.layout {
        Layout::Channel {
            batch,
            channels,
            inner,
            batch_stats,
        } => {
            let mut dgamma = vec![T::zero(); channels];
            let mut dbeta = vec![T::zero(); channels];
            let idx = |b: usize, c: usize| (b * channels + c) * inner;
            for c in 0..channels {
                for b in 0..batch {
                    let off = idx(b, c);
                    for i in off..off + inner {
                        dgamma[c] += gd[i] * xh[i];
                        dbeta[c] += gd[i];
                    }
                }
            }
            let n_t = T::from_usize(batch * inner).expect("count fits");
            let dxd = dx.data_mut();
            for c in 0..channels {
                let s = saved.inv_std[c];
                // Σ dxhat = γ·Σg and Σ dxhat·xhat = γ·Σ g·xhat
                let (sum_d, sum_dx) = (gm[c] * dbeta[c], gm[c] * dgamma[c]);
                for b in 0..batch {
                    let off = idx(b, c);
                    for i in off..off + inner {
                        let dxhat = gd[i] * gm[c];
                        dxd[i] = if batch_stats {
                            s / n_t * (n_t * dxhat - sum_d - xh[i] * sum_dx)
                        } else {
                            dxhat * s
                        };
                    }
                }
            }
            Ok(NormGrads {
                x: dx,
                gamma: Tensor::new(vec![channels], dgamma)?,
                beta: Tensor::new(vec![channels], dbeta)?,
            })
        }
        Layout::LastAxis { rows, channels } => {
            let mut dgamma = vec![T::zero(); channels];
            let mut dbeta = vec![T::zero(); channels];
            let c_t = T::from_usize(channels).expect("count fits");
            let dxd = dx.data_mut();
            for r in 0..rows {
                let off = r * channels;
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for j in 0..channels {
                    let i = off + j;
                    dgamma[j] += gd[i] * xh[i];
                    dbeta[j] += gd[i];
                    let dxhat = gd[i] * gm[j];
                    sum_d += dxhat;
                    sum_dx += dxhat * xh[i];
                }
                let s = saved.inv_std[r];
                for j in 0..channels {
                    let i = off + j;
                    let dxhat = gd[i] * gm[j];
                    dxd[i] = s / c_t * (c_t * dxhat - sum_d - xh[i] * sum_dx);
                }
            }
            Ok(NormGrads {
                x: dx,
                gamma: Tensor::new(vec![channels], dgamma)?,
                beta: Tensor::new(vec![channels], dbeta)?,
            })
        }
    }
}
