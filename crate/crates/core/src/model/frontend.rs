//! Spectral front-end: 3-D convolution stack, band dropout, spectral
//! channel attention, spectral pooling and patch embedding.

use crate::error::{Error, Result};
use crate::numerics::{conv_out_extent, ConvSpec, Real, Var};

use super::layers::{BatchNorm, Conv, Linear};
use super::params::{Init, ParamId, Session};

/// Spectral kernel depths of the three 3-D convolutions.
pub const SPECTRAL_KERNELS: [usize; 3] = [7, 5, 3];
/// Bands consumed by the unpadded spectral convolutions.
pub const SPECTRAL_SHRINK: usize = 12;
const STACK_CHANNELS: [usize; 2] = [32, 64];

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.g.swish(y))
    }
}

#[derive(Clone, Debug)]
pub struct SpectralFrontend {
    pub bands: usize,
    pub patch: usize,
    pub dim: usize,
    pub band_drop: f64,
    pub pos_drop: f64,
    pub convs: Vec<ConvBn>,
    pub att_down: Linear,
    pub att_up: Linear,
    pub embed: ConvBn,
    pub pos: ParamId,
}

/// Token grid side after the 4×4 stride-2 pad-1 embedding.
pub fn embed_extent(p: usize) -> Option<usize> {
    conv_out_extent(p, 4, 2, 1)
}

impl SpectralFrontend {
    pub(crate) fn new<T: Real>(
        init: &mut Init<T>,
        bands: usize,
        patch: usize,
        dim: usize,
        band_drop: f64,
        pos_drop: f64,
    ) -> Result<Self> {
        if bands <= SPECTRAL_SHRINK {
            return Err(Error::config(format!(
                "{bands} bands cannot pass the spectral kernel stack {SPECTRAL_KERNELS:?}; need at least {}",
                SPECTRAL_SHRINK + 1
            )));
        }
        if patch < 4 {
            return Err(Error::config(format!("patch size {patch} is below the 4x4 embedding kernel")));
        }
        if dim < 4 {
            return Err(Error::config(format!("embedding dim {dim} too small for the attention bottleneck")));
        }
        for (name, p) in [("band_drop", band_drop), ("pos_drop", pos_drop)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        let chans = [1, STACK_CHANNELS[0], STACK_CHANNELS[1], dim];
        let mut convs = Vec::with_capacity(3);
        for (i, &kd) in SPECTRAL_KERNELS.iter().enumerate() {
            let name = format!("frontend.conv{}", i + 1);
            convs.push(ConvBn {
                conv: Conv::new(
                    init,
                    &name,
                    &[chans[i + 1], chans[i], kd, 3, 3],
                    ConvSpec::new(&[1, 1, 1], &[0, 1, 1], 1),
                    false,
                )?,
                bn: BatchNorm::new(init, &format!("{name}.bn"), chans[i + 1])?,
            });
        }
        let r = dim / 4;
        let att_down = Linear::new(init, "frontend.attn.down", dim, r, true)?;
        let att_up = Linear::new(init, "frontend.attn.up", r, dim, true)?;
        let embed = ConvBn {
            conv: Conv::new(init, "frontend.embed", &[dim, dim, 4, 4], ConvSpec::conv2d(2, 1), false)?,
            bn: BatchNorm::new(init, "frontend.embed.bn", dim)?,
        };
        let side = embed_extent(patch).expect("patch >= 4");
        let pos = init.normal("frontend.pos", &[side, side, dim], 0.02)?;
        Ok(Self {
            bands,
            patch,
            dim,
            band_drop,
            pos_drop,
            convs,
            att_down,
            att_up,
            embed,
            pos,
        })
    }

    /// `[B, 1, k, p, p] → [B, dim, k − 12, p, p]`.
    pub fn conv_stack<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let shape = s.g.shape(x);
        if shape.len() != 5 || shape[1] != 1 {
            return Err(Error::shape("spectral_conv_stack", shape, &[0, 1, self.bands, self.patch, self.patch]));
        }
        if shape[2] <= SPECTRAL_SHRINK {
            return Err(Error::config(format!(
                "{} bands cannot pass the spectral kernel stack {SPECTRAL_KERNELS:?}",
                shape[2]
            )));
        }
        self.convs.iter().try_fold(x, |h, c| c.forward(s, h))
    }

    /// Channel recalibration `x ⊙ σ(W_up·swish(W_down·GAP(x)))`.
    pub fn spectral_attention<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let shape = s.g.shape(x).to_vec();
        let z = s.g.mean(x, &[2, 3, 4], false)?;
        let h = self.att_down.forward(s, z)?;
        let h = s.g.swish(h);
        let a = self.att_up.forward(s, h)?;
        let a = s.g.sigmoid(a);
        let a = s.g.reshape(a, &[shape[0], shape[1], 1, 1, 1])?;
        s.g.mul_bcast(x, a)
    }

    /// Spectral mean, patch embedding, positional encoding and dropout:
    /// `[B, C, D, H, W] → [B, H', W', dim]`.
    pub fn pool_and_embed<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let shape = s.g.shape(x).to_vec();
        if shape.len() != 5 || shape[3] < 4 || shape[4] < 4 {
            return Err(Error::shape("pool_and_embed", &shape, &[0, self.dim, 0, 4, 4]));
        }
        let pooled = s.g.mean(x, &[2], false)?;
        let e = self.embed.forward(s, pooled)?;
        let tokens = s.g.permute(e, &[0, 2, 3, 1])?;
        let pos = s.param(self.pos);
        let tokens = s.g.add_bcast(tokens, pos)?;
        s.dropout(tokens, self.pos_drop)
    }

    /// `[B, k, p, p]` patches to `[B, H', W', dim]` tokens.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, patches: Var) -> Result<Var> {
        let shape = s.g.shape(patches).to_vec();
        if shape.len() != 4 || shape[1] != self.bands || shape[2] != self.patch || shape[3] != self.patch {
            return Err(Error::shape("frontend", &shape, &[0, self.bands, self.patch, self.patch]));
        }
        let x = s.g.reshape(patches, &[shape[0], 1, shape[1], shape[2], shape[3]])?;
        let x = self.conv_stack(s, x)?;
        let x = band_dropout(s, x, self.band_drop)?;
        let x = self.spectral_attention(s, x)?;
        self.pool_and_embed(s, x)
    }
}

/// Inverted dropout of whole spectral-feature channels (axis 1) with one
/// mask shared by the batch. Identity in eval mode.
pub fn band_dropout<T: Real>(s: &mut Session<T>, x: Var, p: f64) -> Result<Var> {
    let shape = s.g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("band_dropout", &shape, &[0, 0]));
    }
    let mut mask = vec![1; shape.len()];
    mask[1] = shape[1];
    s.dropout_shaped(x, p, &mask)
}
