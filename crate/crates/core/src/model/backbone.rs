//! Hierarchical window-attention backbone.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{ConvSpec, Graph, Real, Tensor, Var};

use super::layers::{BatchNorm, Conv, LayerNorm, Linear, LoraLinear, LoraSpec};
use super::params::{Init, ParamId, Session};

/// Geometry of a window partition, needed to undo it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub window: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl WindowLayout {
    pub fn new(shape: &[usize], window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("window size must be positive"));
        }
        let &[batch, height, width, channels] = shape else {
            return Err(Error::shape("window_partition", shape, &[0, 0, 0, 0]));
        };
        Ok(Self {
            batch,
            height,
            width,
            channels,
            window,
            padded_height: height.div_ceil(window) * window,
            padded_width: width.div_ceil(window) * window,
        })
    }

    pub fn windows_per_image(&self) -> usize {
        (self.padded_height / self.window) * (self.padded_width / self.window)
    }

    pub fn is_padded(&self) -> bool {
        self.padded_height != self.height || self.padded_width != self.width
    }

    /// `[B·N_w, 1, 1, M²]` additive key mask: 0 for real tokens, −∞ for
    /// padding. `None` when nothing is padded.
    pub fn key_mask<T: Real>(&self) -> Option<Tensor<T>> {
        if !self.is_padded() {
            return None;
        }
        let m = self.window;
        let (nh, nw) = (self.padded_height / m, self.padded_width / m);
        let mut data = Vec::with_capacity(self.batch * nh * nw * m * m);
        for _ in 0..self.batch {
            for wy in 0..nh {
                for wx in 0..nw {
                    for ty in 0..m {
                        for tx in 0..m {
                            let real = wy * m + ty < self.height && wx * m + tx < self.width;
                            data.push(if real { T::zero() } else { T::neg_infinity() });
                        }
                    }
                }
            }
        }
        Some(Tensor::new(vec![self.batch * nh * nw, 1, 1, m * m], data).expect("mask shape"))
    }
}

/// `[B, H, W, C] → [B·N_w, M², C]`, zero-padding H and W up to multiples
/// of `M`.
pub fn window_partition<T: Real>(g: &mut Graph<T>, x: Var, window: usize) -> Result<(Var, WindowLayout)> {
    let l = WindowLayout::new(g.shape(x), window)?;
    let x = if l.is_padded() {
        g.pad(
            x,
            &[
                (0, 0),
                (0, l.padded_height - l.height),
                (0, l.padded_width - l.width),
                (0, 0),
            ],
        )?
    } else {
        x
    };
    let m = window;
    let (nh, nw) = (l.padded_height / m, l.padded_width / m);
    let x = g.reshape(x, &[l.batch, nh, m, nw, m, l.channels])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = g.reshape(x, &[l.batch * nh * nw, m * m, l.channels])?;
    Ok((x, l))
}

/// Inverse of [`window_partition`], cropping any padding.
pub fn window_reverse<T: Real>(g: &mut Graph<T>, windows: Var, layout: &WindowLayout) -> Result<Var> {
    let l = layout;
    let m = l.window;
    let (nh, nw) = (l.padded_height / m, l.padded_width / m);
    let shape = g.shape(windows);
    let c = *shape.last().unwrap_or(&0);
    if shape.len() != 3 || shape[0] != l.batch * nh * nw || shape[1] != m * m {
        return Err(Error::shape("window_reverse", shape, &[l.batch * nh * nw, m * m, c]));
    }
    let x = g.reshape(windows, &[l.batch, nh, nw, m, m, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = g.reshape(x, &[l.batch, l.padded_height, l.padded_width, c])?;
    if !l.is_padded() {
        return Ok(x);
    }
    g.crop(x, &[(0, l.batch), (0, l.height), (0, l.width), (0, c)])
}

/// Index into the `(2M−1)²` offset table for every ordered token pair of an
/// `M × M` window, row-major over `(query, key)`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let m = window as isize;
    let span = 2 * m - 1;
    let n = window * window;
    let mut idx = Vec::with_capacity(n * n);
    for q in 0..n as isize {
        for k in 0..n as isize {
            let dy = q / m - k / m + m - 1;
            let dx = q % m - k % m + m - 1;
            idx.push((dy * span + dx) as usize);
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct RelPosBias {
    /// `(2M−1)² × heads`.
    pub table: ParamId,
    pub index: Rc<[usize]>,
    pub window: usize,
    pub heads: usize,
}

impl RelPosBias {
    pub(crate) fn new<T: Real>(init: &mut Init<T>, name: &str, window: usize, heads: usize) -> Result<Self> {
        let span = 2 * window - 1;
        Ok(Self {
            table: init.normal(&format!("{name}.table"), &[span * span, heads], 0.02)?,
            index: relative_position_index(window).into(),
            window,
            heads,
        })
    }

    /// `[heads, M², M²]` bias.
    pub fn forward<T: Real>(&self, s: &mut Session<T>) -> Result<Var> {
        let n = self.window * self.window;
        let t = s.param(self.table);
        let rows = s.g.gather_rows(t, self.index.clone())?;
        let b = s.g.permute(rows, &[1, 0])?;
        s.g.reshape(b, &[self.heads, n, n])
    }
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub qkv: LoraLinear,
    pub proj: LoraLinear,
    pub bias: RelPosBias,
}

impl WindowAttention {
    pub(crate) fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        lora: LoraSpec,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("channel dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            dim,
            heads,
            qkv: LoraLinear::new(init, &format!("{name}.qkv"), dim, 3 * dim, lora)?,
            proj: LoraLinear::new(init, &format!("{name}.proj"), dim, dim, lora)?,
            bias: RelPosBias::new(init, &format!("{name}.rel_bias"), window, heads)?,
        })
    }

    /// Attention probabilities `[B_w, heads, M², M²]` and the per-head
    /// outputs `[B_w, heads, M², d_k]`.
    pub fn attention_maps<T: Real>(&self, s: &mut Session<T>, windows: Var, mask: Option<Var>) -> Result<(Var, Var)> {
        let shape = s.g.shape(windows).to_vec();
        let &[bw, n, c] = shape.as_slice() else {
            return Err(Error::shape("window_attention", &shape, &[0, 0, self.dim]));
        };
        if c != self.dim {
            return Err(Error::shape("window_attention", &shape, &[bw, n, self.dim]));
        }
        let dk = c / self.heads;
        let qkv = self.qkv.forward(s, windows)?;
        let qkv = s.g.reshape(qkv, &[bw, n, 3, self.heads, dk])?;
        let qkv = s.g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let split = |s: &mut Session<T>, i: usize| -> Result<Var> {
            let part = s.g.narrow(qkv, 0, i, 1)?;
            s.g.reshape(part, &[bw, self.heads, n, dk])
        };
        let q = split(s, 0)?;
        let k = split(s, 1)?;
        let v = split(s, 2)?;
        let q = s.g.scale(q, T::lit(1.0 / (dk as f64).sqrt()));
        let logits = s.g.matmul_t(q, k, false, true)?;
        let bias = self.bias.forward(s)?;
        let mut logits = s.g.add_bcast(logits, bias)?;
        if let Some(m) = mask {
            logits = s.g.add_bcast(logits, m)?;
        }
        let attn = s.g.softmax(logits, 3)?;
        let out = s.g.matmul(attn, v)?;
        Ok((attn, out))
    }

    /// `[B_w, M², C] → [B_w, M², C]`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, windows: Var, mask: Option<Var>) -> Result<Var> {
        let shape = s.g.shape(windows).to_vec();
        let (_, out) = self.attention_maps(s, windows, mask)?;
        let out = s.g.permute(out, &[0, 2, 1, 3])?;
        let out = s.g.reshape(out, &shape)?;
        self.proj.forward(s, out)
    }
}

/// `(swish(x·W₁) ⊙ x·W₂)·W₃`.
#[derive(Clone, Debug)]
pub struct SwiGlu {
    pub w1: Linear,
    pub w2: Linear,
    pub w3: Linear,
}

impl SwiGlu {
    pub(crate) fn new<T: Real>(init: &mut Init<T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(init, &format!("{name}.w1"), dim, hidden, true)?,
            w2: Linear::new(init, &format!("{name}.w2"), dim, hidden, true)?,
            w3: Linear::new(init, &format!("{name}.w3"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let a = self.w1.forward(s, x)?;
        let a = s.g.swish(a);
        let b = self.w2.forward(s, x)?;
        let h = s.g.mul(a, b)?;
        self.w3.forward(s, h)
    }
}

/// Per-sample stochastic depth on a `[B, ...]` branch.
pub fn drop_path<T: Real>(s: &mut Session<T>, x: Var, rate: f64) -> Result<Var> {
    let shape = s.g.shape(x).to_vec();
    let mut mask = vec![1; shape.len()];
    mask[0] = shape[0];
    s.dropout_shaped(x, rate, &mask)
}

/// Learnable scalars of a recharge residual `γ·x + β + branch`.
#[derive(Clone, Debug)]
pub struct Recharge {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Recharge {
    fn new<T: Real>(init: &mut Init<T>, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: init.ones(&format!("{name}.gamma"), &[1])?,
            beta: init.zeros(&format!("{name}.beta"), &[1])?,
        })
    }

    fn forward<T: Real>(&self, s: &mut Session<T>, x: Var, branch: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let y = s.g.mul_bcast(x, g)?;
        let y = s.g.add_bcast(y, b)?;
        s.g.add(y, branch)
    }
}

#[derive(Clone, Debug)]
pub struct GcvitBlock {
    pub window: usize,
    pub drop_path: f64,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub recharge_attn: Recharge,
    pub norm2: LayerNorm,
    pub ffn: SwiGlu,
    pub recharge_ffn: Recharge,
}

impl GcvitBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        drop_path: f64,
        lora: LoraSpec,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_path) {
            return Err(Error::config(format!("drop path rate must be in [0, 1), got {drop_path}")));
        }
        Ok(Self {
            window,
            drop_path,
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim)?,
            attn: WindowAttention::new(init, &format!("{name}.attn"), dim, heads, window, lora)?,
            recharge_attn: Recharge::new(init, &format!("{name}.recharge_attn"))?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim)?,
            ffn: SwiGlu::new(init, &format!("{name}.ffn"), dim, mlp_ratio * dim)?,
            recharge_ffn: Recharge::new(init, &format!("{name}.recharge_ffn"))?,
        })
    }

    /// `[B, H, W, C] → [B, H, W, C]`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let xn = self.norm1.forward(s, x)?;
        let (win, layout) = window_partition(s.g, xn, self.window)?;
        let mask = layout.key_mask().map(|m| s.g.constant(m));
        let a = self.attn.forward(s, win, mask)?;
        let a = window_reverse(s.g, a, &layout)?;
        let a = drop_path(s, a, self.drop_path)?;
        let y1 = self.recharge_attn.forward(s, x, a)?;

        let yn = self.norm2.forward(s, y1)?;
        let f = self.ffn.forward(s, yn)?;
        let f = drop_path(s, f, self.drop_path)?;
        self.recharge_ffn.forward(s, y1, f)
    }
}

/// Squeeze-excitation gate `σ(W_up·swish(W_down·GAP(x)))` over axis 1 of
/// `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub down: Linear,
    pub up: Linear,
}

impl SqueezeExcite {
    fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize) -> Result<Self> {
        let r = (channels / 4).max(1);
        Ok(Self {
            down: Linear::new(init, &format!("{name}.down"), channels, r, true)?,
            up: Linear::new(init, &format!("{name}.up"), r, channels, true)?,
        })
    }

    pub fn gates<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let z = s.g.mean(x, &[2, 3], false)?;
        let h = self.down.forward(s, z)?;
        let h = s.g.swish(h);
        let a = self.up.forward(s, h)?;
        Ok(s.g.sigmoid(a))
    }
}

/// Downsampling between stages: `[B, H, W, C] → [B, ⌈H/2⌉, ⌈W/2⌉, 2C]`.
#[derive(Clone, Debug)]
pub struct ReduceSize {
    pub channels: usize,
    pub depthwise: Conv,
    pub se: SqueezeExcite,
    pub pointwise: Conv,
    pub bn: BatchNorm,
    pub reduce: Conv,
}

impl ReduceSize {
    pub(crate) fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize) -> Result<Self> {
        let out = 2 * channels;
        Ok(Self {
            channels,
            depthwise: Conv::new(
                init,
                &format!("{name}.depthwise"),
                &[channels, 1, 3, 3],
                ConvSpec::depthwise2d(channels, 1, 1),
                true,
            )?,
            se: SqueezeExcite::new(init, &format!("{name}.se"), channels)?,
            pointwise: Conv::new(init, &format!("{name}.pointwise"), &[out, channels, 1, 1], ConvSpec::conv2d(1, 0), false)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), out)?,
            reduce: Conv::new(init, &format!("{name}.reduce"), &[out, out, 3, 3], ConvSpec::conv2d(2, 1), true)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let shape = s.g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.channels || shape[1] < 2 || shape[2] < 2 {
            return Err(Error::shape("reduce_size", &shape, &[0, 2, 2, self.channels]));
        }
        let xc = s.g.permute(x, &[0, 3, 1, 2])?;
        let d = self.depthwise.forward(s, xc)?;
        let d = s.g.swish(d);
        let x2 = s.g.add(xc, d)?;
        let gates = self.se.gates(s, x2)?;
        let gates = s.g.reshape(gates, &[shape[0], shape[3], 1, 1])?;
        let x3 = s.g.mul_bcast(x2, gates)?;
        let p = self.pointwise.forward(s, x3)?;
        let p = self.bn.forward(s, p)?;
        let r = self.reduce.forward(s, p)?;
        s.g.permute(r, &[0, 2, 3, 1])
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub dim: usize,
    pub blocks: Vec<GcvitBlock>,
    pub reduce: Option<ReduceSize>,
}

impl Stage {
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let x = self.blocks.iter().try_fold(x, |h, b| b.forward(s, h))?;
        match &self.reduce {
            Some(r) => r.forward(s, x),
            None => Ok(x),
        }
    }
}

/// Drop-path rate of every block, ramping linearly from 0 to `max` across
/// all blocks.
pub fn drop_path_schedule(total_blocks: usize, max: f64) -> Vec<f64> {
    match total_blocks {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_layout_padding() {
        let l = WindowLayout::new(&[1, 4, 4, 8], 7).unwrap();
        assert_eq!((l.padded_height, l.padded_width, l.windows_per_image()), (7, 7, 1));
        let l = WindowLayout::new(&[2, 14, 14, 8], 7).unwrap();
        assert_eq!(l.windows_per_image(), 4);
        assert!(l.key_mask::<f32>().is_none());
        assert!(WindowLayout::new(&[1, 4, 4, 8], 0).is_err());
    }

    #[test]
    fn relative_index_self_offset_is_centre() {
        let m = 3;
        let idx = relative_position_index(m);
        let centre = (m - 1) * (2 * m - 1) + (m - 1);
        for i in 0..m * m {
            assert_eq!(idx[i * m * m + i], centre);
        }
        // Negating the offset mirrors the index about the centre.
        let n = m * m;
        let span = 2 * m - 1;
        for q in 0..n {
            for k in 0..n {
                assert_eq!(idx[q * n + k] + idx[k * n + q], 2 * centre);
                assert!(idx[q * n + k] < span * span);
            }
        }
    }

    #[test]
    fn drop_path_ramp() {
        let r = drop_path_schedule(26, 0.2);
        assert_eq!(r[0], 0.0);
        assert!((r[25] - 0.2).abs() < 1e-15);
        assert_eq!(drop_path_schedule(1, 0.2), vec![0.0]);
    }
}
