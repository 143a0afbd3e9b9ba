//! Parameterized building blocks: dense and LoRA-adapted linear maps,
//! normalization and convolution wrappers.

use crate::error::{Error, Result};
use crate::numerics::{ConvSpec, Real, Tensor, Var};

use super::params::{Init, ParamId, Session};

/// Applies a `[d_in, d_out]` matrix to the last axis of `x`.
fn apply_last_axis<T: Real>(s: &mut Session<T>, x: Var, w: Var) -> Result<Var> {
    let shape = s.g.shape(x).to_vec();
    let d_in = *shape.last().ok_or_else(|| Error::shape("linear", &shape, &[]))?;
    let d_out = s.g.shape(w)[1];
    let rows = shape.iter().product::<usize>() / d_in.max(1);
    let flat = if shape.len() == 2 { x } else { s.g.reshape(x, &[rows, d_in])? };
    let y = s.g.matmul(flat, w)?;
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = d_out;
    s.g.reshape(y, &out_shape)
}

/// `y = x·W + b` over the last axis, `W: d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub(crate) fn new<T: Real>(init: &mut Init<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = init.fan_in_uniform(&format!("{name}.weight"), &[d_in, d_out], d_in)?;
        let bias = if bias {
            Some(init.zeros(&format!("{name}.bias"), &[d_out])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let last = s.g.shape(x).last().copied();
        if last != Some(self.d_in) {
            return Err(Error::shape("linear", s.g.shape(x), &[self.d_in, self.d_out]));
        }
        let w = s.param(self.weight);
        let y = apply_last_axis(s, x, w)?;
        match self.bias {
            Some(b) => {
                let bv = s.param(b);
                s.g.add_bcast(y, bv)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraSpec {
    /// Rank `r`; 0 builds a plain linear map without adapters.
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
        }
    }
}

/// Linear map with a low-rank residual:
/// `y = x·W + b + (α/r)·γ·dropout(x·A)·B`, `A: d_in × r`, `B: r × d_out`.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    /// `(A, B)`, absent for rank 0.
    pub adapter: Option<(ParamId, ParamId)>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Cyclical multiplier set by the scheduler.
    pub gamma: f64,
    /// Set once `A·B` has been folded into `W`.
    pub merged: bool,
}

impl LoraLinear {
    pub(crate) fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        spec: LoraSpec,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::config(format!("LoRA dropout must be in [0, 1), got {}", spec.dropout)));
        }
        let base = Linear::new(init, name, d_in, d_out, true)?;
        let adapter = if spec.rank == 0 {
            None
        } else {
            if spec.rank >= d_in.min(d_out) {
                init.warnings.push(format!(
                    "{name}: LoRA rank {} >= min(d_in, d_out) = {}; the update is not low-rank",
                    spec.rank,
                    d_in.min(d_out)
                ));
            }
            let a = init.normal(&format!("{name}.lora_a"), &[d_in, spec.rank], 1.0 / (d_in as f64).sqrt())?;
            let b = init.zeros(&format!("{name}.lora_b"), &[spec.rank, d_out])?;
            Some((a, b))
        };
        Ok(Self {
            base,
            adapter,
            rank: spec.rank,
            alpha: spec.alpha,
            dropout: spec.dropout,
            gamma: 1.0,
            merged: false,
        })
    }

    /// Effective adapter scale `(α/r)·γ`; 0 without adapters.
    pub fn scale(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f64 * self.gamma
        }
    }

    /// Adapter parameter count `r·(d_in + d_out)`.
    pub fn adapter_params(&self) -> usize {
        self.rank * (self.base.d_in + self.base.d_out)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.base.forward(s, x)?;
        let Some((a, b)) = self.adapter else {
            return Ok(y);
        };
        let av = s.param(a);
        let bv = s.param(b);
        let h = apply_last_axis(s, x, av)?;
        let h = s.dropout(h, self.dropout)?;
        let up = apply_last_axis(s, h, bv)?;
        let up = s.g.scale(up, T::lit(self.scale()));
        s.g.add(y, up)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<T: Real>(init: &mut Init<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.ones(&format!("{name}.gamma"), &[dim])?,
            beta: init.zeros(&format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        s.layer_norm(x, self.gamma, self.beta)
    }
}

/// Batch normalization over axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub ids: [ParamId; 4],
}

impl BatchNorm {
    pub(crate) fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            ids: [
                init.ones(&format!("{name}.gamma"), &[channels])?,
                init.zeros(&format!("{name}.beta"), &[channels])?,
                init.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
                init.buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            ],
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        s.batch_norm(x, self.ids)
    }
}

/// Convolution with `[C_out, C_in/groups, k...]` weights.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    pub(crate) fn new<T: Real>(
        init: &mut Init<T>,
        name: &str,
        shape: &[usize],
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        let fan_in: usize = shape[1..].iter().product();
        let weight = init.fan_in_uniform(&format!("{name}.weight"), shape, fan_in)?;
        let bias = if bias {
            Some(init.zeros(&format!("{name}.bias"), &[shape[0]])?)
        } else {
            None
        };
        Ok(Self { weight, bias, spec })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.g.conv(x, w, b, &self.spec)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::params::ParamStore;
    use crate::numerics::{Graph, Mode};

    #[test]
    fn lora_scale_from_alpha_rank_gamma() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut store, &mut rng);
        let mut l = LoraLinear::new(&mut init, "l", 96, 96, LoraSpec::default()).unwrap();
        assert_eq!(l.scale(), 2.0);
        l.gamma = 0.8;
        assert!((l.scale() - 1.6).abs() < 1e-15);
        assert!(init.warnings.is_empty());
        LoraLinear::new(&mut init, "tiny", 8, 4, LoraSpec::default()).unwrap();
        assert_eq!(init.warnings.len(), 1);
    }

    #[test]
    fn zero_b_leaves_base_output_exact() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut init = Init::new(&mut store, &mut rng);
        let l = LoraLinear::new(&mut init, "l", 5, 3, LoraSpec { rank: 2, alpha: 4.0, dropout: 0.0 }).unwrap();
        let x = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.37).sin());
        let mut outs = Vec::new();
        for with_adapter in [true, false] {
            let mut g = Graph::new();
            let mut s = Session::new(&mut g, &mut store, Mode::Eval, &mut rng);
            let xv = s.g.constant(x.clone());
            let y = if with_adapter { l.forward(&mut s, xv) } else { l.base.forward(&mut s, xv) }.unwrap();
            outs.push(g.value(y).clone());
        }
        assert_eq!(outs[0], outs[1]);
    }
}
