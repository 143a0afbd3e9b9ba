//! The classifier: spectral front-end, window-attention stages and a
//! LoRA-adapted linear head.

pub mod backbone;
pub mod frontend;
pub mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Mode, Real, Tensor, Var};

use backbone::{drop_path_schedule, GcvitBlock, ReduceSize, Stage};
use frontend::{embed_extent, SpectralFrontend};
use layers::{LayerNorm, LoraLinear, LoraSpec};
use params::{Init, ParamStore, Session};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Spectral depth `k` of the input patches.
    pub bands: usize,
    /// Spatial side `p` of the input patches.
    pub patch: usize,
    pub classes: usize,
    pub dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub lora: LoraSpec,
    pub drop_path: f64,
    pub band_drop: f64,
    pub pos_drop: f64,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bands: 15,
            patch: 15,
            classes: 9,
            dim: 96,
            depths: vec![3, 4, 19],
            heads: vec![4, 8, 16],
            window: 7,
            lora: LoraSpec::default(),
            drop_path: 0.2,
            band_drop: 0.1,
            pos_drop: 0.1,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return Err(Error::config(format!(
                "depths {:?} and heads {:?} must be non-empty and of equal length",
                self.depths, self.heads
            )));
        }
        if self.classes < 1 {
            return Err(Error::config("at least one class is required"));
        }
        if self.window == 0 {
            return Err(Error::config("window size must be positive"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp ratio must be positive"));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let c = self.stage_dim(i);
            if h == 0 || c % h != 0 {
                return Err(Error::config(format!("stage {i}: channel dim {c} is not divisible by {h} heads")));
            }
        }
        if self.patch % 2 == 0 {
            return Err(Error::config(format!("patch size {} must be odd", self.patch)));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config(format!("drop_path must be in [0, 1), got {}", self.drop_path)));
        }
        let mut side = embed_extent(self.patch).unwrap_or(0);
        for _ in 1..self.depths.len() {
            if side < 2 {
                return Err(Error::config(format!(
                    "patch size {} leaves no room for {} stage reductions",
                    self.patch,
                    self.depths.len() - 1
                )));
            }
            side = side.div_ceil(2);
        }
        Ok(())
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.dim << stage
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Token grid side entering each stage.
    pub fn stage_grids(&self) -> Vec<usize> {
        let mut side = embed_extent(self.patch).unwrap_or(0);
        let mut out = Vec::with_capacity(self.depths.len());
        for _ in &self.depths {
            out.push(side);
            side = side.div_ceil(2);
        }
        out
    }
}

/// Architecture: parameter handles plus non-learned settings.
#[derive(Clone, Debug)]
pub struct Network {
    pub frontend: SpectralFrontend,
    pub stages: Vec<Stage>,
    pub head_norm: LayerNorm,
    pub head: LoraLinear,
}

/// Named shapes observed during one forward pass.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

impl Network {
    fn build<T: Real>(cfg: &ModelConfig, init: &mut Init<T>) -> Result<Self> {
        cfg.validate()?;
        let frontend = SpectralFrontend::new(init, cfg.bands, cfg.patch, cfg.dim, cfg.band_drop, cfg.pos_drop)?;
        let rates = drop_path_schedule(cfg.total_blocks(), cfg.drop_path);
        let mut block_idx = 0;
        let mut stages = Vec::with_capacity(cfg.depths.len());
        for (si, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
            let dim = cfg.stage_dim(si);
            let mut blocks = Vec::with_capacity(depth);
            for bi in 0..depth {
                blocks.push(GcvitBlock::new(
                    init,
                    &format!("stages.{si}.blocks.{bi}"),
                    dim,
                    heads,
                    cfg.window,
                    cfg.mlp_ratio,
                    rates[block_idx],
                    cfg.lora,
                )?);
                block_idx += 1;
            }
            let reduce = if si + 1 < cfg.depths.len() {
                Some(ReduceSize::new(init, &format!("stages.{si}.reduce"), dim)?)
            } else {
                None
            };
            stages.push(Stage { dim, blocks, reduce });
        }
        let final_dim = cfg.stage_dim(cfg.depths.len() - 1);
        Ok(Self {
            frontend,
            stages,
            head_norm: LayerNorm::new(init, "head.norm", final_dim)?,
            head: LoraLinear::new(init, "head.fc", final_dim, cfg.classes, cfg.lora)?,
        })
    }

    /// `[B, k, p, p]` patches to `[B, K]` logits, optionally recording
    /// intermediate shapes.
    pub fn forward_traced<T: Real>(
        &self,
        s: &mut Session<T>,
        patches: Var,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var> {
        let mut record = |s: &Session<T>, name: &str, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name.to_string(), s.g.shape(v).to_vec()));
            }
        };
        let shape = s.g.shape(patches).to_vec();
        let f = &self.frontend;
        if shape.len() != 4 || shape[1] != f.bands || shape[2] != f.patch || shape[3] != f.patch {
            return Err(Error::shape("classifier", &shape, &[0, f.bands, f.patch, f.patch]));
        }
        let x = s.g.reshape(patches, &[shape[0], 1, shape[1], shape[2], shape[3]])?;
        let x = f.conv_stack(s, x)?;
        record(s, "spectral", x);
        let x = frontend::band_dropout(s, x, f.band_drop)?;
        let x = f.spectral_attention(s, x)?;
        let mut x = f.pool_and_embed(s, x)?;
        record(s, "tokens", x);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(s, x)?;
            record(s, &format!("stage{}", i + 1), x);
        }
        let x = self.head_norm.forward(s, x)?;
        let pooled = s.g.mean(x, &[1, 2], false)?;
        let logits = self.head.forward(s, pooled)?;
        record(s, "logits", logits);
        Ok(logits)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, patches: Var) -> Result<Var> {
        self.forward_traced(s, patches, None)
    }

    pub fn lora_layers(&self) -> Vec<&LoraLinear> {
        let mut out = Vec::new();
        for st in &self.stages {
            for b in &st.blocks {
                out.push(&b.attn.qkv);
                out.push(&b.attn.proj);
            }
        }
        out.push(&self.head);
        out
    }

    pub fn lora_layers_mut(&mut self) -> Vec<&mut LoraLinear> {
        let mut out = Vec::new();
        for st in &mut self.stages {
            for b in &mut st.blocks {
                out.push(&mut b.attn.qkv);
                out.push(&mut b.attn.proj);
            }
        }
        out.push(&mut self.head);
        out
    }
}

/// Architecture, parameters and train/eval mode.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub net: Network,
    pub store: ParamStore<T>,
    pub mode: Mode,
    /// Construction-time notes such as degenerate LoRA ranks.
    pub warnings: Vec<String>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Stream 0 of the same seed drives training.
        rng.set_stream(1);
        let mut init = Init::new(&mut store, &mut rng);
        let net = Network::build(&config, &mut init)?;
        let warnings = std::mem::take(&mut init.warnings);
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(Self {
            config,
            net,
            store,
            mode: Mode::Train,
            warnings,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Records the forward pass of `patches` on `g` and returns the logits.
    pub fn forward(&mut self, g: &mut Graph<T>, patches: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        let mut s = Session::new(g, &mut self.store, self.mode, rng);
        self.net.forward(&mut s, patches)
    }

    /// Logits of a `[B, k, p, p]` batch.
    pub fn logits(&mut self, patches: Tensor<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(patches);
        let y = self.forward(&mut g, x, rng)?;
        Ok(g.value(y).clone())
    }

    pub fn trace_shapes(&mut self, patches: Tensor<T>, rng: &mut ChaCha8Rng) -> Result<ShapeTrace> {
        let mut g = Graph::new();
        let x = g.constant(patches);
        let mut trace = ShapeTrace::new();
        let mut s = Session::new(&mut g, &mut self.store, self.mode, rng);
        self.net.forward_traced(&mut s, x, Some(&mut trace))?;
        Ok(trace)
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        let ids: Vec<_> = self.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            if let Some(src) = other.id(&name) {
                let v = other.value(src);
                if v.shape() != self.store.value(id).shape() {
                    return Err(Error::shape("copy_matching_from", v.shape(), self.store.value(id).shape()));
                }
                *self.store.value_mut(id) = v.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Index of the largest logit in each row of `[B, K]`.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(lora_rank: usize) -> ModelConfig {
        ModelConfig {
            bands: 15,
            patch: 9,
            classes: 6,
            dim: 16,
            depths: vec![1, 1, 2],
            heads: vec![2, 2, 4],
            window: 4,
            lora: LoraSpec {
                rank: lora_rank,
                ..LoraSpec::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn tiny_shapes() {
        let mut m = Model::<f32>::new(tiny(4), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = m.trace_shapes(Tensor::ones(&[2, 15, 9, 9]), &mut rng).unwrap();
        let shapes: Vec<Vec<usize>> = trace.into_iter().map(|(_, s)| s).collect();
        assert_eq!(
            shapes,
            vec![
                vec![2, 16, 3, 9, 9],
                vec![2, 4, 4, 16],
                vec![2, 2, 2, 32],
                vec![2, 1, 1, 64],
                vec![2, 1, 1, 64],
                vec![2, 6],
            ]
        );
    }

    #[test]
    fn mismatched_depths_and_heads_rejected() {
        let mut c = tiny(4);
        c.heads = vec![2, 2];
        assert!(matches!(Model::<f32>::new(c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_first_max_wins() {
        let t = Tensor::new(vec![2, 3], vec![0.0f32, 2.0, 2.0, 5.0, 1.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
