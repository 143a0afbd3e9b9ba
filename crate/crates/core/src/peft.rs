//! LoRA lifecycle: cyclical scaling, freezing, merging and parameter
//! accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Mode, Real, Tensor};

/// Triangular waveform whose amplitude halves every cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClrSchedule {
    pub base: f64,
    pub max: f64,
    pub step_up: u64,
    pub step_down: u64,
}

impl Default for ClrSchedule {
    fn default() -> Self {
        Self {
            base: 0.8,
            max: 1.5,
            step_up: 100,
            step_down: 100,
        }
    }
}

impl ClrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.step_up + self.step_down == 0 {
            return Err(Error::config("CLR step_up + step_down must be positive"));
        }
        if !(self.base.is_finite() && self.max.is_finite() && self.base <= self.max) {
            return Err(Error::config(format!(
                "CLR bounds must be finite with base <= max, got {} and {}",
                self.base, self.max
            )));
        }
        Ok(())
    }
}

/// Multiplier `γ_t` at iteration `t`.
pub fn clr_scale(t: u64, sched: &ClrSchedule) -> Result<f64> {
    let period = sched.step_up + sched.step_down;
    if period == 0 {
        return Err(Error::config("CLR step_up + step_down must be positive"));
    }
    let cycle = 1 + t / period;
    let x = t % period;
    let scale = if x < sched.step_up {
        x as f64 / sched.step_up as f64
    } else {
        1.0 - (x - sched.step_up) as f64 / sched.step_down as f64
    };
    let decay = 0.5f64.powi((cycle - 1).min(i32::MAX as u64) as i32);
    Ok(sched.base + (sched.max - sched.base) * scale * decay)
}

/// Sets `γ = clr_scale(t)` on every LoRA layer and returns it.
pub fn apply_clr<T: Real>(model: &mut Model<T>, t: u64, sched: &ClrSchedule) -> Result<f64> {
    let gamma = clr_scale(t, sched)?;
    for layer in model.net.lora_layers_mut() {
        layer.gamma = gamma;
    }
    Ok(gamma)
}

/// Restores the inference multiplier `γ = 1` on every LoRA layer.
pub fn reset_clr<T: Real>(model: &mut Model<T>) {
    for layer in model.net.lora_layers_mut() {
        layer.gamma = 1.0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every weight is trained.
    Full,
    /// Only LoRA `A`/`B` factors are trained.
    Peft,
}

pub fn set_trainable<T: Real>(model: &mut Model<T>, mode: TrainMode) {
    let ids: Vec<_> = model.store.weights().map(|(id, _)| id).collect();
    match mode {
        TrainMode::Full => {
            for id in ids {
                model.store.set_trainable(id, true);
            }
        }
        TrainMode::Peft => {
            for id in ids {
                model.store.set_trainable(id, false);
            }
            let adapters: Vec<_> = model.net.lora_layers().iter().filter_map(|l| l.adapter).collect();
            for (a, b) in adapters {
                model.store.set_trainable(a, true);
                model.store.set_trainable(b, true);
            }
        }
    }
}

/// Folds every adapter into its base weight (`W ← W + (α/r)·A·B`, γ = 1)
/// and zeroes the factors. Eval mode only; a second merge is rejected.
pub fn merge_lora<T: Real>(model: &mut Model<T>) -> Result<()> {
    if model.mode != Mode::Eval {
        return Err(Error::Contract("merge_lora requires eval mode".into()));
    }
    if model.net.lora_layers().iter().any(|l| l.merged) {
        return Err(Error::Contract("LoRA adapters already merged".into()));
    }
    let Model { net, store, .. } = model;
    for layer in net.lora_layers_mut() {
        if let Some((a, b)) = layer.adapter {
            let s = T::lit(layer.alpha / layer.rank as f64);
            let delta = store.value(a).matmul(store.value(b))?;
            let w = store.value_mut(layer.base.weight);
            for (wv, dv) in w.data_mut().iter_mut().zip(delta.data()) {
                *wv += s * *dv;
            }
            for id in [a, b] {
                let shape = store.value(id).shape().to_vec();
                *store.value_mut(id) = Tensor::zeros(&shape);
            }
        }
        layer.merged = true;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCount {
    pub module: String,
    pub params: usize,
    pub lora_params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    /// `Σ r·(d_in + d_out)` over LoRA layers.
    pub lora_params: usize,
    /// `2r·|L| / (d·N)` with `|L|` LoRA-equipped blocks out of `N`.
    pub rho_closed_form: f64,
    /// `lora_params / total`.
    pub rho_exact: f64,
    pub trainable_fraction: f64,
    pub rank: usize,
    pub dim: usize,
    pub lora_blocks: usize,
    pub blocks: usize,
    pub modules: Vec<ModuleCount>,
    /// `Σ N·M²·d` over blocks, `N` tokens per sample.
    pub window_attention_cost: usize,
}

fn module_of(name: &str) -> String {
    let mut parts = name.split('.');
    match parts.next() {
        Some("stages") => format!("stage{}", parts.next().and_then(|s| s.parse::<usize>().ok()).map_or(0, |i| i + 1)),
        Some(first) => first.to_string(),
        None => String::new(),
    }
}

pub fn param_report<T: Real>(model: &Model<T>) -> ParamReport {
    let cfg = &model.config;
    let total = model.store.weight_count();
    let trainable = model.store.trainable_count();
    let lora = model.net.lora_layers();
    let lora_params: usize = lora.iter().map(|l| l.adapter_params()).sum();

    let adapter_ids: Vec<_> = lora.iter().filter_map(|l| l.adapter).flat_map(|(a, b)| [a, b]).collect();
    let mut modules: Vec<ModuleCount> = Vec::new();
    for (id, p) in model.store.weights() {
        let name = module_of(&p.name);
        let n = p.value.numel();
        let is_lora = adapter_ids.contains(&id);
        match modules.iter_mut().find(|m| m.module == name) {
            Some(m) => {
                m.params += n;
                m.lora_params += if is_lora { n } else { 0 };
            }
            None => modules.push(ModuleCount {
                module: name,
                params: n,
                lora_params: if is_lora { n } else { 0 },
            }),
        }
    }

    let blocks = cfg.total_blocks();
    let lora_blocks = if cfg.lora.rank > 0 { blocks } else { 0 };
    let rho_closed_form = if blocks == 0 {
        0.0
    } else {
        2.0 * cfg.lora.rank as f64 * lora_blocks as f64 / (cfg.dim as f64 * blocks as f64)
    };
    let window_attention_cost = cfg
        .stage_grids()
        .iter()
        .zip(&cfg.depths)
        .enumerate()
        .map(|(i, (&side, &depth))| depth * side * side * cfg.window * cfg.window * cfg.stage_dim(i))
        .sum();
    ParamReport {
        total,
        trainable,
        lora_params,
        rho_closed_form,
        rho_exact: lora_params as f64 / total.max(1) as f64,
        trainable_fraction: trainable as f64 / total.max(1) as f64,
        rank: cfg.lora.rank,
        dim: cfg.dim,
        lora_blocks,
        blocks,
        modules,
        window_attention_cost,
    }
}

impl ParamReport {
    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "total_params={}", self.total);
        let _ = writeln!(out, "trainable_params={}", self.trainable);
        let _ = writeln!(out, "trainable_fraction={:.6}", self.trainable_fraction);
        let _ = writeln!(out, "lora_params={}", self.lora_params);
        let _ = writeln!(out, "lora_rank={}", self.rank);
        let _ = writeln!(out, "embed_dim={}", self.dim);
        let _ = writeln!(out, "lora_blocks={}", self.lora_blocks);
        let _ = writeln!(out, "blocks={}", self.blocks);
        let _ = writeln!(out, "rho_closed_form={:.6}", self.rho_closed_form);
        let _ = writeln!(out, "rho_exact={:.6}", self.rho_exact);
        let _ = writeln!(out, "reduction_closed_form={:.6}", 1.0 - self.rho_closed_form);
        let _ = writeln!(out, "reduction_exact={:.6}", 1.0 - self.rho_exact);
        let _ = writeln!(out, "window_attention_cost={}", self.window_attention_cost);
        for m in &self.modules {
            let _ = writeln!(out, "module.{}.params={}", m.module, m.params);
            let _ = writeln!(out, "module.{}.lora_params={}", m.module, m.lora_params);
        }
        out
    }
}
