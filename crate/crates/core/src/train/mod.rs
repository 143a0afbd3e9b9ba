//! Training loop, evaluation and whole-scene prediction.

pub mod checkpoint;
pub mod metrics;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi_io::{HsiCube, LabelMap};
use crate::model::params::Session;
use crate::model::{argmax_rows, Model};
use crate::numerics::{Graph, Mode, Real, Tensor};
use crate::peft::{apply_clr, reset_clr, set_trainable, ClrSchedule, TrainMode};
use crate::preprocess::{apply_pca_whiten, patches_at, PatchSet, PcaModel};

pub use checkpoint::{Checkpoint, RngState};
pub use metrics::MetricsReport;
pub use optim::{Adam, AdamConfig};

/// Batch size used for inference.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// All weights trained throughout.
    Full,
    /// Only LoRA factors trained throughout.
    Peft,
    /// Full training for the warm fraction of epochs, then LoRA only.
    Staged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub protocol: Protocol,
    pub warm_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch: 64,
            epochs: 100,
            seed: 0,
            protocol: Protocol::Full,
            warm_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(Error::config("batch must be at least 1"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if !(0.0..=1.0).contains(&self.warm_fraction) {
            return Err(Error::config(format!("warm_fraction must be in [0, 1], got {}", self.warm_fraction)));
        }
        Ok(())
    }

    /// Epochs trained in full mode before switching to LoRA-only.
    pub fn warm_epochs(&self) -> usize {
        match self.protocol {
            Protocol::Full => self.epochs,
            Protocol::Peft => 0,
            Protocol::Staged => (self.warm_fraction * self.epochs as f64).round() as usize,
        }
    }

    pub fn phase(&self, epoch: usize) -> TrainMode {
        if epoch < self.warm_epochs() {
            TrainMode::Full
        } else {
            TrainMode::Peft
        }
    }
}

/// Passed to the per-epoch callback.
#[derive(Debug)]
pub struct EpochReport<'a> {
    /// Number of completed epochs.
    pub epoch: usize,
    pub iteration: u64,
    pub mean_loss: f64,
    pub phase: TrainMode,
    pub checkpoint: &'a Checkpoint,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// `(iteration, loss)` per optimizer step.
    pub loss_trace: Vec<(u64, f64)>,
    pub checkpoint: Checkpoint,
    pub warnings: Vec<String>,
}

/// Class labels `1..=K` to targets `0..K`.
pub fn targets(data: &PatchSet, indices: &[usize], classes: usize) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            let l = *data
                .labels()
                .get(i)
                .ok_or_else(|| Error::Index(format!("sample {i} outside patch set of {}", data.len())))?
                as usize;
            if l == 0 || l > classes {
                return Err(Error::Index(format!("label {l} outside 1..={classes}")));
            }
            Ok(l - 1)
        })
        .collect()
}

fn batches(order: &[usize], batch: usize) -> impl Iterator<Item = &[usize]> {
    // Batch normalization needs at least two samples.
    order.chunks(batch).filter(|c| c.len() >= 2)
}

pub fn steps_per_epoch(samples: usize, batch: usize) -> usize {
    let full = samples / batch;
    full + usize::from(samples % batch >= 2)
}

pub fn loss_trace_csv(trace: &[(u64, f64)]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (t, l) in trace {
        out.push_str(&format!("{t},{l}\n"));
    }
    out
}

/// Trains `model` on the `train_idx` entries of `data`. `on_epoch` runs
/// after every epoch with a snapshot of the full training state; a
/// non-finite loss aborts with an error, leaving earlier snapshots as the
/// last good state.
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &PatchSet,
    train_idx: &[usize],
    cfg: &TrainConfig,
    sched: &ClrSchedule,
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sched.validate()?;
    if train_idx.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let classes = model.config.classes;
    let all_targets = targets(data, train_idx, classes)?;
    let mut warnings = Vec::new();
    for c in 0..classes {
        if !all_targets.contains(&c) {
            let msg = format!("class {} has no training samples", c + 1);
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let steps = steps_per_epoch(train_idx.len(), cfg.batch);
    if steps == 0 {
        return Err(Error::config(format!(
            "batch size {} with {} samples yields no batch of at least two",
            cfg.batch,
            train_idx.len()
        )));
    }
    if train_idx.len() % cfg.batch == 1 {
        let msg = "a trailing single-sample batch is skipped every epoch".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut adam = Adam::new(cfg.adam);
    let (mut rng, mut iteration) = match resume {
        Some(ck) => (ck.restore(model, &mut adam)?, ck.iteration),
        None => (ChaCha8Rng::seed_from_u64(cfg.seed), 0),
    };
    if iteration % steps as u64 != 0 {
        return Err(Error::Contract(format!(
            "checkpoint iteration {iteration} is not an epoch boundary ({steps} steps per epoch)"
        )));
    }
    let start_epoch = (iteration / steps as u64) as usize;

    let mut order = train_idx.to_vec();
    let mut loss_trace = Vec::new();
    let mut last = None;
    for epoch in start_epoch..cfg.epochs {
        let phase = cfg.phase(epoch);
        set_trainable(model, phase);
        adam.retain_trainable(&model.store);
        order.copy_from_slice(train_idx);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for chunk in batches(&order, cfg.batch) {
            apply_clr(model, iteration, sched)?;
            let x = data.batch::<T>(chunk);
            let y = targets(data, chunk, classes)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let (loss, bound) = {
                let mut s = Session::new(&mut g, &mut model.store, Mode::Train, &mut rng);
                let logits = model.net.forward(&mut s, xv)?;
                let loss = s.g.cross_entropy(logits, &y)?;
                (loss, s.bindings())
            };
            let lv = g.value(loss).item()?.to_f64_lossy();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {lv} at iteration {iteration}")));
            }
            g.backward(loss)?;
            let grads: Vec<_> = bound
                .into_iter()
                .filter(|&(id, _)| model.store.is_trainable(id))
                .map(|(id, v)| {
                    let grad = g.take_grad(v).unwrap_or_else(|| Tensor::zeros(model.store.value(id).shape()));
                    (id, grad)
                })
                .collect();
            adam.step(&mut model.store, &grads)?;
            loss_trace.push((iteration, lv));
            epoch_loss += lv;
            epoch_steps += 1;
            iteration += 1;
        }
        let ck = Checkpoint::capture(model, &adam, &rng, iteration);
        let mean_loss = epoch_loss / epoch_steps.max(1) as f64;
        log::info!("epoch {} phase {phase:?} mean loss {mean_loss:.6}", epoch + 1);
        on_epoch(&EpochReport {
            epoch: epoch + 1,
            iteration,
            mean_loss,
            phase,
            checkpoint: &ck,
        })?;
        last = Some(ck);
    }
    model.set_mode(Mode::Eval);
    reset_clr(model);
    let checkpoint = last.unwrap_or_else(|| Checkpoint::capture(model, &adam, &rng, iteration));
    Ok(TrainOutcome {
        loss_trace,
        checkpoint,
        warnings,
    })
}

/// Eval-mode class indices (0-based) for the selected patches.
pub fn predict<T: Real>(model: &mut Model<T>, data: &PatchSet, indices: &[usize]) -> Result<Vec<usize>> {
    model.set_mode(Mode::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let logits = model.logits(data.batch(chunk), &mut rng)?;
        out.extend(argmax_rows(&logits));
    }
    Ok(out)
}

pub fn evaluate<T: Real>(model: &mut Model<T>, data: &PatchSet, indices: &[usize]) -> Result<MetricsReport> {
    let classes = model.config.classes;
    let truth = targets(data, indices, classes)?;
    let pred = predict(model, data, indices)?;
    MetricsReport::from_predictions(&truth, &pred, classes)
}

/// Whitens `cube` with `pca` and classifies every pixel from its centered
/// `p × p` patch. Labels are `1..=K`.
pub fn predict_map<T: Real>(model: &mut Model<T>, cube: &HsiCube, pca: &PcaModel, p: usize) -> Result<LabelMap> {
    let white = apply_pca_whiten(cube, pca)?;
    let (h, w) = (cube.height(), cube.width());
    let positions: Vec<(usize, usize)> = (0..h * w).map(|i| (i / w, i % w)).collect();
    let mut labels = Vec::with_capacity(h * w);
    for chunk in positions.chunks(EVAL_BATCH * 4) {
        let set = patches_at(&white, None, chunk, p)?;
        let idx: Vec<usize> = (0..set.len()).collect();
        labels.extend(predict(model, &set, &idx)?.into_iter().map(|c| c as u16 + 1));
    }
    LabelMap::new(h, w, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_skip_singletons() {
        assert_eq!(steps_per_epoch(10, 4), 3);
        assert_eq!(steps_per_epoch(9, 4), 2);
        assert_eq!(steps_per_epoch(1, 4), 0);
        let order: Vec<usize> = (0..9).collect();
        assert_eq!(batches(&order, 4).count(), 2);
    }

    #[test]
    fn staged_phases() {
        let cfg = TrainConfig {
            epochs: 10,
            protocol: Protocol::Staged,
            warm_fraction: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.phase(4), TrainMode::Full);
        assert_eq!(cfg.phase(5), TrainMode::Peft);
    }

    #[test]
    fn loss_csv_layout() {
        assert_eq!(loss_trace_csv(&[(0, 1.5), (1, 0.25)]), "iteration,loss\n0,1.5\n1,0.25\n");
    }
}
