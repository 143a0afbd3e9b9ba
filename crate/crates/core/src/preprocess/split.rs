//! Per-class stratified train/test splitting of labeled pixels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hsi_io::LabelMap;

/// Train/test pixel indices (row-major flat) of one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub class: u16,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
    pub classes: Vec<ClassSplit>,
    /// Classes skipped because they have no pixels.
    pub warnings: Vec<String>,
}

impl SplitSpec {
    pub fn train_indices(&self) -> Vec<usize> {
        self.classes.iter().flat_map(|c| c.train.iter().copied()).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.classes.iter().flat_map(|c| c.test.iter().copied()).collect()
    }
}

/// Per class `c`: `max(1, round(fraction · n_c))` pixels drawn by a seeded
/// shuffle go to train, the rest to test. Index lists are sorted.
pub fn stratified_split(labels: &LabelMap, fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("train fraction must be in (0, 1), got {fraction}")));
    }
    let k = labels.num_classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
    for (i, &l) in labels.labels().iter().enumerate() {
        members[l as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for (class, mut idx) in members.into_iter().enumerate().skip(1) {
        if idx.is_empty() {
            let msg = format!("class {class} has no labeled pixels; skipped");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let n_train = ((fraction * idx.len() as f64).round() as usize).max(1);
        idx.shuffle(&mut rng);
        let mut test = idx.split_off(n_train);
        idx.sort_unstable();
        test.sort_unstable();
        classes.push(ClassSplit {
            class: class as u16,
            train: idx,
            test,
        });
    }
    Ok(SplitSpec {
        fraction,
        seed,
        classes,
        warnings,
    })
}
