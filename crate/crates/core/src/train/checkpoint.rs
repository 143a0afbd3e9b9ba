//! Training-state snapshots (HSCK files).
//!
//! Layout, little-endian: magic `HSCK` | u32 version | u64 iteration |
//! rng blob (32-byte seed, u64 stream, u128 word position) | u32 count |
//! `count` × {u16 name length, UTF-8 name, u8 rank, u32 extents…, f32
//! payload}. Adam moments are stored under the `adam.m/` and `adam.v/`
//! name prefixes.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hsi_io::{Reader, FORMAT_VERSION};
use crate::model::Model;
use crate::numerics::{Real, Tensor};

use super::optim::{Adam, Moments};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSCK";
pub const ADAM_M_PREFIX: &str = "adam.m/";
pub const ADAM_V_PREFIX: &str = "adam.v/";

/// Complete position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot of every store entry plus optimizer moments.
    pub fn capture<T: Real>(model: &Model<T>, adam: &Adam<T>, rng: &ChaCha8Rng, iteration: u64) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            model.store.iter().map(|(_, p)| (p.name.clone(), p.value.cast())).collect();
        for (&id, st) in &adam.state {
            let name = model.store.name(id);
            tensors.push((format!("{ADAM_M_PREFIX}{name}"), st.m.cast()));
            tensors.push((format!("{ADAM_V_PREFIX}{name}"), st.v.cast()));
        }
        Self {
            iteration,
            rng: RngState::capture(rng),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Loads parameters only; every store entry must be present.
    pub fn load_params<T: Real>(&self, model: &mut Model<T>) -> Result<()> {
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks parameter {name:?}")))?;
            if t.shape() != model.store.value(id).shape() {
                return Err(Error::shape("checkpoint", t.shape(), model.store.value(id).shape()));
            }
            *model.store.value_mut(id) = t.cast();
        }
        Ok(())
    }

    /// Restores parameters, optimizer state (with `t = iteration`) and
    /// returns the random stream.
    pub fn restore<T: Real>(&self, model: &mut Model<T>, adam: &mut Adam<T>) -> Result<ChaCha8Rng> {
        self.load_params(model)?;
        adam.state.clear();
        adam.t = self.iteration;
        for (name, m) in &self.tensors {
            let Some(pname) = name.strip_prefix(ADAM_M_PREFIX) else {
                continue;
            };
            let id = model
                .store
                .id(pname)
                .ok_or_else(|| Error::config(format!("optimizer state for unknown parameter {pname:?}")))?;
            let v = self
                .get(&format!("{ADAM_V_PREFIX}{pname}"))
                .ok_or_else(|| Error::config(format!("missing second moment for {pname:?}")))?;
            adam.state.insert(id, Moments { m: m.cast(), v: v.cast() });
        }
        Ok(self.rng.restore())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::config(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::config(format!("rank too large: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| Error::config(format!("extent too large: {name}")))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version()?;
        let iteration = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos();
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let at = r.pos();
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(at, format!("extents {shape:?} overflow")))?;
            let data: Vec<f32> = r
                .take(n)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        r.finish()?;
        Ok(Self {
            iteration,
            rng: RngState { seed, stream, word_pos },
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        Checkpoint {
            iteration: 42,
            rng: RngState::capture(&rng),
            tensors: vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f32 - 1.5)),
                ("b".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u32();
        let st = RngState::capture(&rng);
        let mut resumed = st.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]), Err(Error::Format { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format { .. })));
    }
}
