//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic "FLOWFIDC" | u32 version
//! block "config":    u64 len, TOML text
//! block "state":     u8 phase, u64 iteration, u8 has_best, f64 best
//! u32 count, then per parameter block:
//!     str name, str dtype, u8 trainable, u32 ndim, u64 dims…, payload
//! u32 count, then per optimizer:
//!     str name, u64 t, u32 count, then per entry: str param, tensor m, tensor v
//! u32 count, then per generator:
//!     str name, [u8; 32] seed, u64 stream, u128 word position
//! ```
//!
//! A `str` is a u32 byte length followed by UTF-8.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::adam::Adam;

pub const MAGIC: &[u8; 8] = b"FLOWFIDC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Nll = 1,
    Adversarial = 2,
    Done = 3,
}

impl Phase {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Nll),
            2 => Some(Self::Adversarial),
            3 => Some(Self::Done),
            _ => None,
        }
    }
}

/// Serializable view of a generator position.
#[derive(Clone, Debug, PartialEq, Eq)]
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
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Named optimizer moments, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerBlock<T> {
    pub name: String,
    pub t: u64,
    pub entries: Vec<(String, Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> OptimizerBlock<T> {
    pub fn capture(name: &str, adam: &Adam<T>, store: &ParamStore<T>) -> Self {
        Self {
            name: name.into(),
            t: adam.t,
            entries: adam
                .ids
                .iter()
                .zip(adam.m.iter().zip(&adam.v))
                .map(|(&id, (m, v))| (store.get(id).name.clone(), m.clone(), v.clone()))
                .collect(),
        }
    }

    /// Writes the moments back into an optimizer built over the same blocks.
    pub fn restore_into(&self, adam: &mut Adam<T>, store: &ParamStore<T>) -> Result<()> {
        if self.entries.len() != adam.ids.len() {
            return Err(Error::checkpoint(
                &self.name,
                format!("{} entries, optimizer has {}", self.entries.len(), adam.ids.len()),
            ));
        }
        for (k, (name, m, v)) in self.entries.iter().enumerate() {
            let id = adam.ids[k];
            let p = store.get(id);
            if &p.name != name || m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::checkpoint(
                    &format!("{}/{name}", self.name),
                    format!("does not match parameter `{}` {:?}", p.name, p.value.shape()),
                ));
            }
            adam.m[k] = m.clone();
            adam.v[k] = v.clone();
        }
        adam.t = self.t;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// TOML of the resolved run config.
    pub config: String,
    pub phase: Phase,
    /// Iterations completed within `phase`.
    pub iteration: u64,
    pub best: Option<f64>,
    pub params: Vec<(String, bool, Tensor<T>)>,
    pub optimizers: Vec<OptimizerBlock<T>>,
    pub rngs: Vec<(String, RngState)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    put_str(out, T::DTYPE);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, block: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::checkpoint(block, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, block: &str) -> Result<u8> {
        Ok(self.take(1, block)?[0])
    }

    fn u32(&mut self, block: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, block)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, block: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, block)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self, block: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, block)?.try_into().expect("16 bytes")))
    }

    fn str(&mut self, block: &str) -> Result<String> {
        let n = self.u32(block)? as usize;
        String::from_utf8(self.take(n, block)?.to_vec()).map_err(|_| Error::checkpoint(block, "invalid UTF-8"))
    }

    fn tensor<T: Scalar>(&mut self, block: &str) -> Result<Tensor<T>> {
        let dtype = self.str(block)?;
        if dtype != T::DTYPE {
            return Err(Error::checkpoint(
                block,
                format!("stored as {dtype}, expected {}", T::DTYPE),
            ));
        }
        let ndim = self.u32(block)? as usize;
        if ndim > 8 {
            return Err(Error::checkpoint(block, format!("implausible rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| self.u64(block).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::checkpoint(block, "shape overflows"))?;
        let raw = self.take(len.checked_mul(T::BYTES).ok_or_else(|| Error::checkpoint(block, "shape overflows"))?, block)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(&shape, data)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.config.len() as u64);
        out.extend_from_slice(self.config.as_bytes());
        out.push(self.phase as u8);
        put_u64(&mut out, self.iteration);
        out.push(self.best.is_some() as u8);
        out.extend_from_slice(&self.best.unwrap_or(0.0).to_le_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, trainable, value) in &self.params {
            put_str(&mut out, name);
            out.push(*trainable as u8);
            put_tensor(&mut out, value);
        }
        put_u32(&mut out, self.optimizers.len() as u32);
        for opt in &self.optimizers {
            put_str(&mut out, &opt.name);
            put_u64(&mut out, opt.t);
            put_u32(&mut out, opt.entries.len() as u32);
            for (name, m, v) in &opt.entries {
                put_str(&mut out, name);
                put_tensor(&mut out, m);
                put_tensor(&mut out, v);
            }
        }
        put_u32(&mut out, self.rngs.len() as u32);
        for (name, st) in &self.rngs {
            put_str(&mut out, name);
            out.extend_from_slice(&st.seed);
            put_u64(&mut out, st.stream);
            out.extend_from_slice(&st.word_pos.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "header")? != MAGIC {
            return Err(Error::checkpoint("header", "bad magic, not a flowfid checkpoint"));
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return Err(Error::checkpoint(
                "header",
                format!("format version {version}, this build reads {VERSION}"),
            ));
        }
        let n = r.u64("config")? as usize;
        let config = String::from_utf8(r.take(n, "config")?.to_vec())
            .map_err(|_| Error::checkpoint("config", "invalid UTF-8"))?;
        let phase = Phase::from_u8(r.u8("state")?).ok_or_else(|| Error::checkpoint("state", "unknown phase"))?;
        let iteration = r.u64("state")?;
        let has_best = r.u8("state")? != 0;
        let best = f64::from_le_bytes(r.take(8, "state")?.try_into().expect("8 bytes"));
        let count = r.u32("params")?;
        let mut params = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.str("params")?;
            let trainable = r.u8(&name)? != 0;
            let value = r.tensor(&name)?;
            params.push((name, trainable, value));
        }
        let count = r.u32("optimizer")?;
        let mut optimizers = Vec::new();
        for _ in 0..count {
            let name = r.str("optimizer")?;
            let t = r.u64(&name)?;
            let k = r.u32(&name)?;
            let mut entries = Vec::new();
            for _ in 0..k {
                let pname = r.str(&name)?;
                let block = format!("{name}/{pname}");
                let m = r.tensor(&block)?;
                let v = r.tensor(&block)?;
                entries.push((pname, m, v));
            }
            optimizers.push(OptimizerBlock { name, t, entries });
        }
        let count = r.u32("rng")?;
        let mut rngs = Vec::new();
        for _ in 0..count {
            let name = r.str("rng")?;
            let seed: [u8; 32] = r.take(32, &name)?.try_into().expect("32 bytes");
            let stream = r.u64(&name)?;
            let word_pos = r.u128(&name)?;
            rngs.push((name, RngState { seed, stream, word_pos }));
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            phase,
            iteration,
            best: has_best.then_some(best),
            params,
            optimizers,
            rngs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Snapshot of every block in `store`.
    pub fn capture_params(store: &ParamStore<T>) -> Vec<(String, bool, Tensor<T>)> {
        store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.trainable, p.value.clone()))
            .collect()
    }

    /// Copies stored values into a store of identical layout.
    pub fn restore_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::checkpoint(
                "params",
                format!("{} blocks stored, model has {}", self.params.len(), store.len()),
            ));
        }
        for (name, _, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::checkpoint(name, "no such parameter in the model"))?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::checkpoint(
                    name,
                    format!("shape {:?}, model expects {:?}", value.shape(), store.value(id).shape()),
                ));
            }
            store.set_value(id, value.clone())?;
        }
        Ok(())
    }

    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng> {
        self.rngs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.restore())
            .ok_or_else(|| Error::checkpoint(name, "generator state missing"))
    }

    pub fn optimizer(&self, name: &str) -> Result<&OptimizerBlock<T>> {
        self.optimizers
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::checkpoint(name, "optimizer state missing"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.set_stream(7);
        let _: u64 = rng.random();
        Checkpoint {
            config: "seed = 1\n".into(),
            phase: Phase::Adversarial,
            iteration: 12,
            best: Some(-1.5),
            params: vec![
                ("a/kernel".into(), true, Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1)),
                ("a/q".into(), false, Tensor::from_fn(&[1], |_| f64::MIN_POSITIVE)),
            ],
            optimizers: vec![OptimizerBlock {
                name: "gen".into(),
                t: 3,
                entries: vec![("a/kernel".into(), Tensor::ones(&[2, 3]), Tensor::zeros(&[2, 3]))],
            }],
            rngs: vec![("data".into(), RngState::capture(&rng))],
        }
    }

    #[test]
    fn byte_roundtrip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let mut r1 = c.rng("data").unwrap();
        let mut r2 = back.rng("data").unwrap();
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());
    }

    #[test]
    fn corrupt_files_name_the_block() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::<f64>::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("header"), "{err}");
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::<f64>::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes).unwrap_err().to_string().contains("a/kernel"));
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn restore_checks_shapes() {
        let c = sample();
        let mut store = ParamStore::<f64>::new();
        store.add("a/kernel", Tensor::zeros(&[3, 2]), true).unwrap();
        store.add("a/q", Tensor::zeros(&[1]), false).unwrap();
        let err = c.restore_params(&mut store).unwrap_err().to_string();
        assert!(err.contains("a/kernel"), "{err}");
    }
}
