//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "CTPT"                       magic, 4 bytes
//! u32                          format version (1)
//! u32 + bytes                  model configuration as UTF-8 JSON
//! u32                          parameter count
//! per parameter:
//!   u32 + bytes                name
//!   u32                        rank
//!   u64 * rank                 extents
//!   f64 * prod(extents)        values, row-major
//! u8                           1 if optimizer state follows, else 0
//! optional optimizer state:
//!   u64                        Adam step count
//!   u64                        completed epochs
//!   per parameter, first moments then second moments:
//!     u32 rank, u64 * rank extents, f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{CtPatchTst, ModelConfig};
use crate::tensor::Tensor;
use crate::training::OptimizerState;

pub const MAGIC: &[u8; 4] = b"CTPT";
pub const VERSION: u32 = 1;

/// Optimizer state plus the number of completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub optimizer: OptimizerState,
    pub epochs_done: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CtPatchTst,
    pub state: Option<TrainingState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        put_u64(out, e as u64);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model and optional training state.
pub fn to_bytes(model: &CtPatchTst, state: Option<&TrainingState>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.params().numel() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let config = serde_json::to_string(model.config()).expect("config serializes");
    put_bytes(&mut out, config.as_bytes());
    put_u32(&mut out, model.params().len() as u32);
    for (name, value) in model.params().iter() {
        put_bytes(&mut out, name.as_bytes());
        put_tensor(&mut out, value);
    }
    match state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            put_u64(&mut out, s.optimizer.step);
            put_u64(&mut out, s.epochs_done as u64);
            for t in s.optimizer.m.iter().chain(&s.optimizer.v) {
                put_tensor(&mut out, t);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("ended while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Corrupt(format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor, CheckpointError> {
        let rank = self.u32(what)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64(what)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| CheckpointError::Corrupt(format!("implausible extents for {what}")))?;
        let raw = self.take(numel * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("{what}: {e}")))
    }
}

/// Parses a checkpoint produced by [`to_bytes`].
pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version).into());
    }
    let config_text = r.string("model configuration")?;
    let config: ModelConfig = serde_json::from_str(&config_text)
        .map_err(|e| CheckpointError::Corrupt(format!("model configuration: {e}")))?;
    let count = r.u32("parameter count")? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let name = r.string(&format!("name of parameter {i}"))?;
        let value = r.tensor(&name)?;
        named.push((name, value));
    }
    let model = CtPatchTst::from_named(config, &named)?;

    let state = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let epochs_done = r.u64("epoch count")? as usize;
            let mut moments = Vec::with_capacity(2 * count);
            for i in 0..2 * count {
                moments.push(r.tensor(&format!("optimizer moment {i}"))?);
            }
            let v = moments.split_off(count);
            for (p, (m, v)) in model.params().values().iter().zip(moments.iter().zip(&v)) {
                if m.shape() != p.shape() || v.shape() != p.shape() {
                    return Err(CheckpointError::Corrupt("optimizer moments do not match parameters".into()).into());
                }
            }
            Some(TrainingState {
                optimizer: OptimizerState { m: moments, v, step },
                epochs_done,
            })
        }
        f => return Err(CheckpointError::Corrupt(format!("optimizer flag {f}")).into()),
    };
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)).into());
    }
    Ok(Checkpoint { model, state })
}

pub fn save_checkpoint(model: &CtPatchTst, state: Option<&TrainingState>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model, state))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CtPatchTst {
        let config = ModelConfig {
            lookback: 16,
            horizon: 4,
            channels: 2,
            patch_len: 4,
            stride: 2,
            model_dim: 8,
            time_heads: 2,
            encoder_layers: 1,
            ffn_dim: 8,
            ..ModelConfig::default()
        };
        CtPatchTst::new(config, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = tiny();
        let mut opt = OptimizerState::new(model.params());
        opt.step = 7;
        opt.m[0].data_mut()[0] = -0.0;
        opt.v[1].data_mut()[0] = f64::MIN_POSITIVE / 4.0;
        let state = TrainingState {
            optimizer: opt,
            epochs_done: 3,
        };
        let bytes = to_bytes(&model, Some(&state));
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.model.config(), model.config());
        for ((n1, a), (n2, b)) in model.params().iter().zip(back.model.params().iter()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let s = back.state.unwrap();
        assert_eq!(s.epochs_done, 3);
        assert_eq!(s.optimizer.step, 7);
        assert_eq!(s.optimizer.m[0].data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(to_bytes(&back.model, Some(&s)), bytes);
    }

    #[test]
    fn header_errors() {
        let bytes = to_bytes(&tiny(), None);
        assert!(matches!(
            from_bytes(b"NOPE"),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::Checkpoint(CheckpointError::Version(2)))));
        for cut in [6, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(from_bytes(&bytes[..cut]), Err(Error::Checkpoint(CheckpointError::Corrupt(_)))),
                "cut at {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
