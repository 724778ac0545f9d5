//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! | field            | bytes        |
//! |------------------|--------------|
//! | magic `EDACCKPT` | 8            |
//! | version (`u32`)  | 4            |
//! | input_dim `u32`, layer count `u32`, widths `u32 × L` | 8 + 4L |
//! | activation `u8` (0 relu, 1 tanh), init_seed `u64` | 9 |
//! | epoch `u32`      | 4            |
//! | param count P `u64` | 8         |
//! | parameters `f64 × P` (segment order w0, b0, w1, ...) | 8P |
//! | momentum `f64 × P` | 8P         |
//! | RNG seed `[u8; 32]`, stream `u64`, word position `u128` | 56 |
//! | metrics: epoch `u32`, method `u8`, then `f64 × 7`: clean_acc_train, clean_acc_test, robust_acc_train, robust_acc_test, ac_train, ac_test, lr | 61 |
//! | CRC-32 of every preceding byte (`u32`) | 4 |
//!
//! Wall-clock time is not stored, so identical runs give identical files.

use std::fs;
use std::path::Path;

use rand::SeedableRng;

use crate::diagnostics::MetricsRecord;
use crate::error::{Error, Result};
use crate::netcore::{init_model, Activation, ModelSpec, ModelState, ParamVector};
use crate::train::{Method, TrainRng};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EDACCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of the training RNG stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngRecord {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngRecord {
    pub fn capture(rng: &TrainRng) -> Self {
        RngRecord {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> TrainRng {
        let mut rng = TrainRng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub epoch: usize,
    pub optimizer_momentum: ParamVector,
    pub rng_state: RngRecord,
    pub metrics: MetricsRecord,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

        let spec = self.model.spec();
        put_u32(&mut out, spec.input_dim);
        put_u32(&mut out, spec.layer_widths.len());
        for &w in &spec.layer_widths {
            put_u32(&mut out, w);
        }
        out.push(match spec.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        out.extend_from_slice(&spec.init_seed.to_le_bytes());

        put_u32(&mut out, self.epoch);
        let params = self.model.params().flatten();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in params.iter().chain(&self.optimizer_momentum.flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }

        out.extend_from_slice(&self.rng_state.seed);
        out.extend_from_slice(&self.rng_state.stream.to_le_bytes());
        out.extend_from_slice(&self.rng_state.word_pos.to_le_bytes());

        let m = &self.metrics;
        put_u32(&mut out, m.epoch);
        out.push(m.method.code());
        for v in [
            m.clean_acc_train,
            m.clean_acc_test,
            m.robust_acc_train,
            m.robust_acc_test,
            m.ac_train,
            m.ac_test,
            m.lr,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }

        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
            return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (file is corrupt)".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let input_dim = r.u32()? as usize;
        let layers = r.u32()? as usize;
        if layers > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {layers}")));
        }
        let layer_widths = (0..layers).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => return Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        };
        let init_seed = r.u64()?;
        let spec = ModelSpec {
            input_dim,
            layer_widths,
            activation,
            init_seed,
        };
        spec.validate().map_err(|e| Error::Checkpoint(format!("invalid model spec: {e}")))?;
        let template = init_model(&spec)?.into_params();

        let epoch = r.u32()? as usize;
        let count = r.u64()? as usize;
        if count != template.numel() {
            return Err(Error::Checkpoint(format!(
                "{count} parameters stored, spec needs {}",
                template.numel()
            )));
        }
        let params = r.f64s(count)?;
        let momentum = r.f64s(count)?;
        let params = template.unflatten(&params)?;
        let optimizer_momentum = template.unflatten(&momentum)?;

        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("sixteen bytes"));

        let m_epoch = r.u32()? as usize;
        let method = Method::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown method code".into()))?;
        let v = r.f64s(7)?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            model: ModelState::from_parts(spec, params)?,
            epoch,
            optimizer_momentum,
            rng_state: RngRecord { seed, stream, word_pos },
            metrics: MetricsRecord {
                epoch: m_epoch,
                clean_acc_train: v[0],
                clean_acc_test: v[1],
                robust_acc_train: v[2],
                robust_acc_test: v[3],
                ac_train: v[4],
                ac_test: v[5],
                lr: v[6],
                method,
                wall_time_s: 0.0,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }
}
