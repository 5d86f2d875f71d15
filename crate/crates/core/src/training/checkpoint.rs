//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic       8 bytes  "CADUNET\0"
//! version     u32      1
//! dtype       u32      bytes per value (4 = f32, 8 = f64)
//! config      u32 length + UTF-8 JSON {"unet": …, "codec": …}
//! alpha       f64      NaN before calibration
//! step        u64
//! rng flag    u8       1 if an RNG state follows
//!   seed      32 bytes
//!   stream    u64
//!   word_pos  u128
//! adam        4 × f64  lr, beta1, beta2, eps
//! adam step   u64
//! count       u32      number of parameter records
//! records     name (u32 length + UTF-8), rank u32, extents u64 each,
//!             values (dtype each)
//! moments     count × first-moment values, then count × second-moment
//!             values, in record order
//! ```
//!
//! Values use the precision of the model that wrote them.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::network::{Model, UNetConfig};
use crate::stft::CodecConfig;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CADUNET\0";
pub const VERSION: u32 = 1;

/// Serialisable ChaCha8 position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ConfigBlock {
    unet: UNetConfig,
    codec: CodecConfig,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub codec: CodecConfig,
    pub alpha: Option<f64>,
    pub step: u64,
    pub rng: Option<RngState>,
    pub adam: AdamState<T>,
}

/// A checkpoint in whichever precision it was written.
#[derive(Debug, Clone)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        header(&mut r)?;
        match r.u32()? {
            4 => Ok(Self::F32(Checkpoint::from_bytes(bytes)?)),
            8 => Ok(Self::F64(Checkpoint::from_bytes(bytes)?)),
            w => Err(Error::Unsupported {
                format: "checkpoint",
                msg: format!("{w}-byte values"),
            }),
        }
    }

    pub fn dtype_width(&self) -> usize {
        match self {
            Self::F32(_) => 4,
            Self::F64(_) => 8,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format("checkpoint", format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "flag")?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "u64")?.try_into().expect("8")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, "u128")?.try_into().expect("16")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format("checkpoint", format!("{what} is not UTF-8")))
    }

    fn values<T: Real>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(T::WIDTH).unwrap_or(usize::MAX), what)?;
        Ok(raw.chunks_exact(T::WIDTH).map(T::read_le).collect())
    }
}

fn header(r: &mut Reader<'_>) -> Result<()> {
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic; not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Unsupported {
            format: "checkpoint",
            msg: format!("version {version} (this build reads version {VERSION})"),
        });
    }
    Ok(())
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

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, T::WIDTH as u32);
        let config = serde_json::to_string(&ConfigBlock {
            unet: *self.model.config(),
            codec: self.codec,
        })?;
        put_str(&mut out, &config);
        put_u64(&mut out, self.alpha.unwrap_or(f64::NAN).to_bits());
        put_u64(&mut out, self.step);
        match &self.rng {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.seed);
                put_u64(&mut out, s.stream);
                out.extend_from_slice(&s.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        let a = &self.adam.config;
        for v in [a.lr, a.beta1, a.beta2, a.eps] {
            put_u64(&mut out, v.to_bits());
        }
        put_u64(&mut out, self.adam.step);
        let params = self.model.params();
        put_u32(&mut out, params.len() as u32);
        for (_, p) in params.iter() {
            put_str(&mut out, &p.name);
            put_u32(&mut out, p.tensor.rank() as u32);
            for &d in p.tensor.shape() {
                put_u64(&mut out, d as u64);
            }
            for &v in p.tensor.data() {
                v.write_le(&mut out);
            }
        }
        for moments in [&self.adam.m, &self.adam.v] {
            if moments.len() != params.len() {
                return Err(Error::config("adam", "moment count does not match parameters"));
            }
            for t in moments {
                for &v in t.data() {
                    v.write_le(&mut out);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        header(&mut r)?;
        let width = r.u32()? as usize;
        if width != T::WIDTH {
            return Err(Error::Unsupported {
                format: "checkpoint",
                msg: format!("stored {width}-byte values, requested {}-byte", T::WIDTH),
            });
        }
        let block: ConfigBlock = serde_json::from_str(&r.string("config block")?)
            .map_err(|e| Error::format("checkpoint", format!("config block: {e}")))?;
        block.codec.validate()?;
        let alpha = Some(r.f64()?).filter(|a| !a.is_nan());
        let step = r.u64()?;
        let rng = match r.u8()? {
            0 => None,
            1 => Some(RngState {
                seed: r.take(32, "rng seed")?.try_into().expect("32"),
                stream: r.u64()?,
                word_pos: r.u128()?,
            }),
            f => return Err(Error::format("checkpoint", format!("bad rng flag {f}"))),
        };
        let adam_cfg = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let adam_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::format("checkpoint", format!("{name}: implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
            let data = r.values::<T>(n, &name)?;
            store.add(name, Tensor::new(&shape, data)?)?;
            shapes.push(shape);
        }
        let mut moments = [Vec::with_capacity(count), Vec::with_capacity(count)];
        for (k, which) in moments.iter_mut().enumerate() {
            for shape in &shapes {
                let n = shape.iter().product();
                let what = if k == 0 { "first moments" } else { "second moments" };
                which.push(Tensor::new(shape, r.values::<T>(n, what)?)?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        let [m, v] = moments;
        Ok(Self {
            model: Model::from_params(block.unet, store)?,
            codec: block.codec,
            alpha,
            step,
            rng,
            adam: AdamState {
                config: adam_cfg,
                step: adam_step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
