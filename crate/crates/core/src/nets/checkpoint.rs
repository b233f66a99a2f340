//! Versioned little-endian checkpoint container.
//!
//! ```text
//! magic "EHCK" | version u16 | section count u16
//! repeated: name len u8 | name | payload len u64 | payload
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Sections, in order: `spec`, `params`, `adamw`, `prng`, `meta`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Network, NetworkSpec, Topology, Variant};
use crate::autodiff::{AdamWState, Padding, Scalar, Tensor};
use crate::error::{io_at, Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EHCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Base seed plus the number of epochs already drawn from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrngState {
    pub seed: u64,
    pub epochs_drawn: u64,
}

/// Trainer bookkeeping needed to resume exactly where a run stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainProgress {
    pub epoch: u64,
    pub best_epoch: u64,
    pub best_val_loss: f64,
    pub lr: f64,
    pub plateau_bad_epochs: u64,
    pub plateau_events: u64,
    pub stop_bad_epochs: u64,
}

impl Default for TrainProgress {
    fn default() -> Self {
        TrainProgress {
            epoch: 0,
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
            lr: 1e-3,
            plateau_bad_epochs: 0,
            plateau_events: 0,
            stop_bad_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub optimizer: AdamWState<T>,
    pub prng: PrngState,
    pub progress: TrainProgress,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn array<T: Scalar>(&mut self, values: &[T]) {
        self.u64(values.len() as u64);
        self.0.extend_from_slice(&T::to_le_vec(values));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn array<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let n = self.u64()? as usize;
        let size = std::mem::size_of::<T>();
        let bytes = self.take(n.checked_mul(size).ok_or_else(|| Error::CorruptCheckpoint("array overflow".into()))?)?;
        Ok(T::from_le_slice(bytes))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn section(name: &str, payload: Writer, out: &mut Writer) {
    out.u8(name.len() as u8);
    out.0.extend_from_slice(name.as_bytes());
    out.u64(payload.0.len() as u64);
    out.0.extend_from_slice(&payload.0);
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let spec = net.spec();
        let mut out = Writer(Vec::new());
        out.0.extend_from_slice(&CHECKPOINT_MAGIC);
        out.u16(CHECKPOINT_VERSION);
        out.u16(5);

        let mut s = Writer(Vec::new());
        s.u8(match spec.variant {
            Variant::Unet => 0,
            Variant::UnetPlusPlus => 1,
        });
        s.u32(spec.depth as u32);
        s.u32(spec.base_channels as u32);
        s.u32(spec.in_channels as u32);
        s.u32(spec.out_channels as u32);
        s.u8(match spec.padding {
            Padding::Zero => 0,
            Padding::Reflect => 1,
        });
        s.u64(spec.seed);
        s.u8(T::DTYPE_CODE);
        s.f64(net.input_scale);
        s.f64(net.input_shift);
        s.f64(net.output_scale);
        s.f64(net.output_shift);
        section("spec", s, &mut out);

        let mut p = Writer(Vec::new());
        p.u32(net.params().len() as u32);
        for (name, t) in net.param_names().iter().zip(net.params()) {
            p.u16(name.len() as u16);
            p.0.extend_from_slice(name.as_bytes());
            p.u8(t.shape().len() as u8);
            for &d in t.shape() {
                p.u32(d as u32);
            }
            p.array(t.data());
        }
        section("params", p, &mut out);

        let mut a = Writer(Vec::new());
        a.u64(self.optimizer.t);
        a.u32(self.optimizer.m.len() as u32);
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            a.array(m);
            a.array(v);
        }
        section("adamw", a, &mut out);

        let mut r = Writer(Vec::new());
        r.u64(self.prng.seed);
        r.u64(self.prng.epochs_drawn);
        section("prng", r, &mut out);

        let g = &self.progress;
        let mut m = Writer(Vec::new());
        m.u64(g.epoch);
        m.u64(g.best_epoch);
        m.f64(g.best_val_loss);
        m.f64(g.lr);
        m.u64(g.plateau_bad_epochs);
        m.u64(g.plateau_events);
        m.u64(g.stop_bad_epochs);
        section("meta", m, &mut out);

        let digest = Sha256::digest(&out.0);
        out.0.extend_from_slice(&digest);
        out.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 32 {
            return Err(Error::CorruptCheckpoint(format!("file of {} bytes is too short", bytes.len())));
        }
        if bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CorruptCheckpoint("checksum mismatch (truncated or modified file)".into()));
        }

        let mut r = Reader { buf: body, pos: 6 };
        let count = r.u16()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u8()? as usize;
            let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
            let len = r.u64()? as usize;
            sections.push((name, r.take(len)?));
        }
        if !r.done() {
            return Err(Error::CorruptCheckpoint("trailing bytes after sections".into()));
        }
        let get = |name: &str| {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| Reader { buf: b, pos: 0 })
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing section {name:?}")))
        };

        let mut s = get("spec")?;
        let variant = match s.u8()? {
            0 => Variant::Unet,
            1 => Variant::UnetPlusPlus,
            v => return Err(Error::CorruptCheckpoint(format!("unknown variant {v}"))),
        };
        let depth = s.u32()? as usize;
        let base_channels = s.u32()? as usize;
        let in_channels = s.u32()? as usize;
        let out_channels = s.u32()? as usize;
        let padding = match s.u8()? {
            0 => Padding::Zero,
            1 => Padding::Reflect,
            v => return Err(Error::CorruptCheckpoint(format!("unknown padding {v}"))),
        };
        let seed = s.u64()?;
        let dtype = s.u8()?;
        if dtype != T::DTYPE_CODE {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint holds dtype {dtype}, requested {}",
                T::DTYPE_CODE
            )));
        }
        let spec = NetworkSpec {
            variant,
            depth,
            base_channels,
            in_channels,
            out_channels,
            padding,
            seed,
        };
        spec.validate()?;
        let mut network = Network::<T>::with_topology(&spec, Topology::for_spec(&spec))?;
        network.input_scale = s.f64()?;
        network.input_shift = s.f64()?;
        network.output_scale = s.f64()?;
        network.output_shift = s.f64()?;

        let mut p = get("params")?;
        let n = p.u32()? as usize;
        if n != network.params().len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{n} parameter tensors, network has {}",
                network.params().len()
            )));
        }
        let mut params = Vec::with_capacity(n);
        for expected_name in network.param_names() {
            let len = p.u16()? as usize;
            let name = String::from_utf8_lossy(p.take(len)?).into_owned();
            if &name != expected_name {
                return Err(Error::CorruptCheckpoint(format!("parameter {name:?}, expected {expected_name:?}")));
            }
            let ndim = p.u8()? as usize;
            let shape = (0..ndim).map(|_| p.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = p.array::<T>()?;
            params.push(Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?);
        }
        network
            .set_params(params)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;

        let mut a = get("adamw")?;
        let t = a.u64()?;
        let slots = a.u32()? as usize;
        let mut m = Vec::with_capacity(slots);
        let mut v = Vec::with_capacity(slots);
        for _ in 0..slots {
            m.push(a.array::<T>()?);
            v.push(a.array::<T>()?);
        }
        let optimizer = AdamWState { m, v, t };

        let mut r = get("prng")?;
        let prng = PrngState {
            seed: r.u64()?,
            epochs_drawn: r.u64()?,
        };

        let mut g = get("meta")?;
        let progress = TrainProgress {
            epoch: g.u64()?,
            best_epoch: g.u64()?,
            best_val_loss: g.f64()?,
            lr: g.f64()?,
            plateau_bad_epochs: g.u64()?,
            plateau_events: g.u64()?,
            stop_bad_epochs: g.u64()?,
        };
        Ok(Checkpoint {
            network,
            optimizer,
            prng,
            progress,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(io_at(&tmp))?;
    fs::rename(&tmp, path).map_err(io_at(path))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_at(path))?;
    Checkpoint::from_bytes(&bytes)
}
