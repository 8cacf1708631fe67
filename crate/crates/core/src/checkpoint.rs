//! Versioned little-endian binary checkpoints of the full trainer state.
//!
//! Layout: magic `DCCK`, format version (u32), then length-prefixed
//! sections for the config (JSON), encoder, optimizer, memory, RNG,
//! epoch counter and epoch records (JSON). Floats are stored as raw f64
//! bits so a restored run continues bit-identically.

use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::encoder::{Adam, Dense, Encoder};
use crate::error::{Error, Result};
use crate::memory::{DualMemory, UpdatePolicy};
use crate::numerics::{Matrix, Rng, RngState};
use crate::trainer::{EpochRecord, Trainer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.len(vs.len());
        for &v in vs {
            self.f64(v);
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.buf.extend_from_slice(b);
    }

    fn matrix(&mut self, m: &Matrix) {
        self.len(m.rows());
        self.len(m.cols());
        for &v in m.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::parse(
                format!("byte {}", self.pos),
                format!("truncated checkpoint, wanted {n} more bytes"),
            ));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has requested length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        // Every length counts at least bytes, so anything past the end is corrupt.
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::parse(format!("byte {at}"), format!("length {n} exceeds file size")));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.len()?;
        let cols = self.len()?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::parse(format!("byte {}", self.pos), "matrix exceeds file size"))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::new(rows, cols, data)
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<T> {
        let at = self.pos;
        let raw = self.bytes()?;
        serde_json::from_slice(raw).map_err(|e| Error::parse(format!("byte {at}"), format!("{what}: {e}")))
    }
}

fn policy_code(p: UpdatePolicy) -> u8 {
    match p {
        UpdatePolicy::All => 0,
        UpdatePolicy::Random => 1,
        UpdatePolicy::Hard => 2,
    }
}

fn policy_from_code(c: u8) -> Result<UpdatePolicy> {
    match c {
        0 => Ok(UpdatePolicy::All),
        1 => Ok(UpdatePolicy::Random),
        2 => Ok(UpdatePolicy::Hard),
        _ => Err(Error::parse("memory policy", format!("unknown policy code {c}"))),
    }
}

/// Serializes the trainer to bytes.
pub fn encode(trainer: &Trainer) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(&serde_json::to_vec(&trainer.config).expect("config serializes"));

    let enc = &trainer.encoder;
    w.len(enc.layers().len());
    for layer in enc.layers() {
        w.matrix(&layer.weight);
        w.f64s(&layer.bias);
    }
    w.u64(enc.version());

    let opt = &trainer.optimizer;
    w.f64(opt.learning_rate);
    w.f64(opt.beta1);
    w.f64(opt.beta2);
    w.f64(opt.epsilon);
    w.u64(opt.step_count());
    let (m, v) = opt.moments();
    w.len(m.len());
    for (m, v) in m.iter().zip(v) {
        w.f64s(m);
        w.f64s(v);
    }

    let mem = &trainer.memory;
    w.matrix(mem.individual());
    w.matrix(mem.centroid());
    w.f64(mem.omega());
    w.u8(policy_code(mem.policy()));

    let rng = trainer.rng.state();
    w.buf.extend_from_slice(&rng.seed);
    w.u64(rng.stream);
    w.u128(rng.word_pos);

    w.len(trainer.epoch);
    w.bytes(&serde_json::to_vec(&trainer.records).expect("records serialize"));
    w.buf
}

/// Rebuilds a trainer from [`encode`] output.
pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.array().map_err(|_| Error::VersionMismatch("file too short for a checkpoint".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::VersionMismatch(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "checkpoint format {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let config: TrainConfig = r.json("config")?;

    let num_layers = r.len()?;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let weight = r.matrix()?;
        let bias = r.f64s()?;
        layers.push(Dense { weight, bias });
    }
    let mut encoder = Encoder::from_layers(layers)?;
    encoder.set_version(r.u64()?);

    let lr = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let epsilon = r.f64()?;
    let step = r.u64()?;
    let tensors = r.len()?;
    let mut first = Vec::with_capacity(tensors);
    let mut second = Vec::with_capacity(tensors);
    for _ in 0..tensors {
        first.push(r.f64s()?);
        second.push(r.f64s()?);
    }
    let optimizer = Adam::restore(lr, beta1, beta2, epsilon, first, second, step);

    let individual = r.matrix()?;
    let centroid = r.matrix()?;
    let omega = r.f64()?;
    let policy = policy_from_code(r.u8()?)?;
    let memory = DualMemory::from_banks(individual, centroid, omega, policy)?;

    let seed = r.array::<32>()?;
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let rng = Rng::from_state(RngState { seed, stream, word_pos });

    let epoch = r.len()?;
    let records: Vec<EpochRecord> = r.json("records")?;
    if r.pos != bytes.len() {
        return Err(Error::parse(format!("byte {}", r.pos), "trailing bytes after checkpoint"));
    }
    Ok(Trainer::from_parts(config, encoder, optimizer, memory, rng, epoch, records))
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, encode(trainer)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
