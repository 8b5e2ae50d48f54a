//! Versioned binary checkpoints.
//!
//! Layout: 4-byte magic, u32 format version, then length-prefixed sections —
//! the canonical config text, the step count, the rng state, and three
//! parameter blocks (weights, first moments, second moments). All integers
//! are little-endian; floats are raw f64 bits, so save -> load -> save is
//! byte-identical.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::model::LayerMode;
use crate::harness::train::TrainState;
use crate::numerics::{Matrix, ParamSet, Rng};

pub const MAGIC: [u8; 4] = *b"AXPT";
pub const VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_u64(out, m.rows() as u64);
    put_u64(out, m.cols() as u64);
    for &v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_params(out: &mut Vec<u8>, ps: &ParamSet) {
    put_u64(out, ps.len() as u64);
    for (name, m) in ps.iter() {
        put_bytes(out, name.as_bytes());
        put_matrix(out, m);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| {
            Error::Checkpoint(format!("absurd matrix shape {rows}x{cols}"))
        })?;
        let raw = self.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(rows, cols, data)
    }

    fn params(&mut self) -> Result<ParamSet> {
        let count = self.u64()? as usize;
        let mut ps = ParamSet::new();
        for _ in 0..count {
            let name = String::from_utf8(self.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".to_string()))?;
            let m = self.matrix()?;
            ps.insert(&name, m);
        }
        Ok(ps)
    }
}

/// Serialize a training state.
pub fn save(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, state.model.cfg.to_text().as_bytes());
    put_u64(&mut out, state.step as u64);
    let (seed, stream, word_pos) = state.rng.state();
    put_u64(&mut out, seed);
    put_u64(&mut out, stream);
    out.extend_from_slice(&word_pos.to_le_bytes());
    put_params(&mut out, &state.params);
    put_params(&mut out, &state.m);
    put_params(&mut out, &state.v);
    out
}

/// Deserialize and validate a training state (dynamic-routing models only).
pub fn load(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:02x?}; not a checkpoint file"
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}; this build reads version {VERSION}"
        )));
    }
    let cfg_text = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".to_string()))?;
    let cfg = RunConfig::parse(&cfg_text)?;
    let step = r.u64()? as usize;
    let seed = r.u64()?;
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let params = r.params()?;
    let m = r.params()?;
    let v = r.params()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }

    let mut state = TrainState::new(cfg, LayerMode::AnyExperts)?;
    for (fresh, loaded) in [(&state.params, &params), (&state.m, &m), (&state.v, &v)] {
        if fresh.len() != loaded.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: config implies {}, checkpoint holds {}",
                fresh.len(),
                loaded.len()
            )));
        }
        for ((en, em), (ln, lm)) in fresh.iter().zip(loaded.iter()) {
            if en != ln {
                return Err(Error::Checkpoint(format!(
                    "parameter name mismatch: expected '{en}', found '{ln}'"
                )));
            }
            if em.shape() != lm.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for '{en}': expected {:?}, found {:?}",
                    em.shape(),
                    lm.shape()
                )));
            }
        }
    }
    state.params = params;
    state.m = m;
    state.v = v;
    state.step = step;
    state.rng = Rng::restore(seed, stream, word_pos);
    Ok(state)
}

/// Save to a file.
pub fn save_file(state: &TrainState, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, save(state))?;
    Ok(())
}

/// Load from a file.
pub fn load_file(path: &std::path::Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    load(&bytes)
}
