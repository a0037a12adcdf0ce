//! Checkpoint files.
//!
//! A checkpoint is a versioned little-endian container: magic `TDRC`,
//! version, the configuration fingerprint, stage, completed epochs, seed,
//! the generator position, every named parameter tensor in store order,
//! and the optimizer state. Floats are stored as their `f64` bit patterns,
//! so a load/save cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use tridira_core::optim::{AdamW, Moments};
use tridira_core::trainer::{Checkpoint, RngState, Stage};
use tridira_core::{Matrix, ParamStore};

use crate::bin_io::{put_len, put_string, put_u32, Reader};
use crate::error::{IoContext, Result};

pub const MAGIC: [u8; 4] = *b"TDRC";
pub const VERSION: u32 = 1;

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_len(out, m.rows());
    put_len(out, m.cols());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_matrix(r: &mut Reader<'_>) -> Result<Matrix> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let Some(n) = rows.checked_mul(cols) else {
        return r.fail("matrix size overflows");
    };
    let bytes = r.bytes(n.checked_mul(8).unwrap_or(usize::MAX))?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_string(&mut out, &ckpt.fingerprint);
    out.push(ckpt.stage as u8);
    out.extend_from_slice(&(ckpt.epoch as u64).to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.seed);
    out.extend_from_slice(&ckpt.rng.stream.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    put_len(&mut out, ckpt.params.len());
    for (_, name, value) in ckpt.params.iter() {
        put_string(&mut out, name);
        put_matrix(&mut out, value);
    }
    let opt = &ckpt.optimizer;
    out.extend_from_slice(&opt.learning_rate.to_le_bytes());
    out.extend_from_slice(&opt.weight_decay.to_le_bytes());
    out.extend_from_slice(&opt.step.to_le_bytes());
    put_len(&mut out, opt.moments.len());
    for slot in &opt.moments {
        match slot {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                put_matrix(&mut out, &m.first);
                put_matrix(&mut out, &m.second);
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path);
    if r.bytes(4)? != MAGIC {
        return r.fail("missing TDRC magic");
    }
    let version = r.u32()?;
    if version != VERSION {
        return r.fail(format!("unsupported checkpoint version {version}"));
    }
    let fingerprint = r.string()?;
    let stage_tag = r.u8()?;
    let Some(stage) = Stage::from_u8(stage_tag) else {
        return r.fail(format!("unknown stage {stage_tag}"));
    };
    let epoch = r.u64()?;
    let Ok(epoch) = usize::try_from(epoch) else {
        return r.fail("epoch count overflows");
    };
    let seed = r.u64()?;
    let rng = RngState { seed: r.bytes(32)?.try_into().expect("32 bytes"), stream: r.u64()?, word_pos: r.u128()? };
    let count = r.len(1)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        if params.id_of(&name).is_some() {
            return r.fail(format!("duplicate parameter {name}"));
        }
        let value = read_matrix(&mut r)?;
        params.add(name, value);
    }
    let learning_rate = r.f64()?;
    let weight_decay = r.f64()?;
    let step = r.u64()?;
    let slots = r.len(1)?;
    let mut moments = Vec::with_capacity(slots);
    for _ in 0..slots {
        moments.push(match r.u8()? {
            0 => None,
            1 => Some(Moments { first: read_matrix(&mut r)?, second: read_matrix(&mut r)? }),
            t => return r.fail(format!("bad moment tag {t}")),
        });
    }
    r.finish()?;
    let optimizer = AdamW { learning_rate, weight_decay, step, moments };
    Ok(Checkpoint { fingerprint, stage, epoch, seed, rng, params, optimizer })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ckpt)).at(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes, path)
}
