//! Binary checkpoints for extractors and full trainer state.
//!
//! Layout is little-endian throughout, with explicit lengths ahead of every
//! variable-size block. Restoring rebuilds the RNG from its seed, stream id,
//! and word position, so a resumed run consumes the exact draw sequence an
//! uninterrupted one would.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memory::{MemoryEntry, ReplayMemory};
use crate::model::{Extractor, ExtractorConfig, Layer};
use crate::ndgrad::Tensor;
use crate::prototypes::PrototypeTable;
use crate::trainer::{Method, TrainConfig, Trainer, TrainerState};

const EXTRACTOR_MAGIC: &[u8; 8] = b"MIREXTR\0";
const TRAINER_MAGIC: &[u8; 8] = b"MIRETRN\0";
const VERSION: u32 = 1;

/// Upper bound on any single length field; a corrupt header fails fast
/// instead of attempting a massive allocation.
const MAX_LEN: u64 = 1 << 24;

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {what}"))
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u128<W: Write>(w: &mut W, v: u128) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_usize<W: Write>(w: &mut W, v: usize) -> Result<()> {
    write_u64(w, v as u64)
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    write_usize(w, vs.len())?;
    for &v in vs {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| corrupt(&format!("unexpected end of file ({e})")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<R, 4>(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<R, 8>(r)?))
}

fn read_u128<R: Read>(r: &mut R) -> Result<u128> {
    Ok(u128::from_le_bytes(read_exact::<R, 16>(r)?))
}

fn read_usize<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let v = read_u64(r)?;
    if v > MAX_LEN {
        return Err(corrupt(&format!("{what} length {v} exceeds limit")));
    }
    Ok(v as usize)
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact::<R, 8>(r)?))
}

fn read_f64s<R: Read>(r: &mut R, what: &str) -> Result<Vec<f64>> {
    let n = read_usize(r, what)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 8], kind: &str) -> Result<()> {
    let got = read_exact::<R, 8>(r)?;
    if &got != magic {
        return Err(Error::Checkpoint(format!(
            "not a {kind} checkpoint (magic {:02x?})",
            got
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    Ok(())
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_usize(w, t.rows())?;
    write_usize(w, t.cols())?;
    for &v in t.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R, what: &str) -> Result<Tensor> {
    let rows = read_usize(r, what)?;
    let cols = read_usize(r, what)?;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n as u64 <= MAX_LEN)
        .ok_or_else(|| corrupt(&format!("{what} shape {rows}x{cols}")))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(read_f64(r)?);
    }
    Tensor::new(rows, cols, data)
}

fn write_extractor_body<W: Write>(w: &mut W, ext: &Extractor) -> Result<()> {
    let cfg = ext.config();
    write_usize(w, cfg.input_dim)?;
    write_usize(w, cfg.hidden.len())?;
    for &h in &cfg.hidden {
        write_usize(w, h)?;
    }
    write_usize(w, cfg.feature_dim)?;
    write_usize(w, cfg.head_hidden)?;
    write_usize(w, cfg.head_out)?;
    write_u64(w, cfg.seed)?;
    for layers in [ext.trunk_layers(), ext.head_layers()] {
        write_usize(w, layers.len())?;
        for l in layers {
            write_tensor(w, &l.w)?;
            write_tensor(w, &l.b)?;
        }
    }
    Ok(())
}

fn read_extractor_body<R: Read>(r: &mut R) -> Result<Extractor> {
    let input_dim = read_usize(r, "input_dim")?;
    let n_hidden = read_usize(r, "hidden layers")?;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(read_usize(r, "hidden width")?);
    }
    let feature_dim = read_usize(r, "feature_dim")?;
    let head_hidden = read_usize(r, "head_hidden")?;
    let head_out = read_usize(r, "head_out")?;
    let seed = read_u64(r)?;
    let cfg = ExtractorConfig {
        input_dim,
        hidden,
        feature_dim,
        head_hidden,
        head_out,
        seed,
    };
    let mut groups: Vec<Vec<Layer>> = Vec::with_capacity(2);
    for what in ["trunk", "head"] {
        let n = read_usize(r, what)?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let w = read_tensor(r, what)?;
            let b = read_tensor(r, what)?;
            layers.push(Layer { w, b });
        }
        groups.push(layers);
    }
    let head = groups.pop().expect("two groups read");
    let trunk = groups.pop().expect("two groups read");
    Extractor::from_parts(cfg, trunk, head)
}

pub fn save_extractor(path: &Path, ext: &Extractor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EXTRACTOR_MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_extractor_body(&mut w, ext)?;
    w.flush()?;
    Ok(())
}

pub fn load_extractor(path: &Path) -> Result<Extractor> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, EXTRACTOR_MAGIC, "model")?;
    let ext = read_extractor_body(&mut r)?;
    expect_eof(&mut r)?;
    Ok(ext)
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(corrupt("trailing bytes after the final block")),
    }
}

pub fn save_trainer(path: &Path, trainer: &Trainer) -> Result<()> {
    let state = trainer.state();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAINER_MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_extractor_body(&mut w, &state.extractor)?;

    write_usize(&mut w, state.memory.capacity())?;
    let parts = state.memory.snapshot();
    write_usize(&mut w, parts.len())?;
    for (class, entries, seen) in &parts {
        write_usize(&mut w, *class)?;
        write_u64(&mut w, *seen)?;
        write_usize(&mut w, entries.len())?;
        for e in entries {
            write_f64s(&mut w, &e.x)?;
            write_usize(&mut w, e.y)?;
            write_f64s(&mut w, &e.z)?;
        }
    }

    write_usize(&mut w, state.prototypes.dim())?;
    write_f64(&mut w, state.prototypes.gamma())?;
    let protos = state.prototypes.snapshot();
    write_usize(&mut w, protos.len())?;
    for (class, p) in &protos {
        write_usize(&mut w, *class)?;
        write_f64s(&mut w, p)?;
    }

    write_u64(&mut w, state.iteration)?;
    w.write_all(&state.rng.get_seed())?;
    write_u64(&mut w, state.rng.get_stream())?;
    write_u128(&mut w, state.rng.get_word_pos())?;
    w.flush()?;
    Ok(())
}

pub fn load_trainer(path: &Path, cfg: &TrainConfig, method: Method) -> Result<Trainer> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, TRAINER_MAGIC, "trainer")?;
    let extractor = read_extractor_body(&mut r)?;

    let capacity = read_usize(&mut r, "memory capacity")?;
    let n_classes = read_usize(&mut r, "memory classes")?;
    let mut parts = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let class = read_usize(&mut r, "class id")?;
        let seen = read_u64(&mut r)?;
        let n = read_usize(&mut r, "class entries")?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let x = read_f64s(&mut r, "entry input")?;
            let y = read_usize(&mut r, "entry label")?;
            let z = read_f64s(&mut r, "entry features")?;
            entries.push(MemoryEntry { x, y, z });
        }
        parts.push((class, entries, seen));
    }
    let memory = ReplayMemory::from_parts(capacity, parts)?;

    let dim = read_usize(&mut r, "prototype dim")?;
    let gamma = read_f64(&mut r)?;
    let n_protos = read_usize(&mut r, "prototype count")?;
    let mut protos = Vec::with_capacity(n_protos);
    for _ in 0..n_protos {
        let class = read_usize(&mut r, "prototype class")?;
        let p = read_f64s(&mut r, "prototype")?;
        protos.push((class, p));
    }
    let prototypes = PrototypeTable::from_parts(dim, gamma, protos)?;

    let iteration = read_u64(&mut r)?;
    let seed = read_exact::<_, 32>(&mut r)?;
    let stream_id = read_u64(&mut r)?;
    let word_pos = read_u128(&mut r)?;
    expect_eof(&mut r)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream_id);
    rng.set_word_pos(word_pos);

    Trainer::from_state(
        cfg,
        method,
        TrainerState {
            extractor,
            memory,
            prototypes,
            rng,
            iteration,
        },
    )
}
