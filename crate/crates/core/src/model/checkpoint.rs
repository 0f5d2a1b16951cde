//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `HSVM`, format version, architecture
//! descriptor, loss, training config, target normalization, step, seed,
//! parameter count, then parameters and both Adam moment vectors.

use std::fs;
use std::path::Path;

use super::loss::LossKind;
use super::net::{Architecture, TargetNorm, TrainConfig, ValueModel};
use crate::encoding::FEATURE_DIM;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HSVM";
const VERSION: u32 = 1;

pub fn to_bytes(m: &ValueModel) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + 24 * m.params.len());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(m.arch.input_dim as u32).to_le_bytes());
    b.extend_from_slice(&(m.arch.conv.len() as u32).to_le_bytes());
    for &d in &m.arch.conv {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    b.extend_from_slice(&(m.arch.hidden as u32).to_le_bytes());
    b.push(m.loss.code());
    b.extend_from_slice(&m.train.learning_rate.to_le_bytes());
    b.extend_from_slice(&(m.train.batch_size as u32).to_le_bytes());
    b.extend_from_slice(&m.train.clip_norm.to_le_bytes());
    match m.norm {
        Some(n) => {
            b.push(1);
            b.extend_from_slice(&n.mu.to_le_bytes());
            b.extend_from_slice(&n.sigma.to_le_bytes());
        }
        None => {
            b.push(0);
            b.extend_from_slice(&[0; 16]);
        }
    }
    b.extend_from_slice(&m.step.to_le_bytes());
    b.extend_from_slice(&m.seed.to_le_bytes());
    b.extend_from_slice(&(m.params.len() as u64).to_le_bytes());
    for v in [&m.params, &m.adam_m, &m.adam_v] {
        for x in v.iter() {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| "truncated file".to_string())?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn parse(buf: &[u8]) -> std::result::Result<ValueModel, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a model checkpoint".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let input_dim = r.u32()? as usize;
    if input_dim != FEATURE_DIM {
        return Err(format!(
            "feature dimension {input_dim} does not match this build ({FEATURE_DIM})"
        ));
    }
    let n_conv = r.u32()? as usize;
    if n_conv > 64 {
        return Err("implausible layer count".into());
    }
    let conv = (0..n_conv)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let hidden = r.u32()? as usize;
    let loss = LossKind::from_code(r.u8()?).ok_or("unknown loss code")?;
    let train = TrainConfig {
        learning_rate: r.f64()?,
        batch_size: r.u32()? as usize,
        clip_norm: r.f64()?,
    };
    let has_norm = r.u8()?;
    let (mu, sigma) = (r.f64()?, r.f64()?);
    let norm = (has_norm == 1).then_some(TargetNorm { mu, sigma });
    let step = r.u64()?;
    let seed = r.u64()?;
    let n = r.u64()? as usize;
    if n.saturating_mul(24) > buf.len() {
        return Err("truncated file".into());
    }
    let params = r.f64s(n)?;
    let m = r.f64s(n)?;
    let v = r.f64s(n)?;
    if r.pos != buf.len() {
        return Err("trailing bytes".into());
    }
    let arch = Architecture {
        input_dim,
        conv,
        hidden,
    };
    ValueModel::from_parts(arch, loss, train, norm, step, seed, params, m, v).map_err(|e| e.to_string())
}

pub fn from_bytes(buf: &[u8], path: &Path) -> Result<ValueModel> {
    parse(buf).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn save(m: &ValueModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(m))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ValueModel> {
    let buf = fs::read(path)?;
    from_bytes(&buf, path)
}
