//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DFMP"          4 bytes magic
//! version         u32
//! backend tag     u32   (1 = tabular, 2 = mlp)
//! shape length    u32
//! shape           u64 * shape length
//! parameter count u64
//! parameters      f64 * parameter count
//! ```
//!
//! The JSON sidecar next to it (`<file>.json`) records the state space, the
//! approximator config and what the model represents, which is enough to
//! rebuild it.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::approximator::{Approximator, ApproximatorConfig, Mlp, Tabular};
use crate::error::{Error, Result};
use crate::guidance::GuidanceKind;
use crate::paths::ConditionalPath;
use crate::statespace::StateSpace;

pub const MAGIC: &[u8; 4] = b"DFMP";
pub const VERSION: u32 = 1;

/// What a stored approximator computes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelRole {
    Posterior { path: ConditionalPath },
    Guidance { kind: GuidanceKind, path: ConditionalPath },
    DensityRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    pub space: StateSpace,
    pub out_dim: usize,
    pub approximator: ApproximatorConfig,
    pub model: ModelRole,
    /// Free-form provenance (seed, training config, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Path of the sidecar belonging to `model_path`.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(model: &Approximator) -> Vec<u8> {
    let shape = model.shape();
    let params = model.params();
    let mut out = Vec::with_capacity(24 + 8 * (shape.len() + params.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.backend_tag().to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for v in &shape {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Raw container contents before they are matched against a sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct RawModel {
    pub version: u32,
    pub backend_tag: u32,
    pub shape: Vec<u64>,
    pub params: Vec<f64>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Container(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<RawModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Container("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let backend_tag = c.u32()?;
    let rank = c.u32()? as usize;
    if rank > 64 {
        return Err(Error::Container(format!("implausible shape rank {rank}")));
    }
    let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
    let count = c.u64()?;
    let remaining = (bytes.len() - c.pos) as u64;
    if count.checked_mul(8) != Some(remaining) {
        return Err(Error::Container(format!("{count} parameters do not match {remaining} payload bytes")));
    }
    let params = c
        .take(remaining as usize)?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok(RawModel { version, backend_tag, shape, params })
}

/// Rebuilds the approximator described by `sidecar` from `raw`, checking the
/// backend tag and shape header against it.
pub fn assemble(raw: RawModel, sidecar: &Sidecar) -> Result<Approximator> {
    let model = match &sidecar.approximator {
        ApproximatorConfig::Tabular { time_buckets } => {
            Approximator::Tabular(Tabular::from_params(sidecar.space, *time_buckets, sidecar.out_dim, raw.params)?)
        }
        ApproximatorConfig::Mlp { hidden, activation } => {
            Approximator::Mlp(Mlp::from_params(sidecar.space, hidden, *activation, sidecar.out_dim, raw.params)?)
        }
    };
    if model.backend_tag() != raw.backend_tag {
        return Err(Error::Container(format!(
            "backend tag {} does not match the sidecar config ({})",
            raw.backend_tag,
            model.backend_tag()
        )));
    }
    if model.shape() != raw.shape {
        return Err(Error::Container(format!("shape header {:?} does not match {:?}", raw.shape, model.shape())));
    }
    Ok(model)
}

/// Writes the container and its sidecar.
pub fn save(path: &Path, model: &Approximator, role: ModelRole, metadata: serde_json::Value) -> Result<()> {
    let sidecar = Sidecar {
        format_version: VERSION,
        space: *model.space(),
        out_dim: model.out_dim(),
        approximator: model.config(),
        model: role,
        metadata,
    };
    fs::File::create(path)?.write_all(&encode(model))?;
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Approximator, Sidecar)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.format_version != VERSION {
        return Err(Error::Container(format!("unsupported sidecar version {}", sidecar.format_version)));
    }
    let model = assemble(decode(&bytes)?, &sidecar)?;
    Ok((model, sidecar))
}
