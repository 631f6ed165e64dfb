//! `DFNC` checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "DFNC" | u32 version = 1 | u32 json_len | json_len bytes of UTF-8 JSON
//! for each manifest entry: raw f32 values
//! if optimizer_present: for each learnable entry in manifest order,
//!     m values then v values (f32); then u64 step count
//! ```
//!
//! The JSON header carries the model config, the ordered manifest
//! (name, shape, kind), the optimizer flag and the config hash.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DfnError, Result};
use crate::nn::EntryKind;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::{DfnModel, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub kind: EntryKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    optimizer_present: bool,
    config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<AdamConfig>,
    /// Completed training epochs when the checkpoint was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint<T> {
    pub model: DfnModel<T>,
    pub optimizer: Option<AdamState<T>>,
    pub epoch: Option<usize>,
}

fn manifest<T: Scalar>(model: &DfnModel<T>) -> Vec<ManifestEntry> {
    model
        .store()
        .entries()
        .iter()
        .map(|e| ManifestEntry {
            name: e.name.clone(),
            shape: e.value.shape().dims(),
            kind: e.kind,
        })
        .collect()
}

fn push_f32s<T: Scalar>(buf: &mut Vec<u8>, values: &[T]) {
    for v in values {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint<T: Scalar>(model: &DfnModel<T>, optimizer: Option<&AdamState<T>>, epoch: Option<usize>) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config().clone(),
        manifest: manifest(model),
        optimizer_present: optimizer.is_some(),
        config_hash: model.config().hash(),
        optimizer: optimizer.map(|o| o.config),
        epoch,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for e in model.store().entries() {
        push_f32s(&mut buf, e.value.data());
    }
    if let Some(opt) = optimizer {
        for (m, v) in opt.m.iter().zip(&opt.v) {
            push_f32s(&mut buf, m);
            push_f32s(&mut buf, v);
        }
        buf.extend_from_slice(&opt.step.to_le_bytes());
    }
    Ok(buf)
}

/// Writes via a temporary file and rename, so readers never see a partial
/// checkpoint.
pub fn save_checkpoint<T: Scalar>(model: &DfnModel<T>, optimizer: Option<&AdamState<T>>, epoch: Option<usize>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, epoch)?;
    let tmp = path.with_extension("dfnc.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DfnError::Format(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        Ok(self
            .take(n * 4, what)?
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }
}

fn parse_header(r: &mut Reader<'_>) -> Result<Header> {
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(DfnError::Format("bad magic, not a DFNC checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(DfnError::Format(format!("unsupported version {version}")));
    }
    let len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)?;
    if header.config_hash != header.config.hash() {
        return Err(DfnError::Format("config hash does not match the stored config".into()));
    }
    Ok(header)
}

fn fill<T: Scalar>(model: &mut DfnModel<T>, header: &Header, r: &mut Reader<'_>) -> Result<Option<AdamState<T>>> {
    let expected = manifest(model);
    if expected != header.manifest {
        return Err(DfnError::Format("parameter manifest does not match the model built from the config".into()));
    }
    for entry in model.store_mut().entries_mut() {
        let values = r.f32s::<T>(entry.value.len(), &entry.name)?;
        entry.value.data_mut().copy_from_slice(&values);
        entry.value.clear_grad();
    }
    let optimizer = if header.optimizer_present {
        let config = header
            .optimizer
            .ok_or_else(|| DfnError::Format("optimizer section without optimizer config".into()))?;
        let mut state = AdamState::new(model.store(), config);
        let sizes: Vec<(String, usize)> = model
            .store()
            .learnable()
            .map(|(_, e)| (e.name.clone(), e.value.len()))
            .collect();
        for (slot, (name, len)) in sizes.into_iter().enumerate() {
            state.m[slot] = r.f32s(len, &format!("{name} first moment"))?;
            state.v[slot] = r.f32s(len, &format!("{name} second moment"))?;
        }
        state.step = u64::from_le_bytes(r.take(8, "optimizer step")?.try_into().unwrap());
        Some(state)
    } else {
        None
    };
    if r.pos != r.bytes.len() {
        return Err(DfnError::Format(format!("{} trailing bytes", r.bytes.len() - r.pos)));
    }
    Ok(optimizer)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let header = parse_header(&mut r)?;
    let mut model = DfnModel::build(header.config.clone(), &mut Rng::new(0))?;
    let optimizer = fill(&mut model, &header, &mut r)?;
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: header.epoch,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads parameters into an existing model whose config must hash equal.
pub fn load_into<T: Scalar>(model: &mut DfnModel<T>, path: &Path) -> Result<(Option<AdamState<T>>, Option<usize>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let header = parse_header(&mut r)?;
    if header.config_hash != model.config().hash() {
        return Err(DfnError::Format(format!(
            "config hash mismatch: checkpoint {} vs model {}",
            header.config_hash,
            model.config().hash()
        )));
    }
    let opt = fill(model, &header, &mut r)?;
    Ok((opt, header.epoch))
}
