//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size          field
//! 0       8             magic "SFLCKPT1"
//! 8       4             u32 header length H
//! 12      H             JSON header (dims, family, options, entry table)
//! 12+H    sum(entries)  f64 arrays, one per entry, in header order
//! ```
//!
//! The header's entry table names every parameter tensor with its shape,
//! so a checkpoint is self-describing; loading rebuilds the model wiring
//! from the recorded dimensions and fills the values bit for bit.

use crate::basis::BasisSpec;
use crate::model::{build_named_model, ModelKind, ModelOptions, NormPlacement, PolyBaseModel};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SFLCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic; not a checkpoint file")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("entry table mismatch: {0}")]
    EntryMismatch(String),
    #[error("model rebuild failed: {0}")]
    Rebuild(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    k: usize,
    h: usize,
    f_in: usize,
    classes: usize,
    dropout: f64,
    norm_placement: NormPlacement,
    spec: BasisSpec,
    entries: Vec<EntryMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
}

/// Serializes a model to the checkpoint byte layout.
pub fn to_bytes(model: &PolyBaseModel) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: model.kind,
        k: model.k,
        h: model.h,
        f_in: model.f_in,
        classes: model.classes,
        dropout: model.dropout,
        norm_placement: model.norm_placement,
        spec: model.spec.clone(),
        entries: model
            .params
            .entries()
            .iter()
            .map(|e| EntryMeta {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header_json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for e in model.params.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes a checkpoint, rebuilding the model and restoring every
/// parameter tensor exactly.
pub fn from_bytes(bytes: &[u8]) -> Result<PolyBaseModel, CheckpointError> {
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated("shorter than fixed prefix"));
    }
    if &bytes[0..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body_start = 12usize
        .checked_add(header_len)
        .ok_or(CheckpointError::Truncated("header length overflows"))?;
    if bytes.len() < body_start {
        return Err(CheckpointError::Truncated("header runs past end of file"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body_start])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(header.format_version));
    }
    if header.k > 1 << 20 || header.h > 1 << 20 || header.f_in > 1 << 20 || header.classes > 1 << 20
    {
        return Err(CheckpointError::Header("implausible dimensions".into()));
    }

    let freeze_shape = !header.spec.has_trainable_params();
    let krawtchouk_n = match header.spec.params {
        crate::basis::FamilyParams::Krawtchouk { n, .. } => Some(n),
        _ => None,
    };
    let mut model = build_named_model(
        header.kind,
        header.k,
        header.h,
        header.f_in,
        header.classes,
        0,
        &ModelOptions {
            freeze_shape,
            norm_placement: header.norm_placement,
            krawtchouk_n,
        },
    )
    .map_err(|e| CheckpointError::Rebuild(e.to_string()))?;
    model.dropout = header.dropout;
    model.spec = header.spec;

    if header.entries.len() != model.params.len() {
        return Err(CheckpointError::EntryMismatch(format!(
            "{} entries in file, {} in rebuilt model",
            header.entries.len(),
            model.params.len()
        )));
    }

    let mut offset = body_start;
    for (id, meta) in header.entries.iter().enumerate() {
        let entry = model.params.entry(id);
        if entry.name != meta.name || entry.value.shape() != meta.shape.as_slice() {
            return Err(CheckpointError::EntryMismatch(format!(
                "entry {id}: file has {} {:?}, model expects {} {:?}",
                meta.name,
                meta.shape,
                entry.name,
                entry.value.shape()
            )));
        }
        let len: usize = meta.shape.iter().product::<usize>().max(1);
        let nbytes = len
            .checked_mul(8)
            .ok_or(CheckpointError::Truncated("entry size overflows"))?;
        let end = offset
            .checked_add(nbytes)
            .ok_or(CheckpointError::Truncated("entry runs past end of file"))?;
        if bytes.len() < end {
            return Err(CheckpointError::Truncated("entry data missing"));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.params.value_mut(id).data_mut().copy_from_slice(&data);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Truncated("trailing bytes after entries"));
    }
    Ok(model)
}

pub fn save(model: &PolyBaseModel, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolyBaseModel, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelOptions;

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in ModelKind::ALL {
            let model =
                build_named_model(kind, 3, 8, 5, 4, 42, &ModelOptions::default()).unwrap();
            let bytes = to_bytes(&model);
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back.kind, model.kind);
            assert_eq!(back.k, model.k);
            assert_eq!(back.spec, model.spec);
            assert_eq!(back.params.len(), model.params.len());
            for (a, b) in back.params.entries().iter().zip(model.params.entries()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.value.data(), b.value.data());
            }
            // Bytes themselves are stable too.
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn garbage_and_truncation_are_errors_not_panics() {
        assert!(matches!(from_bytes(b""), Err(CheckpointError::Truncated(_))));
        assert!(matches!(
            from_bytes(b"NOTAMAGICNUMBER!"),
            Err(CheckpointError::BadMagic)
        ));
        let model =
            build_named_model(ModelKind::LJacobinet, 2, 4, 3, 2, 1, &ModelOptions::default())
                .unwrap();
        let mut bytes = to_bytes(&model);
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::Truncated(_))
        ));
        // Corrupt the header length so it points past the end.
        let mut huge = to_bytes(&model);
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(from_bytes(&huge).is_err());
    }
}
