//! Model checkpoint files.
//!
//! Layout (little-endian): magic `MODT0001`, version `u32`, architecture
//! `u8`, dtype `u8`, the eleven [`ModelConfig`] fields as `u64` (vocab,
//! context, d, d_k, d_ff, d_E, |E|, layers, heads, norm mode, seed), then one
//! named record per parameter in [`Model::params`] order, then a CRC32 of
//! everything before it. The knowledge base is a single `kb.entries` record.

use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{self, Dtype, Reader, Writer};
use crate::knowledge::Threshold;
use crate::model::{Architecture, Mixer, Model, ModelConfig, NormMode};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"MODT0001";
const VERSION: u32 = 1;

pub fn to_bytes(model: &Model, dtype: Dtype) -> Vec<u8> {
    let c = model.config();
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(c.architecture.code());
    w.u8(dtype.code());
    for v in [
        c.vocab_size,
        c.context_len,
        c.model_dim,
        c.key_dim,
        c.ffn_dim,
        c.kb_entry_dim,
        c.kb_size,
        c.layer_count,
        c.head_count,
    ] {
        w.u64(v as u64);
    }
    w.u64(c.norm_mode.code());
    w.u64(c.seed);
    for (name, m) in model.params() {
        w.record(&name, m, dtype);
    }
    w.finish()
}

/// Reads only the fixed header (no checksum verification).
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic { expected: "MODT0001" });
    }
    let mut r = Reader::new(bytes);
    r.take(8, "magic")?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let architecture = Architecture::from_code(r.u8("architecture")?)?;
    Dtype::from_code(r.u8("dtype")?)?;
    let mut dims = [0usize; 9];
    for d in &mut dims {
        *d = r.dim("config field")?;
    }
    let [vocab_size, context_len, model_dim, key_dim, ffn_dim, kb_entry_dim, kb_size, layer_count, head_count] = dims;
    Ok(ModelConfig {
        vocab_size,
        context_len,
        model_dim,
        key_dim,
        ffn_dim,
        kb_entry_dim,
        kb_size,
        layer_count,
        head_count,
        norm_mode: NormMode::from_code(r.u64("norm_mode")?)?,
        seed: r.u64("seed")?,
        architecture,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let config = peek_config(bytes)?;
    let body = format::verify_crc(bytes)?;
    let mut r = Reader::new(body);
    r.take(8 + 4 + 1, "header")?;
    let dtype = Dtype::from_code(r.u8("dtype")?)?;
    r.take(11 * 8, "config")?;
    let mut records = Vec::new();
    while r.remaining() > 0 {
        records.push(r.record(dtype)?);
    }
    assemble(config, records)
}

/// Builds a model of the right layout for `config` and fills it from
/// `records`, which must name exactly the model's parameters in order.
fn assemble(config: ModelConfig, records: Vec<(String, Matrix)>) -> Result<Model> {
    config.validate()?;
    let mut model = Model::new(config)?;
    for (l, block) in model.blocks.iter_mut().enumerate() {
        let table = format!("blocks.{l}.cross.threshold.table");
        if let Mixer::Cross(p) = &mut block.mixer {
            if records.iter().any(|(n, _)| *n == table) {
                p.threshold = Threshold::Table(Matrix::zeros(1, model_kb_size(&records)?));
            }
        }
    }
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    if names.len() != records.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {}",
            names.len(),
            records.len()
        )));
    }
    for ((slot, name), (found, m)) in model.params_mut().into_iter().zip(&names).zip(records) {
        if *name != found {
            return Err(Error::Format(format!("expected tensor {name:?}, found {found:?}")));
        }
        if slot.shape() != m.shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("{name} is {:?}, expected {:?}", m.shape(), slot.shape()),
            ));
        }
        *slot = m;
    }
    model.validate()?;
    Ok(model)
}

fn model_kb_size(records: &[(String, Matrix)]) -> Result<usize> {
    records
        .iter()
        .find(|(n, _)| n == "kb.entries")
        .map(|(_, m)| m.rows())
        .ok_or_else(|| Error::Format("modular checkpoint has no kb.entries".into()))
}

pub fn save(model: &Model, path: &Path, dtype: Dtype) -> Result<()> {
    format::write_atomic(path, &to_bytes(model, dtype))
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and requires a particular architecture.
pub fn load_as(path: &Path, expected: Architecture) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    let found = peek_config(&bytes)?.architecture;
    if found != expected {
        return Err(Error::ArchitectureMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(arch: Architecture, layers: usize) -> ModelConfig {
        ModelConfig {
            context_len: 6,
            model_dim: 8,
            key_dim: 4,
            ffn_dim: 12,
            kb_entry_dim: 6,
            kb_size: 10,
            layer_count: layers,
            head_count: 2,
            architecture: arch,
            ..ModelConfig::default()
        }
    }

    fn bits(m: &Model) -> Vec<u64> {
        m.params()
            .iter()
            .flat_map(|(_, p)| p.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        for arch in [Architecture::Standard, Architecture::Modular] {
            let m = Model::new(cfg(arch, 2)).unwrap();
            let back = from_bytes(&to_bytes(&m, Dtype::F64)).unwrap();
            assert_eq!(back.config(), m.config());
            assert_eq!(bits(&back), bits(&m));
            let toks = [1, 2, 3, 4];
            let a = m.forward(&toks).unwrap();
            let b = back.forward(&toks).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn unfolded_table_thresholds_round_trip() {
        let m = Model::new(cfg(Architecture::Standard, 2)).unwrap().unfold_to_modular().unwrap();
        let back = from_bytes(&to_bytes(&m, Dtype::F64)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn header_layout() {
        let m = Model::new(cfg(Architecture::Modular, 2)).unwrap();
        let bytes = to_bytes(&m, Dtype::F64);
        assert_eq!(&bytes[..8], b"MODT0001");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], 1);
        assert_eq!(bytes[13], 0);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 256);
    }

    #[test]
    fn corruption_and_mismatch_are_detected() {
        let m = Model::new(cfg(Architecture::Standard, 1)).unwrap();
        let bytes = to_bytes(&m, Dtype::F64);
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(from_bytes(&bad), Err(Error::Checksum { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Version { found: 9, .. })));
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("std.ckpt");
        save(&m, &path, Dtype::F64).unwrap();
        let err = load_as(&path, Architecture::Modular).unwrap_err();
        assert!(err.to_string().contains("architecture mismatch"), "{err}");
        assert_eq!(load_as(&path, Architecture::Standard).unwrap(), m);
    }

    #[test]
    fn f32_checkpoints_round_through_single_precision() {
        let m = Model::new(cfg(Architecture::Modular, 1)).unwrap();
        let back = from_bytes(&to_bytes(&m, Dtype::F32)).unwrap();
        for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
    }
}
