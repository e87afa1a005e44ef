//! Checkpoint persistence.
//!
//! Binary, little-endian: 8-byte magic `MOFETIME`, u32 format version,
//! u32 config-blob length, the config as canonical JSON, then one record
//! per named array in lexicographic order (u32 name length, name bytes,
//! u32 element count, elements as 32-bit floats), and a trailing 8-byte
//! CRC-64 of all preceding bytes.
//!
//! Two reserved names carry trainer state through the same record format:
//! `_rng` (32 seed bytes + 16 stream-position bytes, one byte per element)
//! and `_step` (8 step-counter bytes). The leading underscore keeps them
//! lexicographically ahead of the model parameters.

use crate::config::{canonical_json, ModelConfig};
use crate::error::{Error, Result};
use crate::model::param_specs;
use crate::params::{ModelParams, Param};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MOFETIME";
const FORMAT_VERSION: u32 = 1;
const RNG_ENTRY: &str = "_rng";
const STEP_ENTRY: &str = "_step";
const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

/// A trained model plus enough trainer state to resume: configuration,
/// parameters, RNG seed and stream position, and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub step: u64,
}

impl Checkpoint {
    /// Reject unless the stored configuration matches `cfg` exactly,
    /// listing every differing field.
    pub fn require_config(&self, cfg: &ModelConfig) -> Result<()> {
        let fields = self.config.diff_fields(cfg);
        if fields.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch { fields })
        }
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut entries: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut rng_bytes = Vec::with_capacity(48);
    rng_bytes.extend_from_slice(&ckpt.rng_seed);
    rng_bytes.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    entries.insert(RNG_ENTRY.into(), rng_bytes.iter().map(|&b| b as f32).collect());
    entries.insert(
        STEP_ENTRY.into(),
        ckpt.step.to_le_bytes().iter().map(|&b| b as f32).collect(),
    );
    for (name, param) in ckpt.params.iter() {
        entries.insert(name.clone(), param.data.iter().map(|&v| v as f32).collect());
    }

    let cfg_json = canonical_json(&ckpt.config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_json.as_bytes());
    for (name, values) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = CRC64.checksum(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }

    // structural walk first, so truncation is reported as truncation
    let mut cur = Cursor { bytes: &bytes, pos: 8 };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { got: version });
    }
    let cfg_len = cur.u32()? as usize;
    let cfg_bytes = cur.take(cfg_len)?.to_vec();
    let mut raw_entries: Vec<(String, Vec<f32>)> = Vec::new();
    while cur.pos + 8 < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| Error::Truncated)?;
        let count = cur.u32()? as usize;
        let raw = cur.take(count * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some((prev, _)) = raw_entries.last() {
            if *prev >= name {
                return Err(Error::Truncated);
            }
        }
        raw_entries.push((name, values));
    }
    if cur.pos + 8 != bytes.len() {
        return Err(Error::Truncated);
    }
    let stored_crc = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    if CRC64.checksum(&bytes[..bytes.len() - 8]) != stored_crc {
        return Err(Error::CrcMismatch);
    }

    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    config.validate()?;

    let mut entries: BTreeMap<String, Vec<f32>> = raw_entries.into_iter().collect();
    let rng_raw = entries.remove(RNG_ENTRY).ok_or(Error::MissingParam { name: RNG_ENTRY.into() })?;
    if rng_raw.len() != 48 {
        return Err(Error::Truncated);
    }
    let rng_bytes: Vec<u8> = rng_raw.iter().map(|&v| v as u8).collect();
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(&rng_bytes[..32]);
    let rng_word_pos = u128::from_le_bytes(rng_bytes[32..48].try_into().expect("16 bytes"));

    let step_raw = entries.remove(STEP_ENTRY).ok_or(Error::MissingParam { name: STEP_ENTRY.into() })?;
    if step_raw.len() != 8 {
        return Err(Error::Truncated);
    }
    let step_bytes: Vec<u8> = step_raw.iter().map(|&v| v as u8).collect();
    let step = u64::from_le_bytes(step_bytes.as_slice().try_into().expect("8 bytes"));

    let mut params = BTreeMap::new();
    for spec in param_specs(&config) {
        let values = entries.remove(&spec.name).ok_or(Error::MissingParam { name: spec.name.clone() })?;
        let numel: usize = spec.shape.iter().product();
        if values.len() != numel {
            return Err(Error::BadParam {
                name: spec.name.clone(),
                detail: format!("{} stored elements, expected {numel}", values.len()),
            });
        }
        params.insert(
            spec.name,
            Param {
                shape: spec.shape,
                data: values.iter().map(|&v| v as f64).collect(),
            },
        );
    }
    if let Some((name, _)) = entries.into_iter().next() {
        return Err(Error::UnknownParam { name });
    }

    Ok(Checkpoint {
        config,
        params: ModelParams::from_entries(params),
        rng_seed,
        rng_word_pos,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::params::ParamSpec;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            h: 8,
            layers: 1,
            heads: 2,
            experts: 2,
            top_k: 1,
            expert_width: 4,
            ..ModelConfig::default()
        }
    }

    fn sample_checkpoint() -> Checkpoint {
        let config = small_cfg();
        Checkpoint {
            params: init_params(&config, 42),
            config,
            rng_seed: *b"0123456789abcdef0123456789abcdef",
            rng_word_pos: 0x1234_5678_9abc_def0_1122_3344_5566_7788,
            step: 12345,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let ckpt = sample_checkpoint();
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.step, ckpt.step);
        assert_eq!(loaded.rng_seed, ckpt.rng_seed);
        assert_eq!(loaded.rng_word_pos, ckpt.rng_word_pos);
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_params_are_storage_precision_of_originals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for (name, param) in ckpt.params.iter() {
            let got = loaded.params.get(name).unwrap();
            for (a, b) in param.data.iter().zip(&got.data) {
                assert_eq!(*a as f32, *b as f32);
                assert_eq!(*b, (*a as f32) as f64);
            }
        }
    }

    #[test]
    fn truncation_is_detected_as_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated)));
    }

    #[test]
    fn corruption_is_detected_by_crc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CrcMismatch)));
    }

    #[test]
    fn bad_magic_and_bad_version_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic)));

        let mut bad_version = good;
        bad_version[8] = 9;
        // keep the CRC consistent so the version check is what fires
        let crc = CRC64.checksum(&bad_version[..bad_version.len() - 8]);
        let n = bad_version.len();
        bad_version[n - 8..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { got: 9 })
        ));
    }

    #[test]
    fn unknown_parameter_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.bin");
        let mut ckpt = sample_checkpoint();
        // smuggle an extra named array into the file
        let mut specs = vec![ParamSpec::new("zzz.extra", vec![2], crate::params::Init::Ones)];
        specs.extend(crate::model::param_specs(&ckpt.config));
        ckpt.params = ModelParams::init_from_specs(&specs, 42);
        save_checkpoint(&path, &ckpt).unwrap();
        match load_checkpoint(&path) {
            Err(Error::UnknownParam { name }) => assert_eq!(name, "zzz.extra"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_guard_names_differing_fields() {
        let ckpt = sample_checkpoint();
        let mut other = ckpt.config.clone();
        other.h = 16;
        other.heads = 4;
        match ckpt.require_config(&other) {
            Err(Error::ConfigMismatch { fields }) => {
                assert!(fields.contains(&"h".to_string()));
                assert!(fields.contains(&"heads".to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
        ckpt.require_config(&ckpt.config.clone()).unwrap();
    }
}
