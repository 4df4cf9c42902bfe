//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "CSI1" | u32 version | u64 len, metadata JSON | 32-byte log digest
//! u32 group count | group blocks ... | one SHA-256 per group block
//! ```
//!
//! A group block is `u64 len, name | u8 frozen | u32 tensors` followed by
//! `u64 len, name | u32 rank | u64 dims... | f64 values` per tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ContrastiveMode, FeatureLayout, Module, PipelineError, TrainConfig};
use crate::autodiff::Tensor;
use crate::encoders::{EncoderConfig, ParamSet};

pub const MAGIC: &[u8; 4] = b"CSI1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Contrastive(ContrastiveMode),
    Baseline,
}

/// Configuration snapshot stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelKind,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Encoder outputs concatenated to form the predictor input.
    pub features: FeatureLayout,
    pub predictor: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub frozen: bool,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub groups: Vec<ParamGroup>,
    pub log_digest: [u8; 32],
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Result<&ParamGroup, PipelineError> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| PipelineError::MissingGroup(name.to_string()))
    }

    pub fn group_mut(&mut self, name: &str) -> Result<&mut ParamGroup, PipelineError> {
        self.groups
            .iter_mut()
            .find(|g| g.name == name)
            .ok_or_else(|| PipelineError::MissingGroup(name.to_string()))
    }

    pub(crate) fn module(&self, name: &str) -> Result<Module, PipelineError> {
        Module::from_group(name, self.group(name)?.params.clone())
    }

    /// Checksums of every frozen group, in group order.
    pub fn frozen_checksums(&self) -> Vec<(String, [u8; 32])> {
        self.groups
            .iter()
            .filter(|g| g.frozen)
            .map(|g| (g.name.clone(), g.params.digest()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_bytes(&mut out, &meta);
        out.extend_from_slice(&self.log_digest);
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        let mut sums = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let block = group_block(g);
            sums.push(Sha256::digest(&block));
            out.extend_from_slice(&block);
        }
        for s in sums {
            out.extend_from_slice(&s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(PipelineError::Corrupt("missing CSI1 magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PipelineError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| PipelineError::Corrupt(format!("metadata: {e}")))?;
        let log_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut groups = Vec::with_capacity(count);
        let mut spans = Vec::with_capacity(count);
        for _ in 0..count {
            let start = r.pos;
            groups.push(read_group(&mut r)?);
            spans.push(start..r.pos);
        }
        for (g, span) in groups.iter().zip(spans) {
            let stored = r.take(32)?;
            if Sha256::digest(&bytes[span]).as_slice() != stored {
                return Err(PipelineError::ChecksumMismatch { group: g.name.clone() });
            }
        }
        if r.pos != bytes.len() {
            return Err(PipelineError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            meta,
            groups,
            log_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn group_block(g: &ParamGroup) -> Vec<u8> {
    let mut out = Vec::new();
    put_bytes(&mut out, g.name.as_bytes());
    out.push(u8::from(g.frozen));
    out.extend_from_slice(&(g.params.len() as u32).to_le_bytes());
    for (name, t) in g.params.names().iter().zip(g.params.tensors()) {
        put_bytes(&mut out, name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PipelineError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, PipelineError> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| PipelineError::Corrupt(format!("length {n} out of range")))
    }

    fn string(&mut self) -> Result<String, PipelineError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| PipelineError::Corrupt("name is not UTF-8".into()))
    }
}

fn read_group(r: &mut Reader) -> Result<ParamGroup, PipelineError> {
    let name = r.string()?;
    let frozen = match r.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(PipelineError::Corrupt(format!("frozen flag {b}"))),
    };
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let tname = r.string()?;
        let rank = r.u32()?;
        if !(1..=2).contains(&rank) {
            return Err(PipelineError::Corrupt(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| PipelineError::Corrupt("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(tname, Tensor::new(shape, data)?);
    }
    Ok(ParamGroup { name, frozen, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{GcnEncoder, Mlp};
    use crate::seed;

    fn sample() -> Checkpoint {
        let mut rng = seed::rng(5);
        let enc = EncoderConfig::desk();
        let gcn = GcnEncoder::init(&enc, &mut rng);
        let mlp = Mlp::predictor(16, &mut rng);
        Checkpoint {
            meta: CheckpointMeta {
                model: ModelKind::Baseline,
                encoder: enc,
                train: TrainConfig::desk(),
                features: FeatureLayout::default(),
                predictor: "mlp".into(),
            },
            groups: vec![
                ParamGroup {
                    name: "gcn".into(),
                    frozen: true,
                    params: gcn.params().clone(),
                },
                ParamGroup {
                    name: "mlp".into(),
                    frozen: false,
                    params: mlp.params().clone(),
                },
            ],
            log_digest: [7; 32],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.csi");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, PipelineError::VersionMismatch { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn flipped_weight_byte_fails_checksum() {
        let ck = sample();
        let mut bytes = ck.to_bytes();
        // last byte of the final group block, just before the checksums
        let i = bytes.len() - 32 * ck.groups.len() - 1;
        bytes[i] ^= 1;
        match Checkpoint::from_bytes(&bytes) {
            Err(PipelineError::ChecksumMismatch { group }) => assert_eq!(group, "mlp"),
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_missing_file() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
            Err(PipelineError::Corrupt(_))
        ));
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/model.csi")),
            Err(PipelineError::Io { .. })
        ));
    }

    #[test]
    fn frozen_checksums_cover_frozen_groups_only() {
        let ck = sample();
        let sums = ck.frozen_checksums();
        assert_eq!(sums.len(), 1);
        assert_eq!(sums[0].0, "gcn");
    }
}
