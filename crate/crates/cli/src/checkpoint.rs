//! Checkpoints: a JSON manifest plus one blob of little-endian `f32` tensors.

use std::fs;
use std::io::Write;
use std::path::Path;

use notecoder_core::encoder::{EncoderConfig, EncoderParams};
use notecoder_core::heads::{Classifier, HeadConfig, HeadKind};
use notecoder_core::numerics::{ParamStore, Tensor};
use notecoder_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT: &str = "notecoder-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Encoder {
        config: EncoderConfig,
    },
    Classifier {
        head: HeadKind,
        encoder: Option<EncoderConfig>,
        head_config: HeadConfig,
        num_labels: usize,
        vocab_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub model: ModelSpec,
    pub vocab_sha256: String,
    pub label_space_sha256: Option<String>,
    pub step: u64,
    pub dev_metric: Option<f64>,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub store: ParamStore<f32>,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

impl Checkpoint {
    fn build(model: ModelSpec, store: ParamStore<f32>, vocab_sha256: String, label_space_sha256: Option<String>) -> Self {
        let mut offset = 0u64;
        let tensors = store
            .iter()
            .map(|(name, t)| {
                let bytes = (t.len() * 4) as u64;
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect();
        Self {
            manifest: Manifest {
                format: FORMAT.into(),
                model,
                vocab_sha256,
                label_space_sha256,
                step: 0,
                dev_metric: None,
                blob: BLOB.into(),
                tensors,
            },
            store,
        }
    }

    pub fn from_encoder(params: &EncoderParams<f32>, vocab_sha256: String) -> Self {
        Self::build(
            ModelSpec::Encoder {
                config: params.config.clone(),
            },
            params.store.clone(),
            vocab_sha256,
            None,
        )
    }

    pub fn from_classifier(model: &Classifier<f32>, vocab_sha256: String, label_space_sha256: String) -> Self {
        Self::build(
            ModelSpec::Classifier {
                head: model.kind,
                encoder: model.encoder.clone(),
                head_config: model.head.clone(),
                num_labels: model.num_labels,
                vocab_size: model.vocab_size,
            },
            model.store.clone(),
            vocab_sha256,
            Some(label_space_sha256),
        )
    }

    pub fn with_progress(mut self, step: u64, dev_metric: Option<f64>) -> Self {
        self.manifest.step = step;
        self.manifest.dev_metric = dev_metric;
        self
    }

    pub fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(&self.manifest)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn blob_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.store.num_values() * 4);
        for (_, t) in self.store.iter() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(&self.manifest.blob), &self.blob_bytes())?;
        write_atomic(&dir.join(MANIFEST), &self.manifest_bytes()?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.format != FORMAT {
            return Err(Error::Parse(format!("unsupported checkpoint format {:?}", manifest.format)));
        }
        if manifest.blob.contains(['/', '\\']) {
            return Err(Error::Parse("blob must be a file name".into()));
        }
        let blob = fs::read(dir.join(&manifest.blob))?;
        let mut store = ParamStore::new();
        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.bytes != (n * 4) as u64 || e.offset != expected_offset {
                return Err(Error::Parse(format!("tensor {} has an inconsistent blob slice", e.name)));
            }
            let end = e.offset + e.bytes;
            if end > blob.len() as u64 {
                return Err(Error::Parse(format!("tensor {} runs past the blob", e.name)));
            }
            let data = blob[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            expected_offset = end;
        }
        if expected_offset != blob.len() as u64 {
            return Err(Error::Parse("blob has trailing bytes".into()));
        }
        Ok(Self { manifest, store })
    }

    pub fn check_vocab(&self, vocab_sha256: &str) -> Result<()> {
        if self.manifest.vocab_sha256 != vocab_sha256 {
            return Err(Error::InvalidConfig(format!(
                "vocabulary hash mismatch: checkpoint {} vs data {vocab_sha256}",
                self.manifest.vocab_sha256
            )));
        }
        Ok(())
    }

    pub fn check_label_space(&self, label_sha256: &str) -> Result<()> {
        match &self.manifest.label_space_sha256 {
            Some(h) if h == label_sha256 => Ok(()),
            _ => Err(Error::LabelSpaceMismatch),
        }
    }

    pub fn encoder(&self) -> Result<EncoderParams<f32>> {
        match &self.manifest.model {
            ModelSpec::Encoder { config } => EncoderParams::from_store(config.clone(), self.store.clone()),
            _ => Err(Error::InvalidConfig("checkpoint holds a classifier, not an encoder".into())),
        }
    }

    pub fn classifier(&self) -> Result<Classifier<f32>> {
        match &self.manifest.model {
            ModelSpec::Classifier {
                head,
                encoder,
                head_config,
                num_labels,
                vocab_size,
            } => {
                let c = Classifier {
                    kind: *head,
                    encoder: encoder.clone(),
                    head: head_config.clone(),
                    num_labels: *num_labels,
                    vocab_size: *vocab_size,
                    store: self.store.clone(),
                };
                c.validate()?;
                Ok(c)
            }
            _ => Err(Error::InvalidConfig("checkpoint holds an encoder, not a classifier".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use notecoder_core::encoder::init_encoder;

    #[test]
    fn round_trip_is_byte_identical() {
        let cfg = EncoderConfig::desk(40);
        let p: EncoderParams<f32> = init_encoder(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        Checkpoint::from_encoder(&p, sha256_hex("v")).with_progress(7, Some(1.5)).save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded.encoder().unwrap(), p);
        loaded.save(&b).unwrap();
        for f in [MANIFEST, BLOB] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
        assert!(loaded.check_vocab(&sha256_hex("other")).is_err());
        assert!(loaded.classifier().is_err());
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let p: EncoderParams<f32> = init_encoder(&EncoderConfig::desk(40), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::from_encoder(&p, String::new()).save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB);
        let mut bytes = fs::read(&blob).unwrap();
        bytes.pop();
        fs::write(&blob, bytes).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
