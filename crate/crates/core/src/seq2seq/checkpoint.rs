//! Single-file checkpoints: one compact JSON manifest line, then the raw
//! little-endian `f32` payload it indexes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{build_model, Seq2Seq};
use crate::error::{Error, Result};
use crate::numcore::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Parameter values plus Adam moments.
    pub store: ParamStore,
    pub step: usize,
    pub validation_history: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    slot: String,
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    step: usize,
    validation_history: Vec<f64>,
    arrays: Vec<ArrayEntry>,
}

const SLOTS: [&str; 3] = ["value", "adam_m", "adam_v"];

impl Checkpoint {
    /// Rebuilds the model structure for this checkpoint's configuration.
    pub fn model(&self) -> Result<Seq2Seq> {
        Ok(build_model(&self.config, 0)?.0)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut payload = Vec::new();
        for e in self.store.entries() {
            for (slot, data) in SLOTS.iter().zip([&e.data, &e.m, &e.v]) {
                arrays.push(ArrayEntry {
                    name: e.name.clone(),
                    slot: slot.to_string(),
                    shape: [e.rows, e.cols],
                    dtype: "f32le".into(),
                    offset: payload.len(),
                });
                for x in data.iter() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            validation_history: self.validation_history.clone(),
            arrays,
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..nl])?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
        }
        let payload = &bytes[nl + 1..];
        let (_, mut store) = build_model(&manifest.config, 0)?;
        let mut seen = vec![[false; 3]; store.len()];
        for a in &manifest.arrays {
            if a.dtype != "f32le" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", a.name, a.dtype)));
            }
            let id = store
                .id(&a.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown array {}", a.name)))?;
            let slot = SLOTS
                .iter()
                .position(|s| *s == a.slot)
                .ok_or_else(|| Error::Checkpoint(format!("unknown slot {}", a.slot)))?;
            if store.shape(id) != (a.shape[0], a.shape[1]) {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} does not match model {:?}",
                    a.name,
                    a.shape,
                    store.shape(id)
                )));
            }
            let n = a.shape[0] * a.shape[1];
            let raw = payload
                .get(a.offset..a.offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("{}: payload truncated", a.name)))?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let e = store.entry_mut(id);
            match slot {
                0 => e.data = values,
                1 => e.m = values,
                _ => e.v = values,
            }
            seen[id.0][slot] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s.iter().all(|&x| x)) {
            return Err(Error::Checkpoint(format!(
                "missing arrays for {}",
                store.entries()[i].name
            )));
        }
        Ok(Self {
            config: manifest.config,
            store,
            step: manifest.step,
            validation_history: manifest.validation_history,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytedata::byte_encode;
    use crate::bytedata::ParallelPair;
    use crate::downsamplers::Variant;
    use crate::numcore::Graph;
    use crate::seq2seq::config::ModelDims;
    use crate::seq2seq::model::Batch;

    #[test]
    fn round_trip_is_bit_identical() {
        let dims = ModelDims {
            encoder_layers: 1,
            decoder_layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 8,
            dropout: 0.0,
        };
        let cfg = ModelConfig::with_decoder(dims, 2, Variant::Masking);
        let (m, mut store) = build_model(&cfg, 4).unwrap();
        store.entry_mut(crate::numcore::ParamId(0)).m[0] = 0.25;
        let ck = Checkpoint {
            config: cfg,
            store,
            step: 17,
            validation_history: vec![2.5, 2.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let pair = ParallelPair {
            src: byte_encode("abc", true),
            tgt: byte_encode("abcd", true),
        };
        let batch = Batch::new(&m, &[pair]);
        let run = |s: &ParamStore| {
            let mut g = Graph::<f32>::new(s);
            let y = m.logits(&mut g, &batch);
            g.value(y).data.iter().map(|x| x.to_bits()).collect::<Vec<u32>>()
        };
        assert_eq!(run(&ck.store), run(&back.store));
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(Checkpoint::from_bytes(b"no newline").is_err());
        assert!(Checkpoint::from_bytes(b"{}\n").is_err());
    }
}
