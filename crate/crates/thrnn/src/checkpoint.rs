//! Binary checkpoints.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "THRNNCKP"
//! 8       4     format version, u32 little endian
//! 12      4     header length H in bytes, u32 little endian
//! 16      H     JSON header (UTF-8)
//! 16+H    ...   f64 little-endian payload
//! ```
//!
//! The header holds the model configuration, completed epochs, the training
//! seed, the item and user id vocabularies, the array table
//! (`{"name","rows","cols"}` in payload order) and, when optimizer state is
//! present, the Adam step count. The payload is every parameter array in
//! table order, row major, followed by the Adam first moments and then the
//! second moments in the same order.
//!
//! GRU gates follow `r = σ(W_r x + U_r h + b_r)`,
//! `z = σ(W_z x + U_z h + b_z)`, `h̃ = tanh(W_h x + U_h (r ∘ h) + b_h)`,
//! `h' = (1 − z) ∘ h + z ∘ h̃`; `W_*` arrays are `hidden × input`.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thrnn_core::optim::AdamState;
use thrnn_core::tape::ParamStore;
use thrnn_core::{Array2, ModelConfig, Thrnn};

pub const MAGIC: &[u8; 8] = b"THRNNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub epochs_done: usize,
    pub seed: u64,
    pub num_items: usize,
    pub num_users: usize,
    pub item_ids: Vec<String>,
    pub user_ids: Vec<String>,
    pub arrays: Vec<ArrayEntry>,
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Thrnn,
    pub adam: Option<AdamState>,
    pub epochs_done: usize,
    pub seed: u64,
    pub item_ids: Vec<String>,
    pub user_ids: Vec<String>,
}

fn write_array(out: &mut impl Write, a: &Array2) -> Result<()> {
    for v in a.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(input: &mut impl Read, rows: usize, cols: usize) -> Result<Array2> {
    let mut bytes = vec![0u8; rows * cols * 8];
    input.read_exact(&mut bytes).context("checkpoint payload is truncated")?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Array2::from_vec(rows, cols, data)?)
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: self.model.config().clone(),
            epochs_done: self.epochs_done,
            seed: self.seed,
            num_items: self.model.num_items(),
            num_users: self.model.num_users(),
            item_ids: self.item_ids.clone(),
            user_ids: self.user_ids.clone(),
            arrays: self
                .model
                .store()
                .iter()
                .map(|(_, name, a)| ArrayEntry {
                    name: name.into(),
                    rows: a.rows(),
                    cols: a.cols(),
                })
                .collect(),
            optimizer: self.adam.as_ref().map(|a| OptimizerHeader { step: a.step }),
        }
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        out.write_all(MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let len = u32::try_from(header.len()).context("checkpoint header exceeds 4 GiB")?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(&header)?;
        for (_, _, a) in self.model.store().iter() {
            write_array(&mut out, a)?;
        }
        if let Some(adam) = &self.adam {
            for a in adam.m.iter().chain(&adam.v) {
                write_array(&mut out, a)?;
            }
        }
        Ok(())
    }

    pub fn read(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).context("checkpoint is shorter than its magic")?;
        ensure!(&magic == MAGIC, "not a checkpoint (bad magic)");
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        ensure!(
            version == CHECKPOINT_VERSION,
            "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        );
        input.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        input.read_exact(&mut header).context("checkpoint header is truncated")?;
        let header: CheckpointHeader = serde_json::from_slice(&header).context("checkpoint header")?;
        ensure!(header.item_ids.len() == header.num_items, "item vocabulary does not match num_items");
        ensure!(header.user_ids.len() == header.num_users, "user vocabulary does not match num_users");
        let mut store = ParamStore::new();
        for e in &header.arrays {
            store.add(&e.name, read_array(&mut input, e.rows, e.cols)?)?;
        }
        let adam = match &header.optimizer {
            None => None,
            Some(o) => {
                let mut moments = Vec::with_capacity(2 * header.arrays.len());
                for e in header.arrays.iter().chain(&header.arrays) {
                    moments.push(read_array(&mut input, e.rows, e.cols)?);
                }
                let v = moments.split_off(header.arrays.len());
                Some(AdamState {
                    step: o.step,
                    m: moments,
                    v,
                })
            }
        };
        if input.read(&mut [0u8; 1])? != 0 {
            bail!("checkpoint has trailing bytes");
        }
        let model = Thrnn::from_store(header.config, header.num_items, header.num_users, store)?;
        Ok(Checkpoint {
            model,
            adam,
            epochs_done: header.epochs_done,
            seed: header.seed,
            item_ids: header.item_ids,
            user_ids: header.user_ids,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    /// Writes the checkpoint and returns the SHA-256 of its bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(digest(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::read(bytes.as_slice()).with_context(|| format!("loading {}", path.display()))
    }
}

/// Hex SHA-256.
pub fn digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use thrnn_core::model::ModelConfig;
    use thrnn_core::pipeline::{BucketScheme, GapBucketizer};

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            item_embedding_dim: 3,
            user_embedding_dim: 2,
            gap_embedding_dim: 2,
            hidden_dim_inter: 4,
            hidden_dim_intra: 4,
            gap_buckets: GapBucketizer::new(86_400.0, 4, BucketScheme::Uniform).unwrap(),
            ..ModelConfig::lastfm()
        };
        let model = Thrnn::new(cfg, 5, 2, 3).unwrap();
        let mut adam = AdamState::new(model.store());
        adam.step = 7;
        adam.m[0].data_mut()[1] = 0.25;
        adam.v[25].data_mut()[0] = -1.5;
        Checkpoint {
            model,
            adam: Some(adam),
            epochs_done: 4,
            seed: 3,
            item_ids: (0..5).map(|i| format!("i{i}")).collect(),
            user_ids: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = small();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn without_optimizer_state() {
        let mut ck = small();
        ck.adam = None;
        let back = Checkpoint::read(ck.to_bytes().unwrap().as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_bad_input() {
        let bytes = small().to_bytes().unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        let err = format!("{:#}", Checkpoint::read(wrong_version.as_slice()).unwrap_err());
        assert!(err.contains("version 9"), "{err}");
        assert!(Checkpoint::read(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read(extra.as_slice()).is_err());
        assert!(Checkpoint::read(&b"NOTACKPT"[..]).is_err());
    }
}
