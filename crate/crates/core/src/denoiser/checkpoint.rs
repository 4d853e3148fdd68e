use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{NetConfig, NetParams, TinyCondDenoiser};
use super::train::TrainConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "asyndiff-checkpoint/1";
const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub params: NetParams,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements into the parameter file.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    architecture: NetConfig,
    blocks: Vec<BlockEntry>,
    training: TrainingMetadata,
}

impl Checkpoint {
    /// Checkpoint of an untrained model.
    pub fn untrained(model: TinyCondDenoiser, seed: u64) -> Self {
        Self {
            config: model.config,
            params: model.params,
            metadata: TrainingMetadata {
                steps: 0,
                loss_curve: Vec::new(),
                seed,
                dataset_fingerprint: String::new(),
                train_config: TrainConfig {
                    steps: 0,
                    ..TrainConfig::default()
                },
            },
        }
    }

    pub fn model(&self) -> Result<TinyCondDenoiser> {
        TinyCondDenoiser::from_params(self.config.clone(), self.params.clone())
    }

    /// Writes `manifest.json` and `params.f64` (little-endian f64 blocks in declared order) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut offset = 0;
        let mut blocks = Vec::new();
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for ((name, shape), data) in self.config.block_shapes().into_iter().zip(&self.params.blocks) {
            blocks.push(BlockEntry {
                name: name.to_string(),
                shape,
                offset,
            });
            offset += data.len();
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            architecture: self.config.clone(),
            blocks,
            training: self.metadata.clone(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(PARAMS_FILE), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let bad = |message: String| Error::Format {
            path: manifest_path.clone(),
            message,
        };
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(bad(format!(
                "unsupported checkpoint format '{}'",
                manifest.format
            )));
        }
        let expected = manifest.architecture.block_shapes();
        if expected.len() != manifest.blocks.len() {
            return Err(bad("block count does not match the architecture".into()));
        }
        let bytes = fs::read(dir.join(PARAMS_FILE))?;
        if bytes.len() % 8 != 0 {
            return Err(bad("parameter file length is not a multiple of 8".into()));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut blocks = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&manifest.blocks) {
            if *name != entry.name || *shape != entry.shape {
                return Err(bad(format!("block '{}' does not match architecture", entry.name)));
            }
            let len: usize = shape.iter().product();
            let data = flat
                .get(entry.offset..entry.offset + len)
                .ok_or_else(|| bad(format!("block '{}' runs past the parameter file", entry.name)))?;
            blocks.push(data.to_vec());
        }
        Ok(Self {
            config: manifest.architecture,
            params: NetParams { blocks },
            metadata: manifest.training,
        })
    }
}
