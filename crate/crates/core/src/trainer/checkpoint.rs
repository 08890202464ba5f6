//! Binary checkpoint format, little-endian:
//!
//! ```text
//! magic "DCCK" | u32 version | u32 header length L | L bytes JSON header
//! | f64 payload: every array listed in the header, in order
//! ```
//!
//! The header names each array and its shape, so a reader can check the
//! payload before trusting it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneDims, BackboneParams};
use crate::consensus::ScorerParams;
use crate::error::{Error, Result};
use crate::tensor::{AdamState, ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"DCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trunk and scorer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneParams,
    pub scorer: ScorerParams,
}

/// Model, optimizer state and bookkeeping for resuming or evaluating.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam_backbone: AdamState,
    pub adam_scorer: AdamState,
    pub epoch: usize,
    /// Validation segmentation HM that selected this checkpoint.
    pub best_val_hm: f64,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    best_val_hm: f64,
    config_fingerprint: String,
    dataset_fingerprint: String,
    backbone: BackboneDims,
    num_parts: usize,
    scorer_input: usize,
    scorer_hidden: usize,
    dropout: f64,
    adam_backbone: AdamMeta,
    adam_scorer: AdamMeta,
    arrays: Vec<ArrayMeta>,
}

fn sets(c: &Checkpoint) -> [(&'static str, &ParamSet); 6] {
    [
        ("model", &c.model.backbone.set),
        ("model", &c.model.scorer.set),
        ("adam_backbone.m", &c.adam_backbone.first_moment),
        ("adam_backbone.v", &c.adam_backbone.second_moment),
        ("adam_scorer.m", &c.adam_scorer.first_moment),
        ("adam_scorer.v", &c.adam_scorer.second_moment),
    ]
}

fn adam_meta(a: &AdamState) -> AdamMeta {
    AdamMeta {
        step: a.step,
        beta1: a.beta1,
        beta2: a.beta2,
        epsilon: a.epsilon,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        for (prefix, set) in sets(self) {
            for (name, t) in set.iter() {
                arrays.push(ArrayMeta {
                    name: format!("{prefix}/{name}"),
                    shape: t.shape().to_vec(),
                });
            }
        }
        let header = Header {
            epoch: self.epoch,
            best_val_hm: self.best_val_hm,
            config_fingerprint: self.config_fingerprint.clone(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            backbone: self.model.backbone.dims.clone(),
            num_parts: self.model.backbone.num_parts,
            scorer_input: self.model.scorer.input,
            scorer_hidden: self.model.scorer.hidden,
            dropout: self.model.scorer.dropout,
            adam_backbone: adam_meta(&self.adam_backbone),
            adam_scorer: adam_meta(&self.adam_scorer),
            arrays,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, set) in sets(self) {
            for (_, t) in set.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        let mut payload = &bytes[12 + len..];
        let expected: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if payload.len() != expected * 8 {
            return Err(bad("payload size does not match the header".into()));
        }
        let mut groups: Vec<(String, ParamSet)> = Vec::new();
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let data: Vec<f64> = payload[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[n * 8..];
            let (prefix, name) = a
                .name
                .split_once('/')
                .ok_or_else(|| bad(format!("array name `{}`", a.name)))?;
            let t = Tensor::new(a.shape.clone(), data)?;
            match groups.last_mut() {
                Some((p, set)) if p == prefix => set.insert(name, t),
                _ => {
                    let mut set = ParamSet::new();
                    set.insert(name, t);
                    groups.push((prefix.to_string(), set));
                }
            }
        }
        let take = |prefix: &str| -> Result<ParamSet> {
            groups
                .iter()
                .find(|(p, _)| p == prefix)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| bad(format!("missing `{prefix}` arrays")))
        };
        let model_set = take("model")?;
        let mut backbone_set = ParamSet::new();
        let mut scorer_set = ParamSet::new();
        for (name, t) in model_set.iter() {
            if name.starts_with("scorer.") {
                scorer_set.insert(name, t.clone());
            } else {
                backbone_set.insert(name, t.clone());
            }
        }
        let backbone = BackboneParams {
            dims: header.backbone,
            num_parts: header.num_parts,
            set: backbone_set,
        };
        let scorer = ScorerParams {
            input: header.scorer_input,
            hidden: header.scorer_hidden,
            num_parts: header.num_parts,
            dropout: header.dropout,
            set: scorer_set,
        };
        backbone.validate()?;
        scorer.validate()?;
        let adam = |meta: &AdamMeta, m: ParamSet, v: ParamSet| AdamState {
            first_moment: m,
            second_moment: v,
            step: meta.step,
            beta1: meta.beta1,
            beta2: meta.beta2,
            epsilon: meta.epsilon,
        };
        Ok(Self {
            adam_backbone: adam(&header.adam_backbone, take("adam_backbone.m")?, take("adam_backbone.v")?),
            adam_scorer: adam(&header.adam_scorer, take("adam_scorer.m")?, take("adam_scorer.v")?),
            model: Model { backbone, scorer },
            epoch: header.epoch,
            best_val_hm: header.best_val_hm,
            config_fingerprint: header.config_fingerprint,
            dataset_fingerprint: header.dataset_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
