//! Single-file training state in a safetensors container.
//!
//! Tensors: every parameter under its own name (`encoder.*`, `decoder.*`,
//! `warpnet.*`) and the optimizer moments as `adam.m.<name>` / `adam.v.<name>`.
//! Metadata: format tag, version, step, optimizer step count, the training
//! config as TOML, the seed and a hash of the architecture.

use std::collections::HashMap;
use std::path::Path;

use kineflow_tensor::Array;
use sha2::{Digest, Sha256};

use super::{AdamW, Trainer, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensorfile::{decode_tensors, encode_tensors};
use crate::types::RngSeed;

pub const CHECKPOINT_FORMAT: &str = "kineflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub seed: RngSeed,
    pub params: Vec<(String, Array<f32>)>,
    pub adam_t: u64,
    pub adam_m: Vec<(String, Array<f32>)>,
    pub adam_v: Vec<(String, Array<f32>)>,
}

/// Digest of the parameter names and shapes.
pub fn architecture_hash(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for (_, name, v) in store.iter() {
        h.update(name.as_bytes());
        h.update(format!("{:?};", v.shape()).as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn named(store: &ParamStore<f32>, states: &[Option<Array<f32>>], prefix: &str) -> Vec<(String, Array<f32>)> {
    store
        .iter()
        .zip(states)
        .filter_map(|((_, name, _), s)| s.as_ref().map(|a| (format!("{prefix}{name}"), a.clone())))
        .collect()
}

fn meta<'a>(m: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
}

fn parse<T: std::str::FromStr>(m: &HashMap<String, String>, key: &str) -> Result<T> {
    meta(m, key)?
        .parse()
        .map_err(|_| Error::Format(format!("checkpoint metadata `{key}` is malformed")))
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        let store = &t.model.params;
        Self {
            version: CHECKPOINT_VERSION,
            step: t.step,
            config: t.cfg.clone(),
            seed: t.cfg.seed,
            params: store.iter().map(|(_, n, v)| (n.to_string(), v.clone())).collect(),
            adam_t: t.opt.t,
            adam_m: named(store, &t.opt.m, "adam.m."),
            adam_v: named(store, &t.opt.v, "adam.v."),
        }
    }

    fn build_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), self.config.warpnet.clone(), self.seed)?;
        let n = model.params.load_prefixed("", &self.params)?;
        if n != model.params.len() || n != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, the architecture has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    /// Model weights only.
    pub fn into_model(self) -> Result<Model> {
        self.build_model()
    }

    /// Trainer positioned at `step` with the saved optimizer state.
    pub fn into_trainer(self) -> Result<Trainer> {
        let model = self.build_model()?;
        let mut opt = AdamW::new(model.params.len());
        opt.t = self.adam_t;
        for (list, slots, prefix) in [(&self.adam_m, &mut opt.m, "adam.m."), (&self.adam_v, &mut opt.v, "adam.v.")] {
            for (name, a) in list {
                let pname = name.strip_prefix(prefix).unwrap_or(name);
                let id = model
                    .params
                    .id(pname)
                    .ok_or_else(|| Error::Format(format!("optimizer state for unknown parameter `{pname}`")))?;
                if a.shape() != model.params.get(id).shape() {
                    return Err(Error::ShapeMismatch(format!("optimizer state `{name}`")));
                }
                slots[id.index()] = Some(a.clone());
            }
        }
        let mut t = Trainer::from_model(self.config, model)?;
        t.opt = opt;
        t.step = self.step;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut store = ParamStore::new();
        for (n, v) in &self.params {
            store.add(n.clone(), v.clone());
        }
        let metadata = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("version".to_string(), self.version.to_string()),
            ("step".to_string(), self.step.to_string()),
            ("adam_t".to_string(), self.adam_t.to_string()),
            ("seed".to_string(), self.seed.0.to_string()),
            ("config".to_string(), self.config.to_toml_string()?),
            ("architecture".to_string(), architecture_hash(&store)),
        ]);
        let mut tensors = self.params.clone();
        tensors.extend(self.adam_m.iter().cloned());
        tensors.extend(self.adam_v.iter().cloned());
        encode_tensors(&tensors, metadata)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file = decode_tensors(bytes)?;
        let m = &file.metadata;
        if meta(m, "format")? != CHECKPOINT_FORMAT {
            return Err(Error::Format("not a kineflow checkpoint".into()));
        }
        let version: u32 = parse(m, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = TrainConfig::from_toml_str(meta(m, "config")?)?;
        let (mut params, mut adam_m, mut adam_v) = (Vec::new(), Vec::new(), Vec::new());
        for (n, a) in file.tensors {
            if n.starts_with("adam.m.") {
                adam_m.push((n, a));
            } else if n.starts_with("adam.v.") {
                adam_v.push((n, a));
            } else {
                params.push((n, a));
            }
        }
        let ck = Self {
            version,
            step: parse(m, "step")?,
            config,
            seed: RngSeed(parse(m, "seed")?),
            params,
            adam_t: parse(m, "adam_t")?,
            adam_m,
            adam_v,
        };
        // Parameter order follows the architecture, not the file.
        let model = ck.build_model()?;
        if architecture_hash(&model.params) != meta(m, "architecture")? {
            return Err(Error::Format("checkpoint architecture hash does not match its config".into()));
        }
        let params = model.params.iter().map(|(_, n, v)| (n.to_string(), v.clone())).collect();
        let rank = |n: &str, prefix: &str| model.params.id(n.strip_prefix(prefix).unwrap_or(n)).map(|id| id.index());
        let (mut adam_m, mut adam_v) = (ck.adam_m.clone(), ck.adam_v.clone());
        adam_m.sort_by_key(|(n, _)| rank(n, "adam.m."));
        adam_v.sort_by_key(|(n, _)| rank(n, "adam.v."));
        Ok(Self {
            params,
            adam_m,
            adam_v,
            ..ck
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
