//! JSON checkpoints carrying the configuration, every weight array and a
//! SHA-256 digest of the payload.

use std::path::Path;

use cfa_core::model::{Model, ParamStore};
use cfa_core::Array;
use serde::{Deserialize, Serialize};

use crate::config::LabConfig;
use crate::{sha256_hex, write_file, LabError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Payload {
    pub format: u32,
    pub seed: u64,
    /// `key = value` echo of the configuration that produced the weights.
    pub config: String,
    pub params: Vec<StoredParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub payload: Payload,
    pub sha256: String,
}

fn payload_digest(p: &Payload) -> String {
    sha256_hex(serde_json::to_string(p).expect("payload serializes").as_bytes())
}

impl Checkpoint {
    pub fn from_model(model: &Model, cfg: &LabConfig) -> Self {
        let params = model
            .params
            .entries()
            .iter()
            .map(|e| StoredParam {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
                data: e.value.data().to_vec(),
            })
            .collect();
        let payload = Payload {
            format: FORMAT_VERSION,
            seed: cfg.train.seed,
            config: cfg.echo(),
            params,
        };
        let sha256 = payload_digest(&payload);
        Self { payload, sha256 }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    /// Parses and verifies a checkpoint document.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, LabError> {
        let bad = |message: String| LabError::Checkpoint {
            path: origin.to_string(),
            message,
        };
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if ck.payload.format != FORMAT_VERSION {
            return Err(bad(format!("unsupported format {}", ck.payload.format)));
        }
        let actual = payload_digest(&ck.payload);
        if actual != ck.sha256 {
            return Err(bad(format!("digest mismatch: stored {}, computed {actual}", ck.sha256)));
        }
        Ok(ck)
    }

    pub fn config(&self) -> Result<LabConfig, LabError> {
        LabConfig::parse(&self.payload.config)
    }

    /// Rebuilds the model, checking names and shapes against the config.
    pub fn model(&self) -> Result<(Model, LabConfig), LabError> {
        let cfg = self.config()?;
        let mut store = ParamStore::default();
        for p in &self.payload.params {
            store.push(p.name.clone(), Array::new(&p.shape, p.data.clone())?, p.trainable);
        }
        let model = Model::from_params(cfg.train.model_config(), store)?;
        Ok((model, cfg))
    }

    pub fn save(&self, path: &Path) -> Result<(), LabError> {
        write_file(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Model, LabConfig) {
        let mut cfg = LabConfig::default();
        cfg.set("seed", "7").unwrap();
        let model = Model::new(cfg.train.model_config(), cfg.train.model.pretrained_seed).unwrap();
        (model, cfg)
    }

    #[test]
    fn round_trip_restores_weights_and_config() {
        let (model, cfg) = setup();
        let ck = Checkpoint::from_model(&model, &cfg);
        let back = Checkpoint::from_json(&ck.to_json(), "mem").unwrap();
        assert_eq!(back, ck);
        let (m2, c2) = back.model().unwrap();
        assert_eq!(m2, model);
        assert_eq!(c2, cfg);
        assert_eq!(back.payload.seed, 7);
    }

    #[test]
    fn tampering_is_rejected() {
        let (model, cfg) = setup();
        let ck = Checkpoint::from_model(&model, &cfg);
        let mut bad = ck.clone();
        bad.payload.params[0].data[0] += 1e-12;
        let e = Checkpoint::from_json(&bad.to_json(), "mem").unwrap_err();
        assert!(e.to_string().contains("digest mismatch"), "{e}");
        let mut bad = ck.clone();
        bad.sha256 = "00".into();
        assert!(Checkpoint::from_json(&bad.to_json(), "mem").is_err());
        assert!(Checkpoint::from_json("{}", "mem").is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (model, cfg) = setup();
        let mut ck = Checkpoint::from_model(&model, &cfg);
        ck.payload.params.pop();
        ck.sha256 = payload_digest(&ck.payload);
        assert!(ck.model().is_err());
    }

    #[test]
    fn file_round_trip() {
        let (model, cfg) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/ck.json");
        Checkpoint::from_model(&model, &cfg).save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().model().unwrap().0, model);
    }
}
