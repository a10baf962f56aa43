//! Full training state in an LWAW container: model tensors, Adam moments
//! (`adam.m.*`, `adam.v.*`) and counters in the manifest's `extra` block.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::network::{read_container, write_container, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Counters {
    epoch: u64,
    step: u64,
    lr: f64,
    adam_t: u64,
    best_mdice: Option<f64>,
    best_epoch: Option<u64>,
    pretrained: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Extra {
    kind: String,
    train_state: Counters,
    train_config: TrainConfig,
}

pub struct Checkpoint {
    pub model: Model<f32>,
    pub state: TrainState,
    pub train_config: TrainConfig,
    pub pretrained: bool,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    state: &TrainState,
    cfg: &TrainConfig,
    pretrained: bool,
) -> Result<()> {
    let mut c = model.to_container();
    for (prefix, moments) in [(M_PREFIX, &state.adam.m), (V_PREFIX, &state.adam.v)] {
        for (name, t) in moments {
            c.tensors.insert_buffer(format!("{prefix}{name}"), t.clone());
        }
    }
    let extra = Extra {
        kind: "checkpoint".into(),
        train_state: Counters {
            epoch: state.epoch,
            step: state.step,
            lr: state.lr,
            adam_t: state.adam.t,
            best_mdice: state.best_mdice,
            best_epoch: state.best_epoch,
            pretrained,
        },
        train_config: cfg.clone(),
    };
    c.extra = serde_json::to_value(extra).expect("checkpoint metadata serializes");
    write_container(path, &c)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = read_container(path)?;
    let extra: Extra = serde_json::from_value(c.extra.clone())
        .map_err(|e| Error::Manifest(format!("{}: not a training checkpoint ({e})", path.display())))?;
    let mut weights = ParamStore::new();
    let mut m: IndexMap<String, Tensor<f32>> = IndexMap::new();
    let mut v: IndexMap<String, Tensor<f32>> = IndexMap::new();
    for (name, e) in c.tensors.iter() {
        if let Some(p) = name.strip_prefix(M_PREFIX) {
            m.insert(p.to_string(), (*e.tensor).clone());
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            v.insert(p.to_string(), (*e.tensor).clone());
        } else {
            weights.insert(name.clone(), (*e.tensor).clone(), e.kind);
        }
    }
    let mut model = Model::build(&c.network_config()?)?;
    model.load_params(&weights, true)?;
    for (name, t) in model.params().trainable() {
        for moments in [&m, &v] {
            match moments.get(name) {
                Some(mt) if mt.shape() == t.shape() => {}
                Some(mt) => {
                    return Err(Error::TensorShape {
                        name: name.clone(),
                        expected: t.shape(),
                        got: mt.shape(),
                    })
                }
                None => return Err(Error::MissingKey(format!("optimizer moment for {name}"))),
            }
        }
    }
    let k = extra.train_state;
    Ok(Checkpoint {
        model,
        state: TrainState {
            epoch: k.epoch,
            step: k.step,
            lr: k.lr,
            best_mdice: k.best_mdice,
            best_epoch: k.best_epoch,
            adam: AdamState { t: k.adam_t, m, v },
        },
        train_config: extra.train_config,
        pretrained: k.pretrained,
    })
}
