//! Single-file checkpoints in the safetensors format.
//!
//! Arrays are stored as little-endian `F64` under `param/<name>`,
//! `buffer/<name>`, `optim.m/<name>` and `optim.v/<name>`. The header
//! metadata carries the schema version, the epoch counter, the optimizer step
//! and the full `key = value` config text.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::PolypFlow;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: &str = "polypflow-checkpoint/1";

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const OPT_M: &str = "optim.m/";
const OPT_V: &str = "optim.v/";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub params: ParamStore,
    pub optim: Option<AdamW>,
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn from_model(model: &PolypFlow, optim: Option<&AdamW>, epoch: usize) -> Self {
        Checkpoint {
            config: model.config.clone(),
            epoch,
            params: model.params.clone(),
            optim: optim.cloned(),
        }
    }

    pub fn into_model(self) -> Result<PolypFlow> {
        let mut model = PolypFlow::uninitialized(self.config)?;
        // Initialize to learn the expected names and shapes, then overwrite.
        let reference = PolypFlow::new(model.config.clone())?.params;
        for (name, t) in reference.params() {
            let got = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        model.params = self.params;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
        for (name, t) in self.params.params() {
            arrays.insert(format!("{PARAM}{name}"), (t.shape().to_vec(), bytes(t)));
        }
        for (name, t) in self.params.buffers() {
            arrays.insert(format!("{BUFFER}{name}"), (t.shape().to_vec(), bytes(t)));
        }
        let mut meta = HashMap::from([
            ("schema_version".to_string(), SCHEMA_VERSION.to_string()),
            ("epoch".to_string(), self.epoch.to_string()),
            ("config".to_string(), self.config.to_text()),
        ]);
        if let Some(opt) = &self.optim {
            for (name, t) in &opt.m {
                arrays.insert(format!("{OPT_M}{name}"), (t.shape().to_vec(), bytes(t)));
            }
            for (name, t) in &opt.v {
                arrays.insert(format!("{OPT_V}{name}"), (t.shape().to_vec(), bytes(t)));
            }
            meta.insert("optim.step".into(), opt.step.to_string());
            meta.insert("optim.lr".into(), format!("{:?}", opt.lr));
            meta.insert("optim.weight_decay".into(), format!("{:?}", opt.weight_decay));
        }
        let views = arrays
            .iter()
            .map(|(k, (shape, data))| Ok((k.as_str(), TensorView::new(Dtype::F64, shape.clone(), data).map_err(ckpt_err)?)))
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, Some(meta)).map_err(ckpt_err)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(buf).map_err(ckpt_err)?;
        let meta = header.metadata().clone().unwrap_or_default();
        let found = meta.get("schema_version").cloned().unwrap_or_else(|| "<none>".into());
        if found != SCHEMA_VERSION {
            return Err(Error::SchemaMismatch {
                expected: SCHEMA_VERSION.into(),
                found,
            });
        }
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata `{k}` missing")))
        };
        let config = TrainConfig::parse_text(field("config")?)?;
        let epoch = field("epoch")?.parse().map_err(ckpt_err)?;

        let st = SafeTensors::deserialize(buf).map_err(ckpt_err)?;
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, view) in st.iter() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Checkpoint(format!("`{name}` is {:?}, expected F64", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::from_vec(view.shape(), data)?;
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n, t);
            } else if let Some(n) = name.strip_prefix(BUFFER) {
                params.insert_buffer(n, t);
            } else if let Some(n) = name.strip_prefix(OPT_M) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(OPT_V) {
                v.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected array `{name}`")));
            }
        }
        let optim = match meta.get("optim.step") {
            None => None,
            Some(step) => {
                let mut opt = AdamW::new(
                    field("optim.lr")?.parse().map_err(ckpt_err)?,
                    field("optim.weight_decay")?.parse().map_err(ckpt_err)?,
                );
                opt.step = step.parse().map_err(ckpt_err)?;
                opt.m = m;
                opt.v = v;
                Some(opt)
            }
        };
        Ok(Checkpoint {
            config,
            epoch,
            params,
            optim,
        })
    }

    /// Write atomically: the archive goes to a temporary sibling first and is
    /// renamed into place, so an interrupted save never clobbers a good file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Load a checkpoint and rebuild its model.
pub fn load_model(path: &Path) -> Result<PolypFlow> {
    Checkpoint::load(path)?.into_model()
}
