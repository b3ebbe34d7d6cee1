//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "FADACKPT" | u32 version | str header-json
//! u64 leaf count | per leaf: str path, u32 rank, u64 extents.., f64 values.., u8 frozen
//! u8 has-adam | [f64 lr, β1, β2, ε | u64 step | u64 n | per entry: str path, m tensor, v tensor]
//! ```
//!
//! Leaves appear in lexicographic path order, so equal trees encode to
//! equal bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{AdapterSpec, Model, ModelConfig};
use crate::optim::Adam;
use crate::tree::{ParamMap, ParameterTree};

const MAGIC: &[u8; 8] = b"FADACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    adapter: Option<AdapterSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub tree: ParameterTree,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn new(model: Model, tree: ParameterTree) -> Self {
        Self { model, tree, adam: None }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            adapter: self.model.adapter,
        };
        w.str(&serde_json::to_string(&header)?);
        w.u64(self.tree.len() as u64);
        for (path, leaf) in self.tree.iter() {
            w.str(path);
            w.tensor(&leaf.value);
            w.u8(leaf.frozen as u8);
        }
        match &self.adam {
            None => w.u8(0),
            Some(adam) => {
                w.u8(1);
                for v in [adam.learning_rate, adam.beta1, adam.beta2, adam.epsilon] {
                    w.f64(v);
                }
                w.u64(adam.step_count());
                w.u64(adam.first_moments().len() as u64);
                for ((path, m), v) in adam.first_moments().iter().zip(adam.second_moments().values()) {
                    w.str(path);
                    w.tensor(m);
                    w.tensor(v);
                }
            }
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header: Header = serde_json::from_str(&r.str()?)?;
        let model = Model::new(header.model, header.adapter)?;
        let mut tree = ParameterTree::new();
        let mut last: Option<String> = None;
        for _ in 0..r.u64()? {
            let path = r.str()?;
            if last.as_ref().is_some_and(|l| *l >= path) {
                return Err(Error::Format(format!("leaf `{path}` out of canonical order")));
            }
            let value = r.tensor()?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("bad frozen flag {b}"))),
            };
            tree.insert(path.clone(), value, frozen)?;
            last = Some(path);
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let (lr, b1, b2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let step = r.u64()?;
                let mut first = ParamMap::new();
                let mut second = ParamMap::new();
                for _ in 0..r.u64()? {
                    let path = r.str()?;
                    first.insert(path.clone(), r.tensor()?);
                    second.insert(path, r.tensor()?);
                }
                Some(Adam::from_parts(lr, b1, b2, eps, step, first, second)?)
            }
            b => return Err(Error::Format(format!("bad optimizer flag {b}"))),
        };
        r.expect_end()?;
        Ok(Self { model, tree, adam })
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.encode()?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::decode(&std::fs::read(path)?)
    }
}
