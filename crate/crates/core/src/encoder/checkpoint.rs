use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierParams, EncoderParams};
use crate::error::{Error, Result};

/// Every tensor with its shape; `f64` values round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tag: String,
    pub encoder: EncoderParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<ClassifierParams>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string(ckpt).map_err(std::io::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    for t in ckpt.encoder.layers.iter().flat_map(|l| [&l.mlp1.weight, &l.mlp2.weight]) {
        if t.shape().len() != 2 || t.shape().iter().product::<usize>() != t.len() {
            return Err(Error::Parse {
                line: 0,
                msg: format!("bad tensor shape {:?}", t.shape()),
            });
        }
    }
    if let Some(h) = &ckpt.head {
        h.validate()?;
    }
    Ok(ckpt)
}
