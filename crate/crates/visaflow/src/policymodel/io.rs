//! Checkpoint files: a named-array container holding every parameter tensor
//! plus a JSON metadata chunk (model config, flow config, pipeline version,
//! stage tag). Loading rebuilds the model from the stored config and fails
//! hard on any mismatch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedArray};
use crate::error::{Error, Result};
use crate::flowencode::FlowConfig;
use crate::PIPELINE_VERSION;

use super::{ModelConfig, PolicyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Pretrained,
    Finetuned,
}

impl StageTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageTag::Pretrained => "pretrained",
            StageTag::Finetuned => "finetuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub pipeline_version: u32,
    pub env_version: u32,
    pub stage: StageTag,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, flow: FlowConfig, stage: StageTag) -> Self {
        CheckpointMeta {
            model,
            flow,
            pipeline_version: PIPELINE_VERSION,
            env_version: crate::ENV_VERSION,
            stage,
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &PolicyModel<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut c = Container::new();
    let meta_bytes = serde_json::to_vec(meta)?;
    c.insert("__meta__", NamedArray::u8(vec![meta_bytes.len()], meta_bytes));
    for (name, v) in model.params.names.iter().zip(&model.params.values) {
        c.insert(
            &format!("param.{name}"),
            NamedArray::f32(vec![v.nrows(), v.ncols()], v.iter().copied().collect()),
        );
    }
    c.write_to(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyModel<f32>, CheckpointMeta)> {
    let c = Container::read_from(path)?;
    let loc = path.display().to_string();
    let meta_arr = c.require("__meta__", &loc)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_arr.as_u8().ok_or_else(|| Error::Format {
        path: loc.clone(),
        reason: "__meta__ has wrong dtype".into(),
    })?)?;
    if meta.pipeline_version != PIPELINE_VERSION {
        return Err(Error::VersionMismatch(format!(
            "checkpoint pipeline v{}, expected v{PIPELINE_VERSION}",
            meta.pipeline_version
        )));
    }
    if meta.env_version != crate::ENV_VERSION {
        return Err(Error::VersionMismatch(format!(
            "checkpoint env v{}, expected v{}",
            meta.env_version,
            crate::ENV_VERSION
        )));
    }
    let mut model: PolicyModel<f32> = PolicyModel::new(meta.model.clone())?;
    for (i, name) in model.params.names.clone().iter().enumerate() {
        let arr = c.require(&format!("param.{name}"), &loc)?;
        let dst = &mut model.params.values[i];
        if arr.shape != vec![dst.nrows(), dst.ncols()] {
            return Err(Error::VersionMismatch(format!(
                "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                arr.shape,
                dst.dim()
            )));
        }
        let src = arr.as_f32().ok_or_else(|| Error::Format {
            path: loc.clone(),
            reason: format!("tensor {name} has wrong dtype"),
        })?;
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d = *s;
        }
    }
    Ok((model, meta))
}
