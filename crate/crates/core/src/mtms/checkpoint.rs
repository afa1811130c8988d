use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array2;
use crate::error::{Error, Result};
use crate::nn::{MlpSpec, ParamVector};

use super::model::{Connection, MtMsModel, NormStats};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    version: u32,
    base_spec: MlpSpec,
    meta_spec: MlpSpec,
    connection: Connection,
    omega: Vec<f64>,
    orphaned: Vec<f64>,
    mesa: Array2,
    norm_stats: NormStats,
}

pub fn to_json(model: &MtMsModel) -> Result<String> {
    let doc = Document {
        version: CHECKPOINT_VERSION,
        base_spec: model.base_spec.clone(),
        meta_spec: model.meta_spec.clone(),
        connection: model.connection.clone(),
        omega: model.omega.values.clone(),
        orphaned: model.orphaned.clone(),
        mesa: model.mesa.clone(),
        norm_stats: model.norm_stats.clone(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json(text: &str) -> Result<MtMsModel> {
    let probe: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
    match probe.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {v}, this build reads {CHECKPOINT_VERSION}"
            )))
        }
        None => return Err(Error::Checkpoint("missing field `version`".into())),
    }
    let doc: Document =
        serde_json::from_value(probe).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if doc.mesa.data().len() != doc.mesa.rows() * doc.mesa.cols() {
        return Err(Error::Checkpoint("mesa matrix size disagrees with its shape".into()));
    }
    let omega = ParamVector::from_flat(&doc.meta_spec, doc.omega)
        .map_err(|e| Error::Checkpoint(format!("omega: {e}")))?;
    MtMsModel::new(
        doc.base_spec,
        doc.meta_spec,
        doc.connection,
        omega,
        doc.orphaned,
        doc.mesa,
        doc.norm_stats,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(model: &MtMsModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MtMsModel> {
    from_json(&std::fs::read_to_string(path)?)
}
