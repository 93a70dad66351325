//! JSON model file:
//! `{ "joints", "parents", "rest_offsets", "keypoint_regressor", "mesh"? }`
//! with parents using -1 for the root. Units are meters.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{BodyError, BodyMesh, BodyModel, SparseRegressor};

#[derive(Serialize, Deserialize)]
struct RegressorJson {
    rows: usize,
    entries: Vec<(usize, usize, f64)>,
}

#[derive(Serialize, Deserialize)]
struct MeshJson {
    vertices: Vec<[f64; 3]>,
    skinning: Vec<Vec<(usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vertex_regressor: Option<RegressorJson>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    joints: usize,
    parents: Vec<i64>,
    rest_offsets: Vec<[f64; 3]>,
    keypoint_regressor: RegressorJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mesh: Option<MeshJson>,
}

pub fn model_to_json(model: &BodyModel) -> String {
    let json = ModelJson {
        joints: model.joints,
        parents: model
            .parents
            .iter()
            .map(|p| p.map(|v| v as i64).unwrap_or(-1))
            .collect(),
        rest_offsets: model.rest_offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
        keypoint_regressor: RegressorJson {
            rows: model.keypoint_regressor.rows,
            entries: model.keypoint_regressor.entries.clone(),
        },
        mesh: model.mesh.as_ref().map(|m| MeshJson {
            vertices: m.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            skinning: m.skinning.clone(),
            vertex_regressor: m.vertex_regressor.as_ref().map(|r| RegressorJson {
                rows: r.rows,
                entries: r.entries.clone(),
            }),
        }),
    };
    serde_json::to_string_pretty(&json).expect("model serialization")
}

pub fn model_from_json(text: &str) -> Result<BodyModel, BodyError> {
    let json: ModelJson =
        serde_json::from_str(text).map_err(|e| BodyError::InvalidModel(e.to_string()))?;
    if json.parents.len() != json.joints {
        return Err(BodyError::InvalidModel(format!(
            "declared {} joints but parents has {} entries",
            json.joints,
            json.parents.len()
        )));
    }
    let parents = json
        .parents
        .iter()
        .map(|&p| if p < 0 { None } else { Some(p as usize) })
        .collect();
    let offsets = json
        .rest_offsets
        .iter()
        .map(|o| Vector3::new(o[0], o[1], o[2]))
        .collect();
    let mesh = json.mesh.map(|m| BodyMesh {
        vertices: m
            .vertices
            .iter()
            .map(|v| Vector3::new(v[0], v[1], v[2]))
            .collect(),
        skinning: m.skinning,
        vertex_regressor: m.vertex_regressor.map(|r| SparseRegressor {
            rows: r.rows,
            entries: r.entries,
        }),
    });
    BodyModel::new(
        parents,
        offsets,
        SparseRegressor {
            rows: json.keypoint_regressor.rows,
            entries: json.keypoint_regressor.entries,
        },
        mesh,
    )
}

pub fn save_model(model: &BodyModel, path: &Path) -> std::io::Result<()> {
    crate::formats::write_atomic(path, model_to_json(model).as_bytes())
}

pub fn load_model(path: &Path) -> Result<BodyModel, BodyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BodyError::InvalidModel(format!("{}: {e}", path.display())))?;
    model_from_json(&text)
}
