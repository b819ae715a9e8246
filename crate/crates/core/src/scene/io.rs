//! Scene JSON format.
//!
//! ```text
//! {
//!   "scene_id": "train-0000",
//!   "annotated": true,
//!   "num_classes": 10,
//!   "feature_dim": 6,
//!   "points": [[x, y, z], ...],
//!   "features": [[f0, ..., f5], ...],
//!   "semantic_labels": [c, ...],          // num_classes marks floor
//!   "instance_labels": [k, ...],          // -1 marks floor
//!   "objects": [{
//!     "instance_id": 0, "semantic_class": 3,
//!     "bbox": {"min": [..], "max": [..]},
//!     "color": 4, "size": "small" | "medium" | "large",
//!     "descriptions": [[word ids], ...]    // absent when unannotated
//!   }]
//! }
//! ```

use std::path::Path;

use serde_json::{json, Map, Value};

use super::{GtObject, Scene, SceneError, SizeAttr};
use crate::geometry::{Aabb, Point3};

/// Schema violation located by a JSON pointer.
#[derive(Debug, thiserror::Error, PartialEq)]
#[error("parse error at {pointer}: {message}")]
pub struct ParseError {
    pub pointer: String,
    pub message: String,
}

fn perr(pointer: &str, message: impl Into<String>) -> ParseError {
    ParseError {
        pointer: if pointer.is_empty() { "/".into() } else { pointer.into() },
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, ptr: &str, key: &str) -> Result<&'a Value, ParseError> {
    obj.get(key)
        .ok_or_else(|| perr(&format!("{ptr}/{key}"), "missing field"))
}

fn as_obj<'a>(v: &'a Value, ptr: &str) -> Result<&'a Map<String, Value>, ParseError> {
    v.as_object().ok_or_else(|| perr(ptr, "expected object"))
}

fn as_arr<'a>(v: &'a Value, ptr: &str) -> Result<&'a Vec<Value>, ParseError> {
    v.as_array().ok_or_else(|| perr(ptr, "expected array"))
}

fn as_f64(v: &Value, ptr: &str) -> Result<f64, ParseError> {
    v.as_f64().ok_or_else(|| perr(ptr, "expected number"))
}

fn as_u64(v: &Value, ptr: &str) -> Result<u64, ParseError> {
    v.as_u64().ok_or_else(|| perr(ptr, "expected non-negative integer"))
}

fn as_i64(v: &Value, ptr: &str) -> Result<i64, ParseError> {
    v.as_i64().ok_or_else(|| perr(ptr, "expected integer"))
}

fn point(v: &Value, ptr: &str) -> Result<Point3, ParseError> {
    let a = as_arr(v, ptr)?;
    if a.len() != 3 {
        return Err(perr(ptr, format!("expected 3 coordinates, got {}", a.len())));
    }
    let mut p = [0.0; 3];
    for (k, x) in a.iter().enumerate() {
        p[k] = as_f64(x, &format!("{ptr}/{k}"))?;
        if !p[k].is_finite() {
            return Err(perr(&format!("{ptr}/{k}"), "coordinate must be finite"));
        }
    }
    Ok(p)
}

pub fn scene_to_json(scene: &Scene) -> Value {
    let features: Vec<Value> = (0..scene.len()).map(|i| json!(scene.feature(i))).collect();
    let objects: Vec<Value> = scene
        .objects
        .iter()
        .map(|o| {
            let mut m = Map::new();
            m.insert("instance_id".into(), json!(o.instance_id));
            m.insert("semantic_class".into(), json!(o.semantic_class));
            m.insert("bbox".into(), json!({"min": o.bbox.min, "max": o.bbox.max}));
            m.insert("color".into(), json!(o.color));
            m.insert("size".into(), serde_json::to_value(o.size).expect("enum"));
            if scene.annotated {
                m.insert("descriptions".into(), json!(o.descriptions));
            }
            Value::Object(m)
        })
        .collect();
    json!({
        "scene_id": scene.scene_id,
        "annotated": scene.annotated,
        "num_classes": scene.num_classes,
        "feature_dim": scene.feature_dim,
        "points": scene.points,
        "features": features,
        "semantic_labels": scene.semantic_labels,
        "instance_labels": scene.instance_labels,
        "objects": objects,
    })
}

pub fn scene_from_json(v: &Value) -> Result<Scene, ParseError> {
    let root = as_obj(v, "")?;
    let scene_id = field(root, "", "scene_id")?
        .as_str()
        .ok_or_else(|| perr("/scene_id", "expected string"))?
        .to_string();
    let annotated = field(root, "", "annotated")?
        .as_bool()
        .ok_or_else(|| perr("/annotated", "expected bool"))?;
    let num_classes = as_u64(field(root, "", "num_classes")?, "/num_classes")? as usize;
    let feature_dim = as_u64(field(root, "", "feature_dim")?, "/feature_dim")? as usize;

    let points = as_arr(field(root, "", "points")?, "/points")?
        .iter()
        .enumerate()
        .map(|(i, p)| point(p, &format!("/points/{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let n = points.len();

    let feats = as_arr(field(root, "", "features")?, "/features")?;
    if feats.len() != n {
        return Err(perr("/features", format!("{} rows for {n} points", feats.len())));
    }
    let mut features = Vec::with_capacity(n * feature_dim);
    for (i, row) in feats.iter().enumerate() {
        let ptr = format!("/features/{i}");
        let r = as_arr(row, &ptr)?;
        if r.len() != feature_dim {
            return Err(perr(&ptr, format!("expected {feature_dim} values, got {}", r.len())));
        }
        for (k, x) in r.iter().enumerate() {
            features.push(as_f64(x, &format!("{ptr}/{k}"))?);
        }
    }

    let sem = as_arr(field(root, "", "semantic_labels")?, "/semantic_labels")?;
    if sem.len() != n {
        return Err(perr("/semantic_labels", format!("{} labels for {n} points", sem.len())));
    }
    let semantic_labels = sem
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let c = as_u64(x, &format!("/semantic_labels/{i}"))? as usize;
            if c > num_classes {
                return Err(perr(
                    &format!("/semantic_labels/{i}"),
                    format!("class {c} > {num_classes}"),
                ));
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let inst = as_arr(field(root, "", "instance_labels")?, "/instance_labels")?;
    if inst.len() != n {
        return Err(perr(
            "/instance_labels",
            format!("{} labels for {n} points", inst.len()),
        ));
    }
    let instance_labels = inst
        .iter()
        .enumerate()
        .map(|(i, x)| as_i64(x, &format!("/instance_labels/{i}")))
        .collect::<Result<Vec<_>, _>>()?;

    let objs = as_arr(field(root, "", "objects")?, "/objects")?;
    let mut objects = Vec::with_capacity(objs.len());
    for (k, ov) in objs.iter().enumerate() {
        let ptr = format!("/objects/{k}");
        let o = as_obj(ov, &ptr)?;
        let instance_id = as_u64(field(o, &ptr, "instance_id")?, &format!("{ptr}/instance_id"))? as usize;
        let semantic_class = as_u64(field(o, &ptr, "semantic_class")?, &format!("{ptr}/semantic_class"))? as usize;
        if semantic_class >= num_classes {
            return Err(perr(&format!("{ptr}/semantic_class"), "floor or out-of-range class"));
        }
        let bptr = format!("{ptr}/bbox");
        let b = as_obj(field(o, &ptr, "bbox")?, &bptr)?;
        let min = point(field(b, &bptr, "min")?, &format!("{bptr}/min"))?;
        let max = point(field(b, &bptr, "max")?, &format!("{bptr}/max"))?;
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(perr(&bptr, "min exceeds max"));
        }
        let color = as_u64(field(o, &ptr, "color")?, &format!("{ptr}/color"))? as usize;
        let size: SizeAttr = serde_json::from_value(field(o, &ptr, "size")?.clone())
            .map_err(|e| perr(&format!("{ptr}/size"), e.to_string()))?;
        let descriptions = match o.get("descriptions") {
            None => Vec::new(),
            Some(dv) => {
                let dptr = format!("{ptr}/descriptions");
                as_arr(dv, &dptr)?
                    .iter()
                    .enumerate()
                    .map(|(j, d)| {
                        let p = format!("{dptr}/{j}");
                        as_arr(d, &p)?
                            .iter()
                            .enumerate()
                            .map(|(t, w)| as_u64(w, &format!("{p}/{t}")).map(|x| x as u32))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        if !annotated && !descriptions.is_empty() {
            return Err(perr(
                &format!("{ptr}/descriptions"),
                "unannotated scene carries descriptions",
            ));
        }
        objects.push(GtObject {
            instance_id,
            semantic_class,
            bbox: Aabb { min, max },
            color,
            size,
            descriptions,
        });
    }
    for (i, &l) in instance_labels.iter().enumerate() {
        if l < -1 || l >= objects.len() as i64 {
            return Err(perr(
                &format!("/instance_labels/{i}"),
                format!("no object with instance id {l}"),
            ));
        }
    }
    Ok(Scene {
        scene_id,
        points,
        feature_dim,
        features,
        semantic_labels,
        instance_labels,
        objects,
        annotated,
        num_classes,
    })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    let s = serde_json::to_string(&scene_to_json(scene)).expect("serializable");
    std::fs::write(path, s).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let s = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let v: Value = serde_json::from_str(&s).map_err(|e| perr("", e.to_string()))?;
    Ok(scene_from_json(&v)?)
}
