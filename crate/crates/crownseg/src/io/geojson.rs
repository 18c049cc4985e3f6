//! GeoJSON polygon layers: crown annotations (`Label`), AOIs (`purpose`) and split regions
//! (`split`).

use std::collections::BTreeMap;
use std::path::Path;

use crownseg_core::geom::{MultiPolygon, Point, Polygon, Ring};
use crownseg_core::tiling::{Aoi, AoiPurpose, CrownAnnotation, Split};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

struct Feature {
    index: usize,
    id: Option<u64>,
    properties: Map<String, Value>,
    geometry: MultiPolygon,
}

fn ring(path: &Path, index: usize, v: &Value) -> Result<Ring> {
    let bad = || Error::format(path, format!("feature {index}: malformed coordinate ring"));
    let pts = v.as_array().ok_or_else(bad)?;
    let mut ring: Ring = pts
        .iter()
        .map(|p| {
            let xy = p.as_array().filter(|a| a.len() >= 2).ok_or_else(bad)?;
            Ok(Point::new(
                xy[0].as_f64().ok_or_else(bad)?,
                xy[1].as_f64().ok_or_else(bad)?,
            ))
        })
        .collect::<Result<_>>()?;
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.len() < 3 {
        return Err(bad());
    }
    Ok(ring)
}

fn polygon(path: &Path, index: usize, v: &Value) -> Result<Polygon> {
    let rings = v
        .as_array()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| Error::format(path, format!("feature {index}: polygon without rings")))?;
    let mut rings = rings.iter().map(|r| ring(path, index, r)).collect::<Result<Vec<_>>>()?;
    let exterior = rings.remove(0);
    Ok(Polygon::new(exterior, rings))
}

fn read_features(path: &Path) -> Result<Vec<Feature>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, &e))?;
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format(path, "expected a FeatureCollection with a features array"))?;
    let mut out = Vec::with_capacity(features.len());
    for (index, f) in features.iter().enumerate() {
        let geom = f
            .get("geometry")
            .filter(|g| !g.is_null())
            .ok_or_else(|| Error::format(path, format!("feature {index}: missing geometry")))?;
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| Error::format(path, format!("feature {index}: missing coordinates")))?;
        let geometry = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => MultiPolygon::single(polygon(path, index, coords)?),
            Some("MultiPolygon") => MultiPolygon(
                coords
                    .as_array()
                    .ok_or_else(|| Error::format(path, format!("feature {index}: malformed multipolygon")))?
                    .iter()
                    .map(|p| polygon(path, index, p))
                    .collect::<Result<_>>()?,
            ),
            other => {
                return Err(Error::format(
                    path,
                    format!("feature {index}: unsupported geometry type {other:?}"),
                ))
            }
        };
        geometry
            .validate()
            .map_err(|e| Error::format(path, format!("feature {index}: {e}")))?;
        let properties = f
            .get("properties")
            .and_then(Value::as_object)
            .cloned()
            .unwrap_or_default();
        let id = f
            .get("id")
            .and_then(Value::as_u64)
            .or_else(|| properties.get("id").and_then(Value::as_u64));
        out.push(Feature {
            index,
            id,
            properties,
            geometry,
        });
    }
    Ok(out)
}

fn string_property(path: &Path, f: &Feature, key: &str) -> Result<Option<String>> {
    match f.properties.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::format(
            path,
            format!("feature {}: property {key} must be a string", f.index),
        )),
    }
}

/// Crown polygons with a `Label` property. Instance ids come from the feature id when present
/// and otherwise from the feature position (1-based).
pub fn read_annotations(path: &Path) -> Result<Vec<CrownAnnotation>> {
    let features = read_features(path)?;
    let mut seen = std::collections::BTreeSet::new();
    features
        .iter()
        .map(|f| {
            let class_label = string_property(path, f, "Label")?.ok_or_else(|| {
                Error::format(path, format!("feature {}: missing Label property", f.index))
            })?;
            let instance_id = f.id.unwrap_or(f.index as u64 + 1);
            if !seen.insert(instance_id) {
                return Err(Error::format(path, format!("duplicate instance id {instance_id}")));
            }
            Ok(CrownAnnotation {
                instance_id,
                class_label,
                polygon: f.geometry.clone(),
            })
        })
        .collect()
}

/// AOI polygons; `purpose` is `include` (default) or `excludemask`.
pub fn read_aois(path: &Path) -> Result<Vec<Aoi>> {
    read_features(path)?
        .iter()
        .map(|f| {
            let purpose = match string_property(path, f, "purpose")?.as_deref() {
                None | Some("include") => AoiPurpose::Include,
                Some("excludemask") | Some("exclude") | Some("exclude-mask") => AoiPurpose::ExcludeMask,
                Some(other) => {
                    return Err(Error::format(
                        path,
                        format!("feature {}: unknown AOI purpose {other}", f.index),
                    ))
                }
            };
            Ok(Aoi {
                polygons: f.geometry.clone(),
                purpose,
            })
        })
        .collect()
}

/// Split regions keyed by the `split` property; several features may share a split.
pub fn read_splits(path: &Path) -> Result<BTreeMap<Split, MultiPolygon>> {
    let mut out: BTreeMap<Split, MultiPolygon> = BTreeMap::new();
    for f in read_features(path)? {
        let name = string_property(path, &f, "split")?
            .ok_or_else(|| Error::format(path, format!("feature {}: missing split property", f.index)))?;
        let split = Split::parse(&name)
            .ok_or_else(|| Error::format(path, format!("feature {}: unknown split {name}", f.index)))?;
        out.entry(split).or_default().0.extend(f.geometry.0);
    }
    Ok(out)
}

fn coords(mp: &MultiPolygon) -> Value {
    let ring = |r: &Ring| {
        let mut pts: Vec<Value> = r.iter().map(|p| json!([p.x, p.y])).collect();
        if let Some(first) = r.first() {
            pts.push(json!([first.x, first.y]));
        }
        Value::Array(pts)
    };
    Value::Array(
        mp.0.iter()
            .map(|p| Value::Array(p.rings().map(ring).collect()))
            .collect(),
    )
}

fn write_features(path: &Path, features: Vec<Value>) -> Result<()> {
    let root = json!({ "type": "FeatureCollection", "features": features });
    super::write_json(path, &root)
}

pub fn write_annotations(path: &Path, annotations: &[CrownAnnotation]) -> Result<()> {
    write_features(
        path,
        annotations
            .iter()
            .map(|a| {
                json!({
                    "type": "Feature",
                    "id": a.instance_id,
                    "properties": { "Label": a.class_label },
                    "geometry": { "type": "MultiPolygon", "coordinates": coords(&a.polygon) },
                })
            })
            .collect(),
    )
}

pub fn write_aois(path: &Path, aois: &[Aoi]) -> Result<()> {
    write_features(
        path,
        aois.iter()
            .map(|a| {
                let purpose = match a.purpose {
                    AoiPurpose::Include => "include",
                    AoiPurpose::ExcludeMask => "excludemask",
                };
                json!({
                    "type": "Feature",
                    "properties": { "purpose": purpose },
                    "geometry": { "type": "MultiPolygon", "coordinates": coords(&a.polygons) },
                })
            })
            .collect(),
    )
}

pub fn write_splits(path: &Path, splits: &BTreeMap<Split, MultiPolygon>) -> Result<()> {
    write_features(
        path,
        splits
            .iter()
            .map(|(s, mp)| {
                json!({
                    "type": "Feature",
                    "properties": { "split": s.as_str() },
                    "geometry": { "type": "MultiPolygon", "coordinates": coords(mp) },
                })
            })
            .collect(),
    )
}
