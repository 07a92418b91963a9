//! VRD-style annotation files.
//!
//! The annotation file is a JSON object mapping image ids to relationship
//! lists:
//!
//! ```json
//! { "img.jpg": [ { "predicate": 3,
//!                  "subject": { "category": 0, "bbox": [ymin, ymax, xmin, xmax] },
//!                  "object":  { "category": 7, "bbox": [ymin, ymax, xmin, xmax] } } ] }
//! ```
//!
//! Box order follows the original VRD release. Relationships sharing the
//! same subject and object (class and box) within an image are merged into
//! one multilabel pair. Vocabulary files hold one name per line (line index
//! is the id) or a JSON array of names. The optional image-size file maps
//! image ids to `[width, height]`; without it an image's size is taken as
//! the extent of its boxes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{BoundingBox, DatasetBundle, ObjectInstance, PairExample};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct RawObject {
    category: usize,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRelationship {
    predicate: usize,
    subject: RawObject,
    object: RawObject,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_vocabulary(path: &Path) -> Result<Vec<String>> {
    parse_vocabulary(&read(path)?)
}

pub fn parse_vocabulary(text: &str) -> Result<Vec<String>> {
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(text)?);
    }
    let mut names: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    while names.last().is_some_and(|n| n.is_empty()) {
        names.pop();
    }
    if let Some(i) = names.iter().position(|n| n.is_empty()) {
        return Err(Error::Format(format!("empty vocabulary entry on line {}", i + 1)));
    }
    Ok(names)
}

fn to_instance(image_id: &str, raw: &RawObject, n_obj: usize) -> Result<ObjectInstance> {
    if raw.category >= n_obj {
        return Err(Error::Vocabulary {
            kind: "object",
            id: raw.category,
            size: n_obj,
        });
    }
    let [ymin, ymax, xmin, xmax] = raw.bbox;
    let bbox = BoundingBox::new(xmin, ymin, xmax, ymax).map_err(|e| Error::Parse {
        image_id: image_id.to_string(),
        reason: e.to_string(),
    })?;
    Ok(ObjectInstance {
        class_id: raw.category,
        bbox,
    })
}

/// Parses annotation JSON text against known vocabularies.
pub fn parse_annotations(
    text: &str,
    object_names: Vec<String>,
    predicate_names: Vec<String>,
    image_sizes: Option<BTreeMap<String, (f64, f64)>>,
) -> Result<DatasetBundle> {
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(text)?;
    let n_obj = object_names.len();
    let n_pred = predicate_names.len();
    let mut bundle = DatasetBundle::empty(object_names, predicate_names);
    for (image_id, value) in raw {
        let rels: Vec<RawRelationship> = serde_json::from_value(value).map_err(|e| Error::Parse {
            image_id: image_id.clone(),
            reason: e.to_string(),
        })?;
        let mut pairs: Vec<PairExample> = Vec::new();
        for rel in &rels {
            if rel.predicate >= n_pred {
                return Err(Error::Vocabulary {
                    kind: "predicate",
                    id: rel.predicate,
                    size: n_pred,
                });
            }
            let subject = to_instance(&image_id, &rel.subject, n_obj)?;
            let object = to_instance(&image_id, &rel.object, n_obj)?;
            match pairs.iter_mut().find(|p| p.subject == subject && p.object == object) {
                Some(p) => {
                    p.gt_predicates.insert(rel.predicate);
                }
                None => pairs.push(PairExample {
                    image_id: image_id.clone(),
                    subject,
                    object,
                    gt_predicates: BTreeSet::from([rel.predicate]),
                }),
            }
        }
        let size = match image_sizes.as_ref().map(|s| s.get(&image_id)) {
            Some(Some(&s)) => s,
            Some(None) => {
                return Err(Error::Parse {
                    image_id,
                    reason: "missing from image-size file".into(),
                })
            }
            None => pairs.iter().fold((0.0f64, 0.0f64), |(w, h), p| {
                (
                    w.max(p.subject.bbox.x2).max(p.object.bbox.x2),
                    h.max(p.subject.bbox.y2).max(p.object.bbox.y2),
                )
            }),
        };
        bundle.image_sizes.insert(image_id, size);
        bundle.pairs.extend(pairs);
    }
    bundle.validate()?;
    Ok(bundle)
}

/// Loads a VRD-style annotation file with its vocabularies.
pub fn load_annotations(
    path: &Path,
    objects_vocab: &Path,
    predicates_vocab: &Path,
    image_sizes: Option<&Path>,
) -> Result<DatasetBundle> {
    let objects = load_vocabulary(objects_vocab)?;
    let predicates = load_vocabulary(predicates_vocab)?;
    let sizes = match image_sizes {
        Some(p) => {
            let raw: BTreeMap<String, [f64; 2]> = serde_json::from_str(&read(p)?)?;
            Some(raw.into_iter().map(|(k, [w, h])| (k, (w, h))).collect())
        }
        None => None,
    };
    parse_annotations(&read(path)?, objects, predicates, sizes)
}

/// Renders the bundle in the annotation layout, one record per
/// (pair, predicate).
pub fn annotations_to_json(bundle: &DatasetBundle) -> Result<String> {
    let mut out: BTreeMap<&str, Vec<RawRelationship>> = BTreeMap::new();
    for id in bundle.image_sizes.keys() {
        out.insert(id, Vec::new());
    }
    let raw = |o: &ObjectInstance| RawObject {
        category: o.class_id,
        bbox: [o.bbox.y1, o.bbox.y2, o.bbox.x1, o.bbox.x2],
    };
    for pair in &bundle.pairs {
        let list = out.entry(&pair.image_id).or_default();
        for &p in &pair.gt_predicates {
            list.push(RawRelationship {
                predicate: p,
                subject: raw(&pair.subject),
                object: raw(&pair.object),
            });
        }
    }
    Ok(serde_json::to_string_pretty(&out)?)
}

/// Writes annotation, vocabulary and image-size files into `dir` using the
/// given file stem (`<stem>.json`, `<stem>_sizes.json`) plus `objects.txt`
/// and `predicates.txt`.
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path, stem: &str) -> Result<()> {
    let write = |name: String, contents: String| {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    };
    write(format!("{stem}.json"), annotations_to_json(bundle)?)?;
    let sizes: BTreeMap<&String, [f64; 2]> =
        bundle.image_sizes.iter().map(|(k, &(w, h))| (k, [w, h])).collect();
    write(format!("{stem}_sizes.json"), serde_json::to_string_pretty(&sizes)?)?;
    write("objects.txt".into(), bundle.object_names.join("\n") + "\n")?;
    write("predicates.txt".into(), bundle.predicate_names.join("\n") + "\n")?;
    Ok(())
}
