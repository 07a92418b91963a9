use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason| Error::InvalidBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
            reason,
        };
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(err("non-finite coordinate"));
        }
        if self.x1 < 0.0 || self.y1 < 0.0 {
            return Err(err("negative coordinate"));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(err("zero or negative area"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Smallest box enclosing both (the predicate box).
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// True when `other` lies inside `self` (boundaries inclusive).
    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.x1.max(other.x1) < self.x2.min(other.x2) && self.y1.max(other.y1) < self.y2.min(other.y2)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Scales coordinates by `factor` about `(ox, oy)`.
    pub fn scaled_about(&self, ox: f64, oy: f64, factor: f64) -> BoundingBox {
        BoundingBox {
            x1: ox + (self.x1 - ox) * factor,
            y1: oy + (self.y1 - oy) * factor,
            x2: ox + (self.x2 - ox) * factor,
            y2: oy + (self.y2 - oy) * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub class_id: usize,
    pub bbox: BoundingBox,
}

/// One subject-object pair with its ground-truth predicate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub image_id: String,
    pub subject: ObjectInstance,
    pub object: ObjectInstance,
    pub gt_predicates: BTreeSet<usize>,
}

impl PairExample {
    /// Canonical textual identity of the pair, used to key precomputed
    /// features and to seed synthetic ones.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}",
            self.image_id,
            object_key(&self.subject),
            object_key(&self.object)
        )
    }

    /// Lowest ground-truth predicate id.
    pub fn primary_predicate(&self) -> usize {
        *self.gt_predicates.iter().next().expect("non-empty predicate set")
    }
}

pub(crate) fn object_key(o: &ObjectInstance) -> String {
    let b = &o.bbox;
    format!("{}@{},{},{},{}", o.class_id, b.x1, b.y1, b.x2, b.y2)
}

/// An annotated dataset for predicate classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub pairs: Vec<PairExample>,
    pub n_obj: usize,
    pub n_pred: usize,
    /// image id -> (width, height) in pixels
    pub image_sizes: BTreeMap<String, (f64, f64)>,
    pub object_names: Vec<String>,
    pub predicate_names: Vec<String>,
}

/// Pairs of one image, in dataset order. `pairs[i]` is the dataset index of
/// the pair with per-image index `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGroup {
    pub image_id: String,
    pub pairs: Vec<usize>,
}

impl DatasetBundle {
    pub fn empty(object_names: Vec<String>, predicate_names: Vec<String>) -> Self {
        Self {
            pairs: Vec::new(),
            n_obj: object_names.len(),
            n_pred: predicate_names.len(),
            image_sizes: BTreeMap::new(),
            object_names,
            predicate_names,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Total number of (pair, predicate) ground-truth items.
    pub fn relationship_count(&self) -> usize {
        self.pairs.iter().map(|p| p.gt_predicates.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_names.len() != self.n_obj || self.predicate_names.len() != self.n_pred {
            return Err(Error::Config(format!(
                "vocabulary names ({} objects, {} predicates) disagree with sizes ({}, {})",
                self.object_names.len(),
                self.predicate_names.len(),
                self.n_obj,
                self.n_pred
            )));
        }
        for pair in &self.pairs {
            let parse = |reason: String| Error::Parse {
                image_id: pair.image_id.clone(),
                reason,
            };
            for inst in [&pair.subject, &pair.object] {
                if inst.class_id >= self.n_obj {
                    return Err(Error::Vocabulary {
                        kind: "object",
                        id: inst.class_id,
                        size: self.n_obj,
                    });
                }
                inst.bbox.validate().map_err(|e| parse(e.to_string()))?;
            }
            if pair.gt_predicates.is_empty() {
                return Err(parse("empty predicate set".into()));
            }
            if let Some(&p) = pair.gt_predicates.iter().find(|&&p| p >= self.n_pred) {
                return Err(Error::Vocabulary {
                    kind: "predicate",
                    id: p,
                    size: self.n_pred,
                });
            }
            let &(w, h) = self
                .image_sizes
                .get(&pair.image_id)
                .ok_or_else(|| parse("no recorded image size".into()))?;
            for inst in [&pair.subject, &pair.object] {
                if inst.bbox.x2 > w || inst.bbox.y2 > h {
                    return Err(parse(format!("box exceeds image bounds {w}x{h}")));
                }
            }
        }
        Ok(())
    }

    /// Groups pair indices by image, images ordered by first appearance.
    pub fn image_groups(&self) -> Vec<ImageGroup> {
        let mut order: Vec<ImageGroup> = Vec::new();
        let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, pair) in self.pairs.iter().enumerate() {
            let idx = *slot.entry(pair.image_id.as_str()).or_insert_with(|| {
                order.push(ImageGroup {
                    image_id: pair.image_id.clone(),
                    pairs: Vec::new(),
                });
                order.len() - 1
            });
            order[idx].pairs.push(i);
        }
        order
    }

    /// Per-image index of every pair, aligned with `pairs`.
    pub fn pair_indices(&self) -> Vec<usize> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        self.pairs
            .iter()
            .map(|p| {
                let c = seen.entry(p.image_id.as_str()).or_insert(0);
                *c += 1;
                *c - 1
            })
            .collect()
    }

    /// Keeps the pairs at `indices` (in the given order) with the same
    /// vocabulary; image sizes are restricted to the images still present.
    pub fn subset(&self, indices: &[usize]) -> DatasetBundle {
        let pairs: Vec<PairExample> = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        let image_sizes = pairs
            .iter()
            .filter_map(|p| {
                self.image_sizes
                    .get(&p.image_id)
                    .map(|&s| (p.image_id.clone(), s))
            })
            .collect();
        DatasetBundle {
            pairs,
            n_obj: self.n_obj,
            n_pred: self.n_pred,
            image_sizes,
            object_names: self.object_names.clone(),
            predicate_names: self.predicate_names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(-1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn union_and_containment() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BoundingBox::new(2.0, 3.0, 4.0, 5.0).unwrap();
        let c = BoundingBox::new(20.0, 0.0, 30.0, 40.0).unwrap();
        assert!(a.contains(&b));
        assert!(!b.contains(&a));
        assert_eq!(a.union(&c), BoundingBox::new(0.0, 0.0, 30.0, 40.0).unwrap());
        assert!(!a.intersects(&c));
        assert!(a.intersects(&b));
    }

    fn pair(image: &str) -> PairExample {
        let bbox = BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap();
        PairExample {
            image_id: image.into(),
            subject: ObjectInstance { class_id: 0, bbox },
            object: ObjectInstance { class_id: 1, bbox },
            gt_predicates: [0].into_iter().collect(),
        }
    }

    #[test]
    fn image_groups_follow_first_appearance() {
        let mut ds = DatasetBundle::empty(vec!["a".into(), "b".into()], vec!["p".into()]);
        ds.pairs = vec![pair("z"), pair("a"), pair("z")];
        let groups = ds.image_groups();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].image_id, "z");
        assert_eq!(groups[0].pairs, vec![0, 2]);
        assert_eq!(ds.pair_indices(), vec![0, 0, 1]);
    }

    #[test]
    fn validate_rejects_out_of_range_predicate() {
        let mut ds = DatasetBundle::empty(vec!["a".into(), "b".into()], vec!["p".into()]);
        let mut p = pair("i");
        p.gt_predicates.insert(3);
        ds.pairs.push(p);
        ds.image_sizes.insert("i".into(), (10.0, 10.0));
        assert!(matches!(ds.validate(), Err(Error::Vocabulary { kind: "predicate", .. })));
    }
}
