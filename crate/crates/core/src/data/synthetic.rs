//! Synthetic predicate-classification data with a known generative rule.
//!
//! Labels are a deterministic function of the two object classes and the
//! relative geometry of their boxes:
//!
//! 1. If both classes are "interactive" (`class % 3 == 0`) the predicate is
//!    `interacts with`, whatever the geometry (semantic-only cue).
//! 2. Otherwise the spatial relation decides:
//!    * subject box inside object box: `on` (spatial-only)
//!    * object box inside subject box: `has` (spatial-only)
//!    * centre offset mostly vertical, subject higher: `above` / `over`
//!    * centre offset mostly vertical, subject lower: `below` / `under`
//!    * otherwise: `next to` / `beside`
//!
//!    where the parity of `subject_class + object_class` picks the first or
//!    second name (joint spatial and semantic cue).
//!
//! With `secondary_labels`, pairs whose boxes overlap without containment
//! additionally carry `touches`. Containment is inclusive of shared edges;
//! "mostly vertical" means `|dy| > |dx|` strictly, with `dy` measured from
//! the subject centre to the object centre in image coordinates (y down).

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::{BoundingBox, DatasetBundle, ObjectInstance, PairExample};
use crate::error::{Error, Result};

pub const RULE_PREDICATES: [&str; 10] = [
    "on",
    "has",
    "above",
    "over",
    "below",
    "under",
    "next to",
    "beside",
    "interacts with",
    "touches",
];

pub const PRED_ON: usize = 0;
pub const PRED_HAS: usize = 1;
pub const PRED_ABOVE: usize = 2;
pub const PRED_BELOW: usize = 4;
pub const PRED_NEXT_TO: usize = 6;
pub const PRED_INTERACTS: usize = 8;
pub const PRED_TOUCHES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpatialRelation {
    SubjectInside,
    ObjectInside,
    Above,
    Below,
    Beside,
}

impl SpatialRelation {
    pub fn of(subject: &BoundingBox, object: &BoundingBox) -> Self {
        if object.contains(subject) {
            return SpatialRelation::SubjectInside;
        }
        if subject.contains(object) {
            return SpatialRelation::ObjectInside;
        }
        let (sx, sy) = subject.center();
        let (ox, oy) = object.center();
        let (dx, dy) = (ox - sx, oy - sy);
        if dy.abs() > dx.abs() {
            if dy > 0.0 {
                SpatialRelation::Above
            } else {
                SpatialRelation::Below
            }
        } else {
            SpatialRelation::Beside
        }
    }
}

pub fn is_interactive(class_id: usize) -> bool {
    class_id % 3 == 0
}

/// Number of predicate ids the rule can emit.
pub fn rule_outcomes(secondary_labels: bool) -> usize {
    if secondary_labels {
        10
    } else {
        9
    }
}

pub fn primary_predicate(subject: &ObjectInstance, object: &ObjectInstance) -> usize {
    if is_interactive(subject.class_id) && is_interactive(object.class_id) {
        return PRED_INTERACTS;
    }
    let parity = (subject.class_id + object.class_id) % 2;
    match SpatialRelation::of(&subject.bbox, &object.bbox) {
        SpatialRelation::SubjectInside => PRED_ON,
        SpatialRelation::ObjectInside => PRED_HAS,
        SpatialRelation::Above => PRED_ABOVE + parity,
        SpatialRelation::Below => PRED_BELOW + parity,
        SpatialRelation::Beside => PRED_NEXT_TO + parity,
    }
}

/// Full noise-free label set for a pair.
pub fn generative_labels(subject: &ObjectInstance, object: &ObjectInstance, secondary_labels: bool) -> BTreeSet<usize> {
    let mut labels = BTreeSet::from([primary_predicate(subject, object)]);
    if secondary_labels {
        let (s, o) = (&subject.bbox, &object.bbox);
        if s.intersects(o) && !s.contains(o) && !o.contains(s) {
            labels.insert(PRED_TOUCHES);
        }
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub pairs_per_image: usize,
    pub n_obj: usize,
    pub n_pred: usize,
    pub seed: u64,
    pub image_width: f64,
    pub image_height: f64,
    /// Probability of replacing the primary label with a uniform random one.
    pub label_noise: f64,
    pub secondary_labels: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 500,
            pairs_per_image: 4,
            n_obj: 12,
            n_pred: 10,
            seed: 0,
            image_width: 640.0,
            image_height: 480.0,
            label_noise: 0.0,
            secondary_labels: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let needed = rule_outcomes(self.secondary_labels);
        if self.n_pred < needed {
            return Err(Error::Config(format!(
                "n_pred = {} is smaller than the {needed} predicates the rule can emit",
                self.n_pred
            )));
        }
        if self.n_obj == 0 {
            return Err(Error::Config("n_obj must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!("label_noise {} outside [0, 1]", self.label_noise)));
        }
        if !(self.image_width >= 32.0 && self.image_height >= 32.0) {
            return Err(Error::Config("images must be at least 32x32".into()));
        }
        Ok(())
    }
}

pub fn synthetic_object_names(n_obj: usize) -> Vec<String> {
    (0..n_obj).map(|i| format!("class_{i}")).collect()
}

pub fn synthetic_predicate_names(n_pred: usize) -> Vec<String> {
    (0..n_pred)
        .map(|i| RULE_PREDICATES.get(i).map_or_else(|| format!("unused_{i}"), |s| s.to_string()))
        .collect()
}

fn make_box(x: f64, y: f64, w: f64, h: f64, img_w: f64, img_h: f64) -> BoundingBox {
    let w = w.round().clamp(2.0, img_w);
    let h = h.round().clamp(2.0, img_h);
    let x = x.round().clamp(0.0, img_w - w);
    let y = y.round().clamp(0.0, img_h - h);
    BoundingBox {
        x1: x,
        y1: y,
        x2: x + w,
        y2: y + h,
    }
}

/// Samples a subject/object box pair, balancing the layouts the rule
/// distinguishes. The label is computed afterwards from the boxes.
fn sample_boxes(rng: &mut ChaCha8Rng, img_w: f64, img_h: f64) -> (BoundingBox, BoundingBox) {
    let ow = rng.random_range(0.15..0.45) * img_w;
    let oh = rng.random_range(0.15..0.45) * img_h;
    let ox = rng.random_range(0.0..img_w - ow);
    let oy = rng.random_range(0.0..img_h - oh);
    let object = make_box(ox, oy, ow, oh, img_w, img_h);
    let subject = match rng.random_range(0..4) {
        0 => {
            let sw = object.width() * rng.random_range(0.3..0.8);
            let sh = object.height() * rng.random_range(0.3..0.8);
            let sx = object.x1 + rng.random::<f64>() * (object.width() - sw);
            let sy = object.y1 + rng.random::<f64>() * (object.height() - sh);
            make_box(sx, sy, sw, sh, img_w, img_h)
        }
        1 => {
            let sw = (object.width() * rng.random_range(1.3..2.0)).min(img_w);
            let sh = (object.height() * rng.random_range(1.3..2.0)).min(img_h);
            let lo_x = (object.x2 - sw).max(0.0);
            let hi_x = object.x1.min(img_w - sw);
            let lo_y = (object.y2 - sh).max(0.0);
            let hi_y = object.y1.min(img_h - sh);
            let sx = lo_x + rng.random::<f64>() * (hi_x - lo_x).max(0.0);
            let sy = lo_y + rng.random::<f64>() * (hi_y - lo_y).max(0.0);
            make_box(sx, sy, sw, sh, img_w, img_h)
        }
        layout => {
            let sw = rng.random_range(0.1..0.4) * img_w;
            let sh = rng.random_range(0.1..0.4) * img_h;
            let (ocx, ocy) = object.center();
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (dx, dy) = if layout == 2 {
                let dy = sign * rng.random_range(0.4..1.0) * 0.5 * (oh + sh);
                (rng.random_range(-0.6..0.6) * dy.abs(), dy)
            } else {
                let dx = sign * rng.random_range(0.4..1.0) * 0.5 * (ow + sw);
                (dx, rng.random_range(-0.6..0.6) * dx.abs())
            };
            make_box(ocx + dx - 0.5 * sw, ocy + dy - 0.5 * sh, sw, sh, img_w, img_h)
        }
    };
    (subject, object)
}

/// Generates a dataset from `spec`; identical specs give identical bundles.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bundle = DatasetBundle::empty(
        synthetic_object_names(spec.n_obj),
        synthetic_predicate_names(spec.n_pred),
    );
    bundle.image_sizes = BTreeMap::new();
    for img in 0..spec.n_images {
        let image_id = format!("synth_{img:05}");
        bundle
            .image_sizes
            .insert(image_id.clone(), (spec.image_width, spec.image_height));
        for _ in 0..spec.pairs_per_image {
            let (sb, ob) = sample_boxes(&mut rng, spec.image_width, spec.image_height);
            let subject = ObjectInstance {
                class_id: rng.random_range(0..spec.n_obj),
                bbox: sb,
            };
            let object = ObjectInstance {
                class_id: rng.random_range(0..spec.n_obj),
                bbox: ob,
            };
            let mut labels = generative_labels(&subject, &object, spec.secondary_labels);
            if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
                let primary = primary_predicate(&subject, &object);
                labels.remove(&primary);
                labels.insert(rng.random_range(0..spec.n_pred));
            }
            bundle.pairs.push(PairExample {
                image_id: image_id.clone(),
                subject,
                object,
                gt_predicates: labels,
            });
        }
    }
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> ObjectInstance {
        ObjectInstance {
            class_id,
            bbox: BoundingBox::new(x1, y1, x2, y2).unwrap(),
        }
    }

    #[test]
    fn rule_examples() {
        let big = inst(1, 0.0, 0.0, 100.0, 100.0);
        let small = inst(2, 10.0, 10.0, 20.0, 20.0);
        assert_eq!(primary_predicate(&small, &big), PRED_ON);
        assert_eq!(primary_predicate(&big, &small), PRED_HAS);
        let top = inst(1, 0.0, 0.0, 10.0, 10.0);
        let bottom = inst(4, 2.0, 50.0, 12.0, 60.0);
        // parity (1 + 4) % 2 = 1
        assert_eq!(primary_predicate(&top, &bottom), PRED_ABOVE + 1);
        assert_eq!(primary_predicate(&bottom, &top), PRED_BELOW + 1);
        let right = inst(3, 50.0, 2.0, 60.0, 12.0);
        // parity (1 + 3) % 2 = 0
        assert_eq!(primary_predicate(&top, &right), PRED_NEXT_TO);
        let a = inst(3, 0.0, 0.0, 10.0, 10.0);
        let b = inst(6, 0.0, 50.0, 10.0, 60.0);
        assert_eq!(primary_predicate(&a, &b), PRED_INTERACTS);
    }

    #[test]
    fn n_pred_too_small_is_config_error() {
        let spec = SyntheticSpec {
            n_pred: 8,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        let spec = SyntheticSpec {
            n_pred: 9,
            secondary_labels: true,
            ..Default::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn size_contract_and_determinism() {
        let spec = SyntheticSpec {
            n_images: 50,
            pairs_per_image: 4,
            seed: 3,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn layouts_cover_every_outcome() {
        let spec = SyntheticSpec {
            n_images: 400,
            secondary_labels: true,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let seen: BTreeSet<usize> = ds.pairs.iter().flat_map(|p| p.gt_predicates.iter().copied()).collect();
        assert_eq!(seen, (0..10).collect());
    }
}
