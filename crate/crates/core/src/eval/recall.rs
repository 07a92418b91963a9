//! Recall with a per-pair prediction budget.
//!
//! For each image with `N` pairs, every pair keeps its `k` most confident
//! predicates, the resulting `<= N k` records are pooled, and the `x` most
//! confident records of the pool are retained. A ground-truth
//! `(pair, predicate)` item is recalled iff that exact pair and predicate
//! appear among the retained records.
//!
//! Ties are broken deterministically. Within a pair, equal confidences
//! prefer the lower predicate id; in the pool they prefer the lower pair
//! index, then the lower predicate id; remaining ties keep input order.
//! Records are not deduplicated.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};

/// One scored `(pair, predicate)` hypothesis. `pair_index` is the pair's
/// position among the pairs of its image, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub pair_index: usize,
    pub predicate_id: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecallConfig {
    pub k: usize,
    pub x: usize,
}

impl RecallConfig {
    pub fn new(k: usize, x: usize) -> Self {
        Self { k, x }
    }

    pub fn validate(&self, n_pred: usize) -> Result<()> {
        if self.k == 0 || self.x == 0 {
            return Err(Error::Config(format!("k and x must be at least 1, got k={} x={}", self.k, self.x)));
        }
        if self.k > n_pred {
            return Err(Error::Config(format!("k={} exceeds the {n_pred} predicates", self.k)));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("R_{}@{}", self.k, self.x)
    }
}

/// How per-image results are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Recalled items over all ground-truth items.
    #[default]
    Micro,
    /// Mean of per-image recall over images with ground truth.
    PerImage,
}

/// Recall over `gt`; predictions may arrive in any order.
pub fn recall_k_at_x(
    predictions: &[PredictionRecord],
    gt: &DatasetBundle,
    cfg: RecallConfig,
    aggregation: Aggregation,
) -> Result<f64> {
    cfg.validate(gt.n_pred)?;
    let groups = gt.image_groups();
    let slot: HashMap<&str, usize> = groups.iter().enumerate().map(|(i, g)| (g.image_id.as_str(), i)).collect();

    // per image, per pair: (confidence, predicate, input order)
    let mut per_pair: Vec<Vec<Vec<(f64, usize, usize)>>> =
        groups.iter().map(|g| vec![Vec::new(); g.pairs.len()]).collect();
    for (order, rec) in predictions.iter().enumerate() {
        let unknown = || Error::UnknownPair {
            image_id: rec.image_id.clone(),
            pair_index: rec.pair_index,
        };
        let &img = slot.get(rec.image_id.as_str()).ok_or_else(unknown)?;
        let pair = per_pair[img].get_mut(rec.pair_index).ok_or_else(unknown)?;
        if rec.predicate_id >= gt.n_pred {
            return Err(Error::Vocabulary {
                kind: "predicate",
                id: rec.predicate_id,
                size: gt.n_pred,
            });
        }
        if !rec.confidence.is_finite() {
            return Err(Error::Format(format!(
                "non-finite confidence for {}#{} predicate {}",
                rec.image_id, rec.pair_index, rec.predicate_id
            )));
        }
        pair.push((rec.confidence, rec.predicate_id, order));
    }

    let (mut hits, mut total) = (0usize, 0usize);
    let mut image_recalls = Vec::new();
    for (group, pairs) in groups.iter().zip(per_pair.iter_mut()) {
        let mut pool: Vec<(f64, usize, usize, usize)> = Vec::new();
        for (pair_index, records) in pairs.iter_mut().enumerate() {
            records.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            pool.extend(records.iter().take(cfg.k).map(|&(c, p, o)| (c, pair_index, p, o)));
        }
        pool.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        pool.truncate(cfg.x);
        let (mut img_hits, mut img_total) = (0usize, 0usize);
        for (pair_index, &dataset_index) in group.pairs.iter().enumerate() {
            for &pred in &gt.pairs[dataset_index].gt_predicates {
                img_total += 1;
                if pool.iter().any(|r| r.1 == pair_index && r.2 == pred) {
                    img_hits += 1;
                }
            }
        }
        hits += img_hits;
        total += img_total;
        if img_total > 0 {
            image_recalls.push(img_hits as f64 / img_total as f64);
        }
    }
    if total == 0 {
        return Err(Error::Config("recall is undefined without ground-truth relationships".into()));
    }
    Ok(match aggregation {
        Aggregation::Micro => hits as f64 / total as f64,
        Aggregation::PerImage => image_recalls.iter().sum::<f64>() / image_recalls.len() as f64,
    })
}

/// One record per (pair, predicate) from a `(pairs, n_pred)` confidence
/// matrix aligned with `gt.pairs`.
pub fn records_from_confidences(gt: &DatasetBundle, confidences: ArrayView2<f64>) -> Result<Vec<PredictionRecord>> {
    if confidences.dim() != (gt.len(), gt.n_pred) {
        return Err(Error::shape(
            "confidence matrix",
            format!("({}, {})", gt.len(), gt.n_pred),
            format!("{:?}", confidences.dim()),
        ));
    }
    let index = gt.pair_indices();
    let mut out = Vec::with_capacity(confidences.len());
    for ((pair, &pair_index), row) in gt.pairs.iter().zip(&index).zip(confidences.outer_iter()) {
        for (predicate_id, &confidence) in row.iter().enumerate() {
            out.push(PredictionRecord {
                image_id: pair.image_id.clone(),
                pair_index,
                predicate_id,
                confidence,
            });
        }
    }
    Ok(out)
}

/// Writes one JSON record per line.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Recall for several settings at once, keyed by label.
pub fn recall_table(
    predictions: &[PredictionRecord],
    gt: &DatasetBundle,
    configs: &[RecallConfig],
    aggregation: Aggregation,
) -> Result<BTreeMap<String, f64>> {
    configs
        .iter()
        .map(|&c| Ok((c.label(), recall_k_at_x(predictions, gt, c, aggregation)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BoundingBox, ObjectInstance, PairExample};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn bundle(images: &[(&str, Vec<Vec<usize>>)], n_pred: usize) -> DatasetBundle {
        let mut ds = DatasetBundle::empty(vec!["a".into(), "b".into()], (0..n_pred).map(|i| i.to_string()).collect());
        for (id, pairs) in images {
            ds.image_sizes.insert(id.to_string(), (100.0, 100.0));
            for (i, gt) in pairs.iter().enumerate() {
                let b = BoundingBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0).unwrap();
                ds.pairs.push(PairExample {
                    image_id: id.to_string(),
                    subject: ObjectInstance { class_id: 0, bbox: b },
                    object: ObjectInstance { class_id: 1, bbox: b },
                    gt_predicates: gt.iter().copied().collect::<BTreeSet<_>>(),
                });
            }
        }
        ds
    }

    fn rec(img: &str, pair: usize, pred: usize, conf: f64) -> PredictionRecord {
        PredictionRecord {
            image_id: img.into(),
            pair_index: pair,
            predicate_id: pred,
            confidence: conf,
        }
    }

    /// Sorts every record with the documented keys after the per-pair cut
    /// and checks membership item by item.
    fn oracle(preds: &[PredictionRecord], gt: &DatasetBundle, k: usize, x: usize) -> f64 {
        let idx = gt.pair_indices();
        let mut hits = 0;
        for (pair, &pi) in gt.pairs.iter().zip(&idx) {
            for &g in &pair.gt_predicates {
                let beats = |a: &(usize, &PredictionRecord), b: &(usize, &PredictionRecord)| {
                    a.1.confidence > b.1.confidence
                        || (a.1.confidence == b.1.confidence
                            && (a.1.pair_index, a.1.predicate_id, a.0) < (b.1.pair_index, b.1.predicate_id, b.0))
                };
                let image: Vec<(usize, &PredictionRecord)> =
                    preds.iter().enumerate().filter(|(_, r)| r.image_id == pair.image_id).collect();
                let kept: Vec<(usize, &PredictionRecord)> = image
                    .iter()
                    .filter(|r| {
                        let same: Vec<_> = image.iter().filter(|o| o.1.pair_index == r.1.pair_index).collect();
                        same.iter().filter(|o| beats(o, r)).count() < k
                    })
                    .copied()
                    .collect();
                let top = kept
                    .iter()
                    .filter(|r| kept.iter().filter(|o| beats(o, r)).count() < x);
                if top.clone().any(|r| r.1.pair_index == pi && r.1.predicate_id == g) {
                    hits += 1;
                }
            }
        }
        hits as f64 / gt.relationship_count() as f64
    }

    #[test]
    fn single_item_ranked_first() {
        let gt = bundle(&[("i", vec![vec![2]])], 4);
        let preds = vec![rec("i", 0, 2, 0.9), rec("i", 0, 1, 0.1)];
        assert_eq!(recall_k_at_x(&preds, &gt, RecallConfig::new(1, 50), Aggregation::Micro).unwrap(), 1.0);
    }

    #[test]
    fn hand_instance_matches_oracle() {
        let gt = bundle(&[("i", vec![vec![0, 1], vec![2], vec![1, 3]])], 4);
        let preds = vec![
            rec("i", 0, 0, 0.9),
            rec("i", 0, 1, 0.2),
            rec("i", 0, 2, 0.5),
            rec("i", 1, 2, 0.8),
            rec("i", 1, 0, 0.85),
            rec("i", 2, 3, 0.3),
            rec("i", 2, 1, 0.7),
        ];
        // per-pair top-2: p0 {0 .9, 2 .5}, p1 {0 .85, 2 .8}, p2 {1 .7, 3 .3}
        // top-3 pool: (0,0) .9, (1,0) .85, (1,2) .8 -> hits: (0,0), (1,2)
        let r = recall_k_at_x(&preds, &gt, RecallConfig::new(2, 3), Aggregation::Micro).unwrap();
        assert_eq!(r, 2.0 / 5.0);
        assert_eq!(r, oracle(&preds, &gt, 2, 3));
    }

    #[test]
    fn ties_prefer_lower_pair_then_predicate() {
        let gt = bundle(&[("i", vec![vec![1], vec![0]])], 3);
        let preds = vec![rec("i", 1, 0, 0.5), rec("i", 0, 2, 0.5), rec("i", 0, 1, 0.5)];
        // k=2, x=1: pool ordered (0,1), (0,2), (1,0)
        let r = recall_k_at_x(&preds, &gt, RecallConfig::new(2, 1), Aggregation::Micro).unwrap();
        assert_eq!(r, 0.5);
    }

    #[test]
    fn larger_k_can_lower_recall_at_small_x() {
        // pair 0's second guess outranks pair 1's correct first guess
        let gt = bundle(&[("i", vec![vec![0], vec![0]])], 2);
        let preds = vec![
            rec("i", 0, 0, 0.9),
            rec("i", 0, 1, 0.8),
            rec("i", 1, 0, 0.7),
            rec("i", 1, 1, 0.1),
        ];
        let r = |k| recall_k_at_x(&preds, &gt, RecallConfig::new(k, 2), Aggregation::Micro).unwrap();
        assert_eq!((r(1), r(2)), (1.0, 0.5));
    }

    #[test]
    fn per_image_average_differs_from_micro() {
        let gt = bundle(&[("a", vec![vec![0]]), ("b", vec![vec![0], vec![1], vec![2]])], 3);
        let preds = vec![rec("a", 0, 0, 1.0), rec("b", 0, 1, 1.0)];
        let cfg = RecallConfig::new(1, 50);
        assert_eq!(recall_k_at_x(&preds, &gt, cfg, Aggregation::Micro).unwrap(), 0.25);
        assert_eq!(recall_k_at_x(&preds, &gt, cfg, Aggregation::PerImage).unwrap(), 0.5);
    }

    #[test]
    fn errors() {
        let gt = bundle(&[("i", vec![vec![0]])], 2);
        let cfg = RecallConfig::new(1, 1);
        assert!(matches!(
            recall_k_at_x(&[rec("j", 0, 0, 1.0)], &gt, cfg, Aggregation::Micro),
            Err(Error::UnknownPair { .. })
        ));
        assert!(matches!(
            recall_k_at_x(&[rec("i", 1, 0, 1.0)], &gt, cfg, Aggregation::Micro),
            Err(Error::UnknownPair { pair_index: 1, .. })
        ));
        assert!(recall_k_at_x(&[rec("i", 0, 2, 1.0)], &gt, cfg, Aggregation::Micro).is_err());
        assert!(recall_k_at_x(&[], &gt, RecallConfig::new(3, 1), Aggregation::Micro).is_err());
        assert!(recall_k_at_x(&[], &gt, RecallConfig::new(1, 0), Aggregation::Micro).is_err());
    }

    #[test]
    fn prediction_file_round_trip() {
        let preds = vec![rec("i", 0, 1, 0.1 + 0.2), rec("j k", 3, 0, 1e-300)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_predictions(&path, &preds).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }

    fn instance() -> impl Strategy<Value = (DatasetBundle, Vec<PredictionRecord>)> {
        let n_pred = 2usize..6;
        n_pred.prop_flat_map(|n| {
            let pair = proptest::collection::btree_set(0..n, 1..=n.min(3));
            let image = proptest::collection::vec(pair, 1..5);
            let images = proptest::collection::vec(image, 1..4);
            (Just(n), images, proptest::collection::vec(0u8..5, 200))
        })
        .prop_map(|(n, images, confs)| {
            let named: Vec<(String, Vec<Vec<usize>>)> = images
                .into_iter()
                .enumerate()
                .map(|(i, ps)| (format!("img{i}"), ps.into_iter().map(|s| s.into_iter().collect()).collect()))
                .collect();
            let refs: Vec<(&str, Vec<Vec<usize>>)> = named.iter().map(|(a, b)| (a.as_str(), b.clone())).collect();
            let gt = bundle(&refs, n);
            let mut preds = Vec::new();
            let mut c = confs.iter().cycle();
            for (img, pairs) in &named {
                for pi in 0..pairs.len() {
                    for p in 0..n {
                        preds.push(rec(img, pi, p, *c.next().unwrap() as f64 / 4.0));
                    }
                }
            }
            (gt, preds)
        })
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_monotone((gt, preds) in instance(), k in 1usize..6, x in 1usize..12) {
            let k = k.min(gt.n_pred);
            let r = recall_k_at_x(&preds, &gt, RecallConfig::new(k, x), Aggregation::Micro).unwrap();
            prop_assert_eq!(r, oracle(&preds, &gt, k, x));
            let rx = recall_k_at_x(&preds, &gt, RecallConfig::new(k, x + 1), Aggregation::Micro).unwrap();
            prop_assert!(rx >= r);
            // k only grows recall once the cut on x no longer binds
            let full = 4 * gt.n_pred;
            if k < gt.n_pred {
                let a = recall_k_at_x(&preds, &gt, RecallConfig::new(k, full), Aggregation::Micro).unwrap();
                let b = recall_k_at_x(&preds, &gt, RecallConfig::new(k + 1, full), Aggregation::Micro).unwrap();
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn invariant_under_monotone_rescaling((gt, preds) in instance(), k in 1usize..3, x in 1usize..8) {
            let k = k.min(gt.n_pred);
            let cfg = RecallConfig::new(k, x);
            let warped: Vec<_> = preds.iter().map(|r| PredictionRecord { confidence: (3.0 * r.confidence).exp() - 7.0, ..r.clone() }).collect();
            prop_assert_eq!(
                recall_k_at_x(&preds, &gt, cfg, Aggregation::Micro).unwrap(),
                recall_k_at_x(&warped, &gt, cfg, Aggregation::Micro).unwrap()
            );
        }

        #[test]
        fn full_budget_recalls_everything((gt, preds) in instance()) {
            let cfg = RecallConfig::new(gt.n_pred, 4 * gt.n_pred);
            prop_assert_eq!(recall_k_at_x(&preds, &gt, cfg, Aggregation::Micro).unwrap(), 1.0);
        }
    }
}
