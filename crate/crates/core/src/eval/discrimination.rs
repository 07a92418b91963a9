//! How well attention vectors separate configuration groups.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::synthetic::SpatialRelation;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupDistances {
    /// Mean Euclidean distance over pairs of rows sharing a group.
    pub intra: f64,
    /// Mean Euclidean distance over pairs of rows in different groups.
    pub inter: f64,
}

impl GroupDistances {
    pub fn separates(&self) -> bool {
        self.intra < self.inter
    }
}

pub fn group_distances<K: Ord + Clone>(vectors: ArrayView2<f64>, groups: &[K]) -> Result<GroupDistances> {
    if vectors.nrows() != groups.len() {
        return Err(Error::shape("group labels", vectors.nrows(), groups.len()));
    }
    let ids: BTreeMap<&K, usize> = groups.iter().enumerate().map(|(i, g)| (g, i)).collect();
    let gid: Vec<usize> = groups.iter().map(|g| ids[g]).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.nrows() {
        for j in i + 1..vectors.nrows() {
            let d = (&vectors.row(i) - &vectors.row(j)).mapv(|v| v * v).sum().sqrt();
            if gid[i] == gid[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::Config("need at least one within-group and one cross-group pair".into()));
    }
    Ok(GroupDistances {
        intra: intra / n_intra as f64,
        inter: inter / n_inter as f64,
    })
}

/// `(subject class, object class, spatial relation)` of every pair.
pub fn configuration_groups(gt: &DatasetBundle) -> Vec<(usize, usize, SpatialRelation)> {
    gt.pairs
        .iter()
        .map(|p| (p.subject.class_id, p.object.class_id, SpatialRelation::of(&p.subject.bbox, &p.object.bbox)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_distances() {
        let v = array![[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]];
        let g = group_distances(v.view(), &["a", "b", "a"]).unwrap();
        // intra: |r0 - r2| = 1; inter: |r0 - r1| = 5, |r1 - r2| = sqrt(18)
        assert_eq!(g.intra, 1.0);
        assert!((g.inter - (5.0 + 18f64.sqrt()) / 2.0).abs() < 1e-12);
        assert!(g.separates());
    }

    #[test]
    fn needs_both_kinds_of_pairs() {
        let v = array![[0.0], [1.0]];
        assert!(group_distances(v.view(), &[1, 1]).is_err());
        assert!(group_distances(v.view(), &[1, 2]).is_err());
        assert!(group_distances(v.view(), &[1]).is_err());
    }
}
