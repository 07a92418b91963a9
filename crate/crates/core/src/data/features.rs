//! Visual feature providers standing in for a frozen backbone.
//!
//! Precomputed feature files use a little-endian binary layout:
//!
//! ```text
//! magic        8 bytes   b"PCFEAT01"
//! visual_dim   u32
//! map_channels u32
//! map_height   u32
//! map_width    u32
//! count        u64
//! count records:
//!   key_len    u32, key bytes (UTF-8, see PairExample::key)
//!   x_s        visual_dim f64
//!   x_o        visual_dim f64
//!   x_p        map_channels*map_height*map_width f64, (channel, row, col) order
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::types::{object_key, ObjectInstance, PairExample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PCFEAT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    /// d_v: pooled subject / object feature length
    pub visual_dim: usize,
    /// d_c: channels of the predicate feature map
    pub map_channels: usize,
    pub map_height: usize,
    pub map_width: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            visual_dim: 256,
            map_channels: 64,
            map_height: 7,
            map_width: 7,
        }
    }
}

impl FeatureDims {
    pub fn map_len(&self) -> usize {
        self.map_channels * self.map_height * self.map_width
    }
}

/// Visual features of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub x_s: Array1<f64>,
    pub x_o: Array1<f64>,
    /// `(channels, height, width)`
    pub x_p: Array3<f64>,
}

impl FeatureBundle {
    pub fn check(&self, dims: &FeatureDims) -> Result<()> {
        if self.x_s.len() != dims.visual_dim || self.x_o.len() != dims.visual_dim {
            return Err(Error::shape("visual features", dims.visual_dim, self.x_s.len()));
        }
        let shape = (dims.map_channels, dims.map_height, dims.map_width);
        if self.x_p.dim() != shape {
            return Err(Error::shape("predicate map", format!("{shape:?}"), format!("{:?}", self.x_p.dim())));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn gaussian_vector(len: usize, seed: u64, tag: &str) -> Vec<f64> {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&bytes));
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Strengths of the structured components of synthetic features, relative
/// to unit-variance instance noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFeatures {
    /// Per-class appearance vector.
    pub appearance: f64,
    /// Box placement in subject and object features.
    pub position: f64,
}

impl Default for SyntheticFeatures {
    fn default() -> Self {
        Self {
            appearance: 1.0,
            position: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureProvider {
    /// Seeded stand-in for backbone features, all standard-normal noise
    /// hashed from the instance identity plus structured terms.
    ///
    /// `x_s` and `x_o` add the class appearance vector and a fixed linear
    /// embedding of the box centre and size, measured from the centre of the
    /// pair's union box in units of its longer side. `x_p` covers the union
    /// box with an `H x W` grid whose cells carry the appearance of every box
    /// containing the cell centre.
    Synthetic {
        dims: FeatureDims,
        seed: u64,
        style: SyntheticFeatures,
    },
    Precomputed {
        dims: FeatureDims,
        features: HashMap<String, FeatureBundle>,
    },
}

impl FeatureProvider {
    pub fn synthetic(dims: FeatureDims, seed: u64) -> Self {
        Self::synthetic_styled(dims, seed, SyntheticFeatures::default())
    }

    pub fn synthetic_styled(dims: FeatureDims, seed: u64, style: SyntheticFeatures) -> Self {
        FeatureProvider::Synthetic { dims, seed, style }
    }

    pub fn dims(&self) -> FeatureDims {
        match self {
            FeatureProvider::Synthetic { dims, .. } | FeatureProvider::Precomputed { dims, .. } => *dims,
        }
    }

    pub fn provide(&self, pair: &PairExample) -> Result<FeatureBundle> {
        match self {
            FeatureProvider::Synthetic { dims, seed, style } => {
                let union = pair.subject.bbox.union(&pair.object.bbox);
                let (ux, uy) = union.center();
                let side = union.width().max(union.height());
                let axes: Vec<Vec<f64>> = (0..4)
                    .map(|k| gaussian_vector(dims.visual_dim, *seed, &format!("position|{k}")))
                    .collect();
                let instance = |o: &ObjectInstance| {
                    let len = dims.visual_dim;
                    let tag = format!("{}|{}", pair.image_id, object_key(o));
                    let class = gaussian_vector(len, *seed, &format!("class-appearance|{}", o.class_id));
                    let mut x = Array1::from(gaussian_vector(len, *seed, &tag));
                    let (cx, cy) = o.bbox.center();
                    let place = [(cx - ux) / side, (cy - uy) / side, o.bbox.width() / side, o.bbox.height() / side];
                    for i in 0..len {
                        let pos: f64 = place.iter().zip(&axes).map(|(g, axis)| g * axis[i]).sum();
                        x[i] += style.appearance * class[i] + style.position * pos;
                    }
                    x
                };
                let x_s = instance(&pair.subject);
                let x_o = instance(&pair.object);

                let (c, h, w) = (dims.map_channels, dims.map_height, dims.map_width);
                let mut x_p = Array3::from_shape_vec((c, h, w), gaussian_vector(dims.map_len(), *seed, &pair.key()))
                    .expect("length matches shape");
                for o in [&pair.subject, &pair.object] {
                    let proto = gaussian_vector(c, *seed, &format!("class-map|{}", o.class_id));
                    let b = &o.bbox;
                    for i in 0..h {
                        let cy = union.y1 + (i as f64 + 0.5) / h as f64 * union.height();
                        for j in 0..w {
                            let cx = union.x1 + (j as f64 + 0.5) / w as f64 * union.width();
                            if cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2 {
                                for (k, v) in proto.iter().enumerate() {
                                    x_p[[k, i, j]] += style.appearance * v;
                                }
                            }
                        }
                    }
                }
                Ok(FeatureBundle { x_s, x_o, x_p })
            }
            FeatureProvider::Precomputed { features, .. } => features
                .get(&pair.key())
                .cloned()
                .ok_or_else(|| Error::MissingFeatures(pair.key())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (dims, features) = decode_features(&bytes)?;
        Ok(FeatureProvider::Precomputed { dims, features })
    }
}

pub fn write_feature_file<'a>(
    path: &Path,
    dims: &FeatureDims,
    records: impl IntoIterator<Item = (&'a str, &'a FeatureBundle)>,
) -> Result<()> {
    let mut body = Vec::new();
    let mut count: u64 = 0;
    for (key, f) in records {
        f.check(dims)?;
        body.extend_from_slice(&(key.len() as u32).to_le_bytes());
        body.extend_from_slice(key.as_bytes());
        for v in f.x_s.iter().chain(f.x_o.iter()).chain(f.x_p.iter()) {
            body.extend_from_slice(&v.to_le_bytes());
        }
        count += 1;
    }
    let mut out = Vec::with_capacity(body.len() + 32);
    out.extend_from_slice(MAGIC);
    for d in [dims.visual_dim, dims.map_channels, dims.map_height, dims.map_width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated feature file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_features(bytes: &[u8]) -> Result<(FeatureDims, HashMap<String, FeatureBundle>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let dims = FeatureDims {
        visual_dim: r.u32()? as usize,
        map_channels: r.u32()? as usize,
        map_height: r.u32()? as usize,
        map_width: r.u32()? as usize,
    };
    let count = r.u64()?;
    let mut features = HashMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let key = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("feature key: {e}")))?
            .to_string();
        let x_s = Array1::from(r.f64s(dims.visual_dim)?);
        let x_o = Array1::from(r.f64s(dims.visual_dim)?);
        let x_p = Array3::from_shape_vec(
            (dims.map_channels, dims.map_height, dims.map_width),
            r.f64s(dims.map_len())?,
        )
        .expect("length matches shape");
        let bundle = FeatureBundle { x_s, x_o, x_p };
        if bundle.x_s.iter().chain(bundle.x_o.iter()).chain(bundle.x_p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite features for `{key}`")));
        }
        features.insert(key, bundle);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in feature file".into()));
    }
    Ok((dims, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::{BoundingBox, ObjectInstance};

    fn pair(image: &str, x: f64) -> PairExample {
        PairExample {
            image_id: image.into(),
            subject: ObjectInstance {
                class_id: 1,
                bbox: BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            },
            object: ObjectInstance {
                class_id: 2,
                bbox: BoundingBox::new(5.0, 5.0, 30.0, 30.0).unwrap(),
            },
            gt_predicates: [0].into_iter().collect(),
        }
    }

    #[test]
    fn synthetic_is_pure_and_shaped() {
        let p = FeatureProvider::synthetic(FeatureDims::default(), 11);
        let a = p.provide(&pair("img", 0.0)).unwrap();
        let b = p.provide(&pair("img", 0.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x_s.len(), 256);
        assert_eq!(a.x_p.dim(), (64, 7, 7));
        let c = p.provide(&pair("img", 1.0)).unwrap();
        assert_ne!(a.x_p, c.x_p);
        assert_ne!(a.x_o, c.x_o, "placement in the union frame moved");
        let noise_only = FeatureProvider::synthetic_styled(FeatureDims::default(), 11, style(0.0, 0.0));
        let a = noise_only.provide(&pair("img", 0.0)).unwrap();
        let c = noise_only.provide(&pair("img", 1.0)).unwrap();
        assert_eq!(a.x_o, c.x_o, "same object instance, same noise");
    }

    fn style(appearance: f64, position: f64) -> SyntheticFeatures {
        SyntheticFeatures { appearance, position }
    }

    fn component(st: SyntheticFeatures, p: &PairExample) -> FeatureBundle {
        let dims = FeatureDims::default();
        let with = FeatureProvider::synthetic_styled(dims, 3, st).provide(p).unwrap();
        let without = FeatureProvider::synthetic_styled(dims, 3, style(0.0, 0.0)).provide(p).unwrap();
        FeatureBundle {
            x_s: with.x_s - without.x_s,
            x_o: with.x_o - without.x_o,
            x_p: with.x_p - without.x_p,
        }
    }

    fn close(a: &Array1<f64>, b: &Array1<f64>) -> bool {
        a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-9)
    }

    #[test]
    fn appearance_depends_on_class_only() {
        let a = component(style(1.0, 0.0), &pair("one", 0.0));
        let b = component(style(1.0, 0.0), &pair("two", 7.0));
        assert!(close(&a.x_s, &b.x_s));
        assert!(close(&a.x_o, &b.x_o));
        assert!(!close(&a.x_s, &a.x_o), "different classes");
    }

    #[test]
    fn placement_is_translation_and_scale_invariant() {
        let p = pair("img", 0.0);
        let moved = PairExample {
            subject: ObjectInstance {
                bbox: p.subject.bbox.translated(40.0, 12.0).scaled_about(0.0, 0.0, 2.0),
                ..p.subject.clone()
            },
            object: ObjectInstance {
                bbox: p.object.bbox.translated(40.0, 12.0).scaled_about(0.0, 0.0, 2.0),
                ..p.object.clone()
            },
            ..p.clone()
        };
        let a = component(style(0.0, 1.0), &p);
        let b = component(style(0.0, 1.0), &moved);
        assert!(close(&a.x_s, &b.x_s));
        assert!(close(&a.x_o, &b.x_o));
        assert!(a.x_p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_appearance_only_inside_boxes() {
        // union (0,0)-(30,30) on a 2x2 grid: cell centres at 7.5 and 22.5;
        // the subject (0,0)-(10,10) holds (7.5, 7.5), the object
        // (5,5)-(30,30) holds all four
        let dims = FeatureDims {
            visual_dim: 2,
            map_channels: 3,
            map_height: 2,
            map_width: 2,
        };
        let p = pair("img", 0.0);
        let with = FeatureProvider::synthetic_styled(dims, 3, style(1.0, 0.0)).provide(&p).unwrap();
        let without = FeatureProvider::synthetic_styled(dims, 3, style(0.0, 0.0)).provide(&p).unwrap();
        let d = with.x_p - without.x_p;
        let subj = gaussian_vector(3, 3, "class-map|1");
        let obj = gaussian_vector(3, 3, "class-map|2");
        for k in 0..3 {
            assert!((d[[k, 0, 0]] - (subj[k] + obj[k])).abs() < 1e-12);
            for (i, j) in [(0, 1), (1, 0), (1, 1)] {
                assert!((d[[k, i, j]] - obj[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn precomputed_round_trip_and_missing_key() {
        let dims = FeatureDims {
            visual_dim: 3,
            map_channels: 2,
            map_height: 2,
            map_width: 1,
        };
        let synth = FeatureProvider::synthetic(dims, 5);
        let pairs = [pair("a", 0.0), pair("b", 2.0)];
        let bundles: Vec<(String, FeatureBundle)> =
            pairs.iter().map(|p| (p.key(), synth.provide(p).unwrap())).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.bin");
        write_feature_file(&path, &dims, bundles.iter().map(|(k, b)| (k.as_str(), b))).unwrap();
        let loaded = FeatureProvider::load(&path).unwrap();
        assert_eq!(loaded.dims(), dims);
        for (p, (_, b)) in pairs.iter().zip(&bundles) {
            assert_eq!(&loaded.provide(p).unwrap(), b);
        }
        let missing = pair("c", 0.0);
        match loaded.provide(&missing) {
            Err(Error::MissingFeatures(k)) => assert_eq!(k, missing.key()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"PCFEAT01\x01\x00").unwrap();
        assert!(FeatureProvider::load(&path).is_err());
    }
}
