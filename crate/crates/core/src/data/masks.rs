//! Two-channel binary spatial masks in the frame of the pair's union box.
//!
//! The union box is centred in a square frame whose side is the longer side
//! of the union (the shorter side is padded symmetrically). The frame is cut
//! into an `R x R` grid and a cell is set iff its centre lies in the box,
//! using half-open intervals `[x1, x2)`. Boxes too small to contain any cell
//! centre set the single cell that contains the box centre, so every channel
//! has at least one set cell.

use serde::{Deserialize, Serialize};

use super::types::BoundingBox;
use crate::error::{Error, Result};

pub const DEFAULT_MASK_RESOLUTION: usize = 32;

/// Channel 0 is the subject, channel 1 the object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPair {
    resolution: usize,
    cells: Vec<u8>,
}

impl MaskPair {
    pub fn zeros(resolution: usize) -> Self {
        Self {
            resolution,
            cells: vec![0; 2 * resolution * resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> u8 {
        self.cells[self.offset(channel, row, col)]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: bool) {
        let i = self.offset(channel, row, col);
        self.cells[i] = value as u8;
    }

    fn offset(&self, channel: usize, row: usize, col: usize) -> usize {
        assert!(channel < 2 && row < self.resolution && col < self.resolution);
        (channel * self.resolution + row) * self.resolution + col
    }

    pub fn count(&self, channel: usize) -> usize {
        let n = self.resolution * self.resolution;
        self.cells[channel * n..(channel + 1) * n]
            .iter()
            .map(|&c| c as usize)
            .sum()
    }

    /// Number of cells set in both channels.
    pub fn overlap(&self) -> usize {
        let n = self.resolution * self.resolution;
        self.cells[..n]
            .iter()
            .zip(&self.cells[n..])
            .filter(|(a, b)| **a == 1 && **b == 1)
            .count()
    }

    /// Appends the mask in channels-last order: one `[subject, object]` row
    /// per grid cell, rows in raster order.
    pub fn write_channels_last(&self, out: &mut Vec<f64>) {
        let n = self.resolution * self.resolution;
        for i in 0..n {
            out.push(self.cells[i] as f64);
            out.push(self.cells[n + i] as f64);
        }
    }
}

/// Square frame around the union box: `(x0, y0, side)`.
fn union_frame(subject: &BoundingBox, object: &BoundingBox) -> (f64, f64, f64) {
    let u = subject.union(object);
    let side = u.width().max(u.height());
    let x0 = u.x1 - 0.5 * (side - u.width());
    let y0 = u.y1 - 0.5 * (side - u.height());
    (x0, y0, side)
}

fn rasterize_channel(mask: &mut MaskPair, channel: usize, b: &BoundingBox, frame: (f64, f64, f64)) {
    let r = mask.resolution;
    let (x0, y0, side) = frame;
    let cell = side / r as f64;
    let mut any = false;
    for row in 0..r {
        let cy = y0 + (row as f64 + 0.5) * cell;
        if cy < b.y1 || cy >= b.y2 {
            continue;
        }
        for col in 0..r {
            let cx = x0 + (col as f64 + 0.5) * cell;
            if cx >= b.x1 && cx < b.x2 {
                mask.set(channel, row, col, true);
                any = true;
            }
        }
    }
    if !any {
        let (cx, cy) = b.center();
        let clamp = |v: f64| (v.floor().max(0.0) as usize).min(r - 1);
        let col = clamp((cx - x0) / cell);
        let row = clamp((cy - y0) / cell);
        mask.set(channel, row, col, true);
    }
}

/// Rasterizes a subject/object box pair into a [`MaskPair`].
pub fn rasterize_masks(subject: &BoundingBox, object: &BoundingBox, resolution: usize) -> Result<MaskPair> {
    if resolution < 2 {
        return Err(Error::Config(format!("mask resolution must be >= 2, got {resolution}")));
    }
    subject.validate()?;
    object.validate()?;
    let frame = union_frame(subject, object);
    let mut mask = MaskPair::zeros(resolution);
    rasterize_channel(&mut mask, 0, subject, frame);
    rasterize_channel(&mut mask, 1, object, frame);
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    // Independent containment count: iterate all R^2 centres.
    fn oracle_count(b: &BoundingBox, frame: (f64, f64, f64), r: usize) -> usize {
        let (x0, y0, side) = frame;
        let mut n = 0;
        for i in 0..r * r {
            let (row, col) = (i / r, i % r);
            let cx = x0 + side * (2 * col + 1) as f64 / (2 * r) as f64;
            let cy = y0 + side * (2 * row + 1) as f64 / (2 * r) as f64;
            if b.x1 <= cx && cx < b.x2 && b.y1 <= cy && cy < b.y2 {
                n += 1;
            }
        }
        n
    }

    #[test]
    fn subject_equal_to_frame_fills_channel() {
        let s = bb(10.0, 10.0, 110.0, 110.0);
        let o = bb(30.0, 40.0, 60.0, 90.0);
        let m = rasterize_masks(&s, &o, 32).unwrap();
        assert_eq!(m.count(0), 32 * 32);
        assert!(m.count(1) > 0);
    }

    #[test]
    fn disjoint_boxes_do_not_overlap() {
        let s = bb(0.0, 0.0, 40.0, 40.0);
        let o = bb(60.0, 0.0, 100.0, 100.0);
        let m = rasterize_masks(&s, &o, 32).unwrap();
        assert_eq!(m.overlap(), 0);
        assert!(m.count(0) >= 2 && m.count(1) >= 2);
    }

    #[test]
    fn counts_match_centre_oracle() {
        let s = bb(0.0, 0.0, 40.0, 40.0);
        let o = bb(60.0, 0.0, 100.0, 100.0);
        let m = rasterize_masks(&s, &o, 32).unwrap();
        // union is 100x100 so the frame is the union itself
        let frame = (0.0, 0.0, 100.0);
        assert_eq!(m.count(0), oracle_count(&s, frame, 32));
        assert_eq!(m.count(1), oracle_count(&o, frame, 32));
        // 40 px of 100 at 32 cells: centres 1.5625 + 3.125k < 40 -> 13 cells per axis
        assert_eq!(m.count(0), 13 * 13);
        assert_eq!(m.count(1), 13 * 32);
    }

    #[test]
    fn tiny_box_still_sets_one_cell() {
        let s = bb(0.0, 0.0, 1000.0, 1000.0);
        let o = bb(500.0, 500.0, 500.5, 500.5);
        let m = rasterize_masks(&s, &o, 8).unwrap();
        assert_eq!(m.count(1), 1);
        assert_eq!(m.get(1, 4, 4), 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = bb(0.0, 0.0, 10.0, 10.0);
        assert!(rasterize_masks(&s, &s, 1).is_err());
        let degenerate = BoundingBox {
            x1: 5.0,
            y1: 5.0,
            x2: 5.0,
            y2: 9.0,
        };
        assert!(rasterize_masks(&s, &degenerate, 8).is_err());
    }

    fn int_box() -> impl Strategy<Value = BoundingBox> {
        (0u32..200, 0u32..200, 1u32..150, 1u32..150)
            .prop_map(|(x, y, w, h)| bb(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
    }

    proptest! {
        #[test]
        fn translation_covariant(s in int_box(), o in int_box(), dx in 0u32..500, dy in 0u32..500) {
            let m = rasterize_masks(&s, &o, 16).unwrap();
            let (dx, dy) = (dx as f64, dy as f64);
            let t = rasterize_masks(&s.translated(dx, dy), &o.translated(dx, dy), 16).unwrap();
            prop_assert_eq!(m, t);
        }

        #[test]
        fn scale_invariant(s in int_box(), o in int_box(), k in 1u32..6) {
            let m = rasterize_masks(&s, &o, 16).unwrap();
            let u = s.union(&o);
            let k = k as f64;
            let t = rasterize_masks(&s.scaled_about(u.x1, u.y1, k), &o.scaled_about(u.x1, u.y1, k), 16).unwrap();
            prop_assert_eq!(m, t);
        }

        #[test]
        fn every_channel_non_empty(s in int_box(), o in int_box()) {
            let m = rasterize_masks(&s, &o, 32).unwrap();
            prop_assert!(m.count(0) >= 1);
            prop_assert!(m.count(1) >= 1);
        }
    }
}
