//! Mask IoU and boundary F-measure.

use serde::{Deserialize, Serialize};

/// Boundary matching tolerance in pixels (Euclidean).
pub const BOUNDARY_TOLERANCE: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub mask_iou: f64,
    pub boundary_f: f64,
}

/// Binary mask of an `h x w` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), h * w, "mask size");
        Self { h, w, bits }
    }

    /// Logits thresholded at zero (probability 0.5).
    pub fn from_logits(h: usize, w: usize, logits: &[f32]) -> Self {
        Self::new(h, w, logits.iter().map(|&v| v > 0.0).collect())
    }

    pub fn from_binary(h: usize, w: usize, values: &[f32]) -> Self {
        Self::new(h, w, values.iter().map(|&v| v > 0.5).collect())
    }

    fn get(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w && self.bits[y as usize * self.w + x as usize]
    }

    /// Foreground pixels with a 4-neighbour in the background. Pixels past
    /// the image edge do not count as background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.bits[y * self.w + x] {
                    continue;
                }
                let (yi, xi) = (y as isize, x as isize);
                let inside = |dy: isize, dx: isize| {
                    let (ny, nx) = (yi + dy, xi + dx);
                    ny < 0 || nx < 0 || ny as usize >= self.h || nx as usize >= self.w || self.get(ny, nx)
                };
                if !(inside(-1, 0) && inside(1, 0) && inside(0, -1) && inside(0, 1)) {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p && g) as usize;
        uni += (p || g) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Fraction of `from` boundary pixels within the tolerance of some pixel
/// flagged in `to`.
fn matched_fraction(from: &[(usize, usize)], to: &Mask) -> f64 {
    let r = BOUNDARY_TOLERANCE.floor() as isize;
    let hits = from
        .iter()
        .filter(|&&(y, x)| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    ((dy * dy + dx * dx) as f64).sqrt() <= BOUNDARY_TOLERANCE && to.get(y as isize + dy, x as isize + dx)
                })
            })
        })
        .count();
    hits as f64 / from.len() as f64
}

/// Boundary F-measure at [`BOUNDARY_TOLERANCE`]. 1 when both boundaries are
/// empty, 0 when exactly one is.
pub fn boundary_f(pred: &Mask, gt: &Mask) -> f64 {
    let (bp, bg) = (pred.boundary(), gt.boundary());
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let as_mask = |pts: &[(usize, usize)]| {
        let mut m = Mask::new(pred.h, pred.w, vec![false; pred.h * pred.w]);
        for &(y, x) in pts {
            m.bits[y * pred.w + x] = true;
        }
        m
    };
    let precision = matched_fraction(&bp, &as_mask(&bg));
    let recall = matched_fraction(&bg, &as_mask(&bp));
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean scores over instances given `[N, 1, H, W]` logits and targets.
pub fn evaluate(logits: &[f32], targets: &[f32], n: usize, h: usize, w: usize) -> SegScores {
    assert_eq!(logits.len(), n * h * w, "logits size");
    assert_eq!(targets.len(), n * h * w, "targets size");
    let mut total = SegScores::default();
    for i in 0..n {
        let range = i * h * w..(i + 1) * h * w;
        let pred = Mask::from_logits(h, w, &logits[range.clone()]);
        let gt = Mask::from_binary(h, w, &targets[range]);
        total.mask_iou += iou(&pred, &gt);
        total.boundary_f += boundary_f(&pred, &gt);
    }
    SegScores {
        mask_iou: total.mask_iou / n as f64,
        boundary_f: total.boundary_f / n as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Mask {
        Mask::new(h, w, (0..h * w).map(|i| (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))).collect())
    }

    #[test]
    fn identical_masks_score_one() {
        let m = rect(8, 8, 2, 6, 1, 5);
        assert_eq!(iou(&m, &m), 1.0);
        assert_eq!(boundary_f(&m, &m), 1.0);
    }

    #[test]
    fn complement_has_zero_iou() {
        let m = rect(8, 8, 0, 4, 0, 8);
        let c = Mask::new(8, 8, m.bits.iter().map(|b| !b).collect());
        assert_eq!(iou(&c, &m), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let e = Mask::new(4, 4, vec![false; 16]);
        assert_eq!(iou(&e, &e), 1.0);
        assert_eq!(boundary_f(&e, &e), 1.0);
        assert_eq!(boundary_f(&e, &rect(4, 4, 1, 3, 1, 3)), 0.0);
    }

    #[test]
    fn square_boundary_is_its_ring() {
        assert_eq!(rect(8, 8, 2, 6, 2, 6).boundary().len(), 12);
        // Touching the image edge does not create boundary there.
        assert_eq!(rect(4, 4, 0, 4, 0, 4).boundary().len(), 0);
    }
}
