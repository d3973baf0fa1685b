use crate::error::{arg_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Box in normalized image coordinates, `x0 < x1`, `y0 < y1`, all in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoiBox {
    pub const FULL: RoiBox = RoiBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    fn validate(&self) -> Result<()> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.x0 < self.x1 && self.y0 < self.y1)
            || ![self.x0, self.y0, self.x1, self.y1].into_iter().all(inside)
        {
            return Err(arg_err("roi_align", format!("degenerate box {self:?}")));
        }
        Ok(())
    }
}

/// Two taps and weights of a 1-D linear interpolation.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

/// One sample per output bin at the bin center; pixel `i` has its center
/// at `i + 0.5`. Samples outside the outermost centers clamp to the edge.
fn taps<T: Scalar>(lo: f64, hi: f64, len: usize, out: usize) -> Vec<Tap<T>> {
    let start = lo * len as f64;
    let bin = (hi - lo) * len as f64 / out as f64;
    (0..out)
        .map(|j| {
            let p = (start + (j as f64 + 0.5) * bin - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            let f = p - i0 as f64;
            Tap { i0, i1, w0: T::from_f64_lossy(1.0 - f), w1: T::from_f64_lossy(f) }
        })
        .collect()
}

/// Bilinear ROI resampling with sampling ratio 1 and no coordinate rounding.
/// With [`RoiBox::FULL`] this is a half-pixel-aligned bilinear resize.
pub fn roi_align<T: Scalar>(x: &Var<T>, roi: RoiBox, out_h: usize, out_w: usize) -> Result<Var<T>> {
    const OP: &str = "roi_align";
    roi.validate()?;
    if out_h == 0 || out_w == 0 {
        return Err(arg_err(OP, "output size must be positive"));
    }
    let [n, c, h, w] = x.value().dims4(OP)?;
    let ty: Vec<Tap<T>> = taps(roi.y0, roi.y1, h, out_h);
    let tx: Vec<Tap<T>> = taps(roi.x0, roi.x1, w, out_w);
    let xd = x.value().data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &xd[plane * h * w..(plane + 1) * h * w];
        for a in &ty {
            let (r0, r1) = (&p[a.i0 * w..][..w], &p[a.i1 * w..][..w]);
            for b in &tx {
                out.push(
                    a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]),
                );
            }
        }
    }
    Tape::record(
        OP,
        Tensor::new(&[n, c, out_h, out_w], out)?,
        &[x],
        Box::new(move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                let gp = &gd[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                for (oy, a) in ty.iter().enumerate() {
                    for (ox, b) in tx.iter().enumerate() {
                        let gv = gp[oy * out_w + ox];
                        d[a.i0 * w + b.i0] += gv * a.w0 * b.w0;
                        d[a.i0 * w + b.i1] += gv * a.w0 * b.w1;
                        d[a.i1 * w + b.i0] += gv * a.w1 * b.w0;
                        d[a.i1 * w + b.i1] += gv * a.w1 * b.w1;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_box_same_size_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 5, 3], |i| (i[1] * 15 + i[2] * 3 + i[3]) as f64 * 0.3), true);
        let y = roi_align(&x, RoiBox::FULL, 5, 3).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn constant_map_stays_constant() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 2.5), true);
        let y = roi_align(&x, RoiBox::FULL, 7, 3).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn degenerate_boxes_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 2.5), true);
        let bad = RoiBox { x0: 0.5, y0: 0.0, x1: 0.5, y1: 1.0 };
        assert!(roi_align(&x, bad, 2, 2).is_err());
        let outside = RoiBox { x0: 0.0, y0: 0.0, x1: 1.5, y1: 1.0 };
        assert!(roi_align(&x, outside, 2, 2).is_err());
    }
}
