use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn check_divisible(op: &'static str, h: usize, w: usize, scale: usize) -> Result<()> {
    if scale == 0 {
        return Err(arg_err(op, "scale must be >= 1"));
    }
    if !h.is_multiple_of(scale) {
        return Err(TensorError::NotDivisible { op, dim: "height", value: h, divisor: scale });
    }
    if !w.is_multiple_of(scale) {
        return Err(TensorError::NotDivisible { op, dim: "width", value: w, divisor: scale });
    }
    Ok(())
}

/// Max pooling with an arbitrary window. Padding cells never win. Ties go
/// to the first candidate in row-major order, which also receives the
/// whole gradient.
pub fn max_pool2d_window<T: Scalar>(
    x: &Var<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    const OP: &str = "max_pool2d";
    let [n, c, h, w] = x.value().dims4(OP)?;
    if kernel == 0 || stride == 0 {
        return Err(arg_err(OP, "kernel and stride must be >= 1"));
    }
    if padding >= kernel || h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(shape_err(OP, format!("window {kernel} (padding {padding}) does not fit {h}x{w}")));
    }
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let xd = x.value().data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..kernel {
                    let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..kernel {
                        let Some(ix) = (ox * stride + kx).checked_sub(padding).filter(|&v| v < w)
                        else {
                            continue;
                        };
                        let i = base + iy * w + ix;
                        if best_i == usize::MAX || xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    let in_shape = x.shape().to_vec();
    Tape::record(
        OP,
        Tensor::new(&[n, c, oh, ow], out)?,
        &[x],
        Box::new(move |g, _| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (&i, &gv) in arg.iter().zip(g.data()) {
                d[i] += gv;
            }
            vec![Some(dx)]
        }),
    )
}

/// Non-overlapping max pooling, kernel = stride = `scale`.
pub fn max_pool2d<T: Scalar>(x: &Var<T>, scale: usize) -> Result<Var<T>> {
    let [_, _, h, w] = x.value().dims4("max_pool2d")?;
    check_divisible("max_pool2d", h, w, scale)?;
    max_pool2d_window(x, scale, scale, 0)
}

/// Non-overlapping average pooling, kernel = stride = `scale`.
pub fn avg_pool2d<T: Scalar>(x: &Var<T>, scale: usize) -> Result<Var<T>> {
    const OP: &str = "avg_pool2d";
    let [n, c, h, w] = x.value().dims4(OP)?;
    check_divisible(OP, h, w, scale)?;
    let (oh, ow) = (h / scale, w / scale);
    let inv = T::one() / T::from_usize(scale * scale).expect("fits");
    let xv = x.value();
    let out = Tensor::from_fn(&[n, c, oh, ow], |i| {
        let mut s = T::zero();
        for dy in 0..scale {
            for dx in 0..scale {
                s += xv.at(&[i[0], i[1], i[2] * scale + dy, i[3] * scale + dx]);
            }
        }
        s * inv
    });
    let in_shape = x.shape().to_vec();
    Tape::record(
        OP,
        out,
        &[x],
        Box::new(move |g, _| {
            let dx = Tensor::from_fn(&in_shape, |i| {
                g.at(&[i[0], i[1], i[2] / scale, i[3] / scale]) * inv
            });
            vec![Some(dx)]
        }),
    )
}

/// Replicates every cell into a `factor x factor` block.
pub fn nearest_upsample<T: Scalar>(x: &Var<T>, factor: usize) -> Result<Var<T>> {
    const OP: &str = "nearest_upsample";
    let [n, c, h, w] = x.value().dims4(OP)?;
    if factor == 0 {
        return Err(arg_err(OP, "factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.value().data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            let row = &xd[(plane * h + oy / factor) * w..][..w];
            out.extend((0..ow).map(|ox| row[ox / factor]));
        }
    }
    Tape::record(
        OP,
        Tensor::new(&[n, c, oh, ow], out)?,
        &[x],
        Box::new(move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                for oy in 0..oh {
                    let grow = &gd[(plane * oh + oy) * ow..][..ow];
                    let drow = &mut dx[(plane * h + oy / factor) * w..][..w];
                    for (ox, &gv) in grow.iter().enumerate() {
                        drow[ox / factor] += gv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }),
    )
}

/// Mean over the spatial axes, `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_avg_pool<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    const OP: &str = "global_avg_pool";
    let [n, c, h, w] = x.value().dims4(OP)?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).expect("fits");
    let out: Vec<T> = x
        .value()
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tape::record(
        OP,
        Tensor::new(&[n, c, 1, 1], out)?,
        &[x],
        Box::new(move |g, _| {
            let d: Vec<T> = g
                .data()
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(gv * inv, hw))
                .collect();
            vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
        }),
    )
}

fn shuffle_index(c: usize, r: usize, h: usize, w: usize) -> Vec<usize> {
    // For each output element (row-major over [C, H*r, W*r]) the input offset
    // within one sample of shape [C*r*r, H, W].
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let ch = ci * r * r + (y % r) * r + (x % r);
                idx.push((ch * h + y / r) * w + x / r);
            }
        }
    }
    idx
}

/// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]` with
/// `out[n,c,h*r+i,w*r+j] = in[n, c*r*r + i*r + j, h, w]`.
pub fn pixel_shuffle<T: Scalar>(x: &Var<T>, r: usize) -> Result<Var<T>> {
    const OP: &str = "pixel_shuffle";
    let [n, cr, h, w] = x.value().dims4(OP)?;
    if r == 0 {
        return Err(arg_err(OP, "factor must be >= 1"));
    }
    if cr % (r * r) != 0 {
        return Err(TensorError::NotDivisible { op: OP, dim: "channels", value: cr, divisor: r * r });
    }
    let c = cr / (r * r);
    let idx = shuffle_index(c, r, h, w);
    let per = cr * h * w;
    let xd = x.value().data();
    let out: Vec<T> = (0..n)
        .flat_map(|ni| idx.iter().map(move |&i| xd[ni * per + i]))
        .collect();
    let in_shape = x.shape().to_vec();
    Tape::record(
        OP,
        Tensor::new(&[n, c, h * r, w * r], out)?,
        &[x],
        Box::new(move |g, _| {
            let mut dx = vec![T::zero(); n * per];
            for ni in 0..n {
                for (&i, &gv) in idx.iter().zip(&g.data()[ni * per..(ni + 1) * per]) {
                    dx[ni * per + i] = gv;
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }),
    )
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Var<T>, r: usize) -> Result<Var<T>> {
    const OP: &str = "pixel_unshuffle";
    let [n, c, oh, ow] = x.value().dims4(OP)?;
    check_divisible(OP, oh, ow, r)?;
    let (h, w) = (oh / r, ow / r);
    let idx = shuffle_index(c, r, h, w);
    let per = c * oh * ow;
    let mut out = vec![T::zero(); n * per];
    let xd = x.value().data();
    for ni in 0..n {
        for (k, &i) in idx.iter().enumerate() {
            out[ni * per + i] = xd[ni * per + k];
        }
    }
    Tape::record(
        OP,
        Tensor::new(&[n, c * r * r, h, w], out)?,
        &[x],
        Box::new(move |g, _| {
            let gd = g.data();
            let d: Vec<T> = (0..n)
                .flat_map(|ni| idx.iter().map(move |&i| gd[ni * per + i]))
                .collect();
            vec![Some(Tensor::from_parts(vec![n, c, oh, ow], d))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(t: Tensor<f64>) -> Var<f64> {
        Tape::new().leaf(t, true)
    }

    #[test]
    fn max_pool_definition_and_identity() {
        let x = var(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(max_pool2d(&x, 2).unwrap().value().data(), &[4.0]);
        assert_eq!(max_pool2d(&x, 1).unwrap().value(), x.value());
        assert!(matches!(
            max_pool2d(&var(Tensor::ones(&[1, 1, 3, 4])), 2),
            Err(TensorError::NotDivisible { dim: "height", .. })
        ));
    }

    #[test]
    fn max_pool_tie_goes_to_first_index() {
        let x = var(Tensor::from_f64(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 1.0]).unwrap());
        let y = max_pool2d(&x, 2).unwrap();
        crate::ops::sum(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn padded_window_keeps_shape() {
        let x = var(Tensor::from_fn(&[1, 2, 5, 7], |i| (i[2] * 7 + i[3]) as f64));
        let y = max_pool2d_window(&x, 3, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 5, 7]);
        assert_eq!(y.value().at(&[0, 0, 0, 0]), 8.0);
        assert_eq!(y.value().at(&[0, 1, 4, 6]), 34.0);
    }

    #[test]
    fn upsample_definition() {
        let x = var(Tensor::from_f64(&[1, 1, 1, 1], &[4.0]).unwrap());
        assert_eq!(nearest_upsample(&x, 2).unwrap().value().data(), &[4.0; 4]);
        let y = var(Tensor::from_fn(&[1, 2, 2, 3], |i| i[3] as f64));
        assert_eq!(nearest_upsample(&y, 1).unwrap().value(), y.value());
    }

    #[test]
    fn pixel_shuffle_constant_channels() {
        let x = var(Tensor::from_fn(&[1, 4, 2, 2], |i| i[1] as f64));
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        for by in 0..2 {
            for bx in 0..2 {
                let block: Vec<f64> = (0..2)
                    .flat_map(|i| (0..2).map(move |j| (i, j)))
                    .map(|(i, j)| y.value().at(&[0, 0, by * 2 + i, bx * 2 + j]))
                    .collect();
                assert_eq!(block, vec![0.0, 1.0, 2.0, 3.0]);
            }
        }
        assert!(pixel_shuffle(&var(Tensor::ones(&[1, 6, 2, 2])), 2).is_err());
    }

    #[test]
    fn gap_of_constant() {
        let x = var(Tensor::full(&[2, 3, 4, 5], 1.25));
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!(y.value().data().iter().all(|&v| v == 1.25));
    }
}
