//! Primitives against brute-force reference implementations.

use baris_core::ops::{self, Conv2dSpec, RoiBox};
use baris_core::rng::{stream, uniform};
use baris_core::suite::tensor_suite;
use baris_core::{grad_check, Tape, Tensor};
use proptest::prelude::*;

fn sliding_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], groups: usize, pad: (usize, usize)) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4("oracle").unwrap();
    let [o, cg, kh, kw] = w.dims4("oracle").unwrap();
    let oh = h + 2 * pad.0 - kh + 1;
    let ow = wd + 2 * pad.1 - kw + 1;
    let og = o / groups;
    assert_eq!(cg * groups, c);
    Tensor::from_fn(&[n, o, oh, ow], |i| {
        let (b, oc, y, xo) = (i[0], i[1], i[2], i[3]);
        let g = oc / og;
        let mut acc = bias[oc];
        for ci in 0..cg {
            for dy in 0..kh {
                for dx in 0..kw {
                    let yy = (y + dy) as isize - pad.0 as isize;
                    let xx = (xo + dx) as isize - pad.1 as isize;
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                        continue;
                    }
                    acc += w.at(&[oc, ci, dy, dx]) * x.at(&[b, g * cg + ci, yy as usize, xx as usize]);
                }
            }
        }
        acc
    })
}

fn block_max(x: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4("oracle").unwrap();
    Tensor::from_fn(&[n, c, h / s, w / s], |i| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..s {
            for dx in 0..s {
                m = m.max(x.at(&[i[0], i[1], i[2] * s + dy, i[3] * s + dx]));
            }
        }
        m
    })
}

fn eval(f: impl Fn(&baris_core::Var<f64>) -> baris_core::Result<baris_core::Var<f64>>, x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    f(&tape.constant(x.clone())).unwrap().value().clone()
}

#[test]
fn dsconv_matches_sliding_window() {
    let mut rng = stream(11, "dsconv");
    for (c, o, h, w) in [(1, 1, 1, 1), (2, 3, 5, 4), (3, 2, 8, 8), (4, 4, 7, 3)] {
        let x = uniform::<f64>(&mut rng, &[2, c, h, w], -1.0, 1.0);
        let dw = uniform::<f64>(&mut rng, &[c, 1, 3, 3], -1.0, 1.0);
        let db: Vec<f64> = (0..c).map(|i| i as f64 * 0.1).collect();
        let pw = uniform::<f64>(&mut rng, &[o, c, 1, 1], -1.0, 1.0);
        let pb: Vec<f64> = (0..o).map(|i| -(i as f64) * 0.2).collect();

        let tape = Tape::new();
        let mid = ops::conv2d(
            &tape.constant(x.clone()),
            &tape.constant(dw.clone()),
            Some(&tape.constant(Tensor::new(&[c], db.clone()).unwrap())),
            Conv2dSpec::same(3, 3).with_groups(c),
        )
        .unwrap();
        let got = ops::conv2d(
            &mid,
            &tape.constant(pw.clone()),
            Some(&tape.constant(Tensor::new(&[o], pb.clone()).unwrap())),
            Conv2dSpec::default(),
        )
        .unwrap();

        let want = sliding_conv(&sliding_conv(&x, &dw, &db, c, (1, 1)), &pw, &pb, 1, (0, 0));
        let err = got.value().sub(&want).unwrap().max_abs();
        assert!(err < 1e-12, "c={c} o={o} {h}x{w}: {err}");
    }
}

#[test]
fn dense_and_grouped_conv_match_sliding_window() {
    let mut rng = stream(12, "conv");
    for (c, o, groups, kh, kw) in [(4, 6, 2, 3, 3), (3, 3, 1, 5, 1), (6, 6, 3, 1, 7)] {
        let x = uniform::<f64>(&mut rng, &[1, c, 6, 7], -1.0, 1.0);
        let w = uniform::<f64>(&mut rng, &[o, c / groups, kh, kw], -1.0, 1.0);
        let b = vec![0.25; o];
        let tape = Tape::new();
        let got = ops::conv2d(
            &tape.constant(x.clone()),
            &tape.constant(w.clone()),
            Some(&tape.constant(Tensor::new(&[o], b.clone()).unwrap())),
            Conv2dSpec::same(kh, kw).with_groups(groups),
        )
        .unwrap();
        let want = sliding_conv(&x, &w, &b, groups, (kh / 2, kw / 2));
        assert!(got.value().sub(&want).unwrap().max_abs() < 1e-12);
    }
}

#[test]
fn upsample_is_adjoint_of_sum_pool() {
    let mut rng = stream(13, "adjoint");
    for f in [1, 2, 3] {
        let x = uniform::<f64>(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
        let y = uniform::<f64>(&mut rng, &[2, 3, 3 * f, 4 * f], -1.0, 1.0);
        let up = eval(|v| ops::nearest_upsample(v, f), &x);
        let pooled = Tensor::from_fn(&[2, 3, 3, 4], |i| {
            let mut s = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    s += y.at(&[i[0], i[1], i[2] * f + dy, i[3] * f + dx]);
                }
            }
            s
        });
        let lhs = up.dot(&y).unwrap();
        let rhs = x.dot(&pooled).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn roi_align_doubling_matches_separable_bilinear() {
    let mut rng = stream(14, "roi");
    let (h, w) = (4, 5);
    let x = uniform::<f64>(&mut rng, &[1, 2, h, w], -1.0, 1.0);
    let got = eval(|v| ops::roi_align(v, RoiBox::FULL, 2 * h, 2 * w), &x);
    // Half-pixel bilinear weights along one axis, edge-clamped.
    let weights = |n: usize, out: usize| -> Vec<Vec<f64>> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let t = src - lo as f64;
                let mut row = vec![0.0; n];
                row[lo] += 1.0 - t;
                row[hi] += t;
                row
            })
            .collect()
    };
    let (wy, wx) = (weights(h, 2 * h), weights(w, 2 * w));
    let want = Tensor::from_fn(&[1, 2, 2 * h, 2 * w], |i| {
        let mut s = 0.0;
        for yy in 0..h {
            for xx in 0..w {
                s += wy[i[2]][yy] * wx[i[3]][xx] * x.at(&[0, i[1], yy, xx]);
            }
        }
        s
    });
    assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
}

#[test]
fn pixel_unshuffle_inverts_shuffle() {
    let mut rng = stream(15, "shuffle");
    for r in [1, 2, 3] {
        let x = uniform::<f64>(&mut rng, &[2, 2 * r * r, 3, 2], -1.0, 1.0);
        let y = eval(|v| ops::pixel_unshuffle(&ops::pixel_shuffle(v, r)?, r), &x);
        assert!(y.bit_eq(&x));
        let s = eval(|v| ops::pixel_shuffle(v, r), &x);
        let direct = Tensor::from_fn(&[2, 2, 3 * r, 2 * r], |i| {
            let (c, h, w) = (i[1], i[2], i[3]);
            x.at(&[i[0], c * r * r + (h % r) * r + (w % r), h / r, w / r])
        });
        assert!(s.bit_eq(&direct));
    }
}

#[test]
fn branch_reuse_accumulates_gradients() {
    let mut rng = stream(16, "diamond");
    let x = uniform::<f64>(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let w = uniform::<f64>(&mut rng, &[3, 3, 3, 3], -0.5, 0.5);
    let report = grad_check(
        |v| {
            let t = v.tape();
            let a = ops::conv2d(v, &t.constant(w.clone()), None, Conv2dSpec::same(3, 3))?;
            let b = ops::gelu(v)?;
            let c = ops::mul(&a, &ops::add(&b, v)?)?;
            ops::sum(&c)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
}

#[test]
fn tensor_suite_passes_for_twenty_seeds() {
    for seed in 0..20 {
        for check in tensor_suite(seed).unwrap() {
            assert!(
                check.passed(),
                "seed {seed} {}: {:e} >= {:e}",
                check.name,
                check.max_rel_error,
                check.tolerance
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pool_upsample_pool_is_pool(seed in any::<u64>(), s in prop::sample::select(vec![1usize, 2, 4]), k in 1usize..3) {
        let mut rng = stream(seed, "pool");
        let x = uniform::<f64>(&mut rng, &[1, 2, 4 * k, 8], -1.0, 1.0);
        let once = eval(|v| ops::max_pool2d(v, s), &x);
        let thrice = eval(|v| ops::max_pool2d(&ops::nearest_upsample(&ops::max_pool2d(v, s)?, s)?, s), &x);
        prop_assert!(once.bit_eq(&thrice));
        prop_assert!(once.bit_eq(&block_max(&x, s)));
    }
}
