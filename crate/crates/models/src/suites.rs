//! Finite-difference suites for the decoder, adapter and loss, in the same
//! format as the tensor primitive suite.

use std::str::FromStr;

use baris_core::rng::{uniform, StreamRng};
use baris_core::suite::{distinct, tensor_suite, CheckRunner, SuiteCheck};
use baris_core::{ParamId, ParamStore, Result, Tensor, TensorError, Var};

use crate::bace::{bace_loss, total_loss, BaceConfig, Pool};
use crate::decoder::{Decoder, DecoderConfig, FeaturePyramid};
use crate::era::{Era, EraConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteModule {
    All,
    Tensor,
    Decoder,
    Era,
    Bace,
}

impl FromStr for SuiteModule {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => SuiteModule::All,
            "tensor" => SuiteModule::Tensor,
            "decoder" => SuiteModule::Decoder,
            "era" => SuiteModule::Era,
            "bace" => SuiteModule::Bace,
            other => {
                return Err(TensorError::InvalidArgument {
                    op: "grad-check module",
                    detail: format!("unknown module `{other}` (expected all, tensor, decoder, era or bace)"),
                })
            }
        })
    }
}

pub fn run_suite(module: SuiteModule, seed: u64) -> Result<Vec<SuiteCheck>> {
    let prefixed = |name: &str, checks: Vec<SuiteCheck>| {
        checks
            .into_iter()
            .map(|mut c| {
                c.name = format!("{name}/{}", c.name);
                c
            })
            .collect::<Vec<_>>()
    };
    let mut out = Vec::new();
    if matches!(module, SuiteModule::All | SuiteModule::Tensor) {
        out.extend(prefixed("tensor", tensor_suite(seed)?));
    }
    if matches!(module, SuiteModule::All | SuiteModule::Decoder) {
        out.extend(prefixed("decoder", decoder_suite(seed)?));
    }
    if matches!(module, SuiteModule::All | SuiteModule::Era) {
        out.extend(prefixed("era", era_suite(seed)?));
    }
    if matches!(module, SuiteModule::All | SuiteModule::Bace) {
        out.extend(prefixed("bace", bace_suite(seed)?));
    }
    Ok(out)
}

/// Redraws every `.weight` tensor from a variance-preserving uniform
/// distribution. The default init shrinks signals by about `1/sqrt(3)` per
/// layer, which leaves some input gradients of deep stacks below the
/// roundoff floor of central differences.
fn rescale_weights(store: &mut ParamStore<f64>, rng: &mut impl rand::Rng) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let entry = store.entry(id);
        if !entry.name.ends_with(".weight") {
            continue;
        }
        let shape = entry.value.shape().to_vec();
        let fan_in: usize = shape[1..].iter().product();
        let bound = (3.0 / fan_in as f64).sqrt();
        store.set(id, uniform(rng, &shape, -bound, bound))?;
    }
    Ok(())
}

/// Checks every parameter of `store` by substituting it with the probe.
fn check_params<F>(c: &mut CheckRunner, prefix: &str, store: &ParamStore<f64>, forward: F) -> Result<()>
where
    F: Fn(&baris_core::Binding<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let entry = store.entry(id);
        let name = format!("{prefix}{}", entry.name);
        let value = entry.value.clone();
        let spread = value.max_abs().max(0.1);
        let draw = |rng: &mut StreamRng, attempt: usize| {
            if attempt == 0 {
                value.clone()
            } else {
                uniform(rng, value.shape(), -spread, spread)
            }
        };
        c.check_drawn(&name, draw, |v| {
            let mut p = store.bind(v.tape());
            p.replace(id, v.clone());
            forward(&p, v)
        })?;
    }
    Ok(())
}

/// Input gradients of a three-block `C = 4` decoder on an 8x8 pyramid, and
/// every parameter gradient of a one-block decoder.
pub fn decoder_suite(seed: u64) -> Result<Vec<SuiteCheck>> {
    let mut c = CheckRunner::new(seed, "gradcheck/decoder");
    let ch = 4;
    let side = 8;
    let levels: Vec<Tensor<f64>> = (0..4).map(|k| c.rand(&[1, ch, side >> k, side >> k])).collect();

    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &mut c.rng, "dec", DecoderConfig::new(ch, 1))?;
    rescale_weights(&mut store, &mut c.rng)?;
    for k in 0..4 {
        let first = levels[k].clone();
        let draw = |rng: &mut StreamRng, attempt: usize| {
            if attempt == 0 {
                first.clone()
            } else {
                uniform(rng, first.shape(), -1.0, 1.0)
            }
        };
        c.check_drawn(&format!("input/f{}", k + 1), draw, |v| {
            let t = v.tape();
            let lv: [Var<f64>; 4] = std::array::from_fn(|j| if j == k { v.clone() } else { t.constant(levels[j].clone()) });
            dec.forward(&store.bind(t), &FeaturePyramid::new(lv)?)
        })?;
    }

    // Parameters: one block at C = 8. With C = 4 the layer norms act on
    // four values per pixel, whose variance is occasionally small enough to
    // make the loss sharply curved in single weights.
    let wide = 8;
    let wide_levels: Vec<Tensor<f64>> = (0..4).map(|k| c.rand(&[1, wide, side >> k, side >> k])).collect();
    let mut small = ParamStore::new();
    let mut cfg = DecoderConfig::new(wide, 1);
    cfg.num_refine_blocks = 1;
    let dec1 = Decoder::new(&mut small, &mut c.rng, "dec", cfg)?;
    rescale_weights(&mut small, &mut c.rng)?;
    check_params(&mut c, "param/", &small, |p, v| {
        let t = v.tape();
        dec1.forward(p, &FeaturePyramid::new(std::array::from_fn(|j| t.constant(wide_levels[j].clone())))?)
    })?;
    Ok(c.results)
}

/// Input and parameter gradients of an adapter with `C = 8` on 4x4 maps.
/// Weights are redrawn, which also lifts the zero up-projection so
/// gradients reach every parameter.
pub fn era_suite(seed: u64) -> Result<Vec<SuiteCheck>> {
    let mut c = CheckRunner::new(seed, "gradcheck/era");
    let mut store = ParamStore::new();
    let era = Era::new(&mut store, &mut c.rng, "era", EraConfig::new(8).with_envs(4))?;
    rescale_weights(&mut store, &mut c.rng)?;
    store.set(era.up.bias, uniform(&mut c.rng, &[8], -0.5, 0.5))?;
    let x = c.rand(&[2, 8, 4, 4]).scale(2.0);
    let draw = |rng: &mut StreamRng, attempt: usize| {
        if attempt == 0 {
            x.clone()
        } else {
            uniform(rng, x.shape(), -2.0, 2.0)
        }
    };
    c.check_drawn("input", draw, |v| era.forward(&store.bind(v.tape()), v))?;
    check_params(&mut c, "param/", &store, |p, v| era.forward(p, &v.tape().constant(x.clone())))?;
    Ok(c.results)
}

/// The boundary loss and the combined loss with respect to the logits, on
/// inputs whose pooling blocks have no near-ties.
pub fn bace_suite(seed: u64) -> Result<Vec<SuiteCheck>> {
    let mut c = CheckRunner::new(seed, "gradcheck/bace");
    let gt_small = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i[2] * 3 + i[3] * 5 + seed as usize) % 3 == 0) as u8 as f64);
    for s in [1, 2, 4] {
        for pool in [Pool::Max, Pool::Avg] {
            let x = distinct(&mut c.rng, &[1, 1, 4, 4], 0.3);
            let cfg = BaceConfig { scale: s, pool, ..Default::default() };
            c.check_scalar(&format!("bace/s{s}/{}", pool.name()), x, |v| bace_loss(v, &gt_small, &cfg))?;
        }
    }
    let gt = Tensor::from_fn(&[3, 1, 8, 8], |i| ((i[0] + i[2] / 3 + i[3] / 2) % 2) as f64);
    let weight = uniform(&mut c.rng, &[3, 1, 8, 8], 0.5, 2.0);
    let x = distinct(&mut c.rng, &[3, 1, 8, 8], 0.02);
    let cfg = BaceConfig { scale: 4, class_weight: Some(weight), ..Default::default() };
    c.check_scalar("bace/s4/weighted", x, |v| bace_loss(v, &gt, &cfg))?;
    let x = distinct(&mut c.rng, &[3, 1, 8, 8], 0.02);
    let cfg = BaceConfig { scale: 2, lambda: 1.0, ..Default::default() };
    c.check_scalar("total/s2", x, |v| total_loss(v, &gt, &cfg))?;
    let x = distinct(&mut c.rng, &[3, 1, 8, 8], 0.02);
    let cfg = BaceConfig::default();
    c.check_scalar("total/s4", x, |v| total_loss(v, &gt, &cfg))?;
    Ok(c.results)
}
