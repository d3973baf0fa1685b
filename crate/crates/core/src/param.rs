//! Named parameter storage, per-step binding to a tape, and checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::io::{read_bkt, write_bkt};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter tensor, used by the trainable-parameter audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamTag {
    Weight,
    Bias,
    Norm,
}

impl std::str::FromStr for ParamTag {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(ParamTag::Weight),
            "bias" => Ok(ParamTag::Bias),
            "norm" => Ok(ParamTag::Norm),
            other => Err(TensorError::InvalidArgument {
                op: "param tag",
                detail: format!("unknown tag `{other}` (expected weight, bias or norm)"),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    pub tag: ParamTag,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, tag: ParamTag) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable: true,
            tag,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        self.entries[id.0].value.expect_same_shape(&value, "param set")?;
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Sets `trainable` on every parameter whose name satisfies `pred`.
    pub fn set_trainable_where(&mut self, trainable: bool, pred: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            if pred(&e.name) {
                e.trainable = trainable;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count of the parameters matching `pred`.
    pub fn count(&self, pred: impl Fn(&ParamEntry<T>) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.value.numel()).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Binding<T> {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), e.trainable))
                .collect(),
        }
    }

    /// SHA-256 over names and value bits of the parameters matching `pred`.
    pub fn checksum(&self, pred: impl Fn(&ParamEntry<T>) -> bool) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| pred(e)) {
            h.update(e.name.as_bytes());
            for &v in e.value.data() {
                h.update(v.bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes one BKT1 file per parameter plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| TensorError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut manifest = Manifest {
            format: "BKT1".into(),
            params: Vec::with_capacity(self.entries.len()),
        };
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("{i:04}.bkt");
            write_bkt(&dir.join(&file), &e.value)?;
            manifest.params.push(ManifestEntry {
                name: e.name.clone(),
                file,
                shape: e.value.shape().to_vec(),
                dtype: T::DTYPE.name().into(),
                trainable: e.trainable,
                tag: e.tag,
            });
        }
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|source| TensorError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Loads values saved by [`ParamStore::save`] into parameters of the same
    /// name. Every registered parameter must be present with a matching shape.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|source| TensorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        for e in &mut self.entries {
            let m = manifest
                .params
                .iter()
                .find(|m| m.name == e.name)
                .ok_or_else(|| TensorError::UnknownParam(e.name.clone()))?;
            let t: Tensor<T> = read_bkt(&dir.join(&m.file))?;
            e.value.expect_same_shape(&t, "checkpoint load")?;
            e.value = t;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    dtype: String,
    trainable: bool,
    tag: ParamTag,
}

/// Parameters of one store registered on one tape.
pub struct Binding<T> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Binding<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    /// Substitutes the leaf of one parameter, e.g. to differentiate with
    /// respect to it in isolation.
    pub fn replace(&mut self, id: ParamId, var: Var<T>) {
        self.vars[id.0] = var;
    }

    /// Gradients after backward, in store order. `None` for frozen
    /// parameters and parameters that did not reach the loss.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::<f32>::new();
        let w = a.add("conv.weight", Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), ParamTag::Weight);
        a.add("conv.bias", Tensor::full(&[2], -0.5), ParamTag::Bias);
        a.save(dir.path()).unwrap();

        let mut b = ParamStore::<f32>::new();
        b.add("conv.weight", Tensor::zeros(&[2, 2]), ParamTag::Weight);
        b.add("conv.bias", Tensor::zeros(&[2]), ParamTag::Bias);
        b.load(dir.path()).unwrap();
        assert_eq!(b.value(w), a.value(w));
        assert_eq!(a.checksum(|_| true), b.checksum(|_| true));

        let mut c = ParamStore::<f32>::new();
        c.add("other", Tensor::zeros(&[1]), ParamTag::Weight);
        assert!(matches!(c.load(dir.path()), Err(TensorError::UnknownParam(_))));
    }

    #[test]
    fn frozen_params_bind_without_grad() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::ones(&[2]), ParamTag::Weight);
        let b = s.add("b", Tensor::ones(&[2]), ParamTag::Weight);
        s.set_trainable(b, false);
        let tape = Tape::new();
        let bind = s.bind(&tape);
        let y = crate::ops::sum(&crate::ops::mul(bind.var(a), bind.var(b)).unwrap()).unwrap();
        y.backward().unwrap();
        let g = bind.grads();
        assert!(g[0].is_some() && g[1].is_none());
    }

    #[test]
    fn unknown_tag_is_an_error() {
        assert!("norm".parse::<ParamTag>().is_ok());
        assert!("scale".parse::<ParamTag>().is_err());
    }
}
