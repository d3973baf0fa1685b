//! Trainable-parameter accounting for the fine-tuning schemes.

use std::fmt;
use std::str::FromStr;

use baris_core::{ParamStore, ParamTag, Scalar, TensorError};
use serde_json::json;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Full,
    Era,
    Bitfit,
    NormOnly,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Full, Scheme::Era, Scheme::Bitfit, Scheme::NormOnly];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Full => "full",
            Scheme::Era => "era",
            Scheme::Bitfit => "bitfit",
            Scheme::NormOnly => "norm_only",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, TensorError> {
        Scheme::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| TensorError::InvalidArgument {
            op: "scheme",
            detail: format!("unknown scheme `{s}` (expected full, era, bitfit or norm_only)"),
        })
    }
}

/// One parameter tensor of a backbone or adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: ParamTag,
}

impl ParamDesc {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Descriptors of every tensor in `store` whose name satisfies `pred`.
pub fn describe<T: Scalar>(store: &ParamStore<T>, pred: impl Fn(&str) -> bool) -> Vec<ParamDesc> {
    store
        .entries()
        .iter()
        .filter(|e| pred(&e.name))
        .map(|e| ParamDesc {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            tag: e.tag,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub trainable: f64,
    pub total: f64,
}

impl Budget {
    /// Trainable share of the backbone-plus-adapters universe.
    pub fn fraction(&self) -> f64 {
        self.trainable / self.total
    }
}

/// Counts trainable parameters. Adapters only join the universe under the
/// `era` scheme, where they are the only trainable tensors.
pub fn count_params(scheme: Scheme, backbone: &[ParamDesc], adapters: &[ParamDesc]) -> Budget {
    let sum = |ps: &[ParamDesc], pred: &dyn Fn(&ParamDesc) -> bool| -> usize {
        ps.iter().filter(|p| pred(p)).map(ParamDesc::numel).sum()
    };
    let backbone_total = sum(backbone, &|_| true);
    let (trainable, total) = match scheme {
        Scheme::Full => (backbone_total, backbone_total),
        Scheme::Era => {
            let a = sum(adapters, &|_| true);
            (a, backbone_total + a)
        }
        Scheme::Bitfit => (sum(backbone, &|p| p.tag == ParamTag::Bias), backbone_total),
        Scheme::NormOnly => (sum(backbone, &|p| p.tag == ParamTag::Norm), backbone_total),
    };
    Budget {
        trainable: trainable as f64,
        total: total as f64,
    }
}

/// Stored trainable counts, in millions, for a Swin-B backbone: the full
/// backbone and the adapter, bias and norm subsets. The backbone itself is
/// not available, so these are reference records, not recomputed.
pub mod swin_b {
    pub const FULL_M: f64 = 86.75;
    pub const ERA_M: f64 = 4.25;
    pub const BITFIT_M: f64 = 0.20;
    pub const NORM_M: f64 = 0.06;
}

pub fn swin_b_reference(scheme: Scheme) -> Budget {
    let m = 1e6;
    let (trainable, total) = match scheme {
        Scheme::Full => (swin_b::FULL_M, swin_b::FULL_M),
        Scheme::Era => (swin_b::ERA_M, swin_b::FULL_M + swin_b::ERA_M),
        Scheme::Bitfit => (swin_b::BITFIT_M, swin_b::FULL_M),
        Scheme::NormOnly => (swin_b::NORM_M, swin_b::FULL_M),
    };
    Budget {
        trainable: trainable * m,
        total: total * m,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub scheme: Scheme,
    pub budget: Budget,
}

/// Tab-separated table with a header line.
pub fn render_tsv(rows: &[AuditRow]) -> String {
    let mut out = String::from("scheme\ttrainable\ttotal\tfraction\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.0}\t{:.0}\t{:.4}%\n",
            r.scheme,
            r.budget.trainable,
            r.budget.total,
            100.0 * r.budget.fraction()
        ));
    }
    out
}

pub fn render_json(rows: &[AuditRow]) -> serde_json::Value {
    json!(rows
        .iter()
        .map(|r| json!({
            "scheme": r.scheme.name(),
            "trainable": r.budget.trainable,
            "total": r.budget.total,
            "fraction": r.budget.fraction(),
        }))
        .collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(name: &str, shape: &[usize], tag: ParamTag) -> ParamDesc {
        ParamDesc {
            name: name.into(),
            shape: shape.to_vec(),
            tag,
        }
    }

    #[test]
    fn schemes_select_by_tag() {
        let backbone = [
            desc("conv.weight", &[4, 3, 3, 3], ParamTag::Weight),
            desc("conv.bias", &[4], ParamTag::Bias),
            desc("norm.gamma", &[4], ParamTag::Norm),
            desc("norm.beta", &[4], ParamTag::Norm),
        ];
        let adapters = [desc("era.up.weight", &[4, 2], ParamTag::Weight)];
        let full = count_params(Scheme::Full, &backbone, &adapters);
        assert_eq!((full.trainable, full.total, full.fraction()), (120.0, 120.0, 1.0));
        let era = count_params(Scheme::Era, &backbone, &adapters);
        assert_eq!((era.trainable, era.total), (8.0, 128.0));
        assert_eq!(count_params(Scheme::Bitfit, &backbone, &adapters).trainable, 4.0);
        assert_eq!(count_params(Scheme::NormOnly, &backbone, &adapters).trainable, 8.0);
    }

    #[test]
    fn reference_rows() {
        let pct = |s| 100.0 * swin_b_reference(s).fraction();
        assert!((pct(Scheme::Era) - 4.67).abs() < 0.01);
        assert_eq!(pct(Scheme::Full), 100.0);
        assert!((pct(Scheme::Bitfit) - 0.23).abs() < 0.01);
        assert!((pct(Scheme::NormOnly) - 0.07).abs() < 0.01);
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("lora".parse::<Scheme>().is_err());
    }
}
