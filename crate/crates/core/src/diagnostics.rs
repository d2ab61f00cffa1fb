//! Per-sample alignment dump: fusion attention and gating weights next to
//! each variable's missing rate.

use std::fs;
use std::path::Path;

use mmists_autodiff::Graph;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;
use crate::pipeline::PreparedSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub var: usize,
    /// Missing rate of the variable in the raw history.
    pub rho: f64,
    /// Absent for strategies without gating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_mm: Option<f64>,
}

/// One head's attention, `rows x cols`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl HeadAttention {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDump {
    pub sample_id: String,
    pub variant: String,
    pub gates: Vec<GateRow>,
    pub attention: Vec<HeadAttention>,
}

pub fn dump_alignment(model: &Model, sample: &PreparedSample) -> Result<AlignmentDump> {
    let mut g = Graph::with_params(&model.store);
    let out = model.forward(&mut g, sample)?;
    let gates = out.gates.map(|v| g.value(v).clone());
    let rows = sample
        .stats
        .iter()
        .enumerate()
        .map(|(n, s)| GateRow {
            var: n,
            rho: s[2],
            alpha_mm: gates.as_ref().map(|a| a.get(n, 1)),
        })
        .collect();
    let attention = out
        .fusion_attention
        .iter()
        .enumerate()
        .map(|(head, &v)| {
            let t = g.value(v);
            HeadAttention {
                head,
                rows: t.rows(),
                cols: t.cols(),
                weights: t.data().to_vec(),
            }
        })
        .collect();
    Ok(AlignmentDump {
        sample_id: sample.id.clone(),
        variant: model.variant_name().to_string(),
        gates: rows,
        attention,
    })
}

pub fn write_dump(path: impl AsRef<Path>, dump: &AlignmentDump) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(dump)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::TinyInstance;
    use crate::variant::VariantRegistry;

    fn dump_for(name: &str) -> AlignmentDump {
        let reg = VariantRegistry::with_defaults();
        let v = reg.get(name).unwrap();
        let inst = TinyInstance::default();
        let sample = inst.sample(3, v.as_ref()).unwrap();
        let model = inst.model(3, v).unwrap();
        dump_alignment(&model, &sample).unwrap()
    }

    #[test]
    fn gated_dump_shape() {
        let d = dump_for("full");
        assert_eq!(d.gates.len(), 3);
        assert!(d.gates.iter().all(|r| r.alpha_mm.is_some_and(|a| (0.0..=1.0).contains(&a))));
        assert_eq!(d.attention.len(), 2);
        for h in &d.attention {
            assert_eq!((h.rows, h.cols), (3, 3));
            for r in 0..h.rows {
                assert!((h.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn additive_dump_has_no_alpha() {
        let d = dump_for("without-align");
        assert_eq!(d.gates.len(), 3);
        assert!(d.gates.iter().all(|r| r.alpha_mm.is_none()));
        let text = serde_json::to_string(&d).unwrap();
        assert!(!text.contains("alpha_mm"));
    }

    #[test]
    fn dump_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        write_dump(&a, &dump_for("full")).unwrap();
        write_dump(&b, &dump_for("full")).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
}
