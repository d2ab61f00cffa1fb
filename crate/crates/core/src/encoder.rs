//! Numerical branch: multi-view embedding, per-variable temporal encoder,
//! mask-aware aggregation and the cross-variable encoder.

use mmists_autodiff::{Axis, Graph, ParamId, Tensor, Var};

use crate::data::CanonicalSample;
use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub n_vars: usize,
    pub dim: usize,
    pub heads: usize,
    pub temporal_layers: usize,
    pub variable_layers: usize,
}

#[derive(Clone, Debug)]
pub struct IstsEncoder {
    pub dims: EncoderDims,
    /// `1 x D` frequencies.
    pub omega: ParamId,
    /// `1 x D` phases.
    pub beta: ParamId,
    /// `N x D` variable tokens.
    pub var_embedding: ParamId,
    /// `2 x D` projection of `[x, m]`.
    pub value_weight: ParamId,
    pub value_bias: ParamId,
    pub temporal: Vec<EncoderLayer>,
    pub variable: Vec<EncoderLayer>,
}

/// How padded positions enter the temporal encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Only the variable token and observed prefix are materialized.
    Trimmed,
    /// All `L + 1` rows are built; padded rows are masked out as keys and in
    /// the aggregation.
    Masked,
}

pub struct EncoderOutput {
    /// `N x D`.
    pub h_ists: Var,
    /// Every attention probability matrix produced on the way.
    pub attention: Vec<Var>,
}

/// Geometric frequency ladder `1 / 10^(4d/D)`.
pub fn default_frequencies(dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| 1.0 / 10f64.powf(4.0 * d as f64 / dim as f64))
        .collect()
}

impl IstsEncoder {
    pub fn new(b: &mut ParamBuilder<'_>, dims: EncoderDims) -> Result<Self> {
        if dims.n_vars == 0 || dims.dim == 0 {
            return Err(Error::InvalidConfig("encoder needs N >= 1 and D >= 1".into()));
        }
        let d = dims.dim;
        let mut s = b.scope("ists");
        let omega = s.tensor("omega", Tensor::row(default_frequencies(d)))?;
        let beta = s.zeros("beta", 1, d)?;
        let var_embedding = s.normal("var_embedding", dims.n_vars, d, 0.02)?;
        let value_weight = s.uniform("value.weight", 2, d, 2)?;
        let value_bias = s.zeros("value.bias", 1, d)?;
        let temporal = (0..dims.temporal_layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("temporal.{i}"), d, dims.heads))
            .collect::<Result<_>>()?;
        let variable = (0..dims.variable_layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("variable.{i}"), d, dims.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            dims,
            omega,
            beta,
            var_embedding,
            value_weight,
            value_bias,
            temporal,
            variable,
        })
    }

    /// `phi(t)` for a column of timestamps: column 0 is `omega_0 t + beta_0`,
    /// the rest `sin(omega_d t + beta_d)`.
    pub fn phi(&self, g: &mut Graph<'_>, times: Var) -> Result<Var> {
        let omega = g.param(self.omega)?;
        let beta = g.param(self.beta)?;
        let lin = g.matmul(times, omega)?;
        let lin = g.add_row(lin, beta)?;
        let d = self.dims.dim;
        if d == 1 {
            return Ok(lin);
        }
        let first = g.slice(lin, Axis::Cols, 0, 1)?;
        let rest = g.slice(lin, Axis::Cols, 1, d - 1)?;
        let rest = g.sin(rest)?;
        Ok(g.concat(&[first, rest], Axis::Cols)?)
    }

    /// `Z_n` and its extended mask. Timestamps and values at padded positions
    /// are replaced by literal zeros before they touch the graph.
    pub fn fuse_embeddings(
        &self,
        g: &mut Graph<'_>,
        canonical: &CanonicalSample,
        n: usize,
        padding: Padding,
    ) -> Result<(Var, Vec<bool>)> {
        let rows = match padding {
            Padding::Trimmed => canonical.observed_count(n),
            Padding::Masked => canonical.len,
        };
        let mut times = Vec::with_capacity(rows);
        let mut mask = Vec::with_capacity(rows);
        let mut xm = Vec::with_capacity(2 * rows);
        for l in 0..rows {
            let m = canonical.observed(n, l);
            let (t, x) = if m {
                (canonical.time(n, l), canonical.value(n, l))
            } else {
                (0.0, 0.0)
            };
            times.push(t);
            mask.push(if m { 1.0 } else { 0.0 });
            xm.extend([x, if m { 1.0 } else { 0.0 }]);
        }
        let evar = g.param(self.var_embedding)?;
        let token = g.slice(evar, Axis::Rows, n, 1)?;
        let mut keep = Vec::with_capacity(rows + 1);
        keep.push(true);
        if rows == 0 {
            return Ok((token, keep));
        }
        keep.extend(mask.iter().map(|m| *m == 1.0));
        let t = g.constant(Tensor::column(times))?;
        let phi = self.phi(g, t)?;
        let m = g.constant(Tensor::column(mask))?;
        let gated = g.mul_col(phi, m)?;
        let xm = g.constant(Tensor::new(rows, 2, xm)?)?;
        let wv = g.param(self.value_weight)?;
        let bv = g.param(self.value_bias)?;
        let val = g.matmul(xm, wv)?;
        let val = g.add_row(val, bv)?;
        let z = g.add(gated, val)?;
        Ok((g.concat(&[token, z], Axis::Rows)?, keep))
    }

    /// Temporal layers over one variable; padded positions never act as keys.
    pub fn temporal_encode(&self, g: &mut Graph<'_>, z: Var, keep: &[bool], attention: &mut Vec<Var>) -> Result<Var> {
        if keep.first() != Some(&true) {
            return Err(Error::AllMasked(0));
        }
        let all = keep.iter().all(|k| *k);
        let mut h = z;
        for layer in &self.temporal {
            let out = layer.forward(g, h, if all { None } else { Some(keep) })?;
            attention.extend(out.probs);
            h = out.out;
        }
        Ok(h)
    }

    /// Mean of the rows flagged in `keep`.
    pub fn aggregate(&self, g: &mut Graph<'_>, h: Var, keep: &[bool]) -> Result<Var> {
        let w: Vec<f64> = keep.iter().map(|k| if *k { 1.0 } else { 0.0 }).collect();
        Ok(g.masked_mean_rows(h, &w)?)
    }

    /// Stacks `h_n`, adds `E_var`, and runs the unmasked variable layers.
    pub fn variable_encode(&self, g: &mut Graph<'_>, rows: &[Var], attention: &mut Vec<Var>) -> Result<Var> {
        let stacked = if rows.len() == 1 { rows[0] } else { g.concat(rows, Axis::Rows)? };
        let evar = g.param(self.var_embedding)?;
        let mut h = g.add(stacked, evar)?;
        for layer in &self.variable {
            let out = layer.forward(g, h, None)?;
            attention.extend(out.probs);
            h = out.out;
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph<'_>, canonical: &CanonicalSample, padding: Padding) -> Result<EncoderOutput> {
        if canonical.n_vars != self.dims.n_vars {
            return Err(Error::DimensionMismatch(format!(
                "encoder built for {} variables, sample has {}",
                self.dims.n_vars, canonical.n_vars
            )));
        }
        let mut attention = Vec::new();
        let mut pooled = Vec::with_capacity(canonical.n_vars);
        for n in 0..canonical.n_vars {
            let (z, keep) = self.fuse_embeddings(g, canonical, n, padding)?;
            let h = self.temporal_encode(g, z, &keep, &mut attention)?;
            pooled.push(self.aggregate(g, h, &keep)?);
        }
        let h_ists = self.variable_encode(g, &pooled, &mut attention)?;
        Ok(EncoderOutput { h_ists, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{canonicalize, Observation, Sample, VariableSeries};
    use mmists_autodiff::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(layers: usize) -> EncoderDims {
        EncoderDims {
            n_vars: 3,
            dim: 8,
            heads: 2,
            temporal_layers: layers,
            variable_layers: layers,
        }
    }

    fn build(layers: usize) -> (ParamStore, IstsEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = IstsEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng), dims(layers)).unwrap();
        (store, enc)
    }

    fn sample() -> CanonicalSample {
        let s = Sample {
            id: "a".into(),
            series: vec![
                VariableSeries {
                    var_index: 0,
                    observations: vec![Observation { t: 0.1, x: 1.0 }, Observation { t: 0.3, x: -2.0 }, Observation { t: 0.7, x: 0.5 }],
                },
                VariableSeries {
                    var_index: 1,
                    observations: vec![],
                },
                VariableSeries {
                    var_index: 2,
                    observations: vec![Observation { t: 0.2, x: 3.0 }],
                },
            ],
            queries: vec![],
        };
        canonicalize(&s, 6).unwrap()
    }

    #[test]
    fn phi_at_zero_is_phase() {
        let (mut store, enc) = build(0);
        *store.value_mut(enc.beta) = Tensor::row((0..8).map(|d| d as f64 * 0.3).collect());
        let mut g = Graph::with_params(&store);
        let t = g.constant(Tensor::column(vec![0.0, 2.0])).unwrap();
        let p = enc.phi(&mut g, t).unwrap();
        let v = g.value(p);
        assert_eq!(v.get(0, 0), 0.0);
        for d in 1..8 {
            assert_eq!(v.get(0, d), (d as f64 * 0.3).sin());
        }
        assert_eq!(v.get(1, 0), 2.0);
    }

    #[test]
    fn masked_positions_reduce_to_bias() {
        let (mut store, enc) = build(0);
        *store.value_mut(enc.value_bias) = Tensor::row((0..8).map(|d| d as f64 - 3.5).collect());
        let c = sample();
        let mut g = Graph::with_params(&store);
        let (z, keep) = enc.fuse_embeddings(&mut g, &c, 0, Padding::Masked).unwrap();
        assert_eq!(keep, vec![true, true, true, true, false, false, false]);
        let zv = g.value(z);
        assert_eq!(zv.shape(), [7, 8]);
        assert_eq!(zv.row_slice(0), store.value(enc.var_embedding).row_slice(0));
        assert_eq!(zv.row_slice(5), store.value(enc.value_bias).row_slice(0));

        let omega = store.value(enc.omega).data();
        let w = store.value(enc.value_weight);
        let b = store.value(enc.value_bias).data();
        for (l, (t, x)) in [(0.1, 1.0), (0.3, -2.0), (0.7, 0.5)].into_iter().enumerate() {
            for d in 0..8 {
                let arg = omega[d] * t;
                let phi = if d == 0 { arg } else { arg.sin() };
                let want = phi + (x * w.get(0, d) + w.get(1, d) + b[d]);
                assert!((zv.get(l + 1, d) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_matches_loop() {
        let (store, enc) = build(0);
        let mut g = Graph::with_params(&store);
        let h = Tensor::new(4, 8, (0..32).map(|i| (i as f64).cos()).collect()).unwrap();
        let hv = g.constant(h.clone()).unwrap();
        let keep = [true, false, true, true];
        let a = enc.aggregate(&mut g, hv, &keep).unwrap();
        for d in 0..8 {
            let want = (h.get(0, d) + h.get(2, d) + h.get(3, d)) / 3.0;
            assert!((g.value(a).get(0, d) - want).abs() < 1e-15);
        }
        let only = enc.aggregate(&mut g, hv, &[true, false, false, false]).unwrap();
        assert_eq!(g.value(only).row_slice(0), h.row_slice(0));
    }

    #[test]
    fn trimmed_equals_masked() {
        let (store, enc) = build(2);
        let c = sample();
        let mut g = Graph::with_params(&store);
        let a = enc.forward(&mut g, &c, Padding::Trimmed).unwrap().h_ists;
        let b = enc.forward(&mut g, &c, Padding::Masked).unwrap().h_ists;
        assert_eq!(g.value(a).shape(), [3, 8]);
        assert_eq!(g.value(a).max_abs_diff(g.value(b)), 0.0);
    }

    #[test]
    fn padded_noise_does_not_move_valid_rows() {
        let (store, enc) = build(2);
        let c = sample();
        let mut noisy = c.clone();
        for l in 3..6 {
            noisy.times[l] = 17.0 + l as f64;
        }
        // noise in T/X at masked slots bypasses the canonical invariant on purpose
        noisy.values[4] = -9.0;
        let run = |c: &CanonicalSample| {
            let mut g = Graph::with_params(&store);
            let (z, keep) = enc.fuse_embeddings(&mut g, c, 0, Padding::Masked).unwrap();
            let h = enc.temporal_encode(&mut g, z, &keep, &mut Vec::new()).unwrap();
            g.value(h).clone()
        };
        let (a, b) = (run(&c), run(&noisy));
        for r in 0..4 {
            assert_eq!(a.row_slice(r), b.row_slice(r));
        }
    }

    #[test]
    fn variable_encoder_is_permutation_equivariant() {
        let (store, enc) = build(1);
        let perm = [2usize, 0, 1];
        let rows: Vec<Tensor> = (0..3)
            .map(|n| Tensor::row((0..8).map(|d| ((n * 8 + d) as f64 * 0.7).sin()).collect()))
            .collect();

        let mut g = Graph::with_params(&store);
        let vars: Vec<Var> = rows.iter().map(|r| g.constant(r.clone()).unwrap()).collect();
        let base = enc.variable_encode(&mut g, &vars, &mut Vec::new()).unwrap();
        let base = g.value(base).clone();

        let mut permuted = store.clone();
        let evar = store.value(enc.var_embedding);
        let p = Tensor::from_rows(&perm.iter().map(|&i| evar.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        *permuted.value_mut(enc.var_embedding) = p;
        let mut g = Graph::with_params(&permuted);
        let vars: Vec<Var> = perm.iter().map(|&i| g.constant(rows[i].clone()).unwrap()).collect();
        let out = enc.variable_encode(&mut g, &vars, &mut Vec::new()).unwrap();
        let out = g.value(out);
        for (r, &i) in perm.iter().enumerate() {
            for d in 0..8 {
                assert!((out.get(r, d) - base.get(i, d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phi_time_derivative() {
        let (mut store, enc) = build(0);
        *store.value_mut(enc.beta) = Tensor::row((0..8).map(|d| 0.1 * d as f64).collect());
        let t0 = 0.37;
        let eval = |t: f64, d: usize| {
            let mut g = Graph::with_params(&store);
            let tv = g.input(Tensor::column(vec![t])).unwrap();
            let p = enc.phi(&mut g, tv).unwrap();
            let c = g.slice(p, Axis::Cols, d, 1).unwrap();
            let grad = g.backward(c).unwrap().input(tv).unwrap().item().unwrap();
            (g.value(c).item().unwrap(), grad)
        };
        let omega = store.value(enc.omega).data().to_vec();
        for d in 1..8 {
            let (_, analytic) = eval(t0, d);
            let want = omega[d] * (omega[d] * t0 + 0.1 * d as f64).cos();
            let eps = 1e-5;
            let numeric = (eval(t0 + eps, d).0 - eval(t0 - eps, d).0) / (2.0 * eps);
            assert!((analytic - want).abs() < 1e-12);
            assert!(mmists_autodiff::relative_error(analytic, numeric) < 1e-6);
        }
    }
}
