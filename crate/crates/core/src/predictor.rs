//! Query-conditioned forecasting head and the squared-error objective.

use mmists_autodiff::{Axis, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamBuilder};

/// One forecasting query in model space: variable, timestamp, normalized target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPoint {
    pub var: usize,
    pub q: f64,
    pub target: f64,
}

/// `MLP([H_final[n] || q])` with one ReLU hidden layer.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub hidden: Linear,
    pub out: Linear,
}

impl Predictor {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Result<Self> {
        let mut s = b.scope("predictor");
        Ok(Self {
            hidden: Linear::new(&mut s, "hidden", dim + 1, hidden, true)?,
            out: Linear::new(&mut s, "out", hidden, 1, true)?,
        })
    }

    /// Predictions for `queries` as a `Q x 1` column.
    pub fn forward(&self, g: &mut Graph<'_>, h_final: Var, queries: &[QueryPoint]) -> Result<Var> {
        if queries.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        let [n, _] = g.shape(h_final);
        let mut pick = vec![0.0; queries.len() * n];
        for (i, q) in queries.iter().enumerate() {
            if q.var >= n {
                return Err(Error::DimensionMismatch(format!("query for variable {} but N = {n}", q.var)));
            }
            pick[i * n + q.var] = 1.0;
        }
        let pick = g.constant(Tensor::new(queries.len(), n, pick)?)?;
        let rows = g.matmul(pick, h_final)?;
        let times = g.constant(Tensor::column(queries.iter().map(|q| q.q).collect()))?;
        let x = g.concat(&[rows, times], Axis::Cols)?;
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, h)
    }
}

/// `sum (pred - target)^2 / denominator` as a scalar node.
pub fn squared_error(g: &mut Graph<'_>, predictions: Var, targets: &[f64], denominator: f64) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let t = g.constant(Tensor::column(targets.to_vec()))?;
    let d = g.sub(predictions, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 1.0 / denominator)?)
}

/// Mean squared error over all queries.
pub fn mse_loss(g: &mut Graph<'_>, predictions: Var, targets: &[f64]) -> Result<Var> {
    squared_error(g, predictions, targets, targets.len() as f64)
}
