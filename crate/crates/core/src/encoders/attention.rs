use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

use super::layers::Linear;
use super::{GradientTape, ParamView, ParamViewMut, Parameterized};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with learnable scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    name: String,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn forward(&self, x: &Matrix) -> Result<(Matrix, LayerNormCache)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "{}: input has {} columns, expects {d}",
                self.name,
                x.cols()
            )));
        }
        let mut normalized = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            let nrow = normalized.row_mut(i);
            for (n, v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * is;
            }
            for ((o, n), (g, b)) in out
                .row_mut(i)
                .iter_mut()
                .zip(normalized.row(i))
                .zip(self.gamma.iter().zip(&self.beta))
            {
                *o = n * g + b;
            }
        }
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    pub(crate) fn backward(
        &self,
        cache: &LayerNormCache,
        g: &Matrix,
        tape: &mut GradientTape,
    ) -> Result<Matrix> {
        let d = self.dim();
        let xhat = &cache.normalized;
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut dx = Matrix::zeros(g.rows(), d);
        for i in 0..g.rows() {
            let gr = g.row(i);
            let xr = xhat.row(i);
            let mut dxhat = vec![0.0; d];
            for j in 0..d {
                dgamma[j] += gr[j] * xr[j];
                dbeta[j] += gr[j];
                dxhat[j] = gr[j] * self.gamma[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                *out = cache.inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
            }
        }
        tape.accumulate(&format!("{}.gamma", self.name), &dgamma);
        tape.accumulate(&format!("{}.beta", self.name), &dbeta);
        Ok(dx)
    }
}

impl Parameterized for LayerNorm {
    fn params(&self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: format!("{}.gamma", self.name),
                dims: vec![self.gamma.len()],
                values: &self.gamma,
            },
            ParamView {
                name: format!("{}.beta", self.name),
                dims: vec![self.beta.len()],
                values: &self.beta,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let d = self.gamma.len();
        vec![
            ParamViewMut {
                name: format!("{}.gamma", self.name),
                dims: vec![d],
                values: &mut self.gamma,
            },
            ParamViewMut {
                name: format!("{}.beta", self.name),
                dims: vec![d],
                values: &mut self.beta,
            },
        ]
    }
}

/// Multi-head self-attention applied to each sample as a one-token sequence.
///
/// Each head attends over exactly one key, so its softmax weight is 1 and its
/// output is that head's slice of the value projection. The block therefore
/// computes `W_O·(W_V·x + b_V) + b_O`; the query/key projections are carried
/// as parameters but receive zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleTokenAttention {
    name: String,
    heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl SingleTokenAttention {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "attention width {dim} not divisible into {heads} heads"
            )));
        }
        let name = name.into();
        let mut proj = |suffix: &str| Linear::default_init(format!("{name}.{suffix}"), dim, dim, rng);
        let (query, key, value, output) = (proj("q"), proj("k"), proj("v"), proj("o"));
        Ok(Self {
            name,
            heads,
            query,
            key,
            value,
            output,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.value.out_dim() / self.heads
    }

    /// Returns the attention output (without residual) and the value
    /// projection needed by the backward pass.
    pub(crate) fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        // softmax over a single key is identically 1: context == values
        let values = self.value.apply(x)?;
        let out = self.output.apply(&values)?;
        Ok((out, values))
    }

    pub(crate) fn backward(
        &self,
        input: &Matrix,
        values: &Matrix,
        g: &Matrix,
        tape: &mut GradientTape,
    ) -> Result<Matrix> {
        let d_values = self
            .output
            .backward(values, g, tape, true)?
            .expect("input gradient requested");
        let dx = self
            .value
            .backward(input, &d_values, tape, true)?
            .expect("input gradient requested");
        for lin in [&self.query, &self.key] {
            for p in lin.params() {
                tape.accumulate(&p.name, &vec![0.0; p.values.len()]);
            }
        }
        Ok(dx)
    }
}

impl Parameterized for SingleTokenAttention {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = self.query.params();
        out.extend(self.key.params());
        out.extend(self.value.params());
        out.extend(self.output.params());
        out
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = self.query.params_mut();
        out.extend(self.key.params_mut());
        out.extend(self.value.params_mut());
        out.extend(self.output.params_mut());
        out
    }
}
