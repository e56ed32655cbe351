use crate::error::{Error, Result};
use crate::numerics::{gelu, gelu_grad, l2_normalize_rows_with_norms, Matrix, Rng};

use super::attention::{LayerNorm, LayerNormCache, SingleTokenAttention};
use super::{GradientTape, ParamView, ParamViewMut, Parameterized};

/// Affine map `y = x·Wᵀ + b` with `W` stored as `out_dim × in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    name: String,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// The image/tabular adapters are plain linear layers.
pub type LinearAdapter = Linear;

impl Linear {
    pub fn new(name: impl Into<String>, weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::ShapeMismatch(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            name: name.into(),
            weight,
            bias,
        })
    }

    /// `W = I + N(0, noise_variance)` elementwise, `b = 0`.
    pub fn identity_init(name: impl Into<String>, dim: usize, noise_variance: f64, rng: &mut Rng) -> Self {
        assert!(noise_variance >= 0.0, "noise variance must be non-negative");
        let sd = noise_variance.sqrt();
        let mut weight = Matrix::identity(dim);
        if sd > 0.0 {
            for w in weight.data_mut() {
                *w += sd * rng.normal();
            }
        }
        Self {
            name: name.into(),
            weight,
            bias: vec![0.0; dim],
        }
    }

    /// Uniform `±1/√in_dim` for weights and bias, the usual default for
    /// freshly constructed linear layers.
    pub fn default_init(name: impl Into<String>, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| rng.uniform_range(-bound, bound));
        let bias = (0..out_dim).map(|_| rng.uniform_range(-bound, bound)).collect();
        Self {
            name: name.into(),
            weight,
            bias,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{}: input has {} columns, layer expects {}",
                self.name,
                x.cols(),
                self.in_dim()
            )));
        }
        let mut out = x.matmul_t(&self.weight)?;
        out.add_row_broadcast(&self.bias)?;
        Ok(out)
    }

    /// Accumulates `dW = gᵀx`, `db = Σ_rows g` and returns `dx = g·W` when asked.
    pub(crate) fn backward(
        &self,
        input: &Matrix,
        upstream: &Matrix,
        tape: &mut GradientTape,
        need_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        let dw = upstream.t_matmul(input)?;
        tape.accumulate(&format!("{}.weight", self.name), dw.data());
        tape.accumulate(&format!("{}.bias", self.name), &upstream.column_sums());
        if need_input_grad {
            Ok(Some(upstream.matmul(&self.weight)?))
        } else {
            Ok(None)
        }
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: format!("{}.weight", self.name),
                dims: vec![self.weight.rows(), self.weight.cols()],
                values: self.weight.data(),
            },
            ParamView {
                name: format!("{}.bias", self.name),
                dims: vec![self.bias.len()],
                values: &self.bias,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let dims = vec![self.weight.rows(), self.weight.cols()];
        let blen = self.bias.len();
        vec![
            ParamViewMut {
                name: format!("{}.weight", self.name),
                dims,
                values: self.weight.data_mut(),
            },
            ParamViewMut {
                name: format!("{}.bias", self.name),
                dims: vec![blen],
                values: &mut self.bias,
            },
        ]
    }
}

/// One stage of a [`Sequential`] stack.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(Linear),
    /// Multiplication by a fixed constant.
    Scale(f64),
    Gelu,
    Relu,
    /// Inverted dropout with the given drop probability.
    Dropout(f64),
    LayerNorm(LayerNorm),
    /// `x + attention(x)` over a single-token sequence.
    ResidualAttention(SingleTokenAttention),
    L2Normalize,
}

#[derive(Clone, Debug)]
enum Cache {
    Input(Matrix),
    /// Per-entry dropout scale (0 or 1/(1-p)); `None` when the pass was in eval mode.
    Mask(Option<Vec<f64>>),
    Norm(LayerNormCache),
    Attention { input: Matrix, values: Matrix },
    Normalized { output: Matrix, norms: Vec<f64> },
    Stateless,
}

impl Layer {
    fn forward(&self, x: &Matrix, rng: Option<&mut Rng>) -> Result<(Matrix, Cache)> {
        Ok(match self {
            Layer::Linear(l) => (l.apply(x)?, Cache::Input(x.clone())),
            Layer::Scale(c) => (x.scale(*c), Cache::Stateless),
            Layer::Gelu => (x.map(gelu), Cache::Input(x.clone())),
            Layer::Relu => (x.map(|v| v.max(0.0)), Cache::Input(x.clone())),
            Layer::Dropout(p) => match rng {
                Some(rng) if *p > 0.0 => {
                    let keep = 1.0 - p;
                    let mask: Vec<f64> = (0..x.data().len())
                        .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mut out = x.clone();
                    for (o, m) in out.data_mut().iter_mut().zip(&mask) {
                        *o *= m;
                    }
                    (out, Cache::Mask(Some(mask)))
                }
                _ => (x.clone(), Cache::Mask(None)),
            },
            Layer::LayerNorm(ln) => {
                let (out, cache) = ln.forward(x)?;
                (out, Cache::Norm(cache))
            }
            Layer::ResidualAttention(att) => {
                let (att_out, values) = att.forward(x)?;
                (x.add(&att_out)?, Cache::Attention { input: x.clone(), values })
            }
            Layer::L2Normalize => {
                let (output, norms) = l2_normalize_rows_with_norms(x)?;
                (output.clone(), Cache::Normalized { output, norms })
            }
        })
    }

    fn backward(
        &self,
        cache: &Cache,
        g: &Matrix,
        tape: &mut GradientTape,
        need_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        let dx = match (self, cache) {
            (Layer::Linear(l), Cache::Input(x)) => return l.backward(x, g, tape, need_input_grad),
            (Layer::Scale(_), _) if !need_input_grad => return Ok(None),
            (Layer::Scale(c), Cache::Stateless) => g.scale(*c),
            (Layer::Gelu, Cache::Input(x)) => g.zip_map(x, |gi, xi| gi * gelu_grad(xi))?,
            (Layer::Relu, Cache::Input(x)) => {
                g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })?
            }
            (Layer::Dropout(_), Cache::Mask(mask)) => match mask {
                Some(mask) => {
                    let mut dx = g.clone();
                    for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    dx
                }
                None => g.clone(),
            },
            (Layer::LayerNorm(ln), Cache::Norm(c)) => ln.backward(c, g, tape)?,
            (Layer::ResidualAttention(att), Cache::Attention { input, values }) => {
                let d_att = att.backward(input, values, g, tape)?;
                g.add(&d_att)?
            }
            (Layer::L2Normalize, Cache::Normalized { output, norms }) => {
                // y = x/‖x‖  ⇒  dx = (g − y(y·g)) / ‖x‖
                let mut dx = g.clone();
                for i in 0..dx.rows() {
                    let y = output.row(i);
                    let proj = crate::numerics::dot(y, g.row(i));
                    for (d, yi) in dx.row_mut(i).iter_mut().zip(y) {
                        *d = (*d - yi * proj) / norms[i];
                    }
                }
                dx
            }
            _ => unreachable!("layer/cache kinds always match"),
        };
        Ok(Some(dx))
    }

    fn params(&self) -> Vec<ParamView<'_>> {
        match self {
            Layer::Linear(l) => l.params(),
            Layer::LayerNorm(ln) => ln.params(),
            Layer::ResidualAttention(a) => a.params(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        match self {
            Layer::Linear(l) => l.params_mut(),
            Layer::LayerNorm(ln) => ln.params_mut(),
            Layer::ResidualAttention(a) => a.params_mut(),
            _ => Vec::new(),
        }
    }
}

/// A stack of layers run in order, caching intermediates for one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    layers: Vec<Layer>,
    caches: Option<Vec<Cache>>,
}

impl PartialEq for Sequential {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self {
            layers,
            caches: None,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Forward pass that keeps intermediates for [`backward`](Self::backward).
    /// `rng = None` runs in eval mode (dropout off).
    pub fn forward(&mut self, x: &Matrix, mut rng: Option<&mut Rng>) -> Result<Matrix> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&h, rng.as_deref_mut())?;
            caches.push(cache);
            h = out;
        }
        self.caches = Some(caches);
        Ok(h)
    }

    /// Eval-mode forward pass without caching.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, None)?.0;
        }
        Ok(h)
    }

    /// Reverse pass over the cached forward; returns `∂loss/∂input`.
    pub fn backward(&mut self, upstream: &Matrix, tape: &mut GradientTape) -> Result<Matrix> {
        Ok(self
            .backward_inner(upstream, tape, true)?
            .expect("input gradient requested"))
    }

    /// Reverse pass that skips the input gradient of the first layer.
    pub fn backward_params(&mut self, upstream: &Matrix, tape: &mut GradientTape) -> Result<()> {
        self.backward_inner(upstream, tape, false).map(|_| ())
    }

    fn backward_inner(
        &mut self,
        upstream: &Matrix,
        tape: &mut GradientTape,
        need_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        let caches = self
            .caches
            .take()
            .ok_or(Error::MissingForwardCache("sequential"))?;
        let mut g = upstream.clone();
        let first_trainable = self.layers.iter().position(|l| !l.params().is_empty());
        for (idx, (layer, cache)) in self.layers.iter().zip(&caches).enumerate().rev() {
            let need = need_input_grad || first_trainable.is_some_and(|f| idx > f);
            match layer.backward(cache, &g, tape, need)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    pub fn has_cache(&self) -> bool {
        self.caches.is_some()
    }
}

impl Parameterized for Sequential {
    fn params(&self) -> Vec<ParamView<'_>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }
}
