use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

use super::attention::{LayerNorm, SingleTokenAttention};
use super::botania::{BotaniaDims, BotaniaMlp, COVER_INPUT_SCALE};
use super::checkpoint::Checkpoint;
use super::layers::{Layer, Linear, Sequential};
use super::{GradientTape, ParamView, ParamViewMut, Parameterized};

pub const MLP_DROPOUT: f64 = 0.1;
pub const ATTENTION_HEADS: usize = 4;

/// Tabular-branch architecture (the image branch follows from it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Botania encoder plus linear adapters on both branches.
    BotaniaLinear,
    /// Two-layer MLPs on both branches.
    Mlp,
    /// MLP image branch; attention block on the tabular branch.
    Attention,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "botania-linear" | "botania" => Ok(Variant::BotaniaLinear),
            "mlp" => Ok(Variant::Mlp),
            "attention" => Ok(Variant::Attention),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::BotaniaLinear => "botania-linear",
            Variant::Mlp => "mlp",
            Variant::Attention => "attention",
        })
    }
}

/// Hidden widths of the MLP/attention ablation encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpVariantDims {
    pub tab_hidden: usize,
    pub img_hidden: usize,
}

impl Default for MlpVariantDims {
    fn default() -> Self {
        Self {
            tab_hidden: 1024,
            img_hidden: 2600,
        }
    }
}

/// Image branch: frozen embedding → adapter → unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTower {
    net: Sequential,
}

impl ImageTower {
    /// Identity-initialized square adapter.
    pub fn linear(dim: usize, noise_variance: f64, rng: &mut Rng) -> Self {
        Self {
            net: Sequential::new(vec![
                Layer::Linear(Linear::identity_init("img.adapter", dim, noise_variance, rng)),
                Layer::L2Normalize,
            ]),
        }
    }

    pub fn mlp(img_dim: usize, hidden: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        Self {
            net: Sequential::new(vec![
                Layer::Linear(Linear::default_init("img.fc1", img_dim, hidden, rng)),
                Layer::Relu,
                Layer::Dropout(MLP_DROPOUT),
                Layer::Linear(Linear::default_init("img.fc2", hidden, embed_dim, rng)),
                Layer::L2Normalize,
            ]),
        }
    }

    /// Rebuilds the tower from its parameter blocks (`img.*`).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut rng = Rng::new(0);
        let mut tower = if let Some(w) = ckpt.get("img.adapter.weight") {
            let d = dims2(&w.dims, "img.adapter.weight")?;
            Self::linear(d.1, 0.0, &mut rng)
        } else if let (Some(w1), Some(w2)) = (ckpt.get("img.fc1.weight"), ckpt.get("img.fc2.weight")) {
            let (h, d) = dims2(&w1.dims, "img.fc1.weight")?;
            let (e, _) = dims2(&w2.dims, "img.fc2.weight")?;
            Self::mlp(d, h, e, &mut rng)
        } else {
            return Err(Error::Config("checkpoint holds no image adapter".into()));
        };
        tower.load_from(ckpt)?;
        Ok(tower)
    }

    pub fn in_dim(&self) -> usize {
        first_linear(&self.net).in_dim()
    }

    pub fn out_dim(&self) -> usize {
        last_linear(&self.net).out_dim()
    }

    pub fn forward(&mut self, x: &Matrix, rng: Option<&mut Rng>) -> Result<Matrix> {
        self.net.forward(x, rng)
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.net.infer(x)
    }

    /// Parameter gradients only: image embeddings are frozen inputs.
    pub fn backward(&mut self, upstream: &Matrix, tape: &mut GradientTape) -> Result<()> {
        self.net.backward_params(upstream, tape)
    }

    /// Input gradient as well (used by gradient checks).
    pub fn backward_with_input(&mut self, upstream: &Matrix, tape: &mut GradientTape) -> Result<Matrix> {
        self.net.backward(upstream, tape)
    }
}

impl Parameterized for ImageTower {
    fn params(&self) -> Vec<ParamView<'_>> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        self.net.params_mut()
    }
}

/// Tabular branch: species-cover vector → unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub enum TabTower {
    Botania {
        botania: BotaniaMlp,
        adapter: Sequential,
    },
    Mlp(Sequential),
    Attention(Sequential),
}

impl TabTower {
    pub fn botania(botania_dims: BotaniaDims, embed_dim: usize, rng: &mut Rng) -> Self {
        let botania = BotaniaMlp::new("tab.botania", botania_dims, rng);
        let adapter = Sequential::new(vec![
            Layer::Linear(Linear::default_init("tab.adapter", botania_dims.hidden2, embed_dim, rng)),
            Layer::L2Normalize,
        ]);
        TabTower::Botania { botania, adapter }
    }

    pub fn mlp(tab_dim: usize, hidden: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        TabTower::Mlp(Sequential::new(vec![
            Layer::Scale(COVER_INPUT_SCALE),
            Layer::Linear(Linear::default_init("tab.fc1", tab_dim, hidden, rng)),
            Layer::Relu,
            Layer::Dropout(MLP_DROPOUT),
            Layer::Linear(Linear::default_init("tab.fc2", hidden, embed_dim, rng)),
            Layer::L2Normalize,
        ]))
    }

    /// Linear reduction, LayerNorm, residual 4-head attention, LayerNorm,
    /// ReLU, dropout, projection.
    pub fn attention(tab_dim: usize, hidden: usize, embed_dim: usize, rng: &mut Rng) -> Result<Self> {
        let reduce = Linear::default_init("tab.reduce", tab_dim, hidden, rng);
        let mha = SingleTokenAttention::new("tab.mha", hidden, ATTENTION_HEADS, rng)?;
        let out = Linear::default_init("tab.out", hidden, embed_dim, rng);
        Ok(TabTower::Attention(Sequential::new(vec![
            Layer::Scale(COVER_INPUT_SCALE),
            Layer::Linear(reduce),
            Layer::LayerNorm(LayerNorm::new("tab.ln1", hidden)),
            Layer::ResidualAttention(mha),
            Layer::LayerNorm(LayerNorm::new("tab.ln2", hidden)),
            Layer::Relu,
            Layer::Dropout(MLP_DROPOUT),
            Layer::Linear(out),
            Layer::L2Normalize,
        ])))
    }

    pub fn variant(&self) -> Variant {
        match self {
            TabTower::Botania { .. } => Variant::BotaniaLinear,
            TabTower::Mlp(_) => Variant::Mlp,
            TabTower::Attention(_) => Variant::Attention,
        }
    }

    pub fn forward(&mut self, cover: &Matrix, mut rng: Option<&mut Rng>) -> Result<Matrix> {
        match self {
            TabTower::Botania { botania, adapter } => {
                let penult = botania.forward_penult(cover, rng.as_deref_mut())?;
                adapter.forward(&penult, rng)
            }
            TabTower::Mlp(net) | TabTower::Attention(net) => net.forward(cover, rng),
        }
    }

    pub fn infer(&self, cover: &Matrix) -> Result<Matrix> {
        match self {
            TabTower::Botania { botania, adapter } => adapter.infer(&botania.infer_penult(cover)?),
            TabTower::Mlp(net) | TabTower::Attention(net) => net.infer(cover),
        }
    }

    pub fn backward(&mut self, upstream: &Matrix, tape: &mut GradientTape) -> Result<()> {
        match self {
            TabTower::Botania { botania, adapter } => {
                let d_penult = adapter.backward(upstream, tape)?;
                botania.backward_params(None, Some(&d_penult), tape)
            }
            TabTower::Mlp(net) | TabTower::Attention(net) => net.backward_params(upstream, tape),
        }
    }

    pub fn backward_with_input(&mut self, upstream: &Matrix, tape: &mut GradientTape) -> Result<Matrix> {
        match self {
            TabTower::Botania { botania, adapter } => {
                let d_penult = adapter.backward(upstream, tape)?;
                botania.backward(None, Some(&d_penult), tape)
            }
            TabTower::Mlp(net) | TabTower::Attention(net) => net.backward(upstream, tape),
        }
    }

    /// Rebuilds the tower from its parameter blocks (`tab.*`).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut rng = Rng::new(0);
        let mut tower = if let Some(w1) = ckpt.get("tab.botania.l1.weight") {
            let (h1, input) = dims2(&w1.dims, "tab.botania.l1.weight")?;
            let (h2, _) = dims2(&block(ckpt, "tab.botania.l2.weight")?.dims, "l2")?;
            let (classes, _) = dims2(&block(ckpt, "tab.botania.head.weight")?.dims, "head")?;
            let (embed, _) = dims2(&block(ckpt, "tab.adapter.weight")?.dims, "adapter")?;
            let dims = BotaniaDims {
                input,
                hidden1: h1,
                hidden2: h2,
                classes,
            };
            Self::botania(dims, embed, &mut rng)
        } else if let Some(w1) = ckpt.get("tab.fc1.weight") {
            let (h, d) = dims2(&w1.dims, "tab.fc1.weight")?;
            let (e, _) = dims2(&block(ckpt, "tab.fc2.weight")?.dims, "tab.fc2.weight")?;
            Self::mlp(d, h, e, &mut rng)
        } else if let Some(w1) = ckpt.get("tab.reduce.weight") {
            let (h, d) = dims2(&w1.dims, "tab.reduce.weight")?;
            let (e, _) = dims2(&block(ckpt, "tab.out.weight")?.dims, "tab.out.weight")?;
            Self::attention(d, h, e, &mut rng)?
        } else {
            return Err(Error::Config("checkpoint holds no tabular encoder".into()));
        };
        tower.load_from(ckpt)?;
        Ok(tower)
    }
}

impl Parameterized for TabTower {
    fn params(&self) -> Vec<ParamView<'_>> {
        match self {
            TabTower::Botania { botania, adapter } => {
                let mut p = botania.params();
                p.extend(adapter.params());
                p
            }
            TabTower::Mlp(net) | TabTower::Attention(net) => net.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        match self {
            TabTower::Botania { botania, adapter } => {
                let mut p = botania.params_mut();
                p.extend(adapter.params_mut());
                p
            }
            TabTower::Mlp(net) | TabTower::Attention(net) => net.params_mut(),
        }
    }
}

fn block<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a super::ParamBlock> {
    ckpt.get(name)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name:?}")))
}

fn dims2(dims: &[usize], name: &str) -> Result<(usize, usize)> {
    match dims {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch(format!("{name} should be 2-D, has dims {dims:?}"))),
    }
}

fn first_linear(net: &Sequential) -> &Linear {
    net.layers()
        .iter()
        .find_map(|l| match l {
            Layer::Linear(lin) => Some(lin),
            _ => None,
        })
        .expect("towers always contain a linear layer")
}

fn last_linear(net: &Sequential) -> &Linear {
    net.layers()
        .iter()
        .rev()
        .find_map(|l| match l {
            Layer::Linear(lin) => Some(lin),
            _ => None,
        })
        .expect("towers always contain a linear layer")
}
