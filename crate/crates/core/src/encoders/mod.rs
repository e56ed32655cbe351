//! Encoder families with explicit forward caches and reverse-mode passes.
//!
//! Every trainable block exposes its parameters through [`Parameterized`] as
//! named, shaped views. Gradients land in a [`GradientTape`] under the same
//! names, which is what the optimizer and the checkpoint format key on.

mod attention;
mod botania;
mod botasp;
mod checkpoint;
mod layers;
mod towers;

use std::collections::BTreeMap;

pub use attention::{LayerNorm, SingleTokenAttention, LAYER_NORM_EPS};
pub use botania::{BotaniaDims, BotaniaMlp, BotaniaOutput, BOTANIA_DROPOUT, COVER_INPUT_SCALE};
pub use botasp::{BotaspModel, BotaspOutput, BOTASP_HIDDEN};
pub use checkpoint::{Checkpoint, ParamBlock};
pub(crate) use checkpoint::Reader as ByteReader;
pub use layers::{Layer, Linear, LinearAdapter, Sequential};
pub use towers::{
    ImageTower, MlpVariantDims, TabTower, Variant, ATTENTION_HEADS, MLP_DROPOUT,
};

use crate::error::{Error, Result};

/// Read-only view of one named parameter block.
pub struct ParamView<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: &'a [f64],
}

/// Mutable view of one named parameter block.
pub struct ParamViewMut<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: &'a mut [f64],
}

pub trait Parameterized {
    fn params(&self) -> Vec<ParamView<'_>>;
    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.values.len()).sum()
    }

    /// All parameters concatenated in `params()` order.
    fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.values.iter().copied())
            .collect()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "{} flat values for {total} parameters",
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.values.len();
            p.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Fills every parameter of `self` from the block of the same name in `ckpt`.
    fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for p in self.params_mut() {
            let block = ckpt
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {:?}", p.name)))?;
            if block.dims != p.dims {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {:?}: checkpoint dims {:?}, model dims {:?}",
                    p.name, block.dims, p.dims
                )));
            }
            p.values.copy_from_slice(&block.values);
        }
        Ok(())
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for p in self.params() {
            ckpt.push(ParamBlock {
                name: p.name,
                dims: p.dims,
                values: p.values.to_vec(),
            });
        }
        ckpt
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientTape {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `grad` into the entry for `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, grad: &[f64]) {
        match self.grads.get_mut(name) {
            Some(acc) => {
                assert_eq!(acc.len(), grad.len(), "gradient shape changed for {name}");
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            None => {
                self.grads.insert(name.to_owned(), grad.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Resets every entry to zero, keeping shapes.
    pub fn zero(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    /// Gradient of every parameter of `model`, flattened in `params()` order;
    /// parameters absent from the tape contribute zeros.
    pub fn flatten_for<P: Parameterized + ?Sized>(&self, model: &P) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.num_params());
        for p in model.params() {
            match self.get(&p.name) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, p.values.len())),
            }
        }
        out
    }
}
