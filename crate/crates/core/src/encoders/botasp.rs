use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

use super::layers::{Layer, Linear, Sequential};
use super::{Checkpoint, GradientTape, ParamView, ParamViewMut, Parameterized, BOTANIA_DROPOUT};

pub const BOTASP_HIDDEN: usize = 1536;

/// Supervised baseline: identity-initialized projection (ℓ₂-normalized),
/// a GELU hidden layer whose output is the exported feature, and a
/// per-species logit head behind dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct BotaspModel {
    projection: Sequential,
    hidden: Sequential,
    head: Sequential,
}

#[derive(Clone, Debug)]
pub struct BotaspOutput {
    pub projected: Matrix,
    pub logits: Matrix,
}

impl BotaspModel {
    pub fn new(in_dim: usize, hidden: usize, species: usize, noise_variance: f64, rng: &mut Rng) -> Self {
        Self {
            projection: Sequential::new(vec![
                Layer::Linear(Linear::identity_init("sp.proj", in_dim, noise_variance, rng)),
                Layer::L2Normalize,
            ]),
            hidden: Sequential::new(vec![
                Layer::Linear(Linear::default_init("sp.hidden", in_dim, hidden, rng)),
                Layer::Gelu,
            ]),
            head: Sequential::new(vec![
                Layer::Dropout(BOTANIA_DROPOUT),
                Layer::Linear(Linear::default_init("sp.head", hidden, species, rng)),
            ]),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let dims = |name: &str| -> Result<(usize, usize)> {
            match ckpt.get(name).map(|b| b.dims.as_slice()) {
                Some(&[o, i]) => Ok((o, i)),
                _ => Err(Error::Config(format!("checkpoint lacks 2-d block {name}"))),
            }
        };
        let (_, in_dim) = dims("sp.proj.weight")?;
        let (hidden, _) = dims("sp.hidden.weight")?;
        let (species, _) = dims("sp.head.weight")?;
        let mut m = Self::new(in_dim, hidden, species, 0.0, &mut Rng::new(0));
        m.load_from(ckpt)?;
        Ok(m)
    }

    pub fn forward(&mut self, x: &Matrix, mut rng: Option<&mut Rng>) -> Result<BotaspOutput> {
        let projected = self.projection.forward(x, rng.as_deref_mut())?;
        let h = self.hidden.forward(&projected, rng.as_deref_mut())?;
        let logits = self.head.forward(&h, rng)?;
        Ok(BotaspOutput { projected, logits })
    }

    pub fn infer(&self, x: &Matrix) -> Result<BotaspOutput> {
        let projected = self.projection.infer(x)?;
        let logits = self.head.infer(&self.hidden.infer(&projected)?)?;
        Ok(BotaspOutput { projected, logits })
    }

    /// Hidden-layer output (post-GELU, before the head's dropout).
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.hidden.infer(&self.projection.infer(x)?)
    }

    pub fn backward(&mut self, d_logits: &Matrix, d_projected: &Matrix, tape: &mut GradientTape) -> Result<()> {
        if !self.head.has_cache() {
            return Err(Error::MissingForwardCache("botasp"));
        }
        let dh = self.head.backward(d_logits, tape)?;
        let mut dz = self.hidden.backward(&dh, tape)?;
        dz.add_assign(d_projected)?;
        self.projection.backward_params(&dz, tape)
    }

    /// Like [`backward`](Self::backward) but also returns the input gradient.
    pub fn backward_with_input(
        &mut self,
        d_logits: &Matrix,
        d_projected: &Matrix,
        tape: &mut GradientTape,
    ) -> Result<Matrix> {
        if !self.head.has_cache() {
            return Err(Error::MissingForwardCache("botasp"));
        }
        let dh = self.head.backward(d_logits, tape)?;
        let mut dz = self.hidden.backward(&dh, tape)?;
        dz.add_assign(d_projected)?;
        self.projection.backward(&dz, tape)
    }
}

impl Parameterized for BotaspModel {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut p = self.projection.params();
        p.extend(self.hidden.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut p = self.projection.params_mut();
        p.extend(self.hidden.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}
