use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

use super::layers::{Layer, Linear, Sequential};
use super::{Checkpoint, GradientTape, ParamView, ParamViewMut, Parameterized};

pub const BOTANIA_DROPOUT: f64 = 0.4;
/// Tabular encoders take percent cover and work on fractions.
pub const COVER_INPUT_SCALE: f64 = 0.01;

/// Layer widths of the Botania classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BotaniaDims {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub classes: usize,
}

impl Default for BotaniaDims {
    /// 3587 species → 1536 → 768 → 232 vegetation classes.
    fn default() -> Self {
        Self {
            input: 3587,
            hidden1: 1536,
            hidden2: 768,
            classes: 232,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BotaniaOutput {
    pub logits: Matrix,
    /// Unit-norm penultimate representation (post-GELU, before the head's dropout).
    pub penult: Matrix,
}

/// Species-cover classifier: `×0.01 → Linear → GELU → Dropout → Linear → GELU →
/// Dropout → Linear`, also exposing its normalized penultimate features.
#[derive(Clone, Debug, PartialEq)]
pub struct BotaniaMlp {
    dims: BotaniaDims,
    trunk: Sequential,
    penult_norm: Sequential,
    head: Sequential,
}

impl BotaniaMlp {
    pub fn new(prefix: &str, dims: BotaniaDims, rng: &mut Rng) -> Self {
        let trunk = Sequential::new(vec![
            Layer::Scale(COVER_INPUT_SCALE),
            Layer::Linear(Linear::default_init(format!("{prefix}.l1"), dims.input, dims.hidden1, rng)),
            Layer::Gelu,
            Layer::Dropout(BOTANIA_DROPOUT),
            Layer::Linear(Linear::default_init(format!("{prefix}.l2"), dims.hidden1, dims.hidden2, rng)),
            Layer::Gelu,
        ]);
        let head = Sequential::new(vec![
            Layer::Dropout(BOTANIA_DROPOUT),
            Layer::Linear(Linear::default_init(format!("{prefix}.head"), dims.hidden2, dims.classes, rng)),
        ]);
        Self {
            dims,
            trunk,
            penult_norm: Sequential::new(vec![Layer::L2Normalize]),
            head,
        }
    }

    /// Rebuilds a classifier saved under `{prefix}.l1/.l2/.head`.
    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let dims = |layer: &str| -> Result<(usize, usize)> {
            let name = format!("{prefix}.{layer}.weight");
            match ckpt.get(&name).map(|b| b.dims.as_slice()) {
                Some(&[o, i]) => Ok((o, i)),
                _ => Err(Error::Config(format!("checkpoint lacks 2-d block {name}"))),
            }
        };
        let (hidden1, input) = dims("l1")?;
        let (hidden2, _) = dims("l2")?;
        let (classes, _) = dims("head")?;
        let dims = BotaniaDims {
            input,
            hidden1,
            hidden2,
            classes,
        };
        let mut m = Self::new(prefix, dims, &mut Rng::new(0));
        m.load_from(ckpt)?;
        Ok(m)
    }

    pub fn dims(&self) -> BotaniaDims {
        self.dims
    }

    /// Full forward pass with caches; `rng = None` is eval mode.
    pub fn forward(&mut self, cover: &Matrix, mut rng: Option<&mut Rng>) -> Result<BotaniaOutput> {
        let h = self.trunk.forward(cover, rng.as_deref_mut())?;
        let penult = self.penult_norm.forward(&h, None)?;
        let logits = self.head.forward(&h, rng)?;
        Ok(BotaniaOutput { logits, penult })
    }

    /// Forward pass for the logits only, as used when training the classifier.
    pub fn forward_logits(&mut self, cover: &Matrix, mut rng: Option<&mut Rng>) -> Result<Matrix> {
        let h = self.trunk.forward(cover, rng.as_deref_mut())?;
        self.head.forward(&h, rng)
    }

    /// Forward pass for the penultimate features only; the head is skipped.
    pub fn forward_penult(&mut self, cover: &Matrix, rng: Option<&mut Rng>) -> Result<Matrix> {
        let h = self.trunk.forward(cover, rng)?;
        self.penult_norm.forward(&h, None)
    }

    pub fn infer(&self, cover: &Matrix) -> Result<BotaniaOutput> {
        let h = self.trunk.infer(cover)?;
        Ok(BotaniaOutput {
            penult: self.penult_norm.infer(&h)?,
            logits: self.head.infer(&h)?,
        })
    }

    /// Class logits only; unlike [`infer`](Self::infer) this never fails on
    /// a penultimate row that is exactly zero.
    pub fn infer_logits(&self, cover: &Matrix) -> Result<Matrix> {
        self.head.infer(&self.trunk.infer(cover)?)
    }

    pub fn infer_penult(&self, cover: &Matrix) -> Result<Matrix> {
        self.penult_norm.infer(&self.trunk.infer(cover)?)
    }

    /// Backpropagates upstream gradients of either output; returns the
    /// gradient with respect to the cover input.
    pub fn backward(
        &mut self,
        d_logits: Option<&Matrix>,
        d_penult: Option<&Matrix>,
        tape: &mut GradientTape,
    ) -> Result<Matrix> {
        self.backward_inner(d_logits, d_penult, tape, true)
            .map(|g| g.expect("input gradient requested"))
    }

    pub fn backward_params(
        &mut self,
        d_logits: Option<&Matrix>,
        d_penult: Option<&Matrix>,
        tape: &mut GradientTape,
    ) -> Result<()> {
        self.backward_inner(d_logits, d_penult, tape, false).map(|_| ())
    }

    fn backward_inner(
        &mut self,
        d_logits: Option<&Matrix>,
        d_penult: Option<&Matrix>,
        tape: &mut GradientTape,
        need_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        if !self.trunk.has_cache() {
            return Err(Error::MissingForwardCache("botania"));
        }
        let mut dh: Option<Matrix> = None;
        if let Some(g) = d_logits {
            dh = Some(self.head.backward(g, tape)?);
        }
        if let Some(g) = d_penult {
            let d = self.penult_norm.backward(g, tape)?;
            dh = Some(match dh {
                Some(acc) => acc.add(&d)?,
                None => d,
            });
        }
        let dh = dh.ok_or_else(|| Error::InvalidArgument("botania backward needs an upstream gradient".into()))?;
        if need_input_grad {
            self.trunk.backward(&dh, tape).map(Some)
        } else {
            self.trunk.backward_params(&dh, tape).map(|_| None)
        }
    }
}

impl Parameterized for BotaniaMlp {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut p = self.trunk.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut p = self.trunk.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;

    fn small() -> BotaniaMlp {
        let dims = BotaniaDims {
            input: 6,
            hidden1: 5,
            hidden2: 4,
            classes: 3,
        };
        BotaniaMlp::new("botania", dims, &mut Rng::new(1))
    }

    #[test]
    fn default_dimensions() {
        let d = BotaniaDims::default();
        assert_eq!((d.input, d.hidden1, d.hidden2, d.classes), (3587, 1536, 768, 232));
    }

    #[test]
    fn eval_is_deterministic_and_normalized() {
        let mut b = small();
        let cover = Matrix::from_fn(3, 6, |i, j| ((i * 7 + j * 3) % 10) as f64 * 10.0);
        let a1 = b.forward(&cover, None).unwrap();
        let a2 = b.forward(&cover, None).unwrap();
        assert_eq!(a1.logits, a2.logits);
        assert_eq!(a1.penult, a2.penult);
        for n in a1.penult.row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
        for row in a1.logits.iter_rows() {
            assert!((softmax(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let inferred = b.infer(&cover).unwrap();
        assert_eq!(inferred.penult, a1.penult);
    }

    #[test]
    fn train_mode_uses_rng() {
        let mut b = small();
        let cover = Matrix::from_fn(2, 6, |i, j| (i + j) as f64 * 5.0 + 1.0);
        let o1 = b.forward(&cover, Some(&mut Rng::new(3))).unwrap();
        let o2 = b.forward(&cover, Some(&mut Rng::new(3))).unwrap();
        let o3 = b.forward(&cover, Some(&mut Rng::new(4))).unwrap();
        assert_eq!(o1.logits, o2.logits);
        assert_ne!(o1.logits, o3.logits);
    }

    #[test]
    fn rebuilds_from_checkpoint() {
        let b = small();
        assert_eq!(BotaniaMlp::from_checkpoint(&b.to_checkpoint(), "botania").unwrap(), b);
        assert!(BotaniaMlp::from_checkpoint(&b.to_checkpoint(), "other").is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let mut b = small();
        let mut tape = GradientTape::new();
        let g = Matrix::zeros(1, 3);
        assert!(matches!(
            b.backward(Some(&g), None, &mut tape),
            Err(Error::MissingForwardCache(_))
        ));
    }
}
