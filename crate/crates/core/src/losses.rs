//! Training objectives and their analytic gradients.
//!
//! * Sigmoid contrastive loss over all `N²` image/tabular pairs of a batch,
//!   with learnable temperature `τ` and bias `b`:
//!   `ℓ_ij = (z_i^img · z_j^tab)·e^τ + b`, `L = −(1/N²) Σ log σ(ω_ij ℓ_ij)`.
//! * Similarity-preservation regularizer
//!   `R = (1/N²) Σ W_ij (s_ij − z_i·z_j)²` with `s_ij` the cosine of the
//!   frozen embeddings and `W_ij = ((1 + s_ij)/2)²`.
//! * Combined objective `L + λR`, multi-class cross-entropy for Botania and
//!   the supervised baseline loss (binary cross-entropy plus `λR`).

use serde::{Deserialize, Serialize};

use crate::encoders::{GradientTape, ParamView, ParamViewMut, Parameterized};
use crate::error::{Error, Result};
use crate::numerics::{gram, log_sigmoid, log_sum_exp, norm, sigmoid, softplus, Matrix};

pub const TAU_INIT: f64 = std::f64::consts::LN_10;
pub const BIAS_INIT: f64 = -10.0;
pub const TAU_LIMIT: f64 = 10.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const BOTASP_LAMBDA: f64 = 100.0;
/// Allowed deviation from unit norm for regularizer inputs.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Learnable log-temperature and logit bias of the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarsTauB {
    pub tau: f64,
    pub b: f64,
}

impl Default for ScalarsTauB {
    fn default() -> Self {
        Self {
            tau: TAU_INIT,
            b: BIAS_INIT,
        }
    }
}

impl ScalarsTauB {
    pub fn new(tau: f64, b: f64) -> Self {
        Self { tau, b }
    }

    /// `e^τ` with `τ` clamped to `[−10, 10]`.
    pub fn scale(&self) -> f64 {
        self.tau.clamp(-TAU_LIMIT, TAU_LIMIT).exp()
    }

    pub fn clamp(&mut self) {
        self.tau = self.tau.clamp(-TAU_LIMIT, TAU_LIMIT);
    }
}

impl Parameterized for ScalarsTauB {
    fn params(&self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: "tau".into(),
                dims: vec![1],
                values: std::slice::from_ref(&self.tau),
            },
            ParamView {
                name: "b".into(),
                dims: vec![1],
                values: std::slice::from_ref(&self.b),
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        vec![
            ParamViewMut {
                name: "tau".into(),
                dims: vec![1],
                values: std::slice::from_mut(&mut self.tau),
            },
            ParamViewMut {
                name: "b".into(),
                dims: vec![1],
                values: std::slice::from_mut(&mut self.b),
            },
        ]
    }
}

/// `+1` on the diagonal (matched pairs), `−1` elsewhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairLabels {
    n: usize,
}

impl PairLabels {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn omega(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            -1.0
        }
    }

    pub fn positives(&self) -> usize {
        self.n
    }
}

pub fn scl_logits(z_img: &Matrix, z_tab: &Matrix, s: &ScalarsTauB) -> Result<Matrix> {
    if z_img.shape() != z_tab.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image batch {:?} vs tabular batch {:?}",
            z_img.shape(),
            z_tab.shape()
        )));
    }
    let scale = s.scale();
    Ok(gram(z_img, z_tab)?.map(|d| d * scale + s.b))
}

pub fn sigmoid_contrastive_loss(logits: &Matrix, labels: &PairLabels) -> Result<f64> {
    let n = logits.rows();
    if logits.cols() != n || labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} with {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for (j, &l) in logits.row(i).iter().enumerate() {
            total += log_sigmoid(labels.omega(i, j) * l);
        }
    }
    Ok(-total / (n * n) as f64)
}

/// Gradients of the sigmoid contrastive loss.
#[derive(Clone, Debug)]
pub struct SclGrads {
    pub d_logits: Matrix,
    pub d_z_img: Matrix,
    pub d_z_tab: Matrix,
    pub d_tau: f64,
    pub d_b: f64,
}

pub fn sigmoid_contrastive_grad(
    z_img: &Matrix,
    z_tab: &Matrix,
    s: &ScalarsTauB,
) -> Result<(f64, SclGrads)> {
    let dots = gram(z_img, z_tab)?;
    let n = dots.rows();
    let labels = PairLabels::new(n);
    let scale = s.scale();
    let nn = (n * n) as f64;
    let mut loss = 0.0;
    let mut d_logits = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let w = labels.omega(i, j);
            let l = dots.get(i, j) * scale + s.b;
            loss += log_sigmoid(w * l);
            // d/dl [−log σ(ωl)] = −ω σ(−ωl)
            d_logits.set(i, j, -w * sigmoid(-w * l) / nn);
        }
    }
    let loss = -loss / nn;
    let d_dots = d_logits.scale(scale);
    let d_b = d_logits.sum();
    let tau_free = s.tau.abs() < TAU_LIMIT;
    let d_tau = if tau_free {
        d_logits
            .data()
            .iter()
            .zip(dots.data())
            .map(|(g, d)| g * d * scale)
            .sum()
    } else {
        0.0
    };
    let d_z_img = d_dots.matmul(z_tab)?;
    let d_z_tab = d_dots.t_matmul(z_img)?;
    Ok((
        loss,
        SclGrads {
            d_logits,
            d_z_img,
            d_z_tab,
            d_tau,
            d_b,
        },
    ))
}

/// Precomputed similarity structure of a batch of frozen embeddings.
#[derive(Clone, Debug)]
pub struct SimilarityTarget {
    sims: Matrix,
    weights: Matrix,
}

impl SimilarityTarget {
    /// `img_orig` rows must be unit-norm within [`UNIT_NORM_TOL`].
    pub fn new(img_orig: &Matrix) -> Result<Self> {
        check_unit_rows(img_orig)?;
        let sims = gram(img_orig, img_orig)?;
        let weights = sims.map(|s| ((1.0 + s) / 2.0).powi(2));
        Ok(Self { sims, weights })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.sims.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.sims.rows() == 0
    }

    /// `R(z)` without re-checking normalization of `z`.
    pub fn value(&self, z: &Matrix) -> Result<f64> {
        self.value_and_grad_inner(z, false).map(|(v, _)| v)
    }

    /// `R(z)` and `∂R/∂z`.
    pub fn value_and_grad(&self, z: &Matrix) -> Result<(f64, Matrix)> {
        self.value_and_grad_inner(z, true)
            .map(|(v, g)| (v, g.expect("gradient requested")))
    }

    fn value_and_grad_inner(&self, z: &Matrix, want_grad: bool) -> Result<(f64, Option<Matrix>)> {
        let n = self.len();
        if z.rows() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} projected rows for {n} reference rows",
                z.rows()
            )));
        }
        let new = gram(z, z)?;
        let nn = (n * n) as f64;
        let mut value = 0.0;
        // D_ij = ∂R/∂S_new_ij = −(2/N²) W_ij (S_orig − S_new)_ij, symmetric
        let mut d = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let diff = self.sims.get(i, j) - new.get(i, j);
                let w = self.weights.get(i, j);
                value += w * diff * diff;
                d.set(i, j, -2.0 * w * diff / nn);
            }
        }
        let value = value / nn;
        if !want_grad {
            return Ok((value, None));
        }
        // S_new = z zᵀ  ⇒  ∂R/∂z = (D + Dᵀ) z = 2 D z
        let grad = d.matmul(z)?.scale(2.0);
        Ok((value, Some(grad)))
    }
}

fn check_unit_rows(m: &Matrix) -> Result<()> {
    for (i, row) in m.iter_rows().enumerate() {
        let n = norm(row);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { row: i, norm: n });
        }
    }
    Ok(())
}

pub fn similarity_regularizer(img_orig: &Matrix, z_img: &Matrix) -> Result<f64> {
    if img_orig.shape() != z_img.shape() {
        return Err(Error::ShapeMismatch(format!(
            "original {:?} vs projected {:?}",
            img_orig.shape(),
            z_img.shape()
        )));
    }
    check_unit_rows(z_img)?;
    SimilarityTarget::new(img_orig)?.value(z_img)
}

pub fn botaclip_loss(
    img_orig: &Matrix,
    z_img: &Matrix,
    z_tab: &Matrix,
    s: &ScalarsTauB,
    lambda: f64,
) -> Result<f64> {
    let logits = scl_logits(z_img, z_tab, s)?;
    let scl = sigmoid_contrastive_loss(&logits, &PairLabels::new(logits.rows()))?;
    if lambda == 0.0 {
        return Ok(scl);
    }
    Ok(scl + lambda * similarity_regularizer(img_orig, z_img)?)
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::BadLabel {
            label,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Mean cross-entropy over rows and its gradient wrt the logits.
pub fn cross_entropy_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        loss += cross_entropy(row, label)?;
        let lse = log_sum_exp(row);
        for (g, &l) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (l - lse).exp() / n;
        }
        grad.set(i, label, grad.get(i, label) - 1.0 / n);
    }
    Ok((loss / n, grad))
}

/// Mean binary cross-entropy with logits over every entry, and its gradient.
pub fn bce_with_logits_grad(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if logits.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let count = logits.data().len().max(1) as f64;
    let mut loss = 0.0;
    let grad = logits.zip_map(targets, |x, y| (sigmoid(x) - y) / count)?;
    for (&x, &y) in logits.data().iter().zip(targets.data()) {
        loss += softplus(x) - y * x;
    }
    Ok((loss / count, grad))
}

/// Supervised baseline loss: mean binary cross-entropy over all
/// (sample, species) entries plus `λ` times the weighted similarity drift.
pub fn botasp_loss(
    logits: &Matrix,
    targets: &Matrix,
    z_orig: &Matrix,
    z_new: &Matrix,
    lambda: f64,
) -> Result<f64> {
    let (bce, _) = bce_with_logits_grad(logits, targets)?;
    if z_orig.shape() != z_new.shape() || z_orig.rows() != logits.rows() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings {:?}/{:?} for {} samples",
            z_orig.shape(),
            z_new.shape(),
            logits.rows()
        )));
    }
    if lambda == 0.0 {
        return Ok(bce);
    }
    Ok(bce + lambda * SimilarityTarget::new(z_orig)?.value(z_new)?)
}

/// Loss values of one evaluation of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Optimized value: `scl + λ·reg` (or `bce + λ·reg`).
    pub total: f64,
    /// Sigmoid contrastive term (or BCE for the supervised baseline).
    pub data_term: f64,
    /// Regularizer value, reported even when `λ = 0`.
    pub reg: f64,
}

/// Gradients flowing out of the combined objective.
#[derive(Clone, Debug)]
pub struct ObjectiveGrads {
    pub d_z_img: Matrix,
    pub d_z_tab: Matrix,
    /// `tau` and `b` gradients.
    pub scalars: GradientTape,
}

/// Combined contrastive objective with a forward cache for [`backward`](Self::backward).
#[derive(Debug, Default)]
pub struct BotaclipObjective {
    cache: Option<ObjectiveGrads>,
}

impl BotaclipObjective {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        img_orig: &Matrix,
        z_img: &Matrix,
        z_tab: &Matrix,
        s: &ScalarsTauB,
        lambda: f64,
    ) -> Result<LossBreakdown> {
        if lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda {lambda} < 0")));
        }
        let (scl, g) = sigmoid_contrastive_grad(z_img, z_tab, s)?;
        let target = SimilarityTarget::new(img_orig)?;
        let (reg, d_reg) = target.value_and_grad(z_img)?;
        let mut d_z_img = g.d_z_img;
        if lambda != 0.0 {
            d_z_img.add_assign(&d_reg.scale(lambda))?;
        }
        let mut scalars = GradientTape::new();
        scalars.accumulate("tau", &[g.d_tau]);
        scalars.accumulate("b", &[g.d_b]);
        self.cache = Some(ObjectiveGrads {
            d_z_img,
            d_z_tab: g.d_z_tab,
            scalars,
        });
        Ok(LossBreakdown {
            total: scl + lambda * reg,
            data_term: scl,
            reg,
        })
    }

    pub fn backward(&mut self) -> Result<ObjectiveGrads> {
        self.cache
            .take()
            .ok_or(Error::MissingForwardCache("botaclip objective"))
    }
}

/// Gradients of the supervised baseline loss.
#[derive(Clone, Debug)]
pub struct BotaspGrads {
    pub d_logits: Matrix,
    pub d_z_new: Matrix,
}

#[derive(Debug, Default)]
pub struct BotaspObjective {
    cache: Option<BotaspGrads>,
}

impl BotaspObjective {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        logits: &Matrix,
        targets: &Matrix,
        z_orig: &Matrix,
        z_new: &Matrix,
        lambda: f64,
    ) -> Result<LossBreakdown> {
        let (bce, d_logits) = bce_with_logits_grad(logits, targets)?;
        let target = SimilarityTarget::new(z_orig)?;
        let (reg, d_reg) = target.value_and_grad(z_new)?;
        self.cache = Some(BotaspGrads {
            d_logits,
            d_z_new: d_reg.scale(lambda),
        });
        Ok(LossBreakdown {
            total: bce + lambda * reg,
            data_term: bce,
            reg,
        })
    }

    pub fn backward(&mut self) -> Result<BotaspGrads> {
        self.cache
            .take()
            .ok_or(Error::MissingForwardCache("botasp objective"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, l2_normalize_rows, max_relative_error, Rng};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn unit(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        l2_normalize_rows(&Matrix::from_fn(rows, cols, |_, _| rng.normal())).unwrap()
    }

    #[test]
    fn logits_examples() {
        let e = Matrix::identity(3);
        let l = scl_logits(&e, &e, &ScalarsTauB::new(0.0, 0.0)).unwrap();
        assert_eq!(l, e);
        // dot 0.5, τ = ln 2, b = −1 → 0
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.5, 0.75f64.sqrt()]]).unwrap();
        let l = scl_logits(&a, &b, &ScalarsTauB::new(LN2, -1.0)).unwrap();
        assert!(l.get(0, 0).abs() < 1e-15);
        let shifted = scl_logits(&e, &e, &ScalarsTauB::new(0.0, 0.7)).unwrap();
        assert!(shifted.sub(&e).unwrap().data().iter().all(|&d| (d - 0.7).abs() < 1e-15));
    }

    #[test]
    fn scl_unit_values() {
        let one = |l: f64| Matrix::from_rows(&[[l]]).unwrap();
        let lbl = PairLabels::new(1);
        assert!((sigmoid_contrastive_loss(&one(0.0), &lbl).unwrap() - LN2).abs() < 1e-12);
        assert!((sigmoid_contrastive_loss(&one(1.0), &lbl).unwrap() - 0.313_261_687_518_222_8).abs() < 1e-12);
        // N=2: diagonal logits 1, off-diagonal 0
        let l = Matrix::identity(2);
        let expected = (2.0 * 0.313_261_687_518_222_8 + 2.0 * LN2) / 4.0;
        let got = sigmoid_contrastive_loss(&l, &PairLabels::new(2)).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.503_204).abs() < 1e-6);
    }

    #[test]
    fn regularizer_unit_values() {
        let img = Matrix::identity(2);
        assert_eq!(similarity_regularizer(&img, &img).unwrap(), 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let collapsed = Matrix::from_rows(&[[s, s], [s, s]]).unwrap();
        let r = similarity_regularizer(&img, &collapsed).unwrap();
        assert!((r - 0.125).abs() < 1e-12);
        // antipodal originals get zero weight
        let anti = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let target = SimilarityTarget::new(&anti).unwrap();
        assert_eq!(target.weights().get(0, 1), 0.0);
    }

    #[test]
    fn regularizer_rejects_unnormalized() {
        let img = Matrix::identity(2);
        let z = Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            similarity_regularizer(&img, &z),
            Err(Error::NotNormalized { row: 0, .. })
        ));
        assert!(matches!(
            similarity_regularizer(&z, &img),
            Err(Error::NotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn combined_loss_reductions() {
        let mut rng = Rng::new(4);
        let img = unit(4, 3, &mut rng);
        let zi = unit(4, 3, &mut rng);
        let zt = unit(4, 3, &mut rng);
        let s = ScalarsTauB::default();
        let scl = sigmoid_contrastive_loss(&scl_logits(&zi, &zt, &s).unwrap(), &PairLabels::new(4)).unwrap();
        assert_eq!(botaclip_loss(&img, &zi, &zt, &s, 0.0).unwrap(), scl);
        let r = similarity_regularizer(&img, &zi).unwrap();
        assert!((botaclip_loss(&img, &zi, &zt, &s, 1.0).unwrap() - (scl + r)).abs() < 1e-15);
        assert_eq!(DEFAULT_LAMBDA, 1.0);
        assert_eq!(BOTASP_LAMBDA, 100.0);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = vec![0.3; 232];
        assert!((cross_entropy(&uniform, 17).unwrap() - 232f64.ln()).abs() < 1e-12);
        let mut sat = vec![0.0; 5];
        sat[2] = 1e3;
        assert!(cross_entropy(&sat, 2).unwrap() < 1e-300);
        assert!((cross_entropy(&[1.0, 0.0], 0).unwrap() - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(matches!(cross_entropy(&[1.0, 0.0], 2), Err(Error::BadLabel { .. })));
    }

    #[test]
    fn botasp_values() {
        let mut rng = Rng::new(8);
        let z = unit(3, 4, &mut rng);
        let logits = Matrix::zeros(3, 5);
        let targets = Matrix::zeros(3, 5);
        assert!((botasp_loss(&logits, &targets, &z, &z, 0.0).unwrap() - LN2).abs() < 1e-15);
        assert!((botasp_loss(&logits, &targets, &z, &z, 100.0).unwrap() - LN2).abs() < 1e-15);
        assert!(botasp_loss(&logits, &Matrix::zeros(2, 5), &z, &z, 1.0).is_err());
    }

    #[test]
    fn bias_gradient_at_zero_logit() {
        let z = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        // ℓ = dot·e^τ + b = 0 when b = −e^τ
        let s = ScalarsTauB::new(0.0, -1.0);
        let (loss, g) = sigmoid_contrastive_grad(&z, &z, &s).unwrap();
        assert!((loss - LN2).abs() < 1e-15);
        assert!((g.d_b + 0.5).abs() < 1e-15);
    }

    #[test]
    fn regularizer_gradient_vanishes_at_minimum() {
        let mut rng = Rng::new(6);
        let img = unit(4, 5, &mut rng);
        let (v, g) = SimilarityTarget::new(&img).unwrap().value_and_grad(&img).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn objective_backward_requires_forward() {
        let mut o = BotaclipObjective::new();
        assert!(matches!(o.backward(), Err(Error::MissingForwardCache(_))));
        let mut o = BotaspObjective::new();
        assert!(matches!(o.backward(), Err(Error::MissingForwardCache(_))));
    }

    #[test]
    fn scl_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let n = 1 + seed as usize % 4;
            let d = 2 + seed as usize % 6;
            let zi = Matrix::from_fn(n, d, |_, _| rng.normal());
            let zt = Matrix::from_fn(n, d, |_, _| rng.normal());
            let s = ScalarsTauB::new(rng.normal(), rng.normal());
            let (_, g) = sigmoid_contrastive_grad(&zi, &zt, &s).unwrap();
            let f = |zi: &Matrix, zt: &Matrix, s: &ScalarsTauB| {
                sigmoid_contrastive_loss(&scl_logits(zi, zt, s).unwrap(), &PairLabels::new(n)).unwrap()
            };
            let fd = finite_diff_grad(
                |x| f(&Matrix::new(n, d, x.to_vec()).unwrap(), &zt, &s),
                zi.data(),
                1e-6,
            )
            .unwrap();
            assert!(max_relative_error(g.d_z_img.data(), &fd, 1e-6) < 1e-5);
            let fd = finite_diff_grad(
                |x| f(&zi, &Matrix::new(n, d, x.to_vec()).unwrap(), &s),
                zt.data(),
                1e-6,
            )
            .unwrap();
            assert!(max_relative_error(g.d_z_tab.data(), &fd, 1e-6) < 1e-5);
            let fd = finite_diff_grad(|x| f(&zi, &zt, &ScalarsTauB::new(x[0], x[1])), &[s.tau, s.b], 1e-6)
                .unwrap();
            assert!(max_relative_error(&[g.d_tau, g.d_b], &fd, 1e-6) < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..1000, n in 2usize..6) {
            let mut rng = Rng::new(seed);
            let img = unit(n, 4, &mut rng);
            let zi = unit(n, 4, &mut rng);
            let zt = unit(n, 4, &mut rng);
            let s = ScalarsTauB::new(rng.normal(), rng.normal());
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let p = |m: &Matrix| m.select_rows(&perm);
            let a = botaclip_loss(&img, &zi, &zt, &s, 1.0).unwrap();
            let b = botaclip_loss(&p(&img), &p(&zi), &p(&zt), &s, 1.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let r1 = similarity_regularizer(&img, &zi).unwrap();
            let r2 = similarity_regularizer(&p(&img), &p(&zi)).unwrap();
            prop_assert!((r1 - r2).abs() < 1e-12);
        }

        #[test]
        fn scl_nonnegative_and_weights_bounded(seed in 0u64..1000, n in 1usize..6) {
            let mut rng = Rng::new(seed);
            let img = unit(n, 3, &mut rng);
            let zi = unit(n, 3, &mut rng);
            let zt = unit(n, 3, &mut rng);
            let s = ScalarsTauB::new(3.0 * rng.normal(), 5.0 * rng.normal());
            let l = sigmoid_contrastive_loss(&scl_logits(&zi, &zt, &s).unwrap(), &PairLabels::new(n)).unwrap();
            prop_assert!(l >= 0.0);
            let t = SimilarityTarget::new(&img).unwrap();
            prop_assert!(t.weights().data().iter().all(|&w| (-1e-15..=1.0 + 1e-12).contains(&w)));
            prop_assert!(t.value(&zi).unwrap() >= 0.0);
        }
    }
}
