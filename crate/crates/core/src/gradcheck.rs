//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Each check draws a small random instance from a seed, computes the
//! analytic gradient through the public forward/backward API and compares it
//! against central differences of an independently evaluated scalar
//! objective. Encoders are probed with `Σ G ⊙ f(x)` for a random upstream `G`,
//! which exercises both the parameter and the input gradients.

use crate::encoders::{
    BotaniaDims, BotaniaMlp, BotaspModel, GradientTape, ImageTower, Layer, Linear, Parameterized, Sequential,
    TabTower, Variant, ATTENTION_HEADS,
};
use crate::error::{Error, Result};
use crate::losses::{
    bce_with_logits_grad, botasp_loss, cross_entropy, cross_entropy_grad, scl_logits, sigmoid_contrastive_grad,
    sigmoid_contrastive_loss, BotaclipObjective, BotaspObjective, PairLabels, ScalarsTauB, SimilarityTarget,
};
use crate::numerics::{dot, finite_diff_grad, l2_normalize_rows, max_relative_error, Matrix, Rng};

/// Coarse central-difference step; the extrapolation also uses `STEP / 2`.
pub const STEP: f64 = 1e-4;
/// Floor of the relative-error denominator, as a fraction of the largest
/// gradient entry (at least 1): smaller entries compare on an absolute scale.
pub const FLOOR: f64 = 1e-6;
/// An instance counts as non-smooth when the central differences at `STEP`
/// and `STEP / 2` disagree by more than `KINK_ABS + KINK_REL·|D|`, which only
/// happens when a ReLU switches inside the probe interval.
pub const KINK_ABS: f64 = 1e-6;
pub const KINK_REL: f64 = 1e-3;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Largest batch and feature width of a probe instance.
pub const MAX_BATCH: usize = 4;
pub const MAX_DIM: usize = 8;

/// Every check, losses first, then encoder families, then the two full
/// training objectives end to end.
pub const CHECKS: &[&str] = &[
    "scl",
    "regularizer",
    "scl+regularizer",
    "cross-entropy",
    "bce",
    "botasp-loss",
    "botania",
    "linear-adapter",
    "mlp-image",
    "mlp-tabular",
    "attention",
    "botania-tower",
    "botasp-model",
    "botaclip-end-to-end",
    "botasp-end-to-end",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    /// Largest relative error over all instances and gradient entries.
    pub worst: f64,
    /// Instances redrawn because the objective had a kink within the step.
    pub redrawn: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

/// Runs check `name` on seeds `0..instances`.
pub fn run_check(name: &str, instances: u64) -> Result<CheckOutcome> {
    let check = lookup(name)?;
    let mut worst = 0.0f64;
    let (mut done, mut redrawn, mut draw) = (0, 0, 0);
    while done < instances {
        let mut rng = Rng::new(0x6772_6164).substream(name, draw);
        draw += 1;
        match check(&mut rng) {
            Ok(e) => {
                worst = worst.max(e);
                done += 1;
            }
            Err(Skip::NonSmooth) if redrawn < instances as usize => redrawn += 1,
            Err(Skip::NonSmooth) => {
                return Err(Error::InvalidArgument(format!(
                    "gradient check {name}: too many non-smooth instances"
                )))
            }
            Err(Skip::Failed(e)) => return Err(e),
        }
    }
    Ok(CheckOutcome {
        name: name.to_owned(),
        instances: instances as usize,
        worst,
        redrawn,
    })
}

pub fn run_all(instances: u64) -> Result<Vec<CheckOutcome>> {
    CHECKS.iter().map(|c| run_check(c, instances)).collect()
}

enum Skip {
    NonSmooth,
    Failed(Error),
}

impl From<Error> for Skip {
    fn from(e: Error) -> Self {
        Skip::Failed(e)
    }
}

type Probe = std::result::Result<f64, Skip>;
type Check = fn(&mut Rng) -> Probe;

fn lookup(name: &str) -> Result<Check> {
    Ok(match name {
        "scl" => check_scl,
        "regularizer" => check_regularizer,
        "scl+regularizer" => check_combined,
        "cross-entropy" => check_cross_entropy,
        "bce" => check_bce,
        "botasp-loss" => check_botasp_loss,
        "botania" => check_botania,
        "linear-adapter" => check_linear_adapter,
        "mlp-image" => check_mlp_image,
        "mlp-tabular" => check_mlp_tabular,
        "attention" => check_attention,
        "botania-tower" => check_botania_tower,
        "botasp-model" => check_botasp_model,
        "botaclip-end-to-end" => check_botaclip_end_to_end,
        "botasp-end-to-end" => check_botasp_end_to_end,
        other => return Err(Error::InvalidArgument(format!("unknown gradient check {other:?}"))),
    })
}

fn batch(rng: &mut Rng) -> usize {
    1 + rng.below(MAX_BATCH)
}

fn width(rng: &mut Rng, min: usize) -> usize {
    min + rng.below(MAX_DIM - min + 1)
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn unit(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    l2_normalize_rows(&gaussian(rows, cols, rng))
}

fn reshape(like: &Matrix, data: &[f64]) -> Matrix {
    Matrix::new(like.rows(), like.cols(), data.to_vec()).expect("same element count")
}

/// Compares `analytic` against the Richardson extrapolation
/// `(4·D(h/2) − D(h))/3` of two central differences of a smooth `f`.
fn compare<F: FnMut(&[f64]) -> f64>(analytic: &[f64], f: F, at: &[f64]) -> Probe {
    compare_inner(analytic, f, at, false)
}

/// With `piecewise`, an objective with ReLU kinks is reported as non-smooth
/// when a kink falls inside the probe interval.
fn compare_inner<F: FnMut(&[f64]) -> f64>(analytic: &[f64], mut f: F, at: &[f64], piecewise: bool) -> Probe {
    let coarse = finite_diff_grad(&mut f, at, STEP)?;
    let fine = finite_diff_grad(&mut f, at, STEP / 2.0)?;
    if piecewise && coarse.iter().zip(&fine).any(|(c, d)| (c - d).abs() > KINK_ABS + KINK_REL * d.abs()) {
        return Err(Skip::NonSmooth);
    }
    let numeric: Vec<f64> = fine.iter().zip(&coarse).map(|(d, c)| (4.0 * d - c) / 3.0).collect();
    let scale = numeric.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    Ok(max_relative_error(analytic, &numeric, FLOOR * scale))
}

/// Moves every parameter off its initialization so that identity-initialised
/// adapters and zero biases are probed at generic points.
fn jitter<P: Parameterized>(model: &mut P, rng: &mut Rng) -> Result<()> {
    let flat: Vec<f64> = model.flat_params().iter().map(|v| v + 0.3 * rng.normal()).collect();
    model.set_flat_params(&flat)
}

fn probe(outputs: &[&Matrix], upstream: &[Matrix]) -> f64 {
    outputs.iter().zip(upstream).map(|(o, g)| dot(o.data(), g.data())).sum()
}

fn check_scl(rng: &mut Rng) -> Probe {
    let (n, d) = (batch(rng), width(rng, 1));
    let zi = unit(n, d, rng)?;
    let zt = unit(n, d, rng)?;
    let s = ScalarsTauB::new(rng.normal(), rng.normal());
    let (_, g) = sigmoid_contrastive_grad(&zi, &zt, &s)?;
    let loss = |zi: &Matrix, zt: &Matrix, s: &ScalarsTauB| {
        let logits = scl_logits(zi, zt, s).expect("shapes fixed");
        sigmoid_contrastive_loss(&logits, &PairLabels::new(n)).expect("labels fixed")
    };
    let e1 = compare(g.d_z_img.data(), |x| loss(&reshape(&zi, x), &zt, &s), zi.data())?;
    let e2 = compare(g.d_z_tab.data(), |x| loss(&zi, &reshape(&zt, x), &s), zt.data())?;
    let e3 = compare(
        &[g.d_tau, g.d_b],
        |x| loss(&zi, &zt, &ScalarsTauB::new(x[0], x[1])),
        &[s.tau, s.b],
    )?;
    Ok(e1.max(e2).max(e3))
}

fn check_regularizer(rng: &mut Rng) -> Probe {
    let (n, d) = (batch(rng), width(rng, 1));
    let orig = unit(n, d, rng)?;
    let z = unit(n, d, rng)?;
    let target = SimilarityTarget::new(&orig)?;
    let (_, g) = target.value_and_grad(&z)?;
    let value = |z: &Matrix| {
        let sims = orig.matmul_t(&orig).expect("square");
        let new = z.matmul_t(z).expect("square");
        let mut r = 0.0;
        for i in 0..n {
            for j in 0..n {
                let w = ((1.0 + sims.get(i, j)) / 2.0).powi(2);
                r += w * (sims.get(i, j) - new.get(i, j)).powi(2);
            }
        }
        r / (n * n) as f64
    };
    compare(g.data(), |x| value(&reshape(&z, x)), z.data())
}

fn check_combined(rng: &mut Rng) -> Probe {
    let (n, d) = (batch(rng), width(rng, 1));
    let orig = unit(n, d, rng)?;
    let zi = unit(n, d, rng)?;
    let zt = unit(n, d, rng)?;
    let s = ScalarsTauB::new(rng.normal(), rng.normal());
    let lambda = 3.0 * rng.uniform();
    let mut objective = BotaclipObjective::new();
    objective.forward(&orig, &zi, &zt, &s, lambda)?;
    let g = objective.backward()?;
    let target = SimilarityTarget::new(&orig)?;
    let loss = |zi: &Matrix, zt: &Matrix, s: &ScalarsTauB| {
        let logits = scl_logits(zi, zt, s).expect("shapes fixed");
        sigmoid_contrastive_loss(&logits, &PairLabels::new(n)).expect("labels fixed")
            + lambda * target.value(zi).expect("rows fixed")
    };
    let e1 = compare(g.d_z_img.data(), |x| loss(&reshape(&zi, x), &zt, &s), zi.data())?;
    let e2 = compare(g.d_z_tab.data(), |x| loss(&zi, &reshape(&zt, x), &s), zt.data())?;
    let scalars = [
        g.scalars.get("tau").map_or(0.0, |v| v[0]),
        g.scalars.get("b").map_or(0.0, |v| v[0]),
    ];
    let e3 = compare(
        &scalars,
        |x| loss(&zi, &zt, &ScalarsTauB::new(x[0], x[1])),
        &[s.tau, s.b],
    )?;
    Ok(e1.max(e2).max(e3))
}

fn check_cross_entropy(rng: &mut Rng) -> Probe {
    let (n, k) = (batch(rng), width(rng, 2));
    let logits = gaussian(n, k, rng).scale(2.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let (_, g) = cross_entropy_grad(&logits, &labels)?;
    let loss = |m: &Matrix| {
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| cross_entropy(m.row(i), y).expect("label in range"))
            .sum::<f64>()
            / n as f64
    };
    compare(g.data(), |x| loss(&reshape(&logits, x)), logits.data())
}

fn bce_oracle(logits: &Matrix, targets: &Matrix) -> f64 {
    // −[y log σ(x) + (1 − y) log(1 − σ(x))], written without the softplus identity
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &y)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / logits.data().len() as f64
}

fn binary_targets(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| if rng.bernoulli(0.5) { 1.0 } else { 0.0 })
}

fn check_bce(rng: &mut Rng) -> Probe {
    let (n, k) = (batch(rng), width(rng, 1));
    let logits = gaussian(n, k, rng).scale(2.0);
    let targets = binary_targets(n, k, rng);
    let (_, g) = bce_with_logits_grad(&logits, &targets)?;
    compare(g.data(), |x| bce_oracle(&reshape(&logits, x), &targets), logits.data())
}

fn check_botasp_loss(rng: &mut Rng) -> Probe {
    let (n, k, d) = (batch(rng), width(rng, 1), width(rng, 1));
    let logits = gaussian(n, k, rng).scale(2.0);
    let targets = binary_targets(n, k, rng);
    let orig = unit(n, d, rng)?;
    let z = unit(n, d, rng)?;
    let lambda = 100.0 * rng.uniform();
    let mut objective = BotaspObjective::new();
    objective.forward(&logits, &targets, &orig, &z, lambda)?;
    let g = objective.backward()?;
    let e1 = compare(
        g.d_logits.data(),
        |x| botasp_loss(&reshape(&logits, x), &targets, &orig, &z, lambda).expect("shapes fixed"),
        logits.data(),
    )?;
    let e2 = compare(
        g.d_z_new.data(),
        |x| botasp_loss(&logits, &targets, &orig, &reshape(&z, x), lambda).expect("shapes fixed"),
        z.data(),
    )?;
    Ok(e1.max(e2))
}

/// Generic encoder probe: `forward` returns the module outputs, `backward`
/// pushes upstream gradients into the tape and returns the input gradient.
fn check_module<M, F, B>(
    model: &M,
    input: &Matrix,
    forward: F,
    backward: B,
    piecewise: bool,
    rng: &mut Rng,
) -> Probe
where
    M: Parameterized + Clone,
    F: Fn(&mut M, &Matrix) -> Result<Vec<Matrix>>,
    B: Fn(&mut M, &[Matrix], &mut GradientTape) -> Result<Matrix>,
{
    let mut m = model.clone();
    let outputs = forward(&mut m, input)?;
    let upstream: Vec<Matrix> = outputs.iter().map(|o| gaussian(o.rows(), o.cols(), rng)).collect();
    let mut tape = GradientTape::new();
    let d_input = backward(&mut m, &upstream, &mut tape)?;
    let d_params = tape.flatten_for(&m);

    let eval = |m: &mut M, x: &Matrix| {
        let outs = forward(m, x).expect("forward on fixed shapes");
        probe(&outs.iter().collect::<Vec<_>>(), &upstream)
    };
    let theta = model.flat_params();
    let mut scratch = model.clone();
    let e_params = compare_inner(
        &d_params,
        |p| {
            scratch.set_flat_params(p).expect("same length");
            eval(&mut scratch, input)
        },
        &theta,
        piecewise,
    )?;
    let mut fixed = model.clone();
    let e_input = compare_inner(
        d_input.data(),
        |x| eval(&mut fixed, &reshape(input, x)),
        input.data(),
        piecewise,
    )?;
    Ok(e_params.max(e_input))
}

fn check_botania(rng: &mut Rng) -> Probe {
    let dims = BotaniaDims {
        input: width(rng, 2),
        hidden1: width(rng, 2),
        hidden2: width(rng, 2),
        classes: width(rng, 2),
    };
    let mut model = BotaniaMlp::new("probe", dims, rng);
    jitter(&mut model, rng)?;
    let x = gaussian(batch(rng), dims.input, rng);
    check_module(
        &model,
        &x,
        |m, x| {
            let out = m.forward(x, None)?;
            Ok(vec![out.logits, out.penult])
        },
        |m, up, tape| m.backward(Some(&up[0]), Some(&up[1]), tape),
        false,
        rng,
    )
}

fn check_sequential(net: Sequential, x: &Matrix, rng: &mut Rng) -> Probe {
    check_module(
        &net,
        x,
        |m, x| Ok(vec![m.forward(x, None)?]),
        |m, up, tape| m.backward(&up[0], tape),
        false,
        rng,
    )
}

fn check_linear_adapter(rng: &mut Rng) -> Probe {
    let d = width(rng, 2);
    let adapter = Linear::identity_init("probe.adapter", d, 0.01, rng);
    let mut net = Sequential::new(vec![Layer::Linear(adapter), Layer::L2Normalize]);
    jitter(&mut net, rng)?;
    let x = gaussian(batch(rng), d, rng);
    let bare = check_sequential(net, &x, rng)?;
    Ok(bare.max(check_tower_linear(rng)?))
}

/// Same family through the image tower wrapper.
fn check_tower_linear(rng: &mut Rng) -> Probe {
    let d = width(rng, 2);
    let mut tower = ImageTower::linear(d, 0.01, rng);
    jitter(&mut tower, rng)?;
    let x = gaussian(batch(rng), d, rng);
    check_image_tower(tower, &x, false, rng)
}

fn check_image_tower(tower: ImageTower, x: &Matrix, piecewise: bool, rng: &mut Rng) -> Probe {
    check_module(
        &tower,
        x,
        |m, x| Ok(vec![m.forward(x, None)?]),
        |m, up, tape| m.backward_with_input(&up[0], tape),
        piecewise,
        rng,
    )
}

/// The MLP and attention towers contain a ReLU; the Botania tower does not.
fn check_tab_tower(tower: TabTower, x: &Matrix, rng: &mut Rng) -> Probe {
    let piecewise = tower.variant() != Variant::BotaniaLinear;
    check_module(
        &tower,
        x,
        |m, x| Ok(vec![m.forward(x, None)?]),
        |m, up, tape| m.backward_with_input(&up[0], tape),
        piecewise,
        rng,
    )
}

fn check_mlp_image(rng: &mut Rng) -> Probe {
    let (d, h, e) = (width(rng, 2), width(rng, 2), width(rng, 2));
    let mut tower = ImageTower::mlp(d, h, e, rng);
    jitter(&mut tower, rng)?;
    let x = gaussian(batch(rng), d, rng);
    check_image_tower(tower, &x, true, rng)
}

fn check_mlp_tabular(rng: &mut Rng) -> Probe {
    let (d, h, e) = (width(rng, 2), width(rng, 2), width(rng, 2));
    let mut tower = TabTower::mlp(d, h, e, rng);
    jitter(&mut tower, rng)?;
    let x = gaussian(batch(rng), d, rng);
    check_tab_tower(tower, &x, rng)
}

fn check_attention(rng: &mut Rng) -> Probe {
    let (d, e) = (width(rng, 2), width(rng, 2));
    let hidden = ATTENTION_HEADS * (1 + rng.below(MAX_DIM / ATTENTION_HEADS));
    let mut tower = TabTower::attention(d, hidden, e, rng)?;
    jitter(&mut tower, rng)?;
    let x = gaussian(batch(rng), d, rng);
    check_tab_tower(tower, &x, rng)
}

fn check_botania_tower(rng: &mut Rng) -> Probe {
    let dims = BotaniaDims {
        input: width(rng, 2),
        hidden1: width(rng, 2),
        hidden2: width(rng, 2),
        classes: width(rng, 2),
    };
    let mut tower = TabTower::botania(dims, width(rng, 2), rng);
    jitter(&mut tower, rng)?;
    let x = gaussian(batch(rng), dims.input, rng);
    check_tab_tower(tower, &x, rng)
}

fn check_botasp_model(rng: &mut Rng) -> Probe {
    let (d, h, k) = (width(rng, 2), width(rng, 2), width(rng, 2));
    let mut model = BotaspModel::new(d, h, k, 0.01, rng);
    jitter(&mut model, rng)?;
    let x = gaussian(batch(rng), d, rng);
    check_module(
        &model,
        &x,
        |m, x| {
            let out = m.forward(x, None)?;
            Ok(vec![out.logits, out.projected])
        },
        |m, up, tape| m.backward_with_input(&up[0], &up[1], tape),
        false,
        rng,
    )
}

/// Image adapter + Botania tower + temperature/bias under `L + λR`.
fn check_botaclip_end_to_end(rng: &mut Rng) -> Probe {
    let n = 2 + rng.below(MAX_BATCH - 1);
    let d = width(rng, 2);
    let dims = BotaniaDims {
        input: width(rng, 2),
        hidden1: width(rng, 2),
        hidden2: width(rng, 2),
        classes: width(rng, 2),
    };
    let mut img = ImageTower::linear(d, 0.01, rng);
    let mut tab = TabTower::botania(dims, d, rng);
    jitter(&mut img, rng)?;
    jitter(&mut tab, rng)?;
    let mut scalars = ScalarsTauB::new(rng.normal(), rng.normal());
    let lambda = 3.0 * rng.uniform();
    let x_img = gaussian(n, d, rng);
    let x_tab = gaussian(n, dims.input, rng);
    let orig = l2_normalize_rows(&x_img)?;

    let zi = img.forward(&x_img, None)?;
    let zt = tab.forward(&x_tab, None)?;
    let mut objective = BotaclipObjective::new();
    objective.forward(&orig, &zi, &zt, &scalars, lambda)?;
    let g = objective.backward()?;
    let mut tape = GradientTape::new();
    img.backward(&g.d_z_img, &mut tape)?;
    tab.backward(&g.d_z_tab, &mut tape)?;
    let mut analytic = tape.flatten_for(&img);
    analytic.extend(tape.flatten_for(&tab));
    analytic.extend(g.scalars.flatten_for(&scalars));

    let (ni, nt) = (img.num_params(), tab.num_params());
    let mut theta = img.flat_params();
    theta.extend(tab.flat_params());
    theta.extend(scalars.flat_params());
    let target = SimilarityTarget::new(&orig)?;
    compare(
        &analytic,
        |p| {
            img.set_flat_params(&p[..ni]).expect("image split");
            tab.set_flat_params(&p[ni..ni + nt]).expect("tabular split");
            scalars.set_flat_params(&p[ni + nt..]).expect("scalar split");
            let zi = img.infer(&x_img).expect("image forward");
            let zt = tab.infer(&x_tab).expect("tabular forward");
            let logits = scl_logits(&zi, &zt, &scalars).expect("logits");
            sigmoid_contrastive_loss(&logits, &PairLabels::new(n)).expect("loss")
                + lambda * target.value(&zi).expect("regularizer")
        },
        &theta,
    )
}

/// Supervised baseline model under `BCE + λR`.
fn check_botasp_end_to_end(rng: &mut Rng) -> Probe {
    let (n, d, h, k) = (batch(rng), width(rng, 2), width(rng, 2), width(rng, 1));
    let mut model = BotaspModel::new(d, h, k, 0.01, rng);
    jitter(&mut model, rng)?;
    let orig = unit(n, d, rng)?;
    let targets = binary_targets(n, k, rng);
    let lambda = 100.0 * rng.uniform();

    let out = model.forward(&orig, None)?;
    let mut objective = BotaspObjective::new();
    objective.forward(&out.logits, &targets, &orig, &out.projected, lambda)?;
    let g = objective.backward()?;
    let mut tape = GradientTape::new();
    model.backward(&g.d_logits, &g.d_z_new, &mut tape)?;
    let analytic = tape.flatten_for(&model);
    let theta = model.flat_params();
    let target = SimilarityTarget::new(&orig)?;
    compare(
        &analytic,
        |p| {
            model.set_flat_params(p).expect("same length");
            let out = model.infer(&orig).expect("forward");
            bce_oracle(&out.logits, &targets) + lambda * target.value(&out.projected).expect("regularizer")
        },
        &theta,
    )
}
