//! Finite-difference suite over every hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{relu, relu_backward, BatchNorm, Linear, Mode};
use crate::losses::{
    contrastive_loss, infonce, nnclr_loss_from_neighbors, nnsiam_loss, simclr_loss,
};
use crate::model::{EncoderSpec, Model};
use crate::numerics::{
    finite_difference_gradient, l2_normalize, max_relative_error, softmax_cross_entropy, Matrix,
    NormalizedRows, DEFAULT_FD_STEP,
};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub component: &'static str,
    pub seeds: usize,
    pub worst_rel_err: f64,
    pub passed: bool,
}

type Check = fn(u64) -> Result<f64>;

pub const COMPONENTS: [(&str, Check); 12] = [
    ("softmax_cross_entropy", check_cross_entropy),
    ("l2_normalize", check_normalize),
    ("linear", check_linear),
    ("batchnorm", check_batchnorm),
    ("relu", check_relu),
    ("infonce", check_infonce),
    ("simclr_loss", check_simclr),
    ("contrastive_symmetric", check_symmetric),
    ("nnclr_loss", check_nnclr),
    ("nnsiam_loss", check_nnsiam),
    ("prediction_head", check_prediction),
    ("encode_loss_composition", check_composition),
];

/// Runs every component over `seeds` seeds.
pub fn run_gradcheck(seeds: usize) -> Result<Vec<GradcheckReport>> {
    COMPONENTS
        .iter()
        .map(|&(component, check)| {
            let mut worst = 0.0f64;
            for s in 0..seeds as u64 {
                worst = worst.max(check(s)?);
            }
            Ok(GradcheckReport {
                component,
                seeds,
                worst_rel_err: worst,
                passed: worst < GRADCHECK_TOLERANCE,
            })
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6772_6164 ^ seed)
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn fd(f: impl FnMut(&Matrix<f64>) -> f64, x: &Matrix<f64>) -> Matrix<f64> {
    finite_difference_gradient(f, x, DEFAULT_FD_STEP)
}

fn err(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<f64> {
    max_relative_error(a, b)
}

fn check_cross_entropy(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let logits = random(5, 7, &mut r).scaled(4.0);
    let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..7)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels)?;
    err(
        &g,
        &fd(|m| softmax_cross_entropy(m, &labels).unwrap().0, &logits),
    )
}

fn check_normalize(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let x = random(4, 6, &mut r);
    let c = random(4, 6, &mut r);
    let g = NormalizedRows::new(&x, 1e-12)?.backward(&c)?;
    err(
        &g,
        &fd(|m| l2_normalize(m, 1e-12).unwrap().dot(&c).unwrap(), &x),
    )
}

fn check_linear(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut layer = Linear::<f64>::new("l", 3, 5, true, &mut r);
    layer.bias.as_mut().unwrap().values = random(1, 5, &mut r);
    let x = random(4, 3, &mut r);
    let c = random(4, 5, &mut r);
    let gx = layer.backward(&x, &c)?;
    let base = layer.clone();
    let mut worst = err(&gx, &fd(|m| base.forward(m).unwrap().dot(&c).unwrap(), &x))?;
    let w = &base.weight.values;
    let nw = fd(
        |m| {
            let mut l = base.clone();
            l.weight.values = m.clone();
            l.forward(&x).unwrap().dot(&c).unwrap()
        },
        w,
    );
    worst = worst.max(err(&layer.weight.grads, &nw)?);
    let b = &base.bias.as_ref().unwrap().values;
    let nb = fd(
        |m| {
            let mut l = base.clone();
            l.bias.as_mut().unwrap().values = m.clone();
            l.forward(&x).unwrap().dot(&c).unwrap()
        },
        b,
    );
    Ok(worst.max(err(&layer.bias.as_ref().unwrap().grads, &nb)?))
}

fn check_batchnorm(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut bn = BatchNorm::<f64>::new("bn", 5);
    bn.gain.values = random(1, 5, &mut r).map(|v| v + 1.5);
    bn.bias.values = random(1, 5, &mut r);
    let x = random(8, 5, &mut r).scaled(2.0);
    let c = random(8, 5, &mut r);
    let base = bn.clone();
    let (_, cache) = bn.forward_train(&x)?;
    let gx = bn.backward(&cache, &c)?;
    let eval = |b: &BatchNorm<f64>, m: &Matrix<f64>| {
        b.clone().forward_train(m).unwrap().0.dot(&c).unwrap()
    };
    let mut worst = err(&gx, &fd(|m| eval(&base, m), &x))?;
    let ng = fd(
        |m| {
            let mut b = base.clone();
            b.gain.values = m.clone();
            eval(&b, &x)
        },
        &base.gain.values,
    );
    worst = worst.max(err(&bn.gain.grads, &ng)?);
    let nb = fd(
        |m| {
            let mut b = base.clone();
            b.bias.values = m.clone();
            eval(&b, &x)
        },
        &base.bias.values,
    );
    Ok(worst.max(err(&bn.bias.grads, &nb)?))
}

fn check_relu(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let x = Matrix::from_fn(6, 5, |_, _| loop {
        let v: f64 = r.random_range(-1.0..1.0);
        if v.abs() > 1e-3 {
            break v;
        }
    });
    let c = random(6, 5, &mut r);
    let g = relu_backward(&relu(&x), &c)?;
    err(&g, &fd(|m| relu(m).dot(&c).unwrap(), &x))
}

fn check_infonce(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (q, p, n) = (
        random(1, 6, &mut r),
        random(1, 6, &mut r),
        random(5, 6, &mut r),
    );
    let out = infonce(&q, &p, &n, 0.2)?;
    let worst = err(
        &out.grad_query,
        &fd(|m| infonce(m, &p, &n, 0.2).unwrap().loss, &q),
    )?;
    let worst = worst.max(err(
        &out.grad_positive,
        &fd(|m| infonce(&q, m, &n, 0.2).unwrap().loss, &p),
    )?);
    Ok(worst.max(err(
        &out.grad_negatives,
        &fd(|m| infonce(&q, &p, m, 0.2).unwrap().loss, &n),
    )?))
}

fn check_simclr(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (z1, z2) = (random(4, 8, &mut r), random(4, 8, &mut r));
    let out = simclr_loss(&z1, &z2, 0.1)?;
    let a = err(
        &out.grad_z1,
        &fd(|m| simclr_loss(m, &z2, 0.1).unwrap().loss, &z1),
    )?;
    Ok(a.max(err(
        &out.grad_z2,
        &fd(|m| simclr_loss(&z1, m, 0.1).unwrap().loss, &z2),
    )?))
}

fn check_symmetric(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (a, p) = (random(5, 4, &mut r), random(5, 4, &mut r));
    let out = contrastive_loss(&a, &p, 0.1, true)?;
    let e = err(
        &out.grad_anchor,
        &fd(|m| contrastive_loss(m, &p, 0.1, true).unwrap().loss, &a),
    )?;
    Ok(e.max(err(
        &out.grad_positive,
        &fd(|m| contrastive_loss(&a, m, 0.1, true).unwrap().loss, &p),
    )?))
}

fn check_nnclr(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (n1, n2, p1, p2) = (
        random(4, 6, &mut r),
        random(4, 6, &mut r),
        random(4, 6, &mut r),
        random(4, 6, &mut r),
    );
    let sym = seed % 2 == 1;
    let out = nnclr_loss_from_neighbors(&n1, &n2, &p1, &p2, 0.1, sym)?;
    let f1 = |m: &Matrix<f64>| {
        nnclr_loss_from_neighbors(&n1, &n2, m, &p2, 0.1, sym)
            .unwrap()
            .loss
    };
    let f2 = |m: &Matrix<f64>| {
        nnclr_loss_from_neighbors(&n1, &n2, &p1, m, 0.1, sym)
            .unwrap()
            .loss
    };
    Ok(err(&out.grad_p1, &fd(f1, &p1))?.max(err(&out.grad_p2, &fd(f2, &p2))?))
}

fn check_nnsiam(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (p1, p2, n1, n2) = (
        random(4, 6, &mut r),
        random(4, 6, &mut r),
        random(4, 6, &mut r),
        random(4, 6, &mut r),
    );
    let out = nnsiam_loss(&p1, &p2, &n1, &n2)?;
    let f1 = |m: &Matrix<f64>| nnsiam_loss(m, &p2, &n1, &n2).unwrap().loss;
    let f2 = |m: &Matrix<f64>| nnsiam_loss(&p1, m, &n1, &n2).unwrap().loss;
    Ok(err(&out.grad_p1, &fd(f1, &p1))?.max(err(&out.grad_p2, &fd(f2, &p2))?))
}

fn tiny_spec() -> EncoderSpec {
    EncoderSpec {
        input_dim: 5,
        backbone_dims: vec![6],
        feature_dim: 6,
        projection_dims: [6, 6, 4],
        prediction_dims: [7, 4],
        use_prediction_head: true,
    }
}

fn check_prediction(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut model = Model::<f64>::new(tiny_spec(), &mut r)?;
    let z = random(4, 4, &mut r);
    let c = random(4, 4, &mut r);
    let base = model.clone();
    let (_, tape) = model.predict(&z, Mode::Train)?;
    let gz = model.backward_prediction(tape.as_ref(), &c)?;
    let value =
        |m: &mut Model<f64>, z: &Matrix<f64>| m.predict(z, Mode::Train).unwrap().0.dot(&c).unwrap();
    let mut worst = err(&gz, &fd(|m| value(&mut base.clone(), m), &z))?;
    worst = worst.max(param_error(&base, &model, |m| value(m, &z))?);
    Ok(worst)
}

/// Loss of the full two-view NNCLR step (with a SimCLR term on `z` so the
/// projection output also receives a direct gradient) as a function of the
/// model parameters.
fn composite_loss(
    m: &mut Model<f64>,
    x1: &Matrix<f64>,
    x2: &Matrix<f64>,
    nn: (&Matrix<f64>, &Matrix<f64>),
) -> Result<(f64, Matrix<f64>, Matrix<f64>)> {
    let e1 = m.encode(x1, Mode::Train)?;
    let e2 = m.encode(x2, Mode::Train)?;
    let (p1, t1) = m.predict(&e1.z, Mode::Train)?;
    let (p2, t2) = m.predict(&e2.z, Mode::Train)?;
    let a = nnclr_loss_from_neighbors(nn.0, nn.1, &p1, &p2, 0.5, false)?;
    let b = simclr_loss(&e1.z, &e2.z, 0.5)?;
    let mut g1 = m.backward_prediction(t1.as_ref(), &a.grad_p1)?;
    let mut g2 = m.backward_prediction(t2.as_ref(), &a.grad_p2)?;
    g1.add_assign(&b.grad_z1)?;
    g2.add_assign(&b.grad_z2)?;
    let gx1 = m.backward_encoder(e1.tape.as_ref().expect("tape"), &g1)?;
    let gx2 = m.backward_encoder(e2.tape.as_ref().expect("tape"), &g2)?;
    Ok((a.loss + b.loss, gx1, gx2))
}

fn check_composition(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut model = Model::<f64>::new(tiny_spec(), &mut r)?;
    let (x1, x2) = (random(4, 5, &mut r), random(4, 5, &mut r));
    let (n1, n2) = (random(4, 4, &mut r), random(4, 4, &mut r));
    let base = model.clone();
    let (_, gx1, _) = composite_loss(&mut model, &x1, &x2, (&n1, &n2))?;
    let value =
        |m: &mut Model<f64>, x: &Matrix<f64>| composite_loss(m, x, &x2, (&n1, &n2)).unwrap().0;
    let worst = err(&gx1, &fd(|x| value(&mut base.clone(), x), &x1))?;
    Ok(worst.max(param_error(&base, &model, |m| value(m, &x1))?))
}

/// Compares accumulated parameter gradients in `after` with central
/// differences of `f` around the parameters of `before`.
fn param_error(
    before: &Model<f64>,
    after: &Model<f64>,
    mut f: impl FnMut(&mut Model<f64>) -> f64,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, p) in after.params().enumerate() {
        let numeric = fd(
            |values| {
                let mut m = before.clone();
                m.params_mut().nth(i).expect("same layout").values = values.clone();
                f(&mut m)
            },
            &before.params().nth(i).expect("same layout").values,
        );
        worst = worst.max(err(&p.grads, &numeric)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes_on_ten_seeds() {
        for report in run_gradcheck(10).unwrap() {
            assert!(report.passed, "{report:?}");
        }
    }
}
