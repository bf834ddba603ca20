#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssql::data::{gen_synthetic, Dataset, SyntheticSpec};
use ssql::diag::decompose;
use ssql::error::Result;
use ssql::nn::build_model;
use ssql::nn::{Backbone, ModelSpec};
use ssql::quant::Precision;
use ssql::ssl::{cross_nce_loss, info_nce_loss, neg_cosine, simsiam_loss, ssql_aux_loss};
use ssql::tensor::{gradcheck, BatchNormMode, GradcheckReport, RunningStats, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-3;

type Case = fn(u64, f32) -> Result<GradcheckReport>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, r)
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn check(
    eps: f32,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
) -> Result<GradcheckReport> {
    gradcheck(f, inputs, eps, GRAD_TOL)
}

fn matmul(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
    check(
        eps,
        |t, v| t.matmul(v[0], v[1]),
        &[randn(&[m, k], r), randn(&[k, n], r)],
    )
}

fn transpose(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (m, n) = (dim(r, 1, 5), dim(r, 1, 5));
    check(eps, |t, v| t.transpose(v[0]), &[randn(&[m, n], r)])
}

fn elementwise(
    seed: u64,
    eps: f32,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let shape = [dim(r, 1, 4), dim(r, 1, 4)];
    check(
        eps,
        |t, v| op(t, v[0], v[1]),
        &[randn(&shape, r), randn(&shape, r)],
    )
}

fn add(seed: u64, eps: f32) -> Result<GradcheckReport> {
    elementwise(seed, eps, |t, a, b| t.add(a, b))
}

fn sub(seed: u64, eps: f32) -> Result<GradcheckReport> {
    elementwise(seed, eps, |t, a, b| t.sub(a, b))
}

fn mul(seed: u64, eps: f32) -> Result<GradcheckReport> {
    elementwise(seed, eps, |t, a, b| t.mul(a, b))
}

fn scale(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let factor: f32 = r.random_range(-3.0..3.0);
    let x = randn(&[dim(r, 1, 6)], r);
    check(eps, |t, v| Ok(t.scale(v[0], factor)), &[x])
}

fn add_bias(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, c) = (dim(r, 1, 5), dim(r, 1, 5));
    check(
        eps,
        |t, v| t.add_bias(v[0], v[1]),
        &[randn(&[n, c], r), randn(&[c], r)],
    )
}

fn relu(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let x = randn(&[dim(r, 1, 12)], r).map(|v| {
        if v.abs() < 0.05 {
            v + 0.1f32.copysign(v)
        } else {
            v
        }
    });
    check(eps, |t, v| Ok(t.relu(v[0])), &[x])
}

fn sum(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let x = randn(&[dim(r, 1, 4), dim(r, 1, 4)], r);
    check(eps, |t, v| Ok(t.sum(v[0])), &[x])
}

fn mean(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let x = randn(&[dim(r, 1, 4), dim(r, 1, 4)], r);
    check(eps, |t, v| Ok(t.mean(v[0])), &[x])
}

fn sum_last_axis(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let x = randn(&[dim(r, 1, 4), dim(r, 1, 5)], r);
    check(eps, |t, v| t.sum_last_axis(v[0]), &[x])
}

fn reshape_flatten(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, c) = (dim(r, 1, 3), dim(r, 1, 3));
    let x = randn(&[n, c, 2, 2], r);
    check(
        eps,
        |t, v| {
            let y = t.reshape(v[0], &[n, c * 4])?;
            let y = t.reshape(y, &[n, c, 2, 2])?;
            t.flatten(y)
        },
        &[x],
    )
}

fn concat_rows(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let d = dim(r, 1, 4);
    let (a, b) = (randn(&[dim(r, 1, 3), d], r), randn(&[dim(r, 1, 3), d], r));
    check(eps, |t, v| t.concat_rows(&[v[0], v[1]]), &[a, b])
}

fn avg_pool2d(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let x = randn(&[dim(r, 1, 2), dim(r, 1, 3), 4, 4], r);
    check(eps, |t, v| t.avg_pool2d(v[0], 2), &[x])
}

fn global_avg_pool(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let x = randn(&[dim(r, 1, 2), dim(r, 1, 3), 3, 3], r);
    check(eps, |t, v| t.global_avg_pool(v[0]), &[x])
}

fn conv2d(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, cin, cout) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
    let stride = dim(r, 1, 2);
    let padding = dim(r, 0, 1);
    let x = randn(&[n, cin, 5, 5], r);
    let w = randn(&[cout, cin, 3, 3], r);
    check(eps, |t, v| t.conv2d(v[0], v[1], stride, padding), &[x, w])
}

fn batchnorm(seed: u64, eps: f32, four_d: bool, mode: BatchNormMode) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, c) = (dim(r, 2, 5), dim(r, 1, 3));
    let x = if four_d {
        randn(&[n, c, 2, 2], r)
    } else {
        randn(&[n, c], r)
    };
    let gamma = randn(&[c], r);
    let beta = randn(&[c], r);
    let mut stats = RunningStats::new(c);
    stats.mean = randn(&[c], r).into_data();
    stats.var = randn(&[c], r).map(|v| 0.5 + v.abs()).into_data();
    check(
        eps,
        |t, v| {
            let mut s = stats.clone();
            t.batchnorm(v[0], v[1], v[2], &mut s, mode, false)
        },
        &[x, gamma, beta],
    )
}

fn batchnorm_train_2d(seed: u64, eps: f32) -> Result<GradcheckReport> {
    batchnorm(seed, eps, false, BatchNormMode::Train)
}

fn batchnorm_train_4d(seed: u64, eps: f32) -> Result<GradcheckReport> {
    batchnorm(seed, eps, true, BatchNormMode::Train)
}

fn batchnorm_eval(seed: u64, eps: f32) -> Result<GradcheckReport> {
    batchnorm(seed, eps, true, BatchNormMode::Eval)
}

fn l2_normalize(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let x = randn(&[dim(r, 1, 4), dim(r, 2, 6)], r);
    check(eps, |t, v| t.l2_normalize(v[0]), &[x])
}

fn softmax_cross_entropy(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, k) = (dim(r, 1, 5), dim(r, 2, 5));
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    check(
        eps,
        |t, v| t.softmax_cross_entropy(v[0], &labels),
        &[randn(&[n, k], r)],
    )
}

fn pair(r: &mut ChaCha8Rng) -> (usize, usize) {
    (dim(r, 2, 5), dim(r, 2, 6))
}

// Targets pass through a stop-gradient inside the losses, so they enter as
// constants and only the prediction side is checked.
fn neg_cosine_case(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, d) = pair(r);
    let z = randn(&[n, d], r);
    check(
        eps,
        |t, v| {
            let z = t.constant(z.clone());
            neg_cosine(t, v[0], z)
        },
        &[randn(&[n, d], r)],
    )
}

fn simsiam_case(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, d) = pair(r);
    let (z1, z2) = (randn(&[n, d], r), randn(&[n, d], r));
    check(
        eps,
        |t, v| {
            let (z1, z2) = (t.constant(z1.clone()), t.constant(z2.clone()));
            simsiam_loss(t, v[0], v[1], z1, z2)
        },
        &[randn(&[n, d], r), randn(&[n, d], r)],
    )
}

fn ssql_aux_case(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, d) = pair(r);
    let (z1, z2) = (randn(&[n, d], r), randn(&[n, d], r));
    let inputs: Vec<Tensor> = (0..4).map(|_| randn(&[n, d], r)).collect();
    check(
        eps,
        |t, v| {
            let (z1, z2) = (t.constant(z1.clone()), t.constant(z2.clone()));
            ssql_aux_loss(t, v[0], v[1], v[2], v[3], z1, z2)
        },
        &inputs,
    )
}

fn info_nce_case(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, d) = pair(r);
    check(
        eps,
        |t, v| info_nce_loss(t, v[0], v[1], 0.5),
        &[randn(&[n, d], r), randn(&[n, d], r)],
    )
}

fn cross_nce_case(seed: u64, eps: f32) -> Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, d) = pair(r);
    let (c1, c2) = (randn(&[n, d], r), randn(&[n, d], r));
    check(
        eps,
        |t, v| {
            let (c1, c2) = (t.constant(c1.clone()), t.constant(c2.clone()));
            cross_nce_loss(t, v[0], v[1], c1, c2, 0.5)
        },
        &[randn(&[n, d], r), randn(&[n, d], r)],
    )
}

/// Every differentiable op with its finite-difference step. Ops that are at
/// most quadratic in each input have no truncation error under central
/// differences and take a large step to keep f32 round-off small; curved ops
/// take the smallest step whose truncation error stays well below tolerance.
pub const GRADCHECK_CASES: &[(&str, f32, Case)] = &[
    ("matmul", 1e-1, matmul),
    ("transpose", 1e-1, transpose),
    ("add", 1e-1, add),
    ("sub", 1e-1, sub),
    ("mul", 1e-1, mul),
    ("scale", 1e-1, scale),
    ("add_bias", 1e-1, add_bias),
    ("relu", 1e-2, relu),
    ("sum", 1e-1, sum),
    ("mean", 1e-1, mean),
    ("sum_last_axis", 1e-1, sum_last_axis),
    ("reshape_flatten", 1e-1, reshape_flatten),
    ("concat_rows", 1e-1, concat_rows),
    ("avg_pool2d", 1e-1, avg_pool2d),
    ("global_avg_pool", 1e-1, global_avg_pool),
    ("conv2d", 1e-1, conv2d),
    ("batchnorm_train_2d", 3e-3, batchnorm_train_2d),
    ("batchnorm_train_4d", 1e-2, batchnorm_train_4d),
    ("batchnorm_eval", 1e-1, batchnorm_eval),
    ("l2_normalize", 1e-2, l2_normalize),
    ("softmax_cross_entropy", 1e-2, softmax_cross_entropy),
    ("neg_cosine", 1e-2, neg_cosine_case),
    ("simsiam_loss", 4e-3, simsiam_case),
    ("ssql_aux_loss", 4e-3, ssql_aux_case),
    ("info_nce_loss", 1e-2, info_nce_case),
    ("cross_nce_loss", 4e-3, cross_nce_case),
];

/// A small tiny-cnn over `size`x`size` RGB images.
pub fn tiny_spec(size: usize, widths: &[usize]) -> ModelSpec {
    ModelSpec {
        backbone: Backbone::TinyCnn,
        widths: widths.to_vec(),
        input: [3, size, size],
        projection_dim: 16,
        predictor_hidden: 8,
    }
}

pub fn small_synthetic(classes: usize, per_class: usize, size: usize, seed: u64) -> Dataset {
    gen_synthetic(&SyntheticSpec {
        classes,
        per_class,
        test_per_class: per_class / 2,
        size,
        seed,
        ..Default::default()
    })
    .expect("valid synthetic spec")
}

/// `total - (Q + CL + cross)` relative to `total`, for one random instance.
pub fn decomposition_gap(seed: u64) -> f32 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let widths = [vec![4, 8], vec![8, 8], vec![4, 8, 8]][r.random_range(0..3)].clone();
    let params = build_model(&tiny_spec(8, &widths), seed).unwrap();
    let b = r.random_range(2..8);
    let x1 = Tensor::randn(&[b, 3, 8, 8], &mut r);
    let x2 = Tensor::randn(&[b, 3, 8, 8], &mut r);
    let p = Precision::from_pair(r.random_range(2..=8), r.random_range(2..=8)).unwrap();
    let rec = decompose(&params, &x1, &x2, p).unwrap();
    (rec.total - (rec.q_term + rec.cl_term + rec.cross_term)).abs()
        / rec.total.abs().max(f32::MIN_POSITIVE)
}
