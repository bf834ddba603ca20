mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssql::nn::{build_model, forward_encoder, BnUse};
use ssql::quant::fake_quant;
use ssql::tensor::{Tape, Tensor};

use common::{tiny_spec, GRADCHECK_CASES};

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd]: [usize; 4] = x.shape().try_into().unwrap();
    let [o, _, k, _]: [usize; 4] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let (y, xx) = (
                                    (i * stride + ki) as isize - pad as isize,
                                    (j * stride + kj) as isize - pad as isize,
                                );
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((b * c + ic) * h + y as usize) * wd + xx as usize];
                                let wv = w.data()[((oc * c + ic) * k + ki) * k + kj];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

#[test]
fn every_op_passes_gradcheck_on_ten_seeds() {
    for (name, eps, case) in GRADCHECK_CASES {
        for seed in 0..10 {
            let report = case(seed, *eps).unwrap();
            assert!(report.passed, "{name} seed {seed}: {report:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_naive_loops(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..8, stride in 1usize..3, pad in 0usize..2,
    ) {
        prop_assume!((h + 2 * pad - 3) % stride == 0);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, c, h, h], &mut r);
        let w = Tensor::randn(&[o, c, 3, 3], &mut r);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        let expect = naive_conv(&x, &w, stride, pad);
        prop_assert_eq!(tape.value(y).shape(), expect.shape());
        for (a, b) in tape.value(y).data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn matmul_matches_naive_loops(seed in any::<u64>(), m in 1usize..9, k in 1usize..9, n in 1usize..9) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[m, k], &mut r);
        let b = Tensor::randn(&[k, n], &mut r);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                prop_assert!((tape.value(c).data()[i * n + j] - want).abs() <= 1e-5 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(seed in any::<u64>(), n in 1usize..6, d in 1usize..10, scale in 1e-3f32..1e3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, d], &mut r).map(|v| v * scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.l2_normalize(xv).unwrap();
        for row in tape.value(y).rows() {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-5, "norm {}", norm);
        }
    }

    #[test]
    fn fake_quant_gradient_is_exactly_one(seed in any::<u64>(), len in 1usize..40, bits in 2u32..9) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[len], &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let q = fake_quant(&mut tape, xv, bits).unwrap();
        let s = tape.sum(q);
        tape.backward(s).unwrap();
        prop_assert!(tape.grad(xv).unwrap().data().iter().all(|&g| g == 1.0));
    }
}

#[test]
fn gradient_behind_stop_gradient_is_exactly_zero() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::randn(&[4, 3], &mut r), true);
    let b = tape.leaf(Tensor::randn(&[4, 3], &mut r), true);
    let sa = tape.stop_gradient(a);
    let prod = tape.mul(sa, b).unwrap();
    let only_sg = tape.sum(prod);
    let stopped_b = tape.stop_gradient(b);
    let both = tape.mul(only_sg, only_sg).unwrap();
    let extra = tape.sum(stopped_b);
    let loss = tape.add(both, extra).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape
        .grad(a)
        .is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    assert!(tape.grad(b).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn encoder_forward_and_gradients_are_deterministic() {
    let spec = tiny_spec(8, &[4, 8]);
    let params = build_model(&spec, 11).unwrap();
    let x = Tensor::randn(&[3, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(2));
    let run = || {
        let mut stats = params.running_stats().to_vec();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| true);
        let xv = tape.constant(x.clone());
        let mut bn = BnUse::TrainUpdate(&mut stats);
        let z = forward_encoder(&mut tape, &spec, &bound, &mut bn, None, xv).unwrap();
        let loss = tape.sum(z);
        let value = tape.value(z).clone();
        tape.backward(loss).unwrap();
        let grads: Vec<Option<Tensor>> = bound
            .vars()
            .iter()
            .map(|&v| tape.grad(v).cloned())
            .collect();
        (value, grads, stats)
    };
    assert_eq!(run(), run());
}
