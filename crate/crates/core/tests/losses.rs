mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssql::nn::{build_model, forward_encoder, forward_predictor, BnUse};
use ssql::quant::{psq_refresh, QuantPlan};
use ssql::ssl::{
    cross_nce_loss, info_nce_loss, neg_cosine, simsiam_loss, ssql_aux_loss, ssql_loss,
};
use ssql::tensor::{Tape, Tensor, Var};

use common::tiny_spec;

fn batch(seed: u64, n: usize, d: usize) -> Vec<Tensor> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..6).map(|_| Tensor::randn(&[n, d], &mut r)).collect()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let data = perm
        .iter()
        .flat_map(|&i| t.data()[i * d..(i + 1) * d].to_vec())
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Every loss evaluated on the same six `[n, d]` inputs.
fn all_losses(inputs: &[Tensor]) -> Vec<f32> {
    let mut tape = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let ls = [
        neg_cosine(&mut tape, v[0], v[1]).unwrap(),
        simsiam_loss(&mut tape, v[0], v[1], v[2], v[3]).unwrap(),
        ssql_loss(&mut tape, v[4], v[5], v[2], v[3]).unwrap(),
        ssql_aux_loss(&mut tape, v[0], v[1], v[4], v[5], v[2], v[3]).unwrap(),
        info_nce_loss(&mut tape, v[0], v[1], 0.5).unwrap(),
        cross_nce_loss(&mut tape, v[4], v[5], v[2], v[3], 0.5).unwrap(),
    ];
    ls.iter().map(|&l| tape.value(l).item().unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn losses_stay_in_range(seed in any::<u64>(), n in 2usize..9, d in 1usize..12) {
        let l = all_losses(&batch(seed, n, d));
        let tol = 1e-5;
        prop_assert!((-1.0 - tol..=1.0 + tol).contains(&l[0]));
        prop_assert!((-2.0 - tol..=2.0 + tol).contains(&l[1]));
        prop_assert!((-2.0 - tol..=2.0 + tol).contains(&l[2]));
        prop_assert!((-4.0 - tol..=4.0 + tol).contains(&l[3]));
        prop_assert!(l[4] >= -tol && l[5] >= -tol);
    }

    #[test]
    fn losses_are_batch_order_invariant(seed in any::<u64>(), n in 2usize..9, d in 1usize..12) {
        let inputs = batch(seed, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let permuted: Vec<Tensor> = inputs.iter().map(|t| permute_rows(t, &perm)).collect();
        for (a, b) in all_losses(&inputs).iter().zip(all_losses(&permuted)) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn quantized_terms_collapse_to_simsiam_at_full_precision(seed in any::<u64>(), n in 1usize..9, d in 1usize..12) {
        let x = batch(seed, n, d);
        let mut tape = Tape::new();
        let v: Vec<Var> = x.iter().map(|t| tape.constant(t.clone())).collect();
        let sim = simsiam_loss(&mut tape, v[0], v[1], v[2], v[3]).unwrap();
        let ssql = ssql_loss(&mut tape, v[0], v[1], v[2], v[3]).unwrap();
        let aux = ssql_aux_loss(&mut tape, v[0], v[1], v[0], v[1], v[2], v[3]).unwrap();
        let (s, q, a) = (tape.value(sim).item().unwrap(), tape.value(ssql).item().unwrap(), tape.value(aux).item().unwrap());
        prop_assert!((s - q).abs() <= 1e-6);
        prop_assert!((a - 2.0 * s).abs() <= 1e-5);
    }

    #[test]
    fn no_gradient_reaches_stop_gradient_targets(seed in any::<u64>(), n in 2usize..6, d in 1usize..8) {
        let x = batch(seed, n, d);
        let mut tape = Tape::new();
        let v: Vec<Var> = x.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let (p1, p2, z1, z2, pq1, pq2) = (v[0], v[1], v[2], v[3], v[4], v[5]);
        let a = simsiam_loss(&mut tape, p1, p2, z1, z2).unwrap();
        let b = ssql_aux_loss(&mut tape, p1, p2, pq1, pq2, z1, z2).unwrap();
        // cross-NCE candidates are stopped by the caller, as in the training step
        let (t1, t2) = (tape.stop_gradient(z1), tape.stop_gradient(z2));
        let c = cross_nce_loss(&mut tape, pq1, pq2, t1, t2, 0.5).unwrap();
        let ab = tape.add(a, b).unwrap();
        let loss = tape.add(ab, c).unwrap();
        tape.backward(loss).unwrap();
        for z in [z1, z2] {
            prop_assert!(tape.grad(z).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
        }
    }
}

#[test]
fn disabled_quantization_is_bit_identical_to_plain_forward() {
    for seed in 0..20 {
        let spec = tiny_spec(8, &[4, 8]);
        let params = build_model(&spec, seed).unwrap();
        let x = Tensor::randn(&[4, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(seed + 100));
        let mut outs = Vec::new();
        for quantized in [false, true] {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| true);
            let xv = tape.constant(x.clone());
            let view = psq_refresh(&params, &QuantPlan::disabled());
            let mut bn = BnUse::TrainFrozen;
            let z = forward_encoder(
                &mut tape,
                &spec,
                &bound,
                &mut bn,
                quantized.then_some(&view),
                xv,
            )
            .unwrap();
            let p = forward_predictor(&mut tape, &bound, &mut bn, z).unwrap();
            outs.push((tape.value(z).clone(), tape.value(p).clone()));
        }
        assert_eq!(outs[0], outs[1], "seed {seed}");
    }
}
