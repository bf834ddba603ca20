#![allow(clippy::needless_range_loop)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Float, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` seen.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub passed: bool,
}

/// Checks the adjoints of `f` at `inputs`.
///
/// The (possibly non-scalar) output of `f` is contracted with a fixed random
/// probe tensor, so every output element contributes to the checked
/// gradient. The numeric side accumulates in `f64` and extrapolates central
/// differences at `eps` and `eps / 2`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: Float, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let probe = Tensor::randn(tape.shape(out), &mut rng);
    let probe_var = tape.constant(probe.clone());
    let weighted = tape.mul(out, probe_var)?;
    let loss = tape.sum(weighted);
    tape.backward(loss)?;
    let analytic: Vec<Vec<Float>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(&o, &p)| o as f64 * p as f64)
            .sum())
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            let mut central = |h: Float| -> Result<f64> {
                let (hi, lo) = (x + h, x - h);
                work[i].data_mut()[j] = hi;
                let f_hi = eval(&work)?;
                work[i].data_mut()[j] = lo;
                let f_lo = eval(&work)?;
                work[i].data_mut()[j] = x;
                Ok((f_hi - f_lo) / (hi as f64 - lo as f64))
            };
            // Richardson extrapolation cancels the O(h^2) truncation term.
            let (coarse, fine) = (central(eps)?, central(eps / 2.0)?);
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic[i][j] as f64;
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::{gemm, Mat};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_layer_passes() {
        let mut r = rng(7);
        let x = Tensor::randn(&[3, 4], &mut r);
        let w = Tensor::randn(&[4, 2], &mut r);
        let b = Tensor::randn(&[2], &mut r);
        let report = gradcheck(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                t.add_bias(y, v[2])
            },
            &[x, w, b],
            1e-1,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let mut r = rng(8);
        let x = Tensor::randn(&[10], &mut r).map(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
        let report = gradcheck(|t, v| Ok(t.relu(v[0])), &[x], 1e-3, 1e-3).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn wrong_matmul_adjoint_fails() {
        let mut r = rng(9);
        let a = Tensor::randn(&[3, 3], &mut r);
        let b = Tensor::randn(&[3, 3], &mut r);
        let report = gradcheck(
            |t, v| {
                let (av, bv) = (t.value(v[0]).clone(), t.value(v[1]).clone());
                let mut out = vec![0.0; 9];
                gemm(
                    Mat::new(av.data(), 3, 3),
                    Mat::new(bv.data(), 3, 3),
                    &mut out,
                    0.0,
                );
                let value = Tensor::new(vec![3, 3], out)?;
                Ok(t.custom(
                    &[v[0], v[1]],
                    value,
                    Box::new(|inputs, _out, g| {
                        // dA = dC·B (should be dC·Bᵀ)
                        let mut da = vec![0.0; 9];
                        gemm(
                            Mat::new(g, 3, 3),
                            Mat::new(inputs[1].data(), 3, 3),
                            &mut da,
                            0.0,
                        );
                        let mut db = vec![0.0; 9];
                        gemm(
                            Mat::new(inputs[0].data(), 3, 3).t(),
                            Mat::new(g, 3, 3),
                            &mut db,
                            0.0,
                        );
                        vec![da, db]
                    }),
                ))
            },
            &[a, b],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
