//! Siamese objectives: negative cosine similarity, the SimSiam loss, its
//! quantized-prediction counterpart, the auxiliary combination and NT-Xent.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Full-precision siamese loss only.
    SimSiam,
    /// Quantized predictions against full-precision targets.
    Ssql,
    /// `Ssql` plus the full-precision siamese loss.
    SsqlAux,
    /// NT-Xent with quantized anchors against full-precision candidates.
    SsqlNce,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::SimSiam => "simsiam",
            LossVariant::Ssql => "ssql",
            LossVariant::SsqlAux => "ssql_aux",
            LossVariant::SsqlNce => "ssql_nce",
        }
    }

    pub fn uses_quantization(self) -> bool {
        self != LossVariant::SimSiam
    }

    /// Weight decay listed for the method's CIFAR recipe.
    pub fn default_weight_decay(self) -> Float {
        match self {
            LossVariant::SimSiam => 5e-4,
            _ => 1e-4,
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "simsiam" => Ok(LossVariant::SimSiam),
            "ssql" => Ok(LossVariant::Ssql),
            "ssql_aux" | "ssql-aux" => Ok(LossVariant::SsqlAux),
            "ssql_nce" | "ssql-nce" => Ok(LossVariant::SsqlNce),
            other => Err(Error::Config(format!("unknown loss variant '{other}'"))),
        }
    }
}

/// Source of the negatives in the quantized NT-Xent loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NceNegatives {
    FullPrecision,
    Quantized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// NT-Xent temperature.
    pub temperature: Float,
    /// Predictions come from the quantized encoder.
    pub quantize_pred: bool,
    /// Targets come from the quantized encoder.
    pub quantize_target: bool,
    pub nce_negatives: NceNegatives,
    /// Adds the full-precision NT-Xent term to `SsqlNce`.
    pub nce_aux: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(LossVariant::SsqlAux)
    }
}

impl LossConfig {
    pub fn new(variant: LossVariant) -> Self {
        Self {
            variant,
            temperature: 0.5,
            quantize_pred: true,
            quantize_target: false,
            nce_negatives: NceNegatives::FullPrecision,
            nce_aux: true,
        }
    }

    /// Whether the full-precision term is part of the objective.
    pub fn aux(&self) -> bool {
        match self.variant {
            LossVariant::SimSiam | LossVariant::SsqlAux => true,
            LossVariant::Ssql => false,
            LossVariant::SsqlNce => self.nce_aux,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) || tape.shape(a).len() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// `D(p, z)`: batch mean of `-<p/|p|, z/|z|>`. Applies no stop-gradient.
pub fn neg_cosine(tape: &mut Tape, p: Var, z: Var) -> Result<Var> {
    check_pair("neg_cosine", tape, p, z)?;
    let pn = tape.l2_normalize(p)?;
    let zn = tape.l2_normalize(z)?;
    let prod = tape.mul(pn, zn)?;
    let cos = tape.sum_last_axis(prod)?;
    let mean = tape.mean(cos);
    Ok(tape.scale(mean, -1.0))
}

/// Symmetric predictor-vs-target loss with both targets gradient-stopped.
fn symmetric(tape: &mut Tape, op: &'static str, p1: Var, p2: Var, z1: Var, z2: Var) -> Result<Var> {
    check_pair(op, tape, p1, p2)?;
    check_pair(op, tape, p1, z1)?;
    check_pair(op, tape, p1, z2)?;
    let t2 = tape.stop_gradient(z2);
    let t1 = tape.stop_gradient(z1);
    let a = neg_cosine(tape, p1, t2)?;
    let b = neg_cosine(tape, p2, t1)?;
    tape.add(a, b)
}

/// `D(p1, SG(z2)) + D(p2, SG(z1))`.
pub fn simsiam_loss(tape: &mut Tape, p1: Var, p2: Var, z1: Var, z2: Var) -> Result<Var> {
    symmetric(tape, "simsiam_loss", p1, p2, z1, z2)
}

/// `D(pq1, SG(z2)) + D(pq2, SG(z1))` with predictions from the quantized
/// encoder and targets from the full-precision one.
pub fn ssql_loss(tape: &mut Tape, pq1: Var, pq2: Var, z1: Var, z2: Var) -> Result<Var> {
    symmetric(tape, "ssql_loss", pq1, pq2, z1, z2)
}

/// Equal-weight sum of [`simsiam_loss`] and [`ssql_loss`].
pub fn ssql_aux_loss(
    tape: &mut Tape,
    p1: Var,
    p2: Var,
    pq1: Var,
    pq2: Var,
    z1: Var,
    z2: Var,
) -> Result<Var> {
    let fp = simsiam_loss(tape, p1, p2, z1, z2)?;
    let q = ssql_loss(tape, pq1, pq2, z1, z2)?;
    tape.add(fp, q)
}

/// NT-Xent between anchors and candidates that share the sample order.
///
/// Rows `[a1; a2]` are scored against `[c1; c2]` scaled by `1/temperature`.
/// The positive of anchor `i` is the other view of sample `i`; the same-view
/// slot of sample `i` is excluded and the remaining `2B - 2` rows are negatives.
pub fn cross_nce_loss(
    tape: &mut Tape,
    a1: Var,
    a2: Var,
    c1: Var,
    c2: Var,
    temperature: Float,
) -> Result<Var> {
    let (anchors, b) = nce_anchors(tape, a1, a2, c1, c2, temperature)?;
    let cands = tape.concat_rows(&[c1, c2])?;
    let cands = tape.l2_normalize(cands)?;
    let cands_t = tape.transpose(cands)?;
    let sims = tape.matmul(anchors, cands_t)?;
    nce_from_similarities(tape, sims, b, temperature)
}

/// [`cross_nce_loss`] with positives taken from `[c1; c2]` and every
/// negative slot scored against `[n1; n2]` instead.
pub fn cross_nce_loss_with_negatives(
    tape: &mut Tape,
    (a1, a2): (Var, Var),
    (c1, c2): (Var, Var),
    (n1, n2): (Var, Var),
    temperature: Float,
) -> Result<Var> {
    let (anchors, b) = nce_anchors(tape, a1, a2, c1, c2, temperature)?;
    check_pair("nce_loss", tape, a1, n1)?;
    check_pair("nce_loss", tape, a1, n2)?;
    let n = 2 * b;
    let negs = tape.concat_rows(&[n1, n2])?;
    let negs = tape.l2_normalize(negs)?;
    let negs_t = tape.transpose(negs)?;
    let neg_sims = tape.matmul(anchors, negs_t)?;
    // positive of row i sits in column (i + B) % 2B
    let swapped = tape.concat_rows(&[c2, c1])?;
    let swapped = tape.l2_normalize(swapped)?;
    let prod = tape.mul(anchors, swapped)?;
    let pos = tape.sum_last_axis(prod)?;
    let pos = tape.reshape(pos, &[n, 1])?;
    let ones = tape.constant(Tensor::ones(&[1, n]));
    let pos = tape.matmul(pos, ones)?;
    let mut pos_mask = Tensor::zeros(&[n, n]);
    for i in 0..n {
        pos_mask.data_mut()[i * n + (i + b) % n] = 1.0;
    }
    let neg_mask = tape.constant(pos_mask.map(|m| 1.0 - m));
    let pos_mask = tape.constant(pos_mask);
    let pos = tape.mul(pos, pos_mask)?;
    let neg = tape.mul(neg_sims, neg_mask)?;
    let sims = tape.add(pos, neg)?;
    nce_from_similarities(tape, sims, b, temperature)
}

fn nce_anchors(
    tape: &mut Tape,
    a1: Var,
    a2: Var,
    c1: Var,
    c2: Var,
    temperature: Float,
) -> Result<(Var, usize)> {
    check_pair("nce_loss", tape, a1, a2)?;
    check_pair("nce_loss", tape, a1, c1)?;
    check_pair("nce_loss", tape, a1, c2)?;
    let b = tape.shape(a1)[0];
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "NT-Xent needs a batch of at least 2, got {b}"
        )));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let anchors = tape.concat_rows(&[a1, a2])?;
    Ok((tape.l2_normalize(anchors)?, b))
}

fn nce_from_similarities(tape: &mut Tape, sims: Var, b: usize, temperature: Float) -> Result<Var> {
    let logits = tape.scale(sims, 1.0 / temperature);
    let n = 2 * b;
    let mut mask = Tensor::zeros(&[n, n]);
    for i in 0..n {
        mask.data_mut()[i * n + i] = -1e9;
    }
    let mask = tape.constant(mask);
    let logits = tape.add(logits, mask)?;
    let labels: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    tape.softmax_cross_entropy(logits, &labels)
}

/// Symmetric NT-Xent over the `2B` embeddings of two views.
pub fn info_nce_loss(tape: &mut Tape, z1: Var, z2: Var, temperature: Float) -> Result<Var> {
    cross_nce_loss(tape, z1, z2, z1, z2, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn var(tape: &mut Tape, rows: &[&[Float]]) -> Var {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.constant(Tensor::new(vec![rows.len(), d], data).unwrap())
    }

    fn value(tape: &Tape, v: Var) -> Float {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn neg_cosine_extremes() {
        let mut tape = Tape::new();
        let p = var(&mut tape, &[&[1.0, 2.0], &[3.0, -1.0]]);
        let same = neg_cosine(&mut tape, p, p).unwrap();
        assert!((value(&tape, same) + 1.0).abs() < 1e-6);
        let q = var(&mut tape, &[&[-2.0, 1.0], &[1.0, 3.0]]);
        let orth = neg_cosine(&mut tape, p, q).unwrap();
        assert!(value(&tape, orth).abs() < 1e-6);
        let neg = tape.scale(p, -1.0);
        let opp = neg_cosine(&mut tape, p, neg).unwrap();
        assert!((value(&tape, opp) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn simsiam_aligned_and_orthogonal() {
        let mut tape = Tape::new();
        let a = var(&mut tape, &[&[1.0, 0.0]]);
        let b = var(&mut tape, &[&[0.0, 1.0]]);
        let aligned = simsiam_loss(&mut tape, a, b, b, a).unwrap();
        assert!((value(&tape, aligned) + 2.0).abs() < 1e-6);
        let orth = simsiam_loss(&mut tape, a, b, a, b).unwrap();
        assert!(value(&tape, orth).abs() < 1e-6);
        let ssql = ssql_loss(&mut tape, a, b, b, a).unwrap();
        assert!((value(&tape, ssql) + 2.0).abs() < 1e-6);
        let aux = ssql_aux_loss(&mut tape, a, b, a, b, b, a).unwrap();
        assert!((value(&tape, aux) + 4.0).abs() < 1e-6);
    }

    #[test]
    fn targets_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..4)
            .map(|_| tape.leaf(Tensor::randn(&[3, 4], &mut rng), true))
            .collect();
        let loss = ssql_loss(&mut tape, vars[0], vars[1], vars[2], vars[3]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(vars[0]).is_some() && tape.grad(vars[1]).is_some());
        assert!(tape.grad(vars[2]).is_none() && tape.grad(vars[3]).is_none());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(simsiam_loss(&mut tape, a, a, a, b).is_err());
    }

    #[test]
    fn nce_orthogonal_pairs_match_brute_force() {
        let mut tape = Tape::new();
        let z = var(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = info_nce_loss(&mut tape, z, z, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((value(&tape, loss) as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn nce_needs_two_samples() {
        let mut tape = Tape::new();
        let z = var(&mut tape, &[&[1.0, 0.0]]);
        assert!(info_nce_loss(&mut tape, z, z, 0.5).is_err());
    }

    #[test]
    fn separate_negatives_reduce_to_shared_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let v: Vec<Var> = (0..4)
            .map(|_| tape.constant(Tensor::randn(&[3, 5], &mut rng)))
            .collect();
        let shared = cross_nce_loss(&mut tape, v[0], v[1], v[2], v[3], 0.5).unwrap();
        let split =
            cross_nce_loss_with_negatives(&mut tape, (v[0], v[1]), (v[2], v[3]), (v[2], v[3]), 0.5)
                .unwrap();
        assert!((value(&tape, shared) - value(&tape, split)).abs() < 1e-5);
        let other =
            cross_nce_loss_with_negatives(&mut tape, (v[0], v[1]), (v[2], v[3]), (v[0], v[1]), 0.5)
                .unwrap();
        assert!((value(&tape, shared) - value(&tape, other)).abs() > 1e-4);
    }
}
