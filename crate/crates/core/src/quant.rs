//! Uniform affine fake quantization with a straight-through backward pass,
//! per-step bit-width sampling and post-step re-quantization of the shared
//! full-precision weights.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::tensor::{Float, Tape, Tensor, Var};

/// Scale used when a tensor is constant (`max == min`).
pub const DEGENERATE_SCALE: Float = 1e-8;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Per-tensor affine quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: Float,
    /// Integer offset of real zero on the grid. Lies in `[0, 2^bits - 1]`
    /// whenever the observed range contains zero; one-sided ranges shift the
    /// grid so that it still spans `[min, max]`.
    pub zero_point: i64,
    pub bits: u32,
    pub min: Float,
    pub max: Float,
}

impl QuantParams {
    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn qmax(&self) -> Float {
        (self.levels() - 1) as Float
    }

    /// Dequantized value of grid index `i`.
    pub fn grid_value(&self, i: u64) -> Float {
        (i as Float - self.zero_point as Float) * self.scale
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Min/max calibration: `S = (max - min) / (2^q - 1)`, `Z = round(-min / S)`.
pub fn compute_qparams(values: &[Float], bits: u32) -> Result<QuantParams> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot quantize an empty tensor".into(),
        ));
    }
    let (min, max) = values
        .iter()
        .fold((Float::INFINITY, Float::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite range [{min}, {max}]"
        )));
    }
    let qmax = ((1u64 << bits) - 1) as Float;
    if max == min {
        return Ok(QuantParams {
            scale: DEGENERATE_SCALE,
            zero_point: 0,
            bits,
            min,
            max,
        });
    }
    let scale = (max - min) / qmax;
    let zero_point = (-min / scale).round_ties_even() as i64;
    Ok(QuantParams {
        scale,
        zero_point,
        bits,
        min,
        max,
    })
}

#[inline]
fn qdq_scalar(x: Float, scale: Float, zero: Float, qmax: Float) -> Float {
    // `+ 0.0` turns a level of -0.0 into 0.0 so the grid has one zero.
    let level = (x / scale + zero).round_ties_even().clamp(0.0, qmax) + 0.0;
    (level - zero) * scale
}

/// `clip(round(x / S + Z), 0, 2^q - 1)` mapped back through `(x_int - Z) · S`.
///
/// A degenerate range (`min == max`) has the single grid point `min`, and
/// every input maps to it.
pub fn quantize_dequantize(x: &Tensor, qp: &QuantParams) -> Tensor {
    if qp.min == qp.max {
        return x.map(|_| qp.min);
    }
    let zero = qp.zero_point as Float;
    let qmax = qp.qmax();
    x.map(|v| qdq_scalar(v, qp.scale, zero, qmax))
}

/// Dynamic min/max quantize-dequantize of a whole tensor.
pub fn fake_quant_value(x: &Tensor, bits: u32) -> Result<Tensor> {
    let qp = compute_qparams(x.data(), bits)?;
    Ok(quantize_dequantize(x, &qp))
}

/// Fake-quantizes `x` on the tape. Gradients pass straight through to `x`.
pub fn fake_quant(tape: &mut Tape, x: Var, bits: u32) -> Result<Var> {
    let value = fake_quant_value(tape.value(x), bits)?;
    tape.straight_through(x, value)
}

/// Candidate bit-widths sampled once per training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitWidthSpec {
    pub weight_bits: BTreeSet<u32>,
    pub act_bits: BTreeSet<u32>,
}

impl Default for BitWidthSpec {
    fn default() -> Self {
        Self {
            weight_bits: (2..=8).collect(),
            act_bits: (4..=8).collect(),
        }
    }
}

impl BitWidthSpec {
    pub fn new(
        weight_bits: impl IntoIterator<Item = u32>,
        act_bits: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let spec = Self {
            weight_bits: weight_bits.into_iter().collect(),
            act_bits: act_bits.into_iter().collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fixed(weight_bits: u32, act_bits: u32) -> Result<Self> {
        Self::new([weight_bits], [act_bits])
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_bits.is_empty() || self.act_bits.is_empty() {
            return Err(Error::Config(
                "bit-width candidate sets must be non-empty".into(),
            ));
        }
        for &b in self.weight_bits.iter().chain(&self.act_bits) {
            check_bits(b).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Draws one `(weight_bits, act_bits)` pair, each uniform over its set.
pub fn sample_bits<R: Rng + ?Sized>(spec: &BitWidthSpec, rng: &mut R) -> (u32, u32) {
    let pick = |set: &BTreeSet<u32>, rng: &mut R| {
        let i = rng.random_range(0..set.len());
        *set.iter().nth(i).expect("index within set")
    };
    let w = pick(&spec.weight_bits, rng);
    let a = pick(&spec.act_bits, rng);
    (w, a)
}

/// Which tensors of the encoder get fake-quantized, and at what precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantPlan {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub quantize_weights: bool,
    pub quantize_acts: bool,
    /// When false, the first conv/linear layer and its input stay full precision.
    pub quantize_first_layer: bool,
}

impl QuantPlan {
    pub fn new(weight_bits: u32, act_bits: u32) -> Self {
        Self {
            weight_bits,
            act_bits,
            quantize_weights: true,
            quantize_acts: true,
            quantize_first_layer: true,
        }
    }

    /// A plan that quantizes nothing; forwards under it equal the FP path.
    pub fn disabled() -> Self {
        Self {
            quantize_weights: false,
            quantize_acts: false,
            ..Self::new(MAX_BITS, MAX_BITS)
        }
    }

    pub fn is_active(&self) -> bool {
        self.quantize_weights || self.quantize_acts
    }

    pub fn for_precision(precision: Precision) -> Option<Self> {
        match precision {
            Precision::Fp => None,
            Precision::Quant {
                weight_bits,
                act_bits,
            } => Some(Self::new(weight_bits, act_bits)),
        }
    }
}

/// Evaluation precision written `fp` or `NwMa` (e.g. `2w4a`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Fp,
    Quant { weight_bits: u32, act_bits: u32 },
}

impl Precision {
    /// `(w, a)` with full precision encoded as `(0, 0)`.
    pub fn as_pair(self) -> (u32, u32) {
        match self {
            Precision::Fp => (0, 0),
            Precision::Quant {
                weight_bits,
                act_bits,
            } => (weight_bits, act_bits),
        }
    }

    pub fn from_pair(w: u32, a: u32) -> Result<Self> {
        match (w, a) {
            (0, 0) => Ok(Precision::Fp),
            (w, a) => {
                check_bits(w)?;
                check_bits(a)?;
                Ok(Precision::Quant {
                    weight_bits: w,
                    act_bits: a,
                })
            }
        }
    }

    /// Parses a comma-separated list such as `fp,8w8a,2w4a`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Fp => write!(f, "fp"),
            Precision::Quant {
                weight_bits,
                act_bits,
            } => write!(f, "{weight_bits}w{act_bits}a"),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "fp" {
            return Ok(Precision::Fp);
        }
        let bad =
            || Error::InvalidArgument(format!("bad bit-width '{s}', expected 'fp' or 'NwMa'"));
        let (w, rest) = lower.split_once('w').ok_or_else(bad)?;
        let a = rest.strip_suffix('a').ok_or_else(bad)?;
        let w: u32 = w.parse().map_err(|_| bad())?;
        let a: u32 = a.parse().map_err(|_| bad())?;
        if w == 0 || a == 0 {
            return Err(bad());
        }
        Self::from_pair(w, a)
    }
}

/// Quantized view of the shared FP weights after an optimizer step.
///
/// Holds no second weight copy: each quantized weight is derived lazily from
/// the current FP values on first use and cached for the lifetime of the view
/// (one training step or one evaluation pass).
pub struct QuantizedView<'a> {
    params: &'a ModelParams,
    plan: QuantPlan,
    cache: RefCell<HashMap<usize, Tensor>>,
}

impl<'a> QuantizedView<'a> {
    pub fn plan(&self) -> &QuantPlan {
        &self.plan
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    /// Fake-quantized value of parameter `index` at the plan's weight bits.
    pub fn weight(&self, index: usize) -> Result<Tensor> {
        if let Some(t) = self.cache.borrow().get(&index) {
            return Ok(t.clone());
        }
        let q = fake_quant_value(self.params.tensor(index), self.plan.weight_bits)?;
        self.cache.borrow_mut().insert(index, q.clone());
        Ok(q)
    }

    /// Quantized values of every quantizable weight, by parameter name.
    pub fn weights(&self) -> Result<Vec<(String, Tensor)>> {
        self.params
            .quantizable_weight_indices()
            .into_iter()
            .map(|i| Ok((self.params.name(i).to_string(), self.weight(i)?)))
            .collect()
    }
}

/// Binds the current FP weights to a fresh quantized view. Scales and zero
/// points are recomputed from the post-step weights at the next forward.
pub fn psq_refresh<'a>(params: &'a ModelParams, plan: &QuantPlan) -> QuantizedView<'a> {
    QuantizedView {
        params,
        plan: *plan,
        cache: RefCell::new(HashMap::new()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[Float]) -> Tensor {
        Tensor::from_vec(data.to_vec()).unwrap()
    }

    #[test]
    fn unit_range_at_eight_bits() {
        let qp = compute_qparams(&[0.0, 1.0], 8).unwrap();
        assert_eq!(qp.scale, 1.0 / 255.0);
        assert_eq!(qp.zero_point, 0);
    }

    #[test]
    fn two_bit_hand_case() {
        let qp = compute_qparams(&[-1.0, 0.5], 2).unwrap();
        assert_eq!(qp.scale, 0.5);
        assert_eq!(qp.zero_point, 2);
        let out = quantize_dequantize(&t(&[-0.2, -1.0, 0.5]), &qp);
        assert_eq!(out.data(), &[0.0, -1.0, 0.5]);
    }

    #[test]
    fn constant_tensor_is_degenerate() {
        let qp = compute_qparams(&[0.7, 0.7], 4).unwrap();
        assert_eq!(qp.scale, DEGENERATE_SCALE);
        assert_eq!(qp.zero_point, 0);
        let zeros = quantize_dequantize(&t(&[0.0, 0.0]), &compute_qparams(&[0.0, 0.0], 4).unwrap());
        assert_eq!(zeros.data(), &[0.0, 0.0]);
        let out = quantize_dequantize(&t(&[0.7, 0.7, 3.0]), &qp);
        assert_eq!(out.data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn empty_and_bad_bits_are_rejected() {
        assert!(compute_qparams(&[], 8).is_err());
        assert!(compute_qparams(&[1.0], 1).is_err());
    }

    #[test]
    fn one_sided_range_is_still_covered() {
        let x = t(&[3.0, 3.5, 4.0]);
        let qp = compute_qparams(x.data(), 2).unwrap();
        let out = quantize_dequantize(&x, &qp);
        for (a, b) in x.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= qp.scale / 2.0 + 1e-6, "{a} -> {b}");
        }
    }

    #[test]
    fn ste_backward_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[4, 5], &mut rng), true);
        let q = fake_quant(&mut tape, x, 3).unwrap();
        let loss = tape.sum(q);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 20]);
    }

    #[test]
    fn fake_quant_cardinality_and_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[1000], 0.0, 1.0, &mut rng);
        let qp = compute_qparams(x.data(), 8).unwrap();
        let q = fake_quant_value(&x, 8).unwrap();
        let mut distinct: Vec<u32> = q.data().iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert!(distinct.len() <= 256);
        for (a, b) in x.data().iter().zip(q.data()) {
            assert!((a - b).abs() <= qp.scale / 2.0 + 1e-6);
        }
    }

    #[test]
    fn singleton_sets_always_sample_the_same_pair() {
        let spec = BitWidthSpec::fixed(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..100).all(|_| sample_bits(&spec, &mut rng) == (4, 4)));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let spec = BitWidthSpec::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_bits(&spec, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn weight_bit_frequencies_are_uniform() {
        let spec = BitWidthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = HashMap::new();
        let draws = 70_000;
        for _ in 0..draws {
            *counts
                .entry(sample_bits(&spec, &mut rng).0)
                .or_insert(0usize) += 1;
        }
        for b in 2..=8 {
            let f = counts[&b] as f64 / draws as f64;
            assert!((f - 1.0 / 7.0).abs() < 0.01, "bits {b}: {f}");
        }
    }

    #[test]
    fn precision_grammar() {
        assert_eq!("fp".parse::<Precision>().unwrap(), Precision::Fp);
        assert_eq!(
            "2w4a".parse::<Precision>().unwrap(),
            Precision::Quant {
                weight_bits: 2,
                act_bits: 4
            }
        );
        assert_eq!(Precision::parse_list("fp, 8w8a").unwrap().len(), 2);
        for bad in ["8w8", "w8a", "1w4a", "8x8a", ""] {
            assert!(bad.parse::<Precision>().is_err(), "{bad}");
        }
        assert_eq!(Precision::from_pair(0, 0).unwrap(), Precision::Fp);
        assert_eq!("3w3a".parse::<Precision>().unwrap().to_string(), "3w3a");
    }
}
