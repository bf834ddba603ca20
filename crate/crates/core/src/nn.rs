//! Encoder (backbone + projection MLP), predictor and classifier head.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quant::{fake_quant, QuantizedView};
use crate::tensor::{BatchNormMode, Float, RunningStats, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    /// `[conv3x3 - BN - ReLU]` stages with 2x2 average pooling between them
    /// and global average pooling after the last one.
    TinyCnn,
    /// `[linear - BN - ReLU]` stages over the flattened image.
    Mlp,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::TinyCnn => "tiny-cnn",
            Backbone::Mlp => "mlp",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tiny-cnn" | "tiny_cnn" => Ok(Backbone::TinyCnn),
            "mlp" => Ok(Backbone::Mlp),
            other => Err(Error::Spec(format!("unknown backbone '{other}'"))),
        }
    }
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub backbone: Backbone,
    /// Output channels (tiny-cnn) or hidden widths (mlp), one per stage.
    pub widths: Vec<usize>,
    /// Input image as `[channels, height, width]`.
    pub input: [usize; 3],
    pub projection_dim: usize,
    pub predictor_hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backbone: Backbone::TinyCnn,
            widths: vec![16, 32, 64, 128],
            input: [3, 32, 32],
            projection_dim: 128,
            predictor_hidden: 32,
        }
    }
}

pub(crate) fn parse_usize_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("expected a list of integers, got '{value}'")))
        })
        .collect()
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

impl ModelSpec {
    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    /// Width of the backbone output fed to the projector and to probes.
    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Spec(
                "at least one backbone stage is required".into(),
            ));
        }
        if self.widths.iter().chain(&self.input).any(|&d| d == 0)
            || self.projection_dim == 0
            || self.predictor_hidden == 0
        {
            return Err(Error::Spec("all dimensions must be positive".into()));
        }
        if self.backbone == Backbone::TinyCnn {
            let factor = 1usize << (self.widths.len() - 1);
            if !self.input[1].is_multiple_of(factor) || !self.input[2].is_multiple_of(factor) {
                return Err(Error::Spec(format!(
                    "input {}x{} not divisible by the pooling factor {factor} of {} stages",
                    self.input[1],
                    self.input[2],
                    self.widths.len()
                )));
            }
        }
        Ok(())
    }

    /// Sets one `key=value` field. Returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "backbone" => self.backbone = value.parse()?,
            "widths" => self.widths = parse_usize_list(value)?,
            "input" => {
                let dims: Vec<usize> = value
                    .split('x')
                    .map(|d| parse_num(key, d))
                    .collect::<Result<_>>()?;
                self.input = dims
                    .try_into()
                    .map_err(|_| Error::Config(format!("input must be CxHxW, got '{value}'")))?;
            }
            "projection_dim" => self.projection_dim = parse_num(key, value)?,
            "predictor_hidden" => self.predictor_hidden = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `key=value` lines; parsing them back yields an equal spec.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "backbone={}\nwidths={}\ninput={}x{}x{}\nprojection_dim={}\npredictor_hidden={}\n",
            self.backbone,
            widths.join(","),
            self.input[0],
            self.input[1],
            self.input[2],
            self.projection_dim,
            self.predictor_hidden
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Spec(format!("malformed line '{line}'")))?;
            if !spec.set(k.trim(), v.trim())? {
                return Err(Error::Spec(format!("unknown model key '{k}'")));
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Indices of one `linear/conv -> BN` block inside [`ModelParams`].
#[derive(Debug, Clone, Copy)]
struct LayerBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    stat: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    backbone: Vec<LayerBn>,
    projector: [LayerBn; 2],
    predictor_hidden: LayerBn,
    predictor_out: (usize, usize),
}

/// The single full-precision copy of all trainable tensors plus BN running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    stat_names: Vec<String>,
    pub(crate) stats: Vec<RunningStats>,
    quantizable: Vec<usize>,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    fan_in: Vec<Option<usize>>,
    init_one: Vec<bool>,
    stat_names: Vec<String>,
    stat_channels: Vec<usize>,
    quantizable: Vec<usize>,
}

impl Builder {
    fn param(
        &mut self,
        name: String,
        shape: Vec<usize>,
        fan_in: Option<usize>,
        one: bool,
    ) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.fan_in.push(fan_in);
        self.init_one.push(one);
        self.names.len() - 1
    }

    fn layer_bn(
        &mut self,
        prefix: &str,
        shape: Vec<usize>,
        fan_in: usize,
        channels: usize,
        quantized: bool,
    ) -> LayerBn {
        let kind = if shape.len() == 4 { "conv" } else { "fc" };
        let weight = self.param(
            format!("{prefix}.{kind}.weight"),
            shape,
            Some(fan_in),
            false,
        );
        if quantized {
            self.quantizable.push(weight);
        }
        let gamma = self.param(format!("{prefix}.bn.gamma"), vec![channels], None, true);
        let beta = self.param(format!("{prefix}.bn.beta"), vec![channels], None, false);
        self.stat_names.push(format!("{prefix}.bn"));
        self.stat_channels.push(channels);
        LayerBn {
            weight,
            gamma,
            beta,
            stat: self.stat_names.len() - 1,
        }
    }
}

fn plan_layout(spec: &ModelSpec) -> (Builder, Layout) {
    let mut b = Builder {
        names: vec![],
        shapes: vec![],
        fan_in: vec![],
        init_one: vec![],
        stat_names: vec![],
        stat_channels: vec![],
        quantizable: vec![],
    };
    let [c, h, w] = spec.input;
    let mut backbone = Vec::new();
    let mut prev = match spec.backbone {
        Backbone::TinyCnn => c,
        Backbone::Mlp => c * h * w,
    };
    for (i, &width) in spec.widths.iter().enumerate() {
        let prefix = format!("backbone.{i}");
        let layer = match spec.backbone {
            Backbone::TinyCnn => {
                b.layer_bn(&prefix, vec![width, prev, 3, 3], prev * 9, width, true)
            }
            Backbone::Mlp => b.layer_bn(&prefix, vec![prev, width], prev, width, true),
        };
        backbone.push(layer);
        prev = width;
    }
    let p = spec.projection_dim;
    let projector = [
        b.layer_bn("projector.0", vec![prev, p], prev, p, true),
        b.layer_bn("projector.1", vec![p, p], p, p, true),
    ];
    let hid = spec.predictor_hidden;
    let predictor_hidden = b.layer_bn("predictor.0", vec![p, hid], p, hid, false);
    let out_w = b.param(
        "predictor.1.fc.weight".into(),
        vec![hid, p],
        Some(hid),
        false,
    );
    let out_b = b.param("predictor.1.fc.bias".into(), vec![p], None, false);
    let layout = Layout {
        backbone,
        projector,
        predictor_hidden,
        predictor_out: (out_w, out_b),
    };
    (b, layout)
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as Float).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// Kaiming-uniform weights, BN `gamma = 1`, `beta = 0`, zero biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let (b, _) = plan_layout(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = b
        .shapes
        .iter()
        .zip(&b.fan_in)
        .zip(&b.init_one)
        .map(|((shape, fan_in), &one)| match fan_in {
            Some(f) => kaiming_uniform(shape, *f, &mut rng),
            None if one => Tensor::ones(shape),
            None => Tensor::zeros(shape),
        })
        .collect();
    Ok(ModelParams {
        spec: spec.clone(),
        names: b.names,
        tensors,
        stat_names: b.stat_names,
        stats: b.stat_channels.into_iter().map(RunningStats::new).collect(),
        quantizable: b.quantizable,
    })
}

impl ModelParams {
    /// Reassembles parameters from named tensors, checking names and shapes
    /// against the layout implied by `spec`.
    pub fn from_named(
        spec: &ModelSpec,
        tensors: Vec<(String, Tensor)>,
        stats: Vec<(String, RunningStats)>,
    ) -> Result<Self> {
        spec.validate()?;
        let (b, _) = plan_layout(spec);
        if tensors.len() != b.names.len() || stats.len() != b.stat_names.len() {
            return Err(Error::Spec(format!(
                "expected {} tensors and {} BN stats, got {} and {}",
                b.names.len(),
                b.stat_names.len(),
                tensors.len(),
                stats.len()
            )));
        }
        let mut out = Vec::with_capacity(tensors.len());
        for ((name, t), (want, shape)) in tensors.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Spec(format!(
                    "parameter '{name}' {:?} does not match expected '{want}' {shape:?}",
                    t.shape()
                )));
            }
            out.push(t);
        }
        let mut stat_out = Vec::with_capacity(stats.len());
        for ((name, s), (want, &c)) in stats
            .into_iter()
            .zip(b.stat_names.iter().zip(&b.stat_channels))
        {
            if &name != want || s.channels() != c || s.var.len() != c {
                return Err(Error::Spec(format!(
                    "BN statistics '{name}' do not match '{want}' [{c}]"
                )));
            }
            stat_out.push(s);
        }
        Ok(Self {
            spec: spec.clone(),
            names: b.names,
            tensors: out,
            stat_names: b.stat_names,
            stats: stat_out,
            quantizable: b.quantizable,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn named_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stat_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    /// Number of scalar parameters (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Conv/linear weights of the backbone and projector, the tensors that
    /// are fake-quantized.
    pub fn quantizable_weight_indices(&self) -> Vec<usize> {
        self.quantizable.clone()
    }

    pub fn is_backbone_param(&self, index: usize) -> bool {
        self.names[index].starts_with("backbone.")
    }

    /// Registers every parameter on `tape`; `trainable` decides which ones
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| tape.leaf(t.clone(), trainable(name)))
            .collect();
        BoundParams {
            vars,
            layout: plan_layout(&self.spec).1,
        }
    }
}

/// Parameters registered on one tape, in [`ModelParams`] order.
pub struct BoundParams {
    vars: Vec<Var>,
    layout: Layout,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }
}

/// How batch normalization layers behave during a forward pass.
pub enum BnUse<'s> {
    /// Batch statistics, folded into the running statistics.
    TrainUpdate(&'s mut [RunningStats]),
    /// Batch statistics, running statistics left untouched.
    TrainFrozen,
    /// Running statistics.
    Eval(&'s [RunningStats]),
}

impl BnUse<'_> {
    fn apply(
        &mut self,
        tape: &mut Tape,
        x: Var,
        gamma: Var,
        beta: Var,
        stat: usize,
    ) -> Result<Var> {
        match self {
            BnUse::TrainUpdate(stats) => {
                tape.batchnorm(x, gamma, beta, &mut stats[stat], BatchNormMode::Train, true)
            }
            BnUse::TrainFrozen => {
                let mut scratch = RunningStats::new(*tape.shape(gamma).first().unwrap_or(&0));
                tape.batchnorm(x, gamma, beta, &mut scratch, BatchNormMode::Train, false)
            }
            BnUse::Eval(stats) => {
                let mut s = stats[stat].clone();
                tape.batchnorm(x, gamma, beta, &mut s, BatchNormMode::Eval, false)
            }
        }
    }
}

struct Quantizer<'v, 'p> {
    view: Option<&'v QuantizedView<'p>>,
}

impl Quantizer<'_, '_> {
    /// Returns `(input, weight)` of a conv/linear layer with fake quantization applied.
    fn layer(
        &self,
        tape: &mut Tape,
        x: Var,
        weight: Var,
        index: usize,
        first: bool,
    ) -> Result<(Var, Var)> {
        let Some(view) = self.view else {
            return Ok((x, weight));
        };
        let plan = view.plan();
        if first && !plan.quantize_first_layer {
            return Ok((x, weight));
        }
        let x = if plan.quantize_acts {
            fake_quant(tape, x, plan.act_bits)?
        } else {
            x
        };
        let weight = if plan.quantize_weights {
            let q = view.weight(index)?;
            tape.straight_through(weight, q)?
        } else {
            weight
        };
        Ok((x, weight))
    }
}

fn check_input(spec: &ModelSpec, tape: &Tape, x: Var) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1..] != spec.input {
        let mut want = vec![0];
        want.extend(spec.input);
        return Err(Error::Dimension {
            op: "forward_encoder",
            lhs: s.to_vec(),
            rhs: want,
        });
    }
    Ok(())
}

/// Backbone features `[N, feature_dim]` for images `[N, C, H, W]`.
///
/// With a quantized view, every conv/linear weight and its input activation
/// is fake-quantized.
pub fn forward_backbone(
    tape: &mut Tape,
    spec: &ModelSpec,
    bound: &BoundParams,
    bn: &mut BnUse<'_>,
    quant: Option<&QuantizedView<'_>>,
    x: Var,
) -> Result<Var> {
    check_input(spec, tape, x)?;
    let q = Quantizer { view: quant };
    let layout = &bound.layout;
    let last = layout.backbone.len() - 1;
    let mut h = match spec.backbone {
        Backbone::TinyCnn => x,
        Backbone::Mlp => tape.flatten(x)?,
    };
    for (i, layer) in layout.backbone.iter().enumerate() {
        let (input, w) = q.layer(tape, h, bound.var(layer.weight), layer.weight, i == 0)?;
        h = match spec.backbone {
            Backbone::TinyCnn => tape.conv2d(input, w, 1, 1)?,
            Backbone::Mlp => tape.matmul(input, w)?,
        };
        h = bn.apply(
            tape,
            h,
            bound.var(layer.gamma),
            bound.var(layer.beta),
            layer.stat,
        )?;
        h = tape.relu(h);
        if spec.backbone == Backbone::TinyCnn {
            h = if i == last {
                tape.global_avg_pool(h)?
            } else {
                tape.avg_pool2d(h, 2)?
            };
        }
    }
    Ok(h)
}

/// Encoder output `z = projector(backbone(x))`.
pub fn forward_encoder(
    tape: &mut Tape,
    spec: &ModelSpec,
    bound: &BoundParams,
    bn: &mut BnUse<'_>,
    quant: Option<&QuantizedView<'_>>,
    x: Var,
) -> Result<Var> {
    let features = forward_backbone(tape, spec, bound, bn, quant, x)?;
    forward_projector(tape, bound, bn, quant, features)
}

fn forward_projector(
    tape: &mut Tape,
    bound: &BoundParams,
    bn: &mut BnUse<'_>,
    quant: Option<&QuantizedView<'_>>,
    features: Var,
) -> Result<Var> {
    let q = Quantizer { view: quant };
    let [first, second] = bound.layout.projector;
    let (input, w) = q.layer(tape, features, bound.var(first.weight), first.weight, false)?;
    let h = tape.matmul(input, w)?;
    let h = bn.apply(
        tape,
        h,
        bound.var(first.gamma),
        bound.var(first.beta),
        first.stat,
    )?;
    let h = tape.relu(h);
    let (input, w) = q.layer(tape, h, bound.var(second.weight), second.weight, false)?;
    let z = tape.matmul(input, w)?;
    bn.apply(
        tape,
        z,
        bound.var(second.gamma),
        bound.var(second.beta),
        second.stat,
    )
}

/// Predictor `p = h(z)`, always full precision.
pub fn forward_predictor(
    tape: &mut Tape,
    bound: &BoundParams,
    bn: &mut BnUse<'_>,
    z: Var,
) -> Result<Var> {
    let hidden = bound.layout.predictor_hidden;
    let (w_out, b_out) = bound.layout.predictor_out;
    let expected = tape.shape(bound.var(hidden.weight))[0];
    if tape.shape(z).len() != 2 || tape.shape(z)[1] != expected {
        return Err(Error::Dimension {
            op: "forward_predictor",
            lhs: tape.shape(z).to_vec(),
            rhs: vec![0, expected],
        });
    }
    let h = tape.matmul(z, bound.var(hidden.weight))?;
    let h = bn.apply(
        tape,
        h,
        bound.var(hidden.gamma),
        bound.var(hidden.beta),
        hidden.stat,
    )?;
    let h = tape.relu(h);
    let p = tape.matmul(h, bound.var(w_out))?;
    tape.add_bias(p, bound.var(b_out))
}

/// Linear classification head on backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Classifier {
    /// Uniform `±1/sqrt(in_dim)` weights, zero bias.
    pub fn new(in_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_dim as Float).sqrt();
        Self {
            weight: Tensor::rand_uniform(&[in_dim, classes], -bound, bound, &mut rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ClassifierVars {
        ClassifierVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Var,
}

pub fn forward_classifier(tape: &mut Tape, features: Var, head: &ClassifierVars) -> Result<Var> {
    let logits = tape.matmul(features, head.weight)?;
    tape.add_bias(logits, head.bias)
}

/// Row-wise softmax probabilities of `[N, C]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().unwrap_or(&1);
    Tensor::from_parts(
        logits.shape().to_vec(),
        crate::tensor::softmax_rows(logits.data(), c),
    )
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    logits
        .rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, Float::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Parameter-name lookup helper used by diagnostics and tests.
pub fn index_by_name(params: &ModelParams) -> HashMap<&str, usize> {
    params
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect()
}
