//! Evaluation of pretrained encoders at a list of precisions: linear probes
//! on a frozen, quantized backbone, and supervised fine-tuning followed by
//! post-training quantization.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{
    argmax_rows, forward_backbone, forward_classifier, parse_num, parse_usize_list, BnUse,
    Classifier, ModelParams,
};
use crate::quant::{psq_refresh, Precision, QuantPlan};
use crate::tensor::{Float, Tape, Tensor};
use crate::train::{sgd_step, AugmentPipeline, SgdState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Frozen quantized backbone, trained full-precision linear head.
    LinearEval,
    /// Full supervised fine-tuning, then post-training quantization.
    FinetunePtq,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::LinearEval => "linear_eval",
            EvalMode::FinetunePtq => "finetune_ptq",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear_eval" | "linear" => Ok(EvalMode::LinearEval),
            "finetune_ptq" | "finetune" => Ok(EvalMode::FinetunePtq),
            other => Err(Error::Config(format!("unknown eval mode '{other}'"))),
        }
    }
}

/// SGD with step decay: the learning rate is divided by 10 at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: Float,
    pub milestones: Vec<usize>,
    pub weight_decay: Float,
    pub momentum: Float,
    pub batch_size: usize,
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> Float {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * 0.1f32.powi(drops as i32)
    }

    fn validate(&self, which: &str) -> Result<()> {
        if self.lr.is_nan()
            || self.lr <= 0.0
            || self.batch_size == 0
            || self.weight_decay < 0.0
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::Config(format!("invalid {which} schedule {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub mode: EvalMode,
    pub bits: Vec<Precision>,
    pub linear: Schedule,
    pub finetune: Schedule,
    /// Augmentation applied to fine-tuning batches.
    pub finetune_augment: AugmentPipeline,
    /// Batch size for feature extraction and evaluation forwards. Activation
    /// ranges are taken per batch, so this affects quantized results.
    pub eval_batch_size: usize,
    pub seed: u64,
}

pub fn default_bits() -> Vec<Precision> {
    Precision::parse_list("fp,8w8a,6w6a,5w5a,4w4a,3w3a,2w8a,2w4a").expect("valid default list")
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            mode: EvalMode::LinearEval,
            bits: default_bits(),
            linear: Schedule {
                epochs: 100,
                lr: 30.0,
                milestones: vec![60, 80],
                weight_decay: 0.0,
                momentum: 0.9,
                batch_size: 256,
            },
            finetune: Schedule {
                epochs: 50,
                lr: 0.001,
                milestones: vec![30, 40],
                weight_decay: 1e-4,
                momentum: 0.9,
                batch_size: 128,
            },
            finetune_augment: AugmentPipeline::flip_only(),
            eval_batch_size: 256,
            seed: 0,
        }
    }
}

fn list_text(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.bits.is_empty() {
            return Err(Error::Config(
                "evaluation needs at least one precision".into(),
            ));
        }
        if self.eval_batch_size < 2 {
            return Err(Error::Config("eval_batch_size must be >= 2".into()));
        }
        self.linear.validate("probe")?;
        self.finetune.validate("finetune")?;
        self.finetune_augment.validate()
    }

    /// Sets one `key=value` field. Returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let milestones = |v: &str| {
            if v.is_empty() {
                Ok(Vec::new())
            } else {
                parse_usize_list(v)
            }
        };
        match key {
            "eval_mode" => self.mode = v.parse()?,
            "bits" => self.bits = Precision::parse_list(v)?,
            "probe_epochs" => self.linear.epochs = parse_num(key, v)?,
            "probe_lr" => self.linear.lr = parse_num(key, v)?,
            "probe_milestones" => self.linear.milestones = milestones(v)?,
            "probe_weight_decay" => self.linear.weight_decay = parse_num(key, v)?,
            "probe_momentum" => self.linear.momentum = parse_num(key, v)?,
            "probe_batch_size" => self.linear.batch_size = parse_num(key, v)?,
            "finetune_epochs" => self.finetune.epochs = parse_num(key, v)?,
            "finetune_lr" => self.finetune.lr = parse_num(key, v)?,
            "finetune_milestones" => self.finetune.milestones = milestones(v)?,
            "finetune_weight_decay" => self.finetune.weight_decay = parse_num(key, v)?,
            "finetune_momentum" => self.finetune.momentum = parse_num(key, v)?,
            "finetune_batch_size" => self.finetune.batch_size = parse_num(key, v)?,
            "finetune_augment" => self.finetune_augment = AugmentPipeline::preset(v)?,
            "eval_batch_size" => self.eval_batch_size = parse_num(key, v)?,
            "eval_seed" => self.seed = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let bits: Vec<String> = self.bits.iter().map(Precision::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "eval_mode={}", self.mode);
        let _ = writeln!(s, "bits={}", bits.join(","));
        for (prefix, sch) in [("probe", &self.linear), ("finetune", &self.finetune)] {
            let _ = writeln!(s, "{prefix}_epochs={}", sch.epochs);
            let _ = writeln!(s, "{prefix}_lr={}", sch.lr);
            let _ = writeln!(s, "{prefix}_milestones={}", list_text(&sch.milestones));
            let _ = writeln!(s, "{prefix}_weight_decay={}", sch.weight_decay);
            let _ = writeln!(s, "{prefix}_momentum={}", sch.momentum);
            let _ = writeln!(s, "{prefix}_batch_size={}", sch.batch_size);
        }
        if let Some(name) = self.finetune_augment.preset_name() {
            let _ = writeln!(s, "finetune_augment={name}");
        }
        let _ = writeln!(s, "eval_batch_size={}", self.eval_batch_size);
        let _ = writeln!(s, "eval_seed={}", self.seed);
        s
    }
}

fn quant_view_plan(precision: Precision) -> QuantPlan {
    QuantPlan::for_precision(precision).unwrap_or_else(QuantPlan::disabled)
}

fn check_compatible(params: &ModelParams, dataset: &Dataset) -> Result<()> {
    if params.spec().input != dataset.shape {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: params.spec().input.to_vec(),
            rhs: dataset.shape.to_vec(),
        });
    }
    Ok(())
}

/// Backbone features `[N, feature_dim]` of `split` in eval mode at
/// `precision`, computed in consecutive batches of `batch_size`.
pub fn extract_features(
    params: &ModelParams,
    dataset: &Dataset,
    split: &Split,
    precision: Precision,
    batch_size: usize,
) -> Result<Tensor> {
    check_compatible(params, dataset)?;
    let plan = quant_view_plan(precision);
    let view = psq_refresh(params, &plan);
    let quant = plan.is_active().then_some(&view);
    let dim = params.spec().feature_dim();
    let mut out = Vec::with_capacity(split.len() * dim);
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = dataset.normalized_batch(chunk.iter().map(|&i| split.image(i)))?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let x = tape.constant(x);
        let mut bn = BnUse::Eval(params.running_stats());
        let f = forward_backbone(&mut tape, params.spec(), &bound, &mut bn, quant, x)?;
        out.extend_from_slice(tape.value(f).data());
    }
    Tensor::new(vec![split.len(), dim], out)
}

fn accuracy(predicted: &[usize], labels: &[usize]) -> Float {
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * correct as Float / labels.len().max(1) as Float
}

fn gather_rows(features: &Tensor, rows: &[usize]) -> Tensor {
    let d = features.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(&features.data()[r * d..(r + 1) * d]);
    }
    Tensor::new(vec![rows.len(), d], data).expect("non-empty batch")
}

/// Trains a linear head on fixed features with the given schedule.
pub fn train_head(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<Classifier> {
    let mut head = Classifier::new(features.shape()[1], classes, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = SgdState::default();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr_at(epoch);
        for batch in order.chunks(schedule.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(gather_rows(features, batch));
            let vars = head.bind(&mut tape, true);
            let logits = forward_classifier(&mut tape, x, &vars)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            tape.backward(loss)?;
            let grads = [
                tape.grad(vars.weight).cloned(),
                tape.grad(vars.bias).cloned(),
            ];
            let mut params = [head.weight.clone(), head.bias.clone()];
            sgd_step(
                &mut params,
                &grads,
                lr,
                schedule.momentum,
                schedule.weight_decay,
                &mut sgd,
            )?;
            let [w, b] = params;
            head.weight = w;
            head.bias = b;
        }
    }
    Ok(head)
}

/// Top-1 accuracy (%) of `head` on fixed features.
pub fn head_accuracy(head: &Classifier, features: &Tensor, labels: &[usize]) -> Result<Float> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let vars = head.bind(&mut tape, false);
    let logits = forward_classifier(&mut tape, x, &vars)?;
    Ok(accuracy(&argmax_rows(tape.value(logits)), labels))
}

/// Linear evaluation: the backbone is frozen (running BN statistics) and
/// fake-quantized at `precision` (weights from the FP values, activations per
/// batch); a full-precision linear head is trained on the cached training
/// features. Returns top-1 test accuracy in percent.
pub fn linear_probe(
    params: &ModelParams,
    dataset: &Dataset,
    precision: Precision,
    protocol: &EvalProtocol,
) -> Result<Float> {
    let train = extract_features(
        params,
        dataset,
        &dataset.train,
        precision,
        protocol.eval_batch_size,
    )?;
    let test = extract_features(
        params,
        dataset,
        &dataset.test,
        precision,
        protocol.eval_batch_size,
    )?;
    let head = train_head(
        &train,
        &dataset.train.labels,
        dataset.num_classes,
        &protocol.linear,
        protocol.seed,
    )?;
    head_accuracy(&head, &test, &dataset.test.labels)
}

/// A fine-tuned model: backbone parameters plus classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetunedModel {
    pub params: ModelParams,
    pub head: Classifier,
    /// Training accuracy (%) measured on the fly in each epoch.
    pub train_accuracy: Vec<Float>,
}

/// Supervised full-precision training of backbone and a fresh head.
pub fn finetune(
    params: &ModelParams,
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<FinetunedModel> {
    check_compatible(params, dataset)?;
    let sch = &protocol.finetune;
    let n = dataset.train.len();
    if sch.epochs > 0 && n % sch.batch_size == 1 {
        return Err(Error::DegenerateBatch { batch: 1 });
    }
    let mut params = params.clone();
    let mut head = Classifier::new(
        params.spec().feature_dim(),
        dataset.num_classes,
        protocol.seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut sgd = SgdState::default();
    let mut head_sgd = SgdState::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut train_accuracy = Vec::with_capacity(sch.epochs);
    let shape = dataset.shape;
    for epoch in 0..sch.epochs {
        order.shuffle(&mut rng);
        let lr = sch.lr_at(epoch);
        let mut correct = 0usize;
        for batch in order.chunks(sch.batch_size) {
            let views: Vec<Vec<Float>> = batch
                .iter()
                .map(|&i| {
                    protocol
                        .finetune_augment
                        .apply(dataset.train.image(i), shape, &mut rng)
                })
                .collect();
            let x = dataset.normalized_batch(views.iter().map(Vec::as_slice))?;
            let y: Vec<usize> = batch.iter().map(|&i| dataset.train.labels[i]).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |name| name.starts_with("backbone."));
            let head_vars = head.bind(&mut tape, true);
            let x = tape.constant(x);
            let mut stats = std::mem::take(&mut params.stats);
            let forward = (|| {
                let mut bn = BnUse::TrainUpdate(&mut stats);
                let f = forward_backbone(&mut tape, params.spec(), &bound, &mut bn, None, x)?;
                forward_classifier(&mut tape, f, &head_vars)
            })();
            params.stats = stats;
            let logits = forward?;
            correct += argmax_rows(tape.value(logits))
                .iter()
                .zip(&y)
                .filter(|(p, l)| p == l)
                .count();
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = bound
                .vars()
                .iter()
                .map(|&v| tape.grad(v).cloned())
                .collect();
            sgd_step(
                params.tensors_mut(),
                &grads,
                lr,
                sch.momentum,
                sch.weight_decay,
                &mut sgd,
            )?;
            let hg = [
                tape.grad(head_vars.weight).cloned(),
                tape.grad(head_vars.bias).cloned(),
            ];
            let mut hp = [head.weight.clone(), head.bias.clone()];
            sgd_step(
                &mut hp,
                &hg,
                lr,
                sch.momentum,
                sch.weight_decay,
                &mut head_sgd,
            )?;
            let [w, b] = hp;
            head.weight = w;
            head.bias = b;
        }
        train_accuracy.push(100.0 * correct as Float / n as Float);
    }
    Ok(FinetunedModel {
        params,
        head,
        train_accuracy,
    })
}

/// Test accuracy (%) of a fine-tuned model after post-training quantization
/// of the backbone at `precision`. Nothing is updated.
pub fn ptq_eval(
    model: &FinetunedModel,
    dataset: &Dataset,
    precision: Precision,
    batch_size: usize,
) -> Result<Float> {
    let features = extract_features(&model.params, dataset, &dataset.test, precision, batch_size)?;
    head_accuracy(&model.head, &features, &dataset.test.labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub backbone: String,
    pub precision: Precision,
    /// Top-1 accuracy in percent.
    pub accuracy: Float,
}

/// Accuracy per (method, precision), in evaluation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

pub const RESULT_HEADER: &str = "method,backbone,w_bits,a_bits,accuracy";

impl ResultTable {
    pub fn get(&self, method: &str, precision: Precision) -> Option<Float> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.precision == precision)
            .map(|r| r.accuracy)
    }

    /// Long format, one row per cell, full precision written as `0,0`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{RESULT_HEADER}\n");
        for r in &self.rows {
            let (w, a) = r.precision.as_pair();
            let _ = writeln!(s, "{},{},{w},{a},{}", r.method, r.backbone, r.accuracy);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RESULT_HEADER) {
            return Err(Error::Config(format!(
                "expected CSV header '{RESULT_HEADER}'"
            )));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(Error::Config(format!("result row '{line}' needs 5 fields")));
                }
                let accuracy: Float = parse_num("accuracy", f[4])?;
                if !(0.0..=100.0).contains(&accuracy) {
                    return Err(Error::Config(format!(
                        "accuracy {accuracy} outside [0, 100]"
                    )));
                }
                Ok(ResultRow {
                    method: f[0].to_string(),
                    backbone: f[1].to_string(),
                    precision: Precision::from_pair(
                        parse_num("w_bits", f[2])?,
                        parse_num("a_bits", f[3])?,
                    )?,
                    accuracy,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Wide format: one row per method, one column per precision.
    pub fn to_wide_csv(&self) -> String {
        let mut cols: Vec<Precision> = Vec::new();
        let mut methods: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if !cols.contains(&r.precision) {
                cols.push(r.precision);
            }
            if !methods.contains(&(r.method.as_str(), r.backbone.as_str())) {
                methods.push((&r.method, &r.backbone));
            }
        }
        let mut s = String::from("method,backbone");
        for c in &cols {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (m, b) in methods {
            let _ = write!(s, "{m},{b}");
            for &c in &cols {
                match self
                    .rows
                    .iter()
                    .find(|r| r.method == m && r.backbone == b && r.precision == c)
                {
                    Some(r) => {
                        let _ = write!(s, ",{}", r.accuracy);
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates every `(label, model)` at every protocol precision. Fine-tuning
/// runs once per model; each precision then gets its own PTQ evaluation.
pub fn sweep(
    models: &[(String, ModelParams)],
    dataset: &Dataset,
    protocol: &EvalProtocol,
) -> Result<ResultTable> {
    protocol.validate()?;
    let mut table = ResultTable::default();
    for (label, params) in models {
        let backbone = params.spec().backbone.to_string();
        let finetuned = match protocol.mode {
            EvalMode::FinetunePtq => Some(finetune(params, dataset, protocol)?),
            EvalMode::LinearEval => None,
        };
        for &precision in &protocol.bits {
            let accuracy = match &finetuned {
                Some(model) => ptq_eval(model, dataset, precision, protocol.eval_batch_size)?,
                None => linear_probe(params, dataset, precision, protocol)?,
            };
            table.rows.push(ResultRow {
                method: label.clone(),
                backbone: backbone.clone(),
                precision,
                accuracy,
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::nn::{build_model, Backbone, ModelSpec};

    fn quick() -> EvalProtocol {
        EvalProtocol {
            linear: Schedule {
                epochs: 30,
                lr: 0.5,
                milestones: vec![20],
                weight_decay: 0.0,
                momentum: 0.9,
                batch_size: 16,
            },
            finetune: Schedule {
                epochs: 5,
                lr: 0.05,
                milestones: vec![],
                weight_decay: 1e-4,
                momentum: 0.9,
                batch_size: 16,
            },
            eval_batch_size: 32,
            ..Default::default()
        }
    }

    fn small() -> (Dataset, ModelParams) {
        let ds = gen_synthetic(&SyntheticSpec {
            classes: 3,
            per_class: 20,
            test_per_class: 10,
            size: 8,
            separation: 3.0,
            ..Default::default()
        })
        .unwrap();
        let spec = ModelSpec {
            backbone: Backbone::TinyCnn,
            widths: vec![8, 16],
            input: [3, 8, 8],
            projection_dim: 8,
            predictor_hidden: 4,
        };
        (ds, build_model(&spec, 2).unwrap())
    }

    /// An MLP whose single stage is `relu(x + 1)` on 2-pixel images.
    fn affine_identity_backbone() -> ModelParams {
        let spec = ModelSpec {
            backbone: Backbone::Mlp,
            widths: vec![2],
            input: [1, 1, 2],
            projection_dim: 2,
            predictor_hidden: 2,
        };
        let init = build_model(&spec, 0).unwrap();
        let tensors = init
            .named_tensors()
            .map(|(name, t)| {
                let t = match name {
                    "backbone.0.fc.weight" => {
                        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()
                    }
                    "backbone.0.bn.beta" => Tensor::full(&[2], 1.0),
                    _ => t.clone(),
                };
                (name.to_string(), t)
            })
            .collect();
        let stats = init
            .named_stats()
            .map(|(n, s)| (n.to_string(), s.clone()))
            .collect();
        ModelParams::from_named(&spec, tensors, stats).unwrap()
    }

    #[test]
    fn fp_probe_separates_linearly_separable_classes() {
        let params = affine_identity_backbone();
        let mut train = Split::empty(2);
        let mut test = Split::empty(2);
        for i in 0..40 {
            let t = i as Float / 40.0;
            let (x, label) = if i % 2 == 0 {
                ([t, 1.0 - t], 0)
            } else {
                ([t + 0.5, 1.5 - t], 1)
            };
            let split = if i < 30 { &mut train } else { &mut test };
            split.images.extend_from_slice(&x);
            split.labels.push(label);
        }
        let ds = Dataset {
            name: "separable".into(),
            num_classes: 2,
            shape: [1, 1, 2],
            train,
            test,
            mean: vec![0.75],
            std: vec![1.0],
        };
        let mut p = quick();
        p.linear.epochs = 300;
        p.linear.lr = 0.5;
        p.linear.batch_size = 30;
        let acc = linear_probe(&params, &ds, Precision::Fp, &p).unwrap();
        assert_eq!(acc, 100.0);
    }

    #[test]
    fn probe_is_deterministic_and_frozen() {
        let (ds, params) = small();
        let before = params.clone();
        let p = quick();
        let a = linear_probe(&params, &ds, "4w4a".parse().unwrap(), &p).unwrap();
        let b = linear_probe(&params, &ds, "4w4a".parse().unwrap(), &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(params, before);
    }

    #[test]
    fn feature_extraction_is_deterministic() {
        let (ds, params) = small();
        let f = |prec: &str| {
            extract_features(&params, &ds, &ds.test, prec.parse().unwrap(), 16).unwrap()
        };
        assert_eq!(f("2w4a"), f("2w4a"));
        assert_ne!(f("2w4a"), f("fp"));
    }

    #[test]
    fn finetune_zero_epochs_keeps_params() {
        let (ds, params) = small();
        let mut p = quick();
        p.finetune.epochs = 0;
        let m = finetune(&params, &ds, &p).unwrap();
        assert_eq!(m.params, params);
        assert_eq!(
            m.head,
            Classifier::new(params.spec().feature_dim(), 3, p.seed)
        );
    }

    #[test]
    fn finetune_is_seeded_and_fp_ptq_matches_plain_eval() {
        let (ds, params) = small();
        let p = quick();
        let a = finetune(&params, &ds, &p).unwrap();
        let b = finetune(&params, &ds, &p).unwrap();
        assert_eq!(a, b);
        let plain = {
            let f = extract_features(&a.params, &ds, &ds.test, Precision::Fp, 32).unwrap();
            head_accuracy(&a.head, &f, &ds.test.labels).unwrap()
        };
        assert_eq!(ptq_eval(&a, &ds, Precision::Fp, 32).unwrap(), plain);
    }

    #[test]
    fn sweep_shape_and_csv_round_trip() {
        let (ds, params) = small();
        let mut p = quick();
        p.bits = Precision::parse_list("fp,2w4a").unwrap();
        p.linear.epochs = 2;
        let models = vec![("a".to_string(), params.clone()), ("b".to_string(), params)];
        let table = sweep(&models, &ds, &p).unwrap();
        assert_eq!(table.rows.len(), 4);
        let csv = table.to_csv();
        assert_eq!(ResultTable::from_csv(&csv).unwrap(), table);
        assert!(csv.lines().nth(1).unwrap().contains(",0,0,"));
        let wide = table.to_wide_csv();
        assert_eq!(wide.lines().next().unwrap(), "method,backbone,fp,2w4a");
        assert_eq!(wide.lines().count(), 3);
    }

    #[test]
    fn schedule_steps_down() {
        let s = EvalProtocol::default().linear;
        assert_eq!(s.lr_at(0), 30.0);
        assert!((s.lr_at(60) - 3.0).abs() < 1e-6);
        assert!((s.lr_at(85) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn protocol_text_round_trip() {
        let mut p = EvalProtocol::default();
        p.set("bits", "fp,4w4a").unwrap();
        p.set("eval_mode", "finetune").unwrap();
        p.set("probe_milestones", "").unwrap();
        let mut q = EvalProtocol::default();
        for line in p.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(q.set(k, v).unwrap(), "{k}");
        }
        assert_eq!(p, q);
    }
}
