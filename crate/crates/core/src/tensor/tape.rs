#![allow(clippy::needless_range_loop)]

use super::kernels::{col2im, gemm, im2col, ConvGeom, Mat};
use super::{Float, RunningStats, Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of a user-supplied op: `(input values, output value, output grad)`
/// to one gradient buffer per input.
pub type CustomBackward = dyn Fn(&[&Tensor], &Tensor, &[Float]) -> Vec<Vec<Float>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Float),
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLastAxis(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    AvgPool2d {
        x: Var,
        k: usize,
    },
    GlobalAvgPool(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Float>,
        inv_std: Vec<Float>,
        train: bool,
    },
    L2Normalize {
        x: Var,
        norms: Vec<Float>,
    },
    StraightThrough(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<Float>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: Box<CustomBackward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops. Gradients of leaves accumulate across
/// [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c] => Some((*n, *c, 1)),
        [n, c, h, w] => Some((*n, *c, h * w)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf; `None` for non-leaves, for leaves that
    /// do not require gradients and before any backward pass reached them.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rank(&self, op: &'static str, v: Var, expected: usize) -> Result<()> {
        if self.shape(v).len() != expected {
            return Err(Error::Rank {
                op,
                expected,
                shape: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank("matmul", a, 2)?;
        self.rank("matmul", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.rank("transpose", x, 2)?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    fn zip_map(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Float, Float) -> Float,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: Float) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Adds a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, s) = channel_layout(self.shape(x)).ok_or_else(|| Error::Rank {
            op: "add_bias",
            expected: 2,
            shape: self.shape(x).to_vec(),
        })?;
        if self.shape(bias) != [c] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                out[base..base + s].iter_mut().for_each(|v| *v += b[ci]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: Float = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: Float = v.data().iter().sum::<Float>() / v.numel() as Float;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&d, lead)) = shape.split_last() else {
            return Err(Error::Rank {
                op: "sum_last_axis",
                expected: 1,
                shape,
            });
        };
        let out: Vec<Float> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().sum())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(lead.to_vec(), out),
            Op::SumLastAxis(x),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Flattens `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.first().ok_or_else(|| Error::Rank {
            op: "flatten",
            expected: 1,
            shape: shape.to_vec(),
        })?;
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Non-overlapping `k×k` average pooling on `[N, C, H, W]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.rank("avg_pool2d", x, 4)?;
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Dimension {
                op: "avg_pool2d",
                lhs: s,
                rhs: vec![k, k],
            });
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let norm = 1.0 / (k * k) as Float;
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            acc += plane[(oy * k + i) * w + ox * k + j];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::AvgPool2d { x, k },
            rg,
        ))
    }

    /// Averages `[N, C, H, W]` over the spatial axes to `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.rank("global_avg_pool", x, 4)?;
        let s = self.shape(x).to_vec();
        let hw = s[2] * s[3];
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<Float>() / hw as Float)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1]], out),
            Op::GlobalAvgPool(x),
            rg,
        ))
    }

    /// Cross-correlation of `[N, C, H, W]` with `[K, C, kh, kw]` and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.rank("conv2d", x, 4)?;
        self.rank("conv2d", w, 4)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || Error::Dimension {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if stride == 0 || xs[1] != ws[1] {
            return Err(mismatch());
        }
        let (ph, pw) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ws[2] > ph || ws[3] > pw || (ph - ws[2]) % stride != 0 || (pw - ws[3]) % stride != 0 {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            oh: (ph - ws[2]) / stride + 1,
            ow: (pw - ws[3]) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let cols_w = geom.n * geom.spatial_out();
        let mut kn = vec![0.0; geom.k * cols_w];
        gemm(
            Mat::new(self.value(w).data(), geom.k, geom.patch()),
            Mat::new(&cols, geom.patch(), cols_w),
            &mut kn,
            0.0,
        );
        // [K, N, S] -> [N, K, S]
        let so = geom.spatial_out();
        let mut out = vec![0.0; kn.len()];
        for k in 0..geom.k {
            for n in 0..geom.n {
                out[(n * geom.k + k) * so..(n * geom.k + k + 1) * so]
                    .copy_from_slice(&kn[(k * geom.n + n) * so..(k * geom.n + n + 1) * so]);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::from_parts(vec![geom.n, geom.k, geom.oh, geom.ow], out),
            Op::Conv2d { x, w, geom },
            rg,
        ))
    }

    /// Batch normalization over `[N, C]` or `[N, C, H, W]`.
    ///
    /// `Train` normalizes with batch statistics and, when `update_stats` is
    /// set, folds them into `stats`. `Eval` normalizes with `stats`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BatchNormMode,
        update_stats: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = channel_layout(&shape).ok_or_else(|| Error::Rank {
            op: "batchnorm",
            expected: 4,
            shape: shape.clone(),
        })?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(Error::Dimension {
                op: "batchnorm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let train = mode == BatchNormMode::Train;
        if train && n < 2 {
            return Err(Error::DegenerateBatch { batch: n });
        }
        let xd = self.value(x).data();
        let m = (n * s) as Float;
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    mean[ci] += xd[base..base + s].iter().sum::<Float>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    var[ci] += xd[base..base + s]
                        .iter()
                        .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                        .sum::<Float>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<Float> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for i in base..base + s {
                    xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + b[ci];
                }
            }
        }
        if train && update_stats {
            let unbiased: Vec<Float> = var.iter().map(|v| v * m / (m - 1.0)).collect();
            stats.update(&mean, &unbiased);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Scales each vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::Rank {
            op: "l2_normalize",
            expected: 1,
            shape: vec![],
        })?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(src.len() / d);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<Float>().sqrt();
            let denom = norm + NORM_EPS;
            out.extend(row.iter().map(|v| v / denom));
            norms.push(norm);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::L2Normalize { x, norms },
            rg,
        ))
    }

    /// Identity in the forward pass; the result is a constant for differentiation.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    /// Records `value` as the output of a straight-through op on `x`: the
    /// forward pass yields `value`, the backward pass passes gradients to `x`
    /// unchanged.
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.shape(x) {
            return Err(Error::Dimension {
                op: "straight_through",
                lhs: self.shape(x).to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::StraightThrough(x), rg))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.rank("softmax_cross_entropy", logits, 2)?;
        let (n, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let probs = softmax_rows(self.value(logits).data(), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * c + l].max(Float::MIN_POSITIVE)).ln())
            .sum::<Float>()
            / n as Float;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Records an op with a caller-supplied adjoint.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: Box<CustomBackward>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<Float>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                }
                continue;
            }
            for (input, contribution) in self.adjoints(i, &g) {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn adjoints(&self, i: usize, g: &[Float]) -> Vec<(Var, Vec<Float>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let mut out = vec![];
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        Mat::new(g, m, n),
                        Mat::new(val(*b).data(), k, n).t(),
                        &mut da,
                        0.0,
                    );
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        Mat::new(val(*a).data(), m, k).t(),
                        Mat::new(g, m, n),
                        &mut db,
                        0.0,
                    );
                    out.push((*b, db));
                }
                out
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::AddBias { x, bias } => {
                let (n, c, s) = channel_layout(val(*x).shape()).expect("validated in forward");
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        db[ci] += g[base..base + s].iter().sum::<Float>();
                    }
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                vec![(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::MeanAll(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n as Float; n])]
            }
            Op::SumLastAxis(x) => {
                let d = *val(*x).shape().last().expect("validated in forward");
                vec![(
                    *x,
                    g.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect(),
                )]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let len = val(*p).numel();
                        let piece = g[offset..offset + len].to_vec();
                        offset += len;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::AvgPool2d { x, k } => {
                let s = val(*x).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as Float;
                let mut dx = vec![0.0; val(*x).numel()];
                for p in 0..s[0] * s[1] {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[p * h * w + y * w + xx] = g[(p * oh + y / k) * ow + xx / k] * norm;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let norm = 1.0 / hw as Float;
                vec![(
                    *x,
                    g.iter()
                        .flat_map(|&v| std::iter::repeat_n(v * norm, hw))
                        .collect(),
                )]
            }
            Op::Conv2d { x, w, geom } => {
                let so = geom.spatial_out();
                let cols_w = geom.n * so;
                // [N, K, S] -> [K, N, S]
                let mut gk = vec![0.0; g.len()];
                for n in 0..geom.n {
                    for k in 0..geom.k {
                        gk[(k * geom.n + n) * so..(k * geom.n + n + 1) * so]
                            .copy_from_slice(&g[(n * geom.k + k) * so..(n * geom.k + k + 1) * so]);
                    }
                }
                let gmat = Mat::new(&gk, geom.k, cols_w);
                let mut out = vec![];
                if self.rg(*w) {
                    let cols = im2col(val(*x).data(), geom);
                    let mut dw = vec![0.0; geom.k * geom.patch()];
                    gemm(
                        gmat,
                        Mat::new(&cols, geom.patch(), cols_w).t(),
                        &mut dw,
                        0.0,
                    );
                    out.push((*w, dw));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; geom.patch() * cols_w];
                    gemm(
                        Mat::new(val(*w).data(), geom.k, geom.patch()).t(),
                        gmat,
                        &mut dcols,
                        0.0,
                    );
                    let mut dx = vec![0.0; val(*x).numel()];
                    col2im(&dcols, geom, &mut dx);
                    out.push((*x, dx));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, s) = channel_layout(val(*x).shape()).expect("validated in forward");
                let gv = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for j in base..base + s {
                            dgamma[ci] += g[j] * xhat[j];
                            dbeta[ci] += g[j];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                let m = (n * s) as Float;
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for j in base..base + s {
                            dx[j] = if *train {
                                // dxhat = g * gamma; sums of dxhat and dxhat*xhat per channel are
                                // gamma*dbeta and gamma*dgamma.
                                gv[ci] * inv_std[ci] / m
                                    * (m * g[j] - dbeta[ci] - xhat[j] * dgamma[ci])
                            } else {
                                g[j] * gv[ci] * inv_std[ci]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::L2Normalize { x, norms } => {
                let xv = val(*x).data();
                let d = *val(*x).shape().last().expect("validated in forward");
                let mut dx = vec![0.0; xv.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let denom = norm + NORM_EPS;
                    let dot: Float = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                    let coef = if norm > 0.0 {
                        dot / (denom * denom * norm)
                    } else {
                        0.0
                    };
                    for j in 0..d {
                        dx[r * d + j] = gr[j] / denom - coef * row[j];
                    }
                }
                vec![(*x, dx)]
            }
            Op::StraightThrough(x) => vec![(*x, g.to_vec())],
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as Float;
                let mut dl: Vec<Float> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * c + l] -= scale;
                }
                vec![(*logits, dl)]
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(backward(&values, &node.value, g))
                    .collect()
            }
        }
    }
}

/// Row-wise numerically stable softmax of a `[N, C]` buffer.
pub(crate) fn softmax_rows(logits: &[Float], c: usize) -> Vec<Float> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[Float]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv_all_ones_and_delta_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::randn(&[2, 1, 5, 4], &mut rng);
        let x = tape.constant(img.clone());
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let w = tape.constant(delta);
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.value(y), &img);
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, 2, 0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        // two samples per channel at ±1: mean 0, biased variance 1
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1., -1., -1., 1.]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        let y = tape
            .batchnorm(x, g, b, &mut stats, BatchNormMode::Train, false)
            .unwrap();
        for (a, e) in tape.value(y).data().iter().zip([1., -1., -1., 1.]) {
            assert!((a - e).abs() < 1e-4);
        }
        assert_eq!(stats, RunningStats::new(2));
    }

    #[test]
    fn batchnorm_zero_gamma_yields_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 3, 2, 2], &mut rng));
        let g = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let mut stats = RunningStats::new(3);
        let y = tape
            .batchnorm(x, g, b, &mut stats, BatchNormMode::Train, true)
            .unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            assert_eq!(*v, [0.5, -1.0, 2.0][(i / 4) % 3]);
        }
        assert_ne!(stats.mean, vec![0.0; 3]);
    }

    #[test]
    fn batchnorm_single_sample_train_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        let err = tape.batchnorm(x, g, b, &mut stats, BatchNormMode::Train, true);
        assert!(matches!(err, Err(Error::DegenerateBatch { batch: 1 })));
        assert!(tape
            .batchnorm(x, g, b, &mut stats, BatchNormMode::Eval, false)
            .is_ok());
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3., 4.]));
        let y = tape.l2_normalize(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
        let z = tape.l2_normalize(y).unwrap();
        for (a, b) in tape.value(z).data().iter().zip(tape.value(y).data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let zero = tape.constant(Tensor::zeros(&[1, 3]));
        let n = tape.l2_normalize(zero).unwrap();
        assert!(tape.value(n).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let y = tape.leaf(t(&[3], &[4., 5., 6.]), true);
        let sx = tape.stop_gradient(x);
        assert_eq!(tape.value(sx), tape.value(x));
        let prod = tape.mul(sx, y).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(y).unwrap().data(), &[1., 2., 3.]);
    }

    #[test]
    fn backward_basics_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[5]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 5]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 5]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());

        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Rank { .. })));
    }

    #[test]
    fn frozen_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones(&[2, 2]), false);
        let x = tape.leaf(Tensor::ones(&[2, 2]), true);
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0, 2.0, 3.0, -5.0, 0.0, 5.0], 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<Float>() - 1.0).abs() < 1e-6);
        }
    }
}
