//! Training diagnostics: the quantization / contrastive / cross-term split of
//! the quantized objective, the correlation between the two error sources,
//! weight-distribution statistics and quantization perturbation probes.
//!
//! Embeddings are compared in squared-L2 form after L2 normalization. For
//! unit vectors `|a - b|^2 = 2 + 2 * D(a, b)` with `D` the negative cosine,
//! so these terms are an affine image of the cosine losses used in training.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{forward_encoder, forward_predictor, BnUse, ModelParams};
use crate::quant::{psq_refresh, Precision, QuantPlan};
use crate::ssl::{simsiam_loss, ssql_loss};
use crate::tensor::{Float, Tape, Tensor, NORM_EPS};
use crate::train::{augment_two_views, AugmentPipeline};

/// Batch-averaged terms of `|Fq - t|^2 = |Fq - F|^2 + |F - t|^2 + 2 (Fq - F)·(F - t)`
/// with `t` the stop-gradient target.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionRecord {
    pub q_term: Float,
    pub cl_term: Float,
    pub cross_term: Float,
    pub total: Float,
    /// Per-sample `|Fq - F|`.
    pub q_errors: Vec<Float>,
    /// Per-sample `|F - t|`.
    pub cl_errors: Vec<Float>,
}

fn normalized_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    if t.rank() != 2 {
        return Err(Error::Rank {
            op: "decompose",
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    Ok(t.rows()
        .map(|r| {
            let norm = r
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
                + NORM_EPS as f64;
            r.iter().map(|&v| v as f64 / norm).collect()
        })
        .collect())
}

/// Decomposes the objective for quantized outputs `zq`, full-precision
/// outputs `z` and targets `target`, all `[B, d]` and row-aligned.
pub fn decompose_embeddings(
    zq: &Tensor,
    z: &Tensor,
    target: &Tensor,
) -> Result<DecompositionRecord> {
    if zq.shape() != z.shape() || z.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "decompose",
            lhs: zq.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let (fq, f, t) = (
        normalized_rows(zq)?,
        normalized_rows(z)?,
        normalized_rows(target)?,
    );
    let b = f.len() as f64;
    let (mut q, mut cl, mut cross, mut total) = (0f64, 0f64, 0f64, 0f64);
    let mut q_errors = Vec::with_capacity(f.len());
    let mut cl_errors = Vec::with_capacity(f.len());
    for ((fq, f), t) in fq.iter().zip(&f).zip(&t) {
        let (mut sq, mut sc, mut sx, mut st) = (0f64, 0f64, 0f64, 0f64);
        for ((&a, &b), &c) in fq.iter().zip(f).zip(t) {
            let (dq, dc) = (a - b, b - c);
            sq += dq * dq;
            sc += dc * dc;
            sx += dq * dc;
            st += (a - c) * (a - c);
        }
        q += sq;
        cl += sc;
        cross += 2.0 * sx;
        total += st;
        q_errors.push(sq.sqrt() as Float);
        cl_errors.push(sc.sqrt() as Float);
    }
    Ok(DecompositionRecord {
        q_term: (q / b) as Float,
        cl_term: (cl / b) as Float,
        cross_term: (cross / b) as Float,
        total: (total / b) as Float,
        q_errors,
        cl_errors,
    })
}

struct Forwarded {
    z: [Tensor; 2],
    zq: [Tensor; 2],
    p: [Tensor; 2],
    pq: [Tensor; 2],
    loss_simsiam: Float,
    loss_ssql: Float,
}

/// Full-precision and quantized forwards of both views with batch statistics
/// and no parameter or running-statistic updates.
fn forward_views(
    params: &ModelParams,
    x1: &Tensor,
    x2: &Tensor,
    precision: Precision,
) -> Result<Forwarded> {
    let spec = params.spec();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let x = [tape.constant(x1.clone()), tape.constant(x2.clone())];
    let plan = QuantPlan::for_precision(precision).unwrap_or_else(QuantPlan::disabled);
    let view = psq_refresh(params, &plan);
    let mut bn = BnUse::TrainFrozen;
    let mut z = Vec::new();
    let mut zq = Vec::new();
    let mut p = Vec::new();
    let mut pq = Vec::new();
    for &xi in &x {
        let zi = forward_encoder(&mut tape, spec, &bound, &mut bn, None, xi)?;
        let zqi = forward_encoder(&mut tape, spec, &bound, &mut bn, Some(&view), xi)?;
        p.push(forward_predictor(&mut tape, &bound, &mut bn, zi)?);
        pq.push(forward_predictor(&mut tape, &bound, &mut bn, zqi)?);
        z.push(zi);
        zq.push(zqi);
    }
    let sim = simsiam_loss(&mut tape, p[0], p[1], z[0], z[1])?;
    let ssql = ssql_loss(&mut tape, pq[0], pq[1], z[0], z[1])?;
    let grab = |v: &[crate::tensor::Var]| [tape.value(v[0]).clone(), tape.value(v[1]).clone()];
    Ok(Forwarded {
        z: grab(&z),
        zq: grab(&zq),
        p: grab(&p),
        pq: grab(&pq),
        loss_simsiam: tape.value(sim).data()[0],
        loss_ssql: tape.value(ssql).data()[0],
    })
}

pub(crate) fn stack_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    Tensor::new(shape, data).expect("row-compatible tensors")
}

/// Decomposition on two views `x1`, `x2` of the same images at `precision`,
/// pooling both directions (view 1 against target view 2 and vice versa).
pub fn decompose(
    params: &ModelParams,
    x1: &Tensor,
    x2: &Tensor,
    precision: Precision,
) -> Result<DecompositionRecord> {
    let f = forward_views(params, x1, x2, precision)?;
    decompose_embeddings(
        &stack_rows(&f.zq[0], &f.zq[1]),
        &stack_rows(&f.z[0], &f.z[1]),
        &stack_rows(&f.z[1], &f.z[0]),
    )
}

/// Decomposition over augmented pairs of training images, one record per
/// batch. Images are visited in a seeded order; a trailing single-image batch
/// is dropped. `max_batches` of `None` covers the whole split.
pub fn decompose_dataset(
    params: &ModelParams,
    dataset: &Dataset,
    precision: Precision,
    pipeline: &AugmentPipeline,
    batch_size: usize,
    max_batches: Option<usize>,
    seed: u64,
) -> Result<Vec<(usize, DecompositionRecord)>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be >= 2, got {batch_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    for (b, batch) in order.chunks(batch_size).enumerate() {
        if max_batches.is_some_and(|m| b >= m) || batch.len() < 2 {
            break;
        }
        let (v1, v2): (Vec<_>, Vec<_>) = batch
            .iter()
            .map(|&i| augment_two_views(dataset.train.image(i), dataset.shape, &mut rng, pipeline))
            .unzip();
        let x1 = dataset.normalized_batch(v1.iter().map(Vec::as_slice))?;
        let x2 = dataset.normalized_batch(v2.iter().map(Vec::as_slice))?;
        out.push((b, decompose(params, &x1, &x2, precision)?));
    }
    Ok(out)
}

/// Pearson correlation computed in `f64`. Zero variance in either series
/// gives 0; the result is clamped to `[-1, 1]`.
pub fn pearson(a: &[Float], b: &[Float]) -> Float {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mb = b[..n].iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a[..n].iter().zip(&b[..n]) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0) as Float
}

/// Pearson r between per-sample quantization and contrastive errors over
/// consecutive windows of `window` sample pairs. A trailing partial window
/// of at least two pairs is included.
pub fn qcl_correlation(records: &[DecompositionRecord], window: usize) -> Result<Vec<Float>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no decomposition records".into()));
    }
    if window < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation window must be >= 2, got {window}"
        )));
    }
    let q: Vec<Float> = records
        .iter()
        .flat_map(|r| r.q_errors.iter().copied())
        .collect();
    let c: Vec<Float> = records
        .iter()
        .flat_map(|r| r.cl_errors.iter().copied())
        .collect();
    Ok(q.chunks(window)
        .zip(c.chunks(window))
        .filter(|(a, _)| a.len() >= 2)
        .map(|(a, b)| pearson(a, b))
        .collect())
}

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightStats {
    pub layer: String,
    pub min: Float,
    pub max: Float,
    pub std: Float,
    /// Non-excess kurtosis (3 for a Gaussian); 0 for constant layers.
    pub kurtosis: Float,
    /// Fraction of weights with `|w| > 6 * std`; 0 for constant layers.
    pub outlier_frac: Float,
    /// Probability mass over 64 equal bins spanning `[min, max]`.
    pub histogram: Vec<Float>,
}

impl WeightStats {
    pub fn range(&self) -> Float {
        self.max - self.min
    }
}

pub fn layer_stats(layer: &str, values: &[Float]) -> Result<WeightStats> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!("layer '{layer}' is empty")));
    }
    let n = values.len() as f64;
    let min = values.iter().copied().fold(Float::INFINITY, Float::min);
    let max = values.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m4) = (0f64, 0f64);
    for &v in values {
        let d = v as f64 - mean;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    let (m2, m4) = (m2 / n, m4 / n);
    let std = m2.sqrt();
    let (kurtosis, outlier_frac) = if m2 > 0.0 {
        let outliers = values
            .iter()
            .filter(|&&v| (v as f64).abs() > 6.0 * std)
            .count();
        (m4 / (m2 * m2), outliers as f64 / n)
    } else {
        (0.0, 0.0)
    };
    let mut histogram = vec![0.0; HISTOGRAM_BINS];
    let width = (max - min) as f64;
    for &v in values {
        let bin = if width > 0.0 {
            (((v - min) as f64 / width * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        histogram[bin] += 1.0;
    }
    histogram.iter_mut().for_each(|h| *h /= n as Float);
    Ok(WeightStats {
        layer: layer.to_string(),
        min,
        max,
        std: std as Float,
        kurtosis: kurtosis as Float,
        outlier_frac: outlier_frac as Float,
        histogram,
    })
}

/// Statistics of every quantized weight (backbone and projector).
pub fn weight_stats(params: &ModelParams) -> Result<Vec<WeightStats>> {
    params
        .quantizable_weight_indices()
        .into_iter()
        .map(|i| layer_stats(params.name(i), params.tensor(i).data()))
        .collect()
}

/// Effect of quantization at the projection output on one pair of views.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    /// Mean and max per-sample `|zq - z|` on raw projection outputs.
    pub mean_dz: Float,
    pub max_dz: Float,
    /// Mean per-sample `|zq/|zq| - z/|z||`.
    pub mean_dz_normalized: Float,
    /// Mean per-sample distance between normalized quantized and FP predictions.
    pub mean_dp_normalized: Float,
    pub loss_simsiam: Float,
    pub loss_ssql: Float,
    /// `loss_ssql - loss_simsiam`.
    pub loss_delta: Float,
}

fn row_distances(a: &Tensor, b: &Tensor, normalize: bool) -> Result<Vec<f64>> {
    let (ra, rb): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if normalize {
        (normalized_rows(a)?, normalized_rows(b)?)
    } else {
        let raw = |t: &Tensor| {
            t.rows()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect()
        };
        (raw(a), raw(b))
    };
    Ok(ra
        .iter()
        .zip(&rb)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// `|loss_delta| <= 2 * mean_dp_normalized` holds because each of the two
/// cosine terms moves by at most the distance between normalized predictions.
pub fn perturbation_probe(
    params: &ModelParams,
    x1: &Tensor,
    x2: &Tensor,
    precision: Precision,
) -> Result<PerturbationReport> {
    let f = forward_views(params, x1, x2, precision)?;
    let mut dz = Vec::new();
    let mut dzn = Vec::new();
    let mut dpn = Vec::new();
    for v in 0..2 {
        dz.extend(row_distances(&f.zq[v], &f.z[v], false)?);
        dzn.extend(row_distances(&f.zq[v], &f.z[v], true)?);
        dpn.extend(row_distances(&f.pq[v], &f.p[v], true)?);
    }
    let mean = |v: &[f64]| (v.iter().sum::<f64>() / v.len() as f64) as Float;
    Ok(PerturbationReport {
        mean_dz: mean(&dz),
        max_dz: dz.iter().copied().fold(0.0, f64::max) as Float,
        mean_dz_normalized: mean(&dzn),
        mean_dp_normalized: mean(&dpn),
        loss_simsiam: f.loss_simsiam,
        loss_ssql: f.loss_ssql,
        loss_delta: f.loss_ssql - f.loss_simsiam,
    })
}

pub const DECOMPOSITION_HEADER: &str = "step,q_term,cl_term,cross_term,total";
pub const CORRELATION_HEADER: &str = "step,r";
pub const WEIGHT_STATS_HEADER: &str = "layer,min,max,std,kurtosis,outlier_frac";
pub const HISTOGRAM_HEADER: &str = "layer,bin,mass";

pub fn decomposition_csv(rows: &[(usize, DecompositionRecord)]) -> String {
    let mut s = format!("{DECOMPOSITION_HEADER}\n");
    for (step, r) in rows {
        let _ = writeln!(
            s,
            "{step},{},{},{},{}",
            r.q_term, r.cl_term, r.cross_term, r.total
        );
    }
    s
}

pub fn correlation_csv(rows: &[(usize, Float)]) -> String {
    let mut s = format!("{CORRELATION_HEADER}\n");
    for (step, r) in rows {
        let _ = writeln!(s, "{step},{r}");
    }
    s
}

pub fn weight_stats_csv(rows: &[WeightStats]) -> String {
    let mut s = format!("{WEIGHT_STATS_HEADER}\n");
    for w in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            w.layer, w.min, w.max, w.std, w.kurtosis, w.outlier_frac
        );
    }
    s
}

pub fn histogram_csv(rows: &[WeightStats]) -> String {
    let mut s = format!("{HISTOGRAM_HEADER}\n");
    for w in rows {
        for (i, m) in w.histogram.iter().enumerate() {
            let _ = writeln!(s, "{},{i},{m}", w.layer);
        }
    }
    s
}

fn csv_rows<'a>(text: &'a str, header: &str, fields: usize) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Config(format!("expected CSV header '{header}'")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != fields {
                return Err(Error::Config(format!(
                    "CSV row '{l}' needs {fields} fields"
                )));
            }
            Ok(f)
        })
        .collect()
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad number '{v}' in CSV")))
}

/// Per-sample errors are not part of the CSV and come back empty.
pub fn parse_decomposition_csv(text: &str) -> Result<Vec<(usize, DecompositionRecord)>> {
    csv_rows(text, DECOMPOSITION_HEADER, 5)?
        .into_iter()
        .map(|f| {
            Ok((
                num(f[0])?,
                DecompositionRecord {
                    q_term: num(f[1])?,
                    cl_term: num(f[2])?,
                    cross_term: num(f[3])?,
                    total: num(f[4])?,
                    q_errors: Vec::new(),
                    cl_errors: Vec::new(),
                },
            ))
        })
        .collect()
}

pub fn parse_correlation_csv(text: &str) -> Result<Vec<(usize, Float)>> {
    csv_rows(text, CORRELATION_HEADER, 2)?
        .into_iter()
        .map(|f| Ok((num(f[0])?, num(f[1])?)))
        .collect()
}

/// Histograms are not part of this CSV and come back empty.
pub fn parse_weight_stats_csv(text: &str) -> Result<Vec<WeightStats>> {
    csv_rows(text, WEIGHT_STATS_HEADER, 6)?
        .into_iter()
        .map(|f| {
            Ok(WeightStats {
                layer: f[0].to_string(),
                min: num(f[1])?,
                max: num(f[2])?,
                std: num(f[3])?,
                kurtosis: num(f[4])?,
                outlier_frac: num(f[5])?,
                histogram: Vec::new(),
            })
        })
        .collect()
}

pub fn parse_histogram_csv(text: &str) -> Result<Vec<(String, usize, Float)>> {
    csv_rows(text, HISTOGRAM_HEADER, 3)?
        .into_iter()
        .map(|f| Ok((f[0].to_string(), num(f[1])?, num(f[2])?)))
        .collect()
}
