//! Dense feed-forward networks over flat parameter vectors.
//!
//! A [`Layout`] describes the architecture and where every weight matrix and
//! bias vector lives inside a [`ParamVector`]. Segments are stored in layer
//! order, weight before bias. Weight matrices are row-major with shape
//! `(input_dim, output_dim)`, so a layer computes `Z = A · W + b`.
//!
//! The loss is softmax cross-entropy averaged over the batch, and gradients
//! are exact (hand-written backpropagation).

use std::sync::Arc;

use ndarray::{linalg::general_mat_mul, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Raw logits; softmax is applied inside the loss.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn relu(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn logits(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            activation: Activation::Identity,
        }
    }
}

/// ReLU hidden layers followed by a linear output layer.
///
/// `dims = [784, 128, 64, 10]` yields `784→128→64→10`.
pub fn dense_stack(dims: &[usize]) -> Vec<LayerSpec> {
    let n = dims.len().saturating_sub(1);
    (0..n)
        .map(|k| {
            if k + 1 == n {
                LayerSpec::logits(dims[k], dims[k + 1])
            } else {
                LayerSpec::relu(dims[k], dims[k + 1])
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
    /// `(rows, cols)`; biases are `(1, output_dim)`.
    pub shape: (usize, usize),
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Which layout segment to address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    Weight(usize),
    Bias(usize),
    FirstWeight,
    LastWeight,
    LastBias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    layers: Vec<LayerSpec>,
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new(layers: &[LayerSpec]) -> Result<Arc<Self>> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.input_dim == 0 || l.output_dim == 0 {
                return Err(Error::config(format!("layer {k} has a zero dimension")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim != pair[1].input_dim {
                return Err(Error::config(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].output_dim,
                    k + 1,
                    pair[1].input_dim
                )));
            }
        }
        let mut segments = Vec::with_capacity(layers.len() * 2);
        let mut offset = 0;
        for (layer, l) in layers.iter().enumerate() {
            let w = l.input_dim * l.output_dim;
            segments.push(Segment {
                layer,
                kind: SegmentKind::Weight,
                offset,
                len: w,
                shape: (l.input_dim, l.output_dim),
            });
            offset += w;
            segments.push(Segment {
                layer,
                kind: SegmentKind::Bias,
                offset,
                len: l.output_dim,
                shape: (1, l.output_dim),
            });
            offset += l.output_dim;
        }
        Ok(Arc::new(Self {
            layers: layers.to_vec(),
            segments,
            total: offset,
        }))
    }

    /// A layout with no segments; every query fails.
    pub fn empty() -> Arc<Self> {
        Arc::new(Self {
            layers: Vec::new(),
            segments: Vec::new(),
            total: 0,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    pub fn find(&self, selector: Selector) -> Result<&Segment> {
        let last = self.layers.len().checked_sub(1);
        let (layer, kind) = match selector {
            Selector::Weight(k) => (Some(k), SegmentKind::Weight),
            Selector::Bias(k) => (Some(k), SegmentKind::Bias),
            Selector::FirstWeight => (last.map(|_| 0), SegmentKind::Weight),
            Selector::LastWeight => (last, SegmentKind::Weight),
            Selector::LastBias => (last, SegmentKind::Bias),
        };
        layer
            .and_then(|layer| {
                self.segments
                    .iter()
                    .find(|s| s.layer == layer && s.kind == kind)
            })
            .ok_or_else(|| Error::Query(format!("no segment matches {selector:?}")))
    }
}

/// Model parameters (or a delta / gradient) as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.num_params() {
            return Err(Error::shape(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.num_params()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: &Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.num_params()],
            layout: Arc::clone(layout),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.layout)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape("parameter layouts differ"))
        }
    }

    pub fn segment(&self, selector: Selector) -> Result<&[f64]> {
        let seg = self.layout.find(selector)?;
        Ok(&self.values[seg.range()])
    }

    pub fn segment_mut(&mut self, selector: Selector) -> Result<&mut [f64]> {
        let range = self.layout.find(selector)?.range();
        Ok(&mut self.values[range])
    }

    /// Copy of one layout segment.
    pub fn slice_segment(&self, selector: Selector) -> Result<Vec<f64>> {
        self.segment(selector).map(<[f64]>::to_vec)
    }

    /// `self + scale · delta`.
    pub fn axpy(&self, delta: &ParamVector, scale: f64) -> Result<ParamVector> {
        let mut out = self.clone();
        out.axpy_assign(delta, scale)?;
        Ok(out)
    }

    pub fn axpy_assign(&mut self, delta: &ParamVector, scale: f64) -> Result<()> {
        self.check_layout(delta)?;
        for (p, d) in self.values.iter_mut().zip(&delta.values) {
            *p += scale * d;
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| v * factor).collect(),
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|&v| f(v)).collect(),
            layout: Arc::clone(&self.layout),
        }
    }
}

pub(crate) fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A mini-batch stored row-major: `features[i * dim .. (i + 1) * dim]` is
/// sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::shape("batch is empty"));
        }
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("ragged feature rows"));
        }
        if rows.len() != labels.len() {
            return Err(Error::shape("inputs and labels differ in length"));
        }
        Self::new(rows.concat(), dim, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [usize] {
        &mut self.labels
    }

    /// The same samples with every row repeated `times` times.
    pub fn repeated(&self, times: usize) -> Batch {
        let mut features = Vec::with_capacity(self.features.len() * times);
        let mut labels = Vec::with_capacity(self.labels.len() * times);
        for _ in 0..times {
            features.extend_from_slice(&self.features);
            labels.extend_from_slice(&self.labels);
        }
        Batch {
            features,
            dim: self.dim,
            labels,
        }
    }

    fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.labels.len(), self.dim), &self.features)
            .expect("batch invariant: features.len() == len * dim")
    }
}

/// Seeded initialization: weights uniform in `±sqrt(6 / (fan_in + fan_out))`,
/// biases zero.
pub fn init_model(layers: &[LayerSpec], seed: u64) -> Result<ParamVector> {
    let layout = Layout::new(layers)?;
    let mut params = ParamVector::zeros(&layout);
    let mut rng = rng::stream(seed, Purpose::Init, &[]);
    for seg in layout.segments() {
        if seg.kind != SegmentKind::Weight {
            continue;
        }
        let (fan_in, fan_out) = seg.shape;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut params.values[seg.range()] {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

fn check_inputs(params: &ParamVector, dim: usize, labels: Option<&[usize]>) -> Result<()> {
    let layout = params.layout();
    if layout.layers().is_empty() {
        return Err(Error::shape("parameter layout has no layers"));
    }
    if dim != layout.input_dim() {
        return Err(Error::shape(format!(
            "feature dimension {dim} does not match network input {}",
            layout.input_dim()
        )));
    }
    if let Some(labels) = labels {
        let c = layout.num_classes();
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::shape(format!("label {bad} outside [0, {c})")));
        }
    }
    Ok(())
}

fn weight_view<'a>(params: &'a ParamVector, seg: &Segment) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape(seg.shape, &params.values[seg.range()])
        .expect("layout invariant: segment shape matches length")
}

/// Returns every layer input (`acts[0]` is the batch itself) plus the logits.
fn forward_all(params: &ParamVector, x: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
    let layout = params.layout();
    let n = x.nrows();
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layout.layers().len());
    let mut current = x.to_owned();
    for (k, spec) in layout.layers().iter().enumerate() {
        let w = weight_view(params, &layout.segments()[2 * k]);
        let b_seg = &layout.segments()[2 * k + 1];
        let b = ArrayView1::from(&params.values[b_seg.range()]);
        let mut z = Array2::<f64>::zeros((n, spec.output_dim));
        general_mat_mul(1.0, &current, &w, 0.0, &mut z);
        z += &b;
        if spec.activation == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(std::mem::replace(&mut current, z));
    }
    (acts, current)
}

/// Logits, one row per sample.
pub fn forward(params: &ParamVector, batch: &Batch) -> Result<Array2<f64>> {
    check_inputs(params, batch.dim(), None)?;
    Ok(forward_all(params, batch.view()).1)
}

/// Logits for `n` row-major samples stored in `features`.
pub fn forward_rows(params: &ParamVector, features: &[f64], dim: usize) -> Result<Array2<f64>> {
    check_inputs(params, dim, None)?;
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::shape("features are not a whole number of rows"));
    }
    let x = ArrayView2::from_shape((features.len() / dim, dim), features)
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(forward_all(params, x).1)
}

/// Index of the largest entry; ties (and NaN rows) resolve to the lowest
/// index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean softmax cross-entropy and its exact gradient.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    check_inputs(params, batch.dim(), Some(batch.labels()))?;
    let layout = Arc::clone(params.layout());
    let n = batch.len();
    let (acts, logits) = forward_all(params, batch.view());

    // dL/dZ for the output layer: (softmax - onehot) / n
    let mut loss = 0.0;
    let mut dz = logits;
    for (mut row, &y) in dz.axis_iter_mut(Axis(0)).zip(batch.labels()) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp());
        row[y] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    dz.mapv_inplace(|v| v * inv_n);

    let mut grad = ParamVector::zeros(&layout);
    for k in (0..layout.layers().len()).rev() {
        let w_seg = layout.segments()[2 * k];
        let b_seg = layout.segments()[2 * k + 1];
        {
            let mut gw = ArrayViewMut2::from_shape(w_seg.shape, &mut grad.values[w_seg.range()])
                .expect("layout invariant");
            general_mat_mul(1.0, &acts[k].t(), &dz, 0.0, &mut gw);
        }
        for (g, col) in grad.values[b_seg.range()]
            .iter_mut()
            .zip(dz.axis_iter(Axis(1)))
        {
            *g = col.sum();
        }
        if k == 0 {
            break;
        }
        let w = weight_view(params, &w_seg);
        let mut da = Array2::<f64>::zeros((n, w_seg.shape.0));
        general_mat_mul(1.0, &dz, &w.t(), 0.0, &mut da);
        // acts[k] is the ReLU output of layer k-1 when that layer is ReLU.
        if layout.layers()[k - 1].activation == Activation::Relu {
            ndarray::Zip::from(&mut da).and(&acts[k]).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        dz = da;
    }
    Ok((loss, grad))
}

/// One plain SGD step: `params - lr · grad`.
pub fn sgd_step(params: &ParamVector, batch: &Batch, lr: f64) -> Result<(f64, ParamVector)> {
    let (loss, grad) = loss_and_grad(params, batch)?;
    Ok((loss, params.axpy(&grad, -lr)?))
}
