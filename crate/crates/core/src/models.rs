//! Softmax classifiers with exact per-sample gradients.
//!
//! Two architectures are supported: multinomial logistic regression and a
//! one-hidden-layer ReLU MLP. Gradients come from hand-written backward passes,
//! one per sample, so every row of a [`GradientMatrix`] is the exact gradient of
//! that sample's cross-entropy loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, gaussian_vec, DenseMatrix, SeededRng};

/// Labelled feature matrix. Features are expected in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    feature_dim: usize,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset must not be empty".into()));
        }
        if feature_dim == 0 || features.len() != labels.len() * feature_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * feature_dim,
                actual: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            feature_dim,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (
            &self.features[i * self.feature_dim..(i + 1) * self.feature_dim],
            self.labels[i],
        )
    }

    /// Copy of the listed rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            let (x, y) = self.sample(i);
            features.extend_from_slice(x);
            labels.push(y);
        }
        Dataset::new(features, self.feature_dim, labels, self.classes)
    }
}

/// Architecture of a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Logistic {
        features: usize,
        classes: usize,
    },
    Mlp {
        features: usize,
        hidden: usize,
        classes: usize,
    },
}

/// One named block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

impl LayerSpec {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

pub type Layout = Arc<Vec<LayerSpec>>;

impl ModelKind {
    pub fn features(&self) -> usize {
        match *self {
            ModelKind::Logistic { features, .. } | ModelKind::Mlp { features, .. } => features,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            ModelKind::Logistic { classes, .. } | ModelKind::Mlp { classes, .. } => classes,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ModelKind::Logistic { features, classes } => features > 0 && classes > 0,
            ModelKind::Mlp {
                features,
                hidden,
                classes,
            } => features > 0 && hidden > 0 && classes > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "model dimensions must be positive: {self:?}"
            )))
        }
    }

    /// Layer layout, weights stored row-major as `[out, in]`.
    pub fn layout(&self) -> Vec<LayerSpec> {
        let blocks: Vec<(&str, Vec<usize>)> = match *self {
            ModelKind::Logistic { features, classes } => {
                vec![("weight", vec![classes, features]), ("bias", vec![classes])]
            }
            ModelKind::Mlp {
                features,
                hidden,
                classes,
            } => vec![
                ("fc1.weight", vec![hidden, features]),
                ("fc1.bias", vec![hidden]),
                ("fc2.weight", vec![classes, hidden]),
                ("fc2.bias", vec![classes]),
            ],
        };
        let mut offset = 0;
        blocks
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let spec = LayerSpec {
                    name: name.to_string(),
                    offset,
                    len,
                    shape,
                };
                offset += len;
                spec
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|l| l.len).sum()
    }
}

/// Flat parameter vector with its immutable layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Layout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn from_values(kind: &ModelKind, values: Vec<f64>) -> Result<Self> {
        kind.validate()?;
        let layout = kind.layout();
        let d: usize = layout.iter().map(|l| l.len).sum();
        if values.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: values.len(),
            });
        }
        Ok(Self {
            layout: Arc::new(layout),
            values,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|l| l.name == name)
            .map(|l| &self.values[l.range()])
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                actual: values.len(),
            });
        }
        Ok(Self {
            layout: Arc::clone(&self.layout),
            values,
        })
    }
}

/// Seeded initialization: logistic weights `N(0, 0.01²)`, MLP weights
/// `N(0, 2/fan_in)`, all biases zero.
pub fn init_params(kind: &ModelKind, seed: u64) -> Result<ModelParams> {
    kind.validate()?;
    let mut rng = SeededRng::new(seed).substream("init");
    let mut values = Vec::with_capacity(kind.param_count());
    for layer in kind.layout() {
        if layer.shape.len() == 1 {
            values.extend(std::iter::repeat_n(0.0, layer.len));
            continue;
        }
        let std = match kind {
            ModelKind::Logistic { .. } => 0.01,
            ModelKind::Mlp { .. } => (2.0 / layer.shape[1] as f64).sqrt(),
        };
        values.extend(gaussian_vec(layer.len, std, &mut rng));
    }
    ModelParams::from_values(kind, values)
}

/// Per-sample gradients (rows in input order) and losses.
#[derive(Debug, Clone)]
pub struct GradientMatrix {
    pub grads: DenseMatrix,
    pub losses: Vec<f64>,
}

impl GradientMatrix {
    pub fn batch(&self) -> usize {
        self.grads.rows()
    }

    pub fn dim(&self) -> usize {
        self.grads.cols()
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }

    pub fn mean_row(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for r in self.grads.row_iter() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.batch().max(1) as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }
}

/// Softmax probabilities and the log-sum-exp of `logits`.
fn softmax(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (exps.into_iter().map(|e| e / sum).collect(), lse)
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bo)| dot(&w[o * n_in..(o + 1) * n_in], x) + bo)
        .collect()
}

fn check_batch(kind: &ModelKind, params: &ModelParams, data: &Dataset) -> Result<()> {
    if data.feature_dim() != kind.features() {
        return Err(Error::DimensionMismatch {
            expected: kind.features(),
            actual: data.feature_dim(),
        });
    }
    if data.classes() > kind.classes() {
        return Err(Error::DimensionMismatch {
            expected: kind.classes(),
            actual: data.classes(),
        });
    }
    if params.dim() != kind.param_count() {
        return Err(Error::DimensionMismatch {
            expected: kind.param_count(),
            actual: params.dim(),
        });
    }
    Ok(())
}

/// Logits for one sample.
pub fn logits(kind: &ModelKind, params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let w = params.values();
    match *kind {
        ModelKind::Logistic { features, classes } => {
            let (wt, b) = w.split_at(features * classes);
            affine(wt, b, x)
        }
        ModelKind::Mlp {
            features,
            hidden,
            classes,
        } => {
            let (w1, rest) = w.split_at(hidden * features);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(classes * hidden);
            let a: Vec<f64> = affine(w1, b1, x).into_iter().map(|z| z.max(0.0)).collect();
            affine(w2, b2, &a)
        }
    }
}

/// Gradient and loss of one sample, written into `out`.
fn sample_grad(kind: &ModelKind, params: &ModelParams, x: &[f64], y: usize, out: &mut [f64]) -> f64 {
    let w = params.values();
    match *kind {
        ModelKind::Logistic { features, classes } => {
            let (wt, b) = w.split_at(features * classes);
            let z = affine(wt, b, x);
            let (p, lse) = softmax(&z);
            let loss = lse - z[y];
            let (gw, gb) = out.split_at_mut(features * classes);
            for c in 0..classes {
                let r = p[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] = r;
                for (g, xi) in gw[c * features..(c + 1) * features].iter_mut().zip(x) {
                    *g = r * xi;
                }
            }
            loss
        }
        ModelKind::Mlp {
            features,
            hidden,
            classes,
        } => {
            let (w1, rest) = w.split_at(hidden * features);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(classes * hidden);
            let z1 = affine(w1, b1, x);
            let a: Vec<f64> = z1.iter().map(|z| z.max(0.0)).collect();
            let z2 = affine(w2, b2, &a);
            let (p, lse) = softmax(&z2);
            let loss = lse - z2[y];

            let (gw1, rest) = out.split_at_mut(hidden * features);
            let (gb1, rest) = rest.split_at_mut(hidden);
            let (gw2, gb2) = rest.split_at_mut(classes * hidden);
            let mut da = vec![0.0; hidden];
            for c in 0..classes {
                let r = p[c] - if c == y { 1.0 } else { 0.0 };
                gb2[c] = r;
                for h in 0..hidden {
                    gw2[c * hidden + h] = r * a[h];
                    da[h] += w2[c * hidden + h] * r;
                }
            }
            for h in 0..hidden {
                let dz = if z1[h] > 0.0 { da[h] } else { 0.0 };
                gb1[h] = dz;
                for (g, xi) in gw1[h * features..(h + 1) * features].iter_mut().zip(x) {
                    *g = dz * xi;
                }
            }
            loss
        }
    }
}

/// Exact per-sample gradients of softmax cross-entropy for the listed samples.
pub fn per_sample_grads(
    kind: &ModelKind,
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
) -> Result<GradientMatrix> {
    check_batch(kind, params, data)?;
    let d = params.dim();
    let mut grads = DenseMatrix::zeros(indices.len(), d);
    let mut losses = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        if i >= data.len() {
            return Err(Error::InvalidArgument(format!("sample index {i} out of range")));
        }
        let (x, y) = data.sample(i);
        losses.push(sample_grad(kind, params, x, y, grads.row_mut(row)));
    }
    Ok(GradientMatrix { grads, losses })
}

/// Mean cross-entropy and top-1 accuracy (ties go to the lowest class index).
pub fn evaluate(kind: &ModelKind, params: &ModelParams, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on empty data".into()));
    }
    check_batch(kind, params, data)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        let z = logits(kind, params, x);
        let (_, lse) = softmax(&z);
        loss += lse - z[y];
        if argmax(&z) == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
