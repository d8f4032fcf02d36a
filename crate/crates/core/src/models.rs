//! Per-client differentiable losses with exact gradients.
//!
//! Four model kinds at desk scale: a quadratic bowl (closed-form test
//! oracle), linear regression (MSE), multinomial logistic regression, and a
//! one-hidden-layer tanh MLP (the non-convex case). Parameters are stored
//! flattened, layer-major and row-major within a layer, with each layer's
//! biases after its weights:
//!
//! - linear regression: `[w (r), b]`
//! - logistic: `[W (C x r, row-major), b (C)]`
//! - MLP: `[W1 (h x r), b1 (h), W2 (C x h), b2 (C)]`

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::params::ParamVector;
use crate::{Error, Result};

/// A labeled dataset: `n` rows of `r` features with integer labels in
/// `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Domain("dataset needs at least one sample".into()));
        }
        if feature_dim == 0 || classes == 0 {
            return Err(Error::Domain(
                "feature dimension and class count must be positive".into(),
            ));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::DimensionMismatch {
                context: "dataset features",
                expected: labels.len() * feature_dim,
                actual: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "dataset" });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Count of samples per class.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    /// New dataset from a subset of row indices (rows may repeat).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.label(i));
        }
        Self::new(features, labels, self.feature_dim, self.classes)
    }
}

/// A client's private train/test split plus its ground-truth distribution
/// group (used only for evaluation, never by the algorithms).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub group_id: usize,
}

impl ClientDataset {
    pub fn new(train: LabeledDataset, test: LabeledDataset, group_id: usize) -> Result<Self> {
        if train.feature_dim != test.feature_dim || train.classes != test.classes {
            return Err(Error::DimensionMismatch {
                context: "train/test split",
                expected: train.feature_dim,
                actual: test.feature_dim,
            });
        }
        Ok(Self {
            train,
            test,
            group_id,
        })
    }
}

/// A client: its loss model plus its private data.
#[derive(Debug, Clone, PartialEq)]
pub struct Client {
    pub model: LossModel,
    pub data: ClientDataset,
}

/// A differentiable training objective mapping flattened parameters to a
/// mean loss over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum LossModel {
    /// `F(w) = 0.5 ||w - center||^2`; ignores the dataset. Test oracle with
    /// a closed-form proximal step.
    Quadratic { center: ParamVector },
    /// Mean squared error of `w . x + b` against the label value.
    LinearRegression { feature_dim: usize },
    /// Multinomial logistic regression with softmax cross-entropy.
    LogisticRegression { feature_dim: usize, classes: usize },
    /// One hidden tanh layer, then softmax cross-entropy.
    Mlp {
        feature_dim: usize,
        hidden: usize,
        classes: usize,
    },
}

impl LossModel {
    pub fn quadratic(center: ParamVector) -> Self {
        Self::Quadratic { center }
    }

    pub fn linear_regression(feature_dim: usize) -> Self {
        Self::LinearRegression { feature_dim }
    }

    pub fn logistic(feature_dim: usize, classes: usize) -> Self {
        Self::LogisticRegression {
            feature_dim,
            classes,
        }
    }

    pub fn mlp(feature_dim: usize, hidden: usize, classes: usize) -> Self {
        Self::Mlp {
            feature_dim,
            hidden,
            classes,
        }
    }

    /// Flattened parameter count `d` implied by the kind.
    pub fn param_dim(&self) -> usize {
        match *self {
            Self::Quadratic { ref center } => center.len(),
            Self::LinearRegression { feature_dim } => feature_dim + 1,
            Self::LogisticRegression {
                feature_dim,
                classes,
            } => classes * (feature_dim + 1),
            Self::Mlp {
                feature_dim,
                hidden,
                classes,
            } => hidden * (feature_dim + 1) + classes * (hidden + 1),
        }
    }

    /// Whether [`LossModel::accuracy`] is defined for this kind.
    pub fn is_classifier(&self) -> bool {
        matches!(
            self,
            Self::LogisticRegression { .. } | Self::Mlp { .. }
        )
    }

    fn check(&self, w: &ParamVector, data: &LabeledDataset) -> Result<()> {
        if w.len() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                context: "model parameters",
                expected: self.param_dim(),
                actual: w.len(),
            });
        }
        let consistent = match *self {
            Self::Quadratic { .. } => true,
            Self::LinearRegression { feature_dim } => data.feature_dim() == feature_dim,
            Self::LogisticRegression {
                feature_dim,
                classes,
            } => data.feature_dim() == feature_dim && data.classes() == classes,
            Self::Mlp {
                feature_dim,
                classes,
                ..
            } => data.feature_dim() == feature_dim && data.classes() == classes,
        };
        if !consistent {
            return Err(Error::DimensionMismatch {
                context: "model/dataset shape",
                expected: self.param_dim(),
                actual: data.feature_dim(),
            });
        }
        Ok(())
    }

    /// Mean loss over the whole dataset.
    pub fn loss(&self, w: &ParamVector, data: &LabeledDataset) -> Result<f64> {
        self.check(w, data)?;
        Ok(self.batch_loss(w.as_slice(), data, None))
    }

    /// Exact gradient of [`LossModel::loss`].
    pub fn grad(&self, w: &ParamVector, data: &LabeledDataset) -> Result<ParamVector> {
        self.check(w, data)?;
        let mut out = vec![0.0; self.param_dim()];
        self.batch_grad(w.as_slice(), data, None, &mut out);
        ParamVector::new(out)
    }

    /// Fraction of samples whose argmax class score equals the label; ties
    /// resolve to the lowest class index.
    pub fn accuracy(&self, w: &ParamVector, data: &LabeledDataset) -> Result<f64> {
        if !self.is_classifier() {
            return Err(Error::Unsupported(
                "accuracy is only defined for classification models".into(),
            ));
        }
        self.check(w, data)?;
        let classes = data.classes();
        let mut scores = vec![0.0; classes];
        let mut hidden = self.hidden_scratch();
        let mut correct = 0usize;
        for i in 0..data.len() {
            self.scores(w.as_slice(), data.row(i), &mut scores, &mut hidden);
            let mut best = 0usize;
            for c in 1..classes {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            if best == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    fn hidden_scratch(&self) -> Vec<f64> {
        match *self {
            Self::Mlp { hidden, .. } => vec![0.0; hidden],
            _ => Vec::new(),
        }
    }

    /// Class scores (logits) for one sample. `hidden` is scratch for the MLP
    /// activations.
    fn scores(&self, w: &[f64], x: &[f64], out: &mut [f64], hidden: &mut [f64]) {
        match *self {
            Self::Quadratic { .. } | Self::LinearRegression { .. } => {
                unreachable!("scores are only used by classifiers")
            }
            Self::LogisticRegression {
                feature_dim,
                classes,
            } => {
                let biases = &w[classes * feature_dim..];
                for (c, slot) in out.iter_mut().enumerate() {
                    let row = &w[c * feature_dim..(c + 1) * feature_dim];
                    let mut z = biases[c];
                    for (wv, xv) in row.iter().zip(x.iter()) {
                        z += wv * xv;
                    }
                    *slot = z;
                }
            }
            Self::Mlp {
                feature_dim,
                hidden: h,
                classes,
            } => {
                let (w1, rest) = w.split_at(h * feature_dim);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(classes * h);
                for (j, slot) in hidden.iter_mut().enumerate() {
                    let row = &w1[j * feature_dim..(j + 1) * feature_dim];
                    let mut z = b1[j];
                    for (wv, xv) in row.iter().zip(x.iter()) {
                        z += wv * xv;
                    }
                    *slot = fmath::tanh(z);
                }
                for (c, slot) in out.iter_mut().enumerate() {
                    let row = &w2[c * h..(c + 1) * h];
                    let mut z = b2[c];
                    for (wv, av) in row.iter().zip(hidden.iter()) {
                        z += wv * av;
                    }
                    *slot = z;
                }
            }
        }
    }

    /// Mean loss over `indices` (all rows when `None`). Dimensions must have
    /// been checked by the caller.
    pub(crate) fn batch_loss(
        &self,
        w: &[f64],
        data: &LabeledDataset,
        indices: Option<&[usize]>,
    ) -> f64 {
        match *self {
            Self::Quadratic { ref center } => {
                let sq: f64 = w
                    .iter()
                    .zip(center.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                0.5 * sq
            }
            Self::LinearRegression { .. } => {
                let (w_lin, b) = (&w[..w.len() - 1], w[w.len() - 1]);
                let mut total = 0.0;
                let count = for_each_index(data, indices, |i| {
                    let x = data.row(i);
                    let mut pred = b;
                    for (wv, xv) in w_lin.iter().zip(x.iter()) {
                        pred += wv * xv;
                    }
                    let err = pred - data.label(i) as f64;
                    total += err * err;
                });
                total / count as f64
            }
            Self::LogisticRegression { .. } | Self::Mlp { .. } => {
                let classes = data.classes();
                let mut scores = vec![0.0; classes];
                let mut hidden = self.hidden_scratch();
                let mut total = 0.0;
                let count = for_each_index(data, indices, |i| {
                    self.scores(w, data.row(i), &mut scores, &mut hidden);
                    total += log_sum_exp(&scores) - scores[data.label(i)];
                });
                total / count as f64
            }
        }
    }

    /// Mean gradient over `indices` (all rows when `None`), accumulated into
    /// `out` (which is overwritten).
    pub(crate) fn batch_grad(
        &self,
        w: &[f64],
        data: &LabeledDataset,
        indices: Option<&[usize]>,
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match *self {
            Self::Quadratic { ref center } => {
                for ((o, wv), cv) in out.iter_mut().zip(w.iter()).zip(center.iter()) {
                    *o = wv - cv;
                }
            }
            Self::LinearRegression { feature_dim } => {
                let (w_lin, b) = (&w[..feature_dim], w[feature_dim]);
                let count = for_each_index(data, indices, |i| {
                    let x = data.row(i);
                    let mut pred = b;
                    for (wv, xv) in w_lin.iter().zip(x.iter()) {
                        pred += wv * xv;
                    }
                    let coeff = 2.0 * (pred - data.label(i) as f64);
                    for (o, xv) in out[..feature_dim].iter_mut().zip(x.iter()) {
                        *o += coeff * xv;
                    }
                    out[feature_dim] += coeff;
                });
                let inv = 1.0 / count as f64;
                out.iter_mut().for_each(|v| *v *= inv);
            }
            Self::LogisticRegression {
                feature_dim,
                classes,
            } => {
                let mut scores = vec![0.0; classes];
                let mut hidden = Vec::new();
                let count = for_each_index(data, indices, |i| {
                    let x = data.row(i);
                    self.scores(w, x, &mut scores, &mut hidden);
                    softmax_in_place(&mut scores);
                    scores[data.label(i)] -= 1.0;
                    for (c, &delta) in scores.iter().enumerate() {
                        let row = &mut out[c * feature_dim..(c + 1) * feature_dim];
                        for (o, xv) in row.iter_mut().zip(x.iter()) {
                            *o += delta * xv;
                        }
                        out[classes * feature_dim + c] += delta;
                    }
                });
                let inv = 1.0 / count as f64;
                out.iter_mut().for_each(|v| *v *= inv);
            }
            Self::Mlp {
                feature_dim,
                hidden: h,
                classes,
            } => {
                let (w1_end, b1_end) = (h * feature_dim, h * feature_dim + h);
                let w2_start = b1_end;
                let w2_end = w2_start + classes * h;
                let mut scores = vec![0.0; classes];
                let mut act = vec![0.0; h];
                let mut delta_hidden = vec![0.0; h];
                let count = for_each_index(data, indices, |i| {
                    let x = data.row(i);
                    self.scores(w, x, &mut scores, &mut act);
                    softmax_in_place(&mut scores);
                    scores[data.label(i)] -= 1.0;
                    // Output layer: dW2[c][j] = delta_c * a_j, db2[c] = delta_c.
                    for (c, &delta) in scores.iter().enumerate() {
                        let row = &mut out[w2_start + c * h..w2_start + (c + 1) * h];
                        for (o, av) in row.iter_mut().zip(act.iter()) {
                            *o += delta * av;
                        }
                        out[w2_end + c] += delta;
                    }
                    // Backprop through tanh: delta1 = (W2^T delta) * (1 - a^2).
                    let w2 = &w[w2_start..w2_end];
                    for (j, dh) in delta_hidden.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for (c, &delta) in scores.iter().enumerate() {
                            s += delta * w2[c * h + j];
                        }
                        *dh = s * (1.0 - act[j] * act[j]);
                    }
                    for (j, &dh) in delta_hidden.iter().enumerate() {
                        let row = &mut out[j * feature_dim..(j + 1) * feature_dim];
                        for (o, xv) in row.iter_mut().zip(x.iter()) {
                            *o += dh * xv;
                        }
                        out[w1_end + j] += dh;
                    }
                });
                let inv = 1.0 / count as f64;
                out.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
}

fn for_each_index(
    data: &LabeledDataset,
    indices: Option<&[usize]>,
    mut f: impl FnMut(usize),
) -> usize {
    match indices {
        Some(idx) => {
            for &i in idx {
                f(i);
            }
            idx.len()
        }
        None => {
            for i in 0..data.len() {
                f(i);
            }
            data.len()
        }
    }
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = scores.iter().map(|&s| fmath::exp(s - max)).sum();
    max + fmath::ln(sum)
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = fmath::exp(*s - max);
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}
