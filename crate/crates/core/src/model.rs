//! Hypothesis sets: linear regression, softmax classifier and a small MLP.
//!
//! All three are feed-forward stacks of affine layers over a flat
//! [`ParamVector`]. Each layer stores an `out x (in + 1)` row-major block
//! whose last column is the bias, which is equivalent to appending a
//! constant-1 feature to the layer input. Hidden layers use `tanh`; the output
//! is the identity (linear regression, squared loss) or softmax
//! (classification, cross-entropy).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Targets};
use crate::{Error, Result};

/// Probabilities are clamped to `[CE_EPSILON, 1]` before taking the log.
pub const CE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression,
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_bound: Option<f64>,
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::LinearRegression,
            input_dim,
            num_classes: None,
            hidden_dims: Vec::new(),
            weight_bound: None,
        }
    }

    pub fn softmax(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Softmax,
            input_dim,
            num_classes: Some(num_classes),
            hidden_dims: Vec::new(),
            weight_bound: None,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self { kind: ModelKind::Mlp, input_dim, num_classes: Some(num_classes), hidden_dims, weight_bound: None }
    }

    pub fn with_weight_bound(mut self, bound: f64) -> Self {
        self.weight_bound = Some(bound);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Parameter("input_dim must be positive".into()));
        }
        match self.kind {
            ModelKind::LinearRegression => {
                if self.num_classes.is_some() {
                    return Err(Error::Parameter("linear-regression takes no num_classes".into()));
                }
                if !self.hidden_dims.is_empty() {
                    return Err(Error::Parameter("linear-regression takes no hidden_dims".into()));
                }
            }
            ModelKind::Softmax | ModelKind::Mlp => match self.num_classes {
                Some(k) if k >= 2 => {}
                _ => return Err(Error::Parameter("classification needs num_classes >= 2".into())),
            },
        }
        if self.kind == ModelKind::Softmax && !self.hidden_dims.is_empty() {
            return Err(Error::Parameter("softmax takes no hidden_dims".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Parameter("hidden_dims must be positive".into()));
        }
        if let Some(b) = self.weight_bound {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Parameter("weight_bound must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn is_classifier(&self) -> bool {
        self.kind != ModelKind::LinearRegression
    }

    /// `[input, hidden..., output]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim());
        dims
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            ModelKind::LinearRegression => 1,
            _ => self.num_classes.unwrap_or(1),
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape { kind: self.kind, layer_dims: self.layer_dims() }
    }

    pub fn num_params(&self) -> usize {
        self.shape().num_params()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub kind: ModelKind,
    pub layer_dims: Vec<usize>,
}

impl ModelShape {
    pub fn num_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

/// Flat model parameters `w` together with the shape they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    shape: ModelShape,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let shape = spec.shape();
        Self { values: vec![0.0; shape.num_params()], shape }
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        let shape = spec.shape();
        if values.len() != shape.num_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", shape.num_params(), values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("parameters must be finite".into()));
        }
        Ok(Self { values, shape })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let mut w = Self::zeros(spec);
        let mut offset = 0;
        for win in w.shape.layer_dims.clone().windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for o in 0..fan_out {
                let row = offset + o * (fan_in + 1);
                for v in &mut w.values[row..row + fan_in] {
                    *v = rng.random_range(-limit..limit);
                }
            }
            offset += fan_out * (fan_in + 1);
        }
        w
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

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.shape != spec.shape() {
            return Err(Error::Shape(format!(
                "parameters built for {:?} but spec wants {:?}",
                self.shape,
                spec.shape()
            )));
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &ParamVector) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Subtract the same vector `phi` (length `input_dim + 1`) from every class
    /// row of a softmax model. The predicted distribution is unchanged.
    pub fn shift_class_rows(&self, phi: &[f64]) -> Result<ParamVector> {
        if self.shape.kind != ModelKind::Softmax {
            return Err(Error::Unsupported("class-row shift is defined for softmax models".into()));
        }
        let row = self.shape.layer_dims[0] + 1;
        if phi.len() != row {
            return Err(Error::Shape(format!("shift vector has length {}, class rows have {row}", phi.len())));
        }
        let mut out = self.clone();
        for chunk in out.values.chunks_mut(row) {
            for (v, p) in chunk.iter_mut().zip(phi) {
                *v -= p;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Scalar(f64),
    Probabilities(Vec<f64>),
}

/// Reusable activation buffers for one forward/backward pass.
struct Workspace {
    dims: Vec<usize>,
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            deltas: dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    /// Fill `acts`; the last entry holds the raw output (logits or the scalar).
    fn forward(&mut self, w: &[f64], x: &[f64]) {
        self.acts[0].copy_from_slice(x);
        let layers = self.dims.len() - 1;
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let (head, tail) = self.acts.split_at_mut(l + 1);
            let input = &head[l];
            let output = &mut tail[0];
            for (o, out) in output.iter_mut().enumerate() {
                let row = &w[offset + o * (n_in + 1)..offset + (o + 1) * (n_in + 1)];
                let z = row[..n_in].iter().zip(input.iter()).map(|(a, b)| a * b).sum::<f64>() + row[n_in];
                *out = if l + 1 < layers { z.tanh() } else { z };
            }
            offset += n_out * (n_in + 1);
        }
    }

    /// Backpropagate `deltas[last]` (d loss / d raw output) into `grad`, scaled by `scale`.
    fn backward(&mut self, w: &[f64], grad: &mut [f64], scale: f64) {
        let layers = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.dims[l + 1] * (self.dims[l] + 1);
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let offset = offsets[l];
            let (dh, dt) = self.deltas.split_at_mut(l + 1);
            let delta_out = &dt[0];
            let delta_in = &mut dh[l];
            delta_in.iter_mut().for_each(|v| *v = 0.0);
            let input = &self.acts[l];
            for o in 0..n_out {
                let d = delta_out[o];
                if d == 0.0 {
                    continue;
                }
                let base = offset + o * (n_in + 1);
                let g = &mut grad[base..base + n_in + 1];
                for i in 0..n_in {
                    g[i] += scale * d * input[i];
                }
                g[n_in] += scale * d;
                if l > 0 {
                    let row = &w[base..base + n_in];
                    for i in 0..n_in {
                        delta_in[i] += d * row[i];
                    }
                }
            }
            if l > 0 {
                // input to this layer is tanh(z) of the previous one
                for (di, a) in delta_in.iter_mut().zip(input.iter()) {
                    *di *= 1.0 - a * a;
                }
            }
        }
    }

    fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

fn log_softmax_at(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[class] - lse
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_inputs(spec: &ModelSpec, w: &ParamVector, data: &ClientDataset) -> Result<()> {
    w.check_spec(spec)?;
    if data.dim() != spec.input_dim {
        return Err(Error::Shape(format!("dataset has {} features, model expects {}", data.dim(), spec.input_dim)));
    }
    match (&data.targets, spec.kind) {
        (Targets::Regression(_), ModelKind::LinearRegression) => Ok(()),
        (Targets::Classes { num_classes, .. }, ModelKind::Softmax | ModelKind::Mlp)
            if Some(*num_classes) == spec.num_classes =>
        {
            Ok(())
        }
        _ => Err(Error::Shape("dataset targets do not match the model kind".into())),
    }
}

pub fn predict(spec: &ModelSpec, w: &ParamVector, x: &[f64]) -> Result<Prediction> {
    w.check_spec(spec)?;
    if x.len() != spec.input_dim {
        return Err(Error::Shape(format!("feature vector has length {}, model expects {}", x.len(), spec.input_dim)));
    }
    let mut ws = Workspace::new(&spec.layer_dims());
    ws.forward(w.values(), x);
    Ok(match spec.kind {
        ModelKind::LinearRegression => Prediction::Scalar(ws.output()[0]),
        _ => {
            let mut p = vec![0.0; spec.output_dim()];
            softmax_into(ws.output(), &mut p);
            Prediction::Probabilities(p)
        }
    })
}

/// Per-sample loss given the raw output; also writes d loss / d output into `delta`.
fn sample_loss(kind: ModelKind, output: &[f64], target: Target, delta: Option<&mut [f64]>) -> f64 {
    match (kind, target) {
        (ModelKind::LinearRegression, Target::Real(y)) => {
            let r = output[0] - y;
            if let Some(d) = delta {
                d[0] = 2.0 * r;
            }
            r * r
        }
        (_, Target::Class(c)) => {
            let nll = -log_softmax_at(output, c);
            let cap = -CE_EPSILON.ln();
            if let Some(d) = delta {
                if nll >= cap {
                    d.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    softmax_into(output, d);
                    d[c] -= 1.0;
                }
            }
            nll.min(cap)
        }
        _ => unreachable!("targets checked against model kind"),
    }
}

#[derive(Clone, Copy)]
enum Target {
    Real(f64),
    Class(usize),
}

fn target_at(data: &ClientDataset, i: usize) -> Target {
    match &data.targets {
        Targets::Regression(y) => Target::Real(y[i]),
        Targets::Classes { labels, .. } => Target::Class(labels[i]),
    }
}

/// Mean loss over `indices` (or all samples) and, optionally, its gradient.
pub(crate) fn evaluate(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &ClientDataset,
    indices: Option<&[usize]>,
    with_grad: bool,
) -> Result<(f64, Option<ParamVector>)> {
    check_inputs(spec, w, data)?;
    let count = indices.map_or(data.len(), <[usize]>::len);
    if count == 0 {
        return Err(Error::EmptyInput("loss needs at least one sample"));
    }
    let mut ws = Workspace::new(&spec.layer_dims());
    let mut grad = with_grad.then(|| ParamVector::zeros(spec));
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    let mut visit = |i: usize| {
        ws.forward(w.values(), data.row(i));
        let target = target_at(data, i);
        let last = ws.dims.len() - 1;
        match grad.as_mut() {
            Some(g) => {
                let (acts, deltas) = (&ws.acts, &mut ws.deltas);
                total += sample_loss(spec.kind, &acts[last], target, Some(&mut deltas[last]));
                ws.backward(w.values(), g.values_mut(), scale);
            }
            None => total += sample_loss(spec.kind, ws.output(), target, None),
        }
    };
    match indices {
        Some(idx) => idx.iter().for_each(|&i| visit(i)),
        None => (0..data.len()).for_each(&mut visit),
    }
    Ok((total * scale, grad))
}

/// Empirical loss `L_i(w)`: mean squared error or mean cross-entropy.
pub fn loss(spec: &ModelSpec, w: &ParamVector, data: &ClientDataset) -> Result<f64> {
    evaluate(spec, w, data, None, false).map(|(l, _)| l)
}

/// Gradient of the mean loss over the given sample indices.
pub fn gradient(spec: &ModelSpec, w: &ParamVector, data: &ClientDataset, batch: &[usize]) -> Result<ParamVector> {
    evaluate(spec, w, data, Some(batch), true).map(|(_, g)| g.expect("gradient requested"))
}

pub fn full_gradient(spec: &ModelSpec, w: &ParamVector, data: &ClientDataset) -> Result<ParamVector> {
    evaluate(spec, w, data, None, true).map(|(_, g)| g.expect("gradient requested"))
}

/// Fraction of samples whose argmax prediction equals the label; ties go to the
/// lowest class index.
pub fn accuracy(spec: &ModelSpec, w: &ParamVector, data: &ClientDataset) -> Result<f64> {
    if !spec.is_classifier() {
        return Err(Error::Unsupported("accuracy is undefined for linear regression".into()));
    }
    check_inputs(spec, w, data)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("accuracy needs at least one sample"));
    }
    let Targets::Classes { labels, .. } = &data.targets else { unreachable!("checked above") };
    let mut ws = Workspace::new(&spec.layer_dims());
    let correct = (0..data.len())
        .filter(|&i| {
            ws.forward(w.values(), data.row(i));
            argmax_lowest(ws.output()) == labels[i]
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn toy_classes(m: usize, d: usize, k: usize, seed_v: u64) -> ClientDataset {
        let mut rng = seed::rng(seed_v, &[]);
        let features: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..m).map(|i| i % k).collect();
        ClientDataset::new(0, d, features, Targets::Classes { labels, num_classes: k }).unwrap()
    }

    #[test]
    fn zero_softmax_is_uniform() {
        let spec = ModelSpec::softmax(3, 4);
        let w = ParamVector::zeros(&spec);
        let Prediction::Probabilities(p) = predict(&spec, &w, &[0.3, -1.0, 2.0]).unwrap() else { panic!() };
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_prediction_by_hand() {
        let spec = ModelSpec::linear(2);
        let w = ParamVector::from_values(&spec, vec![2.0, -1.0, 0.5]).unwrap();
        assert_eq!(predict(&spec, &w, &[1.0, 3.0]).unwrap(), Prediction::Scalar(-0.5));
    }

    #[test]
    fn predict_rejects_wrong_dimension() {
        let spec = ModelSpec::linear(2);
        let w = ParamVector::zeros(&spec);
        assert!(matches!(predict(&spec, &w, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_softmax_loss_is_log_k() {
        let spec = ModelSpec::softmax(5, 4);
        let data = toy_classes(13, 5, 4, 3);
        let l = loss(&spec, &ParamVector::zeros(&spec), &data).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn interpolating_linear_model_has_zero_loss_and_gradient() {
        let spec = ModelSpec::linear(1);
        let data = ClientDataset::new(0, 1, vec![1.0, 2.0, -3.0], Targets::Regression(vec![2.5, 4.5, -5.5])).unwrap();
        let w = ParamVector::from_values(&spec, vec![2.0, 0.5]).unwrap();
        assert_eq!(loss(&spec, &w, &data).unwrap(), 0.0);
        let g = full_gradient(&spec, &w, &data).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let spec = ModelSpec::linear(1);
        let data = ClientDataset::new(0, 1, vec![], Targets::Regression(vec![])).unwrap();
        assert!(matches!(loss(&spec, &ParamVector::zeros(&spec), &data), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn accuracy_ties_go_to_class_zero() {
        let spec = ModelSpec::softmax(2, 2);
        let data = toy_classes(10, 2, 2, 9);
        let acc = accuracy(&spec, &ParamVector::zeros(&spec), &data).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn accuracy_on_linear_model_is_unsupported() {
        let spec = ModelSpec::linear(1);
        let data = ClientDataset::new(0, 1, vec![1.0], Targets::Regression(vec![1.0])).unwrap();
        assert!(matches!(accuracy(&spec, &ParamVector::zeros(&spec), &data), Err(Error::Unsupported(_))));
    }

    #[test]
    fn perfect_classifier_on_separable_points() {
        let spec = ModelSpec::softmax(1, 2);
        let data = ClientDataset::new(
            0,
            1,
            vec![-2.0, -1.0, 1.0, 2.0],
            Targets::Classes { labels: vec![0, 0, 1, 1], num_classes: 2 },
        )
        .unwrap();
        // class 0 row: (-1, 0), class 1 row: (1, 0)
        let w = ParamVector::from_values(&spec, vec![-1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(accuracy(&spec, &w, &data).unwrap(), 1.0);
    }

    #[test]
    fn huge_confident_error_is_clamped() {
        let spec = ModelSpec::softmax(1, 2);
        let data = ClientDataset::new(0, 1, vec![1.0], Targets::Classes { labels: vec![0], num_classes: 2 }).unwrap();
        let w = ParamVector::from_values(&spec, vec![-500.0, 0.0, 500.0, 0.0]).unwrap();
        let l = loss(&spec, &w, &data).unwrap();
        assert!((l + CE_EPSILON.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_shift_rejects_non_softmax() {
        let spec = ModelSpec::linear(2);
        assert!(ParamVector::zeros(&spec).shift_class_rows(&[0.0; 3]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::softmax(3, 1).validate().is_err());
        let mut s = ModelSpec::linear(3);
        s.num_classes = Some(2);
        assert!(s.validate().is_err());
        assert!(ModelSpec::linear(3).with_weight_bound(-1.0).validate().is_err());
        assert!(ModelSpec::mlp(4, vec![3, 2], 3).validate().is_ok());
        assert_eq!(ModelSpec::mlp(4, vec![3], 2).num_params(), 3 * 5 + 2 * 4);
    }
}
