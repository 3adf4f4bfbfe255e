//! Softmax hypotheses, predictors and empirical losses.

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};

/// Parameterization of a hypothesis `h: X -> simplex(Y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelKind {
    /// Featureless density model: `h = softmax(theta)`, `theta` of length `d`.
    CategoricalLogit,
    /// `h(x) = softmax(W x + b)`, stored per class as `[w_c.., b_c]`.
    LinearSoftmax { feature_dim: usize },
}

impl ModelKind {
    pub fn param_len(&self, num_classes: usize) -> usize {
        match *self {
            ModelKind::CategoricalLogit => num_classes,
            ModelKind::LinearSoftmax { feature_dim } => (feature_dim + 1) * num_classes,
        }
    }

    pub fn feature_dim(&self) -> Option<usize> {
        match *self {
            ModelKind::CategoricalLogit => None,
            ModelKind::LinearSoftmax { feature_dim } => Some(feature_dim),
        }
    }

    /// Kind that fits data with the given feature layout.
    pub fn for_features(feature_dim: Option<usize>) -> Self {
        match feature_dim {
            None => ModelKind::CategoricalLogit,
            Some(feature_dim) => ModelKind::LinearSoftmax { feature_dim },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    kind: ModelKind,
    num_classes: usize,
    params: Vec<f64>,
}

impl Model {
    /// The all-zero model; predicts the uniform distribution everywhere.
    pub fn zeros(kind: ModelKind, num_classes: usize) -> Self {
        Self {
            kind,
            num_classes,
            params: vec![0.0; kind.param_len(num_classes)],
        }
    }

    pub fn from_params(kind: ModelKind, num_classes: usize, params: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a model needs at least 2 classes"));
        }
        let expected = kind.param_len(num_classes);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(Self {
            kind,
            num_classes,
            params,
        })
    }

    /// Categorical model whose softmax equals `probs`. Zero entries get a
    /// floor logit so parameters stay finite.
    pub fn categorical_from_probs(probs: &[f64]) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || total <= 0.0 {
            return Err(Error::invalid("probabilities must be nonnegative with positive mass"));
        }
        let params = probs
            .iter()
            .map(|&p| if p > 0.0 { (p / total).ln() } else { LOGIT_FLOOR })
            .collect();
        Self::from_params(ModelKind::CategoricalLogit, probs.len(), params)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_params(self.kind, self.num_classes, params)
    }

    fn check_input(&self, x: Option<&[f64]>) -> Result<()> {
        match (self.kind, x) {
            (ModelKind::CategoricalLogit, None) => Ok(()),
            (ModelKind::CategoricalLogit, Some(_)) => Err(Error::invalid(
                "categorical model takes no features",
            )),
            (ModelKind::LinearSoftmax { .. }, None) => {
                Err(Error::invalid("linear-softmax model needs a feature vector"))
            }
            (ModelKind::LinearSoftmax { feature_dim }, Some(x)) if x.len() != feature_dim => {
                Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    got: x.len(),
                })
            }
            _ => Ok(()),
        }
    }

    /// Writes the logits for input `x` into `out` (length `num_classes`).
    pub fn logits_into(&self, x: Option<&[f64]>, out: &mut [f64]) -> Result<()> {
        self.check_input(x)?;
        self.logits_unchecked(x, out);
        Ok(())
    }

    pub(crate) fn logits_unchecked(&self, x: Option<&[f64]>, out: &mut [f64]) {
        match (self.kind, x) {
            (ModelKind::LinearSoftmax { feature_dim }, Some(x)) => {
                let stride = feature_dim + 1;
                for (c, o) in out.iter_mut().enumerate() {
                    let w = &self.params[c * stride..(c + 1) * stride];
                    *o = w[feature_dim] + w[..feature_dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            _ => out.copy_from_slice(&self.params),
        }
    }

    /// Adds `scale * dlogits/dparams^T g` into `grad`.
    pub(crate) fn accumulate_param_grad(&self, x: Option<&[f64]>, g: &[f64], scale: f64, grad: &mut [f64]) {
        match (self.kind, x) {
            (ModelKind::LinearSoftmax { feature_dim }, Some(x)) => {
                let stride = feature_dim + 1;
                for (c, &gc) in g.iter().enumerate() {
                    let row = &mut grad[c * stride..(c + 1) * stride];
                    let s = scale * gc;
                    for (r, xi) in row[..feature_dim].iter_mut().zip(x) {
                        *r += s * xi;
                    }
                    row[feature_dim] += s;
                }
            }
            _ => {
                for (r, gc) in grad.iter_mut().zip(g) {
                    *r += scale * gc;
                }
            }
        }
    }

    /// Predicted label distribution for `x`.
    pub fn predict(&self, x: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_classes];
        Predictor::predict_into(self, x, &mut out)?;
        Ok(out)
    }

    /// Errors unless the model can score every example of `ds`.
    pub fn check_dataset(&self, ds: &ClientDataset) -> Result<()> {
        if let Some(&bad) = ds.labels().iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside the model's {} classes",
                self.num_classes
            )));
        }
        match (self.kind.feature_dim(), ds.feature_dim()) {
            (None, None) => Ok(()),
            (Some(a), Some(b)) if a == b => Ok(()),
            (Some(a), Some(b)) => Err(Error::DimensionMismatch { expected: a, got: b }),
            (None, Some(_)) => Err(Error::invalid("categorical model given a dataset with features")),
            (Some(_), None) => Err(Error::invalid("linear-softmax model given a featureless dataset")),
        }
    }
}

/// Logit assigned to zero-probability classes when converting a
/// distribution to logits. `exp(-700)` is still a normal f64.
pub const LOGIT_FLOOR: f64 = -700.0;

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in v.iter_mut() {
        *e /= sum;
    }
}

pub(crate) fn log_softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
    for e in v.iter_mut() {
        *e -= lse;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &e) in v.iter().enumerate().skip(1) {
        if e > v[best] {
            best = i;
        }
    }
    best
}

/// Anything that maps an (optional) feature vector to a label distribution.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;

    /// Expected feature dimension; `None` for featureless predictors.
    fn feature_dim(&self) -> Option<usize>;

    fn predict_into(&self, x: Option<&[f64]>, out: &mut [f64]) -> Result<()>;

    /// Log-probabilities; overridden where a stabler form exists.
    fn log_predict_into(&self, x: Option<&[f64]>, out: &mut [f64]) -> Result<()> {
        self.predict_into(x, out)?;
        for e in out.iter_mut() {
            *e = e.ln();
        }
        Ok(())
    }
}

impl Predictor for Model {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn feature_dim(&self) -> Option<usize> {
        self.kind.feature_dim()
    }

    fn predict_into(&self, x: Option<&[f64]>, out: &mut [f64]) -> Result<()> {
        self.logits_into(x, out)?;
        softmax_in_place(out);
        Ok(())
    }

    fn log_predict_into(&self, x: Option<&[f64]>, out: &mut [f64]) -> Result<()> {
        self.logits_into(x, out)?;
        log_softmax_in_place(out);
        Ok(())
    }
}

/// The probability-space mixture `weight * local + (1 - weight) * global`.
#[derive(Debug, Clone, Copy)]
pub struct Interpolated<'a> {
    pub local: &'a Model,
    pub global: &'a Model,
    pub weight: f64,
}

impl<'a> Interpolated<'a> {
    pub fn new(local: &'a Model, global: &'a Model, weight: InterpolationWeight) -> Result<Self> {
        if local.num_classes() != global.num_classes() {
            return Err(Error::invalid(format!(
                "label spaces differ: {} vs {} classes",
                local.num_classes(),
                global.num_classes()
            )));
        }
        if local.kind().feature_dim() != global.kind().feature_dim() {
            return Err(Error::invalid("local and global models take different inputs"));
        }
        Ok(Self {
            local,
            global,
            weight: weight.value(),
        })
    }
}

impl Predictor for Interpolated<'_> {
    fn num_classes(&self) -> usize {
        self.global.num_classes()
    }

    fn feature_dim(&self) -> Option<usize> {
        self.global.kind().feature_dim()
    }

    fn predict_into(&self, x: Option<&[f64]>, out: &mut [f64]) -> Result<()> {
        let mut tmp = vec![0.0; out.len()];
        self.local.predict_into(x, &mut tmp)?;
        self.global.predict_into(x, out)?;
        let w = self.weight;
        for (o, l) in out.iter_mut().zip(&tmp) {
            *o = w * l + (1.0 - w) * *o;
        }
        Ok(())
    }

    fn log_predict_into(&self, x: Option<&[f64]>, out: &mut [f64]) -> Result<()> {
        let w = self.weight;
        if w == 1.0 {
            return self.local.log_predict_into(x, out);
        }
        if w == 0.0 {
            return self.global.log_predict_into(x, out);
        }
        let mut tmp = vec![0.0; out.len()];
        self.local.log_predict_into(x, &mut tmp)?;
        self.global.log_predict_into(x, out)?;
        let (lw, lg) = (w.ln(), (1.0 - w).ln());
        for (o, l) in out.iter_mut().zip(&tmp) {
            let a = lw + l;
            let b = lg + *o;
            let m = a.max(b);
            *o = m + ((a - m).exp() + (b - m).exp()).ln();
        }
        Ok(())
    }
}

/// A scalar in `[0, 1]` weighting local against global.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct InterpolationWeight(f64);

impl InterpolationWeight {
    pub const GLOBAL: Self = Self(0.0);
    pub const LOCAL: Self = Self(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("interpolation weight {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// Log-loss in nats.
    CrossEntropy,
    /// Argmax misprediction rate, ties toward the lowest class index.
    ZeroOne,
}

fn check_predictor_dataset<P: Predictor + ?Sized>(p: &P, ds: &ClientDataset) -> Result<()> {
    if let Some(&bad) = ds.labels().iter().find(|&&y| y >= p.num_classes()) {
        return Err(Error::invalid(format!("label {bad} outside {} classes", p.num_classes())));
    }
    if p.feature_dim() != ds.feature_dim() {
        return Err(Error::invalid(format!(
            "predictor expects features {:?}, dataset has {:?}",
            p.feature_dim(),
            ds.feature_dim()
        )));
    }
    Ok(())
}

/// Per-example losses summed, in dataset order.
fn loss_sum<P: Predictor + ?Sized>(p: &P, ds: &ClientDataset, loss: Loss) -> Result<f64> {
    check_predictor_dataset(p, ds)?;
    let d = p.num_classes();
    let mut buf = vec![0.0; d];
    if ds.feature_dim().is_none() {
        // one prediction serves every example
        let counts = ds.label_counts(d);
        return Ok(match loss {
            Loss::CrossEntropy => {
                p.log_predict_into(None, &mut buf)?;
                counts
                    .iter()
                    .zip(&buf)
                    .filter(|(&n, _)| n > 0)
                    .map(|(&n, lp)| -(n as f64) * lp)
                    .sum()
            }
            Loss::ZeroOne => {
                p.predict_into(None, &mut buf)?;
                let guess = argmax(&buf);
                (ds.count() - counts[guess]) as f64
            }
        });
    }
    let mut total = 0.0;
    for ex in ds.examples() {
        total += match loss {
            Loss::CrossEntropy => {
                p.log_predict_into(ex.x, &mut buf)?;
                -buf[ex.label]
            }
            Loss::ZeroOne => {
                p.predict_into(ex.x, &mut buf)?;
                if argmax(&buf) == ex.label {
                    0.0
                } else {
                    1.0
                }
            }
        };
    }
    Ok(total)
}

/// Mean per-example loss of `p` on `ds`.
pub fn empirical_loss<P: Predictor + ?Sized>(p: &P, ds: &ClientDataset, loss: Loss) -> Result<f64> {
    Ok(loss_sum(p, ds, loss)? / ds.count() as f64)
}

/// `weight * L_local + (1 - weight) * L_central` under cross-entropy.
pub fn mixture_loss(
    model: &Model,
    local: &ClientDataset,
    central: &ClientDataset,
    weight: InterpolationWeight,
) -> Result<f64> {
    let w = weight.value();
    let a = empirical_loss(model, local, Loss::CrossEntropy)?;
    let b = empirical_loss(model, central, Loss::CrossEntropy)?;
    Ok(w * a + (1.0 - w) * b)
}

/// Convex combination of two models' predicted distributions.
pub fn interpolate_predict(
    local: &Model,
    global: &Model,
    weight: InterpolationWeight,
    x: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mix = Interpolated::new(local, global, weight)?;
    let mut out = vec![0.0; mix.num_classes()];
    mix.predict_into(x, &mut out)?;
    Ok(out)
}
