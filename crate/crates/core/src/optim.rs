//! Stochastic gradient descent for softmax models and the step-size and
//! sample-size constants of the data-interpolation convergence guarantee.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Example};
use crate::error::{Error, Result};
use crate::model::{softmax_in_place, Model, Predictor};
use crate::rng::{self, Rng};

/// How long an SGD run lasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Budget {
    Steps(usize),
    /// Passes over the source, `ceil(len / batch_size)` steps each.
    Epochs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant,
    /// `eta_t = eta * offset / (offset + t)`.
    Inverse { offset: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub step_size: f64,
    pub budget: Budget,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the `l2 / 2 * |theta|^2` penalty.
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "constant_schedule")]
    pub schedule: StepSchedule,
}

fn constant_schedule() -> StepSchedule {
    StepSchedule::Constant
}

impl SgdConfig {
    pub fn new(step_size: f64, budget: Budget) -> Self {
        Self {
            step_size,
            budget,
            batch_size: 1,
            seed: 0,
            l2: 0.0,
            schedule: StepSchedule::Constant,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    pub fn with_schedule(mut self, schedule: StepSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("step size must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::invalid("l2 weight must be nonnegative"));
        }
        if let StepSchedule::Inverse { offset } = self.schedule {
            if !(offset > 0.0) {
                return Err(Error::invalid("inverse schedule offset must be positive"));
            }
        }
        Ok(())
    }

    /// Number of updates over a source of `len` examples.
    pub fn steps_for(&self, len: usize) -> usize {
        match self.budget {
            Budget::Steps(n) => n,
            Budget::Epochs(e) => e * len.div_ceil(self.batch_size.min(len.max(1))),
        }
    }

    fn rate(&self, t: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.step_size,
            StepSchedule::Inverse { offset } => self.step_size * offset / (offset + t as f64),
        }
    }
}

/// Source of training examples for SGD.
pub trait SampleSource<'a> {
    fn len(&self) -> usize;

    fn draw(&mut self, rng: &mut Rng) -> Example<'a>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cycles through reshuffled passes of a concatenation of datasets
/// (sampling without replacement within a pass).
pub struct EpochSampler<'a> {
    parts: Vec<&'a ClientDataset>,
    order: Vec<(u32, u32)>,
    pos: usize,
}

impl<'a> EpochSampler<'a> {
    pub fn new(parts: Vec<&'a ClientDataset>) -> Self {
        let order = parts
            .iter()
            .enumerate()
            .flat_map(|(p, ds)| (0..ds.count() as u32).map(move |i| (p as u32, i)))
            .collect::<Vec<_>>();
        let pos = order.len();
        Self { parts, order, pos }
    }
}

impl<'a> SampleSource<'a> for EpochSampler<'a> {
    fn len(&self) -> usize {
        self.order.len()
    }

    fn draw(&mut self, rng: &mut Rng) -> Example<'a> {
        if self.pos == self.order.len() {
            // Fisher-Yates
            for i in (1..self.order.len()).rev() {
                let j = rng.random_range(0..=i);
                self.order.swap(i, j);
            }
            self.pos = 0;
        }
        let (p, i) = self.order[self.pos];
        self.pos += 1;
        self.parts[p as usize].example(i as usize)
    }
}

/// Uniform draws with replacement from a concatenation of datasets.
#[derive(Clone)]
pub struct UniformSampler<'a> {
    parts: Vec<&'a ClientDataset>,
    ends: Vec<usize>,
}

impl<'a> UniformSampler<'a> {
    pub fn new(parts: Vec<&'a ClientDataset>) -> Self {
        let ends = parts
            .iter()
            .scan(0usize, |acc, ds| {
                *acc += ds.count();
                Some(*acc)
            })
            .collect();
        Self { parts, ends }
    }

    /// Example at position `idx` of the concatenation.
    pub fn get(&self, idx: usize) -> Example<'a> {
        let p = self.ends.partition_point(|&e| e <= idx);
        let start = if p == 0 { 0 } else { self.ends[p - 1] };
        self.parts[p].example(idx - start)
    }
}

impl<'a> SampleSource<'a> for UniformSampler<'a> {
    fn len(&self) -> usize {
        self.ends.last().copied().unwrap_or(0)
    }

    fn draw(&mut self, rng: &mut Rng) -> Example<'a> {
        let idx = rng.random_range(0..self.len());
        self.get(idx)
    }
}

/// Per draw, picks the local source with probability `weight` and the
/// central one otherwise, then a uniform example from the chosen source.
/// Source choices come from their own stream, so with `weight = 0` the
/// example sequence equals plain uniform sampling of the central source.
pub struct MixtureSampler<'a> {
    local: UniformSampler<'a>,
    central: UniformSampler<'a>,
    weight: f64,
    choice: Rng,
    local_draws: usize,
    central_draws: usize,
}

impl<'a> MixtureSampler<'a> {
    pub fn new(local: &'a ClientDataset, central: &'a ClientDataset, weight: f64, seed: u64) -> Self {
        Self {
            local: UniformSampler::new(vec![local]),
            central: UniformSampler::new(vec![central]),
            weight,
            choice: rng::stream(seed, &[rng::tag::SOURCE_CHOICE]),
            local_draws: 0,
            central_draws: 0,
        }
    }

    pub fn local_draws(&self) -> usize {
        self.local_draws
    }

    pub fn central_draws(&self) -> usize {
        self.central_draws
    }
}

impl<'a> SampleSource<'a> for MixtureSampler<'a> {
    fn len(&self) -> usize {
        self.local.len() + self.central.len()
    }

    fn draw(&mut self, rng: &mut Rng) -> Example<'a> {
        let u: f64 = self.choice.random();
        if u < self.weight {
            self.local_draws += 1;
            self.local.draw(rng)
        } else {
            self.central_draws += 1;
            self.central.draw(rng)
        }
    }
}

/// Adds the gradient of `scale * cross_entropy(model(x), y)` into `grad`.
pub(crate) fn accumulate_ce_grad(model: &Model, ex: &Example<'_>, scale: f64, probs: &mut [f64], grad: &mut [f64]) {
    model.logits_unchecked(ex.x, probs);
    softmax_in_place(probs);
    probs[ex.label] -= 1.0;
    model.accumulate_param_grad(ex.x, probs, scale, grad);
}

pub(crate) fn check_examples(model: &Model, batch: &[Example<'_>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for ex in batch {
        if ex.label >= model.num_classes() {
            return Err(Error::invalid(format!("label {} outside model classes", ex.label)));
        }
        match (model.kind().feature_dim(), ex.x) {
            (None, None) => {}
            (Some(d), Some(x)) if x.len() == d => {}
            (Some(d), Some(x)) => return Err(Error::DimensionMismatch { expected: d, got: x.len() }),
            _ => return Err(Error::invalid("example does not match the model's input layout")),
        }
    }
    Ok(())
}

/// Gradient of the mean cross-entropy over `batch` with respect to the
/// model parameters.
pub fn gradient(model: &Model, batch: &[Example<'_>]) -> Result<Vec<f64>> {
    check_examples(model, batch)?;
    let mut grad = vec![0.0; model.params().len()];
    let mut probs = vec![0.0; model.num_classes()];
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        accumulate_ce_grad(model, ex, scale, &mut probs, &mut grad);
    }
    Ok(grad)
}

/// Full-batch gradient of `L_ds(model) + l2 / 2 * |theta|^2`.
pub fn dataset_gradient(model: &Model, ds: &ClientDataset, l2: f64) -> Result<Vec<f64>> {
    model.check_dataset(ds)?;
    let mut grad = if ds.feature_dim().is_none() {
        // softmax(theta) - empirical frequencies
        let mut p = model.params().to_vec();
        softmax_in_place(&mut p);
        let m = ds.count() as f64;
        for (g, n) in p.iter_mut().zip(ds.label_counts(model.num_classes())) {
            *g -= n as f64 / m;
        }
        p
    } else {
        let batch: Vec<_> = ds.examples().collect();
        gradient(model, &batch)?
    };
    if l2 > 0.0 {
        for (g, t) in grad.iter_mut().zip(model.params()) {
            *g += l2 * t;
        }
    }
    Ok(grad)
}

/// `L_ds(model) + l2 / 2 * |theta|^2` under cross-entropy.
pub fn regularized_loss(model: &Model, ds: &ClientDataset, l2: f64) -> Result<f64> {
    let ce = crate::model::empirical_loss(model, ds, crate::model::Loss::CrossEntropy)?;
    Ok(ce + 0.5 * l2 * model.params().iter().map(|t| t * t).sum::<f64>())
}

fn batch_ce(model: &Model, batch: &[Example<'_>]) -> f64 {
    let mut buf = vec![0.0; model.num_classes()];
    batch
        .iter()
        .map(|ex| {
            model.log_predict_into(ex.x, &mut buf).expect("checked batch");
            -buf[ex.label]
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Largest coordinate gap between [`gradient`] and a central finite
/// difference with perturbation `eps`.
pub fn finite_diff_check(model: &Model, batch: &[Example<'_>], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("perturbation {eps} outside (0, 1e-3]")));
    }
    let analytic = gradient(model, batch)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (j, a) in analytic.iter().enumerate() {
        let orig = probe.params()[j];
        probe.params_mut()[j] = orig + eps;
        let up = batch_ce(&probe, batch);
        probe.params_mut()[j] = orig - eps;
        let down = batch_ce(&probe, batch);
        probe.params_mut()[j] = orig;
        worst = worst.max((a - (up - down) / (2.0 * eps)).abs());
    }
    Ok(worst)
}

/// SGD driver shared by every objective: draws batches from `source`,
/// asks `grad_fn` for the batch gradient and steps against it.
pub(crate) fn sgd_with<'a, S, F>(init: &Model, source: &mut S, cfg: &SgdConfig, mut grad_fn: F) -> Result<Model>
where
    S: SampleSource<'a>,
    F: FnMut(&Model, &[Example<'a>], &mut [f64]),
{
    cfg.validate()?;
    let steps = cfg.steps_for(source.len());
    if steps == 0 || cfg.step_size == 0.0 {
        return Ok(init.clone());
    }
    if source.is_empty() {
        return Err(Error::invalid("SGD source has no examples"));
    }
    let mut rng = rng::stream(cfg.seed, &[rng::tag::SGD]);
    let batch_size = cfg.batch_size.min(source.len());
    let mut model = init.clone();
    let mut batch = Vec::with_capacity(batch_size);
    let mut grad = vec![0.0; model.params().len()];
    for t in 0..steps {
        batch.clear();
        for _ in 0..batch_size {
            batch.push(source.draw(&mut rng));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        grad_fn(&model, &batch, &mut grad);
        let eta = cfg.rate(t);
        let l2 = cfg.l2;
        for (theta, g) in model.params_mut().iter_mut().zip(&grad) {
            *theta -= eta * (g + l2 * *theta);
        }
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("SGD diverged to non-finite parameters"));
    }
    Ok(model)
}

/// Plain SGD on mean cross-entropy (plus the configured L2 penalty).
pub fn sgd<'a, S: SampleSource<'a>>(init: &Model, source: &mut S, cfg: &SgdConfig) -> Result<Model> {
    let mut probs = vec![0.0; init.num_classes()];
    sgd_with(init, source, cfg, |model, batch, grad| {
        let scale = 1.0 / batch.len() as f64;
        for ex in batch {
            accumulate_ce_grad(model, ex, scale, &mut probs, grad);
        }
    })
}

/// SGD over one client's data with epoch shuffling.
pub fn sgd_on(init: &Model, data: &ClientDataset, cfg: &SgdConfig) -> Result<Model> {
    init.check_dataset(data)?;
    sgd(init, &mut EpochSampler::new(vec![data]), cfg)
}

/// Strong-convexity modulus `mu`, gradient bound `G` and hypothesis-set
/// diameter `R`. `G` is used as a bound on per-example gradient norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityConstants {
    pub mu: f64,
    pub g: f64,
    pub r: f64,
}

impl ConvexityConstants {
    pub fn new(mu: f64, g: f64, r: f64) -> Result<Self> {
        if !(mu > 0.0 && g > 0.0 && r >= 0.0) || !(mu.is_finite() && g.is_finite() && r.is_finite()) {
            return Err(Error::invalid("need mu > 0, G > 0, R >= 0"));
        }
        Ok(Self { mu, g, r })
    }

    /// Constants for categorical cross-entropy with penalty `mu / 2 * |theta|^2`.
    ///
    /// Any mixture objective is at most `ln d` at `theta = 0`, so its
    /// minimizer lies in the ball of radius `sqrt(2 ln d / mu)`; on that
    /// ball a per-example gradient `softmax - e_y + mu * theta` has norm at
    /// most `sqrt(2) + mu * radius`.
    pub fn regularized_categorical(num_classes: usize, mu: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        let radius = (2.0 * (num_classes as f64).ln() / mu).sqrt();
        Self::new(mu, 2f64.sqrt() + mu * radius, 2.0 * radius)
    }
}

/// Smallest subsample multiplier `r = G^2 (4G/mu + 2R)^2` for which the
/// data-interpolation SGD reaches its target accuracy for every weight.
pub fn dapper_r_threshold(c: &ConvexityConstants) -> f64 {
    let inner = 4.0 * c.g / c.mu + 2.0 * c.r;
    c.g * c.g * inner * inner
}

/// Step size `1/(G sqrt(r m_k)) * min(2 G w / (mu (1 - w)), R)` for local
/// weight `w`. At `w = 1` the first arm is infinite and `R` is used.
pub fn dapper_lr(c: &ConvexityConstants, weight: f64, r: f64, m_k: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::invalid(format!("weight {weight} outside [0, 1]")));
    }
    if !(r >= 1.0) || m_k == 0 {
        return Err(Error::invalid("need r >= 1 and m_k >= 1"));
    }
    let scale = 1.0 / (c.g * (r * m_k as f64).sqrt());
    let arm = if weight >= 1.0 {
        c.r
    } else {
        (2.0 * c.g * weight / (c.mu * (1.0 - weight))).min(c.r)
    };
    Ok(scale * arm)
}

/// Target accuracy `sqrt(w^2 / m_k + (1 - w)^2 / m_c)`.
pub fn epsilon_lambda(weight: f64, m_k: usize, m_c: usize) -> Result<f64> {
    if m_k == 0 || m_c == 0 {
        return Err(Error::invalid("sample counts must be positive"));
    }
    Ok((weight * weight / m_k as f64 + (1.0 - weight).powi(2) / m_c as f64).sqrt())
}
