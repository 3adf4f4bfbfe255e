//! Discrepancy and skewness estimators, generalization-bound calculators
//! and per-client evaluation.
//!
//! Bound calculators return formal plug-in values: hidden constants are
//! set to 1 and logarithms are natural.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, ClientId, Population};
use crate::error::{Error, Result};
use crate::hypcluster::{best_cluster, ClusterState};
use crate::model::{empirical_loss, Loss, Model, ModelKind, Predictor};
use crate::modelinterp::PersonalizationMap;
use crate::optim::dataset_gradient;
use crate::par;
use crate::rng::{self, tag};

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("confidence {delta} outside (0, 1)")));
    }
    Ok(())
}

fn check_count(name: &str, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid(format!("{name} must be at least 1")));
    }
    Ok(n as f64)
}

fn check_dim(d: f64) -> Result<()> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::invalid("pseudo-dimension must be positive"));
    }
    Ok(())
}

/// `sqrt(d + ln(1/delta)) / sqrt(m_1)`: one client learning alone.
pub fn bound_local(d: f64, m1: usize, delta: f64) -> Result<f64> {
    check_dim(d)?;
    check_delta(delta)?;
    let m1 = check_count("m_1", m1)?;
    Ok((d + (1.0 / delta).ln()).sqrt() / m1.sqrt())
}

/// `sqrt(d + ln(1/delta)) / sqrt(m) + disc`: one model for all clients.
pub fn bound_global(d: f64, m: usize, delta: f64, disc: f64) -> Result<f64> {
    if !(disc >= 0.0) {
        return Err(Error::invalid("discrepancy must be nonnegative"));
    }
    Ok(bound_local(d, m, delta)? + disc)
}

/// `sqrt(4 p ln(2q/delta) / m) + sqrt(d q / m * ln(e m / d))`.
pub fn bound_cluster(p: usize, q: usize, m: usize, d: f64, delta: f64) -> Result<f64> {
    check_dim(d)?;
    check_delta(delta)?;
    let p = check_count("p", p)?;
    let q = check_count("q", q)?;
    let m = check_count("m", m)?;
    let first = (4.0 * p * (2.0 * q / delta).ln() / m).sqrt();
    let second = (d * q / m * (std::f64::consts::E * m / d).ln()).max(0.0).sqrt();
    Ok(first + second)
}

/// `sqrt(lambda^2 / m_k + (1 - lambda)^2 / m_c) * sqrt(d ln(1/delta))`.
pub fn bound_interp(lambda: f64, m_k: usize, m_c: usize, d: f64, delta: f64) -> Result<f64> {
    check_dim(d)?;
    check_delta(delta)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("weight {lambda} outside [0, 1]")));
    }
    let m_k = check_count("m_k", m_k)?;
    let m_c = check_count("m_C", m_c)?;
    Ok((lambda * lambda / m_k + (1.0 - lambda).powi(2) / m_c).sqrt() * (d * (1.0 / delta).ln()).sqrt())
}

/// Model-interpolation rate
/// `2L (sqrt(d_c/m ln(e m/d_c)) + sqrt(d_l p/m ln(e m/d_l))) + 2 sqrt(ln(1/delta)/m)`.
pub fn bound_model_interp(d_c: f64, d_l: f64, p: usize, m: usize, delta: f64, lipschitz: f64) -> Result<f64> {
    check_dim(d_c)?;
    check_dim(d_l)?;
    check_delta(delta)?;
    let p = check_count("p", p)?;
    let m = check_count("m", m)?;
    let e = std::f64::consts::E;
    let term = |x: f64| x.max(0.0).sqrt();
    Ok(2.0 * lipschitz * (term(d_c / m * (e * m / d_c).ln()) + term(d_l * p / m * (e * m / d_l).ln())) + 2.0 * ((1.0 / delta).ln() / m).sqrt())
}

/// `sqrt(s) * sqrt(d + ln(|domains| / delta)) / sqrt(m) + eps + disc` for a
/// minimax model over a finite set of mixtures with skewness `s`.
pub fn bound_agnostic(skew: f64, d: f64, domains: usize, m: usize, delta: f64, eps: f64, disc: f64) -> Result<f64> {
    check_dim(d)?;
    check_delta(delta)?;
    let n = check_count("domain count", domains)?;
    let m = check_count("m", m)?;
    if !(skew >= 1.0 - 1e-12) {
        return Err(Error::invalid("skewness is at least 1"));
    }
    Ok(skew.sqrt() * (d + (n / delta).ln()).sqrt() / m.sqrt() + eps + disc)
}

/// `sum_k lambda_k^2 / f_k` for sample fractions `f_k`.
pub fn skewness(lambda: &[f64], fractions: &[f64]) -> Result<f64> {
    if lambda.len() != fractions.len() || lambda.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: fractions.len(),
            got: lambda.len(),
        });
    }
    for (name, v) in [("weights", lambda), ("fractions", fractions)] {
        if v.iter().any(|x| !(*x >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("{name} are not a probability vector")));
        }
    }
    if fractions.contains(&0.0) {
        return Err(Error::invalid("sample fractions must be positive"));
    }
    Ok(lambda.iter().zip(fractions).map(|(l, f)| l * l / f).sum())
}

/// Every calculator input in one place, as supplied on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub d: f64,
    pub m: usize,
    pub m_k: usize,
    pub m_c: usize,
    pub p: usize,
    pub q: usize,
    pub delta: f64,
    #[serde(default)]
    pub disc: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
}

impl BoundInputs {
    /// Named plug-in values of every calculator the inputs support.
    pub fn evaluate(&self) -> Result<Vec<(String, f64)>> {
        let mut out = vec![
            ("local".to_string(), bound_local(self.d, self.m_k, self.delta)?),
            ("global".to_string(), bound_global(self.d, self.m, self.delta, self.disc.unwrap_or(0.0))?),
            ("cluster".to_string(), bound_cluster(self.p, self.q, self.m, self.d, self.delta)?),
            ("model_interp".to_string(), bound_model_interp(self.d, self.d, self.p, self.m, self.delta, 1.0)?),
        ];
        let lambdas: Vec<f64> = match self.lambda {
            Some(l) => vec![l],
            None => (0..=10).map(|i| i as f64 / 10.0).collect(),
        };
        for l in lambdas {
            out.push((format!("interp[lambda={l}]"), bound_interp(l, self.m_k, self.m_c, self.d, self.delta)?));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyBudget {
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    /// Radius of the parameter ball searched.
    pub radius: f64,
    pub seed: u64,
}

impl Default for DiscrepancyBudget {
    fn default() -> Self {
        Self {
            restarts: 8,
            steps: 200,
            step_size: 0.5,
            radius: 5.0,
            seed: 0,
        }
    }
}

fn project_ball(v: &mut [f64], radius: f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > radius {
        v.iter_mut().for_each(|x| *x *= radius / n);
    }
}

fn loss_gap(m: &Model, a: &ClientDataset, b: &ClientDataset) -> Result<f64> {
    Ok(empirical_loss(m, a, Loss::CrossEntropy)? - empirical_loss(m, b, Loss::CrossEntropy)?)
}

/// Lower estimate of `max_h |L_a(h) - L_b(h)|` under cross-entropy over
/// the ball of the given radius: projected gradient ascent on both signs
/// of the gap from several starts (start 0 is the origin), keeping the
/// best iterate. Restart seeds do not depend on the restart count, so a
/// larger budget never lowers the estimate.
pub fn discrepancy(a: &ClientDataset, b: &ClientDataset, kind: ModelKind, num_classes: usize, budget: &DiscrepancyBudget) -> Result<f64> {
    if budget.restarts == 0 {
        return Err(Error::invalid("need at least one restart"));
    }
    if !(budget.radius >= 0.0 && budget.step_size >= 0.0) {
        return Err(Error::invalid("radius and step size must be nonnegative"));
    }
    let template = Model::zeros(kind, num_classes);
    template.check_dataset(a)?;
    template.check_dataset(b)?;
    let n = template.params().len();
    let runs = par::map_range(budget.restarts, |r| -> Result<f64> {
        let mut start = vec![0.0; n];
        if r > 0 {
            let mut rng = rng::stream(budget.seed, &[tag::DISCREPANCY, r as u64]);
            start.iter_mut().for_each(|x| *x = rng.sample::<f64, _>(StandardNormal));
            let norm = start.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let scale = budget.radius * rng.random::<f64>().powf(1.0 / n as f64) / norm;
            start.iter_mut().for_each(|x| *x *= scale);
        }
        let mut best = 0.0f64;
        for sign in [1.0, -1.0] {
            let mut model = template.with_params(start.clone())?;
            for step in 0..=budget.steps {
                best = best.max(loss_gap(&model, a, b)?.abs());
                if step == budget.steps {
                    break;
                }
                let ga = dataset_gradient(&model, a, 0.0)?;
                let gb = dataset_gradient(&model, b, 0.0)?;
                let mut next: Vec<f64> = model
                    .params()
                    .iter()
                    .zip(ga.iter().zip(&gb))
                    .map(|(t, (x, y))| t + budget.step_size * (sign * (x - y)))
                    .collect();
                project_ball(&mut next, budget.radius);
                model = model.with_params(next)?;
            }
        }
        Ok(best)
    });
    runs.into_iter().try_fold(0.0f64, |acc, r| Ok(acc.max(r?)))
}

/// Exact `max_h |L_a(h) - L_b(h)|` over an explicit hypothesis list.
pub fn discrepancy_finite<P: Predictor>(a: &ClientDataset, b: &ClientDataset, hypotheses: &[P], loss: Loss) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::invalid("empty hypothesis list"));
    }
    let mut best = 0.0f64;
    for h in hypotheses {
        best = best.max((empirical_loss(h, a, loss)? - empirical_loss(h, b, loss)?).abs());
    }
    Ok(best)
}

/// What a trained personalization strategy serves each client.
#[derive(Debug, Clone, Copy)]
pub enum Personalization<'a> {
    Global(&'a Model),
    Clustered(&'a ClusterState),
    Interpolated(&'a PersonalizationMap),
    PerClient(&'a BTreeMap<ClientId, Model>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub id: ClientId,
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: BTreeMap<String, String>,
    pub clients: Vec<ClientMetrics>,
    pub uniform_loss: f64,
    pub uniform_accuracy: f64,
    pub weighted_loss: f64,
    pub weighted_accuracy: f64,
}

impl EvalReport {
    /// Report whose means are computed from `clients`.
    pub fn from_clients(clients: Vec<ClientMetrics>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("no clients to report"));
        }
        let n = clients.len() as f64;
        let total: f64 = clients.iter().map(|c| c.count as f64).sum();
        let uniform = |f: fn(&ClientMetrics) -> f64| clients.iter().map(f).sum::<f64>() / n;
        let weighted = |f: fn(&ClientMetrics) -> f64| clients.iter().map(|c| c.count as f64 * f(c)).sum::<f64>() / total;
        Ok(Self {
            uniform_loss: uniform(|c| c.loss),
            uniform_accuracy: uniform(|c| c.accuracy),
            weighted_loss: weighted(|c| c.loss),
            weighted_accuracy: weighted(|c| c.accuracy),
            clients,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }
}

fn metrics<P: Predictor + ?Sized>(p: &P, ds: &ClientDataset) -> Result<ClientMetrics> {
    Ok(ClientMetrics {
        id: ds.id(),
        count: ds.count(),
        loss: empirical_loss(p, ds, Loss::CrossEntropy)?,
        accuracy: 1.0 - empirical_loss(p, ds, Loss::ZeroOne)?,
    })
}

/// Per-client cross-entropy and accuracy on `test`. A clustered client
/// absent from the assignment is assigned by its data in `assign_data`
/// when present there, otherwise by its test data.
pub fn evaluate(pers: Personalization<'_>, test: &Population, assign_data: Option<&Population>) -> Result<EvalReport> {
    let clients = par::map(test.clients(), |c| match pers {
        Personalization::Global(m) => metrics(m, c),
        Personalization::Clustered(state) => {
            let i = match state.assignment.get(&c.id()) {
                Some(&i) => i,
                None => {
                    let basis = assign_data.and_then(|p| p.client(c.id())).unwrap_or(c);
                    best_cluster(&state.models, basis)?.0
                }
            };
            metrics(&state.models[i], c)
        }
        Personalization::Interpolated(pmap) => metrics(&pmap.predictor(c.id())?, c),
        Personalization::PerClient(map) => {
            let m = map
                .get(&c.id())
                .ok_or_else(|| Error::invalid(format!("client {} has no model", c.id())))?;
            metrics(m, c)
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    EvalReport::from_clients(clients)
}
