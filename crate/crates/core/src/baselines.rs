//! Reference trainers: purely local models, federated averaging over the
//! sample-weighted pooled distribution, and agnostic (minimax over domain
//! mixtures) training.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, ClientId, Population};
use crate::error::{Error, Result};
use crate::model::{empirical_loss, Loss, Model};
use crate::optim::{sgd_on, SgdConfig};
use crate::par;
use crate::rng::{self, tag};

/// How the server weighs returned client models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    BySampleCount,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local: SgdConfig,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl FederatedConfig {
    pub fn validate(&self, population: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("need at least one round"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > population {
            return Err(Error::invalid(format!(
                "clients per round must be in 1..={population}, got {}",
                self.clients_per_round
            )));
        }
        self.local.validate()
    }
}

/// SGD on one client's data alone.
pub fn train_local(init: &Model, client: &ClientDataset, cfg: &SgdConfig) -> Result<Model> {
    sgd_on(init, client, cfg)
}

/// Seed of client `id`'s local run in `round` of a federated job.
pub fn client_seed(seed: u64, round: usize, id: ClientId) -> u64 {
    rng::derive(seed, &[tag::SGD, round as u64, id.0])
}

/// Sorted positions of `count` distinct clients sampled for `round`.
pub(crate) fn sample_clients(seed: u64, round: usize, population: usize, count: usize) -> Vec<usize> {
    if count >= population {
        return (0..population).collect();
    }
    let mut rng = rng::stream(seed, &[tag::CLIENT_SAMPLE, round as u64]);
    let mut picked = index::sample(&mut rng, population, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Weighted average of parameter vectors, summed in the given order.
pub(crate) fn average_params(models: &[Model], weights: &[f64]) -> Result<Model> {
    let mut acc = vec![0.0; models[0].params().len()];
    for (m, &w) in models.iter().zip(weights) {
        for (a, p) in acc.iter_mut().zip(m.params()) {
            *a += w * p;
        }
    }
    models[0].with_params(acc)
}

/// Local runs for the sampled clients, starting from `global`.
fn local_updates(global: &Model, pop: &Population, sampled: &[usize], cfg: &FederatedConfig, round: usize) -> Result<Vec<Model>> {
    par::map(sampled, |&k| {
        let client = &pop.clients()[k];
        let local = cfg.local.clone().with_seed(client_seed(cfg.seed, round, client.id()));
        train_local(global, client, &local)
    })
    .into_iter()
    .collect()
}

fn client_weight(pop: &Population, k: usize, aggregation: Aggregation) -> f64 {
    match aggregation {
        Aggregation::BySampleCount => pop.clients()[k].count() as f64,
        Aggregation::Uniform => 1.0,
    }
}

/// Federated averaging: each round samples clients, runs local SGD from the
/// current global model on each and averages the returned parameters.
pub fn train_fedavg(init: &Model, pop: &Population, cfg: &FederatedConfig) -> Result<Model> {
    cfg.validate(pop.len())?;
    for c in pop.clients() {
        init.check_dataset(c)?;
    }
    let mut global = init.clone();
    for round in 0..cfg.rounds {
        let sampled = sample_clients(cfg.seed, round, pop.len(), cfg.clients_per_round);
        let locals = local_updates(&global, pop, &sampled, cfg, round)?;
        let raw: Vec<f64> = sampled.iter().map(|&k| client_weight(pop, k, cfg.aggregation)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        global = average_params(&locals, &weights)?;
    }
    Ok(global)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgnosticConfig {
    pub federated: FederatedConfig,
    /// Step size of the projected ascent on the domain weights.
    pub domain_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgnosticOutcome {
    pub model: Model,
    /// Final mixture weights over domains.
    pub domain_weights: Vec<f64>,
    /// Per-domain pooled cross-entropy of the final model.
    pub domain_losses: Vec<f64>,
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Sample-weighted cross-entropy of `model` on each domain's pooled data.
pub fn domain_losses(model: &Model, pop: &Population, domain_of: &[usize], domains: usize) -> Result<Vec<f64>> {
    let per_client = par::map(pop.clients(), |c| empirical_loss(model, c, Loss::CrossEntropy))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![0.0; domains];
    let mut counts = vec![0usize; domains];
    for ((c, l), &d) in pop.clients().iter().zip(&per_client).zip(domain_of) {
        sums[d] += c.count() as f64 * l;
        counts[d] += c.count();
    }
    Ok(sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect())
}

/// Alternating minimax training against the worst mixture of domains.
///
/// `domain_of[k]` is the domain of the `k`-th client of `pop`. Each round
/// the sampled clients' local models are averaged with weight
/// `lambda_j * m_k / m_j(sampled)` for a client of domain `j`, then the
/// domain weights take a projected ascent step along the domain losses.
pub fn train_agnostic(init: &Model, pop: &Population, domain_of: &[usize], cfg: &AgnosticConfig) -> Result<AgnosticOutcome> {
    let fed = &cfg.federated;
    fed.validate(pop.len())?;
    if domain_of.len() != pop.len() {
        return Err(Error::DimensionMismatch {
            expected: pop.len(),
            got: domain_of.len(),
        });
    }
    if !(cfg.domain_lr >= 0.0) {
        return Err(Error::invalid("domain learning rate must be nonnegative"));
    }
    let domains = domain_of.iter().max().map_or(0, |&d| d + 1);
    let mut sizes = vec![0usize; domains];
    for &d in domain_of {
        sizes[d] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::invalid(format!("domain {empty} has no clients")));
    }
    for c in pop.clients() {
        init.check_dataset(c)?;
    }

    let mut lambda = vec![1.0 / domains as f64; domains];
    let mut global = init.clone();
    for round in 0..fed.rounds {
        let sampled = sample_clients(fed.seed, round, pop.len(), fed.clients_per_round);
        let locals = local_updates(&global, pop, &sampled, fed, round)?;
        let mut domain_mass = vec![0.0; domains];
        for &k in &sampled {
            domain_mass[domain_of[k]] += client_weight(pop, k, fed.aggregation);
        }
        let present: f64 = (0..domains).filter(|&j| domain_mass[j] > 0.0).map(|j| lambda[j]).sum();
        let weights: Vec<f64> = if present > 0.0 {
            sampled
                .iter()
                .map(|&k| {
                    let j = domain_of[k];
                    lambda[j] * (client_weight(pop, k, fed.aggregation) / domain_mass[j]) / present
                })
                .collect()
        } else {
            // every sampled domain has zero weight: fall back to plain averaging
            let total: f64 = sampled.iter().map(|&k| client_weight(pop, k, fed.aggregation)).sum();
            sampled.iter().map(|&k| client_weight(pop, k, fed.aggregation) / total).collect()
        };
        global = average_params(&locals, &weights)?;
        if domains > 1 {
            let losses = domain_losses(&global, pop, domain_of, domains)?;
            let stepped: Vec<f64> = lambda.iter().zip(&losses).map(|(l, g)| l + cfg.domain_lr * g).collect();
            lambda = project_to_simplex(&stepped);
        }
    }
    let losses = domain_losses(&global, pop, domain_of, domains)?;
    Ok(AgnosticOutcome {
        model: global,
        domain_weights: lambda,
        domain_losses: losses,
    })
}
