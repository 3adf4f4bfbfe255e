//! Hypothesis-based clustering: `q` models, each client served by the one
//! with the lowest loss on its data.
//!
//! The objective of a set of models is `sum_k w_k min_i L_k(h_i)` with
//! `w_k` the population weights. [`train_hypcluster`] runs the stochastic
//! federated EM, [`full_batch_em`] the exact alternating minimization and
//! [`brute_force_cluster`] enumerates every assignment of a small
//! featureless population.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::baselines::sample_clients;
use crate::data::{ClientDataset, ClientId, Population};
use crate::error::{Error, Result};
use crate::model::{empirical_loss, Loss, Model, ModelKind};
use crate::optim::{dataset_gradient, regularized_loss, sgd, EpochSampler, SgdConfig};
use crate::par;
use crate::rng::{self, tag};

/// Cluster models and the cluster of every client seen in training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub models: Vec<Model>,
    pub assignment: BTreeMap<ClientId, usize>,
}

impl ClusterState {
    pub fn num_clusters(&self) -> usize {
        self.models.len()
    }

    /// Model for `client`: its recorded cluster, or the lowest-loss model
    /// on its own data when it was not seen in training.
    pub fn model_for(&self, client: &ClientDataset) -> Result<&Model> {
        let i = match self.assignment.get(&client.id()) {
            Some(&i) => i,
            None => best_cluster(&self.models, client)?.0,
        };
        Ok(&self.models[i])
    }
}

/// Lowest-loss model on `client` (ties to the lowest index) and its loss.
pub fn best_cluster(models: &[Model], client: &ClientDataset) -> Result<(usize, f64)> {
    let mut best = (0, f64::INFINITY);
    for (i, m) in models.iter().enumerate() {
        let l = empirical_loss(m, client, Loss::CrossEntropy)?;
        if l < best.1 {
            best = (i, l);
        }
    }
    if !best.1.is_finite() && models.is_empty() {
        return Err(Error::invalid("no cluster models"));
    }
    Ok(best)
}

/// Cluster index of every client, computed in parallel.
pub fn assign_clusters(models: &[Model], clients: &[ClientDataset]) -> Result<Vec<usize>> {
    if models.is_empty() {
        return Err(Error::invalid("no cluster models"));
    }
    par::map(clients, |c| best_cluster(models, c).map(|b| b.0)).into_iter().collect()
}

pub fn hypcluster_objective(models: &[Model], pop: &Population) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::invalid("no cluster models"));
    }
    let losses = par::map(pop.clients(), |c| best_cluster(models, c).map(|b| b.1))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().zip(pop.weights()).map(|(l, w)| w * l).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypClusterConfig {
    pub clusters: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    /// Per-cluster training inside a round; its seed is ignored.
    pub local: SgdConfig,
    pub restarts: usize,
    /// Clients whose pooled data warm-start each cluster model.
    pub init_clients: usize,
    pub seed: u64,
}

impl HypClusterConfig {
    pub fn validate(&self, population: usize) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::invalid("need at least one cluster"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("need at least one restart"));
        }
        if self.init_clients == 0 {
            return Err(Error::invalid("need at least one warm-start client per cluster"));
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

fn train_on(init: &Model, parts: Vec<&ClientDataset>, cfg: &SgdConfig, seed: u64) -> Result<Model> {
    let cfg = cfg.clone().with_seed(seed);
    sgd(init, &mut EpochSampler::new(parts), &cfg)
}

/// One stochastic EM round: assign the sampled clients, then train every
/// non-empty cluster on its members' pooled data. Empty clusters keep
/// their model.
pub fn hypcluster_round(models: &[Model], pop: &Population, cfg: &HypClusterConfig, round: usize, seed: u64) -> Result<Vec<Model>> {
    let sampled = sample_clients(seed, round, pop.len(), cfg.clients_per_round);
    let chosen: Vec<ClientDataset> = sampled.iter().map(|&k| pop.clients()[k].clone()).collect();
    let assignment = assign_clusters(models, &chosen)?;
    par::map_range(models.len(), |i| {
        let members: Vec<&ClientDataset> = chosen.iter().zip(&assignment).filter(|(_, &a)| a == i).map(|(c, _)| c).collect();
        if members.is_empty() {
            return Ok(models[i].clone());
        }
        let s = rng::derive(seed, &[tag::CLUSTER_ROUND, round as u64, i as u64]);
        train_on(&models[i], members, &cfg.local, s)
    })
    .into_iter()
    .collect()
}

/// Warm start: each cluster model is trained from `template` on the pooled
/// data of `init_clients` distinct sampled clients (reused only when the
/// population is too small to give every cluster its own).
fn initial_models(template: &Model, pop: &Population, cfg: &HypClusterConfig, seed: u64) -> Result<Vec<Model>> {
    let need = cfg.clusters * cfg.init_clients;
    let mut rng = rng::stream(seed, &[tag::CLUSTER_INIT]);
    let picks: Vec<usize> = if need <= pop.len() {
        index::sample(&mut rng, pop.len(), need).into_vec()
    } else {
        let perm = index::sample(&mut rng, pop.len(), pop.len()).into_vec();
        (0..need).map(|j| perm[j % pop.len()]).collect()
    };
    par::map_range(cfg.clusters, |i| {
        let parts = picks[i * cfg.init_clients..(i + 1) * cfg.init_clients].iter().map(|&k| &pop.clients()[k]).collect();
        train_on(template, parts, &cfg.local, rng::derive(seed, &[tag::INIT, i as u64]))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypClusterOutcome {
    pub state: ClusterState,
    pub objective: f64,
    /// Final objective of every restart, in restart order.
    pub restart_objectives: Vec<f64>,
}

fn full_assignment(models: Vec<Model>, pop: &Population) -> Result<ClusterState> {
    let a = assign_clusters(&models, pop.clients())?;
    Ok(ClusterState {
        assignment: pop.clients().iter().map(ClientDataset::id).zip(a).collect(),
        models,
    })
}

/// Stochastic federated EM with random restarts; keeps the restart with
/// the lowest objective (ties to the earliest) and assigns every client.
pub fn train_hypcluster(template: &Model, pop: &Population, cfg: &HypClusterConfig) -> Result<HypClusterOutcome> {
    cfg.validate(pop.len())?;
    for c in pop.clients() {
        template.check_dataset(c)?;
    }
    let runs = par::map_range(cfg.restarts, |r| -> Result<(Vec<Model>, f64)> {
        let seed = rng::derive(cfg.seed, &[tag::RESTART, r as u64]);
        let mut models = initial_models(template, pop, cfg, seed)?;
        for round in 0..cfg.rounds {
            models = hypcluster_round(&models, pop, cfg, round, seed)?;
        }
        let obj = hypcluster_objective(&models, pop)?;
        Ok((models, obj))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let restart_objectives: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let best = (0..runs.len()).fold(0, |b, r| if restart_objectives[r] < restart_objectives[b] { r } else { b });
    let (models, objective) = runs.into_iter().nth(best).expect("at least one restart");
    Ok(HypClusterOutcome {
        state: full_assignment(models, pop)?,
        objective,
        restart_objectives,
    })
}

/// Minimizer of `sum_{k in members} w_k L_k(h)` for a categorical model:
/// the weight-averaged empirical label distribution.
fn categorical_fit(members: &[(&ClientDataset, f64)], d: usize) -> Result<Model> {
    let mut p = vec![0.0; d];
    let total: f64 = members.iter().map(|m| m.1).sum();
    for (c, w) in members {
        let n = c.count() as f64;
        for (pi, &k) in p.iter_mut().zip(&c.label_counts(d)) {
            *pi += w / total * k as f64 / n;
        }
    }
    Model::categorical_from_probs(&p)
}

/// Full-batch gradient descent with backtracking on a weighted sum of
/// client losses, run until the gradient norm drops below `tol`.
fn weighted_descent(init: &Model, members: &[(&ClientDataset, f64)], tol: f64, max_iters: usize) -> Result<Model> {
    let total: f64 = members.iter().map(|m| m.1).sum();
    let objective = |m: &Model| -> Result<f64> {
        let mut s = 0.0;
        for (c, w) in members {
            s += w / total * regularized_loss(m, c, 0.0)?;
        }
        Ok(s)
    };
    let grad = |m: &Model| -> Result<Vec<f64>> {
        let mut g = vec![0.0; m.params().len()];
        for (c, w) in members {
            for (a, b) in g.iter_mut().zip(dataset_gradient(m, c, 0.0)?) {
                *a += w / total * b;
            }
        }
        Ok(g)
    };
    let mut model = init.clone();
    let mut f = objective(&model)?;
    let mut step = 1.0;
    for _ in 0..max_iters {
        let g = grad(&model)?;
        let norm2: f64 = g.iter().map(|v| v * v).sum();
        if norm2.sqrt() < tol {
            break;
        }
        loop {
            let cand = model.with_params(model.params().iter().zip(&g).map(|(t, g)| t - step * g).collect())?;
            let fc = objective(&cand)?;
            if fc <= f - 0.5 * step * norm2 || step < 1e-12 {
                model = cand;
                f = fc;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
    }
    Ok(model)
}

/// Exact minimizer of the weighted loss of `members` over the model class.
fn fit_exact(template: &Model, members: &[(&ClientDataset, f64)]) -> Result<Model> {
    match template.kind() {
        ModelKind::CategoricalLogit => categorical_fit(members, template.num_classes()),
        ModelKind::LinearSoftmax { .. } => weighted_descent(template, members, 1e-9, 20_000),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOutcome {
    pub state: ClusterState,
    /// Objective before the first M-step and after each one.
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

/// Exact alternating minimization from `init` models: assign every client,
/// refit every non-empty cluster exactly; stops at a fixed point.
pub fn full_batch_em(init: Vec<Model>, pop: &Population, max_iters: usize) -> Result<EmOutcome> {
    if init.is_empty() {
        return Err(Error::invalid("no cluster models"));
    }
    let mut models = init;
    let mut assignment = assign_clusters(&models, pop.clients())?;
    let mut objectives = vec![hypcluster_objective(&models, pop)?];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let fitted = par::map_range(models.len(), |i| {
            let members: Vec<(&ClientDataset, f64)> = pop
                .clients()
                .iter()
                .zip(pop.weights())
                .zip(&assignment)
                .filter(|(_, &a)| a == i)
                .map(|((c, &w), _)| (c, w))
                .collect();
            if members.is_empty() || members.iter().all(|m| m.1 == 0.0) {
                Ok(models[i].clone())
            } else {
                fit_exact(&models[i], &members)
            }
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        models = fitted;
        objectives.push(hypcluster_objective(&models, pop)?);
        let next = assign_clusters(&models, pop.clients())?;
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(EmOutcome {
        state: ClusterState {
            assignment: pop.clients().iter().map(ClientDataset::id).zip(assignment).collect(),
            models,
        },
        objectives,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceOutcome {
    pub assignment: Vec<usize>,
    pub objective: f64,
    pub models: Vec<Model>,
}

/// Weighted cross-entropy of each member's empirical distribution against
/// the weight-averaged pooled distribution, computed from label counts.
fn pooled_cross_entropy(counts: &[Vec<usize>], weights: &[f64], members: &[usize], d: usize) -> (f64, Vec<f64>) {
    let total: f64 = members.iter().map(|&k| weights[k]).sum();
    let mut pooled = vec![0.0; d];
    if total == 0.0 {
        return (0.0, pooled);
    }
    let freqs: Vec<Vec<f64>> = members
        .iter()
        .map(|&k| {
            let n: usize = counts[k].iter().sum();
            counts[k].iter().map(|&c| c as f64 / n as f64).collect()
        })
        .collect();
    for (f, &k) in freqs.iter().zip(members) {
        for (p, v) in pooled.iter_mut().zip(f) {
            *p += weights[k] / total * v;
        }
    }
    let mut obj = 0.0;
    for (f, &k) in freqs.iter().zip(members) {
        let ce: f64 = f.iter().zip(&pooled).filter(|(v, _)| **v > 0.0).map(|(v, p)| -v * p.ln()).sum();
        obj += weights[k] * ce;
    }
    (obj, pooled)
}

/// Global optimum of the clustering objective for featureless data by
/// enumerating all `q^p` assignments (at most one million).
pub fn brute_force_cluster(pop: &Population, q: usize) -> Result<BruteForceOutcome> {
    if q == 0 {
        return Err(Error::invalid("need at least one cluster"));
    }
    if pop.feature_dim().is_some() {
        return Err(Error::invalid("brute force clustering needs featureless data"));
    }
    let p = pop.len();
    let total = (q as f64).powi(p as i32);
    if total > 1e6 {
        return Err(Error::TooLarge(format!("{q}^{p} assignments exceed the 1e6 limit")));
    }
    let total = total as usize;
    let d = pop.num_classes();
    let counts: Vec<Vec<usize>> = pop.clients().iter().map(|c| c.label_counts(d)).collect();
    let weights = pop.weights();
    let score = |code: usize| -> f64 {
        let a = decode(code, q, p);
        (0..q)
            .map(|i| {
                let members: Vec<usize> = (0..p).filter(|&k| a[k] == i).collect();
                pooled_cross_entropy(&counts, weights, &members, d).0
            })
            .sum()
    };
    let scores = par::map_range(total, score);
    let best = (0..total).fold(0, |b, c| if scores[c] < scores[b] { c } else { b });
    let assignment = decode(best, q, p);
    let models = (0..q)
        .map(|i| {
            let members: Vec<usize> = (0..p).filter(|&k| assignment[k] == i).collect();
            if members.is_empty() {
                Ok(Model::zeros(ModelKind::CategoricalLogit, d))
            } else {
                Model::categorical_from_probs(&pooled_cross_entropy(&counts, weights, &members, d).1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BruteForceOutcome {
        assignment,
        objective: scores[best],
        models,
    })
}

fn decode(mut code: usize, q: usize, p: usize) -> Vec<usize> {
    (0..p)
        .map(|_| {
            let a = code % q;
            code /= q;
            a
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSpace;
    use crate::optim::Budget;
    use proptest::prelude::*;

    fn client(id: u64, d: usize, ys: Vec<usize>) -> ClientDataset {
        ClientDataset::from_labels(ClientId(id), ys, LabelSpace::new(d).unwrap()).unwrap()
    }

    fn pop(d: usize, clients: Vec<Vec<usize>>) -> Population {
        let cs = clients.into_iter().enumerate().map(|(k, ys)| client(k as u64, d, ys)).collect();
        Population::new(LabelSpace::new(d).unwrap(), cs).unwrap()
    }

    fn point_mass(d: usize, c: usize) -> Model {
        let mut p = vec![0.0; d];
        p[c] = 1.0;
        Model::categorical_from_probs(&p).unwrap()
    }

    #[test]
    fn assignment_picks_lowest_loss_with_low_index_ties() {
        let models = vec![point_mass(3, 0), point_mass(3, 1), point_mass(3, 1)];
        let cs = vec![client(0, 3, vec![0, 0]), client(1, 3, vec![1]), client(2, 3, vec![2])];
        let a = assign_clusters(&models, &cs).unwrap();
        assert_eq!(a[..2], [0, 1]);
        // every model is equally bad on label 2
        assert_eq!(a[2], 0);
    }

    #[test]
    fn two_separated_groups_give_zero_objective() {
        let p = pop(3, vec![vec![0; 5], vec![0; 5], vec![1; 5], vec![1; 5]]);
        let bf = brute_force_cluster(&p, 2).unwrap();
        assert!(bf.objective.abs() < 1e-12);
        assert_eq!(bf.assignment[0], bf.assignment[1]);
        assert_ne!(bf.assignment[0], bf.assignment[2]);
        let em = full_batch_em(vec![point_mass(3, 0), point_mass(3, 1)], &p, 20).unwrap();
        assert!(em.objectives.last().unwrap().abs() < 1e-9);
    }

    #[test]
    fn single_cluster_optimum_is_pooled_entropy() {
        let p = pop(3, vec![vec![0, 1], vec![1, 1, 2, 2]]);
        let bf = brute_force_cluster(&p, 1).unwrap();
        // pooled distribution (1/6, 3/6, 2/6)
        let h = -(1.0f64 / 6.0 * (1.0f64 / 6.0).ln() + 0.5 * 0.5f64.ln() + 1.0 / 3.0 * (1.0f64 / 3.0).ln());
        assert!((bf.objective - h).abs() < 1e-12);
        let model_obj = hypcluster_objective(&bf.models, &p).unwrap();
        assert!((model_obj - h).abs() < 1e-9);
    }

    #[test]
    fn brute_force_limit() {
        let p = pop(2, (0..21).map(|k| vec![k % 2]).collect());
        assert!(matches!(brute_force_cluster(&p, 2), Err(Error::TooLarge(_))));
    }

    #[test]
    fn stochastic_em_separates_groups() {
        let mut clients = Vec::new();
        for k in 0..8 {
            clients.push(if k % 2 == 0 { vec![0, 0, 0, 0, 1, 0, 0, 0] } else { vec![3, 3, 3, 2, 3, 3, 3, 3] });
        }
        let p = pop(4, clients);
        let cfg = HypClusterConfig {
            clusters: 2,
            rounds: 30,
            clients_per_round: 4,
            local: SgdConfig::new(0.1, Budget::Epochs(1)),
            restarts: 3,
            init_clients: 1,
            seed: 5,
        };
        let out = train_hypcluster(&Model::zeros(ModelKind::CategoricalLogit, 4), &p, &cfg).unwrap();
        let a = &out.state.assignment;
        assert_ne!(a[&ClientId(0)], a[&ClientId(1)]);
        for k in 2..8u64 {
            assert_eq!(a[&ClientId(k)], a[&ClientId(k % 2)]);
        }
        assert_eq!(out.objective, *out.restart_objectives.iter().min_by(|a, b| a.total_cmp(b)).unwrap());
    }

    #[test]
    fn unseen_client_is_assigned_by_its_data() {
        let state = ClusterState {
            models: vec![point_mass(3, 0), point_mass(3, 2)],
            assignment: BTreeMap::from([(ClientId(0), 0)]),
        };
        let fresh = client(9, 3, vec![2, 2]);
        assert_eq!(state.model_for(&fresh).unwrap(), &state.models[1]);
        let seen = client(0, 3, vec![2]);
        assert_eq!(state.model_for(&seen).unwrap(), &state.models[0]);
    }

    #[test]
    fn em_on_linear_models_decreases_objective() {
        let tt = crate::synth::threshold_example_population(60, 2).unwrap();
        let template = Model::zeros(ModelKind::LinearSoftmax { feature_dim: 1 }, 2);
        let init = vec![
            template.with_params(vec![1.0, 0.0, -1.0, 0.0]).unwrap(),
            template.with_params(vec![-1.0, 0.0, 1.0, 0.0]).unwrap(),
        ];
        let em = full_batch_em(init, &tt.train, 5).unwrap();
        for w in em.objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(*em.objectives.last().unwrap() < 0.2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn em_is_monotone_and_never_beats_brute_force(
            clients in prop::collection::vec(prop::collection::vec(0usize..4, 1..6), 2..6),
            q in 1usize..4,
            starts in prop::collection::vec(0usize..6, 3),
        ) {
            let p = pop(4, clients);
            let init: Vec<Model> = (0..q)
                .map(|i| {
                    let c = &p.clients()[starts[i] % p.len()];
                    categorical_fit(&[(c, 1.0)], 4).unwrap()
                })
                .collect();
            let em = full_batch_em(init, &p, 50).unwrap();
            for w in em.objectives.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            let bf = brute_force_cluster(&p, q).unwrap();
            prop_assert!(*em.objectives.last().unwrap() >= bf.objective - 1e-12);
        }

        #[test]
        fn objective_never_increases_with_more_models(
            clients in prop::collection::vec(prop::collection::vec(0usize..3, 1..5), 1..5),
            extra in prop::collection::vec(0.01f64..1.0, 3),
        ) {
            let p = pop(3, clients);
            let base = vec![point_mass(3, 0)];
            let s: f64 = extra.iter().sum();
            let probs: Vec<f64> = extra.iter().map(|x| x / s).collect();
            let more = vec![point_mass(3, 0), Model::categorical_from_probs(&probs).unwrap()];
            prop_assert!(hypcluster_objective(&more, &p).unwrap() <= hypcluster_objective(&base, &p).unwrap());
        }
    }
}
