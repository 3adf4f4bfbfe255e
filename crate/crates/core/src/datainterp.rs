//! Data interpolation: fine-tune the global model on a `lambda`-mixture of
//! a client's own data and a small subsample of other clients' data, for
//! a grid of `lambda` values, and keep the best candidate.
//!
//! With `r * m_k` central samples, `r * m_k` single-example SGD steps and
//! the step size of [`crate::optim::dapper_lr`], the expected excess
//! mixture loss of each candidate is at most `epsilon_lambda`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, ClientId, Population};
use crate::error::{Error, Result};
use crate::model::{empirical_loss, Loss, Model};
use crate::optim::{sgd, Budget, MixtureSampler, SgdConfig, UniformSampler};
use crate::par;
use crate::rng::{self, tag};

/// `0.0, 0.1, ..., 1.0`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub(crate) fn check_grid(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::invalid("empty interpolation grid"));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::invalid(format!("interpolation weight {l} outside [0, 1]")));
    }
    Ok(())
}

/// Datasets of every client except `exclude`.
pub fn central_pool(pop: &Population, exclude: Option<ClientId>) -> Vec<&ClientDataset> {
    pop.clients().iter().filter(|c| Some(c.id()) != exclude).collect()
}

/// `size` uniform draws with replacement from the concatenation of `pool`,
/// returned as one dataset with id `u64::MAX`.
pub fn subsample_global(pool: &[&ClientDataset], size: usize, seed: u64) -> Result<ClientDataset> {
    if size == 0 {
        return Err(Error::invalid("subsample size must be positive"));
    }
    let all = ClientDataset::concat(ClientId(u64::MAX), pool.iter().copied())
        .map_err(|_| Error::invalid("central pool has no examples"))?;
    let mut rng = rng::stream(seed, &[tag::SUBSAMPLE]);
    let indices: Vec<usize> = (0..size).map(|_| rng.random_range(0..all.count())).collect();
    Ok(all.select(ClientId(u64::MAX), &indices))
}

/// SGD from `h_c` with batch 1, each example drawn from `local` with
/// probability `lambda` and from `central` otherwise.
pub fn dapper_for_lambda(h_c: &Model, local: &ClientDataset, central: &ClientDataset, lambda: f64, cfg: &SgdConfig) -> Result<Model> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("interpolation weight {lambda} outside [0, 1]")));
    }
    h_c.check_dataset(local)?;
    h_c.check_dataset(central)?;
    let mut source = MixtureSampler::new(local, central, lambda, cfg.seed);
    sgd(h_c, &mut source, &cfg.clone().with_batch_size(1))
}

/// Fine-tuning on local data alone: `epochs * m_k` uniform draws with
/// replacement, which is [`dapper_for_lambda`] at `lambda = 1`.
pub fn finetune(h_c: &Model, local: &ClientDataset, epochs: usize, step_size: f64, seed: u64) -> Result<Model> {
    h_c.check_dataset(local)?;
    let cfg = SgdConfig::new(step_size, Budget::Steps(epochs * local.count())).with_seed(seed);
    sgd(h_c, &mut UniformSampler::new(vec![local]), &cfg)
}

/// How the winning interpolation weight is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Selection {
    /// Lowest loss on the client's training data.
    TrainLoss,
    /// Lowest loss on a held-out fraction of the client's data; the winner
    /// is then retrained on all of it.
    Holdout { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DapperConfig {
    /// Central subsample size as a multiple of `m_k`.
    pub r: usize,
    pub lambdas: Vec<f64>,
    pub selection: Selection,
    pub step_size: f64,
    /// SGD steps per candidate; `None` means `r * m_k`.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub l2: f64,
    pub seed: u64,
}

impl Default for DapperConfig {
    fn default() -> Self {
        Self {
            r: 5,
            lambdas: default_lambda_grid(),
            selection: Selection::TrainLoss,
            step_size: 0.04,
            steps: None,
            l2: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub lambda: f64,
    pub selection_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DapperOutcome {
    pub model: Model,
    pub lambda: f64,
    /// Central examples sent to the client.
    pub transferred: usize,
    pub candidates: Vec<Candidate>,
}

fn candidate_cfg(cfg: &DapperConfig, m: usize) -> SgdConfig {
    let steps = cfg.steps.unwrap_or(cfg.r * m);
    SgdConfig::new(cfg.step_size, Budget::Steps(steps))
        .with_l2(cfg.l2)
        .with_seed(rng::derive(cfg.seed, &[tag::SGD]))
}

fn split_holdout(local: &ClientDataset, fraction: f64, seed: u64) -> Option<(ClientDataset, ClientDataset)> {
    let m = local.count();
    if m < 2 {
        return None;
    }
    let held = ((fraction * m as f64).ceil() as usize).clamp(1, m - 1);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::HOLDOUT]));
    let (h, t) = order.split_at(held);
    let (mut h, mut t) = (h.to_vec(), t.to_vec());
    h.sort_unstable();
    t.sort_unstable();
    Some((local.select(local.id(), &t), local.select(local.id(), &h)))
}

/// Data interpolation for one client: one central subsample of size
/// `r * m_k`, one candidate per grid weight (all candidates share the SGD
/// seed), winner by the configured selection rule with ties to the
/// smaller weight.
pub fn dapper(h_c: &Model, local: &ClientDataset, pool: &[&ClientDataset], cfg: &DapperConfig) -> Result<DapperOutcome> {
    check_grid(&cfg.lambdas)?;
    if cfg.r == 0 {
        return Err(Error::invalid("r must be at least 1"));
    }
    if let Selection::Holdout { fraction } = cfg.selection {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
        }
    }
    h_c.check_dataset(local)?;
    let m_k = local.count();
    let transferred = cfg.r * m_k;
    let central = subsample_global(pool, transferred, rng::derive(cfg.seed, &[tag::SUBSAMPLE, local.id().0]))?;

    let split = match cfg.selection {
        Selection::TrainLoss => None,
        Selection::Holdout { fraction } => split_holdout(local, fraction, cfg.seed),
    };
    let (train, select_on) = match &split {
        Some((t, h)) => (t, h),
        None => (local, local),
    };
    let sgd_cfg = candidate_cfg(cfg, train.count());
    let trained = par::map(&cfg.lambdas, |&l| -> Result<(Model, f64)> {
        let m = dapper_for_lambda(h_c, train, &central, l, &sgd_cfg)?;
        let loss = empirical_loss(&m, select_on, Loss::CrossEntropy)?;
        Ok((m, loss))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut best = 0;
    for i in 1..trained.len() {
        let (li, lb) = (trained[i].1, trained[best].1);
        if li < lb || (li == lb && cfg.lambdas[i] < cfg.lambdas[best]) {
            best = i;
        }
    }
    let lambda = cfg.lambdas[best];
    let candidates = cfg
        .lambdas
        .iter()
        .zip(&trained)
        .map(|(&lambda, t)| Candidate { lambda, selection_loss: t.1 })
        .collect();
    let model = if split.is_some() {
        dapper_for_lambda(h_c, local, &central, lambda, &candidate_cfg(cfg, m_k))?
    } else {
        trained.into_iter().nth(best).expect("nonempty grid").0
    };
    Ok(DapperOutcome {
        model,
        lambda,
        transferred,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSpace;
    use crate::model::ModelKind;
    use crate::optim::{regularized_loss, ConvexityConstants};

    fn client(id: u64, d: usize, ys: Vec<usize>) -> ClientDataset {
        ClientDataset::from_labels(ClientId(id), ys, LabelSpace::new(d).unwrap()).unwrap()
    }

    #[test]
    fn subsample_has_requested_size_and_only_pool_labels() {
        let a = client(0, 5, vec![0, 1, 1]);
        let b = client(1, 5, vec![3, 3]);
        let s = subsample_global(&[&a, &b], 40, 1).unwrap();
        assert_eq!(s.count(), 40);
        assert!(s.labels().iter().all(|y| [0, 1, 3].contains(y)));
        assert_eq!(s, subsample_global(&[&a, &b], 40, 1).unwrap());
        assert!(subsample_global(&[], 4, 1).is_err());
    }

    #[test]
    fn zero_weight_is_plain_central_sgd() {
        let local = client(0, 4, vec![0, 0, 1]);
        let central = client(1, 4, vec![2, 3, 3, 1, 2]);
        let h = Model::zeros(ModelKind::CategoricalLogit, 4);
        let cfg = SgdConfig::new(0.1, Budget::Steps(50)).with_seed(9);
        let a = dapper_for_lambda(&h, &local, &central, 0.0, &cfg).unwrap();
        let b = sgd(&h, &mut UniformSampler::new(vec![&central]), &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn unit_weight_is_finetuning() {
        let local = client(0, 4, vec![0, 0, 1, 3]);
        let central = client(1, 4, vec![2, 2]);
        let h = Model::from_params(ModelKind::CategoricalLogit, 4, vec![0.3, 0.0, -0.2, 0.1]).unwrap();
        let cfg = SgdConfig::new(0.05, Budget::Steps(5 * 4)).with_seed(4);
        let a = dapper_for_lambda(&h, &local, &central, 1.0, &cfg).unwrap();
        let b = finetune(&h, &local, 5, 0.05, 4).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn zero_steps_return_the_global_model() {
        let local = client(0, 3, vec![0]);
        let h = Model::from_params(ModelKind::CategoricalLogit, 3, vec![0.5, 0.0, 0.0]).unwrap();
        let cfg = DapperConfig {
            steps: Some(0),
            ..Default::default()
        };
        let out = dapper(&h, &local, &[&client(1, 3, vec![1, 2])], &cfg).unwrap();
        assert_eq!(out.model, h);
        assert_eq!(out.lambda, 0.0);
        assert_eq!(out.transferred, 5);
    }

    #[test]
    fn distinctive_client_prefers_high_weight() {
        let local = client(0, 5, vec![4; 30]);
        let pool: Vec<ClientDataset> = (1..6).map(|k| client(k, 5, vec![0, 1, 2, 3, 0, 1])).collect();
        let refs: Vec<&ClientDataset> = pool.iter().collect();
        let cfg = DapperConfig {
            step_size: 0.1,
            ..Default::default()
        };
        let out = dapper(&Model::zeros(ModelKind::CategoricalLogit, 5), &local, &refs, &cfg).unwrap();
        assert!(out.lambda >= 0.9, "{}", out.lambda);
        assert_eq!(out.candidates.len(), 11);
    }

    #[test]
    fn holdout_selection_runs_and_reports_losses() {
        let local = client(0, 3, vec![0, 0, 1, 0, 0, 2, 0, 0, 0, 1]);
        let pool = [client(1, 3, vec![1, 2, 1, 2])];
        let cfg = DapperConfig {
            selection: Selection::Holdout { fraction: 0.2 },
            seed: 3,
            ..Default::default()
        };
        let out = dapper(&Model::zeros(ModelKind::CategoricalLogit, 3), &local, &[&pool[0]], &cfg).unwrap();
        assert!(out.candidates.iter().all(|c| c.selection_loss.is_finite()));
        assert!(dapper(&Model::zeros(ModelKind::CategoricalLogit, 3), &local, &[&pool[0]], &DapperConfig {
            selection: Selection::Holdout { fraction: 1.0 },
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn theory_step_size_reaches_epsilon_on_small_instance() {
        let d = 4;
        let mu = 1.0;
        let local = client(0, d, vec![0, 0, 1, 3, 0]);
        let central = client(1, d, (0..200).map(|i| [1, 2, 2, 3][i % 4]).collect());
        let c = ConvexityConstants::regularized_categorical(d, mu).unwrap();
        let r = crate::optim::dapper_r_threshold(&c).ceil();
        let lambda = 0.5;
        let eta = crate::optim::dapper_lr(&c, lambda, r, local.count()).unwrap();
        let steps = r as usize * local.count();
        // closed-form check through the mixture objective
        let mix = |m: &Model| lambda * regularized_loss(m, &local, mu).unwrap() + (1.0 - lambda) * regularized_loss(m, &central, mu).unwrap();
        let mut best = Model::zeros(ModelKind::CategoricalLogit, d);
        for _ in 0..5000 {
            let g: Vec<f64> = crate::optim::dataset_gradient(&best, &local, mu)
                .unwrap()
                .iter()
                .zip(crate::optim::dataset_gradient(&best, &central, mu).unwrap())
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect();
            best = best.with_params(best.params().iter().zip(&g).map(|(t, g)| t - 0.5 * g).collect()).unwrap();
        }
        let mean_gap: f64 = (0..10)
            .map(|s| {
                let cfg = SgdConfig::new(eta, Budget::Steps(steps)).with_l2(mu).with_seed(s);
                let m = dapper_for_lambda(&Model::zeros(ModelKind::CategoricalLogit, d), &local, &central, lambda, &cfg).unwrap();
                mix(&m) - mix(&best)
            })
            .sum::<f64>()
            / 10.0;
        let eps = crate::optim::epsilon_lambda(lambda, local.count(), central.count()).unwrap();
        assert!(mean_gap <= eps, "gap {mean_gap} eps {eps}");
    }
}
