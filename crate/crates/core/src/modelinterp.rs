//! Model interpolation: each client predicts with
//! `lambda_k * h_l,k + (1 - lambda_k) * h_c` (mixing probabilities).
//!
//! [`train_mapper`] optimizes the global model jointly with the per-client
//! local models and weights; [`independent_interpolation`] trains them
//! separately and only picks the weights afterwards.

use serde::{Deserialize, Serialize};

use crate::baselines::{client_seed, train_fedavg, train_local, FederatedConfig};
use crate::data::{ClientDataset, ClientId, Example, Population};
use crate::datainterp::check_grid;
use crate::error::{Error, Result};
use crate::model::{empirical_loss, log_softmax_in_place, Interpolated, InterpolationWeight, Loss, Model, ModelKind, LOGIT_FLOOR};
use crate::optim::{sgd_with, EpochSampler, SgdConfig};
use crate::par;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPersonalization {
    pub id: ClientId,
    pub local: Model,
    pub lambda: f64,
}

/// Global model plus one `(local model, weight)` entry per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationMap {
    pub global: Model,
    pub clients: Vec<ClientPersonalization>,
}

impl PersonalizationMap {
    pub fn entry(&self, id: ClientId) -> Option<&ClientPersonalization> {
        self.clients.iter().find(|c| c.id == id)
    }

    /// Interpolated predictor of `id`.
    pub fn predictor(&self, id: ClientId) -> Result<Interpolated<'_>> {
        let e = self
            .entry(id)
            .ok_or_else(|| Error::invalid(format!("client {id} has no personalization entry")))?;
        Interpolated::new(&e.local, &self.global, InterpolationWeight::new(e.lambda)?)
    }
}

/// Hypothesis class of the local models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalClass {
    /// Same architecture as the global model, trained by SGD from it.
    #[default]
    Full,
    /// Distributions with support size one (constant predictions),
    /// optimized exactly by enumerating the labels.
    PointMass,
}

/// Model that puts (numerically) all mass on `label` for every input.
pub fn point_mass_model(kind: ModelKind, num_classes: usize, label: usize) -> Result<Model> {
    let mut params = vec![0.0; kind.param_len(num_classes)];
    match kind {
        ModelKind::CategoricalLogit => {
            for (c, p) in params.iter_mut().enumerate() {
                *p = if c == label { 0.0 } else { LOGIT_FLOOR };
            }
        }
        ModelKind::LinearSoftmax { feature_dim } => {
            let stride = feature_dim + 1;
            for c in 0..num_classes {
                params[c * stride + feature_dim] = if c == label { 0.0 } else { LOGIT_FLOOR };
            }
        }
    }
    Model::from_params(kind, num_classes, params)
}

/// Adds `scale` times the gradient, with respect to `target`'s parameters,
/// of `-ln(w p_target(y|x) + (1 - w) p_other(y|x))` into `grad`.
fn accumulate_mixture_grad(target: &Model, other: &Model, w: f64, ex: &Example<'_>, scale: f64, bufs: &mut (Vec<f64>, Vec<f64>), grad: &mut [f64]) {
    if w == 0.0 {
        return;
    }
    let (lt, lo) = bufs;
    target.logits_unchecked(ex.x, lt);
    log_softmax_in_place(lt);
    let y = ex.label;
    // share of the mixture's mass on y contributed by the target model
    let share = if w == 1.0 {
        1.0
    } else {
        other.logits_unchecked(ex.x, lo);
        log_softmax_in_place(lo);
        let a = w.ln() + lt[y];
        let b = (1.0 - w).ln() + lo[y];
        let m = a.max(b);
        let lq = m + ((a - m).exp() + (b - m).exp()).ln();
        (a - lq).exp()
    };
    for v in lt.iter_mut() {
        *v = share * v.exp();
    }
    lt[y] -= share;
    target.accumulate_param_grad(ex.x, lt, scale, grad);
}

fn bufs(d: usize) -> (Vec<f64>, Vec<f64>) {
    (vec![0.0; d], vec![0.0; d])
}

/// Full-batch gradient of `L_client(lambda h_l + (1 - lambda) h_c)` with
/// respect to the global parameters.
pub fn global_mixture_gradient(h_c: &Model, client: &ClientDataset, lambda: f64, h_l: &Model) -> Result<Vec<f64>> {
    h_c.check_dataset(client)?;
    Interpolated::new(h_l, h_c, InterpolationWeight::new(lambda)?)?;
    let mut grad = vec![0.0; h_c.params().len()];
    let mut b = bufs(h_c.num_classes());
    let scale = 1.0 / client.count() as f64;
    for ex in client.examples() {
        accumulate_mixture_grad(h_c, h_l, 1.0 - lambda, &ex, scale, &mut b, &mut grad);
    }
    Ok(grad)
}

/// Best local model for a fixed weight: SGD on the interpolated loss from
/// the global parameters, or exact label enumeration for point masses
/// (ties to the lowest label).
pub fn local_best_for_lambda(h_c: &Model, client: &ClientDataset, lambda: f64, cfg: &SgdConfig, class: LocalClass) -> Result<Model> {
    let weight = InterpolationWeight::new(lambda)?;
    h_c.check_dataset(client)?;
    match class {
        LocalClass::Full => {
            if lambda == 0.0 {
                return Ok(h_c.clone());
            }
            let mut b = bufs(h_c.num_classes());
            sgd_with(h_c, &mut EpochSampler::new(vec![client]), cfg, |model, batch, grad| {
                let scale = 1.0 / batch.len() as f64;
                for ex in batch {
                    accumulate_mixture_grad(model, h_c, lambda, ex, scale, &mut b, grad);
                }
            })
        }
        LocalClass::PointMass => {
            let mut best: Option<(f64, Model)> = None;
            for c in 0..h_c.num_classes() {
                let cand = point_mass_model(h_c.kind(), h_c.num_classes(), c)?;
                let loss = empirical_loss(&Interpolated::new(&cand, h_c, weight)?, client, Loss::CrossEntropy)?;
                if best.as_ref().is_none_or(|b| loss < b.0) {
                    best = Some((loss, cand));
                }
            }
            Ok(best.expect("at least two classes").1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaChoice {
    pub lambda: f64,
    pub local: Model,
    pub loss: f64,
    /// Interpolated loss of every grid point, in grid order.
    pub grid_losses: Vec<f64>,
}

/// Runs [`local_best_for_lambda`] for every grid weight and keeps the
/// lowest interpolated loss, ties to the smaller weight.
pub fn select_lambda(h_c: &Model, client: &ClientDataset, lambdas: &[f64], cfg: &SgdConfig, class: LocalClass) -> Result<LambdaChoice> {
    check_grid(lambdas)?;
    let fits = par::map(lambdas, |&l| -> Result<(Model, f64)> {
        let local = local_best_for_lambda(h_c, client, l, cfg, class)?;
        let loss = empirical_loss(&Interpolated::new(&local, h_c, InterpolationWeight::new(l)?)?, client, Loss::CrossEntropy)?;
        Ok((local, loss))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for i in 1..fits.len() {
        let (li, lb) = (fits[i].1, fits[best].1);
        if li < lb || (li == lb && lambdas[i] < lambdas[best]) {
            best = i;
        }
    }
    let grid_losses = fits.iter().map(|f| f.1).collect();
    let (local, loss) = fits.into_iter().nth(best).expect("nonempty grid");
    Ok(LambdaChoice {
        lambda: lambdas[best],
        local,
        loss,
        grid_losses,
    })
}

/// One gradient step on the global model through the client's mixture.
pub fn mapper_global_step(h_c: &Model, client: &ClientDataset, lambda: f64, h_l: &Model, step: f64) -> Result<Model> {
    if !(step >= 0.0) {
        return Err(Error::invalid("step size must be nonnegative"));
    }
    let g = global_mixture_gradient(h_c, client, lambda, h_l)?;
    h_c.with_params(h_c.params().iter().zip(&g).map(|(t, g)| t - step * g).collect())
}

/// Population-weighted loss of every client's interpolated predictor.
pub fn mapper_objective(pmap: &PersonalizationMap, pop: &Population) -> Result<f64> {
    let losses = par::map(pop.clients(), |c| empirical_loss(&pmap.predictor(c.id())?, c, Loss::CrossEntropy))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().zip(pop.weights()).map(|(l, w)| w * l).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub lambdas: Vec<f64>,
    /// Local training per candidate weight; its seed is replaced per visit.
    pub local: SgdConfig,
    #[serde(default)]
    pub local_class: LocalClass,
    /// Global step size; `None` uses the local step size.
    #[serde(default)]
    pub global_step: Option<f64>,
    /// Client visits; `None` means `50 * p`.
    #[serde(default)]
    pub rounds: Option<usize>,
    pub seed: u64,
}

/// Weight and local model of every client for a frozen global model.
pub fn personalize(h_c: &Model, clients: &[ClientDataset], cfg: &MapperConfig) -> Result<Vec<ClientPersonalization>> {
    par::map(clients, |c| {
        let local = cfg.local.clone().with_seed(rng::derive(cfg.seed, &[tag::MAPPER, u64::MAX, c.id().0]));
        let choice = select_lambda(h_c, c, &cfg.lambdas, &local, cfg.local_class)?;
        Ok(ClientPersonalization {
            id: c.id(),
            local: choice.local,
            lambda: choice.lambda,
        })
    })
    .into_iter()
    .collect()
}

/// Joint optimization: each round samples a client in proportion to its
/// population weight, fits its best `(lambda, h_l)` against the current
/// global model and steps the global model through that mixture; a final
/// pass personalizes every client against the last global model.
pub fn train_mapper(init: &Model, pop: &Population, cfg: &MapperConfig) -> Result<PersonalizationMap> {
    check_grid(&cfg.lambdas)?;
    cfg.local.validate()?;
    for c in pop.clients() {
        init.check_dataset(c)?;
    }
    let rounds = cfg.rounds.unwrap_or(50 * pop.len());
    let step = cfg.global_step.unwrap_or(cfg.local.step_size);
    let cumulative: Vec<f64> = pop
        .weights()
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut global = init.clone();
    for t in 0..rounds {
        let mut rng = rng::stream(cfg.seed, &[tag::MAPPER, t as u64]);
        let u: f64 = rand::Rng::random::<f64>(&mut rng) * cumulative[cumulative.len() - 1];
        let k = cumulative.partition_point(|&c| c <= u).min(pop.len() - 1);
        let client = &pop.clients()[k];
        let local = cfg.local.clone().with_seed(rng::derive(cfg.seed, &[tag::MAPPER, t as u64, tag::SGD]));
        let choice = select_lambda(&global, client, &cfg.lambdas, &local, cfg.local_class)?;
        global = mapper_global_step(&global, client, choice.lambda, &choice.local, step)?;
    }
    let clients = personalize(&global, pop.clients(), cfg)?;
    Ok(PersonalizationMap { global, clients })
}

/// Grid weight minimizing each client's interpolated training loss for
/// separately trained global and local models.
pub fn choose_weights(global: &Model, locals: Vec<(ClientId, Model)>, pop: &Population, lambdas: &[f64]) -> Result<PersonalizationMap> {
    check_grid(lambdas)?;
    let clients = par::map(&locals, |(id, local)| {
        let ds = pop.client(*id).ok_or_else(|| Error::invalid(format!("client {id} not in population")))?;
        let mut best = (lambdas[0], f64::INFINITY);
        for &l in lambdas {
            let loss = empirical_loss(&Interpolated::new(local, global, InterpolationWeight::new(l)?)?, ds, Loss::CrossEntropy)?;
            if loss < best.1 || (loss == best.1 && l < best.0) {
                best = (l, loss);
            }
        }
        Ok(ClientPersonalization {
            id: *id,
            local: local.clone(),
            lambda: best.0,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(PersonalizationMap {
        global: global.clone(),
        clients,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependentConfig {
    pub lambdas: Vec<f64>,
    pub federated: FederatedConfig,
    pub local: SgdConfig,
    #[serde(default)]
    pub local_class: LocalClass,
}

/// Local model fit on the client's data alone.
fn independent_local(init: &Model, client: &ClientDataset, cfg: &IndependentConfig) -> Result<Model> {
    match cfg.local_class {
        LocalClass::Full => train_local(init, client, &cfg.local.clone().with_seed(client_seed(cfg.local.seed, 0, client.id()))),
        LocalClass::PointMass => {
            // the empirical mode; ties to the lowest label
            let counts = client.label_counts(init.num_classes());
            let mode = (0..counts.len()).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
            point_mass_model(init.kind(), init.num_classes(), mode)
        }
    }
}

/// FedAvg global model, per-client local models and grid-selected weights.
pub fn independent_interpolation(init: &Model, pop: &Population, cfg: &IndependentConfig) -> Result<PersonalizationMap> {
    let global = train_fedavg(init, pop, &cfg.federated)?;
    let locals = par::map(pop.clients(), |c| independent_local(init, c, cfg).map(|m| (c.id(), m)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    choose_weights(&global, locals, pop, &cfg.lambdas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Features, LabelSpace};
    use crate::datainterp::default_lambda_grid;
    use crate::optim::Budget;
    use proptest::prelude::*;

    fn client(id: u64, d: usize, ys: Vec<usize>) -> ClientDataset {
        ClientDataset::from_labels(ClientId(id), ys, LabelSpace::new(d).unwrap()).unwrap()
    }

    fn probs(p: &[f64]) -> Model {
        Model::categorical_from_probs(p).unwrap()
    }

    fn interp_loss(h_l: &Model, h_c: &Model, l: f64, ds: &ClientDataset) -> f64 {
        empirical_loss(&Interpolated::new(h_l, h_c, InterpolationWeight::new(l).unwrap()).unwrap(), ds, Loss::CrossEntropy).unwrap()
    }

    #[test]
    fn objective_reductions_and_hand_value() {
        let c = client(0, 2, vec![0, 1, 1]);
        let pop = Population::new(LabelSpace::new(2).unwrap(), vec![c]).unwrap();
        let g = probs(&[0.5, 0.5]);
        let l = probs(&[0.1, 0.9]);
        let mk = |lambda| PersonalizationMap {
            global: g.clone(),
            clients: vec![ClientPersonalization { id: ClientId(0), local: l.clone(), lambda }],
        };
        let global_loss = empirical_loss(&g, &pop.clients()[0], Loss::CrossEntropy).unwrap();
        assert!((mapper_objective(&mk(0.0), &pop).unwrap() - global_loss).abs() < 1e-12);
        let local_loss = empirical_loss(&l, &pop.clients()[0], Loss::CrossEntropy).unwrap();
        assert!((mapper_objective(&mk(1.0), &pop).unwrap() - local_loss).abs() < 1e-12);
        // mixture (0.3, 0.7)
        let hand = -(0.3f64.ln() + 2.0 * 0.7f64.ln()) / 3.0;
        assert!((mapper_objective(&mk(0.5), &pop).unwrap() - hand).abs() < 1e-12);
        let missing = Population::new(LabelSpace::new(2).unwrap(), vec![client(5, 2, vec![0])]).unwrap();
        assert!(mapper_objective(&mk(0.5), &missing).is_err());
    }

    #[test]
    fn local_fit_edge_cases() {
        let c = client(0, 3, vec![0, 0, 2, 1, 0]);
        let h_c = probs(&[0.2, 0.5, 0.3]);
        let cfg = SgdConfig::new(0.5, Budget::Epochs(2000)).with_batch_size(5);
        assert_eq!(local_best_for_lambda(&h_c, &c, 0.0, &cfg, LocalClass::Full).unwrap(), h_c);
        let fit = local_best_for_lambda(&h_c, &c, 1.0, &cfg, LocalClass::Full).unwrap();
        let p = fit.predict(None).unwrap();
        for (a, b) in p.iter().zip([0.6, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-3, "{p:?}");
        }
        let short = SgdConfig::new(0.1, Budget::Epochs(1));
        for l in [0.3, 0.7] {
            let fit = local_best_for_lambda(&h_c, &c, l, &short, LocalClass::Full).unwrap();
            assert!(interp_loss(&fit, &h_c, l, &c) <= interp_loss(&h_c, &h_c, l, &c));
        }
    }

    #[test]
    fn point_mass_fit_picks_best_label() {
        let c = client(0, 4, vec![3, 3, 1]);
        let h_c = probs(&[0.25; 4]);
        let fit = local_best_for_lambda(&h_c, &c, 0.5, &SgdConfig::new(0.1, Budget::Epochs(1)), LocalClass::PointMass).unwrap();
        assert_eq!(crate::model::argmax(&fit.predict(None).unwrap()), 3);
    }

    #[test]
    fn lambda_selection_rules() {
        let cfg = SgdConfig::new(0.1, Budget::Epochs(1));
        let c = client(0, 2, vec![0, 1, 0, 1]);
        let h_c = probs(&[0.5, 0.5]);
        let only = select_lambda(&h_c, &c, &[0.0], &cfg, LocalClass::Full).unwrap();
        assert_eq!((only.lambda, &only.local), (0.0, &h_c));
        // the global model already matches the client exactly
        let tied = select_lambda(&h_c, &c, &default_lambda_grid(), &cfg, LocalClass::Full).unwrap();
        assert_eq!(tied.lambda, 0.0);
        let point = client(1, 2, vec![1; 200]);
        let strong = SgdConfig::new(0.5, Budget::Epochs(5)).with_batch_size(200);
        let pick = select_lambda(&h_c, &point, &default_lambda_grid(), &strong, LocalClass::Full).unwrap();
        assert_eq!(pick.lambda, 1.0);
        for &l in &pick.grid_losses {
            assert!(pick.loss <= l);
        }
    }

    #[test]
    fn global_step_edge_cases() {
        let c = client(0, 3, vec![0, 1, 1]);
        let h_c = probs(&[0.2, 0.3, 0.5]);
        let h_l = probs(&[0.6, 0.2, 0.2]);
        assert_eq!(mapper_global_step(&h_c, &c, 1.0, &h_l, 0.5).unwrap(), h_c);
        assert_eq!(mapper_global_step(&h_c, &c, 0.4, &h_l, 0.0).unwrap(), h_c);
        let base = interp_loss(&h_l, &h_c, 0.4, &c);
        let improved = [0.5, 0.25, 0.125]
            .iter()
            .any(|&eta| interp_loss(&h_l, &mapper_global_step(&h_c, &c, 0.4, &h_l, eta).unwrap(), 0.4, &c) < base);
        assert!(improved);
    }

    #[test]
    fn global_gradient_matches_finite_differences_for_linear_models() {
        let space = LabelSpace::new(3).unwrap();
        let feats = Features::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.2], vec![-0.3, 0.7]]).unwrap();
        let c = ClientDataset::new(ClientId(0), vec![2, 0, 1], Some(feats), space).unwrap();
        let kind = ModelKind::LinearSoftmax { feature_dim: 2 };
        let h_c = Model::from_params(kind, 3, (0..9).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let h_l = Model::from_params(kind, 3, (0..9).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let lambda = 0.35;
        let g = global_mixture_gradient(&h_c, &c, lambda, &h_l).unwrap();
        let eps = 1e-6;
        for j in 0..9 {
            let mut up = h_c.params().to_vec();
            up[j] += eps;
            let mut down = h_c.params().to_vec();
            down[j] -= eps;
            let fd = (interp_loss(&h_l, &h_c.with_params(up).unwrap(), lambda, &c) - interp_loss(&h_l, &h_c.with_params(down).unwrap(), lambda, &c)) / (2.0 * eps);
            assert!((fd - g[j]).abs() < 1e-6, "param {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn homogeneous_population_gains_nothing_over_global() {
        let clients: Vec<ClientDataset> = (0..6).map(|k| client(k, 3, vec![0, 0, 1, 2, 0, 1])).collect();
        let pop = Population::new(LabelSpace::new(3).unwrap(), clients).unwrap();
        let cfg = MapperConfig {
            lambdas: default_lambda_grid(),
            local: SgdConfig::new(0.1, Budget::Epochs(1)),
            local_class: LocalClass::Full,
            global_step: Some(0.5),
            rounds: Some(300),
            seed: 1,
        };
        let fed = FederatedConfig {
            rounds: 100,
            clients_per_round: 6,
            local: SgdConfig::new(0.1, Budget::Epochs(1)),
            aggregation: Default::default(),
            seed: 1,
        };
        // warm start from the federated global model
        let h_c = train_fedavg(&Model::zeros(ModelKind::CategoricalLogit, 3), &pop, &fed).unwrap();
        let fed_loss = empirical_loss(&h_c, &pop.pooled(), Loss::CrossEntropy).unwrap();
        let pmap = train_mapper(&h_c, &pop, &cfg).unwrap();
        let obj = mapper_objective(&pmap, &pop).unwrap();
        assert!((obj - fed_loss).abs() < 0.05, "{obj} vs {fed_loss}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn selected_weight_attains_grid_minimum(
            labels in prop::collection::vec(0usize..3, 1..12),
            raw in prop::collection::vec(0.05f64..1.0, 3),
        ) {
            let c = client(0, 3, labels);
            let s: f64 = raw.iter().sum();
            let h_c = probs(&raw.iter().map(|x| x / s).collect::<Vec<_>>());
            let cfg = SgdConfig::new(0.2, Budget::Epochs(2));
            let grid = default_lambda_grid();
            let pick = select_lambda(&h_c, &c, &grid, &cfg, LocalClass::Full).unwrap();
            for (&l, &loss) in grid.iter().zip(&pick.grid_losses) {
                let refit = local_best_for_lambda(&h_c, &c, l, &cfg, LocalClass::Full).unwrap();
                prop_assert_eq!(interp_loss(&refit, &h_c, l, &c), loss);
                prop_assert!(pick.loss <= loss);
            }
        }
    }
}
