//! Experiment orchestration: configuration, training pipelines for every
//! algorithm and composition, evaluation on seen and unseen clients,
//! parameter sweeps and persisted outputs.
//!
//! Output layout of [`run_experiment`] under the output directory:
//!
//! ```text
//! summary.tsv                       one row per (algorithm, split, seed)
//! seed-<s>/metrics.jsonl            header line, then per-client and summary records
//! seed-<s>/models/<algorithm>.bin   trained models (see `codec`)
//! ```
//!
//! Every file carries the schema id, the config hash and the seed(s).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{evaluate, ClientMetrics, EvalReport, Personalization};
use crate::baselines::{train_agnostic, train_fedavg, train_local, AgnosticConfig, Aggregation, FederatedConfig};
use crate::codec;
use crate::data::{ClientDataset, ClientId, Population};
use crate::datainterp::{central_pool, dapper, finetune, DapperConfig, Selection};
use crate::error::{Error, Result};
use crate::hypcluster::{best_cluster, train_hypcluster, ClusterState, HypClusterConfig};
use crate::io::{load_population, write_atomic};
use crate::model::{Model, ModelKind};
use crate::modelinterp::{personalize, train_mapper, ClientPersonalization, LocalClass, MapperConfig, PersonalizationMap};
use crate::optim::{Budget, SgdConfig};
use crate::par;
use crate::rng::{self, tag};
use crate::synth::{synthetic_population, threshold_example_population, two_source_population, SyntheticSpec, TrainTest};

pub const SCHEMA: &str = "perfed.metrics.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        clients: usize,
        classes: usize,
        samples_per_client: usize,
    },
    File {
        train: PathBuf,
        test: PathBuf,
    },
    Threshold {
        samples_per_client: usize,
    },
    TwoSource {
        clients: usize,
        classes: usize,
        samples_per_client: usize,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::Synthetic {
            clients: 100,
            classes: 50,
            samples_per_client: 100,
        }
    }
}

impl DatasetSpec {
    /// How each client's test set relates to its training data.
    pub fn test_data(&self) -> &'static str {
        match self {
            Self::File { .. } => "supplied test file",
            _ => "independent draw per client, same size as its training data",
        }
    }

    pub fn load(&self, seed: u64) -> Result<TrainTest> {
        match self {
            Self::Synthetic {
                clients,
                classes,
                samples_per_client,
            } => synthetic_population(&SyntheticSpec {
                clients: *clients,
                classes: *classes,
                samples_per_client: *samples_per_client,
                seed,
            }),
            Self::File { train, test } => {
                let tt = TrainTest {
                    train: load_population(train)?,
                    test: load_population(test)?,
                };
                let ids = |p: &Population| p.clients().iter().map(ClientDataset::id).collect::<Vec<_>>();
                if ids(&tt.train) != ids(&tt.test) || tt.train.num_classes() != tt.test.num_classes() {
                    return Err(Error::config("dataset", "train and test files must list the same clients and classes"));
                }
                Ok(tt)
            }
            Self::Threshold { samples_per_client } => threshold_example_population(*samples_per_client, seed),
            Self::TwoSource {
                clients,
                classes,
                samples_per_client,
            } => two_source_population(*clients, *classes, *samples_per_client, seed),
        }
    }

    fn set_samples_per_client(&mut self, m: usize) -> Result<()> {
        match self {
            Self::Synthetic { samples_per_client, .. }
            | Self::Threshold { samples_per_client }
            | Self::TwoSource { samples_per_client, .. } => {
                *samples_per_client = m;
                Ok(())
            }
            Self::File { .. } => Err(Error::config("sweep.axis", "m_k cannot be swept for file datasets")),
        }
    }
}

/// Local-SGD settings of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageHyper {
    pub epochs: usize,
    pub step: f64,
}

impl StageHyper {
    fn sgd(&self, batch: usize) -> SgdConfig {
        SgdConfig::new(self.step, Budget::Epochs(self.epochs)).with_batch_size(batch)
    }
}

fn stage(epochs: usize, step: f64) -> StageHyper {
    StageHyper { epochs, step }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub batch_size: usize,
    pub aggregation: Aggregation,
    pub local: StageHyper,
    pub fedavg: StageHyper,
    pub agnostic: StageHyper,
    pub domain_lr: f64,
    /// Client `k` belongs to agnostic domain `k mod domains`.
    pub domains: usize,
    pub hypcluster: StageHyper,
    pub clusters: usize,
    pub restarts: usize,
    pub init_clients: usize,
    pub finetune: StageHyper,
    pub dapper_step: f64,
    pub dapper_r: usize,
    pub dapper_selection: Selection,
    pub dapper_pool: DapperPool,
    /// Interpolation grid `0, 1/n, ..., 1`.
    pub lambda_grid: usize,
    pub mapper: StageHyper,
    pub mapper_global_step: Option<f64>,
    pub mapper_rounds: Option<usize>,
    pub mapper_local_class: LocalClass,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            rounds: 200,
            clients_per_round: 20,
            batch_size: 20,
            aggregation: Aggregation::BySampleCount,
            local: stage(20, 0.05),
            fedavg: stage(1, 0.05),
            agnostic: stage(1, 0.05),
            domain_lr: 0.05,
            domains: 2,
            hypcluster: stage(1, 0.03),
            clusters: 4,
            restarts: 5,
            init_clients: 1,
            finetune: stage(5, 0.01),
            dapper_step: 0.04,
            dapper_r: 5,
            dapper_selection: Selection::TrainLoss,
            dapper_pool: DapperPool::AllOthers,
            lambda_grid: 10,
            mapper: stage(5, 0.3),
            mapper_global_step: Some(0.03),
            mapper_rounds: None,
            mapper_local_class: LocalClass::Full,
        }
    }
}

impl Hyper {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("rounds", self.rounds),
            ("clients_per_round", self.clients_per_round),
            ("batch_size", self.batch_size),
            ("domains", self.domains),
            ("clusters", self.clusters),
            ("restarts", self.restarts),
            ("init_clients", self.init_clients),
            ("dapper_r", self.dapper_r),
            ("lambda_grid", self.lambda_grid),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("hyper.{name}"), "must be positive"));
            }
        }
        let steps = [
            ("local", self.local.step),
            ("fedavg", self.fedavg.step),
            ("agnostic", self.agnostic.step),
            ("hypcluster", self.hypcluster.step),
            ("finetune", self.finetune.step),
            ("mapper", self.mapper.step),
            ("dapper_step", self.dapper_step),
            ("domain_lr", self.domain_lr),
        ];
        for (name, v) in steps {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("hyper.{name}"), "step sizes must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (0..=self.lambda_grid).map(|i| i as f64 / self.lambda_grid as f64).collect()
    }

    fn federated(&self, h: StageHyper, population: usize, seed: u64) -> FederatedConfig {
        FederatedConfig {
            rounds: self.rounds,
            clients_per_round: self.clients_per_round.min(population),
            local: h.sgd(self.batch_size),
            aggregation: self.aggregation,
            seed,
        }
    }
}

/// Seen clients whose data forms a client's central subsample pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DapperPool {
    /// Every seen client except the target.
    #[default]
    AllOthers,
    /// Every seen client, the target included.
    All,
    /// Seen clients of the target's cluster, the target excluded; falls
    /// back to `AllOthers` when the cluster has no other member.
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Base {
    Local,
    FedAvg,
    Agnostic,
    HypCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2 {
    None,
    Finetune,
    Dapper,
    Mapper,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Algorithm {
    pub name: String,
    pub base: Base,
    pub personalize: Stage2,
}

pub const ALGORITHM_NAMES: &str = "local, fedavg, agnostic, hypcluster, finetune, dapper, mapper, \
    or <fedavg|agnostic|hypcluster>+<finetune|dapper|mapper>";

impl Algorithm {
    pub fn parse(name: &str) -> Result<Self> {
        let bad = || Error::config("algorithms", format!("unknown algorithm `{name}`; valid: {ALGORITHM_NAMES}"));
        let base_of = |s: &str| match s {
            "fedavg" => Some(Base::FedAvg),
            "agnostic" => Some(Base::Agnostic),
            "hypcluster" => Some(Base::HypCluster),
            _ => None,
        };
        let stage_of = |s: &str| match s {
            "finetune" => Some(Stage2::Finetune),
            "dapper" => Some(Stage2::Dapper),
            "mapper" => Some(Stage2::Mapper),
            _ => None,
        };
        let (base, personalize) = match name.split_once('+') {
            Some((b, s)) => (base_of(b).ok_or_else(bad)?, stage_of(s).ok_or_else(bad)?),
            None if name == "local" => (Base::Local, Stage2::None),
            None => match (base_of(name), stage_of(name)) {
                (Some(b), _) => (b, Stage2::None),
                (None, Some(s)) => (Base::FedAvg, s),
                _ => return Err(bad()),
            },
        };
        Ok(Self {
            name: name.to_string(),
            base,
            personalize,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub algorithms: Vec<String>,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Fraction of clients held out of training and only personalized
    /// and evaluated.
    #[serde(default)]
    pub unseen_fraction: f64,
    /// Omits wall-clock timings so reruns produce identical files.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(config_field(&e), e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<Vec<Algorithm>> {
        if self.algorithms.is_empty() {
            return Err(Error::config("algorithms", format!("list at least one of: {ALGORITHM_NAMES}")));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "list at least one seed"));
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return Err(Error::config("unseen_fraction", "must lie in [0, 1)"));
        }
        if let DatasetSpec::File { train, test } = &self.dataset {
            for (field, p) in [("dataset.train", train), ("dataset.test", test)] {
                if !p.exists() {
                    return Err(Error::config(field, format!("{} does not exist", p.display())));
                }
            }
        }
        self.hyper.validate()?;
        self.algorithms.iter().map(|a| Algorithm::parse(a)).collect()
    }

    /// SHA-256 of the canonical JSON form (output directory excluded).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn config_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`').nth(1).map_or_else(|| "config".to_string(), str::to_string)
}

/// Predictors served to clients after training.
#[derive(Debug, Clone, PartialEq)]
pub enum Served {
    Global(Model),
    Clusters(ClusterState),
    /// One interpolation map per group of clients.
    Interp(Vec<PersonalizationMap>),
    PerClient { base: Model, models: BTreeMap<ClientId, Model> },
}

impl Served {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Self::Global(m) => codec::encode_model(m),
            Self::Clusters(s) => codec::encode_cluster_state(s),
            Self::Interp(maps) if maps.len() == 1 => codec::encode_personalization(&maps[0]),
            Self::Interp(maps) => {
                // concatenated maps, each prefixed with its byte length
                let mut out = Vec::new();
                for m in maps {
                    let b = codec::encode_personalization(m);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(&b);
                }
                out
            }
            Self::PerClient { base, models } => codec::encode_personalization(&PersonalizationMap {
                global: base.clone(),
                clients: models
                    .iter()
                    .map(|(&id, m)| ClientPersonalization {
                        id,
                        local: m.clone(),
                        lambda: 1.0,
                    })
                    .collect(),
            }),
        }
    }

    /// Inverse of [`Served::encode`]; per-client maps decode as `Interp`,
    /// which predicts identically.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        match bytes.get(..4) {
            Some(b"PFMD") => Ok(Self::Global(codec::decode_model(bytes)?)),
            Some(b"PFCS") => Ok(Self::Clusters(codec::decode_cluster_state(bytes)?)),
            Some(b"PFPM") => Ok(Self::Interp(vec![codec::decode_personalization(bytes)?])),
            _ => {
                let mut maps = Vec::new();
                let mut rest = bytes;
                while !rest.is_empty() {
                    let len = rest
                        .get(..8)
                        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
                        .filter(|&n| n <= rest.len() - 8)
                        .ok_or_else(|| Error::invalid("unrecognized or truncated model file"))?;
                    maps.push(codec::decode_personalization(&rest[8..8 + len])?);
                    rest = &rest[8 + len..];
                }
                if maps.is_empty() {
                    return Err(Error::invalid("empty model file"));
                }
                Ok(Self::Interp(maps))
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::Global(m) | Self::PerClient { base: m, .. } => m.num_classes(),
            Self::Clusters(s) => s.models[0].num_classes(),
            Self::Interp(maps) => maps[0].global.num_classes(),
        }
    }

    /// Evaluates on `test`; clients absent from training are personalized
    /// from their data in `serve`.
    pub fn evaluate(&self, test: &Population, serve: &Population) -> Result<EvalReport> {
        for pop in [test, serve] {
            if pop.num_classes() != self.num_classes() {
                return Err(Error::DimensionMismatch {
                    expected: self.num_classes(),
                    got: pop.num_classes(),
                });
            }
        }
        match self {
            Self::Global(m) => evaluate(Personalization::Global(m), test, Some(serve)),
            Self::Clusters(s) => evaluate(Personalization::Clustered(s), test, Some(serve)),
            Self::PerClient { models, .. } => evaluate(Personalization::PerClient(models), test, Some(serve)),
            Self::Interp(maps) => {
                let mut by_id: BTreeMap<ClientId, ClientMetrics> = BTreeMap::new();
                for m in maps {
                    let idx: Vec<usize> = (0..test.len()).filter(|&k| m.entry(test.clients()[k].id()).is_some()).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let r = evaluate(Personalization::Interpolated(m), &test.subset(&idx)?, None)?;
                    by_id.extend(r.clients.into_iter().map(|c| (c.id, c)));
                }
                let clients = test
                    .clients()
                    .iter()
                    .map(|c| by_id.remove(&c.id()).ok_or_else(|| Error::invalid(format!("client {} not personalized", c.id()))))
                    .collect::<Result<Vec<_>>>()?;
                EvalReport::from_clients(clients)
            }
        }
    }
}

/// Stable 64-bit key of a name, for seed derivation.
fn name_key(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn template(pop: &Population) -> Model {
    Model::zeros(ModelKind::for_features(pop.feature_dim()), pop.num_classes())
}

fn train_base(base: Base, seen: &Population, serve: &Population, hyper: &Hyper, seed: u64) -> Result<Served> {
    let init = template(seen);
    let s = rng::derive(seed, &[tag::EXPERIMENT, base as u64]);
    Ok(match base {
        Base::Local => {
            let models = par::map(serve.clients(), |c| {
                let cfg = hyper.local.sgd(hyper.batch_size).with_seed(rng::derive(s, &[c.id().0]));
                train_local(&init, c, &cfg).map(|m| (c.id(), m))
            })
            .into_iter()
            .collect::<Result<BTreeMap<_, _>>>()?;
            Served::PerClient { base: init, models }
        }
        Base::FedAvg => Served::Global(train_fedavg(&init, seen, &hyper.federated(hyper.fedavg, seen.len(), s))?),
        Base::Agnostic => {
            let domain_of: Vec<usize> = (0..seen.len()).map(|k| (seen.clients()[k].id().0 as usize) % hyper.domains).collect();
            let mut present: Vec<usize> = domain_of.clone();
            present.sort_unstable();
            present.dedup();
            let remap: Vec<usize> = domain_of.iter().map(|d| present.binary_search(d).expect("present")).collect();
            let cfg = AgnosticConfig {
                federated: hyper.federated(hyper.agnostic, seen.len(), s),
                domain_lr: hyper.domain_lr,
            };
            Served::Global(train_agnostic(&init, seen, &remap, &cfg)?.model)
        }
        Base::HypCluster => {
            let cfg = HypClusterConfig {
                clusters: hyper.clusters,
                rounds: hyper.rounds,
                clients_per_round: hyper.clients_per_round.min(seen.len()),
                local: hyper.hypcluster.sgd(hyper.batch_size),
                restarts: hyper.restarts,
                init_clients: hyper.init_clients,
                seed: s,
            };
            Served::Clusters(train_hypcluster(&init, seen, &cfg)?.state)
        }
    })
}

/// Shared model behind each client: the global model, or its cluster's.
fn base_model<'a>(base: &'a Served, client: &ClientDataset) -> Result<&'a Model> {
    match base {
        Served::Global(m) => Ok(m),
        Served::Clusters(s) => s.model_for(client),
        _ => Err(Error::invalid("personalization needs a shared base model")),
    }
}

fn mapper_config(hyper: &Hyper, seed: u64) -> MapperConfig {
    MapperConfig {
        lambdas: hyper.lambdas(),
        local: hyper.mapper.sgd(hyper.batch_size),
        local_class: hyper.mapper_local_class,
        global_step: hyper.mapper_global_step,
        rounds: hyper.mapper_rounds,
        seed,
    }
}

fn personalize_stage(stage: Stage2, base: &Served, seen: &Population, serve: &Population, hyper: &Hyper, seed: u64) -> Result<Served> {
    match stage {
        Stage2::None => Ok(base.clone()),
        Stage2::Finetune | Stage2::Dapper => {
            let cluster_of = |c: &ClientDataset| -> Result<Option<usize>> {
                match base {
                    Served::Clusters(s) => Ok(Some(best_cluster(&s.models, c)?.0)),
                    _ => Ok(None),
                }
            };
            if hyper.dapper_pool == DapperPool::Cluster && stage == Stage2::Dapper && !matches!(base, Served::Clusters(_)) {
                return Err(Error::config("hyper.dapper_pool", "`cluster` needs a hypcluster base"));
            }
            let seen_clusters = seen.clients().iter().map(cluster_of).collect::<Result<Vec<_>>>()?;
            let pool_for = |c: &ClientDataset| -> Result<Vec<&ClientDataset>> {
                Ok(match hyper.dapper_pool {
                    DapperPool::All => central_pool(seen, None),
                    DapperPool::AllOthers => central_pool(seen, Some(c.id())),
                    DapperPool::Cluster => {
                        let own = cluster_of(c)?;
                        let pool: Vec<&ClientDataset> = seen
                            .clients()
                            .iter()
                            .zip(&seen_clusters)
                            .filter(|(o, k)| **k == own && o.id() != c.id())
                            .map(|(o, _)| o)
                            .collect();
                        if pool.is_empty() {
                            central_pool(seen, Some(c.id()))
                        } else {
                            pool
                        }
                    }
                })
            };
            let models = par::map(serve.clients(), |c| -> Result<(ClientId, Model)> {
                let h = base_model(base, c)?;
                let s = rng::derive(seed, &[c.id().0]);
                let m = if stage == Stage2::Finetune {
                    finetune(h, c, hyper.finetune.epochs, hyper.finetune.step, s)?
                } else {
                    let cfg = DapperConfig {
                        r: hyper.dapper_r,
                        lambdas: hyper.lambdas(),
                        selection: hyper.dapper_selection,
                        step_size: hyper.dapper_step,
                        steps: None,
                        l2: 0.0,
                        seed: s,
                    };
                    dapper(h, c, &pool_for(c)?, &cfg)?.model
                };
                Ok((c.id(), m))
            })
            .into_iter()
            .collect::<Result<BTreeMap<_, _>>>()?;
            let shared = match base {
                Served::Global(m) => m.clone(),
                Served::Clusters(s) => s.models[0].clone(),
                _ => template(seen),
            };
            Ok(Served::PerClient { base: shared, models })
        }
        Stage2::Mapper => {
            let cfg = mapper_config(hyper, seed);
            let groups: Vec<(Model, Vec<usize>)> = match base {
                Served::Global(m) => vec![(m.clone(), (0..serve.len()).collect())],
                Served::Clusters(s) => {
                    let mut g: Vec<Vec<usize>> = vec![Vec::new(); s.models.len()];
                    for (k, c) in serve.clients().iter().enumerate() {
                        let m = s.model_for(c)?;
                        let i = s.models.iter().position(|x| std::ptr::eq(x, m)).expect("model of state");
                        g[i].push(k);
                    }
                    s.models.iter().cloned().zip(g).filter(|(_, g)| !g.is_empty()).collect()
                }
                _ => return Err(Error::invalid("personalization needs a shared base model")),
            };
            let maps = groups
                .into_iter()
                .map(|(init, members)| -> Result<PersonalizationMap> {
                    let seen_idx: Vec<usize> = members
                        .iter()
                        .filter_map(|&k| seen.position(serve.clients()[k].id()))
                        .collect();
                    let unseen: Vec<ClientDataset> = members
                        .iter()
                        .map(|&k| &serve.clients()[k])
                        .filter(|c| seen.position(c.id()).is_none())
                        .cloned()
                        .collect();
                    let mut map = if seen_idx.is_empty() {
                        PersonalizationMap {
                            global: init,
                            clients: Vec::new(),
                        }
                    } else {
                        train_mapper(&init, &seen.subset(&seen_idx)?, &cfg)?
                    };
                    let extra = personalize(&map.global, &unseen, &cfg)?;
                    map.clients.extend(extra);
                    Ok(map)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Served::Interp(maps))
        }
    }
}

/// Seen/unseen split of the client positions, by a seeded shuffle.
pub fn split_clients(n: usize, unseen_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let unseen = ((unseen_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let (u, s) = order.split_at(unseen);
    let (mut u, mut s) = (u.to_vec(), s.to_vec());
    u.sort_unstable();
    s.sort_unstable();
    (s, u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub algorithm: String,
    pub seed: u64,
    /// `seen` or `unseen`.
    pub split: String,
    pub report: EvalReport,
}

/// Trained predictors and reports of every algorithm for one seed.
pub struct SeedOutcome {
    pub seed: u64,
    pub reports: Vec<RunReport>,
    pub served: Vec<(String, Served)>,
}

/// Trains and evaluates every configured algorithm on one seed.
pub fn run_seed(cfg: &ExperimentConfig, algorithms: &[Algorithm], seed: u64) -> Result<SeedOutcome> {
    let data = cfg.dataset.load(seed)?;
    let (seen_idx, unseen_idx) = split_clients(data.train.len(), cfg.unseen_fraction, seed);
    let seen = data.train.subset(&seen_idx)?;
    let hyper = &cfg.hyper;
    let mut bases: BTreeMap<Base, Served> = BTreeMap::new();
    for a in algorithms {
        if let std::collections::btree_map::Entry::Vacant(e) = bases.entry(a.base) {
            e.insert(train_base(a.base, &seen, &data.train, hyper, seed)?);
        }
    }
    let mut reports = Vec::new();
    let mut served = Vec::new();
    for a in algorithms {
        let s = rng::derive(seed, &[tag::EXPERIMENT, name_key(&a.name)]);
        let result = personalize_stage(a.personalize, &bases[&a.base], &seen, &data.train, hyper, s)?;
        for (split, idx) in [("seen", &seen_idx), ("unseen", &unseen_idx)] {
            if idx.is_empty() {
                continue;
            }
            let report = result
                .evaluate(&data.test.subset(idx)?, &data.train)?
                .with_meta("algorithm", &a.name)
                .with_meta("seed", seed)
                .with_meta("split", split)
                .with_meta("config_hash", cfg.hash())
                .with_meta("test_data", cfg.dataset.test_data());
            reports.push(RunReport {
                algorithm: a.name.clone(),
                seed,
                split: split.to_string(),
                report,
            });
        }
        served.push((a.name.clone(), result));
    }
    Ok(SeedOutcome { seed, reports, served })
}

fn metrics_jsonl(cfg: &ExperimentConfig, cfg_hash: &str, outcome: &SeedOutcome) -> String {
    let mut out = String::new();
    let header = json!({"schema": SCHEMA, "config_hash": cfg_hash, "seed": outcome.seed, "test_data": cfg.dataset.test_data()});
    let _ = writeln!(out, "{header}");
    for r in &outcome.reports {
        for c in &r.report.clients {
            let line = json!({
                "type": "client", "algorithm": r.algorithm, "split": r.split, "seed": r.seed,
                "client": c.id.0, "count": c.count, "loss": c.loss, "accuracy": c.accuracy,
            });
            let _ = writeln!(out, "{line}");
        }
        let line = json!({
            "type": "summary", "algorithm": r.algorithm, "split": r.split, "seed": r.seed,
            "clients": r.report.clients.len(),
            "uniform_loss": r.report.uniform_loss, "uniform_accuracy": r.report.uniform_accuracy,
            "weighted_loss": r.report.weighted_loss, "weighted_accuracy": r.report.weighted_accuracy,
        });
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn summary_tsv(cfg_hash: &str, reports: &[RunReport]) -> String {
    let mut out = format!("# schema={SCHEMA} config_hash={cfg_hash}\n");
    out.push_str("algorithm\tsplit\tseed\tclients\tuniform_loss\tuniform_accuracy\tweighted_loss\tweighted_accuracy\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.algorithm,
            r.split,
            r.seed,
            r.report.clients.len(),
            r.report.uniform_loss,
            r.report.uniform_accuracy,
            r.report.weighted_loss,
            r.report.weighted_accuracy
        );
    }
    out
}

/// Runs every seed (in parallel), writes the output files when an output
/// directory is configured and returns the reports in seed order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunReport>> {
    let algorithms = cfg.validate()?;
    let hash = cfg.hash();
    let started = std::time::Instant::now();
    let outcomes = par::map(&cfg.seeds, |&s| run_seed(cfg, &algorithms, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<RunReport> = outcomes.iter().flat_map(|o| o.reports.iter().cloned()).collect();
    if let Some(out) = &cfg.out {
        for o in &outcomes {
            let dir = out.join(format!("seed-{}", o.seed));
            write_atomic(&dir.join("metrics.jsonl"), metrics_jsonl(cfg, &hash, o).as_bytes())?;
            for (name, served) in &o.served {
                write_atomic(&dir.join("models").join(format!("{name}.bin")), &served.encode())?;
            }
        }
        write_atomic(&out.join("summary.tsv"), summary_tsv(&hash, &reports).as_bytes())?;
        let config_text = toml::to_string(cfg).map_err(|e| Error::invalid(e.to_string()))?;
        write_atomic(&out.join("config.toml"), config_text.as_bytes())?;
        if !cfg.deterministic {
            let line = format!("elapsed_ms\t{}\n", started.elapsed().as_millis());
            write_atomic(&out.join("timing.tsv"), line.as_bytes())?;
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Samples per client.
    MK,
    /// Number of clusters.
    Q,
    /// Dapper central-subsample multiplier.
    R,
    /// Interpolation grid density.
    LambdaGrid,
    /// Mapper client visits.
    T,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m_k" | "mk" | "m-k" => Ok(Self::MK),
            "q" => Ok(Self::Q),
            "r" => Ok(Self::R),
            "lambda-grid" | "lambda_grid" => Ok(Self::LambdaGrid),
            "T" | "t" => Ok(Self::T),
            _ => Err(Error::config("sweep.axis", format!("unknown axis `{s}`; valid: m_k, q, r, lambda-grid, T"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::MK => "m_k",
            Self::Q => "q",
            Self::R => "r",
            Self::LambdaGrid => "lambda-grid",
            Self::T => "T",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: usize) -> Result<()> {
        if value == 0 {
            return Err(Error::config("sweep.values", "values must be positive"));
        }
        match self {
            Self::MK => cfg.dataset.set_samples_per_client(value)?,
            Self::Q => cfg.hyper.clusters = value,
            Self::R => cfg.hyper.dapper_r = value,
            Self::LambdaGrid => cfg.hyper.lambda_grid = value,
            Self::T => cfg.hyper.mapper_rounds = Some(value),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: usize,
    pub reports: Vec<RunReport>,
}

/// Long-format table: one row per (axis value, algorithm, split, seed,
/// client).
pub fn sweep_tsv(cfg_hash: &str, axis: SweepAxis, points: &[SweepPoint]) -> String {
    let mut out = format!("# schema={SCHEMA} config_hash={cfg_hash} axis={}\n", axis.name());
    out.push_str("algorithm\taxis_value\tsplit\tseed\tclient\tloss\taccuracy\n");
    for p in points {
        for r in &p.reports {
            for c in &r.report.clients {
                let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}\t{}", r.algorithm, p.value, r.split, r.seed, c.id, c.loss, c.accuracy);
            }
        }
    }
    out
}

/// Runs the experiment once per value of `axis` (points in parallel) and
/// writes `sweep.tsv` when an output directory is configured.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[usize]) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::config("sweep.values", "give at least one value"));
    }
    let base = ExperimentConfig { out: None, ..cfg.clone() };
    base.validate()?;
    let points = par::map(values, |&v| -> Result<SweepPoint> {
        let mut c = base.clone();
        axis.apply(&mut c, v)?;
        Ok(SweepPoint {
            value: v,
            reports: run_experiment(&c)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    if let Some(out) = &cfg.out {
        write_atomic(&out.join("sweep.tsv"), sweep_tsv(&base.hash(), axis, &points).as_bytes())?;
    }
    Ok(points)
}

/// Built-in experiment recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    /// HypCluster on the synthetic population, swept over `q = 1..5`.
    ClusterSweep,
    /// Every algorithm on the synthetic population, swept over `m_k`.
    SampleSweep,
}

impl std::str::FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster-sweep" => Ok(Self::ClusterSweep),
            "sample-sweep" => Ok(Self::SampleSweep),
            _ => Err(Error::config("recipe", format!("unknown recipe `{s}`; valid: cluster-sweep, sample-sweep"))),
        }
    }
}

impl Recipe {
    pub fn config(self) -> ExperimentConfig {
        let algorithms = match self {
            Self::ClusterSweep => vec!["hypcluster".to_string()],
            Self::SampleSweep => ["local", "fedavg", "hypcluster", "finetune", "dapper", "mapper"].map(String::from).to_vec(),
        };
        let hyper = match self {
            Self::ClusterSweep => Hyper {
                rounds: 30,
                hypcluster: stage(1, 0.007),
                ..Hyper::default()
            },
            Self::SampleSweep => Hyper {
                mapper_rounds: Some(500),
                ..Hyper::default()
            },
        };
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            algorithms,
            hyper,
            seeds: (0..10).collect(),
            unseen_fraction: 0.0,
            deterministic: true,
            out: None,
        }
    }

    pub fn sweep(self) -> (SweepAxis, Vec<usize>) {
        match self {
            Self::ClusterSweep => (SweepAxis::Q, vec![1, 2, 3, 4, 5]),
            Self::SampleSweep => (SweepAxis::MK, vec![10, 30, 100, 300, 1000]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(algorithms: &[&str]) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                clients: 8,
                classes: 10,
                samples_per_client: 12,
            },
            algorithms: algorithms.iter().map(|s| s.to_string()).collect(),
            hyper: Hyper {
                rounds: 3,
                clients_per_round: 4,
                batch_size: 4,
                clusters: 2,
                restarts: 2,
                mapper_rounds: Some(4),
                lambda_grid: 4,
                ..Hyper::default()
            },
            seeds: vec![1, 2],
            unseen_fraction: 0.25,
            deterministic: true,
            out: None,
        }
    }

    #[test]
    fn algorithm_names() {
        assert_eq!(Algorithm::parse("dapper").unwrap().base, Base::FedAvg);
        let a = Algorithm::parse("hypcluster+mapper").unwrap();
        assert_eq!((a.base, a.personalize), (Base::HypCluster, Stage2::Mapper));
        let err = Algorithm::parse("kmeans").unwrap_err().to_string();
        assert!(err.contains("hypcluster") && err.contains("kmeans"));
        assert!(Algorithm::parse("local+dapper").is_err());
        assert!(Algorithm::parse("fedavg+hypcluster").is_err());
    }

    #[test]
    fn toml_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("algorithms = [\"fedavg\"]\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "bogus"), "{err:?}");
        let cfg = ExperimentConfig::from_toml("algorithms = [\"fedavg\"]\n[hyper]\nrounds = 0\n").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "hyper.rounds"));
    }

    #[test]
    fn every_algorithm_runs_on_seen_and_unseen_clients() {
        let all = [
            "local", "fedavg", "agnostic", "hypcluster", "finetune", "dapper", "mapper", "hypcluster+dapper", "hypcluster+mapper", "agnostic+finetune",
        ];
        let reports = run_experiment(&small(&all)).unwrap();
        assert_eq!(reports.len(), all.len() * 2 * 2);
        for r in &reports {
            let expected = if r.split == "seen" { 6 } else { 2 };
            assert_eq!(r.report.clients.len(), expected, "{} {}", r.algorithm, r.split);
            assert!(r.report.uniform_loss.is_finite());
        }
    }

    #[test]
    fn reruns_write_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(&["fedavg", "hypcluster+finetune"]);
        cfg.out = Some(dir.path().join("a"));
        run_experiment(&cfg).unwrap();
        cfg.out = Some(dir.path().join("b"));
        run_experiment(&cfg).unwrap();
        for f in ["summary.tsv", "seed-1/metrics.jsonl", "seed-2/models/hypcluster+finetune.bin", "config.toml"] {
            let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let header = std::fs::read_to_string(dir.path().join("a/seed-1/metrics.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
        assert_eq!(first["schema"], SCHEMA);
        assert_eq!(first["config_hash"], cfg.hash());
        assert_eq!(first["seed"], 1);
        assert_eq!(first["test_data"], cfg.dataset.test_data());
    }

    #[test]
    fn single_value_sweep_matches_plain_run() {
        let cfg = small(&["hypcluster"]);
        let points = sweep(&cfg, SweepAxis::Q, &[2]).unwrap();
        assert_eq!(points[0].reports, run_experiment(&cfg).unwrap());
        assert!(sweep(&cfg, SweepAxis::Q, &[]).is_err());
    }

    #[test]
    fn cluster_pool_needs_cluster_base() {
        let mut cfg = small(&["hypcluster+dapper"]);
        cfg.hyper.dapper_pool = DapperPool::Cluster;
        assert!(run_experiment(&cfg).is_ok());
        cfg.algorithms = vec!["dapper".into()];
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "hyper.dapper_pool"));
    }

    #[test]
    fn served_files_decode_to_equal_predictions() {
        let cfg = small(&["fedavg", "hypcluster", "finetune", "hypcluster+mapper"]);
        let algorithms = cfg.validate().unwrap();
        let out = run_seed(&cfg, &algorithms, 1).unwrap();
        let data = cfg.dataset.load(1).unwrap();
        for (name, served) in &out.served {
            let back = Served::decode(&served.encode()).unwrap();
            let a = served.evaluate(&data.test, &data.train).unwrap();
            let b = back.evaluate(&data.test, &data.train).unwrap();
            assert_eq!(a.clients, b.clients, "{name}");
        }
        assert!(Served::decode(b"junk").is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (s, u) = split_clients(10, 0.3, 4);
        assert_eq!((s.len(), u.len()), (7, 3));
        assert!(s.iter().all(|k| !u.contains(k)));
        assert_eq!(split_clients(10, 0.3, 4), (s, u));
        assert_eq!(split_clients(5, 0.0, 1).1.len(), 0);
    }
}
