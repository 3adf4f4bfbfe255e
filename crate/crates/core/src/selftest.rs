//! Seeded invariant checks over randomly generated instances, run by the
//! `perfed selftest` command. Each check reports pass/fail with the worst
//! observed violation.

use rand::Rng as _;

use crate::analysis::skewness;
use crate::baselines::project_to_simplex;
use crate::data::{ClientDataset, ClientId, Features, LabelSpace, Population};
use crate::datainterp::{dapper, default_lambda_grid, DapperConfig};
use crate::error::Result;
use crate::harness::{run_seed, Algorithm, DatasetSpec, ExperimentConfig, Hyper};
use crate::hypcluster::{assign_clusters, best_cluster, full_batch_em};
use crate::model::{empirical_loss, mixture_loss, InterpolationWeight, Loss, Model, ModelKind};
use crate::modelinterp::{select_lambda, LocalClass};
use crate::optim::{finite_diff_check, Budget, SgdConfig};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_model(rng: &mut Rng, kind: ModelKind, classes: usize) -> Result<Model> {
    let params = (0..kind.param_len(classes)).map(|_| rng.random_range(-2.0..2.0)).collect();
    Model::from_params(kind, classes, params)
}

fn random_population(rng: &mut Rng, clients: usize, classes: usize, features: Option<usize>) -> Result<Population> {
    let space = LabelSpace::new(classes)?;
    let list = (0..clients as u64)
        .map(|k| {
            let n = rng.random_range(3..12);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let feats = match features {
                Some(f) => Some(Features::new(f, (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect())?),
                None => None,
            };
            ClientDataset::new(ClientId(k), labels, feats, space)
        })
        .collect::<Result<Vec<_>>>()?;
    Population::new(space, list)
}

fn simplex(rng: &mut Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..8);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = project_to_simplex(&v);
        let sum: f64 = p.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        worst = worst.max(-p.iter().copied().fold(0.0, f64::min));
        let again = project_to_simplex(&p);
        worst = worst.max(again.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok((worst <= 1e-12, format!("max violation {worst:.2e}")))
}

fn gradients(rng: &mut Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let classes = rng.random_range(2..6);
        let fd = if i % 2 == 0 { None } else { Some(rng.random_range(1..4)) };
        let pop = random_population(rng, 1, classes, fd)?;
        let model = random_model(rng, ModelKind::for_features(fd), classes)?;
        let batch: Vec<_> = pop.clients()[0].examples().collect();
        worst = worst.max(finite_diff_check(&model, &batch, 1e-5)?);
    }
    Ok((worst <= 1e-6, format!("max gap {worst:.2e} over 100 instances")))
}

fn em_monotone(rng: &mut Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let classes = rng.random_range(2..5);
        let clients = rng.random_range(2..7);
        let pop = random_population(rng, clients, classes, None)?;
        let init = (0..2).map(|_| random_model(rng, ModelKind::CategoricalLogit, classes)).collect::<Result<_>>()?;
        let out = full_batch_em(init, &pop, 50)?;
        for w in out.objectives.windows(2) {
            worst = worst.max(w[1] - w[0]);
        }
    }
    Ok((worst <= 1e-12, format!("max increase {worst:.2e}")))
}

fn assignment_argmin(rng: &mut Rng) -> Result<(bool, String)> {
    for _ in 0..30 {
        let classes = rng.random_range(2..5);
        let pop = random_population(rng, 5, classes, None)?;
        let models: Vec<Model> = (0..3).map(|_| random_model(rng, ModelKind::CategoricalLogit, classes)).collect::<Result<_>>()?;
        let assignment = assign_clusters(&models, pop.clients())?;
        for (c, &a) in pop.clients().iter().zip(&assignment) {
            let chosen = empirical_loss(&models[a], c, Loss::CrossEntropy)?;
            let (_, best) = best_cluster(&models, c)?;
            if chosen > best {
                return Ok((false, format!("client {} assigned a non-minimal cluster", c.id())));
            }
        }
    }
    Ok((true, "30 instances".into()))
}

fn skewness_minimum(rng: &mut Rng) -> Result<(bool, String)> {
    for _ in 0..100 {
        let n = rng.random_range(1..6);
        let f = project_to_simplex(&(0..n).map(|_| rng.random_range(0.1..1.0)).collect::<Vec<_>>());
        if f.iter().any(|&x| x <= 0.0) {
            continue;
        }
        let at_m = skewness(&f, &f)?;
        let other = project_to_simplex(&(0..n).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>());
        if (at_m - 1.0).abs() > 1e-12 || skewness(&other, &f)? < at_m - 1e-12 {
            return Ok((false, format!("skewness below 1 away from the sample fractions {f:?}")));
        }
    }
    Ok((true, "100 instances".into()))
}

fn mixture_affinity(rng: &mut Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let classes = rng.random_range(2..5);
        let pop = random_population(rng, 2, classes, None)?;
        let m = random_model(rng, ModelKind::CategoricalLogit, classes)?;
        let (a, b) = (&pop.clients()[0], &pop.clients()[1]);
        let (l0, l1) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let at = |l: f64| mixture_loss(&m, a, b, InterpolationWeight::new(l)?);
        let mid = at(0.5 * (l0 + l1))?;
        worst = worst.max((mid - 0.5 * (at(l0)? + at(l1)?)).abs());
    }
    Ok((worst <= 1e-12, format!("max midpoint gap {worst:.2e}")))
}

fn grid_argmins(rng: &mut Rng) -> Result<(bool, String)> {
    for i in 0..10 {
        let classes = rng.random_range(2..5);
        let pop = random_population(rng, 4, classes, None)?;
        let h_c = random_model(rng, ModelKind::CategoricalLogit, classes)?;
        let client = &pop.clients()[0];
        let sgd = SgdConfig::new(0.1, Budget::Epochs(3)).with_seed(i);
        let choice = select_lambda(&h_c, client, &default_lambda_grid(), &sgd, LocalClass::Full)?;
        if choice.grid_losses.iter().any(|&l| l < choice.loss) {
            return Ok((false, "select_lambda missed the grid minimum".into()));
        }
        let pool: Vec<&ClientDataset> = pop.clients()[1..].iter().collect();
        let cfg = DapperConfig {
            r: 2,
            seed: i,
            ..DapperConfig::default()
        };
        let out = dapper(&h_c, client, &pool, &cfg)?;
        let min = out.candidates.iter().map(|c| c.selection_loss).fold(f64::INFINITY, f64::min);
        let chosen = out.candidates.iter().find(|c| c.lambda == out.lambda).map(|c| c.selection_loss);
        if chosen != Some(min) {
            return Ok((false, "dapper missed the grid minimum".into()));
        }
    }
    Ok((true, "10 instances".into()))
}

fn determinism(seed: u64) -> Result<(bool, String)> {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Synthetic {
            clients: 6,
            classes: 8,
            samples_per_client: 10,
        },
        algorithms: vec!["hypcluster+dapper".into(), "mapper".into()],
        hyper: Hyper {
            rounds: 3,
            clients_per_round: 3,
            clusters: 2,
            restarts: 2,
            mapper_rounds: Some(6),
            lambda_grid: 4,
            ..Hyper::default()
        },
        seeds: vec![seed],
        unseen_fraction: 0.0,
        deterministic: true,
        out: None,
    };
    let algorithms: Vec<Algorithm> = cfg.validate()?;
    let bytes = || -> Result<Vec<Vec<u8>>> { Ok(run_seed(&cfg, &algorithms, seed)?.served.iter().map(|(_, s)| s.encode()).collect()) };
    let first = bytes()?;
    let same = first == bytes()?;
    #[cfg(feature = "parallel")]
    let same = same && {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| crate::error::Error::invalid(e.to_string()))?;
        pool.install(bytes)? == first
    };
    Ok((same, "repeated and single-threaded runs compared byte for byte".into()))
}

/// Runs every check; instances are drawn from streams keyed by `seed`.
pub fn run(seed: u64) -> Vec<CheckResult> {
    let r = |i: u64| rng::stream(seed, &[rng::tag::EXPERIMENT, u64::MAX, i]);
    vec![
        check("simplex projection", simplex(&mut r(0))),
        check("gradient vs finite differences", gradients(&mut r(1))),
        check("full-batch EM monotone", em_monotone(&mut r(2))),
        check("cluster assignment argmin", assignment_argmin(&mut r(3))),
        check("skewness minimum at sample fractions", skewness_minimum(&mut r(4))),
        check("mixture loss affine in weight", mixture_affinity(&mut r(5))),
        check("interpolation grid argmin", grid_argmins(&mut r(6))),
        check("determinism", determinism(seed)),
    ]
}
