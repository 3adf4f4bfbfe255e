//! Synthetic client populations.
//!
//! Each generator returns a [`TrainTest`] pair whose test clients are
//! independent draws of the same size from the same per-client
//! distributions. Per-client randomness is keyed by `(seed, purpose,
//! client id)`, so a client's data does not depend on which other clients
//! are generated or in what order.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, ClientId, Features, LabelSpace, Population};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, tag, Rng};

/// Training and test views of the same clients (same ids, same order).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTest {
    pub train: Population,
    pub test: Population,
}

/// Mixture-of-components density population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clients: usize,
    pub classes: usize,
    pub samples_per_client: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clients: 100,
            classes: 50,
            samples_per_client: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::invalid("need at least one client"));
        }
        if self.classes < 5 {
            return Err(Error::invalid("need at least 5 classes"));
        }
        if self.samples_per_client == 0 {
            return Err(Error::invalid("need at least one sample per client"));
        }
        Ok(())
    }
}

/// Label distribution of client `k`: half its group component `k mod 4`,
/// a quarter uniform, a quarter its individual component `k mod (d - 4)`.
pub fn synthetic_client_distribution(k: u64, classes: usize) -> Vec<f64> {
    let mut p = vec![0.25 / classes as f64; classes];
    p[(k % 4) as usize] += 0.5;
    p[(k % (classes as u64 - 4)) as usize] += 0.25;
    p
}

fn draw_synthetic_label(rng: &mut Rng, k: u64, classes: usize) -> usize {
    let u: f64 = rng.random();
    if u < 0.5 {
        (k % 4) as usize
    } else if u < 0.75 {
        rng.random_range(0..classes)
    } else {
        (k % (classes as u64 - 4)) as usize
    }
}

fn build(space: LabelSpace, clients: Vec<ClientDataset>) -> Result<Population> {
    Population::new(space, clients)
}

/// Featureless population with the grouped mixture label distributions.
pub fn synthetic_population(spec: &SyntheticSpec) -> Result<TrainTest> {
    spec.validate()?;
    let space = LabelSpace::new(spec.classes)?;
    let make = |purpose: u64| -> Result<Population> {
        let clients = par::map_range(spec.clients, |k| {
            let k = k as u64;
            let mut rng = rng::stream(spec.seed, &[purpose, k]);
            let labels = (0..spec.samples_per_client)
                .map(|_| draw_synthetic_label(&mut rng, k, spec.classes))
                .collect();
            ClientDataset::from_labels(ClientId(k), labels, space)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        build(space, clients)
    };
    Ok(TrainTest {
        train: make(tag::TRAIN_DATA)?,
        test: make(tag::TEST_DATA)?,
    })
}

/// Two clients sharing a standard-normal feature marginal with opposite
/// threshold labelings: client 0 has `y = 1[x > 0]`, client 1 `y = 1[x < 0]`.
pub fn threshold_example_population(n_per_client: usize, seed: u64) -> Result<TrainTest> {
    if n_per_client == 0 {
        return Err(Error::invalid("need at least one sample per client"));
    }
    let space = LabelSpace::new(2)?;
    let make = |purpose: u64| -> Result<Population> {
        let clients = (0..2u64)
            .map(|k| {
                let mut rng = rng::stream(seed, &[purpose, k]);
                let xs: Vec<f64> = (0..n_per_client).map(|_| rng.sample(StandardNormal)).collect();
                let labels = xs
                    .iter()
                    .map(|&x| usize::from(if k == 0 { x > 0.0 } else { x < 0.0 }))
                    .collect();
                ClientDataset::new(ClientId(k), labels, Some(Features::new(1, xs)?), space)
            })
            .collect::<Result<Vec<_>>>()?;
        build(space, clients)
    };
    Ok(TrainTest {
        train: make(tag::TRAIN_DATA)?,
        test: make(tag::TEST_DATA)?,
    })
}

/// Featureless population alternating two sources: even clients always
/// emit label 1, odd clients emit uniform labels.
pub fn two_source_population(
    clients: usize,
    classes: usize,
    samples_per_client: usize,
    seed: u64,
) -> Result<TrainTest> {
    if clients == 0 || !clients.is_multiple_of(2) {
        return Err(Error::invalid("client count must be even and positive"));
    }
    if samples_per_client == 0 {
        return Err(Error::invalid("need at least one sample per client"));
    }
    let space = LabelSpace::new(classes)?;
    let make = |purpose: u64| -> Result<Population> {
        let list = (0..clients as u64)
            .map(|k| {
                let mut rng = rng::stream(seed, &[purpose, k]);
                let labels = (0..samples_per_client)
                    .map(|_| if k % 2 == 0 { 1 } else { rng.random_range(0..classes) })
                    .collect();
                ClientDataset::from_labels(ClientId(k), labels, space)
            })
            .collect::<Result<Vec<_>>>()?;
        build(space, list)
    };
    Ok(TrainTest {
        train: make(tag::TRAIN_DATA)?,
        test: make(tag::TEST_DATA)?,
    })
}

/// True label distribution of a two-source client.
pub fn two_source_client_distribution(k: u64, classes: usize) -> Vec<f64> {
    if k.is_multiple_of(2) {
        let mut p = vec![0.0; classes];
        p[1] = 1.0;
        p
    } else {
        vec![1.0 / classes as f64; classes]
    }
}
