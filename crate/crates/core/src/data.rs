//! Clients, their labeled samples, and populations of clients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The label set `{0, .., num_classes - 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    num_classes: usize,
}

impl LabelSpace {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "label space needs at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self { num_classes })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn contains(&self, label: usize) -> bool {
        label < self.num_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u64);

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Row-major feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    dim: usize,
    values: Vec<f64>,
}

impl Features {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "feature buffer of length {} is not a multiple of dim {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        Ok(Self { dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged feature rows"));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// One labeled example borrowed from a dataset.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub label: usize,
    pub x: Option<&'a [f64]>,
}

/// One client's empirical sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    id: ClientId,
    labels: Vec<usize>,
    features: Option<Features>,
}

impl ClientDataset {
    pub fn new(
        id: ClientId,
        labels: Vec<usize>,
        features: Option<Features>,
        space: LabelSpace,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation {
                client: id.0,
                message: "client has no examples".into(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| !space.contains(y)) {
            return Err(Error::Validation {
                client: id.0,
                message: format!(
                    "label {bad} outside label space of {} classes",
                    space.num_classes()
                ),
            });
        }
        if let Some(f) = &features {
            if f.rows() != labels.len() {
                return Err(Error::Validation {
                    client: id.0,
                    message: format!(
                        "{} feature rows for {} labels",
                        f.rows(),
                        labels.len()
                    ),
                });
            }
        }
        Ok(Self {
            id,
            labels,
            features,
        })
    }

    /// Featureless dataset (density estimation).
    pub fn from_labels(id: ClientId, labels: Vec<usize>, space: LabelSpace) -> Result<Self> {
        Self::new(id, labels, None, space)
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> Option<&Features> {
        self.features.as_ref()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.as_ref().map(Features::dim)
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example {
            label: self.labels[i],
            x: self.features.as_ref().map(|f| f.row(i)),
        }
    }

    pub fn examples(&self) -> impl Iterator<Item = Example<'_>> + '_ {
        (0..self.count()).map(move |i| self.example(i))
    }

    pub fn label_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Dataset made of the rows `indices` (repetitions allowed).
    pub fn select(&self, id: ClientId, indices: &[usize]) -> ClientDataset {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let features = self.features.as_ref().map(|f| Features {
            dim: f.dim,
            values: indices.iter().flat_map(|&i| f.row(i).iter().copied()).collect(),
        });
        ClientDataset {
            id,
            labels,
            features,
        }
    }

    /// Concatenation of several datasets under a new id. Feature presence
    /// and dimension must agree.
    pub fn concat<'a>(
        id: ClientId,
        parts: impl IntoIterator<Item = &'a ClientDataset>,
    ) -> Result<ClientDataset> {
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut dim: Option<Option<usize>> = None;
        for part in parts {
            let this = part.feature_dim();
            match dim {
                None => dim = Some(this),
                Some(d) if d != this => {
                    return Err(Error::invalid("cannot concatenate datasets with different feature layouts"))
                }
                _ => {}
            }
            labels.extend_from_slice(&part.labels);
            if let Some(f) = &part.features {
                values.extend_from_slice(&f.values);
            }
        }
        if labels.is_empty() {
            return Err(Error::invalid("concatenation of no examples"));
        }
        let features = dim.flatten().map(|d| Features { dim: d, values });
        Ok(ClientDataset {
            id,
            labels,
            features,
        })
    }
}

/// How clients are weighted in population-level objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientWeighting {
    /// `m_k / m`.
    #[default]
    BySampleCount,
    /// `1 / p`.
    Uniform,
}

/// A collection of clients sharing one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    space: LabelSpace,
    clients: Vec<ClientDataset>,
    weights: Vec<f64>,
    total_count: usize,
}

impl Population {
    /// Population with sample-count weights `m_k / m`.
    pub fn new(space: LabelSpace, clients: Vec<ClientDataset>) -> Result<Self> {
        Self::with_weighting(space, clients, ClientWeighting::BySampleCount)
    }

    pub fn with_weighting(
        space: LabelSpace,
        clients: Vec<ClientDataset>,
        weighting: ClientWeighting,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("population has no clients"));
        }
        let mut ids: Vec<ClientId> = clients.iter().map(ClientDataset::id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate client id {}", w[0])));
        }
        let dim = clients[0].feature_dim();
        if let Some(c) = clients.iter().find(|c| c.feature_dim() != dim) {
            return Err(Error::Validation {
                client: c.id().0,
                message: "feature layout differs from the first client".into(),
            });
        }
        for c in &clients {
            if let Some(bad) = c.labels().iter().find(|&&y| !space.contains(y)) {
                return Err(Error::Validation {
                    client: c.id().0,
                    message: format!("label {bad} outside label space"),
                });
            }
        }
        let total_count: usize = clients.iter().map(ClientDataset::count).sum();
        let weights = match weighting {
            ClientWeighting::BySampleCount => clients
                .iter()
                .map(|c| c.count() as f64 / total_count as f64)
                .collect(),
            ClientWeighting::Uniform => vec![1.0 / clients.len() as f64; clients.len()],
        };
        Ok(Self {
            space,
            clients,
            weights,
            total_count,
        })
    }

    /// Replaces the client weights with an explicit simplex vector.
    pub fn reweighted(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.clients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.clients.len(),
                got: weights.len(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("client weights must lie in the simplex"));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn label_space(&self) -> LabelSpace {
        self.space
    }

    pub fn num_classes(&self) -> usize {
        self.space.num_classes()
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_count(&self) -> usize {
        self.total_count
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.clients[0].feature_dim()
    }

    pub fn position(&self, id: ClientId) -> Option<usize> {
        self.clients.iter().position(|c| c.id() == id)
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientDataset> {
        self.clients.iter().find(|c| c.id() == id)
    }

    /// Sub-population of the clients at `indices`, re-weighted by sample count.
    pub fn subset(&self, indices: &[usize]) -> Result<Population> {
        Population::new(
            self.space,
            indices.iter().map(|&i| self.clients[i].clone()).collect(),
        )
    }

    /// Pooled dataset of all clients.
    pub fn pooled(&self) -> ClientDataset {
        ClientDataset::concat(ClientId(u64::MAX), &self.clients)
            .expect("population is nonempty with a uniform feature layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> LabelSpace {
        LabelSpace::new(3).unwrap()
    }

    #[test]
    fn label_space_rejects_single_class() {
        assert!(LabelSpace::new(1).is_err());
        assert!(LabelSpace::new(2).is_ok());
    }

    #[test]
    fn dataset_validation() {
        assert!(ClientDataset::from_labels(ClientId(0), vec![], space()).is_err());
        let err = ClientDataset::from_labels(ClientId(9), vec![0, 3], space()).unwrap_err();
        assert!(matches!(err, Error::Validation { client: 9, .. }));
        let f = Features::new(2, vec![0.0; 2]).unwrap();
        assert!(ClientDataset::new(ClientId(0), vec![0, 1], Some(f), space()).is_err());
    }

    #[test]
    fn population_weights_and_totals() {
        let a = ClientDataset::from_labels(ClientId(0), vec![0, 1, 2], space()).unwrap();
        let b = ClientDataset::from_labels(ClientId(1), vec![2], space()).unwrap();
        let pop = Population::new(space(), vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(pop.total_count(), 4);
        assert_eq!(pop.weights(), &[0.75, 0.25]);
        let uni = Population::with_weighting(space(), vec![a.clone(), b], ClientWeighting::Uniform).unwrap();
        assert_eq!(uni.weights(), &[0.5, 0.5]);
        assert!(Population::new(space(), vec![a.clone(), a]).is_err());
    }

    #[test]
    fn concat_and_select() {
        let f1 = Features::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let f2 = Features::from_rows(&[vec![3.0]]).unwrap();
        let a = ClientDataset::new(ClientId(0), vec![0, 1], Some(f1), space()).unwrap();
        let b = ClientDataset::new(ClientId(1), vec![2], Some(f2), space()).unwrap();
        let c = ClientDataset::concat(ClientId(5), [&a, &b]).unwrap();
        assert_eq!(c.labels(), &[0, 1, 2]);
        assert_eq!(c.features().unwrap().values(), &[1.0, 2.0, 3.0]);
        let s = c.select(ClientId(6), &[2, 2, 0]);
        assert_eq!(s.labels(), &[2, 2, 0]);
        assert_eq!(s.example(1).x.unwrap(), &[3.0]);
        let bare = ClientDataset::from_labels(ClientId(2), vec![0], space()).unwrap();
        assert!(ClientDataset::concat(ClientId(7), [&a, &bare]).is_err());
    }
}
