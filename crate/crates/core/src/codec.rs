//! Little-endian binary layouts for trained models.
//!
//! Every file starts with a 4-byte magic and a `u32` version (1):
//!
//! ```text
//! model block:   u8 kind (0 categorical, 1 linear) | u32 feature_dim
//!                | u32 classes | u32 param_len | param_len x f64
//! "PFMD" file:   model block
//! "PFCS" file:   u32 q | q x model block | u64 n | n x (u64 id, u32 cluster)
//! "PFPM" file:   global model block | u64 n
//!                | n x (u64 id, f64 lambda, local model block)
//! ```

use std::collections::BTreeMap;

use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::hypcluster::ClusterState;
use crate::model::{Model, ModelKind};
use crate::modelinterp::{ClientPersonalization, PersonalizationMap};

const VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 4] = b"PFMD";
const CLUSTER_MAGIC: &[u8; 4] = b"PFCS";
const PMAP_MAGIC: &[u8; 4] = b"PFPM";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_model(out: &mut Vec<u8>, m: &Model) {
    let (kind, fd) = match m.kind() {
        ModelKind::CategoricalLogit => (0u8, 0),
        ModelKind::LinearSoftmax { feature_dim } => (1u8, feature_dim),
    };
    out.push(kind);
    put_u32(out, fd as u32);
    put_u32(out, m.num_classes() as u32);
    put_u32(out, m.params().len() as u32);
    for p in m.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self { bytes, pos: 0 };
        if r.take(4)? != magic {
            return Err(Error::invalid(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        let v = r.u32()?;
        if v != VERSION {
            return Err(Error::invalid(format!("unsupported version {v}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::invalid(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn model(&mut self) -> Result<Model> {
        let kind = match (self.u8()?, self.u32()? as usize) {
            (0, _) => ModelKind::CategoricalLogit,
            (1, feature_dim) => ModelKind::LinearSoftmax { feature_dim },
            (k, _) => return Err(Error::invalid(format!("unknown model kind {k}"))),
        };
        let classes = self.u32()? as usize;
        let n = self.u32()? as usize;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(Error::invalid("truncated parameter block"));
        }
        let params = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Model::from_params(kind, classes, params)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::invalid(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    put_u32(&mut out, VERSION);
    out
}

pub fn encode_model(m: &Model) -> Vec<u8> {
    let mut out = header(MODEL_MAGIC);
    put_model(&mut out, m);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes, MODEL_MAGIC)?;
    let m = r.model()?;
    r.finish()?;
    Ok(m)
}

pub fn encode_cluster_state(s: &ClusterState) -> Vec<u8> {
    let mut out = header(CLUSTER_MAGIC);
    put_u32(&mut out, s.models.len() as u32);
    for m in &s.models {
        put_model(&mut out, m);
    }
    put_u64(&mut out, s.assignment.len() as u64);
    for (id, &c) in &s.assignment {
        put_u64(&mut out, id.0);
        put_u32(&mut out, c as u32);
    }
    out
}

pub fn decode_cluster_state(bytes: &[u8]) -> Result<ClusterState> {
    let mut r = Reader::new(bytes, CLUSTER_MAGIC)?;
    let q = r.u32()? as usize;
    if q == 0 {
        return Err(Error::invalid("cluster state with no models"));
    }
    let models = (0..q).map(|_| r.model()).collect::<Result<Vec<_>>>()?;
    let n = r.u64()?;
    let mut assignment = BTreeMap::new();
    for _ in 0..n {
        let id = ClientId(r.u64()?);
        let c = r.u32()? as usize;
        if c >= q {
            return Err(Error::invalid(format!("client {id} assigned to cluster {c} of {q}")));
        }
        if assignment.insert(id, c).is_some() {
            return Err(Error::invalid(format!("client {id} assigned twice")));
        }
    }
    r.finish()?;
    Ok(ClusterState { models, assignment })
}

pub fn encode_personalization(p: &PersonalizationMap) -> Vec<u8> {
    let mut out = header(PMAP_MAGIC);
    put_model(&mut out, &p.global);
    put_u64(&mut out, p.clients.len() as u64);
    for c in &p.clients {
        put_u64(&mut out, c.id.0);
        out.extend_from_slice(&c.lambda.to_le_bytes());
        put_model(&mut out, &c.local);
    }
    out
}

pub fn decode_personalization(bytes: &[u8]) -> Result<PersonalizationMap> {
    let mut r = Reader::new(bytes, PMAP_MAGIC)?;
    let global = r.model()?;
    let n = r.u64()?;
    let mut clients = Vec::new();
    for _ in 0..n {
        let id = ClientId(r.u64()?);
        let lambda = r.f64()?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("client {id} has weight {lambda} outside [0, 1]")));
        }
        clients.push(ClientPersonalization { id, lambda, local: r.model()? });
    }
    r.finish()?;
    Ok(PersonalizationMap { global, clients })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_model() -> impl Strategy<Value = Model> {
        (2usize..5, prop::option::of(1usize..4)).prop_flat_map(|(d, fd)| {
            let kind = ModelKind::for_features(fd);
            prop::collection::vec(-50.0f64..50.0, kind.param_len(d))
                .prop_map(move |p| Model::from_params(kind, d, p).unwrap())
        })
    }

    proptest! {
        #[test]
        fn models_round_trip(m in arb_model()) {
            prop_assert_eq!(decode_model(&encode_model(&m)).unwrap(), m);
        }

        #[test]
        fn cluster_states_round_trip(m in arb_model(), ids in prop::collection::btree_set(0u64..1000, 0..10)) {
            let s = ClusterState {
                models: vec![m.clone(), m],
                assignment: ids.iter().map(|&i| (ClientId(i), (i % 2) as usize)).collect(),
            };
            prop_assert_eq!(decode_cluster_state(&encode_cluster_state(&s)).unwrap(), s);
        }

        #[test]
        fn personalization_round_trips(m in arb_model(), lambdas in prop::collection::vec(0.0f64..=1.0, 0..6)) {
            let p = PersonalizationMap {
                global: m.clone(),
                clients: lambdas
                    .iter()
                    .enumerate()
                    .map(|(i, &lambda)| ClientPersonalization { id: ClientId(i as u64), local: m.clone(), lambda })
                    .collect(),
            };
            prop_assert_eq!(decode_personalization(&encode_personalization(&p)).unwrap(), p);
        }

        #[test]
        fn truncated_inputs_are_rejected(m in arb_model(), cut in 0usize..64) {
            let bytes = encode_model(&m);
            let cut = cut.min(bytes.len() - 1);
            prop_assert!(decode_model(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn wrong_magic_and_bad_cluster_index() {
        let m = Model::zeros(ModelKind::CategoricalLogit, 3);
        assert!(decode_cluster_state(&encode_model(&m)).is_err());
        let s = ClusterState {
            models: vec![m],
            assignment: BTreeMap::from([(ClientId(4), 0)]),
        };
        let mut bytes = encode_cluster_state(&s);
        let n = bytes.len();
        bytes[n - 4] = 7;
        assert!(decode_cluster_state(&bytes).is_err());
    }
}
