//! Server roles as message-driven state machines, independent of transport.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{apply_behavior, compute_intersection, validate_intersection, EncryptedId, GroupIndex, ServerBehavior};
use crate::error::{Error, Result};
use crate::wire::{Frame, Message, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Destination {
    Parties,
    Computation,
    Validation,
}

pub trait ServerHandler: Send {
    fn role(&self) -> Role;

    /// Consumes one inbound frame and returns the frames it triggers.
    fn handle(&mut self, frame: Frame) -> Result<Vec<(Destination, Frame)>>;
}

#[derive(Default)]
struct PendingIntersection {
    expected: Option<u32>,
    sets: BTreeMap<u32, Vec<EncryptedId>>,
}

/// Intersects the parties' tag sets; forwards the intersection to the
/// validator and its size to the parties.
pub struct ComputationServer {
    behavior: ServerBehavior,
    rng: ChaCha8Rng,
    pending: HashMap<u64, PendingIntersection>,
}

impl ComputationServer {
    pub fn new(behavior: ServerBehavior, seed: u64) -> Self {
        Self { behavior, rng: ChaCha8Rng::seed_from_u64(seed), pending: HashMap::new() }
    }

    pub fn honest() -> Self {
        Self::new(ServerBehavior::Honest, 0)
    }

    pub fn behavior(&self) -> ServerBehavior {
        self.behavior
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    fn try_complete(&mut self, query_id: u64) -> Result<Vec<(Destination, Frame)>> {
        let ready = self
            .pending
            .get(&query_id)
            .is_some_and(|p| p.expected.is_some_and(|e| p.sets.len() as u32 >= e));
        if !ready {
            return Ok(Vec::new());
        }
        let pending = self.pending.remove(&query_id).unwrap();
        let sets: Vec<&[EncryptedId]> = pending.sets.values().map(Vec::as_slice).collect();
        let (honest, _) = compute_intersection(&sets)?;
        let (forwarded, n_c) = apply_behavior(self.behavior, honest, &mut self.rng);
        Ok(vec![
            (Destination::Validation, Frame::new(query_id, Message::Intersection { ids: forwarded })),
            (Destination::Parties, Frame::new(query_id, Message::ComputedCount { n_c })),
        ])
    }
}

impl ServerHandler for ComputationServer {
    fn role(&self) -> Role {
        Role::Computation
    }

    fn handle(&mut self, frame: Frame) -> Result<Vec<(Destination, Frame)>> {
        let query_id = frame.query_id;
        match frame.message {
            Message::Open { participants, .. } => {
                let pending = self.pending.entry(query_id).or_default();
                if pending.expected.replace(participants).is_some() {
                    return Err(Error::Protocol(format!("query {query_id} opened twice")));
                }
            }
            Message::SubmitIds { party, ids } => {
                let pending = self.pending.entry(query_id).or_default();
                if pending.sets.insert(party, ids).is_some() {
                    return Err(Error::Protocol(format!("party {party} submitted twice to query {query_id}")));
                }
            }
            other => {
                return Err(Error::Protocol(format!("computation server cannot handle {other:?}")));
            }
        }
        self.try_complete(query_id)
    }
}

#[derive(Default)]
struct PendingValidation {
    expected: Option<u32>,
    q: u32,
    groupings_from: BTreeSet<u32>,
    index: GroupIndex,
    intersection: Option<Vec<EncryptedId>>,
}

/// Checks that the forwarded intersection consists of whole `q`-groups.
#[derive(Default)]
pub struct ValidationServer {
    pending: HashMap<u64, PendingValidation>,
}

impl ValidationServer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    fn try_complete(&mut self, query_id: u64) -> Vec<(Destination, Frame)> {
        let ready = self.pending.get(&query_id).is_some_and(|p| {
            p.intersection.is_some() && p.expected.is_some_and(|e| p.groupings_from.len() as u32 >= e)
        });
        if !ready {
            return Vec::new();
        }
        let pending = self.pending.remove(&query_id).unwrap();
        let n_v = validate_intersection(pending.intersection.as_deref().unwrap(), &pending.index, pending.q);
        vec![(Destination::Parties, Frame::new(query_id, Message::ValidatedCount { n_v }))]
    }
}

impl ServerHandler for ValidationServer {
    fn role(&self) -> Role {
        Role::Validation
    }

    fn handle(&mut self, frame: Frame) -> Result<Vec<(Destination, Frame)>> {
        let query_id = frame.query_id;
        let pending = self.pending.entry(query_id).or_default();
        match frame.message {
            Message::Open { participants, q } => {
                if pending.expected.replace(participants).is_some() {
                    return Err(Error::Protocol(format!("query {query_id} opened twice")));
                }
                pending.q = q;
            }
            Message::SubmitGroups { party, groups } => {
                if !pending.groupings_from.insert(party) {
                    return Err(Error::Protocol(format!("party {party} sent groups twice for query {query_id}")));
                }
                pending.index.merge(&groups);
            }
            Message::Intersection { ids } => {
                if pending.intersection.replace(ids).is_some() {
                    return Err(Error::Protocol(format!("two intersections for query {query_id}")));
                }
            }
            other => {
                return Err(Error::Protocol(format!("validation server cannot handle {other:?}")));
            }
        }
        Ok(self.try_complete(query_id))
    }
}
