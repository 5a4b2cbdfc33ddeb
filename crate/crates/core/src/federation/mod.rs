//! Federated Shapley-CMI: every joint count the valuation needs is obtained
//! as a verified PSI cardinality among the parties that hold its variables.

mod transport;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infotheory::{arity_of, check_alignment, CentralCounts, CountSource, CountTable, ValueAssignment, Var};
use crate::psi::{verify_result, CountQuery, CountResult, PartyNode, PsiConfig, ServerBehavior, Verdict};
use crate::shapley::{shapley, Game, Method, ShapleyReport};
use crate::tabular::{PartyData, PartyId};
use crate::wire::{Frame, Message};

pub use transport::{serve, spawn_local_servers, InProcessLink, LocalServers, ServerLink, ServerRole, TcpLink};

/// Protocol counters of a federated count source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederationStats {
    /// Joint count tables requested by the valuation.
    pub count_tables: u64,
    /// Cells enumerated across those tables.
    pub cells: u64,
    /// Full dual-server protocol rounds.
    pub psi_rounds: u64,
    /// Cells answered as zero because some party matched no samples.
    pub short_circuited: u64,
    /// Cells counted inside a single party without any protocol round.
    pub local_counts: u64,
    pub cache_hits: u64,
    pub bytes_to_servers: u64,
}

/// Count source backed by the dual-server PSI protocol.
///
/// The task party orchestrates: it enumerates the cells of each requested
/// table, asks every participating party to filter its own samples, and runs
/// one verified intersection per cell that no party has ruled out locally.
pub struct FederatedCounts {
    nodes: Vec<PartyNode>,
    config: PsiConfig,
    link: Mutex<Box<dyn ServerLink>>,
    cache: Mutex<HashMap<ValueAssignment, u64>>,
    stats: Mutex<FederationStats>,
    next_query: AtomicU64,
    n: u64,
}

impl FederatedCounts {
    pub fn new(parties: &[PartyData], config: PsiConfig, link: Box<dyn ServerLink>) -> Result<Self> {
        config.validate()?;
        check_alignment(parties)?;
        let n = parties.first().map_or(0, |p| p.sample_ids().len()) as u64;
        let nodes = parties.iter().map(|p| PartyNode::new(p.clone(), &config)).collect();
        Ok(Self {
            nodes,
            config,
            link: Mutex::new(link),
            cache: Mutex::new(HashMap::new()),
            stats: Mutex::new(FederationStats::default()),
            next_query: AtomicU64::new(1),
            n,
        })
    }

    pub fn config(&self) -> &PsiConfig {
        &self.config
    }

    pub fn stats(&self) -> FederationStats {
        let mut stats = *self.stats.lock().unwrap();
        stats.bytes_to_servers = self.link.lock().unwrap().bytes_to_servers();
        stats
    }

    /// Copy of the server-bound bytes, when the link records them.
    pub fn server_traffic(&self) -> Option<Vec<u8>> {
        self.link.lock().unwrap().server_traffic().map(<[u8]>::to_vec)
    }

    fn node(&self, party: PartyId) -> Result<&PartyNode> {
        self.nodes
            .iter()
            .find(|n| n.data().party_id() == party)
            .ok_or_else(|| Error::Schema(format!("unknown party {party}")))
    }

    pub fn next_query_id(&self) -> u64 {
        self.next_query.fetch_add(1, Ordering::Relaxed)
    }

    /// One end-to-end protocol round for `query`, without caching or
    /// short-circuiting.
    pub fn federated_count(&self, query: &CountQuery) -> Result<CountResult> {
        let parties = query.selection.parties();
        if parties.len() < 2 {
            return Err(Error::Protocol("a PSI round needs at least two parties".into()));
        }
        let mut submissions = Vec::with_capacity(parties.len());
        for &party in &parties {
            let node = self.node(party)?;
            submissions.push((party, node.prepare(&query.selection.for_party(party), query)?));
        }

        let qid = query.query_id;
        let mut link = self.link.lock().unwrap();
        let open = Frame::new(qid, Message::Open { participants: parties.len() as u32, q: query.config.q });
        link.send(ServerRole::Computation, &open)?;
        link.send(ServerRole::Validation, &open)?;
        for (party, submission) in submissions {
            link.send(ServerRole::Computation, &Frame::new(qid, Message::SubmitIds { party, ids: submission.flat_set }))?;
            link.send(
                ServerRole::Validation,
                &Frame::new(qid, Message::SubmitGroups { party, groups: submission.grouping }),
            )?;
        }
        let n_c = expect_count(link.recv(ServerRole::Computation)?, qid)?;
        let n_v = expect_count(link.recv(ServerRole::Validation)?, qid)?;
        drop(link);

        self.stats.lock().unwrap().psi_rounds += 1;
        Ok(verify_result(n_c, n_v, query.config.q, query.n_r))
    }

    /// Verified count of samples matching `selection`, served from cache
    /// when possible. Single-party selections are counted locally, and a
    /// cell any party rules out locally costs no protocol round.
    pub fn count_cell(&self, selection: &ValueAssignment) -> Result<u64> {
        if let Some(&count) = self.cache.lock().unwrap().get(selection) {
            self.stats.lock().unwrap().cache_hits += 1;
            return Ok(count);
        }
        let parties = selection.parties();
        let count = if parties.len() <= 1 {
            let local = match parties.first() {
                Some(&p) => self.node(p)?.matching_rows(selection)?.len() as u64,
                None => self.n,
            };
            self.stats.lock().unwrap().local_counts += 1;
            local
        } else {
            let mut empty = false;
            for &party in &parties {
                if self.node(party)?.matching_rows(&selection.for_party(party))?.is_empty() {
                    empty = true;
                    break;
                }
            }
            if empty {
                self.stats.lock().unwrap().short_circuited += 1;
                0
            } else {
                let query = CountQuery::new(self.next_query_id(), selection.clone(), &self.config);
                let result = self.federated_count(&query)?;
                match result.verdict {
                    Verdict::Verified(c) => c,
                    Verdict::ServerMisbehavior => {
                        return Err(Error::Misbehavior {
                            query_id: query.query_id,
                            detail: format!(
                                "n_c = {}, n_v = {} for {} parties",
                                result.n_c,
                                result.n_v,
                                parties.len()
                            ),
                        })
                    }
                }
            }
        };
        self.cache.lock().unwrap().insert(selection.clone(), count);
        Ok(count)
    }

    fn arity(&self, var: Var) -> Result<u32> {
        arity_of(self.node(var.party)?.data(), var)
    }
}

fn expect_count(frame: Frame, query_id: u64) -> Result<i64> {
    if frame.query_id != query_id {
        return Err(Error::Protocol(format!("expected a reply to query {query_id}, got {}", frame.query_id)));
    }
    match frame.message {
        Message::ComputedCount { n_c } => Ok(n_c),
        Message::ValidatedCount { n_v } => Ok(n_v),
        Message::Error { reason } => Err(Error::Protocol(format!("server error on query {query_id}: {reason}"))),
        other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
    }
}

impl CountSource for FederatedCounts {
    fn n_total(&self) -> u64 {
        self.n
    }

    /// Enumerates the cross-product of the variables' (public) arities.
    fn count_table(&self, vars: &[Var]) -> Result<CountTable> {
        let arities: Vec<u32> = vars.iter().map(|&v| self.arity(v)).collect::<Result<_>>()?;
        {
            let mut stats = self.stats.lock().unwrap();
            stats.count_tables += 1;
        }
        let mut cells = BTreeMap::new();
        let mut key = vec![0u32; vars.len()];
        loop {
            let selection = ValueAssignment::new(vars.iter().copied().zip(key.iter().copied()).collect())?;
            let count = self.count_cell(&selection)?;
            self.stats.lock().unwrap().cells += 1;
            if count > 0 {
                cells.insert(key.clone(), count);
            }
            // odometer increment, last variable fastest
            let mut pos = vars.len();
            loop {
                if pos == 0 {
                    return CountTable::new(vars.to_vec(), cells, self.n);
                }
                pos -= 1;
                key[pos] += 1;
                if key[pos] < arities[pos] {
                    break;
                }
                key[pos] = 0;
            }
        }
    }
}

/// Joint counts over `vars` obtained through the federation.
pub fn federated_count_table(source: &FederatedCounts, vars: &[Var]) -> Result<CountTable> {
    source.count_table(&crate::infotheory::canonical(vars))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Centralized,
    Federated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    /// Spawn both servers on loopback and talk to them over TCP.
    LocalTcp,
    Tcp { computation: String, validation: String },
}

#[derive(Clone, Debug)]
pub struct FederationOptions {
    pub psi: PsiConfig,
    pub behavior: ServerBehavior,
    pub transport: Transport,
    /// Seeds the adversary harness when `behavior` is not honest.
    pub seed: u64,
}

impl FederationOptions {
    pub fn link(&self) -> Result<Box<dyn ServerLink>> {
        Ok(match &self.transport {
            Transport::InProcess => Box::new(InProcessLink::new(self.behavior, self.seed)),
            Transport::LocalTcp => {
                let servers = spawn_local_servers(self.behavior, self.seed)?;
                Box::new(TcpLink::connect(servers.computation, servers.validation)?)
            }
            Transport::Tcp { computation, validation } => Box::new(TcpLink::connect(computation.as_str(), validation.as_str())?),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub setup_secs: f64,
    pub valuation_secs: f64,
}

impl Timings {
    pub fn total_secs(&self) -> f64 {
        self.setup_secs + self.valuation_secs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValuationRun {
    pub run_id: String,
    pub mode: Mode,
    pub method: Method,
    pub n_samples: u64,
    pub n_data_parties: usize,
    pub timings: Timings,
    pub stats: FederationStats,
}

fn run_id(mode: Mode, method: Method, parties: &[PartyData]) -> String {
    let mut hasher = blake3::Hasher::new();
    hasher.update(format!("{mode:?}/{method:?}").as_bytes());
    for party in parties {
        hasher.update(&party.party_id().to_be_bytes());
        for name in party.table().names() {
            hasher.update(name.as_bytes());
        }
        hasher.update(&(party.sample_ids().len() as u64).to_be_bytes());
    }
    format!("run-{}", &hasher.finalize().to_hex()[..16])
}

/// Values every data party against the task party, centrally or through the
/// federation. A detected misbehavior aborts the whole run.
pub fn run_valuation(
    task: &PartyData,
    data: &[PartyData],
    mode: Mode,
    method: Method,
    federation: Option<&FederationOptions>,
) -> Result<(ShapleyReport, ValuationRun)> {
    let started = Instant::now();
    let game = Game::new(task, data)?;
    let mut parties = Vec::with_capacity(data.len() + 1);
    parties.push(task.clone());
    parties.extend(data.iter().cloned());

    let (report, stats, setup_secs, valuation_secs) = match mode {
        Mode::Centralized => {
            let source = CentralCounts::new(&parties)?;
            let setup = started.elapsed().as_secs_f64();
            let t = Instant::now();
            let report = shapley(&game, &source, method)?;
            (report, FederationStats::default(), setup, t.elapsed().as_secs_f64())
        }
        Mode::Federated => {
            let options = federation.ok_or_else(|| Error::Protocol("federated mode needs PSI options".into()))?;
            let source = FederatedCounts::new(&parties, options.psi.clone(), options.link()?)?;
            let setup = started.elapsed().as_secs_f64();
            let t = Instant::now();
            let report = shapley(&game, &source, method)?;
            (report, source.stats(), setup, t.elapsed().as_secs_f64())
        }
    };

    let run = ValuationRun {
        run_id: run_id(mode, method, &parties),
        mode,
        method,
        n_samples: task.sample_ids().len() as u64,
        n_data_parties: data.len(),
        timings: Timings { setup_secs, valuation_secs },
        stats,
    };
    Ok((report, run))
}
