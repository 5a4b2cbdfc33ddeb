//! Dual-server-aided multi-party PSI cardinality.
//!
//! Parties tag every targeted sample `q` times with a keyed digest, mix in
//! `n_r` adversarial samples that all parties derive identically for the
//! query, and send the flat tag set to the computation server. The
//! validation server learns, through group tokens under a second key, which
//! `q` tags belong together. The computation server intersects the tag sets
//! and reports `n_c`; the validation server checks that the intersection
//! splits into whole groups of `q` and reports `n_v` (or `-1`). Parties
//! accept `n_c / q - n_r` only when both reports agree and respect the
//! adversarial floor.

mod adversary;
mod server;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infotheory::{column_of, ValueAssignment};
use crate::tabular::PartyData;

pub use adversary::{apply_behavior, ServerBehavior};
pub use server::{ComputationServer, Destination, ServerHandler, ValidationServer};

const ID_CONTEXT: &str = "fedvalue psi 2024-01 encrypted sample id";
const GROUP_CONTEXT: &str = "fedvalue psi 2024-01 validation group token";
const ADVERSARIAL_CONTEXT: &str = "fedvalue psi 2024-01 adversarial sample seed";
const NR_CONTEXT: &str = "fedvalue psi 2024-01 adversarial sample count";

/// A 32-byte keyed tag standing in for one copy of one sample id.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EncryptedId(pub [u8; 32]);

/// The validation server's handle for "these `q` tags are one sample".
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupToken(pub [u8; 32]);

impl fmt::Debug for EncryptedId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncryptedId({})", short_hex(&self.0))
    }
}

impl fmt::Debug for GroupToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupToken({})", short_hex(&self.0))
    }
}

fn short_hex(bytes: &[u8]) -> String {
    bytes[..6].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsiConfig {
    /// Tags per sample id.
    pub q: u32,
    /// Bounds of the per-query adversarial sample count `n_r`.
    pub nr_min: u32,
    pub nr_max: u32,
    /// Known to all parties, never to the servers.
    pub shared_key: Vec<u8>,
    /// Known to the parties and the validation server.
    pub group_key: Vec<u8>,
}

impl fmt::Debug for PsiConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PsiConfig")
            .field("q", &self.q)
            .field("nr_min", &self.nr_min)
            .field("nr_max", &self.nr_max)
            .finish_non_exhaustive()
    }
}

impl PsiConfig {
    pub fn new(q: u32, nr_min: u32, nr_max: u32, shared_key: &[u8], group_key: &[u8]) -> Result<Self> {
        let config = Self { q, nr_min, nr_max, shared_key: shared_key.to_vec(), group_key: group_key.to_vec() };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::Domain("q must be at least 1".into()));
        }
        if self.nr_min > self.nr_max {
            return Err(Error::Domain(format!("n_r range [{}, {}] is empty", self.nr_min, self.nr_max)));
        }
        if self.shared_key.is_empty() || self.group_key.is_empty() {
            return Err(Error::Domain("keys must be non-empty".into()));
        }
        if self.shared_key == self.group_key {
            return Err(Error::Domain("shared key and group key must differ".into()));
        }
        Ok(())
    }

    /// The query's adversarial sample count, uniform over `[nr_min, nr_max]`
    /// and derivable by every party without communication.
    pub fn draw_n_r(&self, query_id: u64) -> u32 {
        let span = u64::from(self.nr_max - self.nr_min) + 1;
        let key = blake3::derive_key(NR_CONTEXT, &self.shared_key);
        let digest = blake3::keyed_hash(&key, &query_id.to_be_bytes());
        let word = u64::from_be_bytes(digest.as_bytes()[..8].try_into().unwrap());
        self.nr_min + (word % span) as u32
    }
}

/// Keyed tagger for `(sample_id, copy_index)` pairs.
#[derive(Clone)]
pub struct IdEncryptor {
    key: [u8; 32],
}

impl IdEncryptor {
    pub fn new(shared_key: &[u8]) -> Self {
        Self { key: blake3::derive_key(ID_CONTEXT, shared_key) }
    }

    pub fn encrypt(&self, sample_id: &str, copy_index: u32) -> EncryptedId {
        let mut hasher = blake3::Hasher::new_keyed(&self.key);
        hasher.update(&(sample_id.len() as u64).to_be_bytes());
        hasher.update(sample_id.as_bytes());
        hasher.update(&copy_index.to_be_bytes());
        EncryptedId(*hasher.finalize().as_bytes())
    }
}

/// Tags copy `copy_index` (1-based) of `sample_id` under `shared_key`.
pub fn encrypt_id(sample_id: &str, copy_index: u32, shared_key: &[u8]) -> EncryptedId {
    IdEncryptor::new(shared_key).encrypt(sample_id, copy_index)
}

#[derive(Clone)]
pub struct GroupTokenizer {
    key: [u8; 32],
}

impl GroupTokenizer {
    pub fn new(group_key: &[u8]) -> Self {
        Self { key: blake3::derive_key(GROUP_CONTEXT, group_key) }
    }

    pub fn token(&self, sample_id: &str) -> GroupToken {
        let mut hasher = blake3::Hasher::new_keyed(&self.key);
        hasher.update(&(sample_id.len() as u64).to_be_bytes());
        hasher.update(sample_id.as_bytes());
        GroupToken(*hasher.finalize().as_bytes())
    }
}

/// The `index`-th (1-based) adversarial sample id of a query. Every party
/// holding `shared_key` derives the same list.
pub fn adversarial_id(shared_key: &[u8], query_id: u64, index: u32) -> String {
    let key = blake3::derive_key(ADVERSARIAL_CONTEXT, shared_key);
    let mut hasher = blake3::Hasher::new_keyed(&key);
    hasher.update(&query_id.to_be_bytes());
    hasher.update(&index.to_be_bytes());
    let hex = hasher.finalize().to_hex();
    format!("adv-{}", &hex[..32])
}

/// One intersection-cardinality request: the joint value every participant
/// filters its own samples on, plus the protocol parameters for this query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountQuery {
    pub query_id: u64,
    pub selection: ValueAssignment,
    pub config: PsiConfig,
    pub n_r: u32,
}

impl CountQuery {
    pub fn new(query_id: u64, selection: ValueAssignment, config: &PsiConfig) -> Self {
        let n_r = config.draw_n_r(query_id);
        Self { query_id, selection, config: config.clone(), n_r }
    }
}

/// What a party sends: flat tags to the computation server and the tag
/// grouping to the validation server.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdSubmission {
    pub flat_set: Vec<EncryptedId>,
    pub grouping: Vec<(GroupToken, Vec<EncryptedId>)>,
}

/// Rows of `party` whose values match the party's share of `selection`.
pub fn matching_rows(party: &PartyData, selection: &ValueAssignment) -> Result<Vec<usize>> {
    let mut filters = Vec::with_capacity(selection.entries().len());
    for &(var, code) in selection.entries() {
        if var.party != party.party_id() {
            return Err(Error::Selection(format!(
                "party {} cannot filter on {var}, which it does not hold",
                party.party_id()
            )));
        }
        filters.push((column_of(party, var)?, code));
    }
    Ok((0..party.sample_ids().len())
        .filter(|&row| filters.iter().all(|(column, code)| column[row] == *code))
        .collect())
}

/// Builds a party's submission for `query`, filtering on `selection`.
pub fn prepare_submission(party: &PartyData, selection: &ValueAssignment, query: &CountQuery) -> Result<IdSubmission> {
    PartyNode::new(party.clone(), &query.config).prepare(selection, query)
}

/// A party's long-lived protocol state: its data and its precomputed tags.
pub struct PartyNode {
    data: PartyData,
    q: u32,
    encryptor: IdEncryptor,
    tokenizer: GroupTokenizer,
    shared_key: Vec<u8>,
    row_tags: Vec<Vec<EncryptedId>>,
    row_tokens: Vec<GroupToken>,
}

impl PartyNode {
    pub fn new(data: PartyData, config: &PsiConfig) -> Self {
        let encryptor = IdEncryptor::new(&config.shared_key);
        let tokenizer = GroupTokenizer::new(&config.group_key);
        let row_tags = data
            .sample_ids()
            .iter()
            .map(|id| (1..=config.q).map(|k| encryptor.encrypt(id, k)).collect())
            .collect();
        let row_tokens = data.sample_ids().iter().map(|id| tokenizer.token(id)).collect();
        Self {
            data,
            q: config.q,
            encryptor,
            tokenizer,
            shared_key: config.shared_key.clone(),
            row_tags,
            row_tokens,
        }
    }

    pub fn data(&self) -> &PartyData {
        &self.data
    }

    pub fn matching_rows(&self, selection: &ValueAssignment) -> Result<Vec<usize>> {
        matching_rows(&self.data, selection)
    }

    pub fn prepare(&self, selection: &ValueAssignment, query: &CountQuery) -> Result<IdSubmission> {
        if query.config.q != self.q || query.config.shared_key != self.shared_key {
            return Err(Error::Protocol("query parameters differ from the party's agreed configuration".into()));
        }
        let rows = self.matching_rows(selection)?;
        self.submission_for_rows(&rows, query)
    }

    pub(crate) fn submission_for_rows(&self, rows: &[usize], query: &CountQuery) -> Result<IdSubmission> {
        let q = self.q as usize;
        let total = rows.len() + query.n_r as usize;
        let mut flat_set = Vec::with_capacity(total * q);
        let mut grouping = Vec::with_capacity(total);
        for &row in rows {
            flat_set.extend_from_slice(&self.row_tags[row]);
            grouping.push((self.row_tokens[row], self.row_tags[row].clone()));
        }
        for index in 1..=query.n_r {
            let id = adversarial_id(&self.shared_key, query.query_id, index);
            let tags: Vec<EncryptedId> = (1..=self.q).map(|k| self.encryptor.encrypt(&id, k)).collect();
            flat_set.extend_from_slice(&tags);
            grouping.push((self.tokenizer.token(&id), tags));
        }
        flat_set.sort_unstable();
        grouping.sort_unstable();
        Ok(IdSubmission { flat_set, grouping })
    }
}

/// Exact intersection of the submitted tag sets, and its size `n_c`.
pub fn compute_intersection(submissions: &[&[EncryptedId]]) -> Result<(Vec<EncryptedId>, usize)> {
    if submissions.len() < 2 {
        return Err(Error::Protocol(format!("intersection needs at least 2 sets, got {}", submissions.len())));
    }
    let mut sets: Vec<Vec<EncryptedId>> = submissions
        .iter()
        .map(|s| {
            let mut v = s.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    sets.sort_by_key(Vec::len);
    let mut acc = sets[0].clone();
    for other in &sets[1..] {
        acc = intersect_sorted(&acc, other);
        if acc.is_empty() {
            break;
        }
    }
    let n = acc.len();
    Ok((acc, n))
}

fn intersect_sorted(a: &[EncryptedId], b: &[EncryptedId]) -> Vec<EncryptedId> {
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// The validation server's merged view of all parties' groupings.
#[derive(Clone, Debug, Default)]
pub struct GroupIndex {
    by_tag: HashMap<EncryptedId, GroupToken>,
}

impl GroupIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn merge(&mut self, grouping: &[(GroupToken, Vec<EncryptedId>)]) {
        for (token, tags) in grouping {
            for tag in tags {
                self.by_tag.entry(*tag).or_insert(*token);
            }
        }
    }

    pub fn group_of(&self, tag: &EncryptedId) -> Option<GroupToken> {
        self.by_tag.get(tag).copied()
    }

    pub fn len(&self) -> usize {
        self.by_tag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_tag.is_empty()
    }
}

/// Returns `|inter|` when `inter` splits exactly into whole groups of `q`
/// known tags, and `-1` otherwise.
pub fn validate_intersection(inter: &[EncryptedId], groups: &GroupIndex, q: u32) -> i64 {
    if q == 0 {
        return -1;
    }
    let mut seen = HashSet::with_capacity(inter.len());
    let mut sizes: HashMap<GroupToken, u32> = HashMap::new();
    for tag in inter {
        if !seen.insert(*tag) {
            return -1;
        }
        match groups.group_of(tag) {
            Some(token) => *sizes.entry(token).or_insert(0) += 1,
            None => return -1,
        }
    }
    if sizes.values().all(|&size| size == q) {
        inter.len() as i64
    } else {
        -1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Verified(u64),
    ServerMisbehavior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountResult {
    pub n_c: i64,
    pub n_v: i64,
    pub verdict: Verdict,
}

impl CountResult {
    pub fn cardinality(&self) -> Option<u64> {
        match self.verdict {
            Verdict::Verified(c) => Some(c),
            Verdict::ServerMisbehavior => None,
        }
    }
}

/// Accepts `n_c / q - n_r` iff the two server reports agree, `q` divides
/// `n_c` and the adversarial floor `n_c / q >= n_r` holds.
pub fn verify_result(n_c: i64, n_v: i64, q: u32, n_r: u32) -> CountResult {
    let q = i64::from(q);
    let ok = q > 0 && n_c >= 0 && n_c == n_v && n_c % q == 0 && n_c / q >= i64::from(n_r);
    let verdict = if ok {
        Verdict::Verified((n_c / q - i64::from(n_r)) as u64)
    } else {
        Verdict::ServerMisbehavior
    };
    CountResult { n_c, n_v, verdict }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infotheory::Var;
    use crate::tabular::{CategoricalTable, LabelColumn};

    fn config(q: u32, n_r: u32) -> PsiConfig {
        PsiConfig::new(q, n_r, n_r, b"parties-only", b"parties-and-validator").unwrap()
    }

    fn party(id: u32, ids: &[&str], codes: &[u32]) -> PartyData {
        let table = CategoricalTable::new(
            ids.iter().map(|s| s.to_string()).collect(),
            vec!["c".into()],
            vec![codes.to_vec()],
            vec![2],
        )
        .unwrap();
        if id == 0 {
            PartyData::task(0, table, LabelColumn { name: "y".into(), codes: vec![0; ids.len()], arity: 1 }).unwrap()
        } else {
            PartyData::data(id, table)
        }
    }

    fn select(id: u32, code: u32) -> ValueAssignment {
        ValueAssignment::new(vec![(Var::feature(id, 0), code)]).unwrap()
    }

    #[test]
    fn tags_are_deterministic_and_separated() {
        let key = b"k1";
        assert_eq!(encrypt_id("s1", 1, key), encrypt_id("s1", 1, key));
        assert_ne!(encrypt_id("s1", 1, key), encrypt_id("s1", 2, key));
        assert_ne!(encrypt_id("s1", 1, key), encrypt_id("s1", 1, b"k2"));
        assert_ne!(encrypt_id("s1", 1, key), encrypt_id("s2", 1, key));
    }

    #[test]
    fn config_validation() {
        assert!(PsiConfig::new(0, 0, 0, b"a", b"b").is_err());
        assert!(PsiConfig::new(1, 3, 2, b"a", b"b").is_err());
        assert!(PsiConfig::new(1, 0, 0, b"", b"b").is_err());
        assert!(PsiConfig::new(1, 0, 0, b"a", b"a").is_err());
        let c = PsiConfig::new(2, 3, 9, b"a", b"b").unwrap();
        for qid in 0..200 {
            assert!((3..=9).contains(&c.draw_n_r(qid)));
        }
        assert!(!format!("{c:?}").contains("shared_key"));
    }

    #[test]
    fn submission_sizes() {
        let p = party(1, &["s1", "s2", "s3"], &[0, 1, 1]);
        let query = CountQuery { query_id: 1, selection: select(1, 1), config: config(2, 1), n_r: 1 };
        let sub = prepare_submission(&p, &select(1, 1), &query).unwrap();
        assert_eq!(sub.flat_set.len(), 6);
        assert_eq!(sub.grouping.len(), 3);
        assert!(sub.grouping.iter().all(|(_, g)| g.len() == 2));
        let mut covered: Vec<EncryptedId> = sub.grouping.iter().flat_map(|(_, g)| g.clone()).collect();
        covered.sort_unstable();
        assert_eq!(covered, sub.flat_set);

        let query = CountQuery { n_r: 0, ..query };
        let sub = prepare_submission(&p, &select(1, 1), &query).unwrap();
        assert_eq!(sub.flat_set.len(), 4);
    }

    #[test]
    fn adversarial_tags_are_shared() {
        let a = party(1, &["s1", "s2"], &[0, 0]);
        let b = party(2, &["s1", "s2"], &[1, 1]);
        let query = CountQuery { query_id: 9, selection: select(1, 1), config: config(3, 2), n_r: 2 };
        let sa = prepare_submission(&a, &select(1, 1), &query).unwrap();
        let sb = prepare_submission(&b, &select(2, 0), &query).unwrap();
        // neither party matches any real row, so only the 2 x 3 adversarial tags remain
        assert_eq!(sa.flat_set, sb.flat_set);
        assert_eq!(sa.flat_set.len(), 6);
    }

    #[test]
    fn foreign_selection_is_rejected() {
        let p = party(1, &["s1"], &[0]);
        let query = CountQuery { query_id: 1, selection: select(2, 0), config: config(1, 0), n_r: 0 };
        assert!(matches!(prepare_submission(&p, &select(2, 0), &query), Err(Error::Selection(_))));
    }

    #[test]
    fn intersection_of_overlapping_parties() {
        // A holds {1,2,3}, B holds {2,3,4}; one shared adversarial id; q = 2
        let ids = ["1", "2", "3", "4"];
        let a = party(1, &ids, &[1, 1, 1, 0]);
        let b = party(2, &ids, &[0, 1, 1, 1]);
        let query = CountQuery { query_id: 4, selection: select(1, 1), config: config(2, 1), n_r: 1 };
        let sa = prepare_submission(&a, &select(1, 1), &query).unwrap();
        let sb = prepare_submission(&b, &select(2, 1), &query).unwrap();
        let (inter, n_c) = compute_intersection(&[&sa.flat_set, &sb.flat_set]).unwrap();
        // plaintext intersection {2, 3, adv} times q
        assert_eq!(n_c, 6);
        let mut index = GroupIndex::new();
        index.merge(&sa.grouping);
        index.merge(&sb.grouping);
        let n_v = validate_intersection(&inter, &index, 2);
        assert_eq!(n_v, 6);
        assert_eq!(verify_result(n_c as i64, n_v, 2, 1).verdict, Verdict::Verified(2));

        let mut dropped = inter.clone();
        dropped.pop();
        assert_eq!(validate_intersection(&dropped, &index, 2), -1);
        let mut padded = inter.clone();
        padded.push(EncryptedId([7; 32]));
        assert_eq!(validate_intersection(&padded, &index, 2), -1);
    }

    #[test]
    fn intersection_edge_cases() {
        let x = EncryptedId([1; 32]);
        assert!(compute_intersection(&[&[x]]).is_err());
        let set = [EncryptedId([1; 32]), EncryptedId([2; 32])];
        assert_eq!(compute_intersection(&[&set, &set]).unwrap().1, 2);
        assert_eq!(compute_intersection(&[&set, &[]]).unwrap().1, 0);
    }

    #[test]
    fn disjoint_real_ids_leave_adversarial_floor() {
        let ids = ["a", "b", "c", "d"];
        let a = party(1, &ids, &[1, 1, 0, 0]);
        let b = party(2, &ids, &[0, 0, 1, 1]);
        let query = CountQuery { query_id: 2, selection: select(1, 1), config: config(3, 2), n_r: 2 };
        let sa = prepare_submission(&a, &select(1, 1), &query).unwrap();
        let sb = prepare_submission(&b, &select(2, 1), &query).unwrap();
        assert_eq!(compute_intersection(&[&sa.flat_set, &sb.flat_set]).unwrap().1, 6);
    }

    #[test]
    fn verification_rules() {
        assert_eq!(verify_result(6, 6, 2, 1).verdict, Verdict::Verified(2));
        assert_eq!(verify_result(4, 6, 2, 1).verdict, Verdict::ServerMisbehavior);
        assert_eq!(verify_result(0, 0, 2, 1).verdict, Verdict::ServerMisbehavior);
        assert_eq!(verify_result(5, 5, 2, 1).verdict, Verdict::ServerMisbehavior);
        assert_eq!(verify_result(-1, -1, 2, 0).verdict, Verdict::ServerMisbehavior);
        assert_eq!(verify_result(0, 0, 2, 0).verdict, Verdict::Verified(0));
    }

    #[test]
    fn submissions_are_deterministic() {
        let p = party(1, &["s1", "s2", "s3"], &[0, 1, 1]);
        let query = CountQuery::new(17, select(1, 1), &config(3, 4));
        let a = prepare_submission(&p, &select(1, 1), &query).unwrap();
        let b = prepare_submission(&p, &select(1, 1), &query).unwrap();
        assert_eq!(a, b);
    }
}
