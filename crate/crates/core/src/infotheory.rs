//! Exact joint counts and maximum-likelihood conditional mutual information
//! over categorical columns.
//!
//! Every CMI is evaluated from a single joint [`CountTable`]; the conditioning
//! marginals are obtained by summing that table, never by separate count
//! requests. This keeps the centralized and federated routes on exactly the
//! same arithmetic once their count tables agree.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{PartyData, PartyId};

/// Values within this distance below zero are rounding residue.
pub const CMI_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Column {
    Feature(u16),
    Label,
}

/// One categorical variable: a column of one party.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Var {
    pub party: PartyId,
    pub column: Column,
}

impl Var {
    pub fn feature(party: PartyId, index: usize) -> Self {
        Self { party, column: Column::Feature(index as u16) }
    }

    pub fn label(party: PartyId) -> Self {
        Self { party, column: Column::Label }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.column {
            Column::Feature(c) => write!(f, "p{}.f{}", self.party, c),
            Column::Label => write!(f, "p{}.label", self.party),
        }
    }
}

/// Every feature column of `party`, plus its label when it has one.
pub fn party_vars(party: &PartyData, include_label: bool) -> Vec<Var> {
    let mut vars: Vec<Var> = (0..party.table().n_columns())
        .map(|c| Var::feature(party.party_id(), c))
        .collect();
    if include_label && party.label().is_some() {
        vars.push(Var::label(party.party_id()));
    }
    vars
}

/// Sorts and de-duplicates a variable list.
pub fn canonical(vars: &[Var]) -> Vec<Var> {
    let mut out = vars.to_vec();
    out.sort_unstable();
    out.dedup();
    out
}

/// A concrete joint value of a set of variables, kept sorted by variable.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ValueAssignment {
    entries: Vec<(Var, u32)>,
}

impl ValueAssignment {
    pub fn new(mut entries: Vec<(Var, u32)>) -> Result<Self> {
        entries.sort_unstable_by_key(|(v, _)| *v);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Selection("variable assigned twice".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(Var, u32)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The sub-assignment over one party's variables.
    pub fn for_party(&self, party: PartyId) -> ValueAssignment {
        Self { entries: self.entries.iter().copied().filter(|(v, _)| v.party == party).collect() }
    }

    pub fn parties(&self) -> Vec<PartyId> {
        let mut parties: Vec<PartyId> = self.entries.iter().map(|(v, _)| v.party).collect();
        parties.dedup();
        parties
    }
}

/// Exact joint counts over a fixed, sorted variable list. Cells never
/// observed are absent (implicit zero).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    vars: Vec<Var>,
    cells: BTreeMap<Vec<u32>, u64>,
    n_total: u64,
}

impl CountTable {
    /// Zero counts are dropped; the counts must sum to `n_total`.
    pub fn new(vars: Vec<Var>, cells: BTreeMap<Vec<u32>, u64>, n_total: u64) -> Result<Self> {
        if vars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema("count table variables must be sorted and distinct".into()));
        }
        if cells.keys().any(|k| k.len() != vars.len()) {
            return Err(Error::Schema("count table key width differs from its variables".into()));
        }
        let sum: u64 = cells.values().sum();
        if sum != n_total {
            return Err(Error::Schema(format!("counts sum to {sum}, expected {n_total}")));
        }
        let cells = cells.into_iter().filter(|(_, c)| *c > 0).collect();
        Ok(Self { vars, cells, n_total })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn cells(&self) -> &BTreeMap<Vec<u32>, u64> {
        &self.cells
    }

    pub fn n_total(&self) -> u64 {
        self.n_total
    }

    pub fn get(&self, key: &[u32]) -> u64 {
        self.cells.get(key).copied().unwrap_or(0)
    }

    fn position(&self, var: Var) -> Option<usize> {
        self.vars.binary_search(&var).ok()
    }

    /// Sums the table down to a subset of its variables.
    pub fn marginal(&self, keep: &[Var]) -> Result<CountTable> {
        let keep = canonical(keep);
        let positions = self.positions(&keep)?;
        let mut cells = BTreeMap::new();
        for (key, &count) in &self.cells {
            *cells.entry(positions.iter().map(|&p| key[p]).collect()).or_insert(0) += count;
        }
        Ok(CountTable { vars: keep, cells, n_total: self.n_total })
    }

    fn positions(&self, vars: &[Var]) -> Result<Vec<usize>> {
        vars.iter()
            .map(|&v| self.position(v).ok_or_else(|| Error::Schema(format!("variable {v} not in count table"))))
            .collect()
    }
}

/// Anything that can answer exact joint-count requests over aligned samples.
pub trait CountSource: Sync {
    fn n_total(&self) -> u64;

    /// `vars` is sorted and distinct.
    fn count_table(&self, vars: &[Var]) -> Result<CountTable>;
}

/// Direct tally over the parties' tables; the centralized oracle.
pub struct CentralCounts<'a> {
    parties: Vec<&'a PartyData>,
    n: u64,
}

impl<'a> CentralCounts<'a> {
    pub fn new(parties: impl IntoIterator<Item = &'a PartyData>) -> Result<Self> {
        let parties: Vec<&PartyData> = parties.into_iter().collect();
        check_alignment(parties.iter().copied())?;
        let n = parties.first().map_or(0, |p| p.sample_ids().len()) as u64;
        Ok(Self { parties, n })
    }

    fn column(&self, var: Var) -> Result<&'a [u32]> {
        let party = self
            .parties
            .iter()
            .find(|p| p.party_id() == var.party)
            .ok_or_else(|| Error::Schema(format!("unknown party {}", var.party)))?;
        column_of(party, var)
    }
}

impl CountSource for CentralCounts<'_> {
    fn n_total(&self) -> u64 {
        self.n
    }

    fn count_table(&self, vars: &[Var]) -> Result<CountTable> {
        let columns: Vec<&[u32]> = vars.iter().map(|&v| self.column(v)).collect::<Result<_>>()?;
        let mut cells: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
        let mut scratch: HashMap<Vec<u32>, u64> = HashMap::new();
        for row in 0..self.n as usize {
            *scratch.entry(columns.iter().map(|c| c[row]).collect()).or_insert(0) += 1;
        }
        cells.extend(scratch);
        CountTable::new(vars.to_vec(), cells, self.n)
    }
}

pub fn column_of(party: &PartyData, var: Var) -> Result<&[u32]> {
    if var.party != party.party_id() {
        return Err(Error::Selection(format!("variable {var} does not belong to party {}", party.party_id())));
    }
    match var.column {
        Column::Feature(c) => party
            .table()
            .columns()
            .get(c as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Schema(format!("party {} has no column {c}", party.party_id()))),
        Column::Label => party
            .label()
            .map(|l| l.codes.as_slice())
            .ok_or_else(|| Error::Schema(format!("party {} holds no label", party.party_id()))),
    }
}

pub fn arity_of(party: &PartyData, var: Var) -> Result<u32> {
    match var.column {
        Column::Feature(c) => party
            .table()
            .arities()
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Schema(format!("party {} has no column {c}", party.party_id()))),
        Column::Label => party
            .label()
            .map(|l| l.arity)
            .ok_or_else(|| Error::Schema(format!("party {} holds no label", party.party_id()))),
    }
}

pub fn check_alignment<'a>(parties: impl IntoIterator<Item = &'a PartyData>) -> Result<()> {
    let mut parties = parties.into_iter();
    let Some(first) = parties.next() else { return Ok(()) };
    for other in parties {
        if other.sample_ids() != first.sample_ids() {
            return Err(Error::Alignment(format!(
                "party {} and party {} hold different sample ids",
                first.party_id(),
                other.party_id()
            )));
        }
    }
    Ok(())
}

/// Tallies the joint counts of `vars` across aligned parties.
pub fn joint_counts(parties: &[PartyData], vars: &[Var]) -> Result<CountTable> {
    CentralCounts::new(parties)?.count_table(&canonical(vars))
}

/// Conditional mutual information in nats, clamped at zero within tolerance.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CmiValue {
    nats: f64,
}

impl CmiValue {
    pub fn from_nats(nats: f64) -> Self {
        let nats = if nats < 0.0 && nats >= -CMI_TOLERANCE { 0.0 } else { nats };
        Self { nats }
    }

    pub fn nats(self) -> f64 {
        self.nats
    }

    pub fn bits(self) -> f64 {
        self.nats / std::f64::consts::LN_2
    }
}

/// `I(target; label | conditioning)` from the joint table over all three.
///
/// `target` may overlap `conditioning`; shared variables carry no residual
/// information. Cells with zero joint count contribute nothing.
pub fn cmi_from_table(table: &CountTable, target: &[Var], label: Var, conditioning: &[Var]) -> Result<CmiValue> {
    let target = canonical(target);
    let conditioning = canonical(conditioning);
    let target_pos = table.positions(&target)?;
    let cond_pos = table.positions(&conditioning)?;
    let label_pos = table.positions(&[label])?[0];

    let mut xc_pos = target_pos.clone();
    xc_pos.extend(&cond_pos);
    let mut yc_pos = vec![label_pos];
    yc_pos.extend(&cond_pos);

    let project = |key: &[u32], pos: &[usize]| -> Vec<u32> { pos.iter().map(|&p| key[p]).collect() };

    let mut n_c: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut n_xc: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut n_yc: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut n_xyc: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut xyc_pos = xc_pos.clone();
    xyc_pos.push(label_pos);
    for (key, &count) in table.cells() {
        *n_c.entry(project(key, &cond_pos)).or_insert(0) += count;
        *n_xc.entry(project(key, &xc_pos)).or_insert(0) += count;
        *n_yc.entry(project(key, &yc_pos)).or_insert(0) += count;
        *n_xyc.entry(project(key, &xyc_pos)).or_insert(0) += count;
    }

    // Iterate the joint (x, y, c) cells in a fixed order so the sum is
    // reproducible bit-for-bit.
    let mut joint: Vec<(&Vec<u32>, &u64)> = n_xyc.iter().collect();
    joint.sort_unstable();

    let x_len = target_pos.len();
    let c_len = cond_pos.len();
    let mut sum = 0.0;
    for (key, &count) in joint {
        let (xc, y) = key.split_at(x_len + c_len);
        let c = &xc[x_len..];
        let mut yc = Vec::with_capacity(1 + c_len);
        yc.push(y[0]);
        yc.extend_from_slice(c);
        let ratio = (count as f64 * n_c[c] as f64) / (n_xc[xc] as f64 * n_yc[&yc] as f64);
        sum += count as f64 * ratio.ln();
    }
    Ok(CmiValue::from_nats(sum / table.n_total() as f64))
}

/// `I(target; label | conditioning)`, fetching one joint table from `source`.
pub fn cmi(source: &dyn CountSource, target: &[Var], label: Var, conditioning: &[Var]) -> Result<CmiValue> {
    let mut all = target.to_vec();
    all.extend_from_slice(conditioning);
    all.push(label);
    let table = source.count_table(&canonical(&all))?;
    cmi_from_table(&table, target, label, conditioning)
}

/// Returns `(I(A∪B; Y | C), I(B; Y | C), I(A; Y | B∪C))`.
pub fn cmi_chain_decompose(
    source: &dyn CountSource,
    set_a: &[Var],
    set_b: &[Var],
    label: Var,
    conditioning: &[Var],
) -> Result<(CmiValue, CmiValue, CmiValue)> {
    if let Some(shared) = set_a.iter().find(|v| set_b.contains(v)) {
        return Err(Error::Overlap(format!("variable {shared} is in both sets")));
    }
    let mut all = set_a.to_vec();
    all.extend_from_slice(set_b);
    all.extend_from_slice(conditioning);
    all.push(label);
    let table = source.count_table(&canonical(&all))?;

    let mut ab = set_a.to_vec();
    ab.extend_from_slice(set_b);
    let mut bc = set_b.to_vec();
    bc.extend_from_slice(conditioning);
    Ok((
        cmi_from_table(&table, &ab, label, conditioning)?,
        cmi_from_table(&table, set_b, label, conditioning)?,
        cmi_from_table(&table, set_a, label, &bc)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{CategoricalTable, LabelColumn};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn table(columns: Vec<Vec<u32>>, arity: u32) -> CategoricalTable {
        let n = columns.first().map_or(0, Vec::len);
        let names = (0..columns.len()).map(|c| format!("c{c}")).collect();
        let arities = vec![arity; columns.len()];
        CategoricalTable::new(ids(n), names, columns, arities).unwrap()
    }

    fn task(features: Vec<Vec<u32>>, label: Vec<u32>) -> PartyData {
        let arity = label.iter().max().map_or(1, |m| m + 1);
        PartyData::task(0, table(features, 2), LabelColumn { name: "y".into(), codes: label, arity }).unwrap()
    }

    #[test]
    fn tally_single_column() {
        let t = task(vec![vec![0, 1, 1, 0]], vec![0, 0, 0, 0]);
        let counts = joint_counts(&[t], &[Var::feature(0, 0)]).unwrap();
        assert_eq!(counts.n_total(), 4);
        assert_eq!(counts.get(&[0]), 2);
        assert_eq!(counts.get(&[1]), 2);
    }

    #[test]
    fn empty_selection_has_one_cell() {
        let t = task(vec![vec![0, 1, 1]], vec![0, 1, 0]);
        let counts = joint_counts(&[t], &[]).unwrap();
        assert_eq!(counts.cells().len(), 1);
        assert_eq!(counts.get(&[]), 3);
    }

    #[test]
    fn full_cross_product() {
        let t = task(vec![vec![0, 0, 1, 1], vec![0, 1, 0, 1]], vec![0, 0, 0, 0]);
        let counts = joint_counts(&[t], &[Var::feature(0, 0), Var::feature(0, 1)]).unwrap();
        assert_eq!(counts.cells().len(), 4);
        assert!(counts.cells().values().all(|&c| c == 1));
    }

    #[test]
    fn misaligned_parties() {
        let t = task(vec![vec![0, 1]], vec![0, 1]);
        let other = CategoricalTable::new(vec!["a".into(), "b".into()], vec!["c".into()], vec![vec![0, 1]], vec![2]).unwrap();
        let d = PartyData::data(1, other);
        assert!(matches!(joint_counts(&[t, d], &[]), Err(Error::Alignment(_))));
    }

    #[test]
    fn constant_target_has_zero_cmi() {
        let t = task(vec![vec![0, 1, 0, 1]], vec![0, 1, 1, 0]);
        let d = PartyData::data(1, table(vec![vec![0, 0, 0, 0]], 1));
        let parties = [t, d];
        let source = CentralCounts::new(&parties).unwrap();
        let v = cmi(&source, &[Var::feature(1, 0)], Var::label(0), &[Var::feature(0, 0)]).unwrap();
        assert_eq!(v.nats(), 0.0);
    }

    #[test]
    fn target_equal_to_label_carries_ln2() {
        // rows (x_t, x_d, y): (0,0,0) (0,1,1) (1,0,0) (1,1,1)
        let t = task(vec![vec![0, 0, 1, 1]], vec![0, 1, 0, 1]);
        let d = PartyData::data(1, table(vec![vec![0, 1, 0, 1]], 2));
        let parties = [t, d];
        let source = CentralCounts::new(&parties).unwrap();
        let v = cmi(&source, &[Var::feature(1, 0)], Var::label(0), &[Var::feature(0, 0)]).unwrap();
        // brute force over the 8 cells: four cells with p = 1/4 and
        // p(xd,y|xt) / (p(xd|xt) p(y|xt)) = (1/2) / (1/2 * 1/2) = 2
        let oracle = 4.0 * 0.25 * (2.0f64).ln();
        assert!((v.nats() - oracle).abs() < 1e-12);
        assert!((v.nats() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn target_inside_conditioning_is_zero() {
        let t = task(vec![vec![0, 1, 1, 0, 1]], vec![0, 1, 1, 0, 0]);
        let d = PartyData::data(1, table(vec![vec![1, 0, 1, 0, 1], vec![0, 0, 1, 1, 1]], 2));
        let parties = [t, d];
        let source = CentralCounts::new(&parties).unwrap();
        let x = Var::feature(1, 0);
        let cond = [Var::feature(0, 0), Var::feature(1, 0), Var::feature(1, 1)];
        let v = cmi(&source, &[x], Var::label(0), &cond).unwrap();
        assert_eq!(v.nats(), 0.0);
    }

    #[test]
    fn chain_with_empty_halves() {
        let t = task(vec![vec![0, 1, 1, 0, 1, 0]], vec![0, 1, 1, 0, 0, 1]);
        let d = PartyData::data(1, table(vec![vec![1, 0, 1, 0, 1, 1]], 2));
        let parties = [t, d];
        let source = CentralCounts::new(&parties).unwrap();
        let c = [Var::feature(0, 0)];
        let x = [Var::feature(1, 0)];
        let single = cmi(&source, &x, Var::label(0), &c).unwrap();

        let (whole, first, rest) = cmi_chain_decompose(&source, &[], &x, Var::label(0), &c).unwrap();
        assert_eq!((whole, first, rest.nats()), (single, single, 0.0));
        let (whole, first, rest) = cmi_chain_decompose(&source, &x, &[], Var::label(0), &c).unwrap();
        assert_eq!((whole, first.nats(), rest), (single, 0.0, single));
    }

    #[test]
    fn chain_rejects_overlap() {
        let t = task(vec![vec![0, 1]], vec![0, 1]);
        let parties = [t];
        let source = CentralCounts::new(&parties).unwrap();
        let x = [Var::feature(0, 0)];
        assert!(matches!(cmi_chain_decompose(&source, &x, &x, Var::label(0), &[]), Err(Error::Overlap(_))));
    }

    #[test]
    fn marginal_sums_cells() {
        let t = task(vec![vec![0, 0, 1, 1], vec![0, 1, 0, 1]], vec![0, 0, 1, 1]);
        let all = joint_counts(&[t], &[Var::feature(0, 0), Var::feature(0, 1), Var::label(0)]).unwrap();
        let m = all.marginal(&[Var::label(0)]).unwrap();
        assert_eq!(m.get(&[0]), 2);
        assert_eq!(m.get(&[1]), 2);
    }

    #[test]
    fn bits_conversion() {
        let v = CmiValue::from_nats(std::f64::consts::LN_2);
        assert!((v.bits() - 1.0).abs() < 1e-15);
        assert_eq!(CmiValue::from_nats(-1e-12).nats(), 0.0);
    }

    #[test]
    fn assignment_rejects_duplicates() {
        let v = Var::feature(1, 0);
        assert!(ValueAssignment::new(vec![(v, 0), (v, 1)]).is_err());
        let a = ValueAssignment::new(vec![(Var::label(0), 1), (v, 0), (Var::feature(0, 0), 1)]).unwrap();
        assert_eq!(a.parties(), [0, 1]);
        assert_eq!(a.for_party(1).entries(), [(v, 0)]);
    }
}
