//! Dataset ingestion and preparation: CSV loading, equal-width discretization,
//! per-party PCA, and vertical partitioning into one task party and several
//! label-less data parties.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type PartyId = u32;

/// Party id reserved for the task party; data parties are numbered from 1.
pub const TASK_PARTY: PartyId = 0;

#[derive(Clone, Debug, PartialEq)]
pub enum RawColumn {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl RawColumn {
    pub fn len(&self) -> usize {
        match self {
            RawColumn::Numeric(v) => v.len(),
            RawColumn::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Aligned samples with named raw columns, before discretization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    sample_ids: Vec<String>,
    names: Vec<String>,
    columns: Vec<RawColumn>,
    label_column: Option<String>,
}

impl RawTable {
    pub fn new(
        sample_ids: Vec<String>,
        named_columns: Vec<(String, RawColumn)>,
        label_column: Option<String>,
    ) -> Result<Self> {
        check_unique_ids(&sample_ids)?;
        let mut names = Vec::with_capacity(named_columns.len());
        let mut columns = Vec::with_capacity(named_columns.len());
        for (name, column) in named_columns {
            if column.len() != sample_ids.len() {
                return Err(Error::Schema(format!(
                    "column {name:?} has {} cells, expected {}",
                    column.len(),
                    sample_ids.len()
                )));
            }
            if names.contains(&name) {
                return Err(Error::Schema(format!("column {name:?} appears twice")));
            }
            names.push(name);
            columns.push(column);
        }
        if let Some(label) = &label_column {
            if !names.contains(label) {
                return Err(Error::Schema(format!("label column {label:?} not found")));
            }
        }
        Ok(Self { sample_ids, names, columns, label_column })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[RawColumn] {
        &self.columns
    }

    pub fn label_column(&self) -> Option<&str> {
        self.label_column.as_deref()
    }

    pub fn n_rows(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn column(&self, name: &str) -> Option<&RawColumn> {
        self.names.iter().position(|n| n == name).map(|i| &self.columns[i])
    }

    /// Names of every column except the label.
    pub fn feature_names(&self) -> Vec<&str> {
        self.names
            .iter()
            .filter(|n| Some(n.as_str()) != self.label_column.as_deref())
            .map(String::as_str)
            .collect()
    }

    /// Restricts the table to the named columns (plus the label, if kept).
    pub fn select(&self, names: &[&str], keep_label: bool) -> Result<RawTable> {
        let mut named = Vec::with_capacity(names.len() + 1);
        for name in names {
            let column = self
                .column(name)
                .ok_or_else(|| Error::Schema(format!("column {name:?} not found")))?;
            named.push((name.to_string(), column.clone()));
        }
        let label = match (&self.label_column, keep_label) {
            (Some(label), true) => {
                if !names.contains(&label.as_str()) {
                    named.push((label.clone(), self.column(label).unwrap().clone()));
                }
                Some(label.clone())
            }
            _ => None,
        };
        RawTable::new(self.sample_ids.clone(), named, label)
    }
}

fn check_unique_ids(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

/// Discretized table: every cell is a category code below its column arity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalTable {
    sample_ids: Vec<String>,
    names: Vec<String>,
    columns: Vec<Vec<u32>>,
    arities: Vec<u32>,
}

impl CategoricalTable {
    pub fn new(
        sample_ids: Vec<String>,
        names: Vec<String>,
        columns: Vec<Vec<u32>>,
        arities: Vec<u32>,
    ) -> Result<Self> {
        check_unique_ids(&sample_ids)?;
        if names.len() != columns.len() || arities.len() != columns.len() {
            return Err(Error::Schema(format!(
                "{} names, {} columns and {} arities",
                names.len(),
                columns.len(),
                arities.len()
            )));
        }
        for ((name, column), &arity) in names.iter().zip(&columns).zip(&arities) {
            if arity == 0 {
                return Err(Error::Schema(format!("column {name:?} has arity 0")));
            }
            if column.len() != sample_ids.len() {
                return Err(Error::Schema(format!(
                    "column {name:?} has {} cells, expected {}",
                    column.len(),
                    sample_ids.len()
                )));
            }
            if let Some(bad) = column.iter().find(|&&c| c >= arity) {
                return Err(Error::Schema(format!(
                    "column {name:?} holds code {bad} outside arity {arity}"
                )));
            }
        }
        Ok(Self { sample_ids, names, columns, arities })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Vec<u32>] {
        &self.columns
    }

    pub fn arities(&self) -> &[u32] {
        &self.arities
    }

    pub fn n_rows(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Copies the given columns, in the given order, into a new table.
    pub fn project(&self, indices: &[usize]) -> CategoricalTable {
        CategoricalTable {
            sample_ids: self.sample_ids.clone(),
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            columns: indices.iter().map(|&i| self.columns[i].clone()).collect(),
            arities: indices.iter().map(|&i| self.arities[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartyRole {
    TaskParty,
    DataParty,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelColumn {
    pub name: String,
    pub codes: Vec<u32>,
    pub arity: u32,
}

/// One participant's private slice of the aligned data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyData {
    role: PartyRole,
    party_id: PartyId,
    table: CategoricalTable,
    label: Option<LabelColumn>,
}

impl PartyData {
    pub fn task(party_id: PartyId, table: CategoricalTable, label: LabelColumn) -> Result<Self> {
        if label.codes.len() != table.n_rows() {
            return Err(Error::Schema(format!(
                "label has {} cells, table has {} rows",
                label.codes.len(),
                table.n_rows()
            )));
        }
        if label.arity == 0 || label.codes.iter().any(|&c| c >= label.arity) {
            return Err(Error::Schema("label code outside its arity".into()));
        }
        Ok(Self { role: PartyRole::TaskParty, party_id, table, label: Some(label) })
    }

    pub fn data(party_id: PartyId, table: CategoricalTable) -> Self {
        Self { role: PartyRole::DataParty, party_id, table, label: None }
    }

    pub fn role(&self) -> PartyRole {
        self.role
    }

    pub fn party_id(&self) -> PartyId {
        self.party_id
    }

    pub fn table(&self) -> &CategoricalTable {
        &self.table
    }

    pub fn label(&self) -> Option<&LabelColumn> {
        self.label.as_ref()
    }

    pub fn sample_ids(&self) -> &[String] {
        self.table.sample_ids()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinningStrategy {
    EqualWidth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub bins_per_feature: u32,
    pub strategy: BinningStrategy,
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self { bins_per_feature: 5, strategy: BinningStrategy::EqualWidth }
    }
}

impl BinningSpec {
    pub fn equal_width(bins_per_feature: u32) -> Result<Self> {
        if bins_per_feature == 0 {
            return Err(Error::Domain("bins_per_feature must be at least 1".into()));
        }
        Ok(Self { bins_per_feature, strategy: BinningStrategy::EqualWidth })
    }
}

/// Loads a headered CSV file. Without `id_column`, row indices become the ids.
pub fn load_csv(path: impl AsRef<Path>, label: Option<&str>, id_column: Option<&str>) -> Result<RawTable> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))?;
    read_csv(file, label, id_column)
}

pub fn read_csv<R: Read>(reader: R, label: Option<&str>, id_column: Option<&str>) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() {
        return Err(Error::Parse("empty header row".into()));
    }

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        for (column, cell) in cells.iter_mut().zip(record.iter()) {
            column.push(cell.to_string());
        }
    }

    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column {name:?} not found")))
    };
    if let Some(label) = label {
        find(label)?;
    }
    let id_index = id_column.map(find).transpose()?;

    let n_rows = cells[0].len();
    let sample_ids = match id_index {
        Some(i) => cells[i].clone(),
        None => (0..n_rows).map(|i| i.to_string()).collect(),
    };

    let mut named = Vec::with_capacity(header.len());
    for (i, (name, column)) in header.iter().zip(cells).enumerate() {
        if Some(i) == id_index {
            continue;
        }
        named.push((name.clone(), infer_column(column)));
    }
    RawTable::new(sample_ids, named, label.map(str::to_string))
}

fn infer_column(cells: Vec<String>) -> RawColumn {
    let parsed: Option<Vec<f64>> = cells.iter().map(|c| c.parse::<f64>().ok()).collect();
    match parsed {
        Some(values) if !values.is_empty() => RawColumn::Numeric(values),
        _ => RawColumn::Categorical(cells),
    }
}

/// Bins numeric columns into equal-width intervals over `[min, max]` and
/// densely re-codes categorical columns. The label column is always
/// re-coded by distinct value, never binned.
pub fn discretize(table: &RawTable, spec: BinningSpec) -> Result<CategoricalTable> {
    if spec.bins_per_feature == 0 {
        return Err(Error::Domain("bins_per_feature must be at least 1".into()));
    }
    let mut columns = Vec::with_capacity(table.columns.len());
    let mut arities = Vec::with_capacity(table.columns.len());
    for (name, column) in table.names.iter().zip(&table.columns) {
        let is_label = table.label_column.as_deref() == Some(name.as_str());
        let (codes, arity) = match column {
            RawColumn::Numeric(values) if is_label => recode_numeric(name, values)?,
            RawColumn::Numeric(values) => equal_width_codes(name, values, spec.bins_per_feature)?,
            RawColumn::Categorical(values) => recode_strings(values),
        };
        columns.push(codes);
        arities.push(arity);
    }
    CategoricalTable::new(table.sample_ids.clone(), table.names.clone(), columns, arities)
}

/// Half-open bins `[edge_k, edge_k+1)`, except the last which also takes `max`.
pub fn equal_width_codes(name: &str, values: &[f64], bins: u32) -> Result<(Vec<u32>, u32)> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("column {name:?} holds non-finite value {bad}")));
    }
    if values.is_empty() {
        return Ok((Vec::new(), 1));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Ok((vec![0; values.len()], 1));
    }
    let width = (max - min) / f64::from(bins);
    let codes = values
        .iter()
        .map(|&v| {
            let k = ((v - min) / width).floor();
            (k.max(0.0) as u32).min(bins - 1)
        })
        .collect();
    Ok((codes, bins))
}

fn recode_numeric(name: &str, values: &[f64]) -> Result<(Vec<u32>, u32)> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("column {name:?} holds non-finite value {bad}")));
    }
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let codes = values
        .iter()
        .map(|v| distinct.binary_search_by(|d| d.total_cmp(v)).unwrap() as u32)
        .collect();
    Ok((codes, distinct.len().max(1) as u32))
}

fn recode_strings(values: &[String]) -> (Vec<u32>, u32) {
    let mut dictionary: BTreeMap<&str, u32> = values.iter().map(|v| (v.as_str(), 0)).collect();
    for (code, slot) in dictionary.values_mut().enumerate() {
        *slot = code as u32;
    }
    let codes = values.iter().map(|v| dictionary[v.as_str()]).collect();
    (codes, dictionary.len().max(1) as u32)
}

/// Replaces the feature columns with their top principal-component scores.
///
/// Covariance PCA on mean-centered columns, no scaling. Each component's sign
/// is fixed so that its largest-magnitude loading is positive. The label
/// column, if any, is carried through unchanged.
pub fn local_pca(table: &RawTable, components: usize) -> Result<RawTable> {
    let features = table.feature_names();
    if components == 0 || components > features.len() {
        return Err(Error::Dimension(format!(
            "requested {components} components from {} feature columns",
            features.len()
        )));
    }
    let n = table.n_rows();
    let p = features.len();
    let mut data = DMatrix::<f64>::zeros(n, p);
    for (j, name) in features.iter().enumerate() {
        match table.column(name).unwrap() {
            RawColumn::Numeric(values) => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Domain(format!("column {name:?} holds non-finite values")));
                }
                let mean = values.iter().sum::<f64>() / n.max(1) as f64;
                for (i, v) in values.iter().enumerate() {
                    data[(i, j)] = v - mean;
                }
            }
            RawColumn::Categorical(_) => {
                return Err(Error::Schema(format!("PCA needs numeric columns, {name:?} is categorical")))
            }
        }
    }

    let loadings = principal_axes(&data, components);
    let scores = &data * &loadings;

    let mut named: Vec<(String, RawColumn)> = (0..components)
        .map(|k| (format!("pc{}", k + 1), RawColumn::Numeric(scores.column(k).iter().copied().collect())))
        .collect();
    if let Some(label) = table.label_column() {
        named.push((label.to_string(), table.column(label).unwrap().clone()));
    }
    RawTable::new(table.sample_ids.clone(), named, table.label_column.clone())
}

/// Top `k` eigenvectors of the covariance of centered `data`, as columns,
/// ordered by decreasing eigenvalue with canonical sign.
fn principal_axes(data: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = data.nrows();
    let cov = (data.transpose() * data) / (n.saturating_sub(1).max(1) as f64);
    let eigen = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eigen.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]).then(a.cmp(&b)));

    let p = data.ncols();
    let mut axes = DMatrix::<f64>::zeros(p, k);
    for (out, &idx) in order.iter().take(k).enumerate() {
        let mut axis = eigen.eigenvectors.column(idx).clone_owned();
        let pivot = axis.iter().copied().fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            axis.neg_mut();
        }
        axes.set_column(out, &axis);
    }
    axes
}

/// Draws `(n_parties + 1) * features_per_party` distinct column indices from
/// `n_columns` without replacement. Entry 0 of the result belongs to the task
/// party, entry `i` to data party `i`.
pub fn assign_columns(
    n_columns: usize,
    n_parties: usize,
    features_per_party: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_parties == 0 || features_per_party == 0 {
        return Err(Error::Partition("n_parties and features_per_party must be positive".into()));
    }
    let needed = (n_parties + 1) * features_per_party;
    if needed > n_columns {
        return Err(Error::Partition(format!(
            "{} parties with {features_per_party} features each need {needed} columns, table has {n_columns}",
            n_parties + 1
        )));
    }
    let mut indices: Vec<usize> = (0..n_columns).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    Ok(indices[..needed].chunks(features_per_party).map(<[usize]>::to_vec).collect())
}

/// Randomly and evenly splits the feature columns among a task party (which
/// also keeps the label) and `n_parties` data parties.
pub fn partition(
    table: &CategoricalTable,
    label: &str,
    n_parties: usize,
    features_per_party: usize,
    seed: u64,
) -> Result<(PartyData, Vec<PartyData>)> {
    let label_index = table
        .position(label)
        .ok_or_else(|| Error::Schema(format!("label column {label:?} not found")))?;
    let feature_indices: Vec<usize> = (0..table.n_columns()).filter(|&i| i != label_index).collect();
    let groups = assign_columns(feature_indices.len(), n_parties, features_per_party, seed)?;

    let label_column = LabelColumn {
        name: label.to_string(),
        codes: table.columns()[label_index].clone(),
        arity: table.arities()[label_index],
    };
    let mut parties = groups.iter().map(|group| {
        let columns: Vec<usize> = group.iter().map(|&g| feature_indices[g]).collect();
        table.project(&columns)
    });
    let task = PartyData::task(TASK_PARTY, parties.next().unwrap(), label_column)?;
    let data = parties
        .enumerate()
        .map(|(i, t)| PartyData::data(i as PartyId + 1, t))
        .collect();
    Ok((task, data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub bins: u32,
    pub pca_components: Option<usize>,
    pub n_parties: usize,
    pub features_per_party: usize,
    pub seed: u64,
}

/// Full local pipeline: partition the raw columns, optionally reduce each
/// party's columns with its own PCA, then discretize.
pub fn prepare_parties(table: &RawTable, label: &str, options: PrepareOptions) -> Result<(PartyData, Vec<PartyData>)> {
    let spec = BinningSpec::equal_width(options.bins)?;
    if table.column(label).is_none() {
        return Err(Error::Schema(format!("label column {label:?} not found")));
    }
    let table = if table.label_column() == Some(label) {
        table.clone()
    } else {
        let named = table.names.iter().cloned().zip(table.columns.iter().cloned()).collect();
        RawTable::new(table.sample_ids.clone(), named, Some(label.to_string()))?
    };

    let Some(components) = options.pca_components else {
        let categorical = discretize(&table, spec)?;
        return partition(&categorical, label, options.n_parties, options.features_per_party, options.seed);
    };

    let features = table.feature_names();
    let groups = assign_columns(features.len(), options.n_parties, options.features_per_party, options.seed)?;
    let mut task = None;
    let mut data = Vec::with_capacity(options.n_parties);
    for (i, group) in groups.iter().enumerate() {
        let names: Vec<&str> = group.iter().map(|&g| features[g]).collect();
        let local = table.select(&names, i == 0)?;
        let reduced = local_pca(&local, components.min(names.len()))?;
        let categorical = discretize(&reduced, spec)?;
        if i == 0 {
            let label_index = categorical.position(label).unwrap();
            let label_column = LabelColumn {
                name: label.to_string(),
                codes: categorical.columns()[label_index].clone(),
                arity: categorical.arities()[label_index],
            };
            let features: Vec<usize> = (0..categorical.n_columns()).filter(|&c| c != label_index).collect();
            task = Some(PartyData::task(TASK_PARTY, categorical.project(&features), label_column)?);
        } else {
            data.push(PartyData::data(i as PartyId, categorical));
        }
    }
    Ok((task.unwrap(), data))
}
