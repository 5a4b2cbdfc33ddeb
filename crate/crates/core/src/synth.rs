//! Seeded synthetic vertical datasets for benchmarks, fixtures and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{CategoricalTable, LabelColumn, PartyData, PartyId, TASK_PARTY};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_parties: usize,
    pub features_per_party: usize,
    /// Categories per feature; 2 gives the binary setting.
    pub arity: u32,
    /// How strongly the label follows the features; 0 makes it pure noise.
    pub signal: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn binary(n_samples: usize, n_parties: usize, seed: u64) -> Self {
        Self { n_samples, n_parties, features_per_party: 1, arity: 2, signal: 1.0, seed }
    }
}

pub fn sample_id(row: usize) -> String {
    format!("sample-{row:07}")
}

/// Uniform categorical features for a task party and `n_parties` data
/// parties; the binary label follows a logistic model over all features
/// with random per-feature weights.
pub fn synthetic_parties(spec: SyntheticSpec) -> Result<(PartyData, Vec<PartyData>)> {
    if spec.arity == 0 || spec.features_per_party == 0 {
        return Err(Error::Domain("arity and features_per_party must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_tables = spec.n_parties + 1;
    let columns: Vec<Vec<Vec<u32>>> = (0..n_tables)
        .map(|_| {
            (0..spec.features_per_party)
                .map(|_| (0..spec.n_samples).map(|_| rng.gen_range(0..spec.arity)).collect())
                .collect()
        })
        .collect();
    let weights: Vec<Vec<f64>> = (0..n_tables)
        .map(|_| (0..spec.features_per_party).map(|_| rng.gen_range(0.0..2.0) * spec.signal).collect())
        .collect();

    let centre = f64::from(spec.arity - 1) / 2.0;
    let scale = if spec.arity > 1 { f64::from(spec.arity - 1) } else { 1.0 };
    let label: Vec<u32> = (0..spec.n_samples)
        .map(|row| {
            let score: f64 = columns
                .iter()
                .zip(&weights)
                .flat_map(|(cols, ws)| cols.iter().zip(ws))
                .map(|(col, w)| w * (f64::from(col[row]) - centre) / scale * 2.0)
                .sum();
            let p = 1.0 / (1.0 + (-score).exp());
            u32::from(rng.gen_bool(p))
        })
        .collect();

    let ids: Vec<String> = (0..spec.n_samples).map(sample_id).collect();
    let mut tables = columns.into_iter().enumerate().map(|(t, cols)| {
        let names = (0..cols.len()).map(|c| format!("p{t}_f{c}")).collect();
        let arities = vec![spec.arity; cols.len()];
        CategoricalTable::new(ids.clone(), names, cols, arities)
    });
    let task = PartyData::task(TASK_PARTY, tables.next().unwrap()?, LabelColumn { name: "label".into(), codes: label, arity: 2 })?;
    let data = tables
        .enumerate()
        .map(|(i, t)| Ok(PartyData::data(i as PartyId + 1, t?)))
        .collect::<Result<_>>()?;
    Ok((task, data))
}
