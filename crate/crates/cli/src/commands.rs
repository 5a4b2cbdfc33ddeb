use std::collections::BTreeSet;
use std::time::Instant;

use clap::ValueEnum;
use fedvalue_core::federation::{run_valuation, FederatedCounts, InProcessLink, Mode};
use fedvalue_core::infotheory::{ValueAssignment, Var};
use fedvalue_core::psi::{matching_rows, CountQuery, ServerBehavior, Verdict};
use fedvalue_core::synth::{synthetic_parties, SyntheticSpec};
use fedvalue_core::tabular::{load_csv, prepare_parties, PartyData, PrepareOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModeArg, RunConfig};
use crate::report::ReportFile;
use crate::CliError;

/// Data parties used for generated data when `--parties` is not given.
pub const DEFAULT_SYNTHETIC_PARTIES: usize = 5;

/// Task party and data parties for `config`: the prepared input CSV, or
/// seeded binary data when no input is given.
pub fn load_parties(config: &RunConfig) -> Result<(PartyData, Vec<PartyData>), CliError> {
    let Some(input) = &config.input else {
        let spec = SyntheticSpec {
            n_samples: config.n_samples,
            n_parties: config.n_parties.unwrap_or(DEFAULT_SYNTHETIC_PARTIES),
            features_per_party: config.features_per_party,
            arity: 2,
            signal: 1.0,
            seed: config.seed,
        };
        return Ok(synthetic_parties(spec)?);
    };
    let label = config.label.as_deref().ok_or_else(|| CliError::Config("--label is required with --input".into()))?;
    let table = load_csv(input, Some(label), config.id_column.as_deref())?;
    let n_features = table.feature_names().len();
    let n_parties = match config.n_parties {
        Some(n) => n,
        None => match (n_features / config.features_per_party).checked_sub(1) {
            Some(n) if n > 0 => n,
            _ => {
                return Err(CliError::Config(format!(
                    "{n_features} feature columns cannot feed a task party and a data party with {} features each",
                    config.features_per_party
                )))
            }
        },
    };
    let options = PrepareOptions {
        bins: config.bins,
        pca_components: config.pca_components,
        n_parties,
        features_per_party: config.features_per_party,
        seed: config.seed,
    };
    Ok(prepare_parties(&table, label, options)?)
}

pub fn valuate_parties(config: &RunConfig, task: &PartyData, data: &[PartyData]) -> Result<ReportFile, CliError> {
    let mode = Mode::from(config.mode);
    let federation = match mode {
        Mode::Federated => Some(config.federation(task.sample_ids().len(), config.server_behavior)?),
        Mode::Centralized => None,
    };
    let (report, run) = run_valuation(task, data, mode, config.method(), federation.as_ref())?;
    Ok(ReportFile::new(config.clone(), &report, run))
}

pub fn cmd_valuate(config: &RunConfig) -> Result<ReportFile, CliError> {
    config.validate()?;
    let (task, data) = load_parties(config)?;
    valuate_parties(config, &task, &data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    #[value(name = "n_parties", alias = "n-parties")]
    NParties,
    #[value(name = "features_per_party", alias = "features-per-party")]
    FeaturesPerParty,
    #[value(name = "n_samples", alias = "n-samples")]
    NSamples,
    #[value(name = "q")]
    Q,
    #[value(name = "n_r", alias = "n-r")]
    NR,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub value: u64,
    /// Median wall-clock over the repetitions.
    pub median_secs: f64,
    pub secs: Vec<f64>,
    /// Coalition-level count tables requested by the valuation.
    pub count_tables: u64,
    pub psi_rounds: u64,
    pub cells: u64,
    pub cmi_evaluations: usize,
    pub bytes_to_servers: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub sweep: SweepParam,
    pub mode: ModeArg,
    pub reps: usize,
    pub rows: Vec<BenchRow>,
    pub config: RunConfig,
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.is_empty() {
        f64::NAN
    } else if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

fn with_sweep_value(base: &RunConfig, sweep: SweepParam, value: u64) -> Result<RunConfig, CliError> {
    let mut config = base.clone();
    let as_u32 = |v: u64| u32::try_from(v).map_err(|_| CliError::Config(format!("sweep value {v} is too large")));
    match sweep {
        SweepParam::NParties => config.n_parties = Some(value as usize),
        SweepParam::FeaturesPerParty => config.features_per_party = value as usize,
        SweepParam::NSamples => {
            if config.input.is_some() {
                return Err(CliError::Config("an n_samples sweep needs generated data; drop --input".into()));
            }
            config.n_samples = value as usize;
        }
        SweepParam::Q => config.q = as_u32(value)?,
        SweepParam::NR => {
            config.nr_min = Some(as_u32(value)?);
            config.nr_max = Some(as_u32(value)?);
        }
    }
    config.validate()?;
    Ok(config)
}

/// One timed valuation per sweep value, repeated `reps` times.
pub fn cmd_bench(base: &RunConfig, sweep: SweepParam, values: &[u64], reps: usize) -> Result<BenchReport, CliError> {
    base.validate()?;
    if values.is_empty() || reps == 0 {
        return Err(CliError::Config("a sweep needs at least one value and one repetition".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let config = with_sweep_value(base, sweep, value)?;
        let (task, data) = load_parties(&config)?;
        let mut secs = Vec::with_capacity(reps);
        let mut last = None;
        for _ in 0..reps {
            let started = Instant::now();
            let report = valuate_parties(&config, &task, &data)?;
            secs.push(started.elapsed().as_secs_f64());
            last = Some(report);
        }
        let report = last.unwrap();
        rows.push(BenchRow {
            value,
            median_secs: median(&secs),
            secs,
            count_tables: report.run.stats.count_tables,
            psi_rounds: report.run.stats.psi_rounds,
            cells: report.run.stats.cells,
            cmi_evaluations: report.cmi_evaluations,
            bytes_to_servers: report.run.stats.bytes_to_servers,
        });
    }
    Ok(BenchReport { sweep, mode: base.mode, reps, rows, config: base.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub behavior: String,
    pub trials: usize,
    pub detected: usize,
    pub detection_rate: f64,
    /// Verified answers that differ from the plaintext intersection.
    pub wrong_accepted: usize,
    pub q: u32,
    pub nr_min: u32,
    pub nr_max: u32,
}

/// Random cross-party cell over at least two parties.
pub fn random_selection(parties: &[PartyData], rng: &mut impl Rng) -> Result<ValueAssignment, CliError> {
    let mut order: Vec<&PartyData> = parties.iter().filter(|p| p.table().n_columns() > 0).collect();
    if order.len() < 2 {
        return Err(CliError::Config("attack simulation needs two parties with features".into()));
    }
    order.shuffle(rng);
    let take = rng.gen_range(2..=order.len());
    let mut entries = Vec::new();
    for party in &order[..take] {
        let table = party.table();
        let column = rng.gen_range(0..table.n_columns());
        let value = rng.gen_range(0..table.arities()[column]);
        entries.push((Var::feature(party.party_id(), column), value));
    }
    Ok(ValueAssignment::new(entries)?)
}

/// Plaintext count of the rows every party's filter keeps.
pub fn plaintext_count(parties: &[PartyData], selection: &ValueAssignment) -> Result<u64, CliError> {
    let mut common: Option<BTreeSet<usize>> = None;
    for party in parties {
        let local = selection.for_party(party.party_id());
        if local.is_empty() {
            continue;
        }
        let rows: BTreeSet<usize> = matching_rows(party, &local)?.into_iter().collect();
        common = Some(match common {
            Some(c) => c.intersection(&rows).copied().collect(),
            None => rows,
        });
    }
    Ok(common.map_or(0, |c| c.len() as u64))
}

/// Runs `trials` protocol rounds against a computation server with the
/// given behavior and counts how many the parties reject.
pub fn cmd_attack_sim(config: &RunConfig, behavior: ServerBehavior, trials: usize) -> Result<AttackReport, CliError> {
    config.validate()?;
    let (task, data) = load_parties(config)?;
    let mut parties = vec![task];
    parties.extend(data);
    let psi = config.psi_config(parties[0].sample_ids().len())?;
    let (q, nr_min, nr_max) = (psi.q, psi.nr_min, psi.nr_max);
    let source = FederatedCounts::new(&parties, psi, Box::new(InProcessLink::new(behavior, config.seed)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_a77a_c4);

    let (mut detected, mut wrong_accepted) = (0, 0);
    for _ in 0..trials {
        let selection = random_selection(&parties, &mut rng)?;
        let query = CountQuery::new(source.next_query_id(), selection, source.config());
        match source.federated_count(&query)?.verdict {
            Verdict::ServerMisbehavior => detected += 1,
            Verdict::Verified(count) => {
                if count != plaintext_count(&parties, &query.selection)? {
                    wrong_accepted += 1;
                }
            }
        }
    }
    Ok(AttackReport {
        behavior: behavior.to_string(),
        trials,
        detected,
        detection_rate: if trials == 0 { 0.0 } else { detected as f64 / trials as f64 },
        wrong_accepted,
        q,
        nr_min,
        nr_max,
    })
}
