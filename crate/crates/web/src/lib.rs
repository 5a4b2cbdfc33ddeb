//! Browser demo bindings. Every export takes plain numbers and returns a
//! JSON string; the `*_json` functions hold the logic and run natively too.

use std::collections::BTreeMap;

use fedvalue_core::federation::{FederatedCounts, InProcessLink};
use fedvalue_core::infotheory::{CentralCounts, ValueAssignment, Var};
use fedvalue_core::psi::{CountQuery, PsiConfig, ServerBehavior, Verdict};
use fedvalue_core::shapley::{shapley, Game, Method};
use fedvalue_core::synth::{synthetic_parties, SyntheticSpec};
use fedvalue_core::tabular::{PartyData, PartyId};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_DEMO_PARTIES: usize = 10;
const MAX_DEMO_SAMPLES: usize = 50_000;

#[derive(Serialize)]
struct PartyRow {
    party: PartyId,
    exact: f64,
    sampled: f64,
}

#[derive(Serialize)]
struct Valuation {
    total_cmi: f64,
    parties: Vec<PartyRow>,
    permutations: usize,
}

#[derive(Serialize)]
struct Detection {
    behavior: String,
    trials: usize,
    detected: usize,
    detection_rate: f64,
    wrong_accepted: usize,
}

#[derive(Serialize)]
struct ConvergencePoint {
    k: usize,
    mape: f64,
}

fn fixture(n_samples: usize, n_parties: usize, arity: u32, signal: f64, seed: u64) -> Result<Vec<PartyData>, String> {
    if n_parties == 0 || n_parties > MAX_DEMO_PARTIES {
        return Err(format!("parties must be between 1 and {MAX_DEMO_PARTIES}"));
    }
    if n_samples == 0 || n_samples > MAX_DEMO_SAMPLES {
        return Err(format!("samples must be between 1 and {MAX_DEMO_SAMPLES}"));
    }
    let spec = SyntheticSpec { n_samples, n_parties, features_per_party: 1, arity, signal, seed };
    let (task, data) = synthetic_parties(spec).map_err(|e| e.to_string())?;
    let mut parties = vec![task];
    parties.extend(data);
    Ok(parties)
}

fn phi(parties: &[PartyData], method: Method) -> Result<fedvalue_core::shapley::ShapleyReport, String> {
    let game = Game::new(&parties[0], &parties[1..]).map_err(|e| e.to_string())?;
    let source = CentralCounts::new(parties).map_err(|e| e.to_string())?;
    shapley(&game, &source, method).map_err(|e| e.to_string())
}

fn to_json(value: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// Exact and sampled Shapley-CMI values on generated data.
pub fn valuate_json(n_samples: usize, n_parties: usize, arity: u32, signal: f64, samples: usize, seed: u64) -> Result<String, String> {
    let parties = fixture(n_samples, n_parties, arity, signal, seed)?;
    let exact = phi(&parties, Method::Exact)?;
    let sampled = phi(&parties, Method::Sampled { k: samples.max(1), seed })?;
    let rows = exact
        .phi
        .iter()
        .map(|(&party, &v)| PartyRow { party, exact: v, sampled: sampled.phi[&party] })
        .collect();
    to_json(&Valuation { total_cmi: exact.total_cmi, parties: rows, permutations: sampled.permutations })
}

/// Detection rate of a misbehaving computation server over random cells.
pub fn attack_json(behavior: &str, trials: usize, q: u32, nr_min: u32, nr_max: u32, seed: u64) -> Result<String, String> {
    let behavior: ServerBehavior = behavior.parse().map_err(|e: fedvalue_core::Error| e.to_string())?;
    let parties = fixture(200, 3, 3, 1.0, seed)?;
    let config = PsiConfig::new(q, nr_min, nr_max, b"demo-shared-key", b"demo-group-key").map_err(|e| e.to_string())?;
    let source = FederatedCounts::new(&parties, config, Box::new(InProcessLink::new(behavior, seed))).map_err(|e| e.to_string())?;

    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut next = |bound: u32| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % u64::from(bound)) as u32
    };
    let (mut detected, mut wrong_accepted) = (0, 0);
    for _ in 0..trials {
        let first = next(3) as usize + 1;
        let second = (first + next(2) as usize) % 3 + 1;
        let entries: Vec<(Var, u32)> = [0, first, second]
            .iter()
            .map(|&p| (Var::feature(p as PartyId, 0), next(3)))
            .collect::<BTreeMap<_, _>>()
            .into_iter()
            .collect();
        let selection = ValueAssignment::new(entries).map_err(|e| e.to_string())?;
        let query = CountQuery::new(source.next_query_id(), selection, source.config());
        match source.federated_count(&query).map_err(|e| e.to_string())?.verdict {
            Verdict::ServerMisbehavior => detected += 1,
            Verdict::Verified(count) => {
                let truth = (0..parties[0].sample_ids().len())
                    .filter(|&r| {
                        query.selection.entries().iter().all(|(v, value)| {
                            parties[v.party as usize].table().columns()[0][r] == *value
                        })
                    })
                    .count() as u64;
                if count != truth {
                    wrong_accepted += 1;
                }
            }
        }
    }
    to_json(&Detection {
        behavior: behavior.to_string(),
        trials,
        detected,
        detection_rate: if trials == 0 { 0.0 } else { detected as f64 / trials as f64 },
        wrong_accepted,
    })
}

/// Mean absolute percentage error of sampled values against exact ones,
/// averaged over `seeds` runs per sample budget.
pub fn convergence_json(n_parties: usize, seeds: u64, ks: &[usize], seed: u64) -> Result<String, String> {
    let parties = fixture(2000, n_parties, 3, 1.0, seed)?;
    let exact = phi(&parties, Method::Exact)?;
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut total = 0.0;
        for s in 0..seeds.max(1) {
            let sampled = phi(&parties, Method::Sampled { k: k.max(1), seed: s })?;
            let terms: Vec<f64> = exact
                .phi
                .iter()
                .filter(|(_, v)| v.abs() > 1e-12)
                .map(|(id, v)| ((sampled.phi[id] - v) / v).abs())
                .collect();
            total += 100.0 * terms.iter().sum::<f64>() / terms.len().max(1) as f64;
        }
        points.push(ConvergencePoint { k, mape: total / seeds.max(1) as f64 });
    }
    to_json(&points)
}

#[wasm_bindgen]
pub fn valuate(n_samples: usize, n_parties: usize, arity: u32, signal: f64, samples: usize, seed: u32) -> Result<String, JsError> {
    valuate_json(n_samples, n_parties, arity, signal, samples, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn attack(behavior: &str, trials: usize, q: u32, nr_min: u32, nr_max: u32, seed: u32) -> Result<String, JsError> {
    attack_json(behavior, trials, q, nr_min, nr_max, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn convergence(n_parties: usize, seeds: u32, ks: Vec<u32>, seed: u32) -> Result<String, JsError> {
    let ks: Vec<usize> = ks.into_iter().map(|k| k as usize).collect();
    convergence_json(n_parties, u64::from(seeds), &ks, u64::from(seed)).map_err(|e| JsError::new(&e))
}
