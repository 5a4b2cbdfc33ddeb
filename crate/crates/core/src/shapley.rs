//! Shapley-CMI valuation of data parties.
//!
//! The game value of a coalition `D` is `I(X_D; Y | X_t)`. Three evaluators
//! are provided over any [`CountSource`]:
//!
//! * [`shapley_cmi_exact`] memoizes the value of every coalition once and
//!   applies the subset-weighted Shapley sum (`2^n - 1` CMI evaluations).
//! * [`shapley_cmi_permutations`] walks every joining order and averages the
//!   marginal CMIs `I(X_d; Y | X_preceding X_t)` directly.
//! * [`shapley_cmi_sampled`] averages the same marginals over orders drawn
//!   uniformly with replacement.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infotheory::{cmi, party_vars, CountSource, Var};
use crate::tabular::{PartyData, PartyId};

pub const MAX_EXACT_PARTIES: usize = 20;
pub const MAX_PERMUTATION_PARTIES: usize = 8;

/// The valuation game: task features and label, and each data party's columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Game {
    task_features: Vec<Var>,
    label: Var,
    parties: Vec<(PartyId, Vec<Var>)>,
}

impl Game {
    pub fn new(task: &PartyData, data: &[PartyData]) -> Result<Self> {
        if task.label().is_none() {
            return Err(Error::Schema(format!("party {} holds no label", task.party_id())));
        }
        let mut parties = Vec::with_capacity(data.len());
        for party in data {
            if party.label().is_some() {
                return Err(Error::Schema(format!("data party {} holds a label", party.party_id())));
            }
            if party.party_id() == task.party_id() || parties.iter().any(|(id, _)| *id == party.party_id()) {
                return Err(Error::Schema(format!("party id {} used twice", party.party_id())));
            }
            parties.push((party.party_id(), party_vars(party, false)));
        }
        Ok(Self { task_features: party_vars(task, false), label: Var::label(task.party_id()), parties })
    }

    pub fn from_vars(task_features: Vec<Var>, label: Var, parties: Vec<(PartyId, Vec<Var>)>) -> Self {
        Self { task_features, label, parties }
    }

    pub fn n_parties(&self) -> usize {
        self.parties.len()
    }

    pub fn party_ids(&self) -> Vec<PartyId> {
        self.parties.iter().map(|(id, _)| *id).collect()
    }

    pub fn label(&self) -> Var {
        self.label
    }

    pub fn task_features(&self) -> &[Var] {
        &self.task_features
    }

    fn coalition_vars(&self, coalition: Coalition) -> Vec<Var> {
        coalition
            .indices(self.parties.len())
            .flat_map(|i| self.parties[i].1.iter().copied())
            .collect()
    }

    fn conditioning(&self, coalition: Coalition) -> Vec<Var> {
        let mut vars = self.coalition_vars(coalition);
        vars.extend_from_slice(&self.task_features);
        vars
    }
}

/// A set of data parties, as a bitmask over their positions in the [`Game`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coalition(u32);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn full(n: usize) -> Self {
        Coalition(((1u64 << n) - 1) as u32)
    }

    pub fn contains(self, index: usize) -> bool {
        self.0 & (1 << index) != 0
    }

    pub fn with(self, index: usize) -> Self {
        Coalition(self.0 | (1 << index))
    }

    pub fn size(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn indices(self, n: usize) -> impl Iterator<Item = usize> {
        (0..n).filter(move |&i| self.contains(i))
    }

    pub fn bits(self) -> u32 {
        self.0
    }
}

/// `|D|! (n - |D| - 1)! / n!`, the probability that party `d` joins right
/// after exactly the members of a given `D` in a uniformly random order.
pub fn shapley_weight(coalition_size: usize, n_parties: usize) -> Result<Ratio<u128>> {
    if coalition_size >= n_parties || n_parties > 30 {
        return Err(Error::Domain(format!(
            "no Shapley weight for a coalition of {coalition_size} among {n_parties} parties"
        )));
    }
    let factorial = |k: usize| (1..=k as u128).product::<u128>();
    Ok(Ratio::new(
        factorial(coalition_size) * factorial(n_parties - coalition_size - 1),
        factorial(n_parties),
    ))
}

fn weight_f64(coalition_size: usize, n_parties: usize) -> f64 {
    let w = shapley_weight(coalition_size, n_parties).expect("size checked by caller");
    *w.numer() as f64 / *w.denom() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Exact,
    Permutations,
    Sampled { k: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub phi: BTreeMap<PartyId, f64>,
    pub method: Method,
    /// Orderings walked (permutation and sampled methods only).
    pub permutations: usize,
    /// Distinct CMI values computed through the count source.
    pub cmi_evaluations: usize,
    pub cache_hits: usize,
    /// `I(X_all; Y | X_t)`, the grand-coalition value.
    pub total_cmi: f64,
}

impl ShapleyReport {
    pub fn phi_sum(&self) -> f64 {
        self.phi.values().sum()
    }

    /// Party with the largest value; ties go to the smallest id.
    pub fn argmax(&self) -> Option<PartyId> {
        self.phi
            .iter()
            .fold(None, |best: Option<(PartyId, f64)>, (&id, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((id, v)),
            })
            .map(|(id, _)| id)
    }
}

/// Marginal-CMI cache keyed by (preceding coalition, joining party).
#[derive(Default)]
struct MarginalCache {
    values: Mutex<HashMap<(Coalition, usize), f64>>,
    evaluations: AtomicUsize,
    hits: AtomicUsize,
}

impl MarginalCache {
    fn get_or_compute(&self, game: &Game, source: &dyn CountSource, before: Coalition, party: usize) -> Result<f64> {
        if let Some(&v) = self.values.lock().unwrap().get(&(before, party)) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v);
        }
        let value = cmi(source, &game.parties[party].1, game.label, &game.conditioning(before))?.nats();
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        Ok(*self.values.lock().unwrap().entry((before, party)).or_insert(value))
    }
}

fn coalition_value(game: &Game, source: &dyn CountSource, coalition: Coalition) -> Result<f64> {
    if coalition == Coalition::EMPTY {
        return Ok(0.0);
    }
    Ok(cmi(source, &game.coalition_vars(coalition), game.label, &game.task_features)?.nats())
}

/// Subset-weighted Shapley-CMI over memoized coalition values.
pub fn shapley_cmi_exact(game: &Game, source: &dyn CountSource) -> Result<ShapleyReport> {
    let n = game.n_parties();
    if n > MAX_EXACT_PARTIES {
        return Err(Error::Scale { parties: n, limit: MAX_EXACT_PARTIES });
    }
    let size = 1usize << n;
    let mut values = vec![0.0; size];
    for (mask, slot) in values.iter_mut().enumerate().skip(1) {
        *slot = coalition_value(game, source, Coalition(mask as u32))?;
    }

    let weights: Vec<f64> = (0..n.max(1)).map(|s| if n == 0 { 0.0 } else { weight_f64(s, n) }).collect();
    let mut phi = BTreeMap::new();
    for (i, (id, _)) in game.parties.iter().enumerate() {
        let mut total = 0.0;
        for mask in 0..size as u32 {
            let coalition = Coalition(mask);
            if coalition.contains(i) {
                continue;
            }
            let marginal = values[coalition.with(i).0 as usize] - values[mask as usize];
            total += weights[coalition.size()] * marginal;
        }
        phi.insert(*id, total);
    }

    Ok(ShapleyReport {
        phi,
        method: Method::Exact,
        permutations: 0,
        cmi_evaluations: size - 1,
        cache_hits: 0,
        total_cmi: values[size - 1],
    })
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                extend(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

fn average_over_orders(
    game: &Game,
    source: &dyn CountSource,
    orders: impl Iterator<Item = Vec<usize>>,
    method: Method,
) -> Result<ShapleyReport> {
    let n = game.n_parties();
    let cache = MarginalCache::default();
    let mut sums = vec![0.0; n];
    let mut walked = 0usize;
    for order in orders {
        let mut before = Coalition::EMPTY;
        for &party in &order {
            sums[party] += cache.get_or_compute(game, source, before, party)?;
            before = before.with(party);
        }
        walked += 1;
    }
    let total_cmi = coalition_value(game, source, Coalition::full(n))?;
    let phi = game
        .parties
        .iter()
        .zip(&sums)
        .map(|((id, _), s)| (*id, s / walked as f64))
        .collect();
    Ok(ShapleyReport {
        phi,
        method,
        permutations: walked,
        cmi_evaluations: cache.evaluations.load(Ordering::Relaxed) + usize::from(n > 0),
        cache_hits: cache.hits.load(Ordering::Relaxed),
        total_cmi,
    })
}

/// Averages marginal CMIs over every joining order of the data parties.
pub fn shapley_cmi_permutations(game: &Game, source: &dyn CountSource) -> Result<ShapleyReport> {
    let n = game.n_parties();
    if n > MAX_PERMUTATION_PARTIES {
        return Err(Error::Scale { parties: n, limit: MAX_PERMUTATION_PARTIES });
    }
    average_over_orders(game, source, all_permutations(n).into_iter(), Method::Permutations)
}

/// Monte-Carlo estimate over `k` orders drawn uniformly with replacement.
pub fn shapley_cmi_sampled(game: &Game, source: &dyn CountSource, k: usize, seed: u64) -> Result<ShapleyReport> {
    if k == 0 {
        return Err(Error::Domain("sample count must be at least 1".into()));
    }
    let n = game.n_parties();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orders = (0..k).map(move |_| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    });
    average_over_orders(game, source, orders, Method::Sampled { k, seed })
}

pub fn shapley(game: &Game, source: &dyn CountSource, method: Method) -> Result<ShapleyReport> {
    match method {
        Method::Exact => shapley_cmi_exact(game, source),
        Method::Permutations => shapley_cmi_permutations(game, source),
        Method::Sampled { k, seed } => shapley_cmi_sampled(game, source, k, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infotheory::CentralCounts;
    use crate::tabular::{CategoricalTable, LabelColumn};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn single(column: Vec<u32>, arity: u32) -> CategoricalTable {
        let n = column.len();
        CategoricalTable::new(ids(n), vec!["c".into()], vec![column], vec![arity]).unwrap()
    }

    fn fixture(data_columns: Vec<Vec<u32>>) -> (PartyData, Vec<PartyData>) {
        let n = data_columns[0].len();
        let xt: Vec<u32> = (0..n).map(|i| ((i * 7 + 3) % 5 % 2) as u32).collect();
        let y: Vec<u32> = (0..n).map(|i| ((i * 3 + i / 4) % 2) as u32).collect();
        let task = PartyData::task(0, single(xt, 2), LabelColumn { name: "y".into(), codes: y, arity: 2 }).unwrap();
        let data = data_columns
            .into_iter()
            .enumerate()
            .map(|(i, c)| PartyData::data(i as PartyId + 1, single(c, 2)))
            .collect();
        (task, data)
    }

    #[test]
    fn weights() {
        assert_eq!(shapley_weight(0, 1).unwrap(), Ratio::from_integer(1));
        assert_eq!(shapley_weight(1, 3).unwrap(), Ratio::new(1, 6));
        assert!(shapley_weight(3, 3).is_err());
        // all subsets of the other 3 parties when |D| = 4
        let total: Ratio<u128> = (0u32..8)
            .map(|mask| shapley_weight(mask.count_ones() as usize, 4).unwrap())
            .sum();
        assert_eq!(total, Ratio::from_integer(1));
    }

    #[test]
    fn one_party_gets_its_cmi() {
        let (task, data) = fixture(vec![vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0]]);
        let mut all = vec![task.clone()];
        all.extend(data.iter().cloned());
        let source = CentralCounts::new(&all).unwrap();
        let game = Game::new(&task, &data).unwrap();
        let expected = cmi(&source, &[Var::feature(1, 0)], Var::label(0), &[Var::feature(0, 0)]).unwrap().nats();
        for report in [
            shapley_cmi_exact(&game, &source).unwrap(),
            shapley_cmi_permutations(&game, &source).unwrap(),
            shapley_cmi_sampled(&game, &source, 17, 5).unwrap(),
        ] {
            assert!((report.phi[&1] - expected).abs() < 1e-12);
        }
        assert_eq!(shapley_cmi_permutations(&game, &source).unwrap().permutations, 1);
    }

    #[test]
    fn identical_parties_split_evenly() {
        let column = vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 1];
        let (task, data) = fixture(vec![column.clone(), column]);
        let mut all = vec![task.clone()];
        all.extend(data.iter().cloned());
        let source = CentralCounts::new(&all).unwrap();
        let game = Game::new(&task, &data).unwrap();
        let report = shapley_cmi_exact(&game, &source).unwrap();
        let alone = cmi(&source, &[Var::feature(1, 0)], Var::label(0), &[Var::feature(0, 0)]).unwrap().nats();
        assert!((report.phi[&1] - alone / 2.0).abs() < 1e-12);
        assert_eq!(report.phi[&1], report.phi[&2]);
        assert_eq!(shapley_cmi_permutations(&game, &source).unwrap().permutations, 2);
    }

    #[test]
    fn scale_limits() {
        let columns: Vec<Vec<u32>> = (0..9).map(|i| vec![i % 2, 1 - i % 2]).collect();
        let (task, data) = fixture(columns);
        let mut all = vec![task.clone()];
        all.extend(data.iter().cloned());
        let source = CentralCounts::new(&all).unwrap();
        let game = Game::new(&task, &data).unwrap();
        assert!(matches!(shapley_cmi_permutations(&game, &source), Err(Error::Scale { parties: 9, .. })));
        assert!(matches!(shapley_cmi_sampled(&game, &source, 0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (task, data) = fixture((0..4).map(|p| (0..40).map(|i| ((i * (p + 2)) / 3 % 2) as u32).collect()).collect());
        let mut all = vec![task.clone()];
        all.extend(data.iter().cloned());
        let source = CentralCounts::new(&all).unwrap();
        let game = Game::new(&task, &data).unwrap();
        let a = shapley_cmi_sampled(&game, &source, 30, 11).unwrap();
        let b = shapley_cmi_sampled(&game, &source, 30, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.cmi_evaluations <= 4 * 8 + 1);
        assert!(a.cache_hits > 0);
    }

    #[test]
    fn permutation_listing() {
        let perms = all_permutations(3);
        assert_eq!(perms.len(), 6);
        assert_eq!(perms[0], [0, 1, 2]);
        assert_eq!(perms[5], [2, 1, 0]);
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        let report = ShapleyReport {
            phi: [(1, 0.5), (2, 0.7), (3, 0.7)].into_iter().collect(),
            method: Method::Exact,
            permutations: 0,
            cmi_evaluations: 0,
            cache_hits: 0,
            total_cmi: 1.9,
        };
        assert_eq!(report.argmax(), Some(2));
    }
}
