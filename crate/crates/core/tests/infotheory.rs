use std::collections::HashMap;

use fedvalue_core::infotheory::{cmi, cmi_chain_decompose, joint_counts, CentralCounts, Var};
use fedvalue_core::tabular::{CategoricalTable, LabelColumn, PartyData};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("r{i}")).collect()
}

fn arity(col: &[u32]) -> u32 {
    col.iter().copied().max().unwrap_or(0) + 1
}

/// Task party 0 holds `t` and label `y`; party 1 holds `a`, party 2 holds `b`.
fn parties(t: &[u32], y: &[u32], a: &[u32], b: &[u32]) -> Vec<PartyData> {
    let ids = ids(t.len());
    let table = |name: &str, col: &[u32]| {
        CategoricalTable::new(ids.clone(), vec![name.into()], vec![col.to_vec()], vec![arity(col)]).unwrap()
    };
    vec![
        PartyData::task(0, table("t", t), LabelColumn { name: "y".into(), codes: y.to_vec(), arity: arity(y) }).unwrap(),
        PartyData::data(1, table("a", a)),
        PartyData::data(2, table("b", b)),
    ]
}

const T: Var = Var { party: 0, column: fedvalue_core::infotheory::Column::Feature(0) };
const Y: Var = Var { party: 0, column: fedvalue_core::infotheory::Column::Label };
const A: Var = Var { party: 1, column: fedvalue_core::infotheory::Column::Feature(0) };
const B: Var = Var { party: 2, column: fedvalue_core::infotheory::Column::Feature(0) };

/// Plug-in entropy in nats of the tuples formed by `cols`, row by row.
fn entropy(cols: &[&[u32]]) -> f64 {
    let n = cols[0].len();
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for r in 0..n {
        *counts.entry(cols.iter().map(|c| c[r]).collect()).or_default() += 1;
    }
    counts.values().map(|&c| {
        let p = c as f64 / n as f64;
        -p * p.ln()
    }).sum()
}

/// `H(X,C) + H(Y,C) - H(X,Y,C) - H(C)`.
fn entropy_cmi(x: &[u32], y: &[u32], c: &[u32]) -> f64 {
    entropy(&[x, c]) + entropy(&[y, c]) - entropy(&[x, y, c]) - entropy(&[c])
}

fn columns(max_n: usize) -> impl Strategy<Value = (Vec<u32>, Vec<u32>, Vec<u32>, Vec<u32>)> {
    (2..max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(0u32..3, n),
            prop::collection::vec(0u32..2, n),
            prop::collection::vec(0u32..4, n),
            prop::collection::vec(0u32..3, n),
        )
    })
}

#[test]
fn textbook_mutual_information() {
    // X uniform on {0,1}, Y = X: I = ln 2
    let x = [0, 1, 0, 1];
    let p = parties(&[0; 4], &x, &x, &[0; 4]);
    let source = CentralCounts::new(&p).unwrap();
    assert!((cmi(&source, &[A], Y, &[]).unwrap().nats() - 2f64.ln()).abs() < 1e-12);
    assert!((cmi(&source, &[A], Y, &[]).unwrap().bits() - 1.0).abs() < 1e-12);
    // independent columns: I = 0
    let p = parties(&[0; 4], &[0, 0, 1, 1], &[0, 1, 0, 1], &[0; 4]);
    let source = CentralCounts::new(&p).unwrap();
    assert_eq!(cmi(&source, &[A], Y, &[]).unwrap().nats(), 0.0);
}

#[test]
fn xor_needs_the_condition() {
    // y = a xor t: a alone says nothing, given t it says everything
    let t = [0, 0, 1, 1];
    let a = [0, 1, 0, 1];
    let y = [0, 1, 1, 0];
    let p = parties(&t, &y, &a, &[0; 4]);
    let source = CentralCounts::new(&p).unwrap();
    assert!(cmi(&source, &[A], Y, &[]).unwrap().nats().abs() < 1e-12);
    assert!((cmi(&source, &[A], Y, &[T]).unwrap().nats() - 2f64.ln()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cmi_is_nonnegative((t, y, a, b) in columns(60)) {
        let p = parties(&t, &y, &a, &b);
        let source = CentralCounts::new(&p).unwrap();
        for (target, cond) in [(vec![A], vec![T]), (vec![A, B], vec![T]), (vec![B], vec![A, T]), (vec![A], vec![])] {
            prop_assert!(cmi(&source, &target, Y, &cond).unwrap().nats() >= 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_the_entropy_oracle((t, y, a, b) in columns(80)) {
        let p = parties(&t, &y, &a, &b);
        let source = CentralCounts::new(&p).unwrap();
        let got = cmi(&source, &[A], Y, &[T]).unwrap().nats();
        prop_assert!((got - entropy_cmi(&a, &y, &t).max(0.0)).abs() < 1e-12);
        let got = cmi(&source, &[A], Y, &[]).unwrap().nats();
        let zeros = vec![0; t.len()];
        prop_assert!((got - entropy_cmi(&a, &y, &zeros).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn chain_rule((t, y, a, b) in columns(80)) {
        let p = parties(&t, &y, &a, &b);
        let source = CentralCounts::new(&p).unwrap();
        let (whole, first, second) = cmi_chain_decompose(&source, &[A], &[B], Y, &[T]).unwrap();
        prop_assert!((whole.nats() - first.nats() - second.nats()).abs() < 1e-9);
        let direct = cmi(&source, &[A, B], Y, &[T]).unwrap().nats();
        prop_assert!((whole.nats() - direct).abs() < 1e-12);
    }

    #[test]
    fn symmetric_in_target_and_label((t, y, a, b) in columns(80)) {
        let p = parties(&t, &y, &a, &b);
        let source = CentralCounts::new(&p).unwrap();
        let ab = cmi(&source, &[A], B, &[T]).unwrap().nats();
        let ba = cmi(&source, &[B], A, &[T]).unwrap().nats();
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn replication_leaves_cmi_unchanged((t, y, a, b) in columns(40), k in 2usize..5) {
        let rep = |c: &[u32]| c.iter().cycle().take(c.len() * k).copied().collect::<Vec<_>>();
        let p = parties(&t, &y, &a, &b);
        let q = parties(&rep(&t), &rep(&y), &rep(&a), &rep(&b));
        let once = cmi(&CentralCounts::new(&p).unwrap(), &[A, B], Y, &[T]).unwrap().nats();
        let many = cmi(&CentralCounts::new(&q).unwrap(), &[A, B], Y, &[T]).unwrap().nats();
        prop_assert!((once - many).abs() < 1e-12);
    }

    #[test]
    fn marginals_of_the_joint_table((t, y, a, b) in columns(60)) {
        let p = parties(&t, &y, &a, &b);
        let joint = joint_counts(&p, &[T, Y, A, B]).unwrap();
        prop_assert_eq!(joint.cells().values().sum::<u64>(), t.len() as u64);
        prop_assert_eq!(joint.marginal(&[A, Y]).unwrap(), joint_counts(&p, &[Y, A]).unwrap());
    }
}

#[test]
fn overlapping_chain_sets_are_rejected() {
    let p = parties(&[0, 1], &[0, 1], &[1, 0], &[0, 0]);
    let source = CentralCounts::new(&p).unwrap();
    assert!(cmi_chain_decompose(&source, &[A], &[A, B], Y, &[]).is_err());
}
