use fedvalue_core::infotheory::check_alignment;
use fedvalue_core::tabular::{
    assign_columns, discretize, equal_width_codes, local_pca, partition, prepare_parties, read_csv, BinningSpec,
    CategoricalTable, PartyData, PrepareOptions, RawColumn, RawTable,
};
use fedvalue_core::Error;
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

fn numeric_table(columns: &[Vec<f64>], label: Option<Vec<f64>>) -> RawTable {
    let n = columns[0].len();
    let mut named: Vec<(String, RawColumn)> =
        columns.iter().enumerate().map(|(i, c)| (format!("x{i}"), RawColumn::Numeric(c.clone()))).collect();
    let label_name = label.map(|l| {
        named.push(("y".into(), RawColumn::Numeric(l)));
        "y".to_string()
    });
    RawTable::new(ids(n), named, label_name).unwrap()
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix: (values, vectors as columns).
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = a.len();
    let mut v: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..p).flat_map(|i| (0..p).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-22 {
            break;
        }
        for i in 0..p {
            for j in i + 1..p {
                if a[i][j].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[j][j] - a[i][i]) / (2.0 * a[i][j]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..p {
                    let (aki, akj) = (a[k][i], a[k][j]);
                    a[k][i] = c * aki - s * akj;
                    a[k][j] = s * aki + c * akj;
                }
                for k in 0..p {
                    let (aik, ajk) = (a[i][k], a[j][k]);
                    a[i][k] = c * aik - s * ajk;
                    a[j][k] = s * aik + c * ajk;
                }
                for row in v.iter_mut() {
                    let (vi, vj) = (row[i], row[j]);
                    row[i] = c * vi - s * vj;
                    row[j] = s * vi + c * vj;
                }
            }
        }
    }
    let values = (0..p).map(|i| a[i][i]).collect();
    let vectors = (0..p).map(|j| (0..p).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

fn numeric(table: &RawTable, name: &str) -> Vec<f64> {
    match table.column(name).unwrap() {
        RawColumn::Numeric(v) => v.clone(),
        RawColumn::Categorical(_) => panic!("{name} is categorical"),
    }
}

#[test]
fn equal_width_bins_are_half_open() {
    let (codes, arity) = equal_width_codes("x", &[0.0, 2.0, 4.0, 6.0, 8.0, 10.0], 5).unwrap();
    assert_eq!(codes, [0, 1, 2, 3, 4, 4]);
    assert_eq!(arity, 5);
    let (codes, arity) = equal_width_codes("x", &[3.0, 3.0], 5).unwrap();
    assert_eq!((codes, arity), (vec![0, 0], 1));
    assert!(matches!(equal_width_codes("x", &[1.0, f64::NAN], 2), Err(Error::Domain(_))));
}

proptest! {
    #[test]
    fn binning_is_monotone_and_in_range(values in prop::collection::vec(-1e6f64..1e6, 1..200), bins in 1u32..12) {
        let (codes, arity) = equal_width_codes("x", &values, bins).unwrap();
        prop_assert!(codes.iter().all(|&c| c < arity));
        let mut pairs: Vec<(f64, u32)> = values.iter().copied().zip(codes).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn partitions_are_disjoint_and_aligned(n_cols in 2usize..12, parties in 1usize..5, fpp in 1usize..3, seed in any::<u64>()) {
        prop_assume!((parties + 1) * fpp <= n_cols);
        let groups = assign_columns(n_cols, parties, fpp, seed).unwrap();
        prop_assert_eq!(groups.len(), parties + 1);
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), (parties + 1) * fpp);
    }
}

#[test]
fn csv_parsing_and_schema_errors() {
    let csv = "id,a,kind,y\nr1,1.5,red,0\nr2,2.5,blue,1\nr3,0.5,red,1\n";
    let table = read_csv(csv.as_bytes(), Some("y"), Some("id")).unwrap();
    assert_eq!(table.sample_ids(), ["r1", "r2", "r3"]);
    assert!(matches!(table.column("kind"), Some(RawColumn::Categorical(_))));
    let cat = discretize(&table, BinningSpec::equal_width(2).unwrap()).unwrap();
    let kind = cat.position("kind").unwrap();
    assert_eq!(cat.columns()[kind], [1, 0, 1]);

    let dup = "id,a,y\nr1,1,0\nr1,2,1\n";
    assert!(matches!(read_csv(dup.as_bytes(), Some("y"), Some("id")), Err(Error::DuplicateId(_))));
    assert!(matches!(read_csv(csv.as_bytes(), Some("label"), Some("id")), Err(Error::Schema(_))));
    assert!(read_csv("id,a\nr1,1,9\n".as_bytes(), None, Some("id")).is_err());
    assert!(BinningSpec::equal_width(0).is_err());
}

#[test]
fn partition_keeps_rows_aligned() {
    let n = 40;
    let cols: Vec<Vec<f64>> = (0..6).map(|c| (0..n).map(|i| ((i * (c + 3)) % 11) as f64).collect()).collect();
    let label = (0..n).map(|i| (i % 2) as f64).collect();
    let table = discretize(&numeric_table(&cols, Some(label)), BinningSpec::default()).unwrap();
    let (task, data) = partition(&table, "y", 2, 2, 3).unwrap();
    assert_eq!(task.table().n_columns(), 2);
    assert!(data.iter().all(|d| d.table().n_columns() == 2));
    let mut parties = vec![task];
    parties.extend(data);
    check_alignment(&parties).unwrap();
    assert!(matches!(partition(&table, "y", 3, 2, 3), Err(Error::Partition(_))));

    let shifted: Vec<String> = ids(n).into_iter().rev().collect();
    let other = CategoricalTable::new(shifted, vec!["z".into()], vec![vec![0; n]], vec![1]).unwrap();
    parties.push(PartyData::data(9, other));
    assert!(matches!(check_alignment(&parties), Err(Error::Alignment(_))));
}

#[test]
fn pca_scores_are_uncorrelated_and_ordered() {
    let n = 200;
    let base: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
    let noise: Vec<f64> = (0..n).map(|i| ((i * 53) % 97) as f64 / 40.0).collect();
    let cols = vec![
        base.clone(),
        base.iter().zip(&noise).map(|(b, e)| 2.0 * b + e).collect(),
        noise.iter().map(|e| e * 0.5 + 1.0).collect(),
    ];
    let reduced = local_pca(&numeric_table(&cols, None), 3).unwrap();
    let scores: Vec<Vec<f64>> = (1..=3).map(|k| numeric(&reduced, &format!("pc{k}"))).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for i in 0..3 {
        assert!(scores[i].iter().sum::<f64>().abs() < 1e-8);
        for j in i + 1..3 {
            assert!(dot(&scores[i], &scores[j]).abs() < 1e-6, "pc{} and pc{} correlate", i + 1, j + 1);
        }
    }
    let var: Vec<f64> = scores.iter().map(|s| dot(s, s)).collect();
    assert!(var[0] >= var[1] && var[1] >= var[2]);

    // total variance is preserved
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n as f64;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let total: f64 = centered.iter().map(|c| dot(c, c)).sum();
    assert!((var.iter().sum::<f64>() - total).abs() < 1e-6 * total);
}

#[test]
fn pca_matches_a_jacobi_oracle() {
    let n = 150;
    let cols: Vec<Vec<f64>> = (0..4)
        .map(|c| (0..n).map(|i| (((i + 1) * (c * 7 + 3)) % 29) as f64 + (c as f64) * (i as f64).sqrt()).collect())
        .collect();
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let cov: Vec<Vec<f64>> = (0..4)
        .map(|a| {
            (0..4)
                .map(|b| (0..n).map(|i| (cols[a][i] - means[a]) * (cols[b][i] - means[b])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect();
    let (values, vectors) = jacobi(cov);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let reduced = local_pca(&numeric_table(&cols, None), 2).unwrap();
    for (k, &axis) in order.iter().take(2).enumerate() {
        let expected: Vec<f64> =
            (0..n).map(|i| (0..4).map(|c| (cols[c][i] - means[c]) * vectors[axis][c]).sum()).collect();
        let got = numeric(&reduced, &format!("pc{}", k + 1));
        let sign = if expected.iter().zip(&got).map(|(e, g)| e * g).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        let worst = expected.iter().zip(&got).map(|(e, g)| (sign * e - g).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "pc{} differs by {worst}", k + 1);
    }
}

#[test]
fn prepare_with_pca_reduces_each_party() {
    let n = 60;
    let cols: Vec<Vec<f64>> = (0..6).map(|c| (0..n).map(|i| ((i * (2 * c + 1)) % 13) as f64).collect()).collect();
    let label = (0..n).map(|i| (i % 3) as f64).collect();
    let table = numeric_table(&cols, Some(label));
    let options = PrepareOptions { bins: 4, pca_components: Some(1), n_parties: 2, features_per_party: 2, seed: 1 };
    let (task, data) = prepare_parties(&table, "y", options).unwrap();
    assert_eq!(task.table().names(), ["pc1"]);
    assert_eq!(task.label().unwrap().arity, 3);
    assert!(data.iter().all(|d| d.table().names() == ["pc1"] && d.table().arities()[0] <= 4));
}
