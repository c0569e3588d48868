use pilot_core::model::{CategoryId, ItemCategory};
use pilot_core::opponent::{ModelRejection, OpponentModel};
use pilot_core::protocol::PrefStatement;
use proptest::prelude::*;

fn categories(n: usize) -> Vec<ItemCategory> {
    (0..n)
        .map(|i| ItemCategory {
            id: CategoryId(i),
            name: format!("C{}", i + 1),
            quantity: 1,
        })
        .collect()
}

fn statement(n: usize) -> impl Strategy<Value = PrefStatement> {
    let c = 0..n;
    prop_oneof![
        c.clone().prop_map(|i| PrefStatement::Best { category: CategoryId(i) }),
        c.clone().prop_map(|i| PrefStatement::Worst { category: CategoryId(i) }),
        (c.clone(), c).prop_map(|(a, b)| PrefStatement::Prefer {
            better: CategoryId(a),
            worse: CategoryId(b),
        }),
    ]
}

fn case() -> impl Strategy<Value = (usize, Vec<PrefStatement>)> {
    (2usize..=6).prop_flat_map(|n| (Just(n), prop::collection::vec(statement(n), 0..10)))
}

/// Pairs a statement asserts, written out directly.
fn pairs(stmt: &PrefStatement, n: usize) -> Vec<(usize, usize)> {
    match *stmt {
        PrefStatement::Best { category } => (0..n).filter(|x| *x != category.0).map(|x| (category.0, x)).collect(),
        PrefStatement::Worst { category } => (0..n).filter(|x| *x != category.0).map(|x| (x, category.0)).collect(),
        PrefStatement::Prefer { better, worse } => vec![(better.0, worse.0)],
    }
}

/// Warshall closure; consistent iff nothing ends up above itself.
fn consistent(rel: &[(usize, usize)], n: usize) -> bool {
    let mut m = vec![vec![false; n]; n];
    for &(a, b) in rel {
        m[a][b] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if m[i][k] && m[k][j] {
                    m[i][j] = true;
                }
            }
        }
    }
    (0..n).all(|i| !m[i][i])
}

proptest! {
    #[test]
    fn ingest_accepts_exactly_the_consistent_statements((n, stmts) in case()) {
        let cats = categories(n);
        let mut model = OpponentModel::new();
        let mut kept: Vec<(usize, usize)> = Vec::new();
        let mut accepted = 0;
        for s in &stmts {
            let mut trial = kept.clone();
            trial.extend(pairs(s, n));
            match model.ingest(s, &cats) {
                Ok(next) => {
                    prop_assert!(consistent(&trial, n));
                    model = next;
                    kept = trial;
                    accepted += 1;
                }
                Err(e) => {
                    prop_assert_eq!(e, ModelRejection::Contradiction);
                    prop_assert!(!consistent(&trial, n));
                }
            }
            prop_assert_eq!(model.statement_count(), accepted);
            let stored: Vec<(usize, usize)> = model.relations().iter().map(|(a, b)| (a.0, b.0)).collect();
            prop_assert!(consistent(&stored, n));
        }
    }

    #[test]
    fn tiers_respect_every_relation((n, stmts) in case()) {
        let cats = categories(n);
        let model = stmts.iter().fold(OpponentModel::new(), |m, s| m.ingest(s, &cats).unwrap_or(m));
        let tiers = model.rank_partition(&cats);
        let mut seen: Vec<usize> = tiers.iter().flatten().map(|c| c.0).collect();
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!(tiers.iter().all(|t| !t.is_empty()));

        let tier_of = |c: CategoryId| tiers.iter().position(|t| t.contains(&c)).unwrap();
        let values = model.estimated_values(&cats);
        for (a, b) in model.relations() {
            prop_assert!(tier_of(*a) < tier_of(*b));
            prop_assert!(values[a] > values[b]);
        }
        prop_assert_eq!(values.values().max().copied(), Some(tiers.len() as u32));
        prop_assert!(values.values().all(|v| *v >= 1));
    }

    #[test]
    fn consistent_sets_do_not_depend_on_order((n, stmts) in case(), seed in any::<u64>()) {
        let cats = categories(n);
        let forward: Option<OpponentModel> =
            stmts.iter().try_fold(OpponentModel::new(), |m, s| m.ingest(s, &cats).ok());
        if let Some(forward) = forward {
            let mut shuffled = stmts.clone();
            let len = shuffled.len();
            for i in (1..len).rev() {
                let j = (seed.rotate_left(i as u32) % (i as u64 + 1)) as usize;
                shuffled.swap(i, j);
            }
            let other = shuffled.iter().try_fold(OpponentModel::new(), |m, s| m.ingest(s, &cats).ok());
            prop_assert_eq!(other, Some(forward));
        }
    }

    #[test]
    fn unknown_categories_are_refused(n in 2usize..=6, extra in 0usize..4) {
        let cats = categories(n);
        let stray = CategoryId(n + extra);
        let m = OpponentModel::new();
        prop_assert_eq!(m.ingest(&PrefStatement::Best { category: stray }, &cats), Err(ModelRejection::UnknownCategory(stray)));
        prop_assert_eq!(m.statement_count(), 0);
    }
}
