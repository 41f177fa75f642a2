mod common;

use netlogic::circuit::{build_logical, build_numeric, net_operand_atom, AffineAtom};
use netlogic::datasets::Tier;
use netlogic::states::{enumerate_states, refine_boundary};
use netlogic::verify::{
    minmax_table_agrees, run_property_suite, run_property_suite_with, verify_logical, verify_numeric,
    FINE_AGREEMENT, PROP_LEMMA, PROP_MINMAX_TABLE, PROP_SADDLE,
};
use rand::{Rng, SeedableRng};

/// Saddle value of a table by scanning every row and column index.
fn saddle(table: &[Vec<f64>]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for row in table {
        let mut worst = f64::INFINITY;
        for &v in row {
            if v < worst {
                worst = v;
            }
        }
        if worst > best {
            best = worst;
        }
    }
    best
}

#[test]
fn minmax_logic_on_random_tables() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (a, b) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let table: Vec<Vec<f64>> = (0..a)
            .map(|_| (0..b).map(|_| rng.random_range(-2i32..=2) as f64 * 0.5).collect())
            .collect();
        assert!(minmax_table_agrees(&table));
        let some_row_nonneg = table.iter().any(|r| r.iter().all(|&v| v >= 0.0));
        assert_eq!(saddle(&table) >= 0.0, some_row_nonneg);
    }
}

#[test]
fn property_suite_passes_and_is_deterministic() {
    let a = run_property_suite(11, 300).unwrap();
    assert!(a.pass(), "{}", a.to_json().unwrap());
    for p in &a.properties {
        assert!(p.checks > 0, "{} ran no checks", p.name);
    }
    let b = run_property_suite(11, 300).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn property_suite_catches_a_swapped_operand() {
    let r = run_property_suite_with(11, 300, &|p, m, t| net_operand_atom(p, t, m)).unwrap();
    assert!(!r.pass());
    assert!(r.get(PROP_LEMMA).unwrap().failures > 0);
    assert!(r.get(PROP_LEMMA).unwrap().counterexample.is_some());
    // The saddle identity and the table logic do not depend on orientation.
    assert!(r.get(PROP_SADDLE).unwrap().passed());
    assert!(r.get(PROP_MINMAX_TABLE).unwrap().passed());
}

#[test]
fn property_suite_catches_a_shifted_operand() {
    let r = run_property_suite_with(3, 100, &|p, m, t| {
        let a = net_operand_atom(p, m, t)?;
        Ok(AffineAtom {
            constant: a.constant + 1e-3,
            ..a
        })
    })
    .unwrap();
    assert!(!r.get(PROP_SADDLE).unwrap().passed());
}

#[test]
fn trained_data_ii_net_is_reproduced_by_its_circuits() {
    let (data, params) = common::trained(Tier::DataII, &common::ARCH_II, 0);
    let g = common::grid(&data, 256);
    let reg = refine_boundary(&params, &enumerate_states(&params, &g).unwrap(), &g).unwrap();

    let numeric = build_numeric(&params, &reg).unwrap();
    let rep = verify_numeric(&params, &numeric, &reg, &g).unwrap();
    assert!(rep.pass, "{}", rep.to_json().unwrap());
    assert!(rep.max_abs_diff_guaranteed <= 1e-6);
    assert_eq!(rep.points, 256 * 256);

    // Shifting every atom shifts the tree value by exactly the same amount.
    let mut bad = numeric.clone();
    for id in 0..bad.atom_count() as u32 {
        let a = bad.atom(id);
        bad.set_atom(id, &AffineAtom { constant: a.constant + 1e-3, ..a }).unwrap();
    }
    let rep = verify_numeric(&params, &bad, &reg, &g).unwrap();
    assert!(!rep.pass);
    assert!((rep.max_abs_diff_guaranteed - 1e-3).abs() < 1e-9);
    assert!(!rep.disagreements.is_empty() && rep.disagreements.iter().all(|d| d.enumerated));

    let logical = build_logical(&params, &reg).unwrap();
    let lrep = verify_logical(&params, &logical, &reg, &g, 2).unwrap();
    assert!(lrep.pass, "{}", lrep.to_json().unwrap());
    assert!(lrep.disagreements.iter().all(|d| d.explained()));
    assert!(lrep.agreement >= 0.9999, "{}", lrep.agreement);
    assert!(lrep.fine_agreement.unwrap() >= FINE_AGREEMENT);

    let again = verify_logical(&params, &logical, &reg, &g, 2).unwrap();
    assert_eq!(again.to_json().unwrap(), lrep.to_json().unwrap());
}

#[test]
fn mismatched_modes_and_dimensions_are_rejected() {
    let (data, params) = common::trained(Tier::DataI, &common::ARCH_I, 0);
    let g = common::grid(&data, 32);
    let reg = enumerate_states(&params, &g).unwrap();
    let logical = build_logical(&params, &reg).unwrap();
    assert!(verify_numeric(&params, &logical, &reg, &g).is_err());
    let numeric = build_numeric(&params, &reg).unwrap();
    assert!(verify_logical(&params, &numeric, &reg, &g, 1).is_err());
}
