use netlogic::capacity::{
    gamma_bool, jerrum_bound, ReducedDescription, minimal_description, norm_bounds, rational_rank, vc_bool, vc_nodata, vc_nodata_counts,
};
use netlogic::linalg::Matrix;
use netlogic::nn::{random_params, ArchSpec, LayerState, NetworkState};
use num_rational::BigRational;
use num_traits::{One, Zero};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1e-300)
}

/// Rank by textbook Gauss-Jordan elimination over exact rationals.
fn oracle_rank(rows: &[Vec<i64>]) -> usize {
    let mut m: Vec<Vec<BigRational>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| BigRational::from_integer(v.into())).collect())
        .collect();
    let cols = m.first().map_or(0, Vec::len);
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..m.len()).find(|&r| !m[r][c].is_zero()) else {
            continue;
        };
        m.swap(rank, p);
        let inv = BigRational::one() / m[rank][c].clone();
        for r in 0..m.len() {
            if r != rank && !m[r][c].is_zero() {
                let f = m[r][c].clone() * inv.clone();
                for k in 0..cols {
                    let sub = f.clone() * m[rank][k].clone();
                    m[r][k] -= sub;
                }
            }
        }
        rank += 1;
    }
    rank
}

fn states(widths: &[usize], rows: &[Vec<bool>]) -> Vec<NetworkState> {
    rows.iter()
        .map(|bits| {
            let mut at = 0;
            NetworkState::new(
                widths
                    .iter()
                    .map(|&w| {
                        let s = LayerState::from_bools(&bits[at..at + w]);
                        at += w;
                        s
                    })
                    .collect(),
            )
        })
        .collect()
}

#[test]
fn rank_agrees_with_exact_elimination_on_random_matrices() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    for i in 0..50 {
        let (r, c) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let binary = i % 2 == 0;
        let rows: Vec<Vec<i64>> = (0..r)
            .map(|_| {
                (0..c)
                    .map(|_| if binary { rng.random_range(0..2) } else { rng.random_range(-3..=3) })
                    .collect()
            })
            .collect();
        assert_eq!(rational_rank(&rows), oracle_rank(&rows), "{rows:?}");
    }
    // Rank 3 over Q, 2 over GF(2).
    assert_eq!(rational_rank(&[vec![1, 1, 0], vec![0, 1, 1], vec![1, 0, 1]]), 3);
}

#[test]
fn hand_computed_description() {
    let arch = ArchSpec::new(2, vec![2, 2]).unwrap();
    let s0 = states(&[2, 2], &[vec![true, false, true, false], vec![false, true, false, true]]);
    let d = minimal_description(&s0, &arch).unwrap();
    assert_eq!(d.ranks, vec![2, 2, 2, 1]);
    assert_eq!((d.k, d.s, d.degree), (15, 4, 3));
    assert!(close(d.vc_bool(), jerrum_bound(15.0, 4.0, 3.0)));

    let lone = states(&[4, 6, 8], &random_rows(&[4, 6, 8], 1, 3));
    let one = minimal_description(&lone, &ArchSpec::new(2, vec![4, 6, 8]).unwrap()).unwrap();
    assert_eq!(one, ReducedDescription::linear(2, 3));
    assert_eq!((one.k, one.s, one.degree), (3, 1, 1));
    assert!(one.retained_layers.is_empty());
    assert!((one.vc_bool() - 26.66).abs() < 0.01);
}

#[test]
fn jerrum_examples() {
    let log2e = std::f64::consts::LOG2_E;
    assert_eq!(jerrum_bound(0.0, 5.0, 2.0), 0.0);
    assert!(close(jerrum_bound(3.0, 1.0, 1.0), 6.0 * (3.0 + log2e)));
    assert!(close(jerrum_bound(15.0, 4.0, 3.0), 30.0 * (96f64.log2() + log2e)));
    assert!((jerrum_bound(3.0, 1.0, 1.0) - 26.66).abs() < 0.01);
    assert!((jerrum_bound(15.0, 4.0, 3.0) - 241.0).abs() < 0.5);
}

#[test]
fn data_free_bound() {
    let arch = |h: &[usize]| ArchSpec::new(2, h.to_vec()).unwrap();
    let (a1, a2, a3) = (
        arch(&[4, 6, 8]),
        arch(&[4, 6, 8, 10, 12, 14]),
        arch(&[4, 6, 8, 10, 12, 14, 18, 22, 23]),
    );
    assert_eq!(
        (a1.parameter_count(), a2.parameter_count(), a3.parameter_count()),
        (107, 517, 1743)
    );
    let (v1, v2, v3) = (vc_nodata(&a1), vc_nodata(&a2), vc_nodata(&a3));
    assert!(v1 >= 8376.0 / 4.0 && v1 <= 8376.0 * 4.0, "{v1}");
    assert!(v1 < v2 && v2 < v3);
    assert!(close(vc_nodata_counts(3, 0, 0), jerrum_bound(3.0, 1.0, 1.0)));
}

#[test]
fn norm_bound_examples() {
    let i2 = [Matrix::identity(2)];
    let b = norm_bounds(&i2, 100, 1.0);
    assert!(close(b.frobenius, 0.02));
    assert!(close(b.spec_l12, 0.04));
    assert!(close(b.spec_fro, 0.04));
    let inf = norm_bounds(&i2, 100, 0.0);
    assert!(inf.frobenius.is_infinite() && inf.spec_l12.is_infinite() && inf.spec_fro.is_infinite());
    assert!(norm_bounds(&i2, 100, -1.0).frobenius.is_infinite());
}

#[test]
fn gamma_bool_examples() {
    assert_eq!(gamma_bool(25.0, 100), 0.5);
    assert_eq!(gamma_bool(0.0, 7), 0.0);
    assert!((1..50).all(|m| gamma_bool(10.0, m + 1) < gamma_bool(10.0, m)));
}

fn random_rows(widths: &[usize], n: usize, seed: u64) -> Vec<Vec<bool>> {
    let total: usize = widths.iter().sum();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..total).map(|_| rng.random_bool(0.5)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn norm_bounds_scale_as_inverse_gamma_squared(seed in any::<u64>(), gamma in 0.01f64..10.0, m in 1usize..1000) {
        let p = random_params(&ArchSpec::new(2, vec![4, 6, 8]).unwrap(), seed, 0.5);
        let a = norm_bounds(p.weights(), m, gamma);
        let b = norm_bounds(p.weights(), m, 2.0 * gamma);
        for (x, y) in [(a.frobenius, b.frobenius), (a.spec_l12, b.spec_l12), (a.spec_fro, b.spec_fro)] {
            prop_assert!((x / 4.0 - y).abs() <= 1e-12 * x);
        }
    }

    #[test]
    fn jerrum_is_strictly_increasing(k in 1.0f64..1e4, s in 1.0f64..1e6, d in 1.0f64..20.0) {
        let base = jerrum_bound(k, s, d);
        prop_assert!(jerrum_bound(k + 1.0, s, d) > base);
        prop_assert!(jerrum_bound(k, s + 1.0, d) > base);
        prop_assert!(jerrum_bound(k, s, d + 1.0) > base);
    }

    #[test]
    fn description_ignores_neuron_order_and_duplicates(
        widths in prop::collection::vec(1usize..6, 1..4),
        n in 1usize..10,
        seed in any::<u64>(),
        layer_pick in any::<prop::sample::Index>(),
        neuron_pick in any::<prop::sample::Index>(),
    ) {
        let rows = random_rows(&widths, n, seed);
        let arch = ArchSpec::new(2, widths.clone()).unwrap();
        let base = minimal_description(&states(&widths, &rows), &arch).unwrap();

        // Reverse the neurons of every layer.
        let mut offsets = vec![0];
        for w in &widths {
            offsets.push(offsets.last().unwrap() + w);
        }
        let reversed: Vec<Vec<bool>> = rows
            .iter()
            .map(|r| {
                widths
                    .iter()
                    .enumerate()
                    .flat_map(|(l, &w)| (0..w).rev().map(move |i| (l, i)))
                    .map(|(l, i)| r[offsets[l] + i])
                    .collect()
            })
            .collect();
        prop_assert_eq!(&minimal_description(&states(&widths, &reversed), &arch).unwrap(), &base);

        // Duplicate one neuron.
        let l = layer_pick.index(widths.len());
        let i = neuron_pick.index(widths[l]);
        let mut wide = widths.clone();
        wide[l] += 1;
        let dup: Vec<Vec<bool>> = rows
            .iter()
            .map(|r| {
                let mut v = r.clone();
                v.insert(offsets[l] + widths[l], r[offsets[l] + i]);
                v
            })
            .collect();
        let d = minimal_description(&states(&wide, &dup), &ArchSpec::new(2, wide.clone()).unwrap()).unwrap();
        prop_assert_eq!(d.ranks, base.ranks);
        prop_assert_eq!((d.k, d.s, d.degree), (base.k, base.s, base.degree));
    }

    #[test]
    fn rank_one_layers_do_not_change_the_bound(
        widths in prop::collection::vec(1usize..6, 1..4),
        n in 1usize..10,
        seed in any::<u64>(),
        extra in 1usize..6,
        on in any::<bool>(),
    ) {
        let rows = random_rows(&widths, n, seed);
        let mut uniq = rows.clone();
        uniq.sort();
        uniq.dedup();
        let base = vc_bool(&states(&widths, &uniq), &ArchSpec::new(2, widths.clone()).unwrap()).unwrap();
        // A new last layer in which every boundary state shows the same pattern.
        let mut deeper = widths.clone();
        deeper.push(extra);
        let pattern: Vec<bool> = (0..extra).map(|i| on || i == 0).collect();
        let grown: Vec<Vec<bool>> = uniq.iter().map(|r| r.iter().copied().chain(pattern.iter().copied()).collect()).collect();
        let d = vc_bool(&states(&deeper, &grown), &ArchSpec::new(2, deeper).unwrap()).unwrap();
        prop_assert!(close(d, base), "{} vs {}", d, base);
    }

    #[test]
    fn adding_a_state_never_lowers_the_bound_in_the_plane(
        widths in prop::collection::vec(1usize..8, 1..=2),
        n in 2usize..12,
        seed in any::<u64>(),
    ) {
        let arch = ArchSpec::new(2, widths.clone()).unwrap();
        let mut rows = random_rows(&widths, n, seed);
        rows.dedup();
        let mut prev = 0.0;
        let mut seen: Vec<Vec<bool>> = Vec::new();
        for r in rows {
            if seen.contains(&r) {
                continue;
            }
            seen.push(r);
            let v = vc_bool(&states(&widths, &seen), &arch).unwrap();
            prop_assert!(v >= prev, "{} after {}", v, prev);
            prev = v;
        }
    }
}
