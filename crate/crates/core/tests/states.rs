mod common;

use netlogic::datasets::Tier;
use netlogic::nn::{forward, random_params, ArchSpec, NetworkState};
use netlogic::states::{
    enumerate_states, project, project_states, refine_boundary, GridSpec, Source, StateRegistry,
};
use proptest::prelude::*;

fn small_arch() -> impl Strategy<Value = ArchSpec> {
    prop::collection::vec(1usize..=5, 1..=3).prop_map(|h| ArchSpec::new(2, h).unwrap())
}

fn grid(res: usize) -> GridSpec {
    GridSpec::uniform(vec![-2.0, -2.0], vec![2.0, 2.0], res).unwrap()
}

#[test]
fn trained_data_i_net_has_few_boundary_states() {
    let (data, params) = common::trained(Tier::DataI, &common::ARCH_I, 0);
    let g = common::grid(&data, 512);
    let reg = refine_boundary(&params, &enumerate_states(&params, &g).unwrap(), &g).unwrap();
    let (bar, zero) = (reg.len(), reg.sigma_zero().len());
    eprintln!("|Σ̄| = {bar}, |Σ₀| = {zero}");
    // Same order of magnitude as the reference 36; the count depends on how
    // far the grid box reaches beyond the data.
    assert!((9..=144).contains(&bar), "|Σ̄| = {bar}");
    assert!((1..=4).contains(&zero), "|Σ₀| = {zero}");
    // Refinement is a fixed point on Σ₀.
    let again = refine_boundary(&params, &reg, &g).unwrap();
    assert_eq!(again.sigma_zero(), reg.sigma_zero());
}

#[test]
fn refinement_is_idempotent_on_a_deeper_trained_net() {
    let (data, params) = common::trained(Tier::DataIII, &common::ARCH_I, 1);
    let g = common::grid(&data, 256);
    let once = refine_boundary(&params, &enumerate_states(&params, &g).unwrap(), &g).unwrap();
    let twice = refine_boundary(&params, &once, &g).unwrap();
    assert_eq!(once.sigma_zero(), twice.sigma_zero());
}

#[test]
fn projection_examples() {
    let a = NetworkState::parse("01|10").unwrap();
    let b = NetworkState::parse("01|11").unwrap();
    let p = project_states(&[a.clone(), b.clone()], &[1]);
    assert_eq!(p.states.len(), 1);
    assert_eq!(p.states[0][0].to_string(), "01");
    assert_eq!(p.back_refs, vec![0, 0]);
    let full = project_states(&[a, b], &[1, 2]);
    assert_eq!(full.states.len(), 2);
    let reg = StateRegistry::new(ArchSpec::new(2, vec![2, 2]).unwrap());
    assert!(project(&reg, &[], Source::Full).is_err());
    assert!(project(&reg, &[3], Source::Full).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn registry_invariants(arch in small_arch(), seed in any::<u64>()) {
        let p = random_params(&arch, seed, 1.0);
        let reg = refine_boundary(&p, &enumerate_states(&p, &grid(33)).unwrap(), &grid(33)).unwrap();
        let bar = reg.sigma_bar();
        let (plus, minus, zero) = (reg.sigma_plus(), reg.sigma_minus(), reg.sigma_zero());
        for s in &zero {
            prop_assert!(plus.contains(s) && minus.contains(s));
        }
        for s in &bar {
            prop_assert!(plus.contains(s) || minus.contains(s));
            let info = reg.get(s).unwrap();
            prop_assert!(info.hits >= 1);
            let t = forward(&p, &info.representative).unwrap();
            prop_assert_eq!(&t.state, s);
            let flagged = if t.output >= 0.0 { info.nonneg } else { info.neg };
            prop_assert!(flagged);
        }
        prop_assert_eq!(plus.len() + minus.len(), bar.len() + zero.len());
    }

    #[test]
    fn merge_of_a_partition_is_the_whole(arch in small_arch(), seed in any::<u64>(), parts in 2u64..5) {
        let p = random_params(&arch, seed, 1.0);
        let g = grid(21);
        let whole = enumerate_states(&p, &g).unwrap();
        let mut shards: Vec<StateRegistry> = (0..parts).map(|_| StateRegistry::new(arch.clone())).collect();
        for i in 0..g.total_points().unwrap() {
            let x = g.point(i);
            let t = forward(&p, &x).unwrap();
            shards[(i % parts) as usize].register(t.state, &x, t.output);
        }
        // Merge in reverse order to exercise commutativity too.
        let mut merged = StateRegistry::new(arch.clone());
        for s in shards.into_iter().rev() {
            merged.merge(s);
        }
        prop_assert_eq!(merged, whole);
    }

    #[test]
    fn refining_the_grid_never_loses_states(arch in small_arch(), seed in any::<u64>(), factor in 2usize..4) {
        let p = random_params(&arch, seed, 1.0);
        let g = grid(17);
        let coarse = enumerate_states(&p, &g).unwrap();
        let fine = enumerate_states(&p, &g.refined(factor)).unwrap();
        for s in coarse.sigma_bar() {
            prop_assert!(fine.contains(&s));
        }
    }

    #[test]
    fn projections_are_consistent(arch in small_arch(), seed in any::<u64>(), mask in 1u8..8) {
        let p = random_params(&arch, seed, 1.0);
        let reg = enumerate_states(&p, &grid(17)).unwrap();
        let d = arch.depth();
        let j: Vec<usize> = (1..=d).filter(|l| mask & (1 << (l - 1)) != 0).collect();
        prop_assume!(!j.is_empty());
        let proj = project(&reg, &j, Source::Full).unwrap();
        let src = reg.sigma_bar();
        prop_assert!(proj.states.len() <= src.len());
        prop_assert_eq!(proj.back_refs.len(), src.len());
        for (s, &r) in src.iter().zip(&proj.back_refs) {
            let key: Vec<_> = j.iter().map(|&l| s.layer(l - 1)).collect();
            prop_assert_eq!(&proj.states[r], &key);
        }
        let all: Vec<usize> = (1..=d).collect();
        prop_assert_eq!(project(&reg, &all, Source::Full).unwrap().states.len(), src.len());
    }
}
