use netlogic::circuit::{AffineAtom, ChildRef, CircuitTree, Mode, NodeKind};
use netlogic::datasets::Dataset;
use netlogic::interpret::{
    diagnose_memorization, embed_dataset, extract_logical, grid_for, node_paths, probe_node, probe_paths,
    splice_accuracies, splice_prosthetic, train_prosthetic, Prosthetic, ProstheticConfig,
};
use netlogic::nn::{ArchSpec, Model};
use netlogic::trainer::{train_bottleneck, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

const RAW: usize = 6;

/// Ten Gaussian clusters in `RAW` dimensions, one per digit; True for 5..=9.
fn digit_data(per_digit: usize, seed: u64) -> Dataset {
    let mut centres = rand_chacha::ChaCha8Rng::seed_from_u64(1000);
    let centres: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..RAW).map(|_| centres.random_range(-2.0..2.0)).collect())
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut pts = Vec::new();
    let mut digits = Vec::new();
    for _ in 0..per_digit {
        for (d, c) in centres.iter().enumerate() {
            pts.push(c.iter().map(|v| v + noise.sample(&mut rng)).collect());
            digits.push(d as u8);
        }
    }
    let labels = digits.iter().map(|&d| d >= 5).collect();
    Dataset::new("digits", RAW, pts, labels).unwrap().with_digits(digits).unwrap()
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        steps: 1500,
        snapshot_every: 0,
        ..TrainConfig::default()
    }
}

fn host() -> (Dataset, Model, CircuitTree) {
    let data = digit_data(30, 0);
    let run = train_bottleneck(&data, &ArchSpec::new(2, vec![6, 6]).unwrap(), &train_cfg(0)).unwrap();
    let model = run.final_model().clone();
    let grid = grid_for(&embed_dataset(&model, &data), 128).unwrap();
    let (tree, _) = extract_logical(&model, &grid).unwrap();
    (data, model, tree)
}

fn prosthetic_cfg(own_bottleneck: bool) -> ProstheticConfig {
    ProstheticConfig {
        arch: ArchSpec::new(2, vec![4, 4]).unwrap(),
        train: train_cfg(1),
        grid_resolution: 128,
        own_bottleneck,
    }
}

/// Fours against everything else, the task given to a prosthetic.
fn fours(data: &Dataset) -> Dataset {
    let digits = data.digits().unwrap().to_vec();
    let pts = (0..data.len()).map(|i| data.point(i).to_vec()).collect();
    let labels = digits.iter().map(|&d| d != 4).collect();
    Dataset::new("fours", data.dim(), pts, labels).unwrap().with_digits(digits).unwrap()
}

/// Evaluates `tree` by walking its nodes, substituting `sub(x)` for the node
/// at `path` and reading the rest of the tree at `host_x`.
fn walk(tree: &CircuitTree, at: ChildRef, here: &[usize], path: &[usize], host_x: &[f64], sub: &dyn Fn() -> bool) -> bool {
    if here == path {
        return sub();
    }
    match at {
        ChildRef::Atom(a) => tree.atom(a).eval(host_x) >= 0.0,
        ChildRef::Node(n) => {
            let vals: Vec<bool> = tree
                .children(n)
                .enumerate()
                .map(|(i, (c, _))| {
                    let mut next = here.to_vec();
                    next.push(i);
                    walk(tree, c, &next, path, host_x, sub)
                })
                .collect();
            match tree.kind(n) {
                NodeKind::Const(b) => b,
                NodeKind::Or | NodeKind::Max => vals.iter().any(|&v| v),
                NodeKind::And | NodeKind::Min => vals.iter().all(|&v| v),
            }
        }
    }
}

#[test]
fn frozen_bottleneck_is_reused_bit_for_bit() {
    let (data, model, tree) = host();
    let p = train_prosthetic(&model, &fours(&data), &prosthetic_cfg(false)).unwrap();
    let (a, b) = (model.projection.as_ref().unwrap(), p.model.projection.as_ref().unwrap());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.weights.as_slice()), bits(b.weights.as_slice()));
    assert_eq!(bits(&a.bias), bits(&b.bias));
    // Shared coordinates: the splice stays in the bottleneck.
    let path = node_paths(&tree).pop().unwrap();
    let spliced = splice_prosthetic(&model, &tree, &path, &p).unwrap();
    assert_eq!(spliced.input_dim(), 2);
}

#[test]
fn probes_match_direct_counting() {
    let (data, model, tree) = host();
    let emb = embed_dataset(&model, &data);
    let digits = data.digits().unwrap();
    let paths = probe_paths(&tree);
    assert!(!paths.is_empty());
    for path in &paths {
        let a = probe_node(&tree, path, &emb, "train").unwrap();
        let sub = tree.subtree(path).unwrap();
        for d in 0..10u8 {
            let idx: Vec<usize> = (0..emb.len()).filter(|&i| digits[i] == d).collect();
            let hits = idx.iter().filter(|&&i| sub.eval_bool(emb.point(i))).count();
            assert_eq!(a.counts[d as usize], idx.len() as u64);
            assert!((a.true_frac[d as usize] - hits as f64 / idx.len() as f64).abs() < 1e-15);
            assert!((a.true_frac[d as usize] + a.false_frac[d as usize] - 1.0).abs() < 1e-15);
        }
    }
}

#[test]
fn probe_fractions_are_monotone_through_gates() {
    let (data, model, tree) = host();
    let emb = embed_dataset(&model, &data);
    for path in node_paths(&tree) {
        let ChildRef::Node(n) = tree.resolve(&path).unwrap() else { unreachable!() };
        let parent = probe_node(&tree, &path, &emb, "train").unwrap();
        for i in 0..tree.children(n).count() {
            let mut c = path.clone();
            c.push(i);
            let child = probe_node(&tree, &c, &emb, "train").unwrap();
            for d in 0..10 {
                match tree.kind(n) {
                    NodeKind::Or => assert!(child.true_frac[d] <= parent.true_frac[d]),
                    NodeKind::And => assert!(child.true_frac[d] >= parent.true_frac[d]),
                    _ => {}
                }
            }
        }
    }
}

#[test]
fn a_hardcoded_memorizer_is_flagged() {
    // Train threes sit at x0 > 0, test threes at x0 < 0; the first atom
    // reads x0 and therefore memorizes the training threes.
    let mk = |sign: f64| {
        let mut pts = Vec::new();
        let mut digits = Vec::new();
        for d in 0..10u8 {
            for k in 0..5 {
                let x0 = if d == 3 { sign * (1.0 + k as f64) } else { -1.0 - k as f64 };
                pts.push(vec![x0, d as f64]);
                digits.push(d);
            }
        }
        let labels = digits.iter().map(|&d| d >= 5).collect();
        Dataset::new("m", 2, pts, labels).unwrap().with_digits(digits).unwrap()
    };
    let (train, test) = (mk(1.0), mk(-1.0));
    let leaf = |c: Vec<f64>, k: f64| CircuitTree::leaf(Mode::Logical, &AffineAtom { coefficients: c, constant: k });
    let tree = CircuitTree::compose(
        NodeKind::Or,
        vec![leaf(vec![1.0, 0.0], 0.0), leaf(vec![0.0, 1.0], -4.5)],
    )
    .unwrap();
    let flags = diagnose_memorization(&tree, &train, &test, 0.25).unwrap();
    assert!(!flags.is_empty());
    let top = &flags[0];
    assert_eq!((top.path.clone(), top.digit), (vec![0], 3));
    assert_eq!((top.train_frac, top.test_frac, top.gap), (1.0, 0.0, 1.0));
    assert!(flags.iter().all(|f| f.digit == 3));
}

fn check_splice(model: &Model, tree: &CircuitTree, p: &Prosthetic, data: &Dataset) {
    let emb = embed_dataset(model, data);
    let paths = tree.all_paths();
    let replacement: Vec<bool> = (0..data.len()).map(|i| p.eval(data.point(i))).collect();
    let scores = splice_accuracies(tree, &paths, &replacement, &emb).unwrap();
    for (path, score) in paths.iter().zip(scores).step_by(3) {
        let spliced = splice_prosthetic(model, tree, path, p).unwrap();
        let mut hits = 0;
        for i in 0..data.len() {
            let raw = data.point(i);
            let x = if spliced.input_dim() == RAW { raw.to_vec() } else { emb.point(i).to_vec() };
            let got = spliced.eval_bool(&x);
            let want = walk(tree, tree.root(), &[], path, emb.point(i), &|| replacement[i]);
            assert_eq!(got, want, "path {path:?}, sample {i}");
            hits += (got == data.label(i)) as usize;
        }
        assert!((score - hits as f64 / data.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn spliced_circuits_evaluate_compositionally() {
    let (data, model, tree) = host();
    let held_out = digit_data(10, 7);
    let shared = train_prosthetic(&model, &fours(&data), &prosthetic_cfg(false)).unwrap();
    check_splice(&model, &tree, &shared, &held_out);
}

#[test]
fn own_bottleneck_splices_are_lifted_to_raw_inputs() {
    let (data, model, tree) = host();
    let held_out = digit_data(10, 7);
    let own = train_prosthetic(&model, &fours(&data), &prosthetic_cfg(true)).unwrap();
    assert_ne!(own.model.projection, model.projection);
    let spliced = splice_prosthetic(&model, &tree, &[], &own).unwrap();
    assert_eq!(spliced.input_dim(), RAW);
    for i in 0..held_out.len() {
        assert_eq!(spliced.eval_bool(held_out.point(i)), own.eval(held_out.point(i)));
    }
    check_splice(&model, &tree, &own, &held_out);
}
