//! Reading a circuit through labelled data: per-digit probe arrays for
//! circuit nodes, train/test divergence as a memorization signal, and
//! replacing a memorizing component with a separately trained circuit.
//!
//! High-dimensional inputs go through a linear bottleneck of width 2..=6
//! first; states, grids and circuits all live in bottleneck coordinates.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{build_logical, ChildRef, CircuitTree, Mode, NodeKind};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, Model};
use crate::states::{enumerate_states, refine_boundary, GridSpec, StateRegistry};
use crate::trainer::{train_frozen_projection, TrainConfig};

pub const MIN_BOTTLENECK: usize = 2;
pub const MAX_BOTTLENECK: usize = 6;
/// Default train/test gap that marks a node as memorizing a digit.
pub const DEFAULT_GAP: f64 = 0.25;
/// Train accuracy a prosthetic must reach before it is spliced in.
pub const MIN_PROSTHETIC_ACCURACY: f64 = 0.9;

/// A ReLU architecture behind a linear bottleneck.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckArch {
    /// Network after the bottleneck; its input width is the bottleneck width.
    pub base: ArchSpec,
    pub bottleneck_width: usize,
}

impl BottleneckArch {
    pub fn new(bottleneck_width: usize, hidden_widths: Vec<usize>) -> Result<Self> {
        if !(MIN_BOTTLENECK..=MAX_BOTTLENECK).contains(&bottleneck_width) {
            return Err(Error::input(format!(
                "bottleneck width {bottleneck_width} outside {MIN_BOTTLENECK}..={MAX_BOTTLENECK}"
            )));
        }
        Ok(Self {
            base: ArchSpec::new(bottleneck_width, hidden_widths)?,
            bottleneck_width,
        })
    }
}

/// `data` mapped through the model's projection (identity without one).
pub fn embed_dataset(model: &Model, data: &Dataset) -> Dataset {
    let dim = model.params.input_dim();
    data.map_points(format!("{}-embedded", data.name), dim, |x| model.embed(x))
}

/// Grid over the bounding box of `data`, 25% margin per side.
pub fn grid_for(data: &Dataset, resolution: usize) -> Result<GridSpec> {
    let (lo, hi) = data
        .bounding_box()
        .ok_or_else(|| Error::input("cannot size a grid from an empty dataset"))?;
    GridSpec::around(&lo, &hi, 0.25, resolution)
}

/// Enumerates states of `model` over `grid` (bottleneck coordinates), refines
/// the boundary, and builds the logical circuit.
pub fn extract_logical(model: &Model, grid: &GridSpec) -> Result<(CircuitTree, StateRegistry)> {
    let reg = enumerate_states(&model.params, grid)?;
    let reg = refine_boundary(&model.params, &reg, grid)?;
    let tree = build_logical(&model.params, &reg)?;
    Ok((tree, reg))
}

/// Human-readable node path: `root` or dot-separated child indices.
pub fn path_label(path: &[usize]) -> String {
    if path.is_empty() {
        return "root".to_string();
    }
    path.iter().map(usize::to_string).collect::<Vec<_>>().join(".")
}

pub fn parse_path(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s == "root" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('.')
        .map(|p| {
            p.parse()
                .map_err(|_| Error::input(format!("bad node path component {p:?} in {s:?}")))
        })
        .collect()
}

/// Per-digit True/False frequencies of one circuit node on one split.
///
/// For digits present in the split, `true_frac + false_frac = 1`; absent
/// digits have count 0 and both fractions 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeArray {
    pub node: String,
    pub split: String,
    pub true_frac: [f64; 10],
    pub false_frac: [f64; 10],
    pub counts: [u64; 10],
}

fn digits_of(data: &Dataset) -> Result<&[u8]> {
    data.digits()
        .ok_or_else(|| Error::input(format!("dataset {:?} has no digit metadata", data.name)))
}

/// Evaluates the subcircuit at `path` on every sample of `data` (already in
/// the tree's coordinates) and tallies the True fraction per digit.
pub fn probe_node(tree: &CircuitTree, path: &[usize], data: &Dataset, split: &str) -> Result<ProbeArray> {
    let digits = digits_of(data)?;
    if data.dim() != tree.input_dim() {
        return Err(Error::input("probe data is not in the circuit's coordinates"));
    }
    let node = tree.resolve(path)?;
    let truths: Vec<bool> = (0..data.len())
        .into_par_iter()
        .map(|i| tree.eval_bool_at(node, data.point(i)))
        .collect();
    let mut hits = [0u64; 10];
    let mut counts = [0u64; 10];
    for (&d, &t) in digits.iter().zip(&truths) {
        let d = d as usize;
        if d > 9 {
            return Err(Error::input(format!("digit {d} out of range")));
        }
        counts[d] += 1;
        hits[d] += t as u64;
    }
    let mut true_frac = [0.0; 10];
    let mut false_frac = [0.0; 10];
    for d in 0..10 {
        if counts[d] > 0 {
            true_frac[d] = hits[d] as f64 / counts[d] as f64;
            false_frac[d] = (counts[d] - hits[d]) as f64 / counts[d] as f64;
        }
    }
    Ok(ProbeArray {
        node: path_label(path),
        split: split.to_string(),
        true_frac,
        false_frac,
        counts,
    })
}

pub const PROBE_CSV_HEADER: &str = "node,digit,split,true_frac,count";

pub fn probes_csv(arrays: &[ProbeArray]) -> String {
    let mut out = String::from(PROBE_CSV_HEADER);
    out.push('\n');
    for a in arrays {
        for d in 0..10 {
            let _ = writeln!(out, "{},{d},{},{},{}", a.node, a.split, a.true_frac[d], a.counts[d]);
        }
    }
    out
}

/// Nodes worth probing: the root's children and their children, the
/// components closest to the output.
pub fn probe_paths(tree: &CircuitTree) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for p in tree.top_level_paths() {
        out.push(p.clone());
        if let Ok(c) = tree.resolve(&p) {
            if let crate::circuit::ChildRef::Node(n) = c {
                out.extend((0..tree.children(n).count()).map(|i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                }));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationFlag {
    pub path: Vec<usize>,
    pub digit: u8,
    pub train_frac: f64,
    pub test_frac: f64,
    pub gap: f64,
}

/// Nodes from [`probe_paths`] whose True fraction for some digit differs
/// between `train` and `test` by at least `threshold`, largest gap first.
pub fn diagnose_memorization(
    tree: &CircuitTree,
    train: &Dataset,
    test: &Dataset,
    threshold: f64,
) -> Result<Vec<MemorizationFlag>> {
    diagnose_paths(tree, &probe_paths(tree), train, test, threshold)
}

/// [`diagnose_memorization`] over explicit node paths.
pub fn diagnose_paths(
    tree: &CircuitTree,
    paths: &[Vec<usize>],
    train: &Dataset,
    test: &Dataset,
    threshold: f64,
) -> Result<Vec<MemorizationFlag>> {
    digits_of(train)?;
    digits_of(test)?;
    let mut flags = Vec::new();
    for p in paths {
        let a = probe_node(tree, p, train, "train")?;
        let b = probe_node(tree, p, test, "test")?;
        for d in 0..10 {
            if a.counts[d] == 0 || b.counts[d] == 0 {
                continue;
            }
            let gap = (a.true_frac[d] - b.true_frac[d]).abs();
            if gap >= threshold {
                flags.push(MemorizationFlag {
                    path: p.clone(),
                    digit: d as u8,
                    train_frac: a.true_frac[d],
                    test_frac: b.true_frac[d],
                    gap,
                });
            }
        }
    }
    flags.sort_by(|x, y| y.gap.total_cmp(&x.gap).then_with(|| x.path.cmp(&y.path)).then(x.digit.cmp(&y.digit)));
    Ok(flags)
}

/// Fraction of `data` (in the tree's coordinates) classified correctly.
pub fn circuit_accuracy(tree: &CircuitTree, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits: usize = (0..data.len())
        .into_par_iter()
        .filter(|&i| tree.eval_bool(data.point(i)) == data.label(i))
        .count();
    hits as f64 / data.len() as f64
}

#[derive(Debug, Clone)]
pub struct ProstheticConfig {
    /// Network after the bottleneck.
    pub arch: ArchSpec,
    pub train: TrainConfig,
    /// Grid points per bottleneck axis for the prosthetic's states.
    pub grid_resolution: usize,
    /// Learn a fresh bottleneck instead of reusing the host's frozen one.
    /// The spliced circuit then lives in raw input coordinates.
    pub own_bottleneck: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub train: f64,
    pub test: f64,
}

#[derive(Debug, Clone)]
pub struct ProstheticOutcome {
    /// In bottleneck coordinates with a shared bottleneck, raw coordinates
    /// otherwise.
    pub tree: CircuitTree,
    pub prosthetic: Model,
    pub prosthetic_tree: CircuitTree,
    pub prosthetic_train_accuracy: f64,
    pub before: Accuracy,
    pub after: Accuracy,
}

/// A prosthetic network and its circuit in its own bottleneck coordinates.
#[derive(Debug, Clone)]
pub struct Prosthetic {
    pub model: Model,
    pub tree: CircuitTree,
    pub train_accuracy: f64,
}

impl Prosthetic {
    /// Circuit value on a raw input.
    pub fn eval(&self, x: &[f64]) -> bool {
        self.tree.eval_bool(&self.model.embed(x))
    }
}

fn lifted(model: &Model, tree: &CircuitTree) -> Result<CircuitTree> {
    match &model.projection {
        Some(p) => tree.lift(&p.weights, &p.bias),
        None => Ok(tree.clone()),
    }
}

/// Trains a prosthetic on `data` (raw inputs), behind the host's frozen
/// bottleneck or a fresh one, and extracts its logical circuit.
pub fn train_prosthetic(host: &Model, data: &Dataset, cfg: &ProstheticConfig) -> Result<Prosthetic> {
    let projection = host
        .projection
        .as_ref()
        .ok_or_else(|| Error::input("the host has no bottleneck"))?;
    let run = if cfg.own_bottleneck {
        crate::trainer::train_bottleneck(data, &cfg.arch, &cfg.train)?
    } else {
        train_frozen_projection(data, projection, &cfg.arch, &cfg.train)?
    };
    let model = run.final_model().clone();
    let acc = model.accuracy(data);
    if acc < MIN_PROSTHETIC_ACCURACY {
        return Err(Error::Training(format!(
            "prosthetic reached train accuracy {acc:.3}, below {MIN_PROSTHETIC_ACCURACY}"
        )));
    }
    let embedded = embed_dataset(&model, data);
    let grid = grid_for(&embedded, cfg.grid_resolution)?;
    let (tree, _) = extract_logical(&model, &grid)?;
    Ok(Prosthetic {
        model,
        tree,
        train_accuracy: acc,
    })
}

/// Splices `p` into `host_tree` at `path`. With a shared bottleneck the
/// result stays in bottleneck coordinates; otherwise both circuits are
/// lifted to raw inputs first.
pub fn splice_prosthetic(host: &Model, host_tree: &CircuitTree, path: &[usize], p: &Prosthetic) -> Result<CircuitTree> {
    if host.projection == p.model.projection {
        host_tree.splice(path, &p.tree)
    } else {
        lifted(host, host_tree)?.splice(path, &lifted(&p.model, &p.tree)?)
    }
}

/// Accuracy of a spliced circuit on raw `data`, embedding through `host`
/// when the circuit is in bottleneck coordinates.
fn spliced_accuracy(host: &Model, tree: &CircuitTree, data: &Dataset) -> f64 {
    if tree.input_dim() == data.dim() {
        circuit_accuracy(tree, data)
    } else {
        circuit_accuracy(tree, &embed_dataset(host, data))
    }
}

/// Trains a prosthetic, extracts its logical circuit, and splices it in at
/// `path`.
///
/// `prosthetic_data`, `train` and `test` are raw inputs; accuracies are those
/// of the host circuit before and after the splice.
pub fn prosthetic_workflow(
    host: &Model,
    host_tree: &CircuitTree,
    path: &[usize],
    prosthetic_data: &Dataset,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProstheticConfig,
) -> Result<ProstheticOutcome> {
    if host_tree.mode() != Mode::Logical {
        return Err(Error::input("the host circuit must be logical"));
    }
    host_tree.resolve(path)?;
    let p = train_prosthetic(host, prosthetic_data, cfg)?;
    let tree = splice_prosthetic(host, host_tree, path, &p)?;
    Ok(ProstheticOutcome {
        before: Accuracy {
            train: spliced_accuracy(host, host_tree, train),
            test: spliced_accuracy(host, host_tree, test),
        },
        after: Accuracy {
            train: spliced_accuracy(host, &tree, train),
            test: spliced_accuracy(host, &tree, test),
        },
        tree,
        prosthetic: p.model,
        prosthetic_tree: p.tree,
        prosthetic_train_accuracy: p.train_accuracy,
    })
}

/// Paths of every internal node, root first, in preorder.
pub fn node_paths(tree: &CircuitTree) -> Vec<Vec<usize>> {
    tree.all_paths()
        .into_iter()
        .filter(|p| matches!(tree.resolve(p), Ok(ChildRef::Node(_))))
        .collect()
}

/// Accuracy on `data` of `tree` with the node at each path replaced by a
/// subcircuit whose value on sample `i` is `replacement[i]`.
///
/// Only the ancestors of each replaced node are recomputed, from the cached
/// node values, so scoring every node of a large tree stays cheap.
pub fn splice_accuracies(tree: &CircuitTree, paths: &[Vec<usize>], replacement: &[bool], data: &Dataset) -> Result<Vec<f64>> {
    if replacement.len() != data.len() {
        return Err(Error::input("one replacement value per sample is required"));
    }
    if data.is_empty() {
        return Ok(vec![0.0; paths.len()]);
    }
    let truths: Vec<Vec<bool>> = (0..data.len())
        .into_par_iter()
        .map(|i| tree.node_truths(data.point(i)))
        .collect();
    let chains: Vec<Vec<ChildRef>> = paths
        .iter()
        .map(|p| (0..p.len()).map(|j| tree.resolve(&p[..j])).collect())
        .collect::<Result<_>>()?;
    Ok(paths
        .par_iter()
        .zip(&chains)
        .map(|(path, chain)| {
            let hits = (0..data.len())
                .filter(|&i| {
                    let x = data.point(i);
                    let mut val = replacement[i];
                    for j in (0..chain.len()).rev() {
                        let ChildRef::Node(n) = chain[j] else { unreachable!("ancestors are nodes") };
                        let mut kids = tree
                            .children(n)
                            .enumerate()
                            .map(|(k, (c, _))| if k == path[j] { val } else { tree.truth_of(c, x, &truths[i]) });
                        val = match tree.kind(n) {
                            NodeKind::Const(b) => b,
                            k if k.is_join() => kids.any(|t| t),
                            _ => kids.all(|t| t),
                        };
                    }
                    val == data.label(i)
                })
                .count();
            hits as f64 / data.len() as f64
        })
        .collect())
}

/// Settings of the desk-scale MNIST study.
#[derive(Debug, Clone)]
pub struct MnistStudyConfig {
    pub arch: BottleneckArch,
    pub train: TrainConfig,
    /// Host training samples; the same number is held out for diagnosis.
    pub host_m: usize,
    pub test_m: usize,
    pub grid_resolution: usize,
    pub gap_threshold: f64,
    pub seed: u64,
    /// See [`ProstheticConfig::own_bottleneck`].
    pub own_bottleneck: bool,
}

impl Default for MnistStudyConfig {
    fn default() -> Self {
        Self::from_config(&crate::config::Config::default()).expect("defaults are valid")
    }
}

impl MnistStudyConfig {
    /// The `[mnist]` section, with optimizer settings from `[train]`.
    pub fn from_config(c: &crate::config::Config) -> Result<Self> {
        let m = &c.mnist;
        Ok(Self {
            arch: BottleneckArch::new(m.bottleneck, m.hidden.clone())?,
            train: TrainConfig {
                steps: m.steps,
                snapshot_every: 0,
                ..c.train.to_train_config(c.seed)
            },
            host_m: m.host_m,
            test_m: m.test_m,
            grid_resolution: m.grid_resolution,
            gap_threshold: m.gap_threshold,
            seed: c.seed,
            own_bottleneck: m.own_bottleneck,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceReport {
    pub path: String,
    /// Nodes tried.
    pub candidates: usize,
    pub prosthetic_train_accuracy: f64,
    pub validation_before: f64,
    pub validation_after: f64,
    pub before: Accuracy,
    pub after: Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnistStudyReport {
    pub seed: u64,
    pub host_train_accuracy: f64,
    pub host_final_loss: f64,
    pub host_test_accuracy: f64,
    pub sigma_bar: usize,
    pub sigma_zero: usize,
    /// Test samples whose bottleneck state was enumerated.
    pub enumerated_test: usize,
    /// Circuit vs host sign agreement on those samples.
    pub agreement_enumerated: f64,
    pub flags: Vec<MemorizationFlag>,
    pub splice: Option<SpliceReport>,
    pub splice_error: Option<String>,
}

impl MnistStudyReport {
    pub fn improved(&self) -> bool {
        self.splice.as_ref().is_some_and(|s| s.after.test > s.before.test)
    }
}

/// Everything the study produced, for writing out.
#[derive(Debug, Clone)]
pub struct MnistStudy {
    pub report: MnistStudyReport,
    pub host: Model,
    pub tree: CircuitTree,
    pub probes: Vec<ProbeArray>,
    pub spliced: Option<CircuitTree>,
}


/// Trains an overfit host behind a bottleneck on `host_m` samples of
/// `train_pool`, extracts its circuit, diagnoses memorization against a
/// disjoint validation draw of the same size, and splices a prosthetic in
/// at the node or leaf where it helps validation accuracy most, if any
/// does. Test
/// accuracy uses `test_m` samples of `test_pool` and plays no part in the
/// choice.
pub fn mnist_study(train_pool: &Dataset, test_pool: &Dataset, cfg: &MnistStudyConfig) -> Result<MnistStudy> {
    let parts = train_pool.split(&[cfg.host_m, cfg.host_m], cfg.seed)?;
    let (train, valid) = (&parts[0], &parts[1]);
    let test = test_pool.subsample(cfg.test_m, cfg.seed)?;
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let run = crate::trainer::train_bottleneck(train, &cfg.arch.base, &tcfg)?;
    let host = run.final_model().clone();

    let (tr, va, te) = (
        embed_dataset(&host, train),
        embed_dataset(&host, valid),
        embed_dataset(&host, &test),
    );
    let grid = grid_for(&tr, cfg.grid_resolution)?;
    let (tree, reg) = extract_logical(&host, &grid)?;

    let checked: Vec<bool> = (0..te.len())
        .into_par_iter()
        .filter_map(|i| {
            let x = te.point(i);
            let (out, state) = host.params.output_and_state(x);
            reg.contains(&state).then(|| tree.eval_bool(x) == (out >= 0.0))
        })
        .collect();
    let agreement = if checked.is_empty() {
        0.0
    } else {
        checked.iter().filter(|&&a| a).count() as f64 / checked.len() as f64
    };

    let flags = diagnose_memorization(&tree, &tr, &va, cfg.gap_threshold)?;
    let mut probes = Vec::new();
    for p in probe_paths(&tree) {
        probes.push(probe_node(&tree, &p, &tr, "train")?);
        probes.push(probe_node(&tree, &p, &va, "validation")?);
    }

    let (splice, spliced, splice_error) = if flags.is_empty() {
        (None, None, Some("no node flagged".to_string()))
    } else {
        match splice_step(&host, &tree, cfg, train, valid, &test)? {
            Ok((r, t)) => (Some(r), Some(t), None),
            Err(why) => (None, None, Some(why)),
        }
    };

    Ok(MnistStudy {
        report: MnistStudyReport {
            seed: cfg.seed,
            host_train_accuracy: run.final_snapshot().train_accuracy,
            host_final_loss: run.final_snapshot().loss,
            host_test_accuracy: host.accuracy(&test),
            sigma_bar: reg.len(),
            sigma_zero: reg.sigma_zero().len(),
            enumerated_test: checked.len(),
            agreement_enumerated: agreement,
            flags,
            splice,
            splice_error,
        },
        host,
        tree,
        probes,
        spliced,
    })
}

/// Trains the prosthetic and splices it where validation accuracy gains
/// most. `Ok(Err(reason))` when no splice is made.
fn splice_step(
    host: &Model,
    tree: &CircuitTree,
    cfg: &MnistStudyConfig,
    train: &Dataset,
    valid: &Dataset,
    test: &Dataset,
) -> Result<std::result::Result<(SpliceReport, CircuitTree), String>> {
    let pcfg = ProstheticConfig {
        arch: cfg.arch.base.clone(),
        train: TrainConfig {
            seed: cfg.seed.wrapping_add(1),
            ..cfg.train.clone()
        },
        grid_resolution: cfg.grid_resolution,
        own_bottleneck: cfg.own_bottleneck,
    };
    let pdata = crate::datasets::subsample_prosthetic(train, cfg.seed)?;
    let p = match train_prosthetic(host, &pdata, &pcfg) {
        Ok(p) => p,
        Err(e) => return Ok(Err(e.to_string())),
    };
    let va = embed_dataset(host, valid);
    let candidates = tree.all_paths();
    let repl: Vec<bool> = (0..valid.len()).into_par_iter().map(|i| p.eval(valid.point(i))).collect();
    let scores = splice_accuracies(tree, &candidates, &repl, &va)?;
    let best = (0..candidates.len())
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
        .expect("the root is always a candidate");
    let path = &candidates[best];
    let validation_before = circuit_accuracy(tree, &va);
    if scores[best] <= validation_before {
        return Ok(Err(format!(
            "no splice improves validation accuracy {validation_before} (best {} at {})",
            scores[best],
            path_label(path)
        )));
    }
    let t = splice_prosthetic(host, tree, path, &p)?;
    let validation_after = spliced_accuracy(host, &t, valid);
    if validation_after != scores[best] {
        return Err(Error::input(format!(
            "incremental splice score {} disagrees with the spliced tree {validation_after}",
            scores[best]
        )));
    }
    let report = SpliceReport {
        path: path_label(path),
        candidates: candidates.len(),
        prosthetic_train_accuracy: p.train_accuracy,
        validation_before,
        validation_after,
        before: Accuracy {
            train: spliced_accuracy(host, tree, train),
            test: spliced_accuracy(host, tree, test),
        },
        after: Accuracy {
            train: spliced_accuracy(host, &t, train),
            test: spliced_accuracy(host, &t, test),
        },
    };
    Ok(Ok((report, t)))
}
