//! Equivalence checks between a network and its circuits, and a randomized
//! suite for the identities the circuit construction rests on.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{build_tree, net_operand_atom, AffineAtom, CircuitTree, Mode};
use crate::error::{Error, Result};
use crate::nn::{forward, random_params, ArchSpec, LayerState, MlpParams, NetworkState};
use crate::states::{GridSpec, StateRegistry};

/// Absolute tolerance on numeric agreement, relative above `|N| = 1`.
pub const NUMERIC_TOLERANCE: f64 = 1e-6;
/// A point this close to some neuron's zero level is on a state boundary.
pub const NSB_EPSILON: f64 = 1e-9;
/// Minimum sign agreement on the refined grid.
pub const FINE_AGREEMENT: f64 = 0.999;
/// Disagreement points kept in a report.
pub const MAX_LOGGED: usize = 100;

/// Which grid a point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Enumeration,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub grid: GridKind,
    pub x: Vec<f64>,
    pub state: String,
    pub network: f64,
    /// Tree value: the numeric value, or 1/0 for a logical tree.
    pub tree: f64,
    pub enumerated: bool,
    pub min_abs_preactivation: f64,
}

impl Disagreement {
    /// Whether the circuit construction accounts for the miss: the state was
    /// never enumerated, or the point sits on a state boundary.
    pub fn explained(&self) -> bool {
        !self.enumerated || self.min_abs_preactivation <= NSB_EPSILON
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub mode: Mode,
    pub points: u64,
    /// Numeric: points whose state is enumerated.
    pub guaranteed_points: u64,
    /// Numeric: largest `|N - tree|` over guaranteed points.
    pub max_abs_diff_guaranteed: f64,
    /// Numeric: largest `|N - tree|` over all points.
    pub max_abs_diff_all: f64,
    /// Logical: fraction of enumeration-grid points with matching sign.
    pub agreement: f64,
    /// Logical: the same on the refined grid, when one was requested.
    pub fine_points: u64,
    pub fine_agreement: Option<f64>,
    /// Disagreements not accounted for by missing states or boundaries.
    pub unexplained: u64,
    pub disagreements: Vec<Disagreement>,
    pub pass: bool,
}

impl EquivalenceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, &self.to_json()?)
    }
}

#[derive(Default)]
struct Tally {
    points: u64,
    guaranteed: u64,
    max_guaranteed: f64,
    max_all: f64,
    agree: u64,
    unexplained: u64,
    logged: Vec<(u64, Disagreement)>,
}

impl Tally {
    fn merge(mut self, o: Tally) -> Tally {
        self.points += o.points;
        self.guaranteed += o.guaranteed;
        self.max_guaranteed = self.max_guaranteed.max(o.max_guaranteed);
        self.max_all = self.max_all.max(o.max_all);
        self.agree += o.agree;
        self.unexplained += o.unexplained;
        self.logged.extend(o.logged);
        self.logged.sort_by_key(|(i, _)| *i);
        self.logged.truncate(MAX_LOGGED);
        self
    }

    fn log(&mut self, idx: u64, d: Disagreement) {
        if self.logged.len() < MAX_LOGGED {
            self.logged.push((idx, d));
        }
    }
}

fn check_dims(params: &MlpParams, tree: &CircuitTree, grid: &GridSpec, mode: Mode) -> Result<u64> {
    if tree.mode() != mode {
        return Err(Error::input(format!("expected a {mode:?} tree")));
    }
    if tree.input_dim() != params.input_dim() || grid.dim() != params.input_dim() {
        return Err(Error::input("network, tree and grid dimensions differ"));
    }
    grid.total_points()
        .ok_or_else(|| Error::Resource("grid too large".into()))
}

const CHUNK: u64 = 4096;

fn scan(n: u64, f: impl Fn(u64, &mut Tally) + Sync) -> Tally {
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut t = Tally::default();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(i, &mut t);
            }
            t
        })
        .reduce(Tally::default, Tally::merge)
}

/// Compares `N(x)` with a numeric tree at every grid point.
pub fn verify_numeric(
    params: &MlpParams,
    tree: &CircuitTree,
    registry: &StateRegistry,
    grid: &GridSpec,
) -> Result<EquivalenceReport> {
    let n = check_dims(params, tree, grid, Mode::Numeric)?;
    let t = scan(n, |i, t| {
        let x = grid.point(i);
        let tr = forward(params, &x).expect("grid matches the network");
        let v = tree.eval_numeric_hinted(&x, &tr.state);
        let diff = (v - tr.output).abs();
        let scaled = diff / tr.output.abs().max(1.0);
        let enumerated = registry.contains(&tr.state);
        t.points += 1;
        t.max_all = t.max_all.max(diff);
        if enumerated {
            t.guaranteed += 1;
            t.max_guaranteed = t.max_guaranteed.max(diff);
        }
        if scaled > NUMERIC_TOLERANCE || !diff.is_finite() {
            let d = Disagreement {
                grid: GridKind::Enumeration,
                x,
                state: tr.state.to_string(),
                network: tr.output,
                tree: v,
                enumerated,
                min_abs_preactivation: tr.min_abs_preactivation(),
            };
            if enumerated {
                t.unexplained += 1;
            }
            t.log(i, d);
        }
    });
    Ok(EquivalenceReport {
        mode: Mode::Numeric,
        points: t.points,
        guaranteed_points: t.guaranteed,
        max_abs_diff_guaranteed: t.max_guaranteed,
        max_abs_diff_all: t.max_all,
        agreement: 1.0,
        fine_points: 0,
        fine_agreement: None,
        pass: t.unexplained == 0,
        unexplained: t.unexplained,
        disagreements: t.logged.into_iter().map(|(_, d)| d).collect(),
    })
}

fn logical_scan(params: &MlpParams, tree: &CircuitTree, registry: &StateRegistry, grid: &GridSpec, kind: GridKind) -> Tally {
    let n = grid.total_points().expect("checked by caller");
    scan(n, |i, t| {
        let x = grid.point(i);
        let tr = forward(params, &x).expect("grid matches the network");
        let truth = tr.output >= 0.0;
        let v = tree.eval_bool_hinted(&x, &tr.state);
        t.points += 1;
        if v == truth {
            t.agree += 1;
            return;
        }
        let d = Disagreement {
            grid: kind,
            x,
            state: tr.state.to_string(),
            network: tr.output,
            tree: v as u8 as f64,
            enumerated: registry.contains(&tr.state),
            min_abs_preactivation: tr.min_abs_preactivation(),
        };
        if !d.explained() {
            t.unexplained += 1;
        }
        t.log(i, d);
    })
}

/// Compares `[N(x) >= 0]` with a logical tree on the enumeration grid and,
/// for `fine_factor > 1`, on the grid refined by that factor.
///
/// Passes when every disagreement is explained (see
/// [`Disagreement::explained`]) and the refined agreement reaches
/// [`FINE_AGREEMENT`].
pub fn verify_logical(
    params: &MlpParams,
    tree: &CircuitTree,
    registry: &StateRegistry,
    grid: &GridSpec,
    fine_factor: usize,
) -> Result<EquivalenceReport> {
    check_dims(params, tree, grid, Mode::Logical)?;
    let coarse = logical_scan(params, tree, registry, grid, GridKind::Enumeration);
    let agreement = coarse.agree as f64 / coarse.points.max(1) as f64;
    let (fine, fine_points, fine_agreement) = if fine_factor > 1 {
        let g = grid.refined(fine_factor);
        g.total_points()
            .ok_or_else(|| Error::Resource("refined grid too large".into()))?;
        let f = logical_scan(params, tree, registry, &g, GridKind::Fine);
        let a = f.agree as f64 / f.points.max(1) as f64;
        let p = f.points;
        (Some(f), p, Some(a))
    } else {
        (None, 0, None)
    };
    let mut unexplained = coarse.unexplained;
    let mut disagreements: Vec<Disagreement> = coarse.logged.into_iter().map(|(_, d)| d).collect();
    if let Some(f) = fine {
        unexplained += f.unexplained;
        let room = MAX_LOGGED.saturating_sub(disagreements.len());
        disagreements.extend(f.logged.into_iter().take(room).map(|(_, d)| d));
    }
    let pass = unexplained == 0 && fine_agreement.is_none_or(|a| a >= FINE_AGREEMENT);
    Ok(EquivalenceReport {
        mode: Mode::Logical,
        points: coarse.points,
        guaranteed_points: coarse.points,
        max_abs_diff_guaranteed: 0.0,
        max_abs_diff_all: 0.0,
        agreement,
        fine_points,
        fine_agreement,
        unexplained,
        disagreements,
        pass,
    })
}

/// Operand used by the property suite; swap in a faulty one to check that
/// the suite notices.
pub type Operand = dyn Fn(&MlpParams, &NetworkState, &NetworkState) -> Result<AffineAtom> + Sync;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub checks: u64,
    pub failures: u64,
    pub counterexample: Option<String>,
}

impl PropertyOutcome {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checks: 0,
            failures: 0,
            counterexample: None,
        }
    }

    fn record(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(describe());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub seed: u64,
    pub trials: usize,
    pub properties: Vec<PropertyOutcome>,
}

impl PropertyReport {
    pub fn pass(&self) -> bool {
        self.properties.iter().all(PropertyOutcome::passed)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyOutcome> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const PROP_MINMAX_TABLE: &str = "minmax_table_logic";
pub const PROP_SADDLE: &str = "saddle_identity";
pub const PROP_LEMMA: &str = "fundamental_lemma";
pub const PROP_FLAT_TREE: &str = "flat_hierarchical_agreement";
pub const PROP_SIGNED: &str = "signed_state_sets";

/// `[max_a min_b f >= 0]` against `OR_a AND_b [f >= 0]` for a random table.
pub fn minmax_table_agrees(table: &[Vec<f64>]) -> bool {
    let saddle = table
        .iter()
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    let logic = table.iter().any(|r| r.iter().all(|&v| v >= 0.0));
    (saddle >= 0.0) == logic
}

fn random_table(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (a, b) = (rng.random_range(1..=8), rng.random_range(1..=8));
    (0..a)
        .map(|_| {
            (0..b)
                .map(|_| {
                    // Small integers make ties and exact zeros common.
                    if rng.random_bool(0.5) {
                        rng.random_range(-3i32..=3) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect()
        })
        .collect()
}

fn random_arch(rng: &mut ChaCha8Rng) -> ArchSpec {
    let depth = rng.random_range(1..=4);
    let widths = (0..depth).map(|_| rng.random_range(1..=8)).collect();
    ArchSpec::new(rng.random_range(1..=3), widths).expect("valid random arch")
}

fn random_state(rng: &mut ChaCha8Rng, arch: &ArchSpec) -> NetworkState {
    NetworkState::new(
        arch.hidden_widths
            .iter()
            .map(|&w| {
                let bits: Vec<bool> = (0..w).map(|_| rng.random_bool(0.5)).collect();
                LayerState::from_bools(&bits)
            })
            .collect(),
    )
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

/// One randomized net with a sampled state set and the atoms it needs.
struct Case {
    params: MlpParams,
    points: Vec<Vec<f64>>,
    outputs: Vec<f64>,
    states: Vec<NetworkState>,
    /// Index into `states` of each point's state.
    point_state: Vec<usize>,
}

impl Case {
    fn new(rng: &mut ChaCha8Rng, samples: usize) -> Self {
        let arch = random_arch(rng);
        let params = random_params(&arch, rng.random(), 1.0);
        let points: Vec<Vec<f64>> = (0..samples)
            .map(|_| (0..arch.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let traces: Vec<_> = points
            .iter()
            .map(|x| forward(&params, x).expect("sampled in the input space"))
            .collect();
        let mut states: Vec<NetworkState> = traces.iter().map(|t| t.state.clone()).collect();
        states.sort();
        states.dedup();
        let point_state = traces
            .iter()
            .map(|t| states.binary_search(&t.state).expect("collected above"))
            .collect();
        Self {
            outputs: traces.iter().map(|t| t.output).collect(),
            params,
            points,
            states,
            point_state,
        }
    }
}

/// Runs the suite with the library's operand.
pub fn run_property_suite(seed: u64, trials: usize) -> Result<PropertyReport> {
    run_property_suite_with(seed, trials, &|p, m, t| net_operand_atom(p, m, t))
}

/// Runs `trials` randomized cases of every property, evaluating atoms with
/// `operand`.
///
/// Each trial draws a fresh net (depth 1..=4, widths 1..=8, input width
/// 1..=3, Gaussian weights and biases), samples points to collect a state
/// set `S`, and checks at one sampled `x`:
/// the min-max table logic on a random table; the saddle identity
/// `F(s, s, x) = N(x)`; the lemma chain
/// `min_t F(m, t, x) <= F(m, s, x) <= N(x) <= F(s, t, x) <= max_m F(m, t, x)`
/// with its two equalities; flat max-min, flat min-max and the numeric tree
/// all equal to `N(x)`; and the sign rule over the positive and negative
/// state sets.
pub fn run_property_suite_with(seed: u64, trials: usize, operand: &Operand) -> Result<PropertyReport> {
    let mut report = PropertyReport {
        seed,
        trials,
        properties: Vec::new(),
    };
    if trials == 0 {
        return Ok(report);
    }
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            run_trial(&mut rng, trial, operand)
        })
        .collect::<Result<Vec<_>>>()?;
    let names = [PROP_MINMAX_TABLE, PROP_SADDLE, PROP_LEMMA, PROP_FLAT_TREE, PROP_SIGNED];
    let mut merged: Vec<PropertyOutcome> = names.iter().map(|n| PropertyOutcome::new(n)).collect();
    for trial in outcomes {
        for (m, o) in merged.iter_mut().zip(trial) {
            m.checks += o.checks;
            m.failures += o.failures;
            if m.counterexample.is_none() {
                m.counterexample = o.counterexample;
            }
        }
    }
    report.properties = merged;
    Ok(report)
}

fn run_trial(rng: &mut ChaCha8Rng, trial: usize, operand: &Operand) -> Result<Vec<PropertyOutcome>> {
    let mut table_p = PropertyOutcome::new(PROP_MINMAX_TABLE);
    let mut saddle_p = PropertyOutcome::new(PROP_SADDLE);
    let mut lemma_p = PropertyOutcome::new(PROP_LEMMA);
    let mut flat_p = PropertyOutcome::new(PROP_FLAT_TREE);
    let mut signed_p = PropertyOutcome::new(PROP_SIGNED);

    let table = random_table(rng);
    table_p.record(minmax_table_agrees(&table), || format!("trial {trial}: table {table:?}"));

    let case = Case::new(rng, 24);
    let p = &case.params;
    let s = &case.states;
    let n = s.len();
    let at = rng.random_range(0..case.points.len());
    let x = &case.points[at];
    let out = case.outputs[at];
    let sigma = &s[case.point_state[at]];
    let mut atoms = vec![vec![0.0; n]; n];
    for (i, mu) in s.iter().enumerate() {
        for (j, tau) in s.iter().enumerate() {
            atoms[i][j] = operand(p, mu, tau)?.eval(x);
        }
    }
    let f = |mu: &NetworkState, tau: &NetworkState| -> Result<f64> { Ok(operand(p, mu, tau)?.eval(x)) };
    let ctx = || format!("trial {trial}: arch {} x {x:?} state {sigma}", p.arch());

    let diag = f(sigma, sigma)?;
    saddle_p.record(close(diag, out, 1e-9), || format!("{}: F = {diag}, N = {out}", ctx()));

    // Hypothetical states need not be realized.
    let (mu_hat, tau_hat) = if rng.random_bool(0.5) {
        (s[rng.random_range(0..n)].clone(), s[rng.random_range(0..n)].clone())
    } else {
        (random_state(rng, p.arch()), random_state(rng, p.arch()))
    };
    let mut min_tau = f(&mu_hat, sigma)?;
    let mut max_mu = f(sigma, &tau_hat)?;
    let mut row_min = f64::INFINITY;
    let mut col_max = f64::NEG_INFINITY;
    for t in s {
        min_tau = min_tau.min(f(&mu_hat, t)?);
        row_min = row_min.min(f(sigma, t)?);
        max_mu = max_mu.max(f(t, &tau_hat)?);
        col_max = col_max.max(f(t, sigma)?);
    }
    let chain = [min_tau, f(&mu_hat, sigma)?, out, f(sigma, &tau_hat)?, max_mu];
    let tol = 1e-9 * chain.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let ordered = chain.windows(2).all(|w| w[0] <= w[1] + tol);
    let equalities = close(row_min, out, 1e-9) && close(col_max, out, 1e-9);
    lemma_p.record(ordered && equalities, || {
        format!(
            "{}: mu^ {mu_hat} tau^ {tau_hat} chain {chain:?} min_t F(s,t) {row_min} max_m F(m,s) {col_max}",
            ctx()
        )
    });

    let maxmin = atoms
        .iter()
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    let minmax = (0..n)
        .map(|j| atoms.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);
    let tree = build_tree(p, s, Mode::Numeric)?.eval_numeric(x);
    flat_p.record(
        close(maxmin, out, 1e-6) && close(minmax, out, 1e-6) && close(tree, out, 1e-6),
        || format!("{}: maxmin {maxmin} minmax {minmax} tree {tree} N {out}", ctx()),
    );

    let plus: Vec<usize> = (0..n)
        .filter(|&i| (0..case.points.len()).any(|k| case.point_state[k] == i && case.outputs[k] >= 0.0))
        .collect();
    let minus: Vec<usize> = (0..n)
        .filter(|&i| (0..case.points.len()).any(|k| case.point_state[k] == i && case.outputs[k] < 0.0))
        .collect();
    if !plus.is_empty() && !minus.is_empty() {
        let v = plus
            .iter()
            .map(|&i| minus.iter().map(|&j| atoms[i][j]).fold(f64::INFINITY, f64::min))
            .fold(f64::NEG_INFINITY, f64::max);
        signed_p.record((v >= 0.0) == (out >= 0.0), || format!("{}: signed saddle {v}, N {out}", ctx()));
    }
    Ok(vec![table_p, saddle_p, lemma_p, flat_p, signed_p])
}
