//! Empirical enumeration of realized network states by grid search, with
//! output-sign flags and boundary refinement by bisection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{ArchSpec, LayerState, MlpParams, NetworkState};

/// Default cap on the number of grid points evaluated.
pub const DEFAULT_POINT_BUDGET: u64 = 100_000_000;

/// Axis-aligned lattice including both endpoints of every axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    resolution: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, resolution: Vec<usize>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() || lower.len() != resolution.len() {
            return Err(Error::input("grid corners and resolution must share a positive dimension"));
        }
        for i in 0..lower.len() {
            if !(lower[i] < upper[i]) || !lower[i].is_finite() || !upper[i].is_finite() {
                return Err(Error::input(format!("grid axis {i}: need finite lower < upper")));
            }
            if resolution[i] < 2 {
                return Err(Error::input(format!("grid axis {i}: resolution must be at least 2")));
            }
        }
        Ok(Self {
            lower,
            upper,
            resolution,
        })
    }

    /// Same resolution on every axis.
    pub fn uniform(lower: Vec<f64>, upper: Vec<f64>, res: usize) -> Result<Self> {
        let n = lower.len();
        Self::new(lower, upper, vec![res; n])
    }

    /// Bounding box of `lo..hi` widened by `margin` of its extent on each side.
    pub fn around(lo: &[f64], hi: &[f64], margin: f64, res: usize) -> Result<Self> {
        let mut lower = Vec::with_capacity(lo.len());
        let mut upper = Vec::with_capacity(lo.len());
        for (&a, &b) in lo.iter().zip(hi) {
            let ext = (b - a).max(1e-3);
            lower.push(a - margin * ext);
            upper.push(b + margin * ext);
        }
        Self::uniform(lower, upper, res)
    }

    /// Default resolution: 512 per axis in 2D, 24 per axis otherwise.
    pub fn default_resolution(dim: usize) -> usize {
        if dim <= 2 {
            512
        } else {
            24
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    /// Total number of points, or `None` on overflow.
    pub fn total_points(&self) -> Option<u64> {
        self.resolution
            .iter()
            .try_fold(1u64, |acc, &r| acc.checked_mul(r as u64))
    }

    /// Spacing along `axis`.
    pub fn cell(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.resolution[axis] - 1) as f64
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.resolution[axis] {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.cell(axis)
        }
    }

    /// Point with linear index `idx` (axis 0 varies fastest).
    pub fn point(&self, mut idx: u64) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dim());
        for a in 0..self.dim() {
            let r = self.resolution[a] as u64;
            p.push(self.coordinate(a, (idx % r) as usize));
            idx /= r;
        }
        p
    }

    fn stride(&self, axis: usize) -> u64 {
        self.resolution[..axis].iter().map(|&r| r as u64).product()
    }

    fn axis_index(&self, idx: u64, axis: usize) -> usize {
        ((idx / self.stride(axis)) % self.resolution[axis] as u64) as usize
    }

    /// Grid with `factor` times as many intervals per axis; every point of
    /// `self` is also a point of the result.
    pub fn refined(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        Self {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            resolution: self.resolution.iter().map(|&r| (r - 1) * factor + 1).collect(),
        }
    }

    pub(crate) fn check_budget(&self, budget: u64) -> Result<u64> {
        match self.total_points() {
            Some(n) if n <= budget => Ok(n),
            _ => Err(Error::Resource(format!(
                "grid of {:?} points exceeds the budget of {budget}",
                self.resolution
            ))),
        }
    }
}

/// Output signs seen in one state's region and a representative input.
#[derive(Debug, Clone, PartialEq)]
pub struct StateInfo {
    pub nonneg: bool,
    pub neg: bool,
    /// Lexicographically smallest input seen with this state.
    pub representative: Vec<f64>,
    pub hits: u64,
}

/// Realized states with `N >= 0` / `N < 0` flags.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRegistry {
    arch: ArchSpec,
    states: BTreeMap<NetworkState, StateInfo>,
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

impl StateRegistry {
    pub fn new(arch: ArchSpec) -> Self {
        Self {
            arch,
            states: BTreeMap::new(),
        }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    /// Records that `state` occurs at `x` with network output `output`.
    pub fn register(&mut self, state: NetworkState, x: &[f64], output: f64) {
        let nonneg = output >= 0.0;
        match self.states.get_mut(&state) {
            Some(info) => {
                info.nonneg |= nonneg;
                info.neg |= !nonneg;
                info.hits += 1;
                if lex_less(x, &info.representative) {
                    info.representative = x.to_vec();
                }
            }
            None => {
                self.states.insert(
                    state,
                    StateInfo {
                        nonneg,
                        neg: !nonneg,
                        representative: x.to_vec(),
                        hits: 1,
                    },
                );
            }
        }
    }

    /// Union of states, OR of flags; commutative and associative.
    pub fn merge(&mut self, other: StateRegistry) {
        for (s, o) in other.states {
            match self.states.get_mut(&s) {
                Some(info) => {
                    info.nonneg |= o.nonneg;
                    info.neg |= o.neg;
                    info.hits += o.hits;
                    if lex_less(&o.representative, &info.representative) {
                        info.representative = o.representative;
                    }
                }
                None => {
                    self.states.insert(s, o);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, s: &NetworkState) -> Option<&StateInfo> {
        self.states.get(s)
    }

    pub fn contains(&self, s: &NetworkState) -> bool {
        self.states.contains_key(s)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NetworkState, &StateInfo)> {
        self.states.iter()
    }

    /// All realized states, sorted.
    pub fn sigma_bar(&self) -> Vec<NetworkState> {
        self.states.keys().cloned().collect()
    }

    pub fn sigma_plus(&self) -> Vec<NetworkState> {
        self.filtered(|i| i.nonneg)
    }

    pub fn sigma_minus(&self) -> Vec<NetworkState> {
        self.filtered(|i| i.neg)
    }

    /// Boundary states: seen with both output signs.
    pub fn sigma_zero(&self) -> Vec<NetworkState> {
        self.filtered(|i| i.nonneg && i.neg)
    }

    fn filtered(&self, f: impl Fn(&StateInfo) -> bool) -> Vec<NetworkState> {
        self.states
            .iter()
            .filter(|(_, i)| f(i))
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let dim = self.states.values().next().map_or(0, |i| i.representative.len());
        let mut out = String::from("state,nonneg,neg");
        for j in 0..dim {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for (s, i) in &self.states {
            let _ = write!(out, "{s},{},{}", i.nonneg as u8, i.neg as u8);
            for v in &i.representative {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(arch: ArchSpec, text: &str) -> Result<Self> {
        let mut reg = Self::new(arch);
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 3 {
                return Err(Error::format(format!("states row {} is too short", n + 1)));
            }
            let state = NetworkState::parse(f[0])?;
            if !state.matches(&reg.arch) {
                return Err(Error::format(format!("state {} does not fit the architecture", f[0])));
            }
            let flag = |s: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(Error::format(format!("bad flag {s:?}"))),
            };
            let representative = f[3..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| Error::format(format!("bad coordinate {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            reg.states.insert(
                state,
                StateInfo {
                    nonneg: flag(f[1])?,
                    neg: flag(f[2])?,
                    representative,
                    hits: 1,
                },
            );
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, self.to_csv())
    }

    pub fn load(arch: ArchSpec, path: &Path) -> Result<Self> {
        Self::from_csv(arch, &crate::error::read_to_string(path)?)
    }
}

const CHUNK: u64 = 4096;

/// Evaluates the network at every grid point and registers each state with
/// its output sign.
pub fn enumerate_states(params: &MlpParams, grid: &GridSpec) -> Result<StateRegistry> {
    enumerate_states_with_budget(params, grid, DEFAULT_POINT_BUDGET)
}

pub fn enumerate_states_with_budget(params: &MlpParams, grid: &GridSpec, budget: u64) -> Result<StateRegistry> {
    if grid.dim() != params.input_dim() {
        return Err(Error::input(format!(
            "grid dimension {} does not match network input {}",
            grid.dim(),
            params.input_dim()
        )));
    }
    let n = grid.check_budget(budget)?;
    let chunks = n.div_ceil(CHUNK);
    let arch = params.arch().clone();
    Ok((0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut reg = StateRegistry::new(arch.clone());
            for idx in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let x = grid.point(idx);
                let (out, st) = params.output_and_state(&x);
                reg.register(st, &x, out);
            }
            reg
        })
        .reduce(
            || StateRegistry::new(arch.clone()),
            |mut a, b| {
                a.merge(b);
                a
            },
        ))
}

/// Locates sign changes of the output between axis-adjacent grid points by
/// 40 bisection steps and registers the states just either side of each.
pub fn refine_boundary(params: &MlpParams, registry: &StateRegistry, grid: &GridSpec) -> Result<StateRegistry> {
    refine_boundary_with_budget(params, registry, grid, DEFAULT_POINT_BUDGET)
}

pub fn refine_boundary_with_budget(
    params: &MlpParams,
    registry: &StateRegistry,
    grid: &GridSpec,
    budget: u64,
) -> Result<StateRegistry> {
    if grid.dim() != params.input_dim() {
        return Err(Error::input("grid dimension does not match network input"));
    }
    let n = grid.check_budget(budget)?;
    let signs: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| params.output(&grid.point(i)) >= 0.0)
        .collect();
    let arch = params.arch().clone();
    let found = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut reg = StateRegistry::new(arch.clone());
            for idx in c * CHUNK..((c + 1) * CHUNK).min(n) {
                for axis in 0..grid.dim() {
                    if grid.axis_index(idx, axis) + 1 == grid.resolution[axis] {
                        continue;
                    }
                    let nb = idx + grid.stride(axis);
                    if signs[idx as usize] != signs[nb as usize] {
                        bisect_pair(params, grid, idx, axis, &mut reg);
                    }
                }
            }
            reg
        })
        .reduce(
            || StateRegistry::new(arch.clone()),
            |mut a, b| {
                a.merge(b);
                a
            },
        );
    let mut out = registry.clone();
    out.merge(found);
    Ok(out)
}

fn bisect_pair(params: &MlpParams, grid: &GridSpec, idx: u64, axis: usize, reg: &mut StateRegistry) {
    let mut x = bisect_sign_change(params, grid, idx, axis);
    let star = x[axis];
    let delta = 1e-9 * grid.cell(axis);
    for pos in [star - delta, star + delta] {
        x[axis] = pos;
        let (out, st) = params.output_and_state(&x);
        reg.register(st, &x, out);
    }
}

/// Location of the sign change on the segment between grid point `idx` and
/// its successor along `axis`, after 40 bisection steps.
pub fn bisect_sign_change(params: &MlpParams, grid: &GridSpec, idx: u64, axis: usize) -> Vec<f64> {
    let mut x = grid.point(idx);
    let lo_sign = params.output(&x) >= 0.0;
    let i = grid.axis_index(idx, axis);
    let (mut lo, mut hi) = (grid.coordinate(axis, i), grid.coordinate(axis, i + 1));
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        x[axis] = mid;
        if (params.output(&x) >= 0.0) == lo_sign {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    x[axis] = 0.5 * (lo + hi);
    x
}

/// Which state set a projection is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Full,
    Boundary,
}

/// States restricted to a subset of hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProjection {
    /// 1-based hidden layer indices, ascending.
    pub layers: Vec<usize>,
    /// Distinct projected states, sorted.
    pub states: Vec<Vec<LayerState>>,
    /// For each source state (in sorted order), the index of its projection.
    pub back_refs: Vec<usize>,
}

/// Projects Σ̄ or Σ₀ onto the hidden layers in `layers` (1-based).
pub fn project(registry: &StateRegistry, layers: &[usize], source: Source) -> Result<LayerProjection> {
    let d = registry.arch().depth();
    if layers.is_empty() {
        return Err(Error::input("projection needs at least one layer"));
    }
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > d) {
        return Err(Error::input(format!("layer {l} outside 1..={d}")));
    }
    let mut j = layers.to_vec();
    j.sort_unstable();
    j.dedup();
    let src = match source {
        Source::Full => registry.sigma_bar(),
        Source::Boundary => registry.sigma_zero(),
    };
    Ok(project_states(&src, &j))
}

/// Projection of an explicit sorted state list onto 1-based layers `j`.
pub fn project_states(states: &[NetworkState], j: &[usize]) -> LayerProjection {
    let keys: Vec<Vec<LayerState>> = states
        .iter()
        .map(|s| j.iter().map(|&l| s.layer(l - 1)).collect())
        .collect();
    let mut uniq = keys.clone();
    uniq.sort();
    uniq.dedup();
    let back_refs = keys
        .iter()
        .map(|k| uniq.binary_search(k).expect("key present"))
        .collect();
    LayerProjection {
        layers: j.to_vec(),
        states: uniq,
        back_refs,
    }
}
