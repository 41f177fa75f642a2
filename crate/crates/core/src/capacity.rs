//! Combinatorial and norm-based capacity measures.
//!
//! The Boolean circuit over a boundary set `S0` needs only as many neurons per
//! layer as the rank of `S0` restricted to that layer; layers of rank one
//! drop out entirely. The resulting parameter count `k`, the number of
//! atomic inequalities `s = |S0|^2`, and the polynomial degree feed the
//! Goldberg–Jerrum bound `2 k log2(8 e d s)`.

use std::path::Path;

use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{ArchSpec, NetworkState};
use crate::states::{enumerate_states, refine_boundary, GridSpec};
use crate::trainer::TrainRun;

/// Power-iteration settings for spectral norms.
pub const SPECTRAL_ITERS: usize = 100;
pub const SPECTRAL_TOL: f64 = 1e-10;

/// Reduced architecture supporting the circuit over a boundary set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReducedDescription {
    /// `r[0]` is the input width, `r[1..=d]` the layer ranks, and the last
    /// entry the readout width 1.
    pub ranks: Vec<usize>,
    /// 1-based hidden layers with rank above one.
    pub retained_layers: Vec<usize>,
    pub k: usize,
    pub s: usize,
    pub degree: usize,
}

impl ReducedDescription {
    /// The description of a single linear classifier on `input_dim` inputs.
    pub fn linear(input_dim: usize, depth: usize) -> Self {
        let mut ranks = vec![input_dim];
        ranks.extend(std::iter::repeat_n(1, depth + 1));
        Self {
            ranks,
            retained_layers: Vec::new(),
            k: input_dim + 1,
            s: 1,
            degree: 1,
        }
    }

    pub fn vc_bool(&self) -> f64 {
        jerrum_bound(self.k as f64, self.s as f64, self.degree as f64)
    }
}

/// Rank over the rationals, by fraction-free (Bareiss) elimination.
pub fn rational_rank(rows: &[Vec<i64>]) -> usize {
    let Some(cols) = rows.first().map(Vec::len) else {
        return 0;
    };
    let mut m: Vec<Vec<BigInt>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| BigInt::from(v)).collect())
        .collect();
    let mut rank = 0;
    let mut prev = BigInt::from(1);
    for c in 0..cols {
        let Some(p) = (rank..m.len()).find(|&i| !m[i][c].is_zero()) else {
            continue;
        };
        m.swap(rank, p);
        for i in rank + 1..m.len() {
            for j in c + 1..cols {
                let v = (&m[rank][c] * &m[i][j] - &m[i][c] * &m[rank][j]) / &prev;
                m[i][j] = v;
            }
            m[i][c] = BigInt::zero();
        }
        prev = m[rank][c].abs();
        rank += 1;
        if rank == m.len() {
            break;
        }
    }
    rank
}

fn layer_rank(states: &[NetworkState], l: usize) -> usize {
    let mut rows: Vec<Vec<i64>> = states
        .iter()
        .map(|s| {
            let ls = s.layer(l);
            (0..ls.width()).map(|i| ls.get(i) as i64).collect()
        })
        .collect();
    rows.sort();
    rows.dedup();
    rational_rank(&rows)
}

/// Reduced description of the circuit over `sigma0`.
///
/// Per hidden layer `l`, `r_l` is the rank of the `|S0| x w_l` binary matrix
/// of layer-`l` states, floored at one. Layers with `r_l = 1` are deleted and
/// their neighbours compose; `k` sums `r_out (r_in + 1)` along the retained
/// chain from the input through the readout.
pub fn minimal_description(sigma0: &[NetworkState], arch: &ArchSpec) -> Result<ReducedDescription> {
    if let Some(s) = sigma0.iter().find(|s| !s.matches(arch)) {
        return Err(Error::input(format!("state {s} does not match architecture {arch}")));
    }
    let mut states = sigma0.to_vec();
    states.sort();
    states.dedup();
    if states.is_empty() {
        log::warn!("empty boundary set; describing the network as a linear classifier");
        return Ok(ReducedDescription::linear(arch.input_dim, arch.depth()));
    }
    let mut ranks = vec![arch.input_dim];
    ranks.extend((0..arch.depth()).map(|l| layer_rank(&states, l).max(1)));
    ranks.push(1);
    let retained_layers: Vec<usize> = (1..=arch.depth()).filter(|&l| ranks[l] > 1).collect();
    let mut k = 0;
    let mut r_in = arch.input_dim;
    for &l in &retained_layers {
        k += ranks[l] * (r_in + 1);
        r_in = ranks[l];
    }
    k += r_in + 1;
    let n = states.len();
    Ok(ReducedDescription {
        degree: retained_layers.len() + 1,
        retained_layers,
        ranks,
        k,
        s: n * n,
    })
}

/// `2 k log2(8 e degree s)`, or 0 when `k = 0`.
pub fn jerrum_bound(k: f64, s: f64, degree: f64) -> f64 {
    if k == 0.0 {
        return 0.0;
    }
    2.0 * k * (8.0 * std::f64::consts::E * degree * s).log2()
}

pub fn vc_bool(sigma0: &[NetworkState], arch: &ArchSpec) -> Result<f64> {
    Ok(minimal_description(sigma0, arch)?.vc_bool())
}

/// Architecture-only bound: every parameter is free and every pair of the
/// `2^N` hidden states indexes an atom, so `s = 4^N`.
pub fn vc_nodata(arch: &ArchSpec) -> f64 {
    vc_nodata_counts(arch.parameter_count(), arch.hidden_neurons(), arch.depth())
}

/// [`vc_nodata`] from raw counts; `hidden_neurons = depth = 0` is a single
/// linear unit.
pub fn vc_nodata_counts(parameters: usize, hidden_neurons: usize, depth: usize) -> f64 {
    if parameters == 0 {
        return 0.0;
    }
    // log2(s) = 2N; kept in log space since 4^N overflows quickly.
    let log2_s = 2.0 * hidden_neurons as f64;
    let degree = (depth + 1) as f64;
    2.0 * parameters as f64 * ((8.0 * std::f64::consts::E * degree).log2() + log2_s)
}

/// `sqrt(vc / m)`.
pub fn gamma_bool(vc: f64, m: usize) -> f64 {
    assert!(m >= 1, "gamma_bool needs at least one sample");
    (vc / m as f64).sqrt()
}

/// Margin-normalized norm bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBounds {
    pub frobenius: f64,
    pub spec_l12: f64,
    pub spec_fro: f64,
}

impl NormBounds {
    pub const INFINITE: Self = Self {
        frobenius: f64::INFINITY,
        spec_l12: f64::INFINITY,
        spec_fro: f64::INFINITY,
    };
}

/// Norm bounds over the given weight matrices (all layers, readout included).
///
/// `‖W‖₁,₂` is the sum of column 2-norms and `h_l` the output width of layer
/// `l`. A non-positive margin gives infinite bounds.
pub fn norm_bounds(weights: &[Matrix], m: usize, gamma: f64) -> NormBounds {
    if gamma <= 0.0 || !gamma.is_finite() {
        return NormBounds::INFINITE;
    }
    let scale = 1.0 / (m as f64 * gamma * gamma);
    let fro: Vec<f64> = weights.iter().map(Matrix::frobenius_sq).collect();
    let spec: Vec<f64> = weights
        .iter()
        .map(|w| w.spectral_norm(SPECTRAL_ITERS, SPECTRAL_TOL).powi(2))
        .collect();
    let spec_prod: f64 = spec.iter().product();
    let l12_sum: f64 = weights
        .iter()
        .zip(&spec)
        .map(|(w, s)| w.l12_norm().powi(2) / s)
        .sum();
    let fro_sum: f64 = weights
        .iter()
        .zip(fro.iter().zip(&spec))
        .map(|(w, (f, s))| w.rows() as f64 * f / s)
        .sum();
    NormBounds {
        frobenius: scale * fro.iter().product::<f64>(),
        spec_l12: scale * spec_prod * l12_sum,
        spec_fro: scale * spec_prod * fro_sum,
    }
}

/// One row of a bound series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub step: usize,
    pub train_accuracy: f64,
    pub gamma: f64,
    pub sigma_zero: usize,
    pub vc_bool: f64,
    pub gamma_bool: f64,
    pub norms: NormBounds,
}

/// Bounds for every snapshot of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub m: usize,
    pub vc_nodata: f64,
    pub rows: Vec<BoundRow>,
}

pub const BOUNDS_CSV_HEADER: &str = "step,train_acc,gamma,vc_bool,gamma_bool,frobenius,spec_l12,spec_fro";

impl BoundReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BOUNDS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                r.train_accuracy,
                r.gamma,
                r.vc_bool,
                r.gamma_bool,
                r.norms.frobenius,
                r.norms.spec_l12,
                r.norms.spec_fro
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, &self.to_csv())
    }

    pub fn last(&self) -> Option<&BoundRow> {
        self.rows.last()
    }
}

/// Bound row for one model on `data`, with the boundary set taken from
/// `grid` (refined by bisection when `refine` is set).
pub fn bound_row(
    step: usize,
    params: &crate::nn::MlpParams,
    data: &Dataset,
    grid: &GridSpec,
    refine: bool,
) -> Result<BoundRow> {
    let mut reg = enumerate_states(params, grid)?;
    if refine {
        reg = refine_boundary(params, &reg, grid)?;
    }
    let sigma0 = reg.sigma_zero();
    let vc = vc_bool(&sigma0, params.arch())?;
    let gamma = crate::nn::margin(params, data)?;
    Ok(BoundRow {
        step,
        train_accuracy: crate::nn::accuracy(params, data),
        gamma,
        sigma_zero: sigma0.len(),
        vc_bool: vc,
        gamma_bool: gamma_bool(vc, data.len()),
        norms: norm_bounds(params.weights(), data.len(), gamma),
    })
}

/// Bound series over the snapshots of `run`, parallel across snapshots.
///
/// Models with a projection are evaluated in projected coordinates; `data`
/// must already live there.
pub fn bound_series(run: &TrainRun, data: &Dataset, grid: &GridSpec, refine: bool) -> Result<BoundReport> {
    let first = run
        .snapshots
        .first()
        .ok_or_else(|| Error::input("training run has no snapshots"))?;
    let arch = first.model.params.arch().clone();
    let rows = run
        .snapshots
        .par_iter()
        .map(|s| bound_row(s.step, &s.model.params, data, grid, refine))
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport {
        m: data.len(),
        vc_nodata: vc_nodata(&arch),
        rows,
    })
}
