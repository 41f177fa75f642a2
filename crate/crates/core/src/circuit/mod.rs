//! The Net Operand, its affine atoms, and the trees built from them.
//!
//! For hypothetical states `mu`, `tau` the operand is defined layer by layer
//! on affine maps of the input:
//!
//! ```text
//! F0(mu, tau)     = W0 x + b0
//! F{k+1}(mu, tau) = b{k+1} + W{k+1}+ diag(mu_k) Fk(mu, tau) - W{k+1}- diag(tau_k) Fk(tau, mu)
//! ```
//!
//! where `M+ = max(0, M)` and `M- = max(0, -M)`. The last term swaps the
//! roles of `mu` and `tau`, so both orientations are carried through the
//! recursion. At `mu = tau = state(x)` the operand equals the network output.

mod simplify;
mod tree;
mod trie;

pub use simplify::{absorb, simplify, SimplifyOutcome};
pub use tree::{
    build_logical, build_numeric, build_tree, ChildRef, CircuitTree, KeyLabel, Mode, NodeKind, TreeValue,
};
pub use trie::StateTrie;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::nn::{split_signs, MlpParams, NetworkState};

/// Affine functional `x -> coefficients . x + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineAtom {
    pub coefficients: Vec<f64>,
    pub constant: f64,
}

impl AffineAtom {
    /// From the packed `(coefficients, constant)` vector of length `w0 + 1`.
    pub fn from_packed(v: &[f64]) -> Self {
        let (c, k) = v.split_at(v.len() - 1);
        Self {
            coefficients: c.to_vec(),
            constant: k[0],
        }
    }

    pub fn packed(&self) -> Vec<f64> {
        let mut v = self.coefficients.clone();
        v.push(self.constant);
        v
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.coefficients, x) + self.constant
    }
}

#[inline]
pub(crate) fn eval_packed(v: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    dot(&v[..n], x) + v[n]
}

/// Affine map stored row-major with `w0 + 1` columns (constant last).
type AffineMap = Vec<f64>;

fn check_state(params: &MlpParams, s: &NetworkState) -> Result<()> {
    if s.matches(params.arch()) {
        Ok(())
    } else {
        Err(Error::input(format!(
            "state {s} does not match architecture {}",
            params.arch()
        )))
    }
}

fn base_map(params: &MlpParams) -> AffineMap {
    let w = &params.weights()[0];
    let b = &params.biases()[0];
    let cols = w.cols() + 1;
    let mut f = vec![0.0; w.rows() * cols];
    for i in 0..w.rows() {
        f[i * cols..i * cols + w.cols()].copy_from_slice(w.row(i));
        f[i * cols + w.cols()] = b[i];
    }
    f
}

/// `W diag(mask) F` for a row-major affine map `F` with `cols` columns.
fn masked_product(w: &Matrix, mask: impl Fn(usize) -> bool, f: &[f64], cols: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..w.rows() {
        let row = &mut out[i * cols..(i + 1) * cols];
        for (j, &wij) in w.row(i).iter().enumerate() {
            if wij != 0.0 && mask(j) {
                for (o, v) in row.iter_mut().zip(&f[j * cols..(j + 1) * cols]) {
                    *o += wij * v;
                }
            }
        }
    }
}

/// The atom realizing `F^d(mu, tau, .)`.
pub fn net_operand_atom(params: &MlpParams, mu: &NetworkState, tau: &NetworkState) -> Result<AffineAtom> {
    check_state(params, mu)?;
    check_state(params, tau)?;
    let cols = params.input_dim() + 1;
    let mut fwd = base_map(params);
    let mut bwd = fwd.clone();
    for k in 1..=params.depth() {
        let w = &params.weights()[k];
        let b = &params.biases()[k];
        let (plus, minus) = split_signs(w);
        let (m, t) = (mu.layer(k - 1), tau.layer(k - 1));
        let n = w.rows() * cols;
        let (mut a, mut c) = (vec![0.0; n], vec![0.0; n]);
        let (mut a2, mut c2) = (vec![0.0; n], vec![0.0; n]);
        masked_product(&plus, |j| m.get(j), &fwd, cols, &mut a);
        masked_product(&minus, |j| t.get(j), &bwd, cols, &mut c);
        masked_product(&plus, |j| t.get(j), &bwd, cols, &mut a2);
        masked_product(&minus, |j| m.get(j), &fwd, cols, &mut c2);
        let mut nf = vec![0.0; n];
        let mut nb = vec![0.0; n];
        for i in 0..w.rows() {
            for q in 0..cols {
                let at = i * cols + q;
                let bias = if q + 1 == cols { b[i] } else { 0.0 };
                nf[at] = bias + a[at] - c[at];
                nb[at] = bias + a2[at] - c2[at];
            }
        }
        fwd = nf;
        bwd = nb;
    }
    Ok(AffineAtom::from_packed(&fwd))
}

/// Atoms for every ordered pair of `states`, packed so that pair `(i, j)`
/// occupies `[(i * n + j) * (w0 + 1) ..][.. w0 + 1]`.
///
/// Pairs sharing leading layers share the work for those layers: the
/// products with `W+ diag(s)` and `W- diag(s)` are formed once per distinct
/// prefix rather than once per pair.
pub fn atom_table(params: &MlpParams, states: &[NetworkState]) -> Result<Vec<f64>> {
    for s in states {
        check_state(params, s)?;
    }
    let n = states.len();
    let cols = params.input_dim() + 1;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| states[a].cmp(&states[b]));
    if order.windows(2).any(|w| states[w[0]] == states[w[1]]) {
        return Err(Error::input("duplicate states in atom table request"));
    }
    let sorted: Vec<&NetworkState> = order.iter().map(|&i| &states[i]).collect();
    let signs: Vec<(Matrix, Matrix)> = params.weights().iter().map(split_signs).collect();
    let mut out = vec![0.0; n * n * cols];
    if n == 0 {
        return Ok(out);
    }
    let mut ctx = PairCtx {
        params,
        signs: &signs,
        sorted: &sorted,
        order: &order,
        cols,
        n,
        out: &mut out,
    };
    let f0 = base_map(params);
    ctx.recurse(0, 0..n, 0..n, &f0, &f0, true);
    Ok(out)
}

struct PairCtx<'a> {
    params: &'a MlpParams,
    signs: &'a [(Matrix, Matrix)],
    sorted: &'a [&'a NetworkState],
    order: &'a [usize],
    cols: usize,
    n: usize,
    out: &'a mut [f64],
}

impl PairCtx<'_> {
    fn groups(&self, h: usize, r: std::ops::Range<usize>) -> Vec<std::ops::Range<usize>> {
        let mut g = Vec::new();
        let mut start = r.start;
        for i in r.start + 1..r.end {
            if self.sorted[i].layer(h) != self.sorted[start].layer(h) {
                g.push(start..i);
                start = i;
            }
        }
        g.push(start..r.end);
        g
    }

    /// `x = F_h(mu, tau)`, `y = F_h(tau, mu)` for all `mu` in `r1`, `tau` in `r2`.
    fn recurse(
        &mut self,
        h: usize,
        r1: std::ops::Range<usize>,
        r2: std::ops::Range<usize>,
        x: &[f64],
        y: &[f64],
        diag: bool,
    ) {
        let cols = self.cols;
        if h == self.params.depth() {
            let (i, j) = (self.order[r1.start], self.order[r2.start]);
            self.out[(i * self.n + j) * cols..][..cols].copy_from_slice(x);
            self.out[(j * self.n + i) * cols..][..cols].copy_from_slice(y);
            return;
        }
        let (plus, minus) = &self.signs[h + 1];
        let bias = &self.params.biases()[h + 1];
        let rows = plus.rows();
        let size = rows * cols;
        let g1 = self.groups(h, r1);
        let g2 = if diag { g1.clone() } else { self.groups(h, r2) };
        let prod = |w: &Matrix, st: crate::nn::LayerState, f: &[f64]| {
            let mut o = vec![0.0; size];
            masked_product(w, |j| st.get(j), f, cols, &mut o);
            o
        };
        let a: Vec<(Vec<f64>, Vec<f64>)> = g1
            .iter()
            .map(|g| {
                let s = self.sorted[g.start].layer(h);
                (prod(plus, s, x), prod(minus, s, x))
            })
            .collect();
        let b: Vec<(Vec<f64>, Vec<f64>)> = if diag {
            a.clone()
        } else {
            g2.iter()
                .map(|g| {
                    let s = self.sorted[g.start].layer(h);
                    (prod(plus, s, y), prod(minus, s, y))
                })
                .collect()
        };
        let mut nx = vec![0.0; size];
        let mut ny = vec![0.0; size];
        for (ia, ga) in g1.iter().enumerate() {
            let jb0 = if diag { ia } else { 0 };
            for (jb, gb) in g2.iter().enumerate().skip(jb0) {
                for i in 0..rows {
                    for q in 0..cols {
                        let at = i * cols + q;
                        let c = if q + 1 == cols { bias[i] } else { 0.0 };
                        nx[at] = c + a[ia].0[at] - b[jb].1[at];
                        ny[at] = c + b[jb].0[at] - a[ia].1[at];
                    }
                }
                self.recurse(h + 1, ga.clone(), gb.clone(), &nx, &ny, diag && ia == jb);
            }
        }
    }
}
