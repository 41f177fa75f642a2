//! Fully-connected ReLU binary classifiers: architecture, parameters, exact
//! forward evaluation with activation-state capture, and model files.
//!
//! Layer indexing follows the recursion used everywhere else in the crate:
//! `weights[0]` maps the input (width `w0`) to the first hidden layer,
//! `weights[k]` maps hidden layer `k-1` to hidden layer `k`, and
//! `weights[d]` is the `1 x w_d` readout. Hidden layer `k` (0-based) is
//! active where its preactivation is `>= 0`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::hexfloat;
use crate::linalg::{dot, Matrix};

/// Widest hidden layer a [`LayerState`] can hold.
pub const MAX_LAYER_WIDTH: usize = 128;

/// Input width plus hidden widths; the output width is always 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_widths,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::input("input_dim must be positive"));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::input("at least one hidden layer is required"));
        }
        if let Some(w) = self
            .hidden_widths
            .iter()
            .find(|&&w| w == 0 || w > MAX_LAYER_WIDTH)
        {
            return Err(Error::input(format!(
                "hidden width {w} outside 1..={MAX_LAYER_WIDTH}"
            )));
        }
        Ok(())
    }

    /// Number of hidden layers, `d`.
    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    pub fn hidden_neurons(&self) -> usize {
        self.hidden_widths.iter().sum()
    }

    /// `(rows, cols)` of weight matrix `k`, for `k = 0..=d`.
    pub fn layer_shape(&self, k: usize) -> (usize, usize) {
        let rows = self.hidden_widths.get(k).copied().unwrap_or(1);
        let cols = if k == 0 {
            self.input_dim
        } else {
            self.hidden_widths[k - 1]
        };
        (rows, cols)
    }

    /// `sum_l w_{l+1} (w_l + 1)` over all affine maps including the readout.
    pub fn parameter_count(&self) -> usize {
        (0..=self.depth())
            .map(|k| {
                let (r, c) = self.layer_shape(k);
                r * (c + 1)
            })
            .sum()
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input_dim)?;
        for w in &self.hidden_widths {
            write!(f, "-{w}")?;
        }
        write!(f, "-1")
    }
}

/// On/off pattern of one hidden layer; bit `i` is neuron `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerState {
    bits: u128,
    width: u16,
}

impl LayerState {
    pub fn new(width: usize) -> Self {
        assert!(width <= MAX_LAYER_WIDTH);
        Self {
            bits: 0,
            width: width as u16,
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut s = Self::new(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            s.set(i, b);
        }
        s
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width as usize
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.width());
        (self.bits >> i) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, on: bool) {
        if on {
            self.bits |= 1 << i;
        } else {
            self.bits &= !(1 << i);
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.bits.count_ones()
    }

    /// Parses `"0110"` (neuron 0 first).
    pub fn parse(s: &str) -> Result<Self> {
        if s.len() > MAX_LAYER_WIDTH {
            return Err(Error::format(format!("layer state {s:?} too wide")));
        }
        let mut st = Self::new(s.len());
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => st.set(i, true),
                _ => return Err(Error::format(format!("bad state character {c:?}"))),
            }
        }
        Ok(st)
    }
}

impl fmt::Display for LayerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.width() {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Activation pattern of every hidden neuron, one [`LayerState`] per layer.
///
/// The output neuron is not part of the state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NetworkState {
    layers: Vec<LayerState>,
}

impl NetworkState {
    pub fn new(layers: Vec<LayerState>) -> Self {
        Self { layers }
    }

    /// Builds a state from nested bit lists, one list per hidden layer.
    pub fn from_bits(bits: &[&[bool]]) -> Self {
        Self::new(bits.iter().map(|b| LayerState::from_bools(b)).collect())
    }

    /// All-zero state shaped for `arch`.
    pub fn zeros(arch: &ArchSpec) -> Self {
        Self::new(
            arch.hidden_widths
                .iter()
                .map(|&w| LayerState::new(w))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> LayerState {
        self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerState {
        &mut self.layers[l]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Total number of bits.
    pub fn len(&self) -> usize {
        self.layers.iter().map(LayerState::width).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matches(&self, arch: &ArchSpec) -> bool {
        self.layers.len() == arch.depth()
            && self
                .layers
                .iter()
                .zip(&arch.hidden_widths)
                .all(|(s, &w)| s.width() == w)
    }

    /// Flat bit view, layer by layer.
    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers
            .iter()
            .flat_map(|l| (0..l.width()).map(move |i| l.get(i)))
    }

    /// Parses `"01|110"`.
    pub fn parse(s: &str) -> Result<Self> {
        s.split('|')
            .map(LayerState::parse)
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }
}

impl fmt::Display for NetworkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Weights and biases of a ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    arch: ArchSpec,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn new(arch: ArchSpec, weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        arch.validate()?;
        let layers = arch.depth() + 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::input(format!(
                "expected {layers} weight matrices and bias vectors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for k in 0..layers {
            let (r, c) = arch.layer_shape(k);
            if weights[k].rows() != r || weights[k].cols() != c || biases[k].len() != r {
                return Err(Error::input(format!(
                    "layer {k}: expected {r}x{c} weights and {r} biases, got {}x{} and {}",
                    weights[k].rows(),
                    weights[k].cols(),
                    biases[k].len()
                )));
            }
            if !weights[k].is_finite() || biases[k].iter().any(|b| !b.is_finite()) {
                return Err(Error::input(format!("layer {k} has non-finite entries")));
            }
        }
        Ok(Self {
            arch,
            weights,
            biases,
        })
    }

    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let (weights, biases) = (0..=arch.depth())
            .map(|k| {
                let (r, c) = arch.layer_shape(k);
                (Matrix::zeros(r, c), vec![0.0; r])
            })
            .unzip();
        Self::new(arch, weights, biases)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn depth(&self) -> usize {
        self.arch.depth()
    }

    #[cfg(test)]
    pub(crate) fn parts_mut(&mut self) -> (&mut [Matrix], &mut [Vec<f64>]) {
        (&mut self.weights, &mut self.biases)
    }

    /// Network output `N(x)` without recording a trace.
    pub fn output(&self, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        let last = self.depth();
        for k in 0..=last {
            let w = &self.weights[k];
            let b = &self.biases[k];
            let mut next: Vec<f64> = (0..w.rows()).map(|i| b[i] + dot(w.row(i), &h)).collect();
            if k < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        h[0]
    }

    /// Output and activation state without allocating a full trace.
    pub fn output_and_state(&self, x: &[f64]) -> (f64, NetworkState) {
        let mut h = x.to_vec();
        let last = self.depth();
        let mut layers = Vec::with_capacity(last);
        for k in 0..=last {
            let w = &self.weights[k];
            let b = &self.biases[k];
            let mut next: Vec<f64> = (0..w.rows()).map(|i| b[i] + dot(w.row(i), &h)).collect();
            if k < last {
                let mut st = LayerState::new(next.len());
                for (i, v) in next.iter_mut().enumerate() {
                    if *v >= 0.0 {
                        st.set(i, true);
                    } else {
                        *v = 0.0;
                    }
                }
                layers.push(st);
            }
            h = next;
        }
        (h[0], NetworkState::new(layers))
    }
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `Net^k(x)` for `k = 0..=d`; the last entry has length 1.
    pub preactivations: Vec<Vec<f64>>,
    pub output: f64,
    pub state: NetworkState,
}

impl ForwardTrace {
    /// Smallest `|preactivation|` over all hidden neurons and the output.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.preactivations
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Exact forward pass. State bit is 1 iff the preactivation is `>= 0`.
pub fn forward(params: &MlpParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(Error::input(format!(
            "input has dimension {}, network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let last = params.depth();
    let mut pre = Vec::with_capacity(last + 1);
    let mut layers = Vec::with_capacity(last);
    let mut h = x.to_vec();
    for k in 0..=last {
        let w = &params.weights[k];
        let b = &params.biases[k];
        let z: Vec<f64> = (0..w.rows()).map(|i| b[i] + dot(w.row(i), &h)).collect();
        if k < last {
            let mut st = LayerState::new(z.len());
            h = z
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    st.set(i, v >= 0.0);
                    v.max(0.0)
                })
                .collect();
            layers.push(st);
        }
        pre.push(z);
    }
    let output = pre[last][0];
    Ok(ForwardTrace {
        preactivations: pre,
        output,
        state: NetworkState::new(layers),
    })
}

/// Splits `m` into entrywise nonnegative parts with `m = plus - minus`.
pub fn split_signs(m: &Matrix) -> (Matrix, Matrix) {
    (m.map(|v| v.max(0.0)), m.map(|v| (-v).max(0.0)))
}

/// `min_i y_i N(x_i)` with labels mapped to `{-1, +1}`.
pub fn margin(params: &MlpParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("margin of an empty dataset"));
    }
    if data.dim() != params.input_dim() {
        return Err(Error::input("dataset dimension does not match network"));
    }
    Ok(data
        .iter()
        .map(|(x, y)| {
            let s = if y { 1.0 } else { -1.0 };
            s * params.output(x)
        })
        .fold(f64::INFINITY, f64::min))
}

/// Fraction of samples with `[N(x) >= 0] == label`.
pub fn accuracy(params: &MlpParams, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .iter()
        .filter(|(x, y)| (params.output(x) >= 0.0) == *y)
        .count();
    hits as f64 / data.len() as f64
}

/// Linear (no activation) map applied before the ReLU network, used for
/// bottleneck models on high-dimensional inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Projection {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.weights.mul_vec(x);
        for (v, b) in z.iter_mut().zip(&self.bias) {
            *v += b;
        }
        z
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// A ReLU network, optionally preceded by a linear bottleneck projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub projection: Option<Projection>,
    pub params: MlpParams,
}

impl Model {
    pub fn plain(params: MlpParams) -> Self {
        Self {
            projection: None,
            params,
        }
    }

    pub fn raw_input_dim(&self) -> usize {
        self.projection
            .as_ref()
            .map_or(self.params.input_dim(), Projection::in_dim)
    }

    /// Maps a raw input into the coordinates the ReLU network sees.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        match &self.projection {
            Some(p) => p.apply(x),
            None => x.to_vec(),
        }
    }

    pub fn output(&self, x: &[f64]) -> f64 {
        match &self.projection {
            Some(p) => self.params.output(&p.apply(x)),
            None => self.params.output(x),
        }
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .iter()
            .filter(|(x, y)| (self.output(x) >= 0.0) == *y)
            .count();
        hits as f64 / data.len() as f64
    }
}

/// Weights and biases i.i.d. `N(0, std^2)`; used for randomized checks.
pub fn random_params(arch: &ArchSpec, seed: u64, std: f64) -> MlpParams {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    let (weights, biases) = (0..=arch.depth())
        .map(|k| {
            let (r, c) = arch.layer_shape(k);
            let w = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
            let b = (0..r).map(|_| normal.sample(&mut rng)).collect();
            (Matrix::from_row_major(r, c, w), b)
        })
        .unzip();
    MlpParams::new(arch.clone(), weights, biases).expect("shapes follow the architecture")
}

/// Training provenance stored alongside a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub steps: u64,
    #[serde(default)]
    pub learning_rate: f64,
    #[serde(default)]
    pub train_accuracy: f64,
    #[serde(default)]
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    #[serde(with = "hexfloat::vec")]
    weights: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    format: String,
    arch: ArchSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_projection: Option<LayerRecord>,
    layers: Vec<LayerRecord>,
    seed: u64,
    #[serde(default)]
    training: TrainingMetadata,
}

pub const MODEL_FORMAT: &str = "netlogic-model/1";

/// A model plus the seed and metadata it was produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub seed: u64,
    pub training: TrainingMetadata,
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        let params = &self.model.params;
        let layers = params
            .weights
            .iter()
            .zip(&params.biases)
            .map(|(w, b)| LayerRecord {
                rows: w.rows(),
                cols: w.cols(),
                weights: w.as_slice().to_vec(),
                biases: b.clone(),
            })
            .collect();
        let rec = ModelRecord {
            format: MODEL_FORMAT.into(),
            arch: params.arch.clone(),
            input_projection: self.model.projection.as_ref().map(|p| LayerRecord {
                rows: p.weights.rows(),
                cols: p.weights.cols(),
                weights: p.weights.as_slice().to_vec(),
                biases: p.bias.clone(),
            }),
            layers,
            seed: self.seed,
            training: self.training.clone(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ModelRecord = serde_json::from_str(text)?;
        if rec.format != MODEL_FORMAT {
            return Err(Error::format(format!(
                "unsupported model format {:?}",
                rec.format
            )));
        }
        let to_matrix = |l: &LayerRecord| -> Result<Matrix> {
            if l.weights.len() != l.rows * l.cols || l.biases.len() != l.rows {
                return Err(Error::format("layer record has inconsistent lengths"));
            }
            Ok(Matrix::from_row_major(l.rows, l.cols, l.weights.clone()))
        };
        let mut weights = Vec::with_capacity(rec.layers.len());
        let mut biases = Vec::with_capacity(rec.layers.len());
        for l in &rec.layers {
            weights.push(to_matrix(l)?);
            biases.push(l.biases.clone());
        }
        let params = MlpParams::new(rec.arch, weights, biases)?;
        let projection = match &rec.input_projection {
            Some(p) => {
                let proj = Projection {
                    weights: to_matrix(p)?,
                    bias: p.biases.clone(),
                };
                if proj.out_dim() != params.input_dim() {
                    return Err(Error::format(
                        "projection output does not match network input",
                    ));
                }
                Some(proj)
            }
            None => None,
        };
        Ok(Self {
            model: Model { projection, params },
            seed: rec.seed,
            training: rec.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::error::read_to_string(path)?)
    }
}
