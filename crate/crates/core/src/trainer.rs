//! Unregularized logistic-loss training with Adam, deterministic under a seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datasets::{truncated_normal, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_at_acc, matmul_bt, Matrix};
use crate::nn::{ArchSpec, MlpParams, Model, ModelFile, Projection, TrainingMetadata};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub init_std: f64,
    /// Steps between recorded snapshots; 0 records only the first and last.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 20_000,
            batch_size: None,
            seed: 0,
            init_std: 0.05,
            snapshot_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::input("learning_rate must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::input("Adam betas must lie in (0, 1)"));
        }
        if self.steps == 0 {
            return Err(Error::input("steps must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::input("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub model: Model,
    pub train_accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    /// Ordered by step; the first is the initialization, the last the final model.
    pub snapshots: Vec<Snapshot>,
}

impl TrainRun {
    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshots.last().expect("a run always has snapshots")
    }

    pub fn final_model(&self) -> &Model {
        &self.final_snapshot().model
    }

    /// Writes `snapshots/step_XXXXXX.json` for every snapshot, `model.json`
    /// for the final one, and `run.json` listing steps and metrics.
    pub fn save(&self, dir: &Path, seed: u64, dataset: &str, cfg: &TrainConfig) -> Result<()> {
        #[derive(Serialize)]
        struct Entry<'a> {
            step: usize,
            train_accuracy: f64,
            loss: f64,
            file: &'a str,
        }
        let mut names = Vec::with_capacity(self.snapshots.len());
        for s in &self.snapshots {
            let name = format!("snapshots/step_{:06}.json", s.step);
            self.model_file(s, seed, dataset, cfg).save(&dir.join(&name))?;
            names.push(name);
        }
        self.model_file(self.final_snapshot(), seed, dataset, cfg)
            .save(&dir.join("model.json"))?;
        let entries: Vec<Entry> = self
            .snapshots
            .iter()
            .zip(&names)
            .map(|(s, n)| Entry {
                step: s.step,
                train_accuracy: s.train_accuracy,
                loss: s.loss,
                file: n,
            })
            .collect();
        crate::error::write_file(
            &dir.join("run.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "dataset": dataset,
                "seed": seed,
                "steps": cfg.steps,
                "learning_rate": cfg.learning_rate,
                "snapshots": entries,
            }))?,
        )
    }

    fn model_file(&self, s: &Snapshot, seed: u64, dataset: &str, cfg: &TrainConfig) -> ModelFile {
        ModelFile {
            model: s.model.clone(),
            seed,
            training: TrainingMetadata {
                dataset: dataset.to_string(),
                steps: s.step as u64,
                learning_rate: cfg.learning_rate,
                train_accuracy: s.train_accuracy,
                final_loss: s.loss,
            },
        }
    }

    /// Reads the snapshots listed in a directory written by [`TrainRun::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: serde_json::Value =
            serde_json::from_str(&crate::error::read_to_string(&dir.join("run.json"))?)?;
        let list = manifest["snapshots"]
            .as_array()
            .ok_or_else(|| Error::format("run.json lacks a snapshots list"))?;
        let mut snapshots = Vec::with_capacity(list.len());
        for e in list {
            let file = e["file"]
                .as_str()
                .ok_or_else(|| Error::format("snapshot entry lacks a file"))?;
            let mf = ModelFile::load(&dir.join(file))?;
            snapshots.push(Snapshot {
                step: e["step"].as_u64().unwrap_or(mf.training.steps) as usize,
                train_accuracy: e["train_accuracy"].as_f64().unwrap_or(f64::NAN),
                loss: e["loss"].as_f64().unwrap_or(f64::NAN),
                model: mf.model,
            });
        }
        if snapshots.is_empty() {
            return Err(Error::format("run has no snapshots"));
        }
        Ok(Self { snapshots })
    }
}

/// Weights i.i.d. truncated normal (resampled beyond two standard
/// deviations), biases zero.
pub fn init_params(arch: &ArchSpec, seed: u64, init_std: f64) -> Result<MlpParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(arch.depth() + 1);
    let mut biases = Vec::with_capacity(arch.depth() + 1);
    for k in 0..=arch.depth() {
        let (r, c) = arch.layer_shape(k);
        let data = (0..r * c)
            .map(|_| truncated_normal(&mut rng, init_std))
            .collect();
        weights.push(Matrix::from_row_major(r, c, data));
        biases.push(vec![0.0; r]);
    }
    MlpParams::new(arch.clone(), weights, biases)
}

/// Gradient of the mean loss, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub projection: Option<(Matrix, Vec<f64>)>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Numerically stable sigmoid cross-entropy of logit `z` against label `y`.
#[inline]
pub fn logistic_loss(z: f64, y: bool) -> f64 {
    let t = if y { 1.0 } else { 0.0 };
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss over `data`.
pub fn loss(model: &Model, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter()
        .map(|(x, y)| logistic_loss(model.output(x), y))
        .sum::<f64>()
        / data.len() as f64
}

struct Layer {
    w: Matrix,
    b: Vec<f64>,
    relu: bool,
    frozen: bool,
}

struct Stack {
    layers: Vec<Layer>,
    has_projection: bool,
}

impl Stack {
    fn from_model(model: &Model, freeze_projection: bool) -> Self {
        let mut layers = Vec::new();
        if let Some(p) = &model.projection {
            layers.push(Layer {
                w: p.weights.clone(),
                b: p.bias.clone(),
                relu: false,
                frozen: freeze_projection,
            });
        }
        let d = model.params.depth();
        for (k, (w, b)) in model
            .params
            .weights()
            .iter()
            .zip(model.params.biases())
            .enumerate()
        {
            layers.push(Layer {
                w: w.clone(),
                b: b.clone(),
                relu: k < d,
                frozen: false,
            });
        }
        Self {
            layers,
            has_projection: model.projection.is_some(),
        }
    }

    fn to_model(&self, arch: &ArchSpec) -> Result<Model> {
        let (projection, body) = if self.has_projection {
            let p = &self.layers[0];
            (
                Some(Projection {
                    weights: p.w.clone(),
                    bias: p.b.clone(),
                }),
                &self.layers[1..],
            )
        } else {
            (None, &self.layers[..])
        };
        let params = MlpParams::new(
            arch.clone(),
            body.iter().map(|l| l.w.clone()).collect(),
            body.iter().map(|l| l.b.clone()).collect(),
        )
        .map_err(|e| Error::Training(format!("parameters became invalid: {e}")))?;
        Ok(Model { projection, params })
    }

    /// Mean loss over the rows `idx` of `data` and its gradient per layer.
    fn loss_grad(&self, data: &Dataset, idx: &[usize]) -> (f64, Vec<(Vec<f64>, Vec<f64>)>) {
        let n = idx.len();
        let dim = data.dim();
        let mut input = Vec::with_capacity(n * dim);
        for &i in idx {
            input.extend_from_slice(data.point(i));
        }
        // acts[k] is the input to layer k; pre[k] its preactivation.
        let mut acts: Vec<Vec<f64>> = vec![input];
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (out, inp) = (l.w.rows(), l.w.cols());
            let h = acts.last().unwrap();
            let mut z = vec![0.0; n * out];
            matmul_bt(h, n, inp, l.w.as_slice(), out, &mut z);
            for row in z.chunks_exact_mut(out) {
                for (v, b) in row.iter_mut().zip(&l.b) {
                    *v += b;
                }
            }
            let a = if l.relu {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pres.push(z);
            acts.push(a);
        }
        let out = pres.last().unwrap();
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        let mut delta: Vec<f64> = idx
            .iter()
            .zip(out)
            .map(|(&i, &z)| {
                let y = data.label(i);
                total += logistic_loss(z, y);
                (sigmoid(z) - if y { 1.0 } else { 0.0 }) * inv_n
            })
            .collect();
        let mut grads = vec![(Vec::new(), Vec::new()); self.layers.len()];
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let (out, inp) = (l.w.rows(), l.w.cols());
            if l.relu {
                for (d, z) in delta.iter_mut().zip(&pres[k]) {
                    if *z < 0.0 {
                        *d = 0.0;
                    }
                }
            }
            if !l.frozen {
                let mut gw = vec![0.0; out * inp];
                matmul_at_acc(&delta, n, out, &acts[k], inp, &mut gw);
                let mut gb = vec![0.0; out];
                for row in delta.chunks_exact(out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
                grads[k] = (gw, gb);
            }
            let needs_input_grad = (0..k).any(|j| !self.layers[j].frozen);
            if k > 0 && needs_input_grad {
                let mut prev = vec![0.0; n * inp];
                matmul(&delta, n, out, l.w.as_slice(), inp, &mut prev);
                delta = prev;
            } else {
                break;
            }
        }
        (total * inv_n, grads)
    }
}

/// Mean loss and its gradient for every parameter of `model`.
pub fn loss_and_gradient(model: &Model, data: &Dataset) -> Result<(f64, ModelGradient)> {
    check_data(model, data)?;
    let stack = Stack::from_model(model, false);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (loss, grads) = stack.loss_grad(data, &idx);
    let mut it = grads.into_iter().zip(&stack.layers);
    let projection = if stack.has_projection {
        let ((gw, gb), l) = it.next().unwrap();
        Some((Matrix::from_row_major(l.w.rows(), l.w.cols(), gw), gb))
    } else {
        None
    };
    let (weights, biases) = it
        .map(|((gw, gb), l)| (Matrix::from_row_major(l.w.rows(), l.w.cols(), gw), gb))
        .unzip();
    Ok((
        loss,
        ModelGradient {
            projection,
            weights,
            biases,
        },
    ))
}

fn check_data(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    if data.dim() != model.raw_input_dim() {
        return Err(Error::input(format!(
            "data dimension {} does not match model input {}",
            data.dim(),
            model.raw_input_dim()
        )));
    }
    Ok(())
}

/// Trains a freshly initialized ReLU network on `data`.
pub fn train(data: &Dataset, arch: &ArchSpec, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let init = Model::plain(init_params(arch, cfg.seed, cfg.init_std)?);
    train_model(data, init, false, cfg)
}

/// Trains a network behind a freshly initialized linear bottleneck of width
/// `arch.input_dim`.
pub fn train_bottleneck(data: &Dataset, arch: &ArchSpec, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let (r, c) = (arch.input_dim, data.dim());
    let proj = Projection {
        weights: Matrix::from_row_major(
            r,
            c,
            (0..r * c)
                .map(|_| truncated_normal(&mut rng, cfg.init_std))
                .collect(),
        ),
        bias: vec![0.0; r],
    };
    let init = Model {
        projection: Some(proj),
        params: init_params(arch, cfg.seed, cfg.init_std)?,
    };
    train_model(data, init, false, cfg)
}

/// Trains a fresh network behind a fixed, frozen projection.
pub fn train_frozen_projection(
    data: &Dataset,
    projection: &Projection,
    arch: &ArchSpec,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    if projection.out_dim() != arch.input_dim {
        return Err(Error::input("projection width does not match the network input"));
    }
    let init = Model {
        projection: Some(projection.clone()),
        params: init_params(arch, cfg.seed, cfg.init_std)?,
    };
    train_model(data, init, true, cfg)
}

/// Adam on the logistic loss starting from `init`.
pub fn train_model(data: &Dataset, init: Model, freeze_projection: bool, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    check_data(&init, data)?;
    let arch = init.params.arch().clone();
    let mut stack = Stack::from_model(&init, freeze_projection);
    let mut m1: Vec<(Vec<f64>, Vec<f64>)> = stack
        .layers
        .iter()
        .map(|l| (vec![0.0; l.w.as_slice().len()], vec![0.0; l.b.len()]))
        .collect();
    let mut m2 = m1.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.unwrap_or(data.len()).min(data.len());
    let mut cursor = data.len();

    let record = |stack: &Stack, step: usize| -> Result<Snapshot> {
        let model = stack.to_model(&arch)?;
        let l = loss(&model, data);
        if !l.is_finite() {
            return Err(Error::Training(format!("loss became non-finite at step {step}")));
        }
        Ok(Snapshot {
            step,
            train_accuracy: model.accuracy(data),
            loss: l,
            model,
        })
    };

    let mut snapshots = vec![record(&stack, 0)?];
    for step in 1..=cfg.steps {
        let idx: &[usize] = if batch == data.len() {
            &order
        } else {
            if cursor + batch > data.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch;
            &order[cursor - batch..cursor]
        };
        let (l, grads) = stack.loss_grad(data, idx);
        if !l.is_finite() {
            return Err(Error::Training(format!(
                "loss became non-finite at step {step}"
            )));
        }
        let t = step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (k, layer) in stack.layers.iter_mut().enumerate() {
            if layer.frozen {
                continue;
            }
            let (gw, gb) = &grads[k];
            let (mw, mb) = &mut m1[k];
            let (vw, vb) = &mut m2[k];
            adam(layer.w.as_mut_slice(), gw, mw, vw, cfg, c1, c2);
            adam(&mut layer.b, gb, mb, vb, cfg, c1, c2);
        }
        let due = cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0;
        if due || step == cfg.steps {
            snapshots.push(record(&stack, step)?);
        }
    }
    Ok(TrainRun { snapshots })
}

fn adam(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], cfg: &TrainConfig, c1: f64, c2: f64) {
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn biases_start_at_zero_and_init_is_deterministic() {
        let arch = ArchSpec::new(2, vec![4, 6, 8]).unwrap();
        let a = init_params(&arch, 11, 0.05).unwrap();
        assert!(a.biases().iter().flatten().all(|&b| b == 0.0));
        assert_eq!(a, init_params(&arch, 11, 0.05).unwrap());
    }

    #[test]
    fn init_statistics() {
        let arch = ArchSpec::new(1000, vec![100]).unwrap();
        let p = init_params(&arch, 3, 0.05).unwrap();
        let w = p.weights()[0].as_slice();
        assert_eq!(w.len(), 100_000);
        assert!(w.iter().all(|v| v.abs() <= 0.1));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        // Truncating at two sigma shrinks the standard deviation by ~12%;
        // the raw draw std is 0.05.
        let expected = 0.05 * 0.879_626;
        assert!((std - expected).abs() / expected < 0.05, "std {std}");
    }

    #[test]
    fn stable_loss_matches_naive_form() {
        for &z in &[-3.0, -0.1, 0.0, 0.4, 5.0] {
            for y in [false, true] {
                let p = 1.0 / (1.0 + f64::exp(-z));
                let naive = if y { -p.ln() } else { -(1.0 - p).ln() };
                assert!((logistic_loss(z, y) - naive).abs() < 1e-12);
            }
        }
        assert!(logistic_loss(-800.0, true).is_finite());
    }

    #[test]
    fn separable_pair_is_learned() {
        let data = Dataset::new("pair", 2, vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![true, false]).unwrap();
        let arch = ArchSpec::new(2, vec![1]).unwrap();
        let cfg = TrainConfig {
            steps: 2000,
            ..TrainConfig::default()
        };
        let run = train(&data, &arch, &cfg).unwrap();
        assert_eq!(run.final_snapshot().train_accuracy, 1.0);
        assert_eq!(run.snapshots.first().unwrap().step, 0);
        assert_eq!(run.final_snapshot().step, 2000);
        assert_eq!(run.snapshots.len(), 21);
    }
}
