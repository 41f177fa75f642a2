use netlogic::datasets::Dataset;
use netlogic::linalg::Matrix;
use netlogic::nn::{random_params, ArchSpec, MlpParams, Model, Projection};
use netlogic::trainer::{loss, loss_and_gradient};

const H: f64 = 1e-5;

/// Flattens every trainable value of `model` in a fixed order.
pub fn flatten(model: &Model) -> Vec<f64> {
    let mut v = Vec::new();
    if let Some(p) = &model.projection {
        v.extend_from_slice(p.weights.as_slice());
        v.extend_from_slice(&p.bias);
    }
    for (w, b) in model.params.weights().iter().zip(model.params.biases()) {
        v.extend_from_slice(w.as_slice());
        v.extend_from_slice(b);
    }
    v
}

pub fn unflatten(like: &Model, v: &[f64]) -> Model {
    let mut at = 0;
    let mut take = |n: usize| {
        let s = v[at..at + n].to_vec();
        at += n;
        s
    };
    let projection = like.projection.as_ref().map(|p| Projection {
        weights: Matrix::from_row_major(p.weights.rows(), p.weights.cols(), take(p.weights.as_slice().len())),
        bias: take(p.bias.len()),
    });
    let (weights, biases) = like
        .params
        .weights()
        .iter()
        .zip(like.params.biases())
        .map(|(w, b)| (Matrix::from_row_major(w.rows(), w.cols(), take(w.as_slice().len())), take(b.len())))
        .unzip();
    Model {
        projection,
        params: MlpParams::new(like.params.arch().clone(), weights, biases).unwrap(),
    }
}

pub fn flat_gradient(model: &Model, data: &Dataset) -> Vec<f64> {
    let (_, g) = loss_and_gradient(model, data).unwrap();
    let mut v = Vec::new();
    if let Some((w, b)) = &g.projection {
        v.extend_from_slice(w.as_slice());
        v.extend_from_slice(b);
    }
    for (w, b) in g.weights.iter().zip(&g.biases) {
        v.extend_from_slice(w.as_slice());
        v.extend_from_slice(b);
    }
    v
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    /// Largest relative error over the checked coordinates.
    pub worst: f64,
}

/// Central differences against backprop; coordinates whose step crosses a
/// ReLU kink are skipped and counted.
pub fn check_gradient(model: &Model, data: &Dataset) -> GradCheck {
    let analytic = flat_gradient(model, data);
    let base = flatten(model);
    assert_eq!(analytic.len(), base.len());
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for i in 0..base.len() {
        let mut up = base.clone();
        let mut down = base.clone();
        up[i] += H;
        down[i] -= H;
        let (mu, md) = (unflatten(model, &up), unflatten(model, &down));
        let (lu, ld) = (loss(&mu, data), loss(&md, data));
        let numeric = (lu - ld) / (2.0 * H);
        // Second-difference test for a kink inside [-h, h].
        let l0 = loss(model, data);
        if ((lu - l0) - (l0 - ld)).abs() > 1e-3 * H {
            skipped += 1;
            continue;
        }
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
        checked += 1;
    }
    GradCheck { checked, skipped, worst }
}

pub fn random_data(dim: usize, n: usize, seed: u64) -> Dataset {
    let p = random_params(&ArchSpec::new(dim, vec![1]).unwrap(), seed, 1.0);
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..dim).map(|j| ((i * 7 + j * 13) as f64 * 0.618 + seed as f64).sin() * 2.0).collect())
        .collect();
    let labels = pts.iter().map(|x| p.output(x) >= 0.0).collect();
    Dataset::new("random", dim, pts, labels).unwrap()
}
