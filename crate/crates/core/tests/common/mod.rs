#![allow(dead_code)]

pub mod grad;

use std::path::PathBuf;

use netlogic::datasets::{gen_synthetic, load_mnist_all, Dataset, SyntheticSpec, Tier};
use netlogic::experiment::train_with_restarts;
use netlogic::nn::{ArchSpec, MlpParams};
use netlogic::states::GridSpec;
use netlogic::trainer::TrainConfig;

pub const ARCH_I: [usize; 3] = [4, 6, 8];
pub const ARCH_II: [usize; 6] = [4, 6, 8, 10, 12, 14];
pub const ARCH_III: [usize; 9] = [4, 6, 8, 10, 12, 14, 18, 22, 23];

pub fn arch(widths: &[usize]) -> ArchSpec {
    ArchSpec::new(2, widths.to_vec()).unwrap()
}

/// Directory holding the four standard MNIST IDX files, if present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("t10k-labels-idx1-ubyte").exists().then_some(dir)
}

pub fn mnist_pools(dir: &std::path::Path) -> (Dataset, Dataset) {
    let train = load_mnist_all(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    let test = load_mnist_all(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).unwrap();
    (train, test)
}

/// A net trained to full accuracy on a synthetic tier, with the restarts the
/// experiment matrix uses.
pub fn trained(tier: Tier, widths: &[usize], seed: u64) -> (Dataset, MlpParams) {
    let data = gen_synthetic(&SyntheticSpec::new(tier, seed)).unwrap();
    let cfg = TrainConfig {
        seed,
        snapshot_every: 0,
        ..TrainConfig::default()
    };
    let (run, _, _) = train_with_restarts(&data, &arch(widths), &cfg, 4, 1.0).unwrap();
    let params = run.final_model().params.clone();
    (data, params)
}

pub fn grid(data: &Dataset, res: usize) -> GridSpec {
    let (lo, hi) = data.bounding_box().unwrap();
    GridSpec::around(&lo, &hi, 0.25, res).unwrap()
}
