#![allow(dead_code)]

use std::path::{Path, PathBuf};

use busip::model::{ModelConfig, RunConfig};
use busip::scattering::ScatterOrder;
use busip::synthdata::{gen_synthetic, SyntheticConfig};

/// Writes a synthetic dataset into `dir/data` with a `test` split when
/// `test_per_class > 0`.
pub fn synthetic(
    dir: &Path,
    classes: usize,
    per_class: usize,
    test_per_class: usize,
    size: usize,
    seed: u64,
) -> PathBuf {
    let root = dir.join("data");
    let cfg = SyntheticConfig { classes, per_class, test_per_class, size, seed, speckle: true };
    gen_synthetic(&cfg, &root, false).expect("synthetic data");
    root
}

/// Small model for 32x32 inputs: 4x4 tokens, 3 parts.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch: 8,
        scales: 2,
        orientations: 4,
        order: ScatterOrder::First,
        dim: 16,
        depth: 1,
        parts: 3,
        heads: 2,
        mlp_ratio: 2,
        pki_depth: 1,
        ..ModelConfig::default()
    }
}

pub fn tiny_run(data: &Path, out: &Path, epochs: usize, seed: u64) -> RunConfig {
    let mut run = RunConfig::new(data, out);
    run.model = tiny_model();
    run.seed = seed;
    run.optim.epochs = epochs;
    run.optim.batch_size = 8;
    run.optim.lr = 1e-3;
    run
}
