#![allow(dead_code)]

use std::path::PathBuf;

use nullsample_nn::Parameters;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Local copy of the raw dataset files, if one is available.
pub fn mirror_dir() -> Option<PathBuf> {
    if let Ok(dir) = std::env::var("NULLSAMPLE_MIRROR") {
        return Some(PathBuf::from(dir));
    }
    let default = PathBuf::from("/root/data-mirror");
    default.is_dir().then_some(default)
}

/// Download cache shared by all test runs.
pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("dataset-cache")
}

/// Adds Gaussian noise to every parameter so that a freshly built model is
/// far from the identity.
pub fn perturb(model: &mut dyn Parameters, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, scale).unwrap();
    model.visit_mut("", &mut |_, p| p.value.mapv_inplace(|v| v + noise.sample(&mut rng)));
}
