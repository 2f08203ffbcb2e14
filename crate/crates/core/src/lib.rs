pub mod autograd;
pub mod backbone;
pub mod error;
pub mod extractors;
pub mod fragments;
pub mod io;
pub mod metrics;
pub mod model;
pub mod modulation;
pub mod nn;
pub mod plot;
pub mod qrs;
pub mod subjective;
pub mod tensor;
pub mod trainer;
pub mod video;
pub mod worksim;

pub use error::{Error, Result};
pub use tensor::Matrix;
pub use video::VideoTensor;

/// Deterministic generator used throughout the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Mixes `parts` into `base` with splitmix64 steps, giving independent
/// child seeds for nested loops.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// SHA-256 (hex) of the JSON form of `value`; struct fields serialize in
/// declaration order, so equal configurations hash equally.
pub fn config_hash<T: serde::Serialize + ?Sized>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/fragments.md")]
    mod fragments {}
    #[doc = include_str!("../../../book/src/region-selection.md")]
    mod region_selection {}
    #[doc = include_str!("../../../book/src/modulation.md")]
    mod modulation {}
    #[doc = include_str!("../../../book/src/workflow-simulator.md")]
    mod workflow_simulator {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/subjective-scores.md")]
    mod subjective_scores {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
}
