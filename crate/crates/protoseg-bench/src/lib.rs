//! Shared fixtures for the workspace benchmarks: a deterministic encoder,
//! synthetic episode, and feature tensors sized like the desk-scale runs.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use protoseg::{
    generate_synthetic, make_episodes, Episode, Image, SynthConfig, ToyArchConfig, ToyEncoder,
};

/// The default benchmark encoder (three blocks, stride 4, 64-dim features).
pub fn bench_encoder() -> ToyEncoder<f32> {
    ToyEncoder::init(&ToyArchConfig::default(), 7).expect("valid default arch")
}

/// One 64x64 image from the synthetic benchmark's target domain.
pub fn bench_image() -> Image {
    let cfg = SynthConfig { count_a: 2, count_b: 2, ..Default::default() };
    let (_, b) = generate_synthetic(&cfg).expect("valid synth config");
    b.samples[0].image.clone()
}

/// A deterministic 1-shot episode with a handful of queries at 64x64.
pub fn bench_episode() -> Episode {
    let cfg = SynthConfig { count_a: 2, count_b: 5, ..Default::default() };
    let (_, b) = generate_synthetic(&cfg).expect("valid synth config");
    let ids = vec![b.ids()[0].clone()];
    make_episodes(&b, &ids).expect("one support, four queries")
}

/// Random feature rows shaped like one encoded 64x64 image (256 cells x 64).
pub fn bench_features(rows: usize, dim: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..1.0))
}
