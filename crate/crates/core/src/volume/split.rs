use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffles `samples` with a seeded generator and cuts off the first
/// `round(fraction * N)` as the training part.
pub fn split_dataset<T>(mut samples: Vec<T>, fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let n_train = ((fraction.clamp(0.0, 1.0) * samples.len() as f64).round() as usize).min(samples.len());
    let val = samples.split_off(n_train);
    (samples, val)
}
