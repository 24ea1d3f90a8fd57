use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffles with `seed` and cuts into train/val/test by `fractions`.
/// Sizes are rounded for train and val; test takes the remainder.
pub fn split_dataset<T>(records: Vec<T>, fractions: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n = records.len();
    if n < 3 {
        return Err(Error::Dataset(format!("cannot split {n} records three ways")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);

    let mut slots: Vec<Option<T>> = records.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| slots[i].take().expect("index used once")).collect() };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}
