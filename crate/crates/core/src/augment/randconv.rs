use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Tape, Tensor};

pub(crate) fn validate_pool(pool: &[usize]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::config("augment.filter_pool", "must not be empty"));
    }
    if let Some(k) = pool.iter().find(|&&k| k == 0 || k % 2 == 0) {
        return Err(Error::config("augment.filter_pool", format!("filter size {k} is not an odd positive count")));
    }
    Ok(())
}

/// Draws a filter size from `pool` and a `[C, C, k, k]` kernel from the
/// Xavier normal distribution, `std = sqrt(2 / (fan_in + fan_out))` with
/// `fan_in = fan_out = C·k²`.
pub fn sample_random_kernel(channels: usize, pool: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    validate_pool(pool)?;
    let k = pool[rng.random_range(0..pool.len())];
    let fan = (channels * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / (fan + fan)).sqrt()).expect("positive std");
    let n = channels * channels * k * k;
    Tensor::new(vec![channels, channels, k, k], (0..n).map(|_| normal.sample(rng)).collect())
}

/// Convolves every image with `kernel` at stride 1 and `(k-1)/2` padding, no bias.
pub fn apply_random_kernel(images: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let k = kernel.shape()[2];
    if k % 2 == 0 {
        return Err(Error::invalid(format!("shape-preserving convolution needs an odd kernel, got {k}")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let w = tape.constant(kernel);
    let y = tape.conv2d(x, w, 1, (k - 1) / 2)?;
    Ok(tape.tensor(y))
}

/// Random convolution of a batch: one filter size and one kernel, shared by
/// all `N` images. The output has the input's shape.
pub fn random_convolution(images: &Tensor, filter_pool: &[usize], rng_seed: u64) -> Result<Tensor> {
    if images.ndim() != 4 {
        return Err(Error::shape(format!("expected [N,C,H,W] images, got {:?}", images.shape())));
    }
    let mut rng = seed::rng(seed::derive(rng_seed, seed::RANDCONV, 0));
    let kernel = sample_random_kernel(images.shape()[1], filter_pool, &mut rng)?;
    apply_random_kernel(images, &kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize) -> Tensor {
        Tensor::new(vec![n, 3, 9, 9], (0..n * 243).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn even_sizes_rejected() {
        assert!(random_convolution(&images(1), &[3, 4], 0).is_err());
        assert!(random_convolution(&images(1), &[], 0).is_err());
    }

    #[test]
    fn kernel_std_follows_xavier() {
        let mut rng = seed::rng(5);
        let k = sample_random_kernel(3, &[7], &mut rng).unwrap();
        let var = k.data().iter().map(|v| v * v).sum::<f64>() / k.numel() as f64;
        let expect = 2.0 / (2.0 * 3.0 * 49.0);
        assert!((var / expect - 1.0).abs() < 0.15, "{var} vs {expect}");
    }

    #[test]
    fn distinct_seeds_distinct_outputs() {
        let x = images(2);
        assert_ne!(random_convolution(&x, &[3], 1).unwrap(), random_convolution(&x, &[3], 2).unwrap());
        assert_eq!(random_convolution(&x, &[3], 1).unwrap(), random_convolution(&x, &[3], 1).unwrap());
    }
}
