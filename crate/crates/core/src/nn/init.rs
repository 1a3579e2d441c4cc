//! Seeded weight initializers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Standard normal via Box-Muller, driven by the given RNG.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.is_finite() {
            return z;
        }
    }
}

/// `N(0, std)` init, the pix2pix convention for GAN weights.
pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| randn(rng) * std).collect())
}

/// He (Kaiming) normal init with the given fan-in.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(rng, shape, std)
}

/// Uniform init over [-bound, bound].
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Random unit vectors as rows of a (k, c) matrix.
pub fn unit_rows(rng: &mut ChaCha8Rng, k: usize, c: usize) -> Tensor {
    let mut data = vec![0.0; k * c];
    for r in 0..k {
        let row = &mut data[r * c..(r + 1) * c];
        loop {
            for v in row.iter_mut() {
                *v = randn(rng);
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
    }
    Tensor::from_vec(&[k, c], data)
}
