//! Synthetic data: procedurally generated clean images and additive white
//! Gaussian noise.

use ddt_core::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HarnessError, Result};

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer),
/// so every sample gets an independent, scheduling-free seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair<T: Scalar> {
    /// [3, H, W] in [0, 1].
    pub clean: Tensor<T>,
    /// `clean + n`, not clamped.
    pub noisy: Tensor<T>,
    /// Noise level on the 0–255 scale.
    pub sigma: f64,
}

/// Adds i.i.d. N(0, (σ/255)²) noise, deterministically for a given seed.
pub fn synth_pair<T: Scalar>(clean: &Tensor<T>, sigma: f64, seed: u64) -> Result<SamplePair<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(HarnessError::Config(format!(
            "noise level {sigma} must be finite and >= 0"
        )));
    }
    let std = sigma / 255.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = if sigma == 0.0 {
        clean.clone()
    } else {
        let data = clean
            .data()
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + T::of(std * z)
            })
            .collect();
        Tensor::new(clean.shape(), data)?
    };
    Ok(SamplePair {
        clean: clean.clone(),
        noisy,
        sigma,
    })
}

/// A clean [3, h, w] image in [0, 1]: a smooth colour gradient, a few flat
/// shapes with hard edges and a band-limited sinusoidal texture.
pub fn procedural_image<T: Scalar>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners: [[f64; 3]; 4] =
        std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.1..0.9)));
    let mut img = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        let v = y as f64 / (h.max(2) - 1) as f64;
        for x in 0..w {
            let u = x as f64 / (w.max(2) - 1) as f64;
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                img[(c * h + y) * w + x] = top * (1.0 - v) + bottom * v;
            }
        }
    }

    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let r = rng.random_range(0.08..0.3) * h.min(w) as f64;
        let circle = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if circle {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r && dx.abs() <= 0.7 * r
                };
                if inside {
                    for (c, &value) in colour.iter().enumerate() {
                        img[(c * h + y) * w + x] = value;
                    }
                }
            }
        }
    }

    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let freq = rng.random_range(0.05..0.4);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.02..0.07);
            (freq * angle.cos(), freq * angle.sin(), phase, amp)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum();
            for c in 0..3 {
                let p = &mut img[(c * h + y) * w + x];
                *p = (*p + t).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, h, w], img.into_iter().map(T::of).collect()).expect("shape matches")
}
