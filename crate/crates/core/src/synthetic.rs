//! Procedural low/normal-light pairs for demos and smoke tests.
//!
//! The reference is a smooth colour field with a few hard-edged shapes and
//! a fine texture; the low-light input is the reference darkened by a
//! spatially varying power law and a per-channel gain, plus mild noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::image::ImageTensor;

pub fn synthetic_pair(seed: u64, height: usize, width: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let slope: [(f32, f32); 3] = std::array::from_fn(|_| (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
    let freq = rng.random_range(4.0..10.0f32);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let shapes: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.08..0.25),
                std::array::from_fn(|_| rng.random_range(0.05..0.95)),
            )
        })
        .collect();
    let reference = ImageTensor::from_fn(height, width, |c, y, x| {
        let (u, v) = (y as f32 / height as f32, x as f32 / width as f32);
        let mut val = base[c] + slope[c].0 * (u - 0.5) + slope[c].1 * (v - 0.5);
        val += 0.06 * (freq * std::f32::consts::TAU * (u + v) + phase + c as f32).sin();
        for &(cy, cx, r, col) in &shapes {
            if (u - cy).powi(2) + (v - cx).powi(2) < r * r {
                val = col[c];
            }
        }
        val.clamp(0.0, 1.0)
    })
    .expect("values are clamped");

    let gamma_lo = rng.random_range(1.6..2.2f32);
    let gain: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.5));
    let noise: Vec<f32> = (0..3 * height * width).map(|_| rng.random_range(-0.01..0.01)).collect();
    let low = ImageTensor::from_fn(height, width, |c, y, x| {
        let u = y as f32 / height as f32;
        let g = gamma_lo + 0.3 * (u - 0.5);
        let v = reference.get(c, y, x).powf(g) * gain[c] + noise[(c * height + y) * width + x];
        v.clamp(0.0, 1.0)
    })
    .expect("values are clamped");

    Sample {
        id: format!("synthetic/{seed:04}"),
        source: "synthetic".into(),
        low,
        reference: Some(reference),
    }
}

pub fn synthetic_pairs(first_seed: u64, count: usize, height: usize, width: usize) -> Vec<Sample> {
    (0..count as u64).map(|i| synthetic_pair(first_seed + i, height, width)).collect()
}
