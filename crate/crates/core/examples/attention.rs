//! Channel and spatial gates of an attention block on a feature map.
//!
//! ```text
//! cargo run --release --example attention
//! ```

use gated::cbam::{effective_reduction, Cbam, DEFAULT_REDUCTION};
use gated::nn::{Builder, Forward, ParamStore};
use gated_tensor::{Eager, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> gated::Result<()> {
    let channels = 32;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let cbam = Cbam::new(&mut Builder::new(&mut store, &mut rng), channels, DEFAULT_REDUCTION)?;
    println!(
        "{channels} channels, hidden width {}",
        channels / effective_reduction(channels, DEFAULT_REDUCTION)
    );

    // one bright channel and a bright square
    let (h, w) = (16, 16);
    let data = (0..channels * h * w)
        .map(|i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            let base = if c == 5 { 2.0 } else { 0.2 };
            let square = if (4..8).contains(&y) && (4..8).contains(&x) { 1.0 } else { 0.0 };
            base + square + rng.random_range(0.0..0.05)
        })
        .collect();
    let x = Tensor::from_vec([1, channels, h, w], data)?;
    let out = cbam.forward_traced(&Forward::new(&Eager, &store, false), &x)?;
    println!("channel gate (first 8): {:.3?}", &out.channel_gate.data()[..8]);
    let s = out.spatial_gate.data();
    println!("spatial gate inside the square {:.3}, in the corner {:.3}", s[5 * w + 5], s[15 * w + 15]);
    println!("output shape {:?}", out.output.shape());
    Ok(())
}
