//! Predict the first-stage gamma map and summarise it per channel.
//!
//! ```text
//! cargo run --release --example inspect_gamma
//! ```

use gated::agcm::Agcm;
use gated::nn::{Builder, Forward, ParamStore};
use gated::synthetic::synthetic_pair;
use gated_tensor::Eager;
use rand::SeedableRng;

fn main() -> gated::Result<()> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let agcm = Agcm::new(&mut Builder::new(&mut store, &mut rng), 1e-5);
    let x = synthetic_pair(3, 64, 64).low.to_batch();

    let fw = Forward::new(&Eager, &store, true);
    let feats = agcm.feb_forward(&fw, &x)?;
    let gcb = agcm.gcb_forward(&fw, &feats)?;
    let gamma = agcm.predict_gamma(&fw, &gcb.context)?;
    println!("features {:?}, context gate {:?}", feats.shape(), gcb.gate.shape());
    let plane = 64 * 64;
    for (c, name) in ["r", "g", "b"].iter().enumerate() {
        let p = &gamma.data()[c * plane..(c + 1) * plane];
        let mean = p.iter().sum::<f32>() / plane as f32;
        let (lo, hi) = p.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        println!("{name}: min {lo:.4} mean {mean:.4} max {hi:.4}");
    }
    Ok(())
}
