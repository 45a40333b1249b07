//! Save a model, load it back and confirm the weights are identical.
//!
//! ```text
//! cargo run --release --example checkpoint
//! ```

use gated::checkpoint::Checkpoint;
use gated::model::DEFAULT_PARAM_COUNT;
use gated::{Model, ModelConfig};

fn main() -> gated::Result<()> {
    let model = Model::new(&ModelConfig::default(), 42)?;
    println!("{} trainable values (expected {DEFAULT_PARAM_COUNT})", model.params.num_trainable());

    let path = std::env::temp_dir().join("gated-example.ckpt");
    let mut ckpt = Checkpoint::new(model.clone());
    ckpt.epoch = 12;
    ckpt.save(&path)?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);

    let back = Checkpoint::load(&path)?;
    let same = model
        .params
        .iter()
        .zip(back.model.params.iter())
        .all(|((_, a), (_, b))| a.tensor.data() == b.tensor.data());
    println!("{} bytes, epoch {}, identical weights: {same}", size, back.epoch);

    let mut bytes = std::fs::read(&path).map_err(|e| gated::Error::Layout(e.to_string()))?;
    bytes[1000] ^= 0xff;
    match Checkpoint::from_bytes(&bytes) {
        Err(e) => println!("corrupted copy rejected: {e}"),
        Ok(_) => println!("corrupted copy was accepted"),
    }
    let _ = std::fs::remove_file(&path);
    Ok(())
}
