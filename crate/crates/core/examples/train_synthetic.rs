//! Train a narrow model on procedural pairs and watch validation PSNR rise.
//!
//! ```text
//! cargo run --release --example train_synthetic
//! ```

use gated::config::{Config, LrSchedule};
use gated::synthetic::synthetic_pairs;
use gated::trainer::{TrainData, Trainer};
use gated::ModelConfig;

fn main() -> gated::Result<()> {
    let mut config = Config::default();
    config.model = ModelConfig { base_width: 16, ..Default::default() };
    config.trainer.epochs = 8;
    config.trainer.batch_size = 4;
    config.trainer.learning_rate = 1e-3;
    config.trainer.lr_schedule = LrSchedule::Constant;
    config.trainer.checkpoint_dir = "target/example-train".into();
    config.data.height = 64;
    config.data.width = 64;

    let data = TrainData {
        train: synthetic_pairs(0, 16, 64, 64),
        test: synthetic_pairs(1000, 4, 64, 64),
    };
    let mut trainer = Trainer::new(config)?;
    let summary = trainer.fit(&data, |rec| {
        if rec.step % 4 == 0 {
            println!("step {:>3}  loss {:.4}", rec.step, rec.loss["total"]);
        }
    })?;
    for (epoch, psnr) in &summary.validation {
        println!("epoch {epoch}: validation PSNR {psnr:.2} dB");
    }
    println!("checkpoints: {:?}, {:?}", summary.best_checkpoint, summary.last_checkpoint);
    Ok(())
}
