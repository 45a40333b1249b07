//! Enhance one image with a checkpoint, or with a freshly initialised model.
//!
//! ```text
//! cargo run --release --example enhance -- [input.png] [model.ckpt]
//! ```
//!
//! Without arguments a synthetic low-light image is used. Writes the final
//! output, the first-stage image and a visualisation of the gamma map to
//! `target/example-enhance/`.

use gated::checkpoint::Checkpoint;
use gated::cli::gamma_visualization;
use gated::image::{crop, crop_planar, load_image, reflect_pad, save_image, save_planar};
use gated::synthetic::synthetic_pair;
use gated::unet::SIZE_MULTIPLE;
use gated::{Model, ModelConfig};

fn main() -> gated::Result<()> {
    let mut args = std::env::args().skip(1);
    let input = match args.next() {
        Some(p) => load_image(p)?,
        None => synthetic_pair(7, 96, 120).low,
    };
    let model = match args.next() {
        Some(p) => Checkpoint::load(p)?.model,
        None => Model::new(&ModelConfig { base_width: 16, ..Default::default() }, 0)?,
    };
    let (h, w) = (input.height(), input.width());
    let out = model.enhance(&reflect_pad(&input, SIZE_MULTIPLE)?)?;

    let dir = std::path::Path::new("target/example-enhance");
    save_image(&input, dir.join("input.png"))?;
    save_image(&crop(&out.stage1, h, w)?, dir.join("stage1.png"))?;
    save_image(&crop(&out.output, h, w)?, dir.join("enhanced.png"))?;
    let gamma = crop_planar(&out.gamma, h, w)?;
    save_planar(&gamma_visualization(&gamma), dir.join("gamma.png"))?;
    println!(
        "{h}x{w}: gamma in [{:.3}, {:.3}], outputs in {}",
        gamma.min(),
        gamma.max(),
        dir.display()
    );
    Ok(())
}
