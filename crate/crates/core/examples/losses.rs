//! Every loss term on a low-light input and its reference.
//!
//! ```text
//! cargo run --release --example losses
//! ```

use gated::agcm::apply_gamma;
use gated::losses::{
    color_constancy_loss, gamma_reg_loss, l1_loss, ssim_loss, stage_loss, total_loss, tv_loss, LossBreakdown,
    LossWeights, SsimMode, Stage,
};
use gated::synthetic::synthetic_pair;
use gated_tensor::{Eager, Tensor};

fn main() -> gated::Result<()> {
    let pair = synthetic_pair(1, 64, 64);
    let low = pair.low.to_batch();
    let reference = pair.reference.unwrap().to_batch();
    let w = LossWeights::default();
    let s = |t: Tensor<f32>| t.to_scalar().unwrap();

    println!("l1     {:.5}", s(l1_loss(&Eager, &low, &reference)?));
    println!("ssim   {:.5} (windowed)", s(ssim_loss(&Eager, &low, &reference, SsimMode::Windowed)?));
    println!("ssim   {:.5} (global)", s(ssim_loss(&Eager, &low, &reference, SsimMode::Global)?));
    println!("tv     {:.5}", s(tv_loss(&Eager, &low, w.lambda_tv)?));
    println!("color  {:.5}", s(color_constancy_loss(&Eager, &low, w.lambda_c)?));

    // a flat gamma of 0.5 as a stand-in for the first stage
    let gamma = Tensor::full(low.shape().to_vec(), 0.5);
    let brightened = apply_gamma(&Eager, &low, &gamma)?;
    println!("gamma  {:.5}", s(gamma_reg_loss(&Eager, &gamma, w.lambda_gamma, w.gamma_target)?));
    let one = stage_loss(&Eager, Stage::One, &brightened, &reference, Some(&gamma), &w)?;
    println!("stage one total {:.5}", s(one.total));

    let terms = total_loss(&Eager, &brightened, &brightened, &reference, &gamma, &w)?;
    let breakdown = LossBreakdown::from_terms(&Eager, &terms)?;
    for (k, v) in breakdown.to_record() {
        println!("{k:>18} {v:.5}");
    }
    Ok(())
}
