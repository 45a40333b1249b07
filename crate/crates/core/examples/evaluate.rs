//! Score the pass-through baseline on a dataset.
//!
//! ```text
//! cargo run --release --example evaluate -- <dataset-root> [layout]
//! ```
//!
//! Without arguments a small paired set is generated in a temporary directory.

use gated::data::{scan_dataset, Layout};
use gated::image::save_image;
use gated::metrics::{evaluate, EvalOptions, Identity};
use gated::synthetic::synthetic_pair;

fn main() -> gated::Result<()> {
    let mut args = std::env::args().skip(1);
    let temp = tempfile::tempdir().map_err(|e| gated::Error::Layout(e.to_string()))?;
    let root = match args.next() {
        Some(p) => p.into(),
        None => {
            for i in 0..5 {
                let pair = synthetic_pair(i, 60, 80);
                save_image(&pair.low, temp.path().join(format!("test/low/{i}.png")))?;
                save_image(pair.reference.as_ref().unwrap(), temp.path().join(format!("test/high/{i}.png")))?;
            }
            temp.path().to_path_buf()
        }
    };
    let layout: Layout = args.next().as_deref().unwrap_or("auto").parse()?;
    let ds = scan_dataset(&root, layout)?;
    println!("{}: {} test entries", ds.layout, ds.test.len());
    let report = evaluate(&Identity, &ds.test, &EvalOptions::default())?;
    println!("{}", report.table());
    for s in &report.per_image {
        println!("{:>12}  psnr {:.2}", s.id, s.scores["psnr"]);
    }
    Ok(())
}
