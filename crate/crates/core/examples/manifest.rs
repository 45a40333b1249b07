//! Scan a dataset root and print its manifest as JSON lines.
//!
//! ```text
//! cargo run --release --example manifest -- <dataset-root> [layout]
//! ```

use gated::data::{scan_dataset, Layout};

fn main() -> gated::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(root) = args.next() else {
        eprintln!("usage: manifest <dataset-root> [layout]");
        eprintln!("layouts: {}", Layout::ALL.map(|l| l.name()).join(", "));
        std::process::exit(2);
    };
    let layout: Layout = args.next().as_deref().unwrap_or("auto").parse()?;
    let ds = scan_dataset(&root, layout)?;
    eprintln!("{}: {} train, {} test", ds.layout, ds.train.len(), ds.test.len());
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    ds.write_jsonl(std::io::stdout().lock()).map_err(|e| gated::Error::Layout(e.to_string()))?;
    Ok(())
}
