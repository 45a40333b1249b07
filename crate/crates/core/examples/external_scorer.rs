//! Plug an external no-reference scorer into evaluation.
//!
//! ```text
//! cargo run --release --example external_scorer
//! ```
//!
//! The scorer here is a shell one-liner printing the PNG size in kilobytes;
//! a real one would wrap NIQE or BRISQUE the same way.

use gated::data::Split;
use gated::data::{DatasetManifest, ManifestEntry};
use gated::image::save_image;
use gated::metrics::{evaluate, EvalOptions, ExternalScorer, Identity};
use gated::synthetic::synthetic_pair;

fn main() -> gated::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| gated::Error::Layout(e.to_string()))?;
    let script = dir.path().join("size.sh");
    std::fs::write(&script, "#!/bin/sh\nexpr $(wc -c < \"$1\") / 1024\n").map_err(|e| gated::Error::Layout(e.to_string()))?;
    let scorer = ExternalScorer::parse(&format!("kb=nr:sh {}", script.display()))?;

    let mut entries = Vec::new();
    for i in 0..3 {
        let low = dir.path().join(format!("{i}.png"));
        save_image(&synthetic_pair(i, 128, 128).low, &low)?;
        entries.push(ManifestEntry {
            id: format!("img{i}"),
            low,
            reference: None,
            source: "unpaired".into(),
        });
    }
    let opts = EvalOptions {
        metrics: vec![],
        scorers: vec![scorer],
        ..Default::default()
    };
    let report = evaluate(&Identity, &DatasetManifest::new(Split::Test, entries), &opts)?;
    println!("{}", report.table());
    Ok(())
}
