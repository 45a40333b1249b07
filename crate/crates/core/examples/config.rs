//! Parse a TOML configuration with dotted overrides and print the result.
//!
//! ```text
//! cargo run --release --example config -- trainer.epochs=5 loss.alpha=0.8
//! ```

use gated::config::Config;

const FILE: &str = r#"
[trainer]
batch_size = 4
learning_rate = 1e-4

[data]
layout = "lolv1"
"#;

fn main() {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    match Config::from_toml_with_overrides(FILE, &overrides) {
        Ok(c) => print!("{}", c.to_toml_string()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
