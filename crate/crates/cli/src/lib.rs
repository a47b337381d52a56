//! Configuration-driven experiments over the matrix language model:
//! corpus generation, training, diagnostics, verification and sweeps, all
//! writing CSV, JSON and SVG files with a metadata sidecar per file.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod plot;
pub mod stats;
pub mod sweeps;

pub use error::CliError;

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "BOTTLENECK_OUT";

/// Joins a relative `out_dir` onto the output root, if one is set.
pub fn resolve_out_dir(out_dir: &std::path::Path, root: Option<&std::path::Path>) -> std::path::PathBuf {
    match root {
        Some(r) if out_dir.is_relative() => r.join(out_dir),
        _ => out_dir.to_path_buf(),
    }
}
