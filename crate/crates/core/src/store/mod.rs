//! Persistence: checkpoints, PPM images and run configuration. Nothing else touches disk.

mod checkpoint;
mod config;
mod ppm;

pub use checkpoint::{
    encode_checkpoint, parse_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, Stage, TensorRecord, FORMAT_VERSION,
    MAGIC,
};
pub use config::{load_config, DegradeConfig, LsaConfig, ModelConfig, RunConfig, ScheduleConfig};
pub use ppm::{encode_ppm, parse_ppm, read_ppm, write_ppm, ImageBuffer};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Appends `text` to `path`, creating it if needed.
pub fn append_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Sorted `.ppm` files in `dir`.
pub fn list_ppm(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    out.sort();
    Ok(out)
}
