//! Interchange file formats (dataset, motion, checkpoint helpers).

use std::io;
use std::path::Path;

/// Write-temp-then-rename so readers never observe a half-written file
/// and re-runs with identical inputs reproduce identical bytes.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
