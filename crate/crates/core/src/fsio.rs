//! Atomic file writes shared by every artifact producer: payload goes to a
//! temp file in the destination directory, then renames into place, so a
//! crash never leaves a partial output behind.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
