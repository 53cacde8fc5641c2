//! Atomic file output: every artifact is written to a sibling temp file and renamed.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // Temp files start owner-only; give the result ordinary file permissions.
        let perms = std::fs::Permissions::from_mode(0o644);
        tmp.as_file().set_permissions(perms).map_err(|e| Error::io(path, e))?;
    }
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_atomic_str(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Encodes an image as PNG and writes it atomically.
pub fn save_png<I>(path: &Path, image: &I) -> Result<()>
where
    I: image::GenericImageView,
    I: Into<image::DynamicImage> + Clone,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    let dynamic: image::DynamicImage = image.clone().into();
    dynamic.write_to(&mut buf, image::ImageFormat::Png)?;
    write_atomic(path, &buf.into_inner())
}
