//! Content-addressed file references.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, Mask, Rgb};

/// Reference to a stored blob: `<sha256>.<ext>` for content-addressed blobs,
/// or a plain relative path for files that were ingested in place.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlobRef(pub String);

impl BlobRef {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BlobRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub trait BlobStore: Send + Sync {
    fn get(&self, r: &BlobRef) -> Result<Vec<u8>>;
    fn put(&self, bytes: &[u8], ext: &str) -> Result<BlobRef>;

    fn put_rgb(&self, image: &Rgb) -> Result<BlobRef> {
        self.put(&raster::encode_png_rgb(image)?, "png")
    }

    fn put_mask(&self, mask: &Mask) -> Result<BlobRef> {
        self.put(&raster::encode_png_mask(mask)?, "png")
    }

    fn load_rgb(&self, r: &BlobRef) -> Result<Rgb> {
        raster::decode_rgb(&self.get(r)?)
    }

    fn load_mask(&self, r: &BlobRef) -> Result<Mask> {
        raster::decode_mask(&self.get(r)?)
    }
}

/// Blobs stored flat under one directory.
#[derive(Debug, Clone)]
pub struct LocalBlobStore {
    root: PathBuf,
}

impl LocalBlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(LocalBlobStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, r: &BlobRef) -> Result<PathBuf> {
        let rel = Path::new(r.as_str());
        if rel.is_absolute()
            || rel
                .components()
                .any(|c| matches!(c, std::path::Component::ParentDir))
        {
            return Err(Error::Precondition(format!("blob ref escapes the store: {r}")));
        }
        Ok(self.root.join(rel))
    }
}

impl BlobStore for LocalBlobStore {
    fn get(&self, r: &BlobRef) -> Result<Vec<u8>> {
        let path = self.path_of(r)?;
        fs::read(&path).map_err(|e| Error::io(path, e))
    }

    fn put(&self, bytes: &[u8], ext: &str) -> Result<BlobRef> {
        let r = BlobRef(format!("{}.{ext}", raster::sha256_hex(bytes)));
        let path = self.root.join(r.as_str());
        if !path.exists() {
            let tmp = path.with_extension(format!("{ext}.tmp{}", std::process::id()));
            fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = LocalBlobStore::open(dir.path()).unwrap();
        let a = store.put(b"hello", "bin").unwrap();
        let b = store.put(b"hello", "bin").unwrap();
        assert_eq!(a, b);
        assert_eq!(store.get(&a).unwrap(), b"hello");
    }

    #[test]
    fn rejects_escaping_refs() {
        let dir = tempfile::tempdir().unwrap();
        let store = LocalBlobStore::open(dir.path()).unwrap();
        assert!(store.get(&BlobRef("../etc/passwd".into())).is_err());
    }
}
