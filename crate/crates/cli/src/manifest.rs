use std::fs;
use std::path::Path;

use ditair_core::arch::ConfigFile;
use ditair_core::Result;
use sha2::{Digest, Sha256};

use crate::settings::MANIFEST_SECTION;

/// SHA-256 over `blob <len>\0<content>`, the object hashing scheme git uses.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(blob_hash(&fs::read(path)?))
}

/// Resolved config plus content hashes of the files a run read and wrote.
pub struct Manifest {
    config: ConfigFile,
}

impl Manifest {
    pub fn new(command: &str, resolved: &ConfigFile) -> Self {
        let mut config = resolved.clone();
        config.set(MANIFEST_SECTION, "command", command);
        Self { config }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let hash = file_hash(path)?;
        self.config.set(MANIFEST_SECTION, &format!("input.{name}"), hash);
        Ok(())
    }

    pub fn output(&mut self, out_dir: &Path, file: &str) -> Result<()> {
        let hash = file_hash(&out_dir.join(file))?;
        self.config.set(MANIFEST_SECTION, &format!("output.{file}"), hash);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::write(out_dir.join("manifest.cfg"), self.config.to_string())?;
        Ok(())
    }
}
