//! Result staging. Files are collected in memory and written only after the
//! task succeeds, each through a temp file and rename.

use std::path::Path;

use dpkfc::container::write_atomic;

use crate::CliError;

/// Name of the resolved-config echo written next to every result.
pub const ECHO_FILE: &str = "config.resolved.json";

#[derive(Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Write the echo first so any result on disk has its config beside it.
    pub fn commit(&self, dir: &Path, echo: &[u8]) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(ECHO_FILE), echo)?;
        for (name, bytes) in &self.files {
            write_atomic(&dir.join(name), bytes)?;
        }
        Ok(())
    }
}
