//! Output directory with a header on every file and a closing manifest.

use crate::config::RunConfig;
use crate::{CliError, ARTIFACT};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    artifact: &'a str,
    command: &'a str,
    files: &'a [ManifestEntry],
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    artifact: &'a str,
    command: &'a str,
    config: serde_json::Map<String, serde_json::Value>,
    report: &'a T,
}

/// Writes artifacts for one command invocation.
pub struct OutputDir {
    dir: PathBuf,
    command: String,
    config: Vec<(&'static str, String)>,
    files: Vec<ManifestEntry>,
}

impl OutputDir {
    pub fn create(dir: &Path, command: &str, cfg: &RunConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config: cfg.entries(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    fn header(&self) -> String {
        let mut s = format!("# {ARTIFACT}\n# command = {}\n", self.command);
        for (k, v) in &self.config {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        s
    }

    fn store(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.files.push(ManifestEntry { file: name.to_string(), bytes: bytes.len() });
        Ok(())
    }

    /// CSV body produced by `body`, preceded by `#` header lines.
    pub fn write_csv(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let mut buf = self.header().into_bytes();
        body(&mut buf)?;
        self.store(name, &buf)
    }

    /// `{artifact, command, config, report}` as pretty JSON.
    pub fn write_json<T: Serialize>(&mut self, name: &str, report: &T) -> Result<(), CliError> {
        let config = self
            .config
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone())))
            .collect();
        let envelope = Envelope { artifact: ARTIFACT, command: &self.command, config, report };
        let mut buf = serde_json::to_vec_pretty(&envelope)?;
        buf.push(b'\n');
        self.store(name, &buf)
    }

    /// Writes `manifest.json` listing every file in write order.
    pub fn finish(self) -> Result<Vec<ManifestEntry>, CliError> {
        let manifest = Manifest { artifact: ARTIFACT, command: &self.command, files: &self.files };
        let mut file = std::fs::File::create(self.dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut file, &manifest)?;
        file.write_all(b"\n")?;
        Ok(self.files)
    }
}

/// Rows of `f64` cells; `None` becomes an empty field.
pub fn write_rows(buf: &mut Vec<u8>, header: &[&str], rows: &[Vec<Option<f64>>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()))?;
    }
    w.flush()?;
    Ok(())
}
