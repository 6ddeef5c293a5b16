use std::path::{Path, PathBuf};

use classdose_core::{io, ClassroomTable, Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "classdose";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    bytes: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    exit_code: i32,
    flags: &'a [String],
    artifacts: &'a [ManifestEntry],
}

#[derive(Debug, Serialize)]
struct JsonArtifact<'a, T: Serialize> {
    generator: String,
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

/// Writes artifacts under the output directory in call order and collects
/// them for the run manifest.
pub struct Run {
    out: PathBuf,
    command: String,
    config_hash: String,
    seed: u64,
    entries: Vec<ManifestEntry>,
    /// Conditions that leave the run complete but exit with status 2.
    pub flags: Vec<String>,
}

impl Run {
    pub fn new(out: &Path, command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            out: out.to_path_buf(),
            command: command.to_string(),
            config_hash,
            seed,
            entries: Vec::new(),
            flags: Vec::new(),
        }
    }

    pub fn header(&self) -> String {
        format!("{TOOL} {VERSION} config={}", self.config_hash)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn put(&mut self, rel: &str, text: &str) -> Result<()> {
        io::write_text(&self.path(rel), text)?;
        self.entries.push(ManifestEntry {
            path: rel.to_string(),
            bytes: text.len(),
            sha256: Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect(),
        });
        Ok(())
    }

    pub fn csv<S: AsRef<str>>(&mut self, rel: &str, columns: &[S], rows: &[Vec<String>]) -> Result<()> {
        let cols: Vec<&str> = columns.iter().map(AsRef::as_ref).collect();
        let text = io::csv_text(Some(&self.header()), &cols, rows);
        self.put(rel, &text)
    }

    pub fn table(&mut self, rel: &str, table: &ClassroomTable) -> Result<()> {
        let text = io::table_text(Some(&self.header()), table);
        self.put(rel, &text)
    }

    /// Text formats with `#` comments.
    pub fn commented(&mut self, rel: &str, body: &str) -> Result<()> {
        let text = format!("# {}\n{body}", self.header());
        self.put(rel, &text)
    }

    /// JSON has no comments, so the header goes into `generator` and
    /// `config_hash` fields.
    pub fn json<T: Serialize>(&mut self, rel: &str, body: &T) -> Result<()> {
        let wrapped = JsonArtifact {
            generator: format!("{TOOL} {VERSION}"),
            config_hash: &self.config_hash,
            body,
        };
        let text = io::json_text(&wrapped);
        self.put(rel, &text)
    }

    pub fn flag(&mut self, what: impl Into<String>) {
        self.flags.push(what.into());
    }

    pub fn exit_code(&self) -> i32 {
        if self.flags.is_empty() {
            0
        } else {
            2
        }
    }

    /// Writes `manifest-<command>.json` last.
    pub fn finish(self) -> Result<i32> {
        let code = self.exit_code();
        let m = Manifest {
            tool: TOOL,
            version: VERSION,
            command: &self.command,
            config_hash: &self.config_hash,
            seed: self.seed,
            exit_code: code,
            flags: &self.flags,
            artifacts: &self.entries,
        };
        let path = self.path(&format!("manifest-{}.json", self.command));
        io::write_text(&path, &io::json_text(&m))?;
        Ok(code)
    }
}

/// Checks that an upstream artifact exists before reading it.
pub fn require(path: &Path, remedy: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            remedy: remedy.to_string(),
        })
    }
}
