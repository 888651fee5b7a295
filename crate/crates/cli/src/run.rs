use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Failures mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<ilearn::Error> for CliError {
    fn from(e: ilearn::Error) -> Self {
        match e {
            ilearn::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ilearn_autodiff::AdError> for CliError {
    fn from(e: ilearn_autodiff::AdError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn config_error(key: &str, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("`{key}` {msg}"))
}

/// Parses a TOML config, or the defaults when no path is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Build {
    version: &'static str,
    git: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    seed: u64,
    build: Build,
    config: serde_json::Value,
    files: Vec<FileEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory that records every file it writes.
pub struct RunDir {
    root: PathBuf,
    quiet: bool,
    files: Vec<FileEntry>,
}

impl RunDir {
    pub fn create(root: &Path, quiet: bool) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", root.display())))?;
        Ok(RunDir { root: root.to_path_buf(), quiet, files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.root.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(FileEntry { path: name.into(), sha256: hex(&Sha256::digest(contents.as_bytes())) });
        Ok(())
    }

    pub fn phase(&self, line: impl fmt::Display) {
        if !self.quiet {
            println!("{line}");
        }
    }

    pub fn finish(self, subcommand: &str, seed: u64, config: &impl Serialize) -> CliResult<()> {
        let manifest = Manifest {
            subcommand,
            seed,
            build: Build { version: env!("CARGO_PKG_VERSION"), git: env!("ILEARN_GIT_REV") },
            config: serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))?,
            files: self.files,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
        let path = self.root.join("manifest.json");
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

/// CSV text from a header and rows already formatted per cell.
pub fn csv(header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}
