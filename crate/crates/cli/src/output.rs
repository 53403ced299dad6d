//! Output files: a one-line comment header, then the payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy)]
pub struct Header {
    pub subcommand: &'static str,
    pub config_hash: u64,
    pub seed: Option<u64>,
}

impl Header {
    pub fn line(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "# letf-lab {VERSION} subcommand={} config_hash={:016x} seed={seed}\n",
            self.subcommand, self.config_hash
        )
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Collects the paths a command reads so that no output can overwrite them.
#[derive(Debug, Default)]
pub struct Sink {
    pub header: Option<Header>,
    inputs: Vec<PathBuf>,
}

impl Sink {
    pub fn new(header: Header, inputs: &[&Path]) -> Self {
        Sink {
            header: Some(header),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        }
    }

    pub fn write(&self, path: &Path, body: impl FnOnce(&mut Vec<u8>) -> letf_lab::Result<()>) -> Result<(), CliError> {
        if let Some(input) = self.inputs.iter().find(|i| same_file(i, path)) {
            return Err(CliError::usage(format!(
                "output {} would overwrite input {}",
                path.display(),
                input.display()
            )));
        }
        let mut buf = Vec::new();
        if let Some(h) = self.header {
            buf.extend_from_slice(h.line().as_bytes());
        }
        body(&mut buf)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, buf)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn json<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), CliError> {
        self.write(path, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }
}

/// Reads JSON written by this tool, skipping leading `#` comment lines.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let body: String = text
        .lines()
        .skip_while(|l| l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    serde_json::from_str(&body).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn open(path: &Path) -> Result<fs::File, CliError> {
    fs::File::open(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}
