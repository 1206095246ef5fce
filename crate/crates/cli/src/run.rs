use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tempora_core::corpus::Manifest;

use crate::error::{CliError, CliResult};

/// Resolves paths against `--workdir`.
#[derive(Debug, Clone)]
pub struct Workdir(pub PathBuf);

impl Workdir {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.0.join(p)
        }
    }

    /// As [`Workdir::path`], leaving `-` (standard output) alone.
    pub fn output(&self, p: &Path) -> PathBuf {
        if p == Path::new("-") {
            p.to_owned()
        } else {
            self.path(p)
        }
    }
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation, written as JSON.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub status: String,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, threads: usize) -> Self {
        Self {
            command: command.to_owned(),
            arguments: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config: serde_json::Value::Null,
            seed: None,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0.0,
            status: "running".into(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(InputHash {
            path: path.to_owned(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    /// Hashes a corpus manifest and every file it names.
    pub fn corpus_inputs(&mut self, manifest: &Path, vocab: Option<&Path>) -> CliResult<()> {
        self.input(manifest)?;
        let m = Manifest::read(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        for s in &m.slices {
            self.input(&base.join(&s.file))?;
        }
        match (vocab, &m.vocabulary) {
            (Some(v), _) => self.input(v)?,
            (None, Some(v)) => self.input(&base.join(v))?,
            (None, None) => {}
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_owned());
    }

    pub fn finish(mut self, status: &str, path: &Path) -> io::Result<()> {
        self.status = status.to_owned();
        self.finished_unix = now();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(&self).map_err(io::Error::other)?;
        fs::write(path, text + "\n")
    }
}

/// `<path>.run.json`
pub fn manifest_beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    path.with_file_name(name)
}

/// A CSV destination: a file, or standard output for `-`.
pub fn csv_writer(target: &Path) -> CliResult<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = if target == Path::new("-") {
        Box::new(io::stdout().lock())
    } else {
        if let Some(dir) = target.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Box::new(io::BufWriter::new(
            fs::File::create(target).map_err(|e| CliError::io(target, e))?,
        ))
    };
    Ok(csv::Writer::from_writer(sink))
}
