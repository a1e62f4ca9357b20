//! Run directory: outputs, the resolved config, a manifest, and `run.log`.
//!
//! Everything except `run.log` is a pure function of config and seed, so
//! reruns give byte-identical files. Timings go to the log only.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use dfm_guidance::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub struct RunDir {
    root: PathBuf,
    command: String,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    schema_version: u32,
    config: &'static str,
    outputs: Vec<ManifestEntry>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), command: command.to_string(), outputs: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Opens `name` for writing and records it in the manifest.
    pub fn create_file(&mut self, name: &str) -> Result<io::BufWriter<File>> {
        self.record(name);
        Ok(io::BufWriter::new(File::create(self.path(name))?))
    }

    /// Records a file written by other means (e.g. a model and its sidecar).
    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut f = self.create_file(name)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    /// Writes `config.toml` and `manifest.json`.
    pub fn finish(self, config: &RunConfig) -> Result<()> {
        fs::write(self.path("config.toml"), config.to_toml()?)?;
        let mut outputs = Vec::new();
        for name in &self.outputs {
            let bytes = fs::read(self.path(name))?;
            outputs.push(ManifestEntry {
                file: name.clone(),
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            schema_version: config.schema_version,
            config: "config.toml",
            outputs,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.path("manifest.json"), json + "\n")?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sends log records to stderr and to a file.
#[derive(Clone)]
struct Tee {
    file: Option<Arc<Mutex<File>>>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        if let Some(f) = &self.file {
            f.lock().expect("log file lock").write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if let Some(f) = &self.file {
            f.lock().expect("log file lock").flush()?;
        }
        io::stderr().flush()
    }
}

pub fn init_logging(verbosity: u8, log_file: Option<&Path>) -> Result<()> {
    let file = match log_file {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            Some(Arc::new(Mutex::new(File::create(p)?)))
        }
        None => None,
    };
    let level = match verbosity {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    // A second initialization (in tests) is harmless.
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("DFM_LOG")
        .format_timestamp_millis()
        .target(env_logger::Target::Pipe(Box::new(Tee { file })))
        .try_init();
    Ok(())
}
