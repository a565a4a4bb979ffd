//! Artifact and manifest writing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::args::{Common, Format, OUT_DIR_ENV};
use crate::CliError;

pub fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime("io", format!("{}: {e}", path.display()))
}

/// Overlays the non-null fields of `flags` on the JSON object in `config`.
/// Keys the command does not know are rejected.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T, CliError> {
    let Value::Object(flag_map) = serde_json::to_value(flags).map_err(|e| CliError::runtime("json", e.to_string()))?
    else {
        unreachable!("argument structs serialize to objects")
    };
    let mut merged = match config {
        None => Map::new(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::validation("invalid-config", format!("{}: {e}", path.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(CliError::validation("invalid-config", "config must be a JSON object")),
                Err(e) => return Err(CliError::validation("invalid-config", format!("{}: {e}", path.display()))),
            }
        }
    };
    if let Some(unknown) = merged.keys().find(|k| !flag_map.contains_key(*k)) {
        return Err(CliError::validation("invalid-config", format!("unknown key '{unknown}'")));
    }
    for (k, v) in flag_map {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::validation("invalid-config", e.to_string()))
}

pub fn require<T>(value: Option<T>, name: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::validation("missing-parameter", format!("'{name}' is required")))
}

pub fn existing(path: Option<&PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    let path = require(path, name)?;
    if !path.is_file() {
        return Err(CliError::validation("missing-file", format!("{} does not exist", path.display())));
    }
    Ok(path.clone())
}

/// Where a command writes and in which format.
pub struct Target {
    pub path: PathBuf,
    pub format: Format,
}

impl Target {
    pub fn new(common: &Common, command: &str, default_format: Format) -> Result<Self, CliError> {
        let format = common.format.unwrap_or(default_format);
        let path = match &common.out {
            Some(p) => p.clone(),
            None => {
                let dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
                let ext = match format {
                    Format::Json => "json",
                    Format::Csv => "csv",
                };
                dir.join(format!("{command}.{ext}"))
            }
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        Ok(Self { path, format })
    }

    /// Sibling file named `<artifact stem>.<suffix>`.
    pub fn sibling(&self, suffix: &str) -> PathBuf {
        let stem = self.path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
        self.path.with_file_name(format!("{stem}.{suffix}"))
    }
}

impl Common {
    /// Records the effective output, format and seed for the manifest.
    pub fn resolve(&mut self, target: &Target, seed: Option<u64>) {
        self.out = Some(target.path.clone());
        self.format = Some(target.format);
        self.seed = seed;
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_error(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

/// Plain numeric table; floats use the shortest round-trip form.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(|e| io_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn num(x: f64) -> String {
    x.to_string()
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    core_version: &'a str,
    seed: Option<u64>,
    config: Value,
    outputs: Vec<String>,
    summary: Value,
}

/// Writes `<artifact>.manifest.json` next to the main artifact.
pub fn write_manifest<C: Serialize>(
    target: &Target,
    command: &str,
    seed: Option<u64>,
    config: &C,
    outputs: &[&Path],
    summary: Value,
) -> Result<(), CliError> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        core_version: apd_core::VERSION,
        seed,
        config: serde_json::to_value(config).map_err(|e| CliError::runtime("json", e.to_string()))?,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        summary,
    };
    let mut name = target.path.as_os_str().to_owned();
    name.push(".manifest.json");
    write_json(Path::new(&name), &manifest)?;
    for p in outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}
