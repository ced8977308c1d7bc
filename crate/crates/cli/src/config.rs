//! Run configuration: merging flags over a JSON file, metadata sidecars, and
//! horizon shorthand.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const TOOL: &str = "coulomb";
pub const DEFAULT_SEED: u64 = 0;

/// Metadata written next to every output file. Passing it back through
/// `--config` reruns the same command with the same resolved settings.
#[derive(Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: Value,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub report: Value,
}

pub struct Context {
    pub command: &'static str,
    pub seed: u64,
    pub out: Option<PathBuf>,
    file_config: Option<Map<String, Value>>,
    explicit: HashSet<String>,
    outputs: Vec<String>,
}

impl Context {
    pub fn new(
        command: &'static str,
        config: Option<&Path>,
        seed: Option<u64>,
        out: Option<PathBuf>,
        matches: &ArgMatches,
    ) -> Result<Self> {
        let explicit = matches
            .ids()
            .map(|id| id.as_str())
            .filter(|id| matches.value_source(id) == Some(ValueSource::CommandLine))
            .map(str::to_owned)
            .collect();
        let mut file_seed = None;
        let file_config = match config {
            None => None,
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let value: Value =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let Value::Object(mut map) = value else {
                    bail!("{} must contain a JSON object", path.display());
                };
                if let Some(cmd) = map.get("command").and_then(Value::as_str) {
                    if cmd != command {
                        bail!("{} was written by `{cmd}`, not `{command}`", path.display());
                    }
                }
                file_seed = map.get("seed").and_then(Value::as_u64);
                match map.remove("config") {
                    Some(Value::Object(inner)) => Some(inner),
                    Some(_) => bail!("`config` in {} must be an object", path.display()),
                    None => {
                        map.remove("seed");
                        Some(map)
                    }
                }
            }
        };
        Ok(Self {
            command,
            seed: seed.or(file_seed).unwrap_or(DEFAULT_SEED),
            out,
            file_config,
            explicit,
            outputs: Vec::new(),
        })
    }

    /// Flags given on the command line win over the file, which wins over
    /// flag defaults.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, parsed: &T) -> Result<T> {
        let Some(file) = &self.file_config else {
            return Ok(serde_json::from_value(serde_json::to_value(parsed)?)?);
        };
        let Value::Object(flags) = serde_json::to_value(parsed)? else {
            bail!("internal: arguments did not serialize to an object");
        };
        let mut merged = file.clone();
        for (key, value) in flags {
            if self.explicit.contains(&key) || !merged.contains_key(&key) {
                merged.insert(key, value);
            }
        }
        serde_json::from_value(Value::Object(merged)).context("config file does not match this command")
    }

    /// Writes `<name>.csv` into the output directory, or to stdout when no
    /// directory was given.
    pub fn emit_csv(&mut self, name: &str, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        match &self.out {
            Some(dir) => {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let file_name = format!("{name}.csv");
                let path = dir.join(&file_name);
                let mut file = io::BufWriter::new(
                    fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
                );
                write(&mut file)?;
                file.flush()?;
                self.outputs.push(file_name);
            }
            None => {
                let stdout = io::stdout();
                let mut lock = stdout.lock();
                write(&mut lock)?;
                lock.flush()?;
            }
        }
        Ok(())
    }

    /// Writes the metadata sidecar `<command>.json` when an output directory
    /// was given.
    pub fn finish<T: Serialize>(&self, config: &T, report: Value) -> Result<()> {
        let Some(dir) = &self.out else {
            return Ok(());
        };
        fs::create_dir_all(dir)?;
        let sidecar = Sidecar {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            seed: self.seed,
            config: serde_json::to_value(config)?,
            outputs: self.outputs.clone(),
            report,
        };
        let path = dir.join(format!("{}.json", self.command));
        let mut text = serde_json::to_string_pretty(&sidecar)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Human-readable lines go to stdout unless stdout carries CSV data.
    pub fn say(&self, csv_on_stdout: bool, line: &str) -> Result<()> {
        if csv_on_stdout && self.out.is_none() {
            writeln!(io::stderr(), "{line}")?;
        } else {
            writeln!(io::stdout(), "{line}")?;
        }
        Ok(())
    }
}

/// True when the error chain bottoms out in a closed stdout pipe.
pub fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
            || cause
                .downcast_ref::<csv::Error>()
                .is_some_and(|e| matches!(e.kind(), csv::ErrorKind::Io(io) if io.kind() == io::ErrorKind::BrokenPipe))
            || cause
                .downcast_ref::<coulomb_core::Error>()
                .is_some_and(|e| matches!(e, coulomb_core::Error::Io(io) if io.kind() == io::ErrorKind::BrokenPipe))
    })
}

/// Parses `90`, `90s`, `15m`, `1h`, `24h`, `30d` or `1y` into seconds.
pub fn parse_horizon(text: &str, year_days: f64) -> Result<f64> {
    let text = text.trim();
    let (number, unit) = match text.find(|c: char| c.is_ascii_alphabetic()) {
        Some(pos) => text.split_at(pos),
        None => (text, "s"),
    };
    let value: f64 = number.trim().parse().with_context(|| format!("invalid horizon `{text}`"))?;
    let scale = match unit {
        "s" => 1.0,
        "m" | "min" => 60.0,
        "h" => 3600.0,
        "d" => 86_400.0,
        "y" => year_days * 86_400.0,
        other => bail!("unknown horizon unit `{other}` in `{text}` (use s, m, h, d or y)"),
    };
    let seconds = value * scale;
    if !(seconds.is_finite() && seconds > 0.0) {
        bail!("horizon `{text}` must be positive");
    }
    Ok(seconds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_shorthand() {
        assert_eq!(parse_horizon("1h", 365.0).unwrap(), 3600.0);
        assert_eq!(parse_horizon("24h", 365.0).unwrap(), 86_400.0);
        assert_eq!(parse_horizon("1y", 365.0).unwrap(), 31_536_000.0);
        assert_eq!(parse_horizon("1y", 365.25).unwrap(), 31_557_600.0);
        assert_eq!(parse_horizon("3.5h", 365.0).unwrap(), 12_600.0);
        assert_eq!(parse_horizon("600", 365.0).unwrap(), 600.0);
        assert!(parse_horizon("0h", 365.0).is_err());
        assert!(parse_horizon("5w", 365.0).is_err());
        assert!(parse_horizon("h", 365.0).is_err());
    }
}
