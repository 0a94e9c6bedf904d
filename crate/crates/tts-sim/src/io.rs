//! JSON and JSON-lines file formats.
//!
//! Configs, metrics, allocation inputs and reports are single JSON
//! documents. Traces and occupancy series are JSON lines: one value per
//! line, UTF-8, LF-terminated.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tts_sim_core::roofline::{AllocationProblem, DeviceSpec, ModelProfile};
use tts_sim_core::sim::{MetricsReport, SimConfig};
use tts_sim_core::workload::TraceRecord;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
    /// Malformed document; `key_path` locates the offending value.
    #[error("{location}: {key_path}: {message}")]
    Parse {
        location: String,
        key_path: String,
        message: String,
    },
    #[error("{location}: {error}")]
    Invalid {
        location: String,
        error: tts_sim_core::Error,
    },
}

impl FormatError {
    fn io(path: &Path, error: std::io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            error,
        }
    }
}

/// Deserialize one JSON value, reporting the key path of any error.
pub fn from_json_str<T: DeserializeOwned>(text: &str, location: &str) -> Result<T, FormatError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| parse_error(location, e))?;
    de.end().map_err(|e| FormatError::Parse {
        location: location.to_string(),
        key_path: ".".to_string(),
        message: e.to_string(),
    })?;
    Ok(value)
}

fn parse_error(location: &str, e: serde_path_to_error::Error<serde_json::Error>) -> FormatError {
    FormatError::Parse {
        location: location.to_string(),
        key_path: e.path().to_string(),
        message: e.into_inner().to_string(),
    }
}

fn read_text(path: &Path) -> Result<String, FormatError> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| FormatError::io(path, e))?;
    Ok(s)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    from_json_str(&read_text(path)?, &path.display().to_string())
}

/// Write `value` as pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(|e| FormatError::io(path, e))
}

/// Parse and validate a simulation config.
pub fn parse_config(text: &str, location: &str) -> Result<SimConfig, FormatError> {
    let config: SimConfig = from_json_str(text, location)?;
    config.validate().map_err(|error| FormatError::Invalid {
        location: location.to_string(),
        error,
    })?;
    Ok(config)
}

pub fn read_config(path: &Path) -> Result<SimConfig, FormatError> {
    parse_config(&read_text(path)?, &path.display().to_string())
}

pub fn write_config(config: &SimConfig, path: &Path) -> Result<(), FormatError> {
    write_json(config, path)
}

pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<(), FormatError> {
    write_json(report, path)
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport, FormatError> {
    read_json(path)
}

/// Write values as JSON lines.
pub fn write_jsonl_to<T: Serialize, W: Write>(values: &[T], out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    for v in values {
        serde_json::to_writer(&mut out, v)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Read JSON lines; errors carry the 1-based line number.
pub fn read_jsonl_from<T: DeserializeOwned, R: BufRead>(input: R, location: &str) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| FormatError::Parse {
            location: format!("{location}:{}", i + 1),
            key_path: ".".to_string(),
            message: e.to_string(),
        })?;
        out.push(from_json_str(&line, &format!("{location}:{}", i + 1))?);
    }
    Ok(out)
}

pub fn write_trace(records: &[TraceRecord], path: &Path) -> Result<(), FormatError> {
    let f = fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    write_jsonl_to(records, f).map_err(|e| FormatError::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, FormatError> {
    let f = fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    read_jsonl_from(BufReader::new(f), &path.display().to_string())
}

/// One line of the occupancy series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancySample {
    /// Generation round, counted over all problems.
    pub round: u32,
    /// Tick within the round.
    pub tick: u64,
    pub occupancy: f64,
}

/// Occupancy trace of a report split into rounds.
pub fn occupancy_samples(report: &MetricsReport) -> Vec<OccupancySample> {
    report
        .rounds()
        .into_iter()
        .enumerate()
        .flat_map(|(r, ticks)| {
            ticks.iter().enumerate().map(move |(t, &occupancy)| OccupancySample {
                round: r as u32,
                tick: t as u64,
                occupancy,
            })
        })
        .collect()
}

pub fn write_occupancy(report: &MetricsReport, path: &Path) -> Result<(), FormatError> {
    let f = fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    write_jsonl_to(&occupancy_samples(report), f).map_err(|e| FormatError::io(path, e))
}

/// Model pair and workload shape for a standalone allocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesFile {
    pub generator: ModelProfile,
    pub verifier: ModelProfile,
    pub n_requests: u64,
    pub verifier_seq: u64,
    pub decode_len: u64,
}

impl ProfilesFile {
    pub fn problem(&self, device: DeviceSpec) -> AllocationProblem {
        AllocationProblem {
            n_requests: self.n_requests,
            verifier_seq: self.verifier_seq,
            decode_len: self.decode_len,
            generator: self.generator,
            verifier: self.verifier,
            device,
        }
    }
}

fn validated<T>(value: T, check: impl FnOnce(&T) -> tts_sim_core::Result<()>, path: &Path) -> Result<T, FormatError> {
    check(&value).map_err(|error| FormatError::Invalid {
        location: path.display().to_string(),
        error,
    })?;
    Ok(value)
}

pub fn read_profiles(path: &Path) -> Result<ProfilesFile, FormatError> {
    let p: ProfilesFile = read_json(path)?;
    validated(
        p,
        |p| {
            p.generator.validate()?;
            p.verifier.validate()?;
            if p.n_requests == 0 {
                return Err(tts_sim_core::Error::OutOfRange { field: "n_requests" });
            }
            Ok(())
        },
        path,
    )
}

pub fn read_device(path: &Path) -> Result<DeviceSpec, FormatError> {
    validated(read_json(path)?, DeviceSpec::validate, path)
}
