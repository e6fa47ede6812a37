//! File helpers shared by the pipelines: structured config loading and
//! line-delimited JSON streams.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Line { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IoError {
    /// True for failures to reach the bytes at all, as opposed to bad content.
    pub fn is_transport(&self) -> bool {
        matches!(self, IoError::Open { .. } | IoError::Io(_))
    }
}

/// Reads a TOML file (by `.toml` extension) or JSON file (anything else).
pub fn load_structured<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Open { path: path.to_path_buf(), source })?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|message| IoError::Parse { path: path.to_path_buf(), message })
}

/// Iterates over the non-blank lines of a JSONL file as `(line_number, text)`,
/// 1-based.
pub fn read_lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String), IoError>>, IoError> {
    let file = File::open(path).map_err(|source| IoError::Open { path: path.to_path_buf(), source })?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file).lines().enumerate().filter_map(move |(i, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((i + 1, l))),
        Err(e) => Some(Err(IoError::Line { path: owned.clone(), line: i + 1, message: e.to_string() })),
    }))
}

/// Parses every non-blank line of a JSONL file into `T`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, IoError> {
    let mut out = Vec::new();
    for item in read_lines(path)? {
        let (line, text) = item?;
        let value = serde_json::from_str(&text)
            .map_err(|e| IoError::Line { path: path.to_path_buf(), line, message: e.to_string() })?;
        out.push((line, value));
    }
    Ok(out)
}

pub struct JsonlWriter<W: Write> {
    inner: W,
}

impl JsonlWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, IoError> {
        let file = File::create(path).map_err(|source| IoError::Open { path: path.to_path_buf(), source })?;
        Ok(Self::new(BufWriter::new(file)))
    }
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    /// Writes one record as a single line.
    pub fn write<T: Serialize>(&mut self, value: &T) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(value).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.inner.write_all(&line)
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}
