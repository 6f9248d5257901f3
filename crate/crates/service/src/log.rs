//! JSONL event logs: one [`SessionEvent`] per line, append-only.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::session::SessionEvent;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("event log line {line}: {message}")]
    Format { line: usize, message: String },
}

pub fn event_line(event: &SessionEvent) -> String {
    serde_json::to_string(event).expect("events serialize")
}

pub fn write_events<W: Write>(out: &mut W, events: &[SessionEvent]) -> std::io::Result<()> {
    for e in events {
        writeln!(out, "{}", event_line(e))?;
    }
    Ok(())
}

/// The whole log of a session as JSONL text.
pub fn log_text(events: &[SessionEvent]) -> String {
    events.iter().map(|e| event_line(e) + "\n").collect()
}

pub fn read_events<R: BufRead>(input: R) -> Result<Vec<SessionEvent>, LogError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| LogError::Format {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LogError::Format {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_log_file(path: &Path) -> Result<Vec<SessionEvent>, LogError> {
    let file = File::open(path).map_err(|source| LogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_events(BufReader::new(file))
}

/// Append handle on a session's log file. Each append is flushed.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    file: File,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self, LogError> {
        let io = |source| LogError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, events: &[SessionEvent]) -> Result<(), LogError> {
        let io = |source| LogError::Io {
            path: self.path.clone(),
            source,
        };
        let mut buf = Vec::new();
        write_events(&mut buf, events).map_err(io)?;
        self.file.write_all(&buf).map_err(io)?;
        self.file.flush().map_err(io)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
