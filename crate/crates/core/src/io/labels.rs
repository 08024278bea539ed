//! Label sidecar files: one signed integer per line, `-1` for rejected.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: `{text}` is not an integer label")]
    Parse { line: usize, text: String },
}

pub fn format_labels(labels: &[i64]) -> String {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    s
}

pub fn parse_labels(text: &str) -> Result<Vec<i64>, LabelError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(i, l)| {
            let l = l.trim_end_matches('\r');
            l.trim().parse().map_err(|_| LabelError::Parse {
                line: i + 1,
                text: l.to_string(),
            })
        })
        .collect()
}

pub fn write_labels(labels: &[i64], path: impl AsRef<Path>) -> Result<(), LabelError> {
    super::write_atomic(path.as_ref(), format_labels(labels).as_bytes())?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<i64>, LabelError> {
    parse_labels(&std::fs::read_to_string(path)?)
}
