//! Recorded request sessions and their replay through a pipeline.

use std::io::{BufRead, Write};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::context::Timestamp;
use crate::http_model::{HttpError, RequestParser};
use crate::pipeline::Pipeline;
use crate::policy::Decision;

/// One request of a session: receipt time, peer and raw HTTP/1.1 bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub ts: Timestamp,
    pub peer: IpAddr,
    pub raw: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("malformed session record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("session request {index}: {source}")]
    Request { index: usize, source: HttpError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_session(session: &[SessionRequest], mut out: impl Write) -> std::io::Result<()> {
    for r in session {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_session(input: impl BufRead) -> Result<Vec<SessionRequest>, ReplayError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ReplayError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Runs every request through `pipeline` at its recorded time.
pub fn replay(session: &[SessionRequest], pipeline: &Pipeline) -> Result<Vec<Decision>, ReplayError> {
    let parser = RequestParser::default();
    session
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let r = parser
                .parse(s.raw.as_bytes(), s.peer)
                .map_err(|source| ReplayError::Request { index, source })?;
            Ok(pipeline.process_at(&r, s.ts).decision)
        })
        .collect()
}

/// Canonical serialisation of a decision sequence, one JSON object per line.
pub fn decisions_jsonl(decisions: &[Decision]) -> Vec<u8> {
    let mut out = Vec::new();
    for d in decisions {
        serde_json::to_writer(&mut out, d).expect("decisions serialise");
        out.push(b'\n');
    }
    out
}
