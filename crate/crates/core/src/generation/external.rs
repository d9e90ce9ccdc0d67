//! Line-delimited JSON bridge to an external reward proposer running as a
//! child process. One request line out, one response line back.
//!
//! Request: `{"k": 8, "feature_names": [...], "best_weights": [...] | null}`
//! Response: `{"weights": [[w0, .., w4], ...]}` where each weight is a number
//! or one of the strings `"NaN"`, `"inf"`, `"-inf"`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::Weights;
use crate::sandbox::FEATURE_COUNT;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationRequest {
    pub k: usize,
    pub feature_names: Vec<String>,
    pub best_weights: Option<Weights>,
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("could not start adapter: {0}")]
    Spawn(std::io::Error),
    #[error("adapter i/o failed: {0}")]
    Io(std::io::Error),
    #[error("adapter did not answer within {0:?}")]
    Timeout(Duration),
    #[error("adapter closed its output")]
    Closed,
    #[error("malformed adapter response: {0}")]
    Malformed(String),
}

/// A running adapter process.
#[derive(Debug)]
pub struct ExternalAdapter {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
    usable: bool,
}

impl ExternalAdapter {
    /// Starts `command` through `sh -c`.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, AdapterError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(AdapterError::Spawn)?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            timeout,
            usable: true,
        })
    }

    /// False once the adapter has timed out or closed; a late answer would
    /// desynchronize the protocol, so the adapter is not used again.
    pub fn is_usable(&self) -> bool {
        self.usable
    }

    fn roundtrip(&mut self, line: &str) -> Result<String, AdapterError> {
        let stdin = self.stdin.as_mut().ok_or(AdapterError::Closed)?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| {
                self.usable = false;
                AdapterError::Io(e)
            })?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => {
                self.usable = false;
                Err(AdapterError::Io(e))
            }
            Err(RecvTimeoutError::Timeout) => {
                self.usable = false;
                Err(AdapterError::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.usable = false;
                Err(AdapterError::Closed)
            }
        }
    }
}

impl Drop for ExternalAdapter {
    fn drop(&mut self) {
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Sends one request and parses the reply. Non-finite weights are passed
/// through; the validity check rejects them later.
pub fn external_generate(
    request: &GenerationRequest,
    adapter: &mut ExternalAdapter,
) -> Result<Vec<Weights>, AdapterError> {
    if !adapter.is_usable() {
        return Err(AdapterError::Closed);
    }
    let line = serde_json::to_string(request).expect("request serializes");
    let reply = adapter.roundtrip(&line)?;
    parse_response(&reply)
}

pub fn parse_response(line: &str) -> Result<Vec<Weights>, AdapterError> {
    let bad = |m: String| AdapterError::Malformed(m);
    let value: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    let rows = value
        .get("weights")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing \"weights\" array".into()))?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let row = row
                .as_array()
                .ok_or_else(|| bad(format!("candidate {i} is not an array")))?;
            if row.len() != FEATURE_COUNT {
                return Err(bad(format!(
                    "candidate {i} has {} weights, expected {FEATURE_COUNT}",
                    row.len()
                )));
            }
            let mut w = [0.0; FEATURE_COUNT];
            for (slot, v) in w.iter_mut().zip(row) {
                *slot = weight_value(v).ok_or_else(|| bad(format!("candidate {i}: bad weight {v}")))?;
            }
            Ok(w)
        })
        .collect()
}

fn weight_value(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => match s.to_ascii_lowercase().as_str() {
            "nan" => Some(f64::NAN),
            "inf" | "+inf" | "infinity" => Some(f64::INFINITY),
            "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
            _ => None,
        },
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> GenerationRequest {
        GenerationRequest {
            k: 2,
            feature_names: vec!["a".into()],
            best_weights: None,
        }
    }

    #[test]
    fn parses_numbers_and_special_strings() {
        let w = parse_response(r#"{"weights": [[1, 2.5, "NaN", "inf", "-inf"]]}"#).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(&w[0][..2], &[1.0, 2.5]);
        assert!(w[0][2].is_nan());
        assert_eq!(w[0][3], f64::INFINITY);
        assert_eq!(w[0][4], f64::NEG_INFINITY);
    }

    #[test]
    fn rejects_malformed_replies() {
        for line in [
            "not json",
            r#"{"w": []}"#,
            r#"{"weights": [1]}"#,
            r#"{"weights": [[1, 2]]}"#,
            r#"{"weights": [[1, 2, 3, 4, "x"]]}"#,
        ] {
            assert!(matches!(parse_response(line), Err(AdapterError::Malformed(_))), "{line}");
        }
    }

    #[test]
    fn request_wire_format() {
        let mut r = request();
        r.best_weights = Some([0.0, 1.0, 0.0, 0.0, 0.5]);
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(
            s,
            r#"{"k":2,"feature_names":["a"],"best_weights":[0.0,1.0,0.0,0.0,0.5]}"#
        );
    }

    #[test]
    fn roundtrip_with_echo_process() {
        let cmd = r#"while read line; do echo '{"weights": [[0, 0, 0, 0, 1], [0, "NaN", 0, 0, 1]]}'; done"#;
        let mut a = ExternalAdapter::spawn(cmd, Duration::from_secs(10)).unwrap();
        for _ in 0..2 {
            let w = external_generate(&request(), &mut a).unwrap();
            assert_eq!(w.len(), 2);
            assert!(w[1][1].is_nan());
        }
    }

    #[test]
    fn silent_process_times_out_and_is_retired() {
        let mut a = ExternalAdapter::spawn("sleep 30", Duration::from_millis(100)).unwrap();
        assert!(matches!(external_generate(&request(), &mut a), Err(AdapterError::Timeout(_))));
        assert!(!a.is_usable());
        assert!(matches!(external_generate(&request(), &mut a), Err(AdapterError::Closed)));
    }

    #[test]
    fn exiting_process_is_closed() {
        let mut a = ExternalAdapter::spawn("true", Duration::from_secs(5)).unwrap();
        let err = external_generate(&request(), &mut a).unwrap_err();
        assert!(matches!(err, AdapterError::Closed | AdapterError::Io(_)), "{err}");
    }
}
