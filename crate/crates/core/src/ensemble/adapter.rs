use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("empty forecaster command")]
    EmptyCommand,
    #[error("cannot start `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("writing request for `{series}`: {source}")]
    Write {
        series: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no response for `{series}` within {secs:.1}s")]
    Timeout { series: String, secs: f64 },
    #[error("forecaster exited before answering `{0}`")]
    Exited(String),
    #[error("malformed response for `{series}`: {reason} (line: {line:?})")]
    Malformed { series: String, reason: String, line: String },
    #[error("response for `{series}` has {got} steps, expected {want}")]
    WrongHorizon { series: String, got: usize, want: usize },
    #[error("response names series `{got}` but `{want}` was requested")]
    SeriesMismatch { want: String, got: String },
    #[error("forecaster is unusable after an earlier failure")]
    Poisoned,
    #[error("{ids} series ids for {rows} context rows")]
    IdCount { ids: usize, rows: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRequest {
    pub series_id: String,
    pub context: Vec<f64>,
    pub horizon: usize,
    pub freq_minutes: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_id: Option<String>,
    pub forecast: Vec<f64>,
}

/// A long-running forecaster process speaking one JSON object per line on
/// stdin/stdout.
pub struct ExternalForecaster {
    command: Vec<String>,
    timeout: Duration,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
    poisoned: bool,
}

impl std::fmt::Debug for ExternalForecaster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalForecaster").field("command", &self.command).field("timeout", &self.timeout).finish()
    }
}

impl ExternalForecaster {
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self, AdapterError> {
        let (program, args) = command.split_first().ok_or(AdapterError::EmptyCommand)?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| AdapterError::Spawn { command: command.join(" "), source })?;
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { command: command.to_vec(), timeout, stdin: child.stdin.take(), child, lines, poisoned: false })
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }

    /// One request/response round trip.
    pub fn forecast(&mut self, request: &ForecastRequest) -> Result<Vec<f64>, AdapterError> {
        if self.poisoned {
            return Err(AdapterError::Poisoned);
        }
        let result = self.round_trip(request);
        if result.is_err() {
            // A late or partial reply would desynchronise later requests.
            self.poisoned = true;
        }
        result
    }

    fn round_trip(&mut self, request: &ForecastRequest) -> Result<Vec<f64>, AdapterError> {
        let series = request.series_id.clone();
        let mut line = serde_json::to_string(request).expect("request serialises");
        line.push('\n');
        let stdin = self.stdin.as_mut().ok_or_else(|| AdapterError::Exited(series.clone()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|source| AdapterError::Write { series: series.clone(), source })?;

        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(reply) => reply,
            Err(RecvTimeoutError::Timeout) => {
                return Err(AdapterError::Timeout { series, secs: self.timeout.as_secs_f64() })
            }
            Err(RecvTimeoutError::Disconnected) => return Err(AdapterError::Exited(series)),
        };
        let parsed: ForecastResponse = serde_json::from_str(&reply).map_err(|e| AdapterError::Malformed {
            series: series.clone(),
            reason: e.to_string(),
            line: reply.clone(),
        })?;
        if let Some(got) = parsed.series_id {
            if got != series {
                return Err(AdapterError::SeriesMismatch { want: series, got });
            }
        }
        if parsed.forecast.len() != request.horizon {
            return Err(AdapterError::WrongHorizon { series, got: parsed.forecast.len(), want: request.horizon });
        }
        if parsed.forecast.iter().any(|v| !v.is_finite()) {
            return Err(AdapterError::Malformed { series, reason: "non-finite value".into(), line: reply });
        }
        Ok(parsed.forecast)
    }
}

impl Drop for ExternalForecaster {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Forecasts each row of an `N x C` context as its own univariate series.
pub fn per_node_forecast(
    handle: &mut ExternalForecaster,
    series_ids: &[String],
    context: ArrayView2<'_, f64>,
    horizon: usize,
    freq_minutes: u32,
) -> Result<Array2<f64>, AdapterError> {
    let n = context.nrows();
    if series_ids.len() != n {
        return Err(AdapterError::IdCount { ids: series_ids.len(), rows: n });
    }
    let mut out = Array2::zeros((n, horizon));
    for (i, id) in series_ids.iter().enumerate() {
        let request = ForecastRequest {
            series_id: id.clone(),
            context: context.row(i).to_vec(),
            horizon,
            freq_minutes,
        };
        let f = handle.forecast(&request)?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&f));
    }
    Ok(out)
}
