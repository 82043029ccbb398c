//! Test double for the external forecaster protocol.
//!
//! Usage: `stub-forecaster [echo|short|garbage|hang|mean]`. `echo` repeats the
//! last context value, `mean` repeats the context mean, `short` answers one
//! step too few, `garbage` answers with non-JSON and `hang` never answers.

use std::io::{BufRead, Write};

use stgrid::ensemble::{ForecastRequest, ForecastResponse};

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "echo".into());
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let Ok(req) = serde_json::from_str::<ForecastRequest>(&line) else {
            eprintln!("stub-forecaster: bad request: {line}");
            continue;
        };
        let last = req.context.last().copied().unwrap_or(0.0);
        let mean = req.context.iter().sum::<f64>() / req.context.len().max(1) as f64;
        let forecast = match mode.as_str() {
            "hang" => loop {
                std::thread::park();
            },
            "garbage" => {
                let _ = writeln!(out, "this is not json");
                let _ = out.flush();
                continue;
            }
            "short" => vec![last; req.horizon.saturating_sub(1)],
            "mean" => vec![mean; req.horizon],
            _ => vec![last; req.horizon],
        };
        let resp = ForecastResponse { series_id: Some(req.series_id), forecast };
        let body = serde_json::to_string(&resp).expect("response serialises");
        if writeln!(out, "{body}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
}
