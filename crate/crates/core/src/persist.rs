//! State and trace files.
//!
//! States are JSON documents `{meta, W, H, b}` with every float written to 17
//! significant digits, which round-trips `f64` exactly. Traces are written as
//! CSV and as JSON lines with the same column names.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbone::EpochRecord;
use crate::error::{Error, Result};
use crate::model::{Hyperparams, ModelState};
use crate::optim::{TraceRecord, TrainTrace};

/// Trace CSV header.
pub const TRACE_HEADER: &str = "iter,f,grad_norm,nc1,nc2,nc3,nc4,w_fro2,h_fro2,b_norm,seconds";

pub const TRACE_CSV: &str = "trace.csv";
pub const TRACE_JSONL: &str = "trace.jsonl";

/// Backbone epoch-trace CSV header.
pub const EPOCH_HEADER: &str = "epoch,loss,objective,train_error,nc1,nc2,nc3,nc4,seconds";
pub const EPOCHS_CSV: &str = "epochs.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateMeta {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub lambdas: Lambdas,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub w: f64,
    pub h: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedState {
    pub state: ModelState,
    pub hp: Hyperparams,
    pub seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDoc {
    meta: StateMeta,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    b: Vec<f64>,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn fmt_f64(out: &mut String, v: f64) {
    if v.is_finite() {
        write!(out, "{v:.16e}").unwrap();
    } else {
        out.push_str("null");
    }
}

fn fmt_matrix(out: &mut String, m: &DMatrix<f64>) {
    out.push('[');
    for (r, row) in m.row_iter().enumerate() {
        if r > 0 {
            out.push_str(",\n    ");
        }
        out.push('[');
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push_str(", ");
            }
            fmt_f64(out, *v);
        }
        out.push(']');
    }
    out.push(']');
}

/// Serializes a state document.
pub fn state_to_string(state: &ModelState, hp: &Hyperparams, seed: Option<u64>) -> Result<String> {
    state.check(hp)?;
    let meta = StateMeta {
        k: hp.k,
        d: hp.d,
        n: hp.n,
        lambdas: Lambdas {
            w: hp.lambda_w,
            h: hp.lambda_h,
            b: hp.lambda_b,
        },
        seed,
    };
    let mut out = String::from("{\n  \"meta\": ");
    // The meta block is small; serde_json's shortest round-trip floats are exact too.
    out.push_str(&serde_json::to_string(&meta).map_err(|e| Error::Numerical(e.to_string()))?);
    out.push_str(",\n  \"W\": ");
    fmt_matrix(&mut out, &state.w);
    out.push_str(",\n  \"H\": ");
    fmt_matrix(&mut out, &state.h);
    out.push_str(",\n  \"b\": [");
    for (i, v) in state.b.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        fmt_f64(&mut out, *v);
    }
    out.push_str("]\n}\n");
    Ok(out)
}

/// Writes a state file, creating parent directories if needed.
pub fn save_state(path: impl AsRef<Path>, state: &ModelState, hp: &Hyperparams, seed: Option<u64>) -> Result<()> {
    let path = path.as_ref();
    let text = state_to_string(state, hp, seed)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn rows_to_matrix(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    name: &str,
) -> std::result::Result<DMatrix<f64>, String> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("{name} must be {nrows}x{ncols}"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

/// Parses a state document; `origin` names the source in errors.
pub fn state_from_str(text: &str, origin: &str) -> Result<SavedState> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let doc: StateDoc = serde_json::from_str(text).map_err(|e| parse_err(e.line(), e.to_string()))?;
    let m = doc.meta;
    let hp = Hyperparams::new(m.k, m.d, m.n, m.lambdas.w, m.lambdas.h, m.lambdas.b)
        .map_err(|e| parse_err(0, format!("invalid meta: {e}")))?;
    let w = rows_to_matrix(&doc.w, hp.k, hp.d, "W").map_err(|e| parse_err(0, e))?;
    let h = rows_to_matrix(&doc.h, hp.d, hp.n_total(), "H").map_err(|e| parse_err(0, e))?;
    if doc.b.len() != hp.k {
        return Err(parse_err(0, format!("b must have length {}", hp.k)));
    }
    let state = ModelState {
        w,
        h,
        b: DVector::from_vec(doc.b),
    };
    state.check(&hp).map_err(|e| parse_err(0, e.to_string()))?;
    Ok(SavedState {
        state,
        hp,
        seed: m.seed,
    })
}

pub fn load_state(path: impl AsRef<Path>) -> Result<SavedState> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    state_from_str(&text, &path.display().to_string())
}

fn csv_row(r: &TraceRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.iter, r.f, r.grad_norm, r.nc1, r.nc2, r.nc3, r.nc4, r.w_fro2, r.h_fro2, r.b_norm, r.seconds
    )
}

/// CSV rendering of a trace: header plus one line per record.
pub fn trace_to_csv(trace: &TrainTrace) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in &trace.records {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

/// JSON-lines rendering; undefined metrics become `null`.
pub fn trace_to_jsonl(trace: &TrainTrace) -> Result<String> {
    let mut out = String::new();
    for r in &trace.records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Numerical(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `trace.csv` and `trace.jsonl` into `dir`, creating it if needed.
pub fn persist_trace(trace: &TrainTrace, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let csv = dir.join(TRACE_CSV);
    let jsonl = dir.join(TRACE_JSONL);
    fs::write(&csv, trace_to_csv(trace)).map_err(|e| io_error(&csv, e))?;
    fs::write(&jsonl, trace_to_jsonl(trace)?).map_err(|e| io_error(&jsonl, e))?;
    Ok((csv, jsonl))
}

/// CSV rendering of backbone epoch records.
pub fn epochs_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(EPOCH_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, r.loss, r.objective, r.train_error, r.nc1, r.nc2, r.nc3, r.nc4, r.seconds
        );
    }
    out
}

/// Writes `epochs.csv` into `dir`, creating it if needed.
pub fn persist_epochs(records: &[EpochRecord], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(EPOCHS_CSV);
    fs::write(&path, epochs_to_csv(records)).map_err(|e| io_error(&path, e))?;
    Ok(path)
}

/// Reads a trace back from its CSV form.
pub fn load_trace_csv(path: impl AsRef<Path>) -> Result<TrainTrace> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let origin = path.display().to_string();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.clone(),
        line,
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(TRACE_HEADER) => {}
        Some(other) => return Err(parse_err(1, format!("unexpected header '{other}'"))),
        None => return Err(parse_err(1, "empty file".into())),
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(parse_err(lineno, format!("expected 11 fields, found {}", fields.len())));
        }
        let iter = fields[0]
            .parse::<usize>()
            .map_err(|e| parse_err(lineno, format!("iter: {e}")))?;
        let mut v = [0.0; 10];
        for (slot, field) in v.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| parse_err(lineno, format!("'{field}': {e}")))?;
        }
        records.push(TraceRecord {
            iter,
            f: v[0],
            grad_norm: v[1],
            nc1: v[2],
            nc2: v[3],
            nc3: v[4],
            nc4: v[5],
            w_fro2: v[6],
            h_fro2: v[7],
            b_norm: v[8],
            seconds: v[9],
        });
    }
    Ok(TrainTrace { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iter: usize) -> TraceRecord {
        TraceRecord {
            iter,
            f: 1.0 / 3.0,
            grad_norm: 1e-9,
            nc1: f64::NAN,
            nc2: 0.1,
            nc3: 0.2,
            nc4: 0.0,
            w_fro2: 2.5,
            h_fro2: 7.0,
            b_norm: 0.0,
            seconds: 0.01,
        }
    }

    #[test]
    fn csv_has_header_plus_one_line_per_record() {
        let trace = TrainTrace {
            records: vec![record(0), record(10), record(17)],
        };
        let csv = trace_to_csv(&trace);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap(), TRACE_HEADER);
    }

    #[test]
    fn jsonl_writes_nan_as_null() {
        let trace = TrainTrace {
            records: vec![record(0)],
        };
        let line = trace_to_jsonl(&trace).unwrap();
        assert!(line.contains("\"nc1\":null"));
    }

    #[test]
    fn malformed_state_reports_line() {
        let text = "{\n  \"meta\": {\"K\": 2, \"d\": 1, \"n\": 1,\n  oops }";
        match state_from_str(text, "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn state_shape_mismatch_is_parse_error() {
        let text = r#"{"meta":{"K":2,"d":1,"n":1,"lambdas":{"w":0.1,"h":0.1,"b":0.1},"seed":null},
            "W":[[1.0],[2.0]],"H":[[1.0]],"b":[0.0,0.0]}"#;
        assert!(matches!(state_from_str(text, "mem"), Err(Error::Parse { .. })));
    }

    #[test]
    fn epoch_csv_has_header_and_rows() {
        let r = EpochRecord {
            epoch: 3,
            loss: 0.5,
            objective: 0.6,
            train_error: 0.0,
            nc1: 1e-3,
            nc2: 0.1,
            nc3: 0.2,
            nc4: f64::NAN,
            seconds: 0.0,
        };
        let csv = epochs_to_csv(&[r, r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], EPOCH_HEADER);
        assert_eq!(lines[1], "3,0.5,0.6,0,0.001,0.1,0.2,NaN,0");
    }
}
