//! CSV and JSON emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::model::GameSpec;
use crate::n_agent_solver::OwnSolution;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|source| IoError::Io { path: path.display().to_string(), source })?;
    w.flush().map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

pub fn read_spec(path: &Path) -> Result<serde_json::Value, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io { path: path.display().to_string(), source })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn parse_spec(value: serde_json::Value) -> Result<GameSpec, IoError> {
    Ok(serde_json::from_value(value)?)
}

/// Per-agent dump: `step,node,y,z_0..,pi_0..`; the last step only carries `y`.
pub fn write_solution_csv<W: Write>(own: &OwnSolution, out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    let nz = own.z.dim();
    let np = own.pi.dim();
    let mut header = vec!["step".to_string(), "node".to_string(), "y".to_string()];
    header.extend((0..nz).map(|c| format!("z_{c}")));
    header.extend((0..np).map(|c| format!("pi_{c}")));
    w.write_record(&header)?;
    let lat = &own.lattice;
    for t in 0..=lat.steps() {
        for k in 0..lat.nodes_at(t) {
            let mut row = vec![t.to_string(), k.to_string(), format!("{:e}", own.y.get(t, k)[0])];
            if t < lat.steps() {
                row.extend(own.z.get(t, k).iter().map(|v| format!("{v:e}")));
                row.extend(own.pi.get(t, k).iter().map(|v| format!("{v:e}")));
            } else {
                row.extend(std::iter::repeat_n(String::new(), nz + np));
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|source| IoError::Io { path: "<csv>".into(), source })?;
    Ok(())
}

pub fn write_solution_file(own: &OwnSolution, path: &Path) -> Result<(), IoError> {
    write_solution_csv(own, create(path)?)
}
