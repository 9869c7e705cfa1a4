//! Atomic file output and the CSV/JSON layouts of run directories.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use soboq_core::diagnostics::SweepRow;
use soboq_core::funcspace::Coeffs;
use soboq_core::solver::IterateLog;
use soboq_core::Error;

pub const ITERATES_HEADER: [&str; 6] = ["t", "theta_norm", "eta_norm", "resid_norm", "err_v_h1", "err_q_l2"];
pub const SWEEP_HEADER: [&str; 8] = ["axis", "value", "replicate", "seed", "err_v_h1", "err_q_l2", "status", "runtime_s"];

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<(), Error>
where
    F: FnOnce(&mut dyn Write) -> Result<(), Error>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(io::Error::from)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

/// 17 significant digits.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_float(v: Option<f64>) -> String {
    v.filter(|x| !x.is_nan()).map(float).unwrap_or_default()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

pub fn write_iterates(path: &Path, log: &IterateLog) -> Result<(), Error> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(ITERATES_HEADER).map_err(csv_error)?;
        for r in &log.records {
            csv.write_record([
                r.t.to_string(),
                float(r.theta_norm),
                float(r.eta_norm),
                opt_float(r.resid_norm),
                opt_float(r.err_v_h1),
                opt_float(r.err_q_l2),
            ])
            .map_err(csv_error)?;
        }
        csv.flush()?;
        Ok(())
    })
}

/// One line of `coeffs.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CoeffRecord {
    pub t: usize,
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
}

pub fn write_coeffs(path: &Path, history: &[(Coeffs, Coeffs)]) -> Result<(), Error> {
    write_atomic(path, |w| {
        for (t, (theta, eta)) in history.iter().enumerate() {
            let rec = CoeffRecord {
                t,
                theta: theta.as_slice().to_vec(),
                eta: eta.as_slice().to_vec(),
            };
            serde_json::to_writer(&mut *w, &rec).map_err(io::Error::from)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

pub fn read_coeffs(path: &Path) -> Result<Vec<(Coeffs, Coeffs)>, Error> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: CoeffRecord = serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if rec.t != i {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected iterate {i}, found {}", rec.t),
                });
            }
            Ok((Coeffs::from_vec(rec.theta), Coeffs::from_vec(rec.eta)))
        })
        .collect()
}

pub fn sweep_record(r: &SweepRow) -> [String; 8] {
    [
        r.axis.to_string(),
        float(r.value),
        r.replicate.to_string(),
        r.seed.to_string(),
        opt_float(r.err_v_h1),
        opt_float(r.err_q_l2),
        r.status.clone(),
        format!("{:.3}", r.runtime_s),
    ]
}

/// Rewrites the sweep table with previously completed rows (raw records)
/// followed by new ones.
pub fn write_sweep(path: &Path, previous: &[csv::StringRecord], rows: &[SweepRow]) -> Result<(), Error> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(SWEEP_HEADER).map_err(csv_error)?;
        for rec in previous {
            csv.write_record(rec).map_err(csv_error)?;
        }
        for r in rows {
            csv.write_record(sweep_record(r)).map_err(csv_error)?;
        }
        csv.flush()?;
        Ok(())
    })
}

/// Rows of an existing sweep table, as raw records.
pub fn read_sweep(path: &Path) -> Result<Vec<csv::StringRecord>, Error> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.iter().ne(SWEEP_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("{}: not a sweep table", path.display()),
        });
    }
    rdr.records().map(|r| r.map_err(csv_error)).collect()
}
