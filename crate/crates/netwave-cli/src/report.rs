//! CSV emission and parsing. Schemas are fixed:
//!   time series   t,err_sq,delta,delta_tilde,eta,eta_tilde
//!   N sweep       N,max_err_sq,max_delta,max_delta_tilde,max_eta,max_eta_tilde
//!   greedy log    iter,mu,indicator,dimQ,dimV,N
//! Floats are written with Rust's shortest round-trip formatting, so repeated
//! runs produce byte-identical files. Empty cells mean "undefined" (for
//! effectivities at exactly-zero errors).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use netwave::certify::{BoundConstants, CertifiedTrajectory};
use netwave::error::{Error, Result};
use netwave::fem::TruthModel;
use netwave::greedy::GreedyRecord;
use netwave::integrate::{state_energy, Trajectory};

pub const TIMESERIES_HEADER: &str = "t,err_sq,delta,delta_tilde,eta,eta_tilde";
pub const NSWEEP_HEADER: &str = "N,max_err_sq,max_delta,max_delta_tilde,max_eta,max_eta_tilde";
pub const MUSWEEP_HEADER: &str = "mu,max_err_sq,max_delta,max_delta_tilde,max_eta,max_eta_tilde";
pub const HISTORY_HEADER: &str = "iter,mu,indicator,dimQ,dimV,N";
pub const CONSTANTS_HEADER: &str = "mu,c0,c1,c_p,gamma,c_prime,c_dprime,c_tilde";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn write_timeseries(path: &Path, cert: &CertifiedTrajectory) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "{TIMESERIES_HEADER}")?;
    for n in 0..cert.times.len() {
        let err = cert.err_sq.as_ref().map(|e| e[n]);
        let eta = cert.eta.as_ref().and_then(|e| e[n]);
        let eta_t = cert.eta_tilde.as_ref().and_then(|e| e[n]);
        writeln!(
            w,
            "{},{},{},{},{},{}",
            cert.times[n],
            opt(err),
            cert.delta[n],
            cert.delta_tilde[n],
            opt(eta),
            opt(eta_t)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One aggregated row: maxima over time (and, in the N sweep, over the test
/// sample).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub max_err_sq: f64,
    pub max_delta: f64,
    pub max_delta_tilde: f64,
    pub max_eta: Option<f64>,
    pub max_eta_tilde: Option<f64>,
}

impl SweepRow {
    pub fn from_certified(cert: &CertifiedTrajectory) -> SweepRow {
        let fold_max = |xs: &[f64]| xs.iter().cloned().fold(0.0f64, f64::max);
        let fold_opt = |xs: Option<&Vec<Option<f64>>>| -> Option<f64> {
            xs.and_then(|v| v.iter().flatten().cloned().fold(None, |acc: Option<f64>, x| {
                Some(acc.map_or(x, |a| a.max(x)))
            }))
        };
        SweepRow {
            max_err_sq: cert.err_sq.as_ref().map(|e| fold_max(e)).unwrap_or(0.0),
            max_delta: fold_max(&cert.delta),
            max_delta_tilde: fold_max(&cert.delta_tilde),
            max_eta: fold_opt(cert.eta.as_ref()),
            max_eta_tilde: fold_opt(cert.eta_tilde.as_ref()),
        }
    }

    /// Componentwise maximum.
    pub fn merge(&self, other: &SweepRow) -> SweepRow {
        let opt_max = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, None) => x,
            (None, y) => y,
        };
        SweepRow {
            max_err_sq: self.max_err_sq.max(other.max_err_sq),
            max_delta: self.max_delta.max(other.max_delta),
            max_delta_tilde: self.max_delta_tilde.max(other.max_delta_tilde),
            max_eta: opt_max(self.max_eta, other.max_eta),
            max_eta_tilde: opt_max(self.max_eta_tilde, other.max_eta_tilde),
        }
    }
}

pub fn write_nsweep(path: &Path, rows: &[(usize, SweepRow)]) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "{NSWEEP_HEADER}")?;
    for (n, row) in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            n,
            row.max_err_sq,
            row.max_delta,
            row.max_delta_tilde,
            opt(row.max_eta),
            opt(row.max_eta_tilde)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_musweep(path: &Path, rows: &[(f64, SweepRow)]) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "{MUSWEEP_HEADER}")?;
    for (mu, row) in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            mu,
            row.max_err_sq,
            row.max_delta,
            row.max_delta_tilde,
            opt(row.max_eta),
            opt(row.max_eta_tilde)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history(path: &Path, history: &[GreedyRecord]) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.iteration,
            r.mu,
            r.indicator,
            r.dim_q,
            r.dim_v,
            r.dim_q + r.dim_v
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_constants(path: &Path, rows: &[BoundConstants]) -> Result<String> {
    let mut text = String::new();
    text.push_str(CONSTANTS_HEADER);
    text.push('\n');
    for c in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.mu, c.c0, c.c1, c.c_p, c.gamma, c.c_prime, c.c_dprime, c.c_tilde
        ));
    }
    fs::write(path, &text)?;
    Ok(text)
}

/// Truth run summary: squared field norms and physical energy per record.
pub fn write_truth_summary(path: &Path, m: &TruthModel, traj: &Trajectory) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "t,norm_p_sq,norm_u_sq,energy")?;
    for n in 0..traj.len() {
        writeln!(
            w,
            "{},{},{},{}",
            traj.times[n],
            m.norm_sq_q(&traj.p[n]),
            m.norm_sq_v(&traj.u[n]),
            state_energy(m, &traj.p[n], &traj.u[n])
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_energy_series(path: &Path, times: &[f64], energies: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "t,energy")?;
    for (t, e) in times.iter().zip(energies) {
        writeln!(w, "{t},{e}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_test_sample(path: &Path, mus: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    writeln!(w, "index,mu")?;
    for (i, mu) in mus.iter().enumerate() {
        writeln!(w, "{i},{mu}")?;
    }
    w.flush()?;
    Ok(())
}

fn malformed(path: &Path, line: usize, why: &str) -> Error {
    Error::Persist(format!(
        "malformed report file {} (line {}): {why}",
        path.display(),
        line + 1
    ))
}

fn parse_cell(path: &Path, line: usize, cell: &str) -> Result<f64> {
    cell.trim()
        .parse()
        .map_err(|_| malformed(path, line, &format!("bad number `{cell}`")))
}

fn parse_opt_cell(path: &Path, line: usize, cell: &str) -> Result<Option<f64>> {
    if cell.trim().is_empty() {
        Ok(None)
    } else {
        parse_cell(path, line, cell).map(Some)
    }
}

pub fn read_nsweep(path: &Path) -> Result<Vec<(usize, SweepRow)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == NSWEEP_HEADER => {}
        _ => return Err(malformed(path, 0, "missing N-sweep header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(malformed(path, i, "expected 6 columns"));
        }
        let n: usize = cells[0]
            .trim()
            .parse()
            .map_err(|_| malformed(path, i, "bad N"))?;
        rows.push((
            n,
            SweepRow {
                max_err_sq: parse_cell(path, i, cells[1])?,
                max_delta: parse_cell(path, i, cells[2])?,
                max_delta_tilde: parse_cell(path, i, cells[3])?,
                max_eta: parse_opt_cell(path, i, cells[4])?,
                max_eta_tilde: parse_opt_cell(path, i, cells[5])?,
            },
        ));
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct TimeSeriesRow {
    pub t: f64,
    pub err_sq: Option<f64>,
    pub delta: f64,
    pub delta_tilde: f64,
    pub eta: Option<f64>,
    pub eta_tilde: Option<f64>,
}

pub fn read_timeseries(path: &Path) -> Result<Vec<TimeSeriesRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TIMESERIES_HEADER => {}
        _ => return Err(malformed(path, 0, "missing time-series header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(malformed(path, i, "expected 6 columns"));
        }
        rows.push(TimeSeriesRow {
            t: parse_cell(path, i, cells[0])?,
            err_sq: parse_opt_cell(path, i, cells[1])?,
            delta: parse_cell(path, i, cells[2])?,
            delta_tilde: parse_cell(path, i, cells[3])?,
            eta: parse_opt_cell(path, i, cells[4])?,
            eta_tilde: parse_opt_cell(path, i, cells[5])?,
        });
    }
    Ok(rows)
}
