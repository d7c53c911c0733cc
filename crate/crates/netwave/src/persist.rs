//! On-disk persistence: reduced bases (JSON with metadata) and truth
//! trajectories (flat binary cache).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::TruthModel;
use crate::greedy::{GreedyRecord, StopReason};
use crate::integrate::Trajectory;
use crate::reduce::ReducedBasis;

/// Hash of everything a stored basis structurally depends on: topology,
/// edge coefficients, admissible parameter range, and mesh resolution.
/// Floats enter as exact bit patterns, so the hash is reproducible.
pub fn model_hash(m: &TruthModel) -> String {
    let mut text = m.graph.canonical_string();
    text.push('|');
    for block in [&m.coeff.a, &m.coeff.b, &m.coeff.d_base] {
        for v in block {
            text.push_str(&format!("{:016x},", v.to_bits()));
        }
        text.push(';');
    }
    text.push_str(&format!(
        "{:016x},{:016x};{}",
        m.coeff.mu_min.to_bits(),
        m.coeff.mu_max.to_bits(),
        m.cells_per_edge
    ));
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(digest)
}

const BASIS_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BasisFile {
    format: u32,
    model_hash: String,
    n_p: usize,
    n_u: usize,
    kernel_dim: usize,
    blocks: Vec<(usize, usize)>,
    dim_q: usize,
    dim_v: usize,
    /// Column-major entries.
    q: Vec<f64>,
    v: Vec<f64>,
    history: Vec<GreedyRecord>,
    stop: Option<StopReason>,
}

/// A reloaded basis together with its provenance.
#[derive(Debug)]
pub struct LoadedBasis {
    pub basis: ReducedBasis,
    pub model_hash: String,
    pub history: Vec<GreedyRecord>,
    pub stop: Option<StopReason>,
}

pub fn save_basis(
    path: &Path,
    m: &TruthModel,
    basis: &ReducedBasis,
    history: &[GreedyRecord],
    stop: Option<StopReason>,
) -> Result<()> {
    let file = BasisFile {
        format: BASIS_FORMAT,
        model_hash: model_hash(m),
        n_p: m.n_p,
        n_u: m.n_u,
        kernel_dim: basis.kernel_dim,
        blocks: basis.blocks.clone(),
        dim_q: basis.dim_q(),
        dim_v: basis.dim_v(),
        q: basis.q_basis.as_slice().to_vec(),
        v: basis.v_basis.as_slice().to_vec(),
        history: history.to_vec(),
        stop,
    };
    let out = fs::File::create(path)?;
    let mut w = BufWriter::new(out);
    serde_json::to_writer(&mut w, &file)
        .map_err(|e| Error::Persist(format!("writing basis file: {e}")))?;
    w.flush()?;
    Ok(())
}

/// Load a basis without model validation (inspect-only use).
pub fn load_basis(path: &Path) -> Result<LoadedBasis> {
    let text = fs::read_to_string(path)?;
    let file: BasisFile = serde_json::from_str(&text)
        .map_err(|e| Error::Persist(format!("parsing basis file {}: {e}", path.display())))?;
    if file.format != BASIS_FORMAT {
        return Err(Error::Persist(format!(
            "unsupported basis format {} (expected {BASIS_FORMAT})",
            file.format
        )));
    }
    if file.q.len() != file.n_p * file.dim_q || file.v.len() != file.n_u * file.dim_v {
        return Err(Error::Persist("basis file has inconsistent matrix sizes".into()));
    }
    match file.blocks.last() {
        Some(&(dq, dv)) if dq == file.dim_q && dv == file.dim_v => {}
        _ => return Err(Error::Persist("basis file block record does not close".into())),
    }
    let basis = ReducedBasis {
        q_basis: DMatrix::from_column_slice(file.n_p, file.dim_q, &file.q),
        v_basis: DMatrix::from_column_slice(file.n_u, file.dim_v, &file.v),
        kernel_dim: file.kernel_dim,
        blocks: file.blocks,
    };
    Ok(LoadedBasis {
        basis,
        model_hash: file.model_hash,
        history: file.history,
        stop: file.stop,
    })
}

/// Load a basis and insist it belongs to this truth model.
pub fn load_basis_checked(path: &Path, m: &TruthModel) -> Result<LoadedBasis> {
    let loaded = load_basis(path)?;
    let expected = model_hash(m);
    if loaded.model_hash != expected {
        return Err(Error::Persist(format!(
            "basis file {} was trained on a different model (hash {} != {})",
            path.display(),
            &loaded.model_hash[..12.min(loaded.model_hash.len())],
            &expected[..12]
        )));
    }
    if loaded.basis.q_basis.nrows() != m.n_p || loaded.basis.v_basis.nrows() != m.n_u {
        return Err(Error::Persist("basis dimensions do not match the model".into()));
    }
    Ok(loaded)
}

const TRAJ_MAGIC: &[u8; 8] = b"NWTRAJ01";

/// Flat little-endian binary dump; exact f64 round trip.
pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let out = fs::File::create(path)?;
    let mut w = BufWriter::new(out);
    w.write_all(TRAJ_MAGIC)?;
    let len = traj.len();
    let n_p = if len > 0 { traj.p[0].len() } else { 0 };
    let n_u = if len > 0 { traj.u[0].len() } else { 0 };
    for v in [len as u64, n_p as u64, n_u as u64, traj.record_every as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&traj.tau.to_le_bytes())?;
    for t in &traj.times {
        w.write_all(&t.to_le_bytes())?;
    }
    for state in &traj.p {
        for x in state.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for state in &traj.u {
        for x in state.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |why: &str| Error::Persist(format!("trajectory file {}: {why}", path.display()));
    if bytes.len() < 8 + 4 * 8 + 8 || &bytes[..8] != TRAJ_MAGIC {
        return Err(fail("bad header"));
    }
    struct Cursor<'a> {
        bytes: &'a [u8],
        off: usize,
    }
    impl Cursor<'_> {
        fn u64(&mut self) -> u64 {
            let v = u64::from_le_bytes(self.bytes[self.off..self.off + 8].try_into().unwrap());
            self.off += 8;
            v
        }
        fn f64(&mut self) -> f64 {
            let v = f64::from_le_bytes(self.bytes[self.off..self.off + 8].try_into().unwrap());
            self.off += 8;
            v
        }
    }
    let mut cur = Cursor { bytes: &bytes, off: 8 };
    let len = cur.u64() as usize;
    let n_p = cur.u64() as usize;
    let n_u = cur.u64() as usize;
    let record_every = cur.u64() as usize;
    let expected = cur.off + 8 + 8 * (len + len * n_p + len * n_u);
    if bytes.len() != expected {
        return Err(fail("truncated or oversized payload"));
    }
    let tau = cur.f64();
    let times: Vec<f64> = (0..len).map(|_| cur.f64()).collect();
    let p: Vec<DVector<f64>> = (0..len)
        .map(|_| DVector::from_fn(n_p, |_, _| cur.f64()))
        .collect();
    let u: Vec<DVector<f64>> = (0..len)
        .map(|_| DVector::from_fn(n_u, |_, _| cur.f64()))
        .collect();
    Ok(Trajectory {
        tau,
        record_every,
        times,
        p,
        u,
    })
}
