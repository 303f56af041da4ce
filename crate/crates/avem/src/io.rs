//! Serialization of run artifacts: iteration records (CSV and JSON lines),
//! per-element indicator tables, mesh snapshots, and linear systems.
//!
//! All floating point output uses Rust's shortest round-trip formatting, so
//! files written from identical data are byte-identical; the command line
//! tool relies on this to verify run determinism.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::driver::AdaptRecord;
use crate::estimator::LocalIndicators;
use crate::mesh::{Mesh, MeshDto, MeshError};
use crate::solver::SparseSystem;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("mesh: {0}")]
    Mesh(#[from] MeshError),
}

/// Column header of the per-iteration record table.
pub const RECORDS_CSV_HEADER: &str =
    "iter,ndofs,nelem,nvert,lambda_max,eta2,stab,ratio,h1err,contraction";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Render iteration records as CSV (one row per adaptive round). Optional
/// columns are left empty when untracked.
pub fn records_to_csv(records: &[AdaptRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(RECORDS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.n_dofs,
            r.n_elements,
            r.n_vertices,
            r.lambda_max,
            r.eta2,
            r.stab,
            r.ratio,
            opt(r.h1_err),
            opt(r.contraction),
        ));
    }
    out
}

pub fn write_records_csv(path: &Path, records: &[AdaptRecord]) -> Result<(), IoError> {
    fs::write(path, records_to_csv(records))?;
    Ok(())
}

/// Render one JSON object per line, mirroring the CSV contents with
/// self-describing field names.
pub fn records_to_jsonl(records: &[AdaptRecord]) -> Result<Vec<u8>, IoError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn write_records_jsonl(path: &Path, records: &[AdaptRecord]) -> Result<(), IoError> {
    fs::write(path, records_to_jsonl(records)?)?;
    Ok(())
}

/// Render the per-element indicator table of one iteration as CSV.
pub fn indicators_to_csv(ind: &LocalIndicators) -> String {
    let mut out = String::from("element,h,resid2,jump2,eta2,stab\n");
    for (k, &e) in ind.elems.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.0, ind.h[k], ind.resid2[k], ind.jump2[k], ind.eta2[k], ind.stab[k]
        ));
    }
    out
}

pub fn write_indicators_csv(path: &Path, ind: &LocalIndicators) -> Result<(), IoError> {
    fs::write(path, indicators_to_csv(ind))?;
    Ok(())
}

/// Render the mesh as JSON. The output stores the full bisection forest, so
/// reading it back reconstructs segments and derived queries exactly.
pub fn mesh_to_json(mesh: &Mesh) -> Result<Vec<u8>, IoError> {
    Ok(serde_json::to_vec_pretty(&MeshDto::from(mesh))?)
}

pub fn write_mesh_json(path: &Path, mesh: &Mesh) -> Result<(), IoError> {
    fs::write(path, mesh_to_json(mesh)?)?;
    Ok(())
}

/// Read a mesh snapshot written by [`write_mesh_json`], revalidating all
/// structural invariants.
pub fn read_mesh_json(path: &Path) -> Result<Mesh, IoError> {
    let dto: MeshDto = serde_json::from_slice(&fs::read(path)?)?;
    Ok(Mesh::try_from(dto)?)
}

/// Render the assembled system in Matrix Market formats: the matrix in
/// coordinate form, the right-hand side in array form.
pub fn matrix_market_strings(system: &SparseSystem) -> (String, String) {
    let mut matrix = String::new();
    let _ = writeln!(matrix, "%%MatrixMarket matrix coordinate real general");
    let _ = writeln!(matrix, "{} {} {}", system.n, system.n, system.nnz());
    for row in 0..system.n {
        for k in system.row_ptr[row]..system.row_ptr[row + 1] {
            let _ = writeln!(matrix, "{} {} {}", row + 1, system.col_idx[k] + 1, system.values[k]);
        }
    }
    let mut rhs = String::new();
    let _ = writeln!(rhs, "%%MatrixMarket matrix array real general");
    let _ = writeln!(rhs, "{} 1", system.n);
    for value in &system.rhs {
        let _ = writeln!(rhs, "{}", value);
    }
    (matrix, rhs)
}

/// Write the assembled system: the matrix goes to `path`, the right-hand
/// side next to it with the extension replaced by `.rhs.mtx`.
pub fn write_matrix_market(path: &Path, system: &SparseSystem) -> Result<(), IoError> {
    let (matrix, rhs) = matrix_market_strings(system);
    fs::write(path, matrix)?;
    fs::write(path.with_extension("rhs.mtx"), rhs)?;
    Ok(())
}
