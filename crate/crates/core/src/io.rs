//! Artifact persistence: fixed binary layouts for states and matrices,
//! deterministic CSV writers, and JSON manifests.
//!
//! Binary formats (all little-endian):
//!
//! * state file: magic `RSVSNP01`, `u32 nx`, `u32 ny`, `u32 n_states`,
//!   then per state the pressure field followed by the water saturation
//!   field, each `nx * ny` row-major `f64`s;
//! * matrix file: magic `RSVMAT01`, `u64 rows`, `u64 cols`, then row-major
//!   `f64`s. Vectors are single-column matrices.

use crate::fom::StateField;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const STATE_MAGIC: &[u8; 8] = b"RSVSNP01";
const MATRIX_MAGIC: &[u8; 8] = b"RSVMAT01";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: &str) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn write_f64s(w: &mut impl Write, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, count: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write a state trajectory in the documented snapshot layout.
pub fn write_states(path: &Path, nx: usize, ny: usize, states: &[StateField]) -> Result<()> {
    let n_g = nx * ny;
    for s in states {
        if s.pressure.len() != n_g || s.saturation.len() != n_g {
            return Err(Error::Dimension(format!(
                "state has {} cells, grid {}",
                s.pressure.len(),
                n_g
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    (|| -> std::io::Result<()> {
        w.write_all(STATE_MAGIC)?;
        w.write_all(&(nx as u32).to_le_bytes())?;
        w.write_all(&(ny as u32).to_le_bytes())?;
        w.write_all(&(states.len() as u32).to_le_bytes())?;
        for s in states {
            write_f64s(&mut w, s.pressure.iter().copied())?;
            write_f64s(&mut w, s.saturation.iter().copied())?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

pub fn read_states(path: &Path) -> Result<(usize, usize, Vec<StateField>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut magic = [0u8; 8];
    let mut u32buf = [0u8; 4];
    (|| -> std::io::Result<(usize, usize, usize)> {
        r.read_exact(&mut magic)?;
        r.read_exact(&mut u32buf)?;
        let nx = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let ny = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        Ok((nx, ny, n))
    })()
    .map_err(|e| io_err(path, e))
    .and_then(|(nx, ny, n)| {
        if &magic != STATE_MAGIC {
            return Err(format_err(path, "bad magic, not a state file"));
        }
        let n_g = nx * ny;
        let mut states = Vec::with_capacity(n);
        for _ in 0..n {
            let p = read_f64s(&mut r, n_g).map_err(|e| io_err(path, e))?;
            let s = read_f64s(&mut r, n_g).map_err(|e| io_err(path, e))?;
            states.push(StateField {
                pressure: DVector::from_vec(p),
                saturation: DVector::from_vec(s),
            });
        }
        Ok((nx, ny, states))
    })
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    (|| -> std::io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for i in 0..m.nrows() {
            write_f64s(&mut w, (0..m.ncols()).map(|j| m[(i, j)]))?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut magic = [0u8; 8];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MATRIX_MAGIC {
        return Err(format_err(path, "bad magic, not a matrix file"));
    }
    r.read_exact(&mut u64buf).map_err(|e| io_err(path, e))?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf).map_err(|e| io_err(path, e))?;
    let cols = u64::from_le_bytes(u64buf) as usize;
    let data = read_f64s(&mut r, rows * cols).map_err(|e| io_err(path, e))?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    write_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::Dimension(format!(
            "expected a single-column matrix, got {} columns",
            m.ncols()
        )));
    }
    Ok(DVector::from_column_slice(m.column(0).as_slice()))
}

/// Deterministic CSV writer: fixed scientific formatting so identical data
/// produce byte-identical files.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    (|| -> std::io::Result<()> {
        if !header.is_empty() {
            writeln!(w, "{}", header.join(","))?;
        }
        for row in rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

/// CSV writer for rows with a leading label column.
pub fn write_csv_labeled(
    path: &Path,
    header: &[&str],
    rows: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    (|| -> std::io::Result<()> {
        writeln!(w, "{}", header.join(","))?;
        for (label, row) in rows {
            let mut line = vec![label.clone()];
            line.extend(row.iter().map(|v| format!("{v:.12e}")));
            writeln!(w, "{}", line.join(","))?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .map_err(|e| format_err(path, &format!("json encode: {e}")))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| format_err(path, &format!("json decode: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn state_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("states.bin");
        let states = vec![
            StateField {
                pressure: DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
                saturation: DVector::from_vec(vec![0.2; 6]),
            },
            StateField {
                pressure: DVector::from_vec(vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0]),
                saturation: DVector::from_vec(vec![0.3; 6]),
            },
        ];
        write_states(&path, 3, 2, &states).unwrap();
        let (nx, ny, back) = read_states(&path).unwrap();
        assert_eq!((nx, ny), (3, 2));
        assert_eq!(back, states);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        write_matrix(&path, &m).unwrap();
        assert!(read_states(&path).is_err());
    }

    #[test]
    fn csv_is_byte_deterministic() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let rows = vec![vec![1.0, 2.5e-8], vec![-3.25, 0.0]];
        write_csv(&a, &["x", "y"], &rows).unwrap();
        write_csv(&b, &["x", "y"], &rows).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn matrix_round_trip(rows in 1usize..6, cols in 1usize..6, seed in 0u64..100) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1e6..1e6));
            let dir = tempdir().unwrap();
            let path = dir.path().join("m.bin");
            write_matrix(&path, &m).unwrap();
            let back = read_matrix(&path).unwrap();
            prop_assert_eq!(m, back);
        }
    }
}
