//! Plain-text persistence for run artifacts.
//!
//! Matrices go to a line-oriented text format that round-trips every f64
//! bit-exactly; structured metadata goes to JSON documents with sorted
//! keys and no volatile fields, so reruns produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::mesh::{DomainSpec, GramTag};
use crate::pod::{Cutoff, PodBasis};
use crate::stepper::Trajectory;
use crate::Result;

fn parse_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), detail: detail.into() }
}

fn open_artifact(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

/// Writes a matrix as a header line `rows cols` followed by one line per
/// row. The `{:.16e}` format carries 17 significant digits, enough to
/// reconstruct each value exactly.
pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path.as_ref())?);
    writeln!(out, "{} {}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let mut line = String::with_capacity(m.ncols() * 24);
        for j in 0..m.ncols() {
            if j > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{:.16e}", m[(i, j)]));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let reader = BufReader::new(open_artifact(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_error(path, "empty matrix file"))??;
    let mut dims = header.split_whitespace();
    let rows: usize = dims
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_error(path, "malformed dimension header"))?;
    let cols: usize = dims
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_error(path, "malformed dimension header"))?;

    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for token in line.split_whitespace() {
            let value: f64 = token
                .parse()
                .map_err(|_| parse_error(path, format!("bad number {token:?} in row {i}")))?;
            data.push(value);
        }
    }
    if data.len() != rows * cols {
        return Err(parse_error(
            path,
            format!("expected {} values, found {}", rows * cols, data.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Vectors are n x 1 matrices.
pub fn write_vector(path: impl AsRef<Path>, v: &DVector<f64>) -> Result<()> {
    write_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(parse_error(path, format!("expected one column, found {}", m.ncols())));
    }
    Ok(DVector::from_column_slice(m.column(0).as_slice()))
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| parse_error(path.as_ref(), e.to_string()))?;
    fs::write(path.as_ref(), text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let reader = BufReader::new(open_artifact(path)?);
    serde_json::from_reader(reader).map_err(|e| parse_error(path, e.to_string()))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryMeta {
    pub t_final: f64,
    pub k_steps: usize,
    pub space_tag: GramTag,
}

/// Writes `<name>.mat` (states as columns) and `<name>.meta.json`.
pub fn write_trajectory(
    dir: impl AsRef<Path>,
    name: &str,
    traj: &Trajectory,
    space_tag: GramTag,
) -> Result<()> {
    let dir = dir.as_ref();
    let k_steps = traj.states.len() - 1;
    let mat = DMatrix::from_columns(&traj.states);
    write_matrix(dir.join(format!("{name}.mat")), &mat)?;
    let meta = TrajectoryMeta {
        t_final: traj.dt * k_steps as f64,
        k_steps,
        space_tag,
    };
    write_json(dir.join(format!("{name}.meta.json")), &meta)
}

pub fn read_trajectory(dir: impl AsRef<Path>, name: &str) -> Result<(Trajectory, TrajectoryMeta)> {
    let dir = dir.as_ref();
    let meta: TrajectoryMeta = read_json(dir.join(format!("{name}.meta.json")))?;
    let mat_path = dir.join(format!("{name}.mat"));
    let mat = read_matrix(&mat_path)?;
    if mat.ncols() != meta.k_steps + 1 {
        return Err(parse_error(
            &mat_path,
            format!("expected {} states, found {}", meta.k_steps + 1, mat.ncols()),
        ));
    }
    let states = (0..mat.ncols()).map(|j| mat.column(j).into_owned()).collect();
    let dt = meta.t_final / meta.k_steps as f64;
    Ok((Trajectory { states, dt }, meta))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BasisMeta {
    pub gram_tag: GramTag,
    pub cutoff_used: Cutoff,
    pub rank: usize,
}

/// Writes `<name>.mat` (basis columns), `<name>.eig` (all eigenvalues, one
/// per line), and `<name>.meta.json`.
pub fn write_basis(dir: impl AsRef<Path>, name: &str, basis: &PodBasis) -> Result<()> {
    let dir = dir.as_ref();
    write_matrix(dir.join(format!("{name}.mat")), &basis.vectors)?;
    let eig = DVector::from_vec(basis.eigenvalues.clone());
    write_vector(dir.join(format!("{name}.eig")), &eig)?;
    let meta = BasisMeta {
        gram_tag: basis.gram_tag,
        cutoff_used: basis.cutoff_used,
        rank: basis.rank(),
    };
    write_json(dir.join(format!("{name}.meta.json")), &meta)
}

pub fn read_basis(dir: impl AsRef<Path>, name: &str) -> Result<PodBasis> {
    let dir = dir.as_ref();
    let meta: BasisMeta = read_json(dir.join(format!("{name}.meta.json")))?;
    let vectors = read_matrix(dir.join(format!("{name}.mat")))?;
    let eigenvalues = read_vector(dir.join(format!("{name}.eig")))?;
    Ok(PodBasis {
        vectors,
        eigenvalues: eigenvalues.as_slice().to_vec(),
        gram_tag: meta.gram_tag,
        cutoff_used: meta.cutoff_used,
    })
}

pub fn write_grid_spec(path: impl AsRef<Path>, spec: &DomainSpec) -> Result<()> {
    write_json(path, spec)
}

pub fn read_grid_spec(path: impl AsRef<Path>) -> Result<DomainSpec> {
    read_json(path)
}

/// One artifact in the run manifest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cutoff: Option<Cutoff>,
    /// Sum of the eigenvalues beyond the retained rank.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eigenvalue_tail: Option<f64>,
}

/// Deterministic run manifest: sorted entries, no timestamps.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn record_file(&mut self, dir: &Path, name: &str, file: &str, kind: &str) -> Result<()> {
        let bytes = fs::metadata(dir.join(file))?.len();
        self.entries.insert(
            name.to_string(),
            ManifestEntry {
                file: file.to_string(),
                bytes,
                kind: kind.to_string(),
                rank: None,
                cutoff: None,
                eigenvalue_tail: None,
            },
        );
        Ok(())
    }

    pub fn record_basis(&mut self, dir: &Path, name: &str, basis: &PodBasis) -> Result<()> {
        let file = format!("{name}.mat");
        let bytes = fs::metadata(dir.join(&file))?.len();
        self.entries.insert(
            name.to_string(),
            ManifestEntry {
                file,
                bytes,
                kind: "basis".to_string(),
                rank: Some(basis.rank()),
                cutoff: Some(basis.cutoff_used),
                eigenvalue_tail: Some(basis.tail_sum(basis.rank())),
            },
        );
        Ok(())
    }
}

pub fn write_manifest(dir: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    write_json(dir.as_ref().join("manifest.json"), manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    read_json(dir.as_ref().join("manifest.json"))
}

/// Writes a CSV file with the given header line and preformatted rows.
pub fn write_csv(path: impl AsRef<Path>, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path.as_ref())?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Model-comparison table with the pinned schema.
pub fn write_comparison_csv(
    path: impl AsRef<Path>,
    rows: &[crate::ocp::ComparisonRow],
) -> Result<()> {
    let formatted: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.size.to_string(),
                format!("{:.6e}", r.relobj),
                format!("{:.3}", r.time),
                r.iterations.to_string(),
            ]
        })
        .collect();
    write_csv(path, "size,relobj,time,iterations", &formatted)
}

/// Forward-error table: one named quantity per row.
pub fn write_quantity_csv(path: impl AsRef<Path>, rows: &[(String, f64)]) -> Result<()> {
    let formatted: Vec<Vec<String>> = rows
        .iter()
        .map(|(q, v)| vec![q.clone(), format!("{v:.6e}")])
        .collect();
    write_csv(path, "quantity,relerr", &formatted)
}

pub fn ensure_dir(dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}
