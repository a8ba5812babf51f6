//! File formats: CSV tables, binary dumps with a JSON header, GeoJSON and
//! SVG. Every writer takes a `Write` and every reader a `Read`; the
//! `*_file` helpers wrap paths.

pub mod geojson;
pub mod svg;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::OcBasis;
use crate::bayes::PosteriorDraws;
use crate::cage::CageReport;
use crate::covariance::ReplicatedData;
use crate::error::{Error, Result};
use crate::geometry::{Partition, SpatialGrid};
use crate::kle::{MultivariateEigenSystem, Provenance};
use crate::regionalize::TraceEntry;

const MAGIC: &[u8; 8] = b"MVCAGE\0\x01";

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

/// Header of a binary dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryHeader {
    pub kind: String,
    #[serde(flatten)]
    pub fields: serde_json::Map<String, serde_json::Value>,
}

/// Writes `MAGIC`, the header length (u64 LE), the JSON header and the
/// values as f64 LE.
pub fn write_binary<W: Write>(mut w: W, header: &BinaryHeader, values: &[f64]) -> Result<()> {
    let head = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(head.len() as u64).to_le_bytes())?;
    w.write_all(&head)?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<(BinaryHeader, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not an mvcage binary file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut head = vec![0u8; len];
    r.read_exact(&mut head)?;
    let header: BinaryHeader = serde_json::from_slice(&head)?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % 8 != 0 {
        return Err(Error::Parse("binary payload is not a whole number of f64 values".into()));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok((header, values))
}

fn field_usize(h: &BinaryHeader, key: &str) -> Result<usize> {
    h.fields
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Parse(format!("binary header lacks `{key}`")))
}

fn expect_kind(h: &BinaryHeader, kind: &str) -> Result<()> {
    if h.kind != kind {
        return Err(Error::Parse(format!("expected a `{kind}` file, found `{}`", h.kind)));
    }
    Ok(())
}

// ---------------------------------------------------------------- data

#[derive(Debug, Serialize, Deserialize)]
struct DataRow {
    replication: usize,
    cell_index: usize,
    process_index: usize,
    value: f64,
}

/// Rows ordered by replication, then process, then cell.
pub fn write_data_csv<W: Write>(w: W, data: &ReplicatedData) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for rep in 0..data.replications() {
        for p in 0..data.n_proc() {
            for c in 0..data.n() {
                out.serialize(DataRow {
                    replication: rep,
                    cell_index: c,
                    process_index: p,
                    value: data.get(rep, c, p),
                })?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the long CSV back. Every (replication, cell, process) triple must
/// appear exactly once; indices must be dense from 0.
pub fn read_data_csv<R: Read>(r: R) -> Result<ReplicatedData> {
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize() {
        let row: DataRow = rec?;
        rows.push(row);
    }
    let dim = |f: fn(&DataRow) -> usize| rows.iter().map(f).max().map_or(0, |m| m + 1);
    let (reps, n, n_proc) = (dim(|r| r.replication), dim(|r| r.cell_index), dim(|r| r.process_index));
    if rows.len() != reps * n * n_proc || rows.is_empty() {
        return Err(Error::Parse(format!("data CSV has {} rows, expected {reps}·{n}·{n_proc}", rows.len())));
    }
    let mut data = ReplicatedData::zeros(reps, n, n_proc);
    let mut seen = vec![false; reps * n * n_proc];
    for row in rows {
        let k = row.replication + reps * (row.cell_index + n * row.process_index);
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::Parse(format!(
                "duplicate row for replication {}, cell {}, process {}",
                row.replication, row.cell_index, row.process_index
            )));
        }
        data.set(row.replication, row.cell_index, row.process_index, row.value);
    }
    Ok(data)
}

/// Binary dump; `params` is stored verbatim in the header.
pub fn write_data_binary<W: Write>(w: W, data: &ReplicatedData, seed: u64, params: serde_json::Value) -> Result<()> {
    let mut fields = serde_json::Map::new();
    fields.insert("n".into(), data.n().into());
    fields.insert("n_proc".into(), data.n_proc().into());
    fields.insert("r".into(), data.replications().into());
    fields.insert("seed".into(), seed.into());
    fields.insert("layout".into(), "replication-fastest".into());
    fields.insert("params".into(), params);
    write_binary(w, &BinaryHeader { kind: "replicated-data".into(), fields }, data.values())
}

pub fn read_data_binary<R: Read>(r: R) -> Result<(ReplicatedData, BinaryHeader)> {
    let (h, values) = read_binary(r)?;
    expect_kind(&h, "replicated-data")?;
    let data = ReplicatedData::new(field_usize(&h, "r")?, field_usize(&h, "n")?, field_usize(&h, "n_proc")?, values)?;
    Ok((data, h))
}

/// Reads replicated data, choosing the format from the extension
/// (`.csv`, otherwise binary).
pub fn read_data_file(path: &Path) -> Result<ReplicatedData> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_data_csv(open(path)?)
    } else {
        Ok(read_data_binary(open(path)?)?.0)
    }
}

// ---------------------------------------------------------------- draws

/// Long CSV `iter, process, parameter, index, value`. `parameter` is `mu`,
/// `sigma2` or `nu`; for `nu`, `index = rep·M_j + l`.
pub fn write_draws_csv<W: Write>(w: W, draws: &PosteriorDraws) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iter", "process", "parameter", "index", "value"])?;
    let r = draws.replications();
    for d in 0..draws.draw_count() {
        for j in 0..draws.n_proc() {
            out.serialize((d, j, "mu", 0, draws.mu(j)[d]))?;
            out.serialize((d, j, "sigma2", 0, draws.sigma2(j)[d]))?;
            let nu = draws.nu_matrix(j);
            let m = nu.nrows();
            for rep in 0..r {
                for l in 0..m {
                    out.serialize((d, j, "nu", rep * m + l, nu[(l, d * r + rep)]))?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Per process: μ draws, σ² draws, then the `M_j × (D·r)` coefficient
/// matrix column-major.
pub fn write_draws_binary<W: Write>(w: W, draws: &PosteriorDraws) -> Result<()> {
    let mut fields = serde_json::Map::new();
    fields.insert("draws".into(), draws.draw_count().into());
    fields.insert("replications".into(), draws.replications().into());
    fields.insert("sizes".into(), serde_json::to_value(draws.sizes())?);
    let mut values = Vec::new();
    for j in 0..draws.n_proc() {
        values.extend_from_slice(draws.mu(j));
        values.extend_from_slice(draws.sigma2(j));
        values.extend_from_slice(draws.nu_matrix(j).as_slice());
    }
    write_binary(w, &BinaryHeader { kind: "posterior-draws".into(), fields }, &values)
}

pub fn read_draws_binary<R: Read>(r: R) -> Result<PosteriorDraws> {
    let (h, values) = read_binary(r)?;
    expect_kind(&h, "posterior-draws")?;
    let d = field_usize(&h, "draws")?;
    let reps = field_usize(&h, "replications")?;
    let sizes: Vec<usize> = serde_json::from_value(h.fields.get("sizes").cloned().unwrap_or_default())?;
    let expected: usize = sizes.iter().map(|m| 2 * d + m * d * reps).sum();
    if values.len() != expected {
        return Err(Error::Parse(format!("draws payload has {} values, expected {expected}", values.len())));
    }
    let (mut mu, mut sigma2, mut nu) = (vec![], vec![], vec![]);
    let mut at = 0;
    for &m in &sizes {
        mu.push(values[at..at + d].to_vec());
        sigma2.push(values[at + d..at + 2 * d].to_vec());
        at += 2 * d;
        nu.push(DMatrix::from_column_slice(m, d * reps, &values[at..at + m * d * reps]));
        at += m * d * reps;
    }
    PosteriorDraws::from_parts(reps, mu, sigma2, nu)
}

// ---------------------------------------------------------------- basis

/// Long CSV `cell_index, basis_index, value`.
pub fn write_basis_csv<W: Write>(w: W, eval: &DMatrix<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["cell_index", "basis_index", "value"])?;
    for k in 0..eval.ncols() {
        for c in 0..eval.nrows() {
            out.serialize((c, k, eval[(c, k)]))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcTransformFile {
    /// Generating basis size.
    pub rows: usize,
    /// OC basis size.
    pub cols: usize,
    pub dropped: usize,
    /// Row-major `Q`.
    pub transform: Vec<Vec<f64>>,
}

impl From<&OcBasis> for OcTransformFile {
    fn from(oc: &OcBasis) -> Self {
        let q = oc.transform();
        OcTransformFile {
            rows: q.nrows(),
            cols: q.ncols(),
            dropped: oc.dropped(),
            transform: q.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

// ---------------------------------------------------------------- eigensystems

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSystemFile {
    pub n: usize,
    pub n_proc: usize,
    pub eigenvalues: Vec<f64>,
    pub provenance: Provenance,
    #[serde(default)]
    pub block_sizes: Vec<usize>,
    /// Row-major mixing vectors `e_k` (columns), when the system came from a
    /// score covariance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<Vec<Vec<f64>>>,
}

impl From<&MultivariateEigenSystem> for EigenSystemFile {
    fn from(s: &MultivariateEigenSystem) -> Self {
        EigenSystemFile {
            n: s.n(),
            n_proc: s.n_proc(),
            eigenvalues: s.eigenvalues().to_vec(),
            provenance: s.provenance(),
            block_sizes: s.block_sizes().to_vec(),
            mixing: s.mixing().map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect()),
        }
    }
}

/// Long CSV `cell, process, k, value`.
pub fn write_eigenfunctions_csv<W: Write>(w: W, sys: &MultivariateEigenSystem) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["cell", "process", "k", "value"])?;
    for k in 0..sys.len() {
        for j in 0..sys.n_proc() {
            let psi = sys.eigenfunctions(j);
            for c in 0..sys.n() {
                out.serialize((c, j, k, psi[(c, k)]))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Rebuilds an eigensystem from its JSON description and eigenfunction
/// CSV. Mixing vectors are not restored.
pub fn read_eigensystem<R: Read>(meta: &EigenSystemFile, csv_in: R) -> Result<MultivariateEigenSystem> {
    let m = meta.eigenvalues.len();
    let mut blocks = vec![DMatrix::from_element(meta.n, m, f64::NAN); meta.n_proc];
    for rec in csv::Reader::from_reader(csv_in).deserialize() {
        let (c, j, k, v): (usize, usize, usize, f64) = rec?;
        if c >= meta.n || j >= meta.n_proc || k >= m {
            return Err(Error::Parse(format!("eigenfunction entry ({c}, {j}, {k}) out of range")));
        }
        blocks[j][(c, k)] = v;
    }
    if blocks.iter().any(|b| b.iter().any(|v| v.is_nan())) {
        return Err(Error::Parse("eigenfunction CSV is incomplete".into()));
    }
    MultivariateEigenSystem::from_parts(meta.eigenvalues.clone(), blocks, meta.provenance)
}

// ---------------------------------------------------------------- partitions, reports, traces

/// CSV `cell_index, label`.
pub fn write_labels_csv<W: Write>(w: W, part: &Partition) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["cell_index", "label"])?;
    for (c, l) in part.labels().iter().enumerate() {
        out.serialize((c, l))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_labels_csv<R: Read>(r: R, grid: &SpatialGrid) -> Result<Partition> {
    let mut labels = vec![usize::MAX; grid.len()];
    for rec in csv::Reader::from_reader(r).deserialize() {
        let (c, l): (usize, usize) = rec?;
        if c >= grid.len() {
            return Err(Error::Parse(format!("cell {c} is outside the grid")));
        }
        labels[c] = l;
    }
    if labels.contains(&usize::MAX) {
        return Err(Error::Parse("labels CSV does not cover every cell".into()));
    }
    Partition::relabeled(&labels, grid)
}

/// Reads a partition from labels CSV, partition JSON or GeoJSON, by
/// extension.
pub fn read_partition_file(path: &Path, grid: &SpatialGrid) -> Result<Partition> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "csv" => read_labels_csv(open(path)?, grid),
        "geojson" => geojson::read_partition(open(path)?, grid),
        _ => {
            let f: crate::geometry::PartitionFile = serde_json::from_reader(open(path)?)?;
            Partition::relabeled(&f.labels, grid)
        }
    }
}

/// CSV `unit, process, value`: per-process contributions, then the unit
/// sum under process `total`.
pub fn write_cage_csv<W: Write>(w: W, report: &CageReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["unit", "process", "value"])?;
    for u in 0..report.unit_count() {
        for j in 0..report.per_process.ncols() {
            out.serialize((u, j.to_string(), report.per_process[(u, j)]))?;
        }
        out.serialize((u, "total", report.per_unit[u]))?;
    }
    out.flush()?;
    Ok(())
}

/// CSV `j, units, mc`.
pub fn write_trace_csv<W: Write>(w: W, trace: &[TraceEntry]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["j", "units", "mc"])?;
    for t in trace {
        out.serialize((t.j, t.units, t.total))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<W: Write, T: Serialize>(mut w: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, BBox};

    fn sample() -> ReplicatedData {
        let vals: Vec<f64> = (0..3 * 4 * 2).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        ReplicatedData::new(3, 4, 2, vals).unwrap()
    }

    #[test]
    fn data_csv_round_trip_is_exact() {
        let mut buf = Vec::new();
        write_data_csv(&mut buf, &sample()).unwrap();
        assert_eq!(read_data_csv(&buf[..]).unwrap(), sample());
    }

    #[test]
    fn data_csv_rejects_duplicates() {
        let text = "replication,cell_index,process_index,value\n0,0,0,1\n0,0,0,2\n";
        assert!(matches!(read_data_csv(text.as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn data_binary_round_trip() {
        let mut buf = Vec::new();
        write_data_binary(&mut buf, &sample(), 9, serde_json::json!({"rho": 0.5})).unwrap();
        let (back, h) = read_data_binary(&buf[..]).unwrap();
        assert_eq!(back, sample());
        assert_eq!(h.fields["seed"], 9);
        assert!(read_draws_binary(&buf[..]).is_err());
    }

    #[test]
    fn truncated_binary_is_parse_error() {
        let mut buf = Vec::new();
        write_data_binary(&mut buf, &sample(), 0, serde_json::Value::Null).unwrap();
        buf.pop();
        assert!(matches!(read_data_binary(&buf[..]), Err(Error::Parse(_))));
    }

    #[test]
    fn draws_binary_round_trip() {
        let nu =
            vec![DMatrix::from_fn(3, 4, |i, j| (i + 10 * j) as f64), DMatrix::from_fn(2, 4, |i, j| (i * j) as f64)];
        let d = PosteriorDraws::from_parts(2, vec![vec![0.1, 0.2]; 2], vec![vec![1.0, 2.0]; 2], nu).unwrap();
        let mut buf = Vec::new();
        write_draws_binary(&mut buf, &d).unwrap();
        assert_eq!(read_draws_binary(&buf[..]).unwrap(), d);
    }

    #[test]
    fn labels_round_trip() {
        let g = build_grid(&BBox::unit_interval(), &[6]).unwrap();
        let p = Partition::index_blocks(&g, 3).unwrap();
        let mut buf = Vec::new();
        write_labels_csv(&mut buf, &p).unwrap();
        assert_eq!(read_labels_csv(&buf[..], &g).unwrap(), p);
    }
}
