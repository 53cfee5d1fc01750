//! File formats.
//!
//! Binary tensor (`.wft`), all integers and floats little-endian:
//!
//! ```text
//! b"WFT1" | rank: u32 | dims: rank × u64 | payload: prod(dims) × f64
//! ```
//!
//! Dims are listed slowest-varying first, so the payload is row-major over
//! `dims`. A [`FieldTensor`] is stored with `dims = [n_z, n_x, n_t]`, which is
//! exactly the field layout (t fastest, then x, then z). Grid spacings are not
//! part of the format; they travel in the run's parameter JSON.
//!
//! Mask CSV: header `ix,iz,observed` followed by one row per grid point with
//! `observed ∈ {0, 1}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, WflabError};
use crate::model::{FieldTensor, GridSpec, ObservationMask};

pub const TENSOR_MAGIC: &[u8; 4] = b"WFT1";

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let n: u64 = dims.iter().product();
        if n as usize != data.len() {
            return Err(WflabError::shape(format!(
                "dims {:?} imply {} values, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(RawTensor { dims, data })
    }

    pub fn from_field(field: &FieldTensor) -> Self {
        let g = field.grid();
        RawTensor {
            dims: vec![g.n_z as u64, g.n_x as u64, g.n_t as u64],
            data: field.values().to_vec(),
        }
    }

    /// Interpret a rank-3 tensor as a field; spacings come from the caller.
    pub fn into_field(self, dx: f64, dz: f64, dt: f64) -> Result<FieldTensor> {
        if self.dims.len() != 3 {
            return Err(WflabError::shape(format!(
                "field tensors have rank 3, got rank {}",
                self.dims.len()
            )));
        }
        let grid = GridSpec::new(
            self.dims[1] as usize,
            self.dims[0] as usize,
            self.dims[2] as usize,
            dx,
            dz,
            dt,
        )?;
        FieldTensor::from_vec(grid, self.data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: &str| WflabError::Format {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
            return Err(bad("missing WFT1 magic"));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let dims: Vec<u64> = (0..rank)
            .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()))
            .collect();
        let n = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dimension product overflows"))? as usize;
        if bytes.len() != header + 8 * n {
            return Err(bad(&format!(
                "payload holds {} bytes, dims {:?} need {}",
                bytes.len() - header,
                dims,
                8 * n
            )));
        }
        let data = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(RawTensor { dims, data })
    }
}

pub fn write_tensor(path: &Path, tensor: &RawTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&tensor.encode())?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| WflabError::from(e).with_context(format!("opening {}", path.display())))?
        .read_to_end(&mut bytes)?;
    RawTensor::decode(&bytes, &path.display().to_string())
}

pub fn write_field(path: &Path, field: &FieldTensor) -> Result<()> {
    write_tensor(path, &RawTensor::from_field(field))
}

pub fn read_field(path: &Path, dx: f64, dz: f64, dt: f64) -> Result<FieldTensor> {
    read_tensor(path)?.into_field(dx, dz, dt)
}

pub fn mask_to_csv(mask: &ObservationMask) -> String {
    let g = mask.grid();
    let mut s = String::from("ix,iz,observed\n");
    for iz in 0..g.n_z {
        for ix in 0..g.n_x {
            let o = mask.is_point_observed(ix, iz) as u8;
            s.push_str(&format!("{ix},{iz},{o}\n"));
        }
    }
    s
}

pub fn write_mask(path: &Path, mask: &ObservationMask) -> Result<()> {
    std::fs::write(path, mask_to_csv(mask))?;
    Ok(())
}

/// Parse a whole-history mask CSV for `grid`. Points absent from the file
/// are treated as missing.
pub fn parse_mask(text: &str, grid: GridSpec, origin: &str) -> Result<ObservationMask> {
    let bad = |line: usize, reason: String| WflabError::Format {
        path: origin.to_string(),
        reason: format!("line {line}: {reason}"),
    };
    let mut observed = vec![false; grid.n_points()];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("ix") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(n + 1, format!("expected 3 fields, got {}", fields.len())));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| bad(n + 1, format!("{s:?}: {e}")))
        };
        let (ix, iz, o) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        if ix >= grid.n_x || iz >= grid.n_z {
            return Err(bad(n + 1, format!("point ({ix}, {iz}) outside grid")));
        }
        if o > 1 {
            return Err(bad(n + 1, format!("observed flag must be 0 or 1, got {o}")));
        }
        observed[grid.point_index(ix, iz)] = o == 1;
    }
    ObservationMask::whole_history(grid, observed)
}

pub fn read_mask(path: &Path, grid: GridSpec) -> Result<ObservationMask> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| WflabError::from(e).with_context(format!("reading {}", path.display())))?;
    parse_mask(&text, grid, &path.display().to_string())
}

/// CSV writer whose first line is a `#` comment carrying provenance (config
/// hash, units), followed by a column header row.
pub struct CsvTable {
    buf: String,
}

impl CsvTable {
    pub fn new(meta: &str, columns: &[&str]) -> Self {
        let mut buf = String::new();
        buf.push_str("# ");
        buf.push_str(meta);
        buf.push('\n');
        buf.push_str(&columns.join(","));
        buf.push('\n');
        CsvTable { buf }
    }

    /// Append a row. Floats use the shortest representation that parses back
    /// to the same bits.
    pub fn row(&mut self, cells: &[Cell]) {
        let parts: Vec<String> = cells.iter().map(Cell::render).collect();
        self.buf.push_str(&parts.join(","));
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.buf)?;
        Ok(())
    }
}

pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(f) => f.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Read a numeric CSV: optional `#` comment lines, one header row, then rows
/// of floats. Returns the header and rows.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = File::open(path)
        .map_err(|e| WflabError::from(e).with_context(format!("opening {}", path.display())))?;
    let origin = path.display().to_string();
    let mut header = None;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if header.is_none() {
            header = Some(line.split(',').map(|s| s.trim().to_string()).collect());
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| WflabError::Format {
                    path: origin.clone(),
                    reason: format!("line {}: {s:?}: {e}", n + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let header = header.ok_or_else(|| WflabError::Format {
        path: origin,
        reason: "empty file".into(),
    })?;
    Ok((header, rows))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
