//! On-disk formats: the ab bin table (text), field parameters (binary) and
//! checkpoints, which pair a field file with its table and a small JSON
//! metadata sidecar.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chromafield_core::color::ColorError;
use chromafield_core::field::FieldError;
use chromafield_core::{AbBinTable, Aabb, FieldParams, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FIELD_MAGIC: &[u8; 4] = b"CNRF";
pub const FIELD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Table { path: PathBuf, source: ColorError },
    #[error("{path}: {source}")]
    Field { path: PathBuf, source: FieldError },
    #[error("checkpoint table has {table} bins but the field stores {field}")]
    TableMismatch { table: usize, field: usize },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

fn malformed(path: &Path, msg: impl Into<String>) -> FormatError {
    FormatError::Malformed { path: path.to_path_buf(), msg: msg.into() }
}

/// Header line `grid_step count`, then one `a b` pair per line.
pub fn write_table(table: &AbBinTable, w: &mut impl Write) -> io::Result<()> {
    writeln!(w, "{} {}", table.grid_step(), table.len())?;
    for c in table.centers() {
        writeln!(w, "{} {}", c[0], c[1])?;
    }
    Ok(())
}

pub fn read_table(r: impl Read, path: &Path) -> Result<AbBinTable, FormatError> {
    let mut lines = BufReader::new(r).lines();
    let mut next = || -> Result<Option<Vec<f64>>, FormatError> {
        for line in lines.by_ref() {
            let line = line.map_err(io_err(path))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            return line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| malformed(path, format!("bad number {t:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()
                .map(Some);
        }
        Ok(None)
    };
    let header = next()?.ok_or_else(|| malformed(path, "missing header"))?;
    let [step, count] = header[..] else {
        return Err(malformed(path, "header must be `grid_step count`"));
    };
    if count < 0.0 || count.fract() != 0.0 {
        return Err(malformed(path, "count must be a non-negative integer"));
    }
    let mut centers = Vec::with_capacity(count as usize);
    while let Some(row) = next()? {
        let [a, b] = row[..] else {
            return Err(malformed(path, "each center line must hold `a b`"));
        };
        centers.push([a, b]);
    }
    if centers.len() != count as usize {
        return Err(malformed(path, format!("header says {count} centers, found {}", centers.len())));
    }
    AbBinTable::from_centers(step, centers).map_err(|source| FormatError::Table { path: path.to_path_buf(), source })
}

pub fn save_table(table: &AbBinTable, path: &Path) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_table(table, &mut buf).expect("writing to memory");
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_table(path: &Path) -> Result<AbBinTable, FormatError> {
    read_table(fs::File::open(path).map_err(io_err(path))?, path)
}

/// Field parameters as `CNRF`, version, bbox (6 × f64), resolution (3 × u32),
/// Q (u32), then density, luminance and logits as f32, all little-endian.
/// Scalar grids are x-fastest; logits hold Q values per node in the same order.
pub fn encode_field(field: &FieldParams) -> Vec<u8> {
    let n = field.voxel_count();
    let mut out = Vec::with_capacity(60 + 4 * n * (2 + field.q()));
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    for v in field.bbox.min.to_array().into_iter().chain(field.bbox.max.to_array()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in field.resolution {
        out.extend_from_slice(&(r as u32).to_le_bytes());
    }
    out.extend_from_slice(&(field.q() as u32).to_le_bytes());
    for v in field.density.iter().chain(&field.luminance).chain(&field.logits) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() < n {
            return Err(malformed(self.path, "truncated field file"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| malformed(self.path, "grid too large"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

/// Inverse of [`encode_field`]; `table` must have the stored Q.
pub fn decode_field(bytes: &[u8], table: Arc<AbBinTable>, path: &Path) -> Result<FieldParams, FormatError> {
    let mut c = Cursor { bytes, path };
    if c.take(4)? != FIELD_MAGIC {
        return Err(malformed(path, "not a field file (bad magic)"));
    }
    let version = c.u32()?;
    if version != FIELD_VERSION {
        return Err(malformed(path, format!("unsupported field version {version}")));
    }
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = c.f64()?;
    }
    let res = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let q = c.u32()? as usize;
    if q != table.len() {
        return Err(FormatError::TableMismatch { table: table.len(), field: q });
    }
    let n = res.iter().try_fold(1usize, |acc, &r| acc.checked_mul(r)).ok_or_else(|| malformed(path, "grid too large"))?;
    let density = c.f32s(n)?;
    let luminance = c.f32s(n)?;
    let logits = c.f32s(n.checked_mul(q).ok_or_else(|| malformed(path, "grid too large"))?)?;
    if !c.bytes.is_empty() {
        return Err(malformed(path, "trailing bytes after grids"));
    }
    let field_err = |source| FormatError::Field { path: path.to_path_buf(), source };
    let bbox = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5])).map_err(field_err)?;
    FieldParams::from_grids(bbox, res, table, density, luminance, logits).map_err(field_err)
}

/// Training stage a checkpoint was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStage {
    Init,
    Luminance,
    Color,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: CheckpointStage,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    pub seed: u64,
}

/// Sidecar paths of a checkpoint at `path` (e.g. `field.cnrf`).
pub fn table_path(path: &Path) -> PathBuf {
    path.with_extension("table.txt")
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn save_checkpoint(field: &FieldParams, meta: &CheckpointMeta, path: &Path) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, encode_field(field)).map_err(io_err(path))?;
    save_table(field.table(), &table_path(path))?;
    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(meta).expect("metadata serializes");
    fs::write(&mp, json + "\n").map_err(io_err(&mp))
}

pub fn load_checkpoint(path: &Path) -> Result<(FieldParams, CheckpointMeta), FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let table = Arc::new(load_table(&table_path(path))?);
    let field = decode_field(&bytes, table, path)?;
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let meta = serde_json::from_str(&text).map_err(|e| malformed(&mp, e.to_string()))?;
    Ok((field, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chromafield_core::color::{build_ab_bin_table, default_table};
    use chromafield_core::field::FieldInit;

    #[test]
    fn table_round_trip() {
        let t = default_table();
        let mut buf = Vec::new();
        write_table(&t, &mut buf).unwrap();
        let back = read_table(&buf[..], Path::new("t")).unwrap();
        assert_eq!(back, t);
        let small = build_ab_bin_table(10.0, 0.0, &[50.0]).unwrap();
        let mut buf = Vec::new();
        write_table(&small, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "10 1\n0 0\n");
    }

    #[test]
    fn table_rejects_bad_input() {
        for text in ["", "10\n", "10 2\n0 0\n", "10 1\n0 x\n", "10 2\n10 0\n0 0\n"] {
            assert!(read_table(text.as_bytes(), Path::new("t")).is_err(), "{text:?}");
        }
    }

    #[test]
    fn field_round_trip_is_exact_for_f32_values() {
        let table = Arc::new(build_ab_bin_table(10.0, 10.0, &[50.0]).unwrap());
        let mut f = FieldParams::new(Aabb::cube(1.5), [2, 3, 4], table.clone(), FieldInit::default()).unwrap();
        for (i, v) in f.logits.iter_mut().enumerate() {
            *v = (i as f32 * 0.25 - 3.0) as f64;
        }
        f.density = f.density.iter().map(|&v| v as f32 as f64).collect();
        f.luminance = f.luminance.iter().map(|&v| v as f32 as f64).collect();
        let bytes = encode_field(&f);
        assert_eq!(&bytes[..4], b"CNRF");
        assert_eq!(bytes.len(), 4 + 4 + 48 + 12 + 4 + 4 * 24 * (2 + table.len()));
        let back = decode_field(&bytes, table.clone(), Path::new("f")).unwrap();
        assert_eq!(back, f);
        assert!(decode_field(&bytes[..bytes.len() - 1], table.clone(), Path::new("f")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_field(&bad, table, Path::new("f")).is_err());
        let other = Arc::new(build_ab_bin_table(10.0, 0.0, &[50.0]).unwrap());
        assert!(matches!(decode_field(&bytes, other, Path::new("f")), Err(FormatError::TableMismatch { .. })));
    }
}
