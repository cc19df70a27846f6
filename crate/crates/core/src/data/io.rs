//! Point-cloud files.
//!
//! * XYZ: ASCII, one `x y z` line per point, `#` starts a comment.
//! * PCB: `"PCB1"`, u32 point count, then `count * 3` f32 values, all
//!   little-endian.
//! * labels: `id<TAB>label` lines.

use crate::bytes::{put_f32s, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointSet};
use std::fmt::Write as _;
use std::path::Path;

pub const PCB_MAGIC: &[u8; 4] = b"PCB1";

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_xyz(text: &str) -> Result<PointSet> {
    let mut pts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "line {}: expected 3 coordinates, found {}",
                n + 1,
                fields.len()
            )));
        }
        let mut p = [0f32; 3];
        for (slot, tok) in p.iter_mut().zip(&fields) {
            let v: f32 = tok
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: not a number: {tok:?}", n + 1)))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("line {}: non-finite coordinate {tok}", n + 1)));
            }
            *slot = v;
        }
        pts.push(p);
    }
    if pts.is_empty() {
        return Err(Error::Parse("no points in XYZ input".into()));
    }
    PointSet::new(pts)
}

/// Nine significant digits, enough to recover every `f32` exactly.
pub fn format_xyz(points: &[Point]) -> String {
    let mut s = String::with_capacity(points.len() * 48);
    for p in points {
        let _ = writeln!(s, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
    }
    s
}

pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointSet> {
    let path = path.as_ref();
    parse_xyz(&read_text(path)?).map_err(|e| prefix(path, e))
}

pub fn save_xyz(path: impl AsRef<Path>, points: &[Point]) -> Result<()> {
    write_atomic(path.as_ref(), format_xyz(points).as_bytes())
}

pub fn encode_pcb(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + points.len() * 12);
    out.extend_from_slice(PCB_MAGIC);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    put_f32s(&mut out, points.as_flattened());
    out
}

pub fn decode_pcb(bytes: &[u8]) -> Result<PointSet> {
    let mut r = ByteReader::new(bytes);
    if r.take(4).ok() != Some(PCB_MAGIC.as_slice()) {
        return Err(Error::Parse("bad magic at byte offset 0".into()));
    }
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::Parse("point count is 0 at byte offset 4".into()));
    }
    let start = r.pos();
    let data = r.f32s(count * 3)?;
    if r.remaining() != 0 {
        return Err(Error::Parse(format!(
            "{} trailing bytes at byte offset {}",
            r.remaining(),
            r.pos()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Parse(format!(
            "non-finite coordinate at byte offset {}",
            start + 4 * i
        )));
    }
    PointSet::new(data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

pub fn load_pcb(path: impl AsRef<Path>) -> Result<PointSet> {
    let path = path.as_ref();
    decode_pcb(&read(path)?).map_err(|e| prefix(path, e))
}

pub fn save_pcb(path: impl AsRef<Path>, points: &[Point]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pcb(points))
}

pub fn parse_labels(text: &str) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse(format!("line {}: expected id<TAB>label", n + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad label {label:?}", n + 1)))?;
        out.push((id.to_string(), label));
    }
    Ok(out)
}

pub fn format_labels(rows: &[(String, usize)]) -> String {
    rows.iter().map(|(id, l)| format!("{id}\t{l}\n")).collect()
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<(String, usize)>> {
    let path = path.as_ref();
    parse_labels(&read_text(path)?).map_err(|e| prefix(path, e))
}

pub fn save_labels(path: impl AsRef<Path>, rows: &[(String, usize)]) -> Result<()> {
    write_atomic(path.as_ref(), format_labels(rows).as_bytes())
}

/// Loads `.pcb` or `.xyz` by extension.
pub fn load_points(path: impl AsRef<Path>) -> Result<PointSet> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("pcb") => load_pcb(path),
        Some("xyz") => load_xyz(path),
        _ => Err(Error::Parse(format!("{}: unknown point file extension", path.display()))),
    }
}

fn prefix(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    }
}
