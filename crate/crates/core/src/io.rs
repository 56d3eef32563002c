//! On-disk formats shared across the pipeline: KITTI-style scans, poses and
//! labels, packed selection masks, run manifests, plus the little-endian
//! reader used by every binary codec in the crate.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{GeometryError, Point3, PointCloud, RigidTransform};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed data at byte offset {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl FormatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.into(),
            source,
        }
    }

    fn malformed(offset: usize, message: impl Into<String>) -> Self {
        FormatError::Malformed {
            offset,
            message: message.into(),
        }
    }
}

/// Cursor over a little-endian byte buffer that reports byte offsets on error.
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::malformed(
                self.pos,
                format!("expected {n} more bytes, found {}", self.remaining()),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let at = self.pos;
        let got = self.take(4)?;
        if got != expected {
            return Err(FormatError::malformed(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.remaining() != 0 {
            return Err(FormatError::malformed(
                self.pos,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }

    /// Error located at the current offset.
    pub fn error(&self, message: impl Into<String>) -> FormatError {
        FormatError::malformed(self.pos, message)
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|e| FormatError::io(path, e))
}

/// Writes through a sibling temporary file and renames it into place, so a
/// crash never leaves a partially written file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(FormatError::io(path, e));
    }
    Ok(())
}

/// KITTI velodyne scan: records of four little-endian f32 (x, y, z, intensity).
pub fn decode_scan(bytes: &[u8], frame_id: u32) -> Result<PointCloud, FormatError> {
    if !bytes.len().is_multiple_of(16) {
        return Err(FormatError::malformed(
            bytes.len() - bytes.len() % 16,
            "scan length is not a multiple of 16 bytes",
        ));
    }
    let mut r = ByteReader::new(bytes);
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let x = r.f32()? as f64;
        let y = r.f32()? as f64;
        let z = r.f32()? as f64;
        let i = r.f32()? as f64;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(FormatError::malformed(at, "non-finite coordinate"));
        }
        points.push(Point3::new(x, y, z));
        intensity.push(i);
    }
    Ok(PointCloud::new(points, Some(intensity), frame_id)?)
}

pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points().iter().enumerate() {
        let inten = cloud.intensity().map_or(0.0, |v| v[i]);
        for v in [p.x, p.y, p.z, inten] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_scan(path: &Path, frame_id: u32) -> Result<PointCloud, FormatError> {
    decode_scan(&read_file(path)?, frame_id)
}

pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<(), FormatError> {
    write_atomic(path, &encode_scan(cloud))
}

/// One pose per line: 12 whitespace-separated values of a row-major 3x4 matrix.
pub fn parse_poses(text: &str) -> Result<Vec<RigidTransform>, FormatError> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_err = |message: String| FormatError::Line {
            line: n + 1,
            message,
        };
        let values = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| line_err(format!("{t:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let arr: [f64; 12] = values
            .try_into()
            .map_err(|v: Vec<f64>| line_err(format!("expected 12 values, found {}", v.len())))?;
        poses.push(RigidTransform::from_row_major_3x4(&arr).map_err(|e| line_err(e.to_string()))?);
    }
    Ok(poses)
}

pub fn format_poses(poses: &[RigidTransform]) -> String {
    let mut s = String::new();
    for p in poses {
        let row: Vec<String> = p
            .to_row_major_3x4()
            .iter()
            .map(|v| format!("{v:e}"))
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_poses(&text)
}

/// KITTI label file: one u32 per point, semantic class in the lower 16 bits.
pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u32>, FormatError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(FormatError::malformed(
            bytes.len() - bytes.len() % 4,
            "label file length is not a multiple of 4",
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) & 0xFFFF)
        .collect())
}

pub fn encode_labels(labels: &[u32]) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| (l & 0xFFFF).to_le_bytes())
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>, FormatError> {
    decode_labels(&read_file(path)?)
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<(), FormatError> {
    write_atomic(path, &encode_labels(labels))
}

/// Packed bitset: u32 count, then `ceil(count / 8)` bytes, least significant
/// bit first.
pub fn encode_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + mask.len().div_ceil(8));
    out.extend_from_slice(&(mask.len() as u32).to_le_bytes());
    for chunk in mask.chunks(8) {
        let mut byte = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            byte |= (b as u8) << i;
        }
        out.push(byte);
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<Vec<bool>, FormatError> {
    let mut r = ByteReader::new(bytes);
    let n = r.u32()? as usize;
    let packed = r.take(n.div_ceil(8))?;
    r.finish()?;
    Ok((0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect())
}

/// Ordered `key = value` record describing a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn extend(&mut self, other: &Manifest) {
        for (k, v) in &other.entries {
            self.set(k.clone(), v);
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut m = Manifest::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| FormatError::Line {
                line: n + 1,
                message: "expected `key = value`".into(),
            })?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        write_atomic(path, self.render().as_bytes())
    }
}

/// FNV-1a over a byte slice; used to fingerprint inputs in run manifests.
pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
