use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Label value for points that belong to no class.
pub const UNLABELED: i32 = -1;

const MAGIC: &[u8; 4] = b"EPC1";

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<[f64; 3]>,
    /// Colours in `[0, 1]`.
    pub rgb: Vec<[f64; 3]>,
    pub labels: Vec<i32>,
    pub class_names: BTreeMap<u16, String>,
}

impl PointCloud {
    pub fn new(
        xyz: Vec<[f64; 3]>,
        rgb: Vec<[f64; 3]>,
        labels: Vec<i32>,
        class_names: BTreeMap<u16, String>,
    ) -> Result<Self> {
        let c = Self {
            xyz,
            rgb,
            labels,
            class_names,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.xyz.len();
        if m == 0 {
            return Err(Error::InvalidArgument("point cloud has no points".into()));
        }
        if self.rgb.len() != m || self.labels.len() != m {
            return Err(Error::InvalidArgument(format!(
                "point cloud field lengths differ: xyz {m}, rgb {}, labels {}",
                self.rgb.len(),
                self.labels.len()
            )));
        }
        if self.xyz.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        for &l in &self.labels {
            if l != UNLABELED && !self.knows(l) {
                return Err(Error::InvalidArgument(format!("label {l} not in class table")));
            }
        }
        Ok(())
    }

    fn knows(&self, label: i32) -> bool {
        u16::try_from(label).is_ok_and(|id| self.class_names.contains_key(&id))
    }

    pub fn count_label(&self, label: i32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Rows `idx` (with repetition allowed), sharing the class table.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            xyz: idx.iter().map(|&i| self.xyz[i]).collect(),
            rgb: idx.iter().map(|&i| self.rgb[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Per-point input channels `[x, y, z, r, g, b]`, row-major `M×6`.
    pub fn channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 6);
        for (p, c) in self.xyz.iter().zip(&self.rgb) {
            out.extend_from_slice(p);
            out.extend_from_slice(c);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut buf = Vec::with_capacity(12 + self.len() * 28);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.class_names.len() as u32).to_le_bytes());
        for (id, name) in &self.class_names {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("class name too long: {name}")))?;
            buf.extend_from_slice(&id.to_le_bytes());
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
        for i in 0..self.len() {
            for v in self.xyz[i].iter().chain(&self.rgb[i]) {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            buf.extend_from_slice(&self.labels[i].to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "EPC");
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.err(0, format!("bad magic {magic:?}")));
        }
        let m_off = r.pos;
        let m = r.u32()? as usize;
        if m == 0 {
            return Err(r.err(m_off, "point count is zero".into()));
        }
        let c = r.u32()? as usize;
        let mut class_names = BTreeMap::new();
        for _ in 0..c {
            let id = r.u16()?;
            let len = r.u16()? as usize;
            let off = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| r.err(off, format!("class name is not utf-8: {e}")))?;
            class_names.insert(id, name.to_owned());
        }
        let mut xyz = Vec::with_capacity(m);
        let mut rgb = Vec::with_capacity(m);
        let mut labels = Vec::with_capacity(m);
        for _ in 0..m {
            xyz.push([r.f32()?, r.f32()?, r.f32()?]);
            rgb.push([r.f32()?, r.f32()?, r.f32()?]);
            let off = r.pos;
            let label = r.i32()?;
            let known = u16::try_from(label).is_ok_and(|id| class_names.contains_key(&id));
            if label != UNLABELED && !known {
                return Err(r.err(off, format!("label {label} not in class table")));
            }
            labels.push(label);
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after last record".into()));
        }
        Ok(Self {
            xyz,
            rgb,
            labels,
            class_names,
        })
    }
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let bytes = cloud.to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    PointCloud::from_bytes(&bytes)
}

/// Little-endian cursor over a binary file image.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        Self { bytes, pos: 0, kind }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn err(&self, offset: usize, msg: String) -> Error {
        Error::Format {
            kind: self.kind,
            offset,
            msg,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(self.pos, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
