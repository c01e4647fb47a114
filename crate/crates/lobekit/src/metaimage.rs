//! MetaImage (.mhd + .raw) reader and writer.
//!
//! Supports the uncompressed subset used by this toolkit: text headers with
//! `key = value` lines, NDims = 3, element types MET_SHORT / MET_UCHAR /
//! MET_FLOAT, little-endian raw data with x varying fastest. Header DimSize,
//! ElementSpacing and Offset follow the MetaImage x-y-z order; in-memory
//! containers use (z, y, x).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::{validate_labels, Dims, ElementType, LabelMask, Volume};

/// Either container a `.mhd` file can hold, decided by its element type:
/// MET_UCHAR loads as labels, MET_SHORT and MET_FLOAT as scalar volumes.
#[derive(Debug, Clone, PartialEq)]
pub enum MetaImage {
    Volume(Volume),
    Labels(LabelMask),
}

impl MetaImage {
    pub fn into_volume(self) -> Result<Volume> {
        match self {
            MetaImage::Volume(v) => Ok(v),
            MetaImage::Labels(_) => Err(Error::ShapeMismatch(
                "expected a scalar volume, file holds labels (MET_UCHAR)".into(),
            )),
        }
    }

    pub fn into_labels(self) -> Result<LabelMask> {
        match self {
            MetaImage::Labels(m) => Ok(m),
            MetaImage::Volume(_) => Err(Error::ShapeMismatch(
                "expected labels (MET_UCHAR), file holds a scalar volume".into(),
            )),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        match self {
            MetaImage::Volume(v) => write_volume(v, path),
            MetaImage::Labels(m) => write_labels(m, path),
        }
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Header {
    dims: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    element_type: ElementType,
    data_file: PathBuf,
}

fn parse_triplet(path: &Path, key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(malformed(path, format!("{key} must have 3 components")));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .parse::<f64>()
            .map_err(|_| malformed(path, format!("{key}: cannot parse `{part}`")))?;
    }
    Ok(out)
}

fn parse_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path)?;
    let mut ndims = None;
    let mut dim_size = None;
    let mut spacing = None;
    let mut offset = [0.0; 3];
    let mut element_type = None;
    let mut data_file = None;

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(malformed(path, format!("line without `=`: `{line}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => {
                ndims = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| malformed(path, "NDims not an integer"))?,
                );
            }
            "DimSize" => {
                let t = parse_triplet(path, key, value)?;
                if t.iter().any(|d| *d <= 0.0 || d.fract() != 0.0) {
                    return Err(malformed(path, "DimSize must be positive integers"));
                }
                // header order is x y z
                dim_size = Some([t[2] as usize, t[1] as usize, t[0] as usize]);
            }
            "ElementSpacing" => {
                let t = parse_triplet(path, key, value)?;
                spacing = Some([t[2], t[1], t[0]]);
            }
            "Offset" | "Position" | "Origin" => {
                let t = parse_triplet(path, key, value)?;
                offset = [t[2], t[1], t[0]];
            }
            "ElementType" => {
                element_type = Some(match value {
                    "MET_SHORT" => ElementType::Short,
                    "MET_UCHAR" => ElementType::Uchar,
                    "MET_FLOAT" => ElementType::Float,
                    other => return Err(Error::UnsupportedElementType(other.to_string())),
                });
            }
            "ElementDataFile" => {
                if value == "LOCAL" || value == "LIST" {
                    return Err(malformed(path, format!("ElementDataFile {value} unsupported")));
                }
                data_file = Some(value.to_string());
            }
            "CompressedData" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(malformed(path, "CompressedData is unsupported"));
                }
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB"
                if value.eq_ignore_ascii_case("true") => {
                    return Err(malformed(path, "big-endian data is unsupported"));
                }
            // ObjectType, BinaryData, TransformMatrix, ... pass through
            _ => {}
        }
    }

    let ndims = ndims.ok_or_else(|| malformed(path, "missing NDims"))?;
    if ndims != 3 {
        return Err(malformed(path, format!("NDims must be 3, got {ndims}")));
    }
    let dims = dim_size.ok_or_else(|| malformed(path, "missing DimSize"))?;
    let spacing = spacing.ok_or_else(|| malformed(path, "missing ElementSpacing"))?;
    let element_type = element_type.ok_or_else(|| malformed(path, "missing ElementType"))?;
    let data_file = data_file.ok_or_else(|| malformed(path, "missing ElementDataFile"))?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(Header {
        dims,
        spacing,
        origin: offset,
        element_type,
        data_file: dir.join(data_file),
    })
}

/// Read a `.mhd`/`.raw` pair. The element type decides the container kind.
pub fn read_metaimage(path: impl AsRef<Path>) -> Result<MetaImage> {
    let path = path.as_ref();
    let h = parse_header(path)?;
    let raw = fs::read(&h.data_file)?;
    let numel = h.dims[0] * h.dims[1] * h.dims[2];
    let expected = (numel * h.element_type.size_bytes()) as u64;
    if raw.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: raw.len() as u64,
        });
    }

    match h.element_type {
        ElementType::Uchar => {
            validate_labels(&raw)?;
            Ok(MetaImage::Labels(LabelMask {
                dims: h.dims,
                spacing: h.spacing,
                origin: h.origin,
                data: raw,
            }))
        }
        ElementType::Short => {
            let mut data = vec![0f32; numel];
            for (v, b) in data.iter_mut().zip(raw.chunks_exact(2)) {
                *v = LittleEndian::read_i16(b) as f32;
            }
            Ok(MetaImage::Volume(Volume {
                dims: h.dims,
                spacing: h.spacing,
                origin: h.origin,
                element_type: ElementType::Short,
                data,
            }))
        }
        ElementType::Float => {
            let mut data = vec![0f32; numel];
            LittleEndian::read_f32_into(&raw, &mut data);
            Ok(MetaImage::Volume(Volume {
                dims: h.dims,
                spacing: h.spacing,
                origin: h.origin,
                element_type: ElementType::Float,
                data,
            }))
        }
    }
}

fn raw_path_for(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn write_header(
    path: &Path,
    dims: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    element_type: ElementType,
) -> Result<PathBuf> {
    let raw_path = raw_path_for(path);
    let raw_name = raw_path
        .file_name()
        .ok_or_else(|| malformed(path, "output path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let mut f = fs::File::create(path)?;
    // header order is x y z; `{}` prints the shortest round-trippable decimal
    writeln!(f, "ObjectType = Image")?;
    writeln!(f, "NDims = 3")?;
    writeln!(f, "BinaryData = True")?;
    writeln!(f, "BinaryDataByteOrderMSB = False")?;
    writeln!(f, "CompressedData = False")?;
    writeln!(f, "DimSize = {} {} {}", dims[2], dims[1], dims[0])?;
    writeln!(
        f,
        "ElementSpacing = {} {} {}",
        spacing[2], spacing[1], spacing[0]
    )?;
    writeln!(f, "Offset = {} {} {}", origin[2], origin[1], origin[0])?;
    writeln!(f, "ElementType = {}", element_type.metaimage_name())?;
    writeln!(f, "ElementDataFile = {raw_name}")?;
    Ok(raw_path)
}

/// Write a volume as a header + raw pair next to `path`.
///
/// MET_SHORT volumes are stored by rounding to the nearest integer; values
/// read from a MET_SHORT file are integral already, so write∘read is
/// bit-exact.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw_path = write_header(path, v.dims, v.spacing, v.origin, v.element_type)?;
    let bytes = match v.element_type {
        ElementType::Short => {
            let mut buf = vec![0u8; v.data.len() * 2];
            for (b, value) in buf.chunks_exact_mut(2).zip(&v.data) {
                let clamped = value.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
                LittleEndian::write_i16(b, clamped);
            }
            buf
        }
        ElementType::Float => {
            let mut buf = vec![0u8; v.data.len() * 4];
            LittleEndian::write_f32_into(&v.data, &mut buf);
            buf
        }
        ElementType::Uchar => {
            return Err(Error::ShapeMismatch(
                "volumes cannot be written as MET_UCHAR; use labels".into(),
            ))
        }
    };
    fs::write(raw_path, bytes)?;
    Ok(())
}

/// Write a label mask as a MET_UCHAR header + raw pair.
pub fn write_labels(m: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    validate_labels(&m.data)?;
    let path = path.as_ref();
    let raw_path = write_header(path, m.dims, m.spacing, m.origin, ElementType::Uchar)?;
    fs::write(raw_path, &m.data)?;
    Ok(())
}
