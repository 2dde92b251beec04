//! MetaImage (`.mhd` / `.raw`) reader and writer.
//!
//! Supports the subset used by the rest of the crate: 3-D images, binary
//! little-endian payloads, element types `MET_UCHAR`, `MET_SHORT`,
//! `MET_USHORT` and `MET_FLOAT`. Headers are `Key = Value` lines; `DimSize`
//! and `ElementSpacing` are stored in file order (x y z, fastest first) and
//! transposed to the crate's `(depth, height, width)` convention on load.
//!
//! The parser is total: malformed input of any kind produces an [`Error`],
//! never a panic, and declared geometry is capped before any allocation.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Hard cap on voxels per volume; rejects absurd headers before allocating.
const MAX_VOXELS: usize = 1 << 28;
const MAX_DIM: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    U8,
    I16,
    U16,
    F32,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_UCHAR" => Ok(ElementType::U8),
            "MET_SHORT" => Ok(ElementType::I16),
            "MET_USHORT" => Ok(ElementType::U16),
            "MET_FLOAT" => Ok(ElementType::F32),
            other => Err(Error::UnsupportedElement(other.to_string())),
        }
    }

    fn byte_size(self) -> usize {
        match self {
            ElementType::U8 => 1,
            ElementType::I16 | ElementType::U16 => 2,
            ElementType::F32 => 4,
        }
    }
}

#[derive(Debug)]
struct Header {
    /// `(depth, height, width)`, already transposed from file order.
    dims: [usize; 3],
    spacing: [f64; 3],
    elem: ElementType,
    /// `None` means `ElementDataFile = LOCAL`.
    data_file: Option<String>,
    /// Byte offset where LOCAL payload starts.
    payload_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut ndims: Option<usize> = None;
    let mut dims: Option<[usize; 3]> = None;
    let mut spacing: Option<[f64; 3]> = None;
    let mut elem: Option<ElementType> = None;

    let mut pos = 0usize;
    while pos < bytes.len() {
        let line_end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .unwrap_or(bytes.len());
        let raw_line = &bytes[pos..line_end];
        let next = line_end.saturating_add(1);
        let line = std::str::from_utf8(raw_line)
            .map_err(|_| Error::Header("non-UTF-8 bytes in header".into()))?
            .trim_end_matches('\r')
            .trim();
        if line.is_empty() {
            pos = next;
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Header(format!("line without '=': {line:?}")))?;
        match key {
            "NDims" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| Error::Header(format!("NDims: not an integer: {value:?}")))?;
                if n != 3 {
                    return Err(Error::Header(format!("NDims: expected 3, got {n}")));
                }
                ndims = Some(n);
            }
            "DimSize" => {
                let v = parse_triple::<usize>(value, "DimSize")?;
                for (axis, &d) in v.iter().enumerate() {
                    if d == 0 || d > MAX_DIM {
                        return Err(Error::Header(format!(
                            "DimSize: axis {axis} out of range: {d}"
                        )));
                    }
                }
                // File order is x y z; internal order is z y x.
                dims = Some([v[2], v[1], v[0]]);
            }
            "ElementSpacing" => {
                let v = parse_triple::<f64>(value, "ElementSpacing")?;
                if v.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
                    return Err(Error::Header(format!(
                        "ElementSpacing: must be finite and positive, got {value:?}"
                    )));
                }
                spacing = Some([v[2], v[1], v[0]]);
            }
            "ElementType" => elem = Some(ElementType::parse(value)?),
            "BinaryData" => {
                if value != "True" {
                    return Err(Error::Header("BinaryData: only True is supported".into()));
                }
            }
            "BinaryDataByteOrderMSB" => {
                if value != "False" {
                    return Err(Error::Header(
                        "BinaryDataByteOrderMSB: only little-endian data is supported".into(),
                    ));
                }
            }
            "CompressedData" => {
                if value != "False" {
                    return Err(Error::Header("CompressedData: compression not supported".into()));
                }
            }
            "ElementNumberOfChannels" => {
                if value != "1" {
                    return Err(Error::Header(
                        "ElementNumberOfChannels: only single-channel data is supported".into(),
                    ));
                }
            }
            "ElementDataFile" => {
                // Terminates the header; payload or external file follows.
                let dims = dims.ok_or_else(|| Error::Header("missing DimSize".into()))?;
                if ndims.is_none() {
                    return Err(Error::Header("missing NDims".into()));
                }
                let spacing =
                    spacing.ok_or_else(|| Error::Header("missing ElementSpacing".into()))?;
                let elem = elem.ok_or_else(|| Error::Header("missing ElementType".into()))?;
                let voxels = dims[0]
                    .checked_mul(dims[1])
                    .and_then(|p| p.checked_mul(dims[2]))
                    .filter(|&p| p <= MAX_VOXELS)
                    .ok_or_else(|| Error::Header(format!("DimSize: too large: {dims:?}")))?;
                let _ = voxels;
                let data_file = match value {
                    "LOCAL" => None,
                    "LIST" => {
                        return Err(Error::Header(
                            "ElementDataFile: LIST mode is not supported".into(),
                        ))
                    }
                    name => Some(name.to_string()),
                };
                return Ok(Header { dims, spacing, elem, data_file, payload_start: next });
            }
            _ => {} // tolerate extra metadata keys (Offset, TransformMatrix, ...)
        }
        pos = next;
    }
    Err(Error::Header("missing ElementDataFile".into()))
}

fn parse_triple<T: std::str::FromStr>(value: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Header(format!(
            "{key}: expected 3 values, got {}: {value:?}",
            parts.len()
        )));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::Header(format!("{key}: invalid value {p:?}")))?,
        );
    }
    Ok(out.try_into().map_err(|_| Error::Header(format!("{key}: bad arity"))).unwrap())
}

fn decode_payload(header: &Header, payload: &[u8]) -> Result<Volume> {
    let voxels = header.dims[0] * header.dims[1] * header.dims[2];
    let expected = voxels * header.elem.byte_size();
    if payload.len() != expected {
        return Err(Error::PayloadSize { expected, found: payload.len() });
    }
    let mut values = Vec::with_capacity(voxels);
    match header.elem {
        ElementType::U8 => values.extend(payload.iter().map(|&b| f32::from(b))),
        ElementType::I16 => {
            for c in payload.chunks_exact(2) {
                values.push(f32::from(i16::from_le_bytes([c[0], c[1]])));
            }
        }
        ElementType::U16 => {
            for c in payload.chunks_exact(2) {
                values.push(f32::from(u16::from_le_bytes([c[0], c[1]])));
            }
        }
        ElementType::F32 => {
            for c in payload.chunks_exact(4) {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if !v.is_finite() {
                    return Err(Error::Header("MET_FLOAT payload contains non-finite value".into()));
                }
                values.push(v);
            }
        }
    }
    Volume::new(header.dims, header.spacing, values)
}

/// Parses a complete in-memory MetaImage with `ElementDataFile = LOCAL`.
pub fn read_metaimage_bytes(bytes: &[u8]) -> Result<Volume> {
    let header = parse_header(bytes)?;
    if header.data_file.is_some() {
        return Err(Error::Header(
            "ElementDataFile: external data file not available in byte mode".into(),
        ));
    }
    decode_payload(&header, &bytes[header.payload_start..])
}

/// Reads a MetaImage volume from disk (LOCAL payload or sibling raw file).
pub fn read_metaimage(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes)?;
    match &header.data_file {
        None => decode_payload(&header, &bytes[header.payload_start..]),
        Some(name) => {
            let raw_path = path.parent().unwrap_or_else(|| Path::new(".")).join(name);
            let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
            decode_payload(&header, &payload)
        }
    }
}

/// Reads a volume and validates it as a strictly binary mask.
pub fn read_metaimage_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Mask::from_volume(read_metaimage(path)?)
}

fn header_text(vol: &Volume, elem: &str, data_file: &str) -> String {
    let [d, h, w] = vol.dims();
    let [sz, sy, sx] = vol.spacing();
    format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         DimSize = {w} {h} {d}\n\
         ElementSpacing = {sx} {sy} {sz}\n\
         ElementType = {elem}\n\
         ElementDataFile = {data_file}\n"
    )
}

fn raw_file_name(path: &Path) -> Result<String> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Header(format!("cannot derive raw file name from {path:?}")))?;
    Ok(format!("{stem}.raw"))
}

/// Writes `<stem>.mhd` + `<stem>.raw` with `MET_FLOAT` elements.
///
/// 32-bit real payloads round-trip value-exactly through
/// [`read_metaimage`].
pub fn write_metaimage(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let path = path.as_ref();
    let raw_name = raw_file_name(path)?;
    let mut payload = Vec::with_capacity(vol.len() * 4);
    for &v in vol.values() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let raw_path = path.with_file_name(&raw_name);
    fs::write(&raw_path, &payload).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, header_text(vol, "MET_FLOAT", &raw_name).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Writes a binary mask as `<stem>.mhd` + `<stem>.raw` with `MET_UCHAR`
/// elements (0/1 bytes).
pub fn write_metaimage_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    let raw_name = raw_file_name(path)?;
    let vol = mask.as_volume();
    let payload: Vec<u8> = vol.values().iter().map(|&v| u8::from(v != 0.0)).collect();
    let raw_path = path.with_file_name(&raw_name);
    fs::write(&raw_path, &payload).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(path, header_text(vol, "MET_UCHAR", &raw_name).as_bytes())
        .map_err(|e| Error::io(path, e))
}
