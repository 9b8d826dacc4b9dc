//! Reading and writing volumes in the npy array format, version 1.0.
//!
//! Layout: the magic string `\x93NUMPY`, version bytes `(1, 0)`, a
//! little-endian `u16` header length, then an ASCII Python-dict header with
//! the keys `descr`, `fortran_order` and `shape`, space-padded and terminated
//! by `\n` so that the data starts on a 64-byte boundary. Raw little-endian
//! samples follow.
//!
//! Volumes are stored C-ordered with shape `(nz, ny, nx)`, so the last axis
//! varies fastest and the byte stream is exactly the x-fastest linear order
//! used by [`Volume`]. Loading `np.load(path)[z, y, x]` in numpy addresses
//! voxel `(x, y, z)`.
//!
//! Physical spacing lives in a JSON sidecar next to the array:
//! `scan.npy` pairs with `scan.spacing.json` holding
//! `{"spacing_mm": [sx, sy, sz]}`. A missing sidecar means 1 mm isotropic.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Dims, Spacing, Volume};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

/// On-disk sample type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    F32,
    F64,
    U8,
    I32,
}

impl ElementType {
    pub fn descr(self) -> &'static str {
        match self {
            ElementType::F32 => "<f4",
            ElementType::F64 => "<f8",
            ElementType::U8 => "|u1",
            ElementType::I32 => "<i4",
        }
    }

    fn from_descr(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(ElementType::F32),
            "<f8" => Ok(ElementType::F64),
            "|u1" | "<u1" | "|b1" => Ok(ElementType::U8),
            "<i4" => Ok(ElementType::I32),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::F32 | ElementType::I32 => 4,
            ElementType::F64 => 8,
            ElementType::U8 => 1,
        }
    }
}

#[derive(Debug, PartialEq)]
struct Header {
    dtype: ElementType,
    fortran_order: bool,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SpacingSidecar {
    spacing_mm: [f64; 3],
}

/// `foo.npy` -> `foo.spacing.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = match path.extension() {
        Some(ext) if ext == "npy" => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut name = stem.into_os_string();
    name.push(".spacing.json");
    PathBuf::from(name)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, data) = decode(&mut bytes.as_slice())?;
    let spacing = read_sidecar(path)?.unwrap_or_default();
    Volume::new(dims, spacing, data)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    BinaryMask::from_volume(&load_volume(path)?)
}

/// Writes `v` as little-endian `f64` plus its spacing sidecar.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    save_volume_as(v, path, ElementType::F64)
}

pub fn save_mask(m: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_volume_as(&m.to_volume(), path, ElementType::U8)
}

/// Writes `v` with the requested sample type. Fails rather than rounding when
/// a value is not exactly representable in that type.
pub fn save_volume_as(v: &Volume, path: impl AsRef<Path>, dtype: ElementType) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(128 + v.data().len() * dtype.size());
    encode(v, dtype, &mut buf)?;
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    let sidecar = SpacingSidecar {
        spacing_mm: v.spacing().0,
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string(&sidecar)?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<Option<Spacing>> {
    let side = sidecar_path(path);
    match fs::read_to_string(&side) {
        Ok(text) => {
            let parsed: SpacingSidecar = serde_json::from_str(&text)?;
            let s = Spacing(parsed.spacing_mm);
            s.validate()?;
            Ok(Some(s))
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(side, e)),
    }
}

/// Serializes `v` into npy bytes.
pub fn encode(v: &Volume, dtype: ElementType, out: &mut impl Write) -> Result<()> {
    let d = v.dims();
    let header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        dtype.descr(),
        d.nz,
        d.ny,
        d.nx
    );
    // magic(6) + version(2) + len(2) + header + '\n', padded to ALIGN.
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = header.len() + pad + 1;
    let header_len16 = u16::try_from(header_len)
        .map_err(|_| Error::MalformedHeader("header longer than 65535 bytes".into()))?;

    let mut bytes = Vec::with_capacity(unpadded + pad + v.data().len() * dtype.size());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&[1, 0]);
    bytes.extend_from_slice(&header_len16.to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend(std::iter::repeat_n(b' ', pad));
    bytes.push(b'\n');

    for (i, &x) in v.data().iter().enumerate() {
        let unrepresentable = || {
            Error::InvalidVolume(format!(
                "value {x} at index {i} not representable as {}",
                dtype.descr()
            ))
        };
        match dtype {
            ElementType::F64 => bytes.extend_from_slice(&x.to_le_bytes()),
            ElementType::F32 => {
                let y = x as f32;
                if f64::from(y) != x {
                    return Err(unrepresentable());
                }
                bytes.extend_from_slice(&y.to_le_bytes());
            }
            ElementType::U8 => {
                if x.fract() != 0.0 || !(0.0..=255.0).contains(&x) {
                    return Err(unrepresentable());
                }
                bytes.push(x as u8);
            }
            ElementType::I32 => {
                if x.fract() != 0.0 || x < f64::from(i32::MIN) || x > f64::from(i32::MAX) {
                    return Err(unrepresentable());
                }
                bytes.extend_from_slice(&(x as i32).to_le_bytes());
            }
        }
    }
    out.write_all(&bytes)
        .map_err(|e| Error::io("<stream>", e))?;
    Ok(())
}

/// Parses npy bytes into dims and samples widened to `f64`.
pub fn decode(reader: &mut impl Read) -> Result<(Dims, Vec<f64>)> {
    let header = read_header(reader)?;
    if header.fortran_order {
        return Err(Error::MalformedHeader(
            "fortran_order arrays are not supported".into(),
        ));
    }
    let dims = match header.shape.as_slice() {
        [nz, ny, nx] => Dims::new(*nx, *ny, *nz),
        other => {
            return Err(Error::MalformedHeader(format!(
                "expected a 3-d shape, got {other:?}"
            )))
        }
    };
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| Error::io("<stream>", e))?;
    let size = header.dtype.size();
    if raw.len() % size != 0 || raw.len() / size != dims.len() {
        return Err(Error::InvalidVolume(format!(
            "dimension mismatch: header shape {:?} needs {} elements, payload holds {}",
            header.shape,
            dims.len(),
            raw.len() as f64 / size as f64
        )));
    }
    let data = match header.dtype {
        ElementType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        ElementType::F32 => raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        ElementType::U8 => raw.iter().map(|&b| f64::from(b)).collect(),
        ElementType::I32 => raw
            .chunks_exact(4)
            .map(|c| f64::from(i32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Ok((dims, data))
}

fn read_header(reader: &mut impl Read) -> Result<Header> {
    let io_err = |e| Error::io("<stream>", e);
    let mut magic = [0u8; 6];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::MalformedHeader("file too short for magic string".into()))?;
    if &magic != MAGIC {
        return Err(Error::MalformedHeader("bad magic string".into()));
    }
    let mut version = [0u8; 2];
    reader.read_exact(&mut version).map_err(io_err)?;
    let header_len = match version {
        [1, 0] => {
            let mut b = [0u8; 2];
            reader.read_exact(&mut b).map_err(io_err)?;
            u16::from_le_bytes(b) as usize
        }
        [2, 0] | [3, 0] => {
            let mut b = [0u8; 4];
            reader.read_exact(&mut b).map_err(io_err)?;
            u32::from_le_bytes(b) as usize
        }
        [major, minor] => {
            return Err(Error::MalformedHeader(format!(
                "unsupported format version {major}.{minor}"
            )))
        }
    };
    let mut text = vec![0u8; header_len];
    reader
        .read_exact(&mut text)
        .map_err(|_| Error::MalformedHeader("truncated header".into()))?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::MalformedHeader("header is not valid text".into()))?;
    parse_header_dict(&text)
}

fn parse_header_dict(text: &str) -> Result<Header> {
    let bad = |msg: &str| Error::MalformedHeader(format!("{msg} in header {text:?}"));
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| bad("missing braces"))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    let mut rest = body.trim();
    while !rest.is_empty() {
        let (key, after) = take_quoted(rest).ok_or_else(|| bad("expected quoted key"))?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| bad("expected ':'"))?
            .trim_start();
        let consumed = match key {
            "descr" => {
                let (v, r) = take_quoted(after).ok_or_else(|| bad("expected quoted descr"))?;
                descr = Some(ElementType::from_descr(v)?);
                r
            }
            "fortran_order" => {
                if let Some(r) = after.strip_prefix("False") {
                    fortran = Some(false);
                    r
                } else if let Some(r) = after.strip_prefix("True") {
                    fortran = Some(true);
                    r
                } else {
                    return Err(bad("fortran_order must be True or False"));
                }
            }
            "shape" => {
                let inner = after.strip_prefix('(').ok_or_else(|| bad("expected '('"))?;
                let close = inner.find(')').ok_or_else(|| bad("unterminated shape"))?;
                let dims = inner[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape entry")))
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(dims);
                &inner[close + 1..]
            }
            other => return Err(bad(&format!("unknown key '{other}'"))),
        };
        rest = consumed.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    Ok(Header {
        dtype: descr.ok_or_else(|| bad("missing descr"))?,
        fortran_order: fortran.ok_or_else(|| bad("missing fortran_order"))?,
        shape: shape.ok_or_else(|| bad("missing shape"))?,
    })
}

fn take_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let body = &s[1..];
    let end = body.find(quote)?;
    Some((&body[..end], &body[end + 1..]))
}
