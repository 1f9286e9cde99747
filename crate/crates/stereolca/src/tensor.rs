//! Binary tensor container and JSON sidecar metadata.
//!
//! Every on-disk artifact (stimulus pairs, dictionaries, code dumps, tuning
//! tables, disparity maps) uses one little-endian container format:
//!
//! ```text
//! bytes 0..4   magic "LCAT"
//! u32          format version (currently 1)
//! u32          element type tag: 1 = f32, 2 = bit-packed binary
//! u32          rank
//! rank x u64   dimensions
//! payload      row-major little-endian f32 samples, or bits packed
//!              LSB-first into bytes (ceil(len/8) bytes) for binary data
//! ```
//!
//! Free-form metadata travels in a JSON sidecar next to the tensor file,
//! named by appending `.json` to the tensor's file name.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LCAT";
pub const FORMAT_VERSION: u32 = 1;

const TAG_F32: u32 = 1;
const TAG_BITS: u32 = 2;

/// Path of the JSON sidecar belonging to a tensor file.
pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

fn write_header(out: &mut Vec<u8>, tag: u32, dims: &[usize]) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

/// Serializes an f32 tensor into container bytes.
pub fn encode_f32(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::InvalidData(format!(
            "tensor payload length {} does not match dims {:?}",
            data.len(),
            dims
        )));
    }
    let mut out = Vec::with_capacity(16 + dims.len() * 8 + data.len() * 4);
    write_header(&mut out, TAG_F32, dims);
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Writes an f32 tensor file.
pub fn write_f32(path: impl AsRef<Path>, dims: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_f32(dims, data)?;
    atomic_write(path, &bytes)
}

/// Writes a bit-packed binary tensor file. `bits` holds one logical value
/// per element, row-major; bit `i` lands in byte `i / 8`, bit `i % 8`.
pub fn write_bits(path: impl AsRef<Path>, dims: &[usize], bits: &[bool]) -> Result<()> {
    let path = path.as_ref();
    let expected: usize = dims.iter().product();
    if expected != bits.len() {
        return Err(Error::InvalidData(format!(
            "tensor payload length {} does not match dims {:?}",
            bits.len(),
            dims
        )));
    }
    let mut out = Vec::with_capacity(16 + dims.len() * 8 + bits.len() / 8 + 1);
    write_header(&mut out, TAG_BITS, dims);
    let mut packed = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&packed);
    atomic_write(path, &out)
}

struct Header {
    tag: u32,
    dims: Vec<usize>,
}

fn read_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 {
        return Err(Error::format(path, "file shorter than container header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, not a tensor container"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported container version {version}"),
        ));
    }
    let tag = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let rank = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let dims_end = 16 + rank * 8;
    if bytes.len() < dims_end {
        return Err(Error::format(path, "truncated dimension list"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 16 + i * 8;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| Error::format(path, "dimension overflow"))?);
    }
    Ok((Header { tag, dims }, dims_end))
}

/// Reads an f32 tensor file, returning `(dims, data)`.
pub fn read_f32(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (header, offset) = read_header(path, &bytes)?;
    if header.tag != TAG_F32 {
        return Err(Error::format(
            path,
            format!("expected f32 tensor, found type tag {}", header.tag),
        ));
    }
    let count: usize = header.dims.iter().product();
    let payload = &bytes[offset..];
    if payload.len() != count * 4 {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), count * 4),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((header.dims, data))
}

/// Reads a bit-packed binary tensor file, returning `(dims, bits)`.
pub fn read_bits(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<bool>)> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (header, offset) = read_header(path, &bytes)?;
    if header.tag != TAG_BITS {
        return Err(Error::format(
            path,
            format!("expected binary tensor, found type tag {}", header.tag),
        ));
    }
    let count: usize = header.dims.iter().product();
    let payload = &bytes[offset..];
    if payload.len() != count.div_ceil(8) {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                count.div_ceil(8)
            ),
        ));
    }
    let bits = (0..count)
        .map(|i| payload[i / 8] & (1 << (i % 8)) != 0)
        .collect();
    Ok((header.dims, bits))
}

/// Writes the JSON sidecar for a tensor file.
pub fn write_sidecar(tensor_path: impl AsRef<Path>, meta: &serde_json::Value) -> Result<()> {
    let path = sidecar_path(tensor_path);
    let mut text = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::format(&path, format!("metadata not serializable: {e}")))?;
    text.push('\n');
    atomic_write(&path, text.as_bytes())
}

/// Reads the JSON sidecar of a tensor file.
pub fn read_sidecar(tensor_path: impl AsRef<Path>) -> Result<serde_json::Value> {
    let path = sidecar_path(tensor_path);
    let bytes = read_all(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, format!("bad sidecar JSON: {e}")))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Write-then-rename so partially written artifacts never appear under the
/// final name.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(parent) = parent {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lcat");
        let data = vec![0.0f32, 1.5, -2.25, 3.0, 4.0, 5.0];
        write_f32(&path, &[2, 3], &data).unwrap();

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"LCAT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 32 + 4 * 6);

        let (dims, back) = read_f32(&path).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(back, data);
    }

    #[test]
    fn bits_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.lcat");
        let bits: Vec<bool> = (0..19).map(|i| i % 3 == 0).collect();
        write_bits(&path, &[19], &bits).unwrap();
        let (dims, back) = read_bits(&path).unwrap();
        assert_eq!(dims, vec![19]);
        assert_eq!(back, bits);
        // 19 bits pack into 3 bytes.
        assert_eq!(fs::read(&path).unwrap().len(), 16 + 8 + 3);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lcat");
        write_f32(&path, &[1], &[1.0]).unwrap();
        let meta = serde_json::json!({"stride": 8, "lambda": 0.1});
        write_sidecar(&path, &meta).unwrap();
        assert_eq!(read_sidecar(&path).unwrap(), meta);
        assert_eq!(sidecar_path("a/b/t.lcat"), PathBuf::from("a/b/t.lcat.json"));
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.lcat");
        fs::write(&path, b"NOPE").unwrap();
        assert!(read_f32(&path).is_err());

        fs::write(&path, [b"LCAT".as_slice(), &[9, 9, 9, 9]].concat()).unwrap();
        assert!(read_f32(&path).is_err());

        // Wrong payload length.
        let mut good = encode_f32(&[2], &[1.0, 2.0]).unwrap();
        good.truncate(good.len() - 4);
        fs::write(&path, &good).unwrap();
        assert!(read_f32(&path).is_err());

        // Length/dims mismatch at write time.
        assert!(write_f32(dir.path().join("x.lcat"), &[3], &[1.0]).is_err());
    }
}
