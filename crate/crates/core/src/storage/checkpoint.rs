//! `XRZ0` checkpoint files: named tensors stored as 32-bit floats.
//!
//! ```text
//! "XRZ0" | version u16 | entry_count u32
//! per entry: name_len u16 | name utf-8 | rank u8 | dims u32[rank] | offset u64
//! payload: f32 little-endian
//! ```
//! Offsets count bytes from the start of the payload. Saving narrows the
//! in-memory 64-bit values to 32 bits; loading widens them back exactly.

use std::collections::HashSet;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::io::{Reader, narrow, put_f32s};

const MAGIC: &[u8; 4] = b"XRZ0";
const VERSION: u16 = 1;

pub fn write_checkpoint(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for (name, _) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::Config(format!("duplicate checkpoint entry `{name}`")));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(narrow(entries.len() as u64, u32::MAX as u64, "entry count")? as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in entries {
        let n = narrow(name.len() as u64, u16::MAX as u64, "name length")? as u16;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(narrow(t.rank() as u64, u8::MAX as u64, "rank")? as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(narrow(d as u64, u32::MAX as u64, "dimension")? as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.len() as u64;
    }
    for (_, t) in entries {
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected XRZ0".into() });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = r.u32("entry count")? as usize;
    let mut headers = Vec::with_capacity(count.min(1 << 16));
    let mut names = HashSet::new();
    for _ in 0..count {
        let at = r.offset();
        let n = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Format { offset: at + 2, msg: "entry name is not UTF-8".into() })?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(Error::Format { offset: at, msg: format!("duplicate entry `{name}`") });
        }
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64("offset")?;
        headers.push((at, name, dims, offset));
    }
    let payload_start = r.offset();
    let payload = r.take(r.remaining(), "payload")?;
    let mut spans: Vec<(u64, u64, u64)> = Vec::with_capacity(headers.len());
    for (at, _, dims, offset) in &headers {
        let numel: usize = dims.iter().product();
        let end = offset + 4 * numel as u64;
        if offset % 4 != 0 || end > payload.len() as u64 {
            return Err(Error::Format { offset: *at, msg: format!("tensor data [{offset}, {end}) outside payload") });
        }
        spans.push((*offset, end, *at));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format { offset: w[1].2, msg: "overlapping tensor data".into() });
        }
    }
    let mut out = Vec::with_capacity(headers.len());
    for (_, name, dims, offset) in headers {
        let start = offset as usize;
        let numel: usize = dims.iter().product();
        let mut pr = Reader::new(&payload[start..start + 4 * numel]);
        let data = pr.f32s(numel, "tensor data").map_err(|_| Error::Format {
            offset: payload_start + offset,
            msg: "unreadable tensor data".into(),
        })?;
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, write_checkpoint(entries)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn narrowed(t: &Tensor) -> Tensor {
        t.map(|v| v as f32 as f64)
    }

    #[test]
    fn round_trip_is_exact_at_32_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let entries = vec![
            ("a".to_string(), Tensor::randn(&[3, 4], 1.0, &mut rng)),
            ("b.weight".to_string(), Tensor::randn(&[2], 1.0, &mut rng)),
            ("scalar".to_string(), Tensor::scalar(0.1)),
        ];
        let back = read_checkpoint(&write_checkpoint(&entries).unwrap()).unwrap();
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(&narrowed(t1), t2);
        }
        let again = read_checkpoint(&write_checkpoint(&back).unwrap()).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn golden_bytes() {
        let b = write_checkpoint(&[("w".into(), Tensor::row(&[1.0, -2.0]))]).unwrap();
        let mut expect = vec![b'X', b'R', b'Z', b'0', 1, 0, 1, 0, 0, 0, 1, 0, b'w', 2, 1, 0, 0, 0, 2, 0, 0, 0];
        expect.extend_from_slice(&0u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn corrupted_magic() {
        let mut b = write_checkpoint(&[("w".into(), Tensor::row(&[1.0]))]).unwrap();
        b[1] = b'Q';
        assert!(matches!(read_checkpoint(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let e = write_checkpoint(&[("w".into(), Tensor::row(&[1.0])), ("w".into(), Tensor::row(&[2.0]))]);
        assert!(e.is_err());
    }

    #[test]
    fn truncated_payload() {
        let b = write_checkpoint(&[("w".into(), Tensor::row(&[1.0, 2.0]))]).unwrap();
        assert!(matches!(read_checkpoint(&b[..b.len() - 1]), Err(Error::Format { .. })));
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let mut b = write_checkpoint(&[("a".into(), Tensor::row(&[1.0, 2.0])), ("b".into(), Tensor::row(&[3.0]))]).unwrap();
        // entry b's offset field sits right before the payload
        let off = b.len() - 12 - 8;
        b[off..off + 8].copy_from_slice(&4u64.to_le_bytes());
        assert!(matches!(read_checkpoint(&b), Err(Error::Format { .. })));
    }
}
