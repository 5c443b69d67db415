//! Binary tensor container shared by model checkpoints, dataset splits and
//! heatmap bundles.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FAUD1"            5-byte magic
//! version: u32       currently 1
//! header_len: u32    length of the JSON header that follows
//! header: [u8]       UTF-8 JSON (architecture descriptor, manifest, ...)
//! records until EOF:
//!   name_len: u16, name: [u8] (UTF-8)
//!   rank: u8, dims: [u32; rank]
//!   payload: [f64; product(dims)]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"FAUD1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    /// Free-form JSON header string.
    pub header: String,
    pub records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(header: impl Into<String>) -> Self {
        Self {
            header: header.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.records.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = self.header.as_bytes();
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Format("header longer than u32::MAX bytes".into()))?;
        w.write_all(&header_len.to_le_bytes())?;
        w.write_all(header)?;
        for (name, t) in &self.records {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("record name too long: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header =
            String::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?;

        let mut records = Vec::new();
        loop {
            let mut len_buf = [0u8; 2];
            if !read_exact_or_eof(&mut r, &mut len_buf)? { break }
            let name_len = u16::from_le_bytes(len_buf) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let dims = (0..rank[0])
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut payload = vec![0u8; n * 8];
            r.read_exact(&mut payload)
                .map_err(|_| Error::Format(format!("truncated payload for `{name}`")))?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            records.push((name, Tensor::new(dims, data)?));
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = File::open(path)?;
        Self::read_from(BufReader::new(f))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated u32 field".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Fills `buf`, returning `false` on a clean EOF before the first byte.
fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::Format("truncated record header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout_of_a_single_record() {
        let mut c = Container::new("{}");
        c.push("w", Tensor::new([2], vec![1.0, -0.5]).unwrap());
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"FAUD1");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"{}");
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(b"w");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            Container::read_from(&b"FAUD2\x01\0\0\0\0\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        let mut c = Container::new("");
        c.push("x", Tensor::ones([3]));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(Container::read_from(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(
            header in "[ -~]{0,40}",
            recs in proptest::collection::vec(
                ("[a-z_.0-9]{1,12}", proptest::collection::vec(1usize..4, 0..4), -1e6f64..1e6),
                0..5,
            )
        ) {
            let mut c = Container::new(header);
            for (name, dims, seed) in recs {
                let n: usize = dims.iter().product();
                let t = Tensor::from_fn(dims, |i| seed * (i as f64 + 1.0).sin());
                assert_eq!(t.numel(), n);
                c.push(name, t);
            }
            let mut buf = Vec::new();
            c.write_to(&mut buf).unwrap();
            let back = Container::read_from(&buf[..]).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
