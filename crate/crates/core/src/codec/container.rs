//! The coded-volume container.
//!
//! ```text
//! "VVMC" | version u8 | width u32 | height u32 | depth u32 | bit_depth u8
//! gop_stride u32 | model_id u64 | groups u32 | latent_channels u32
//! depth × ( z_len u32 | z bytes | y_len u32 | y bytes )
//! ```
//! All integers little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"VVMC";
pub const CONTAINER_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 4 * 3 + 1 + 4 + 8 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub width: u32,
    pub height: u32,
    pub depth: u32,
    pub bit_depth: u8,
    pub gop_stride: u32,
    pub model_id: u64,
    pub groups: u32,
    pub latent_channels: u32,
}

impl ContainerHeader {
    fn write(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&[CONTAINER_VERSION])?;
        for v in [self.width, self.height, self.depth] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[self.bit_depth])?;
        w.write_all(&self.gop_stride.to_le_bytes())?;
        w.write_all(&self.model_id.to_le_bytes())?;
        w.write_all(&self.groups.to_le_bytes())?;
        w.write_all(&self.latent_channels.to_le_bytes())
    }

    fn read(r: &mut impl Read) -> Result<Self> {
        let mut b = [0u8; HEADER_LEN];
        r.read_exact(&mut b)?;
        if &b[..4] != CONTAINER_MAGIC {
            return Err(Error::format("missing container magic"));
        }
        if b[4] != CONTAINER_VERSION {
            return Err(Error::format(format!("unsupported container version {}", b[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let h = ContainerHeader {
            width: u32_at(5),
            height: u32_at(9),
            depth: u32_at(13),
            bit_depth: b[17],
            gop_stride: u32_at(18),
            model_id: u64::from_le_bytes(b[22..30].try_into().unwrap()),
            groups: u32_at(30),
            latent_channels: u32_at(34),
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.depth == 0 {
            return Err(Error::format("container dimensions must be positive"));
        }
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return Err(Error::format(format!("unsupported bit depth {}", self.bit_depth)));
        }
        if self.gop_stride == 0 || self.groups == 0 || self.latent_channels == 0 {
            return Err(Error::format("zero stride, group count or channel count"));
        }
        Ok(())
    }

    pub fn pixels_per_slice(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }
}

/// Coded hyper-latent and latent of one slice.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SliceChunk {
    pub z: Vec<u8>,
    pub y: Vec<u8>,
}

impl SliceChunk {
    pub fn len(&self) -> usize {
        self.z.len() + self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub chunks: Vec<SliceChunk>,
}

fn read_payload(r: &mut impl Read, what: &str) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as u64;
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, format!("{what} chunk truncated"))));
    }
    Ok(buf)
}

impl Container {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        if self.chunks.len() != self.header.depth as usize {
            return Err(Error::format(format!(
                "{} chunks for depth {}",
                self.chunks.len(),
                self.header.depth
            )));
        }
        self.header.write(&mut w)?;
        for c in &self.chunks {
            for part in [&c.z, &c.y] {
                let len = u32::try_from(part.len()).map_err(|_| Error::format("chunk exceeds 4 GiB"))?;
                w.write_all(&len.to_le_bytes())?;
                w.write_all(part)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let header = ContainerHeader::read(&mut r)?;
        let mut chunks = Vec::new();
        for _ in 0..header.depth {
            let z = read_payload(&mut r, "hyper")?;
            let y = read_payload(&mut r, "latent")?;
            chunks.push(SliceChunk { z, y });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::format("trailing bytes after the last chunk"));
        }
        Ok(Container { header, chunks })
    }

    /// Coded bits per pixel of each slice.
    pub fn slice_bpp(&self) -> Vec<f64> {
        self.chunks.iter().map(|c| c.len() as f64 * 8.0 / self.header.pixels_per_slice()).collect()
    }
}

pub fn write_container(c: &Container, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    c.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    Container::read_from(BufReader::new(File::open(path)?))
}

/// Header plus per-slice `(z_len, y_len)`, skipping payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerSummary {
    pub header: ContainerHeader,
    pub chunk_lengths: Vec<(u32, u32)>,
}

impl ContainerSummary {
    pub fn slice_bpp(&self) -> Vec<f64> {
        let px = self.header.pixels_per_slice();
        self.chunk_lengths.iter().map(|&(z, y)| f64::from(z + y) * 8.0 / px).collect()
    }

    pub fn mean_bpp(&self) -> f64 {
        let b = self.slice_bpp();
        b.iter().sum::<f64>() / b.len().max(1) as f64
    }
}

pub fn scan_container(mut r: impl Read) -> Result<ContainerSummary> {
    let header = ContainerHeader::read(&mut r)?;
    let mut chunk_lengths = Vec::with_capacity((header.depth as usize).min(1 << 16));
    for _ in 0..header.depth {
        let mut lens = [0u32; 2];
        for l in &mut lens {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *l = u32::from_le_bytes(b);
            let skipped = io::copy(&mut r.by_ref().take(u64::from(*l)), &mut io::sink())?;
            if skipped != u64::from(*l) {
                return Err(Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "chunk truncated")));
            }
        }
        chunk_lengths.push((lens[0], lens[1]));
    }
    Ok(ContainerSummary { header, chunk_lengths })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            header: ContainerHeader {
                width: 50,
                height: 40,
                depth: 3,
                bit_depth: 16,
                gop_stride: 2,
                model_id: 0xDEAD_BEEF_0123_4567,
                groups: 4,
                latent_channels: 32,
            },
            chunks: vec![
                SliceChunk { z: vec![1, 2], y: vec![3, 4, 5] },
                SliceChunk { z: vec![], y: vec![9] },
                SliceChunk { z: vec![7; 10], y: vec![] },
            ],
        }
    }

    #[test]
    fn round_trip_and_summary() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Container::read_from(&bytes[..]).unwrap(), c);
        let s = scan_container(&bytes[..]).unwrap();
        assert_eq!(s.header, c.header);
        assert_eq!(s.chunk_lengths, vec![(2, 3), (0, 1), (10, 0)]);
        assert_eq!(s.slice_bpp(), c.slice_bpp());
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::read_from(&bad[..]), Err(Error::Format(_))));
        for cut in [3, HEADER_LEN - 1, HEADER_LEN + 3, bytes.len() - 1] {
            assert!(Container::read_from(&bytes[..cut]).is_err());
            assert!(scan_container(&bytes[..cut]).is_err());
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Container::read_from(&long[..]).is_err());
        let mut huge = bytes;
        huge[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(Container::read_from(&huge[..]).is_err());
    }
}
