//! Volumetric grayscale data: the `VVOL` container, normalization, padding
//! and GOP-style slice grouping.
//!
//! `VVOL` layout (all integers little-endian):
//!
//! ```text
//! "VVOL" | version u8 (=1) | bit_depth u8 (8|16) | width u32 | height u32 | depth u32
//! samples: width·height·depth values, slice-major then row-major,
//!          u8 for 8-bit volumes, u16 LE for 16-bit volumes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 12;

/// A 3-D grayscale volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Volume {
    width: usize,
    height: usize,
    depth: usize,
    bit_depth: u8,
    samples: Vec<u16>,
}

impl Volume {
    pub fn new(width: usize, height: usize, depth: usize, bit_depth: u8, samples: Vec<u32>) -> Result<Self> {
        if bit_depth != 8 && bit_depth != 16 {
            return Err(Error::format(format!("unsupported bit depth {}", bit_depth)));
        }
        if width == 0 || height == 0 || depth == 0 {
            return Err(Error::format("volume dimensions must be at least 1"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(depth))
            .ok_or_else(|| Error::format("volume too large"))?;
        if samples.len() != n {
            return Err(Error::format(format!("expected {} samples, got {}", n, samples.len())));
        }
        let max = (1u32 << bit_depth) - 1;
        if let Some(bad) = samples.iter().find(|&&s| s > max) {
            return Err(Error::format(format!("sample {} exceeds {}-bit range", bad, bit_depth)));
        }
        let samples = samples.into_iter().map(|s| s as u16).collect();
        Ok(Volume { width, height, depth, bit_depth, samples })
    }

    pub fn from_slices(width: usize, height: usize, bit_depth: u8, slices: &[Vec<u16>]) -> Result<Self> {
        let samples: Vec<u32> = slices.iter().flatten().map(|&s| s as u32).collect();
        Volume::new(width, height, slices.len(), bit_depth, samples)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn max_value(&self) -> u32 {
        (1u32 << self.bit_depth) - 1
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn slice(&self, z: usize) -> &[u16] {
        let n = self.width * self.height;
        &self.samples[z * n..(z + 1) * n]
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.samples.len() * (self.bit_depth as usize / 8)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(VVOL_MAGIC);
        buf.push(VVOL_VERSION);
        buf.push(self.bit_depth);
        for d in [self.width, self.height, self.depth] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        if self.bit_depth == 8 {
            buf.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            for s in &self.samples {
                buf.extend_from_slice(&s.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; HEADER_LEN];
        r.read_exact(&mut head)?;
        if &head[..4] != VVOL_MAGIC {
            return Err(Error::format("missing VVOL magic"));
        }
        if head[4] != VVOL_VERSION {
            return Err(Error::format(format!("unsupported VVOL version {}", head[4])));
        }
        let bit_depth = head[5];
        if bit_depth != 8 && bit_depth != 16 {
            return Err(Error::format(format!("unsupported bit depth {}", bit_depth)));
        }
        let dim = |i: usize| u32::from_le_bytes(head[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
        let (width, height, depth) = (dim(0), dim(1), dim(2));
        let count = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(depth))
            .ok_or_else(|| Error::format("volume too large"))?;
        let bytes = count * (bit_depth as usize / 8);
        let mut payload = Vec::new();
        r.by_ref().take(bytes as u64).read_to_end(&mut payload)?;
        if payload.len() < bytes {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("VVOL payload truncated: {} of {} bytes", payload.len(), bytes),
            )));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::format("trailing data after VVOL payload"));
        }
        let samples: Vec<u32> = if bit_depth == 8 {
            payload.iter().map(|&b| b as u32).collect()
        } else {
            payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect()
        };
        Volume::new(width, height, depth, bit_depth, samples)
    }
}

pub fn load_vvol(path: impl AsRef<Path>) -> Result<Volume> {
    Volume::read_from(BufReader::new(File::open(path)?))
}

pub fn save_vvol(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    v.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

/// One slice scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSlice {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl NormalizedSlice {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!("{}x{} slice with {} values", height, width, values.len())));
        }
        Ok(NormalizedSlice { height, width, values })
    }
}

/// Original slice size before padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

/// `sample / (2^bit_depth − 1)` for every slice, in depth order.
pub fn normalize(v: &Volume) -> Vec<NormalizedSlice> {
    let scale = v.max_value() as f64;
    (0..v.depth())
        .map(|z| NormalizedSlice {
            height: v.height(),
            width: v.width(),
            values: v.slice(z).iter().map(|&s| s as f64 / scale).collect(),
        })
        .collect()
}

/// `clamp(round(value·max), 0, max)`, rounding half away from zero.
pub fn denormalize(s: &NormalizedSlice, bit_depth: u8) -> Vec<u16> {
    let max = ((1u32 << bit_depth) - 1) as f64;
    s.values
        .iter()
        .map(|&v| {
            let r = (v * max).round();
            // NaN saturates to 0 in the cast.
            r.clamp(0.0, max) as u16
        })
        .collect()
}

/// Edge-replicating pad up to the next multiple of `m` in both dimensions.
pub fn pad_to_multiple(s: &NormalizedSlice, m: usize) -> (NormalizedSlice, CropRecord) {
    let m = m.max(1);
    let h = s.height.div_ceil(m) * m;
    let w = s.width.div_ceil(m) * m;
    let rec = CropRecord { height: s.height, width: s.width };
    if (h, w) == (s.height, s.width) {
        return (s.clone(), rec);
    }
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = y.min(s.height - 1);
        let row = &s.values[sy * s.width..(sy + 1) * s.width];
        values.extend_from_slice(row);
        let last = row[s.width - 1];
        values.extend(std::iter::repeat(last).take(w - s.width));
    }
    (NormalizedSlice { height: h, width: w, values }, rec)
}

/// Inverse of [`pad_to_multiple`] on the original region.
pub fn crop(s: &NormalizedSlice, rec: CropRecord) -> NormalizedSlice {
    let mut values = Vec::with_capacity(rec.height * rec.width);
    for y in 0..rec.height {
        values.extend_from_slice(&s.values[y * s.width..y * s.width + rec.width]);
    }
    NormalizedSlice { height: rec.height, width: rec.width, values }
}

/// Consecutive slices sharing one recurrent-buffer lifetime.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceGroup {
    pub slices: Vec<NormalizedSlice>,
    pub group_index: usize,
    pub crop_record: CropRecord,
}

/// Partition `slices` into consecutive groups of `gop_stride` (last may be shorter).
pub fn group_slices(slices: Vec<NormalizedSlice>, gop_stride: usize) -> Vec<SliceGroup> {
    let stride = gop_stride.max(1);
    let Some(first) = slices.first() else {
        return Vec::new();
    };
    let crop_record = CropRecord { height: first.height, width: first.width };
    let mut groups = Vec::with_capacity(slices.len().div_ceil(stride));
    let mut it = slices.into_iter().peekable();
    let mut group_index = 0;
    while it.peek().is_some() {
        let chunk: Vec<_> = it.by_ref().take(stride).collect();
        groups.push(SliceGroup { slices: chunk, group_index, crop_record });
        group_index += 1;
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bytes(v: &Volume) -> Vec<u8> {
        let mut b = Vec::new();
        v.write_to(&mut b).unwrap();
        b
    }

    #[test]
    fn smallest_file() {
        let v = Volume::new(1, 1, 1, 8, vec![0]).unwrap();
        let b = bytes(&v);
        assert_eq!(b.len(), HEADER_LEN + 1);
        assert_eq!(Volume::read_from(&b[..]).unwrap(), v);
    }

    #[test]
    fn payload_size_matches_bit_depth() {
        let v = Volume::new(2, 2, 1, 8, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(bytes(&v).len(), HEADER_LEN + 4);
        let v16 = Volume::new(2, 2, 1, 16, vec![0, 1, 2, 65535]).unwrap();
        let b = bytes(&v16);
        assert_eq!(b.len(), HEADER_LEN + 8);
        assert_eq!(&b[HEADER_LEN + 6..], &[0xff, 0xff]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(Volume::new(1, 1, 1, 16, vec![70000]), Err(Error::Format(_))));
        assert!(matches!(Volume::new(1, 1, 1, 8, vec![256]), Err(Error::Format(_))));
        assert!(matches!(Volume::new(1, 1, 1, 12, vec![0]), Err(Error::Format(_))));

        let mut b = bytes(&Volume::new(2, 1, 1, 8, vec![1, 2]).unwrap());
        b[0] = b'X';
        assert!(matches!(Volume::read_from(&b[..]), Err(Error::Format(_))));

        let mut b = bytes(&Volume::new(2, 1, 1, 8, vec![1, 2]).unwrap());
        b[5] = 12;
        assert!(matches!(Volume::read_from(&b[..]), Err(Error::Format(_))));

        let b = bytes(&Volume::new(4, 1, 1, 16, vec![1, 2, 3, 4]).unwrap());
        assert!(matches!(Volume::read_from(&b[..b.len() - 1]), Err(Error::Io(_))));

        // A 16-bit header whose payload was written as 32-bit words holding 70000.
        let mut b = bytes(&Volume::new(1, 1, 1, 16, vec![0]).unwrap());
        b.truncate(HEADER_LEN);
        b.extend_from_slice(&70000u32.to_le_bytes());
        assert!(Volume::read_from(&b[..]).is_err());
    }

    #[test]
    fn normalization_examples() {
        let v = Volume::new(3, 1, 1, 8, vec![0, 255, 128]).unwrap();
        let s = &normalize(&v)[0];
        assert_eq!(s.values[0], 0.0);
        assert_eq!(s.values[1], 1.0);
        let v16 = Volume::new(1, 1, 1, 16, vec![32768]).unwrap();
        let s16 = &normalize(&v16)[0];
        assert!((s16.values[0] - 32768.0 / 65535.0).abs() < 1e-15);
        assert!((s16.values[0] - 0.500008).abs() < 1e-6);
    }

    #[test]
    fn denormalize_rounds_half_away_and_clamps() {
        let s = NormalizedSlice::new(1, 4, vec![0.5, 1.2, -0.3, f64::NAN]).unwrap();
        assert_eq!(denormalize(&s, 8), vec![128, 255, 0, 0]);
    }

    #[test]
    fn padding_examples() {
        let s = NormalizedSlice::new(256, 256, vec![0.25; 256 * 256]).unwrap();
        let (p, rec) = pad_to_multiple(&s, 16);
        assert_eq!(p, s);
        assert_eq!(rec, CropRecord { height: 256, width: 256 });

        let vals: Vec<f64> = (0..250 * 250).map(|i| (i % 97) as f64 / 97.0).collect();
        let s = NormalizedSlice::new(250, 250, vals).unwrap();
        let (p, rec) = pad_to_multiple(&s, 16);
        assert_eq!((p.height, p.width), (256, 256));
        // replicated last column and last row
        assert_eq!(p.values[10 * 256 + 255], s.values[10 * 250 + 249]);
        assert_eq!(p.values[255 * 256 + 3], s.values[249 * 250 + 3]);
        assert_eq!(crop(&p, rec), s);
    }

    #[test]
    fn grouping_examples() {
        let mk = |n: usize| -> Vec<NormalizedSlice> {
            (0..n).map(|i| NormalizedSlice::new(1, 1, vec![i as f64]).unwrap()).collect()
        };
        let lens = |n, s| group_slices(mk(n), s).iter().map(|g| g.slices.len()).collect::<Vec<_>>();
        assert_eq!(lens(33, 16), vec![16, 16, 1]);
        assert_eq!(lens(16, 16), vec![16]);
        assert_eq!(lens(5, 2), vec![2, 2, 1]);
        assert!(group_slices(Vec::new(), 4).is_empty());
    }

    proptest! {
        #[test]
        fn vvol_round_trip_is_byte_identical(
            w in 1usize..6, h in 1usize..6, d in 1usize..4, wide in any::<bool>(), seed in any::<u64>()
        ) {
            let bd = if wide { 16 } else { 8 };
            let max = (1u64 << bd) - 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = (0..w * h * d).map(|_| rng.gen_range(0..=max) as u32).collect();
            let v = Volume::new(w, h, d, bd, samples).unwrap();
            let b = bytes(&v);
            let back = Volume::read_from(&b[..]).unwrap();
            prop_assert_eq!(&back, &v);
            prop_assert_eq!(bytes(&back), b);
            // denormalize(normalize(v)) is the identity on integer inputs
            for (z, s) in normalize(&v).iter().enumerate() {
                prop_assert_eq!(denormalize(s, bd), v.slice(z).to_vec());
            }
        }

        #[test]
        fn pad_then_crop_is_lossless(h in 1usize..40, w in 1usize..40, m in 1usize..20) {
            let vals: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.173).fract()).collect();
            let s = NormalizedSlice::new(h, w, vals).unwrap();
            let (p, rec) = pad_to_multiple(&s, m);
            prop_assert_eq!(p.height % m, 0);
            prop_assert_eq!(p.width % m, 0);
            prop_assert!(p.height < h + m && p.width < w + m);
            prop_assert_eq!(crop(&p, rec), s);
        }

        #[test]
        fn grouping_is_a_partition(n in 0usize..60, stride in 1usize..20) {
            let slices: Vec<NormalizedSlice> =
                (0..n).map(|i| NormalizedSlice::new(1, 1, vec![i as f64]).unwrap()).collect();
            let groups = group_slices(slices.clone(), stride);
            let flat: Vec<NormalizedSlice> = groups.iter().flat_map(|g| g.slices.clone()).collect();
            prop_assert_eq!(flat, slices);
            for (i, g) in groups.iter().enumerate() {
                prop_assert_eq!(g.group_index, i);
                prop_assert!(!g.slices.is_empty() && g.slices.len() <= stride);
                if i + 1 < groups.len() {
                    prop_assert_eq!(g.slices.len(), stride);
                }
            }
        }

        #[test]
        fn normalize_is_monotone(a in 0u32..65536, b in 0u32..65536) {
            let v = Volume::new(2, 1, 1, 16, vec![a, b]).unwrap();
            let s = &normalize(&v)[0];
            prop_assert_eq!(a.cmp(&b), s.values[0].partial_cmp(&s.values[1]).unwrap());
        }
    }
}
