//! Quantized CDF tables and a byte-oriented range coder.
//!
//! The coder keeps a 64-bit `low` with delayed carry propagation and a 32-bit
//! `range`, renormalizing a byte at a time whenever `range < 2^24`. All tables
//! share a total of `2^16`.

use crate::error::{Error, Result};
use crate::nn::gauss_bin_mass;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
/// Symbols in `[−TAIL, TAIL]` are coded directly; anything else escapes.
pub const TAIL: i32 = 64;
pub const ALPHABET: usize = (2 * TAIL + 1) as usize;
/// Index of the escape symbol.
pub const ESCAPE: usize = ALPHABET;
const SYMBOLS: usize = ALPHABET + 1;
/// Smallest scale a Gaussian table is built for.
pub const SIGMA_MIN: f64 = 1e-4;

const TOP: u32 = 1 << 24;
/// Zero bytes the decoder may invent past the end before calling it truncation.
const MAX_PHANTOM_BYTES: usize = 4;

/// Cumulative frequencies over `[−TAIL, TAIL]` plus escape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cum: [u32; SYMBOLS + 1],
}

impl CdfTable {
    /// Quantize a probability vector over `[−TAIL, TAIL]`; the remaining mass
    /// goes to the escape symbol. Every symbol keeps a frequency of at least 1.
    pub fn from_pmf(pmf: &[f64]) -> Self {
        assert_eq!(pmf.len(), ALPHABET, "pmf must cover the coded alphabet");
        let spread = f64::from(TOTAL - SYMBOLS as u32);
        let clean = |p: f64| if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
        let mut freq = [0u32; SYMBOLS];
        let mut inside = 0.0;
        for (f, &p) in freq.iter_mut().zip(pmf) {
            let p = clean(p);
            inside += p;
            *f = 1 + (p * spread).floor() as u32;
        }
        freq[ESCAPE] = 1 + ((1.0 - inside).max(0.0) * spread).floor() as u32;
        let used: u32 = freq.iter().sum();
        let mut top = 0;
        for (i, &f) in freq.iter().enumerate() {
            if f > freq[top] {
                top = i;
            }
        }
        freq[top] += TOTAL - used;
        let mut cum = [0u32; SYMBOLS + 1];
        for i in 0..SYMBOLS {
            cum[i + 1] = cum[i] + freq[i];
        }
        CdfTable { cum }
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cum[index + 1] - self.cum[index]
    }

    /// Probability the table actually assigns to symbol `s` (escape mass for
    /// out-of-alphabet symbols, excluding the raw payload).
    pub fn prob(&self, s: i32) -> f64 {
        f64::from(self.freq(index_of(s).unwrap_or(ESCAPE))) / f64::from(TOTAL)
    }

    /// Exact number of bits the coder spends on `s`.
    pub fn cost_bits(&self, s: i32) -> f64 {
        match index_of(s) {
            Some(i) => -(f64::from(self.freq(i)) / f64::from(TOTAL)).log2(),
            None => -(f64::from(self.freq(ESCAPE)) / f64::from(TOTAL)).log2() + 16.0,
        }
    }

    fn lookup(&self, value: u32) -> usize {
        // Largest i with cum[i] <= value.
        self.cum.partition_point(|&c| c <= value) - 1
    }
}

/// Zero-mean discretized Gaussian table for scale `sigma`.
pub fn build_cdf(sigma: f64) -> CdfTable {
    let sigma = sigma.max(SIGMA_MIN);
    let pmf: Vec<f64> = (-TAIL..=TAIL).map(|s| gauss_bin_mass(f64::from(s), sigma)).collect();
    CdfTable::from_pmf(&pmf)
}

fn index_of(s: i32) -> Option<usize> {
    (-TAIL..=TAIL).contains(&s).then(|| (s + TAIL) as usize)
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut pending = self.cache;
            loop {
                self.out.push(pending.wrapping_add(carry));
                pending = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode_range(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PRECISION_BITS;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Code one symbol; values outside the alphabet escape to 16 raw bits.
    pub fn encode(&mut self, s: i32, table: &CdfTable) -> Result<()> {
        match index_of(s) {
            Some(i) => self.encode_range(table.cum[i], table.freq(i)),
            None => {
                let raw = i16::try_from(s)
                    .map_err(|_| Error::Domain(format!("symbol {s} exceeds the 16-bit escape range")))?;
                self.encode_range(table.cum[ESCAPE], table.freq(ESCAPE));
                self.encode_range(u32::from(raw as u16), 1);
            }
        }
        Ok(())
    }

    /// Terminate the stream with as few bytes as still decode correctly.
    pub fn finish(mut self) -> Vec<u8> {
        if self.out.is_empty() && self.cache_size == 1 && self.low == 0 && self.range == u32::MAX {
            return Vec::new();
        }
        // Pick the point in [low, low + range) with the most trailing zero bytes.
        let end = self.low + u64::from(self.range);
        for shift in [32u32, 24, 16, 8, 0] {
            let mask = (1u64 << shift) - 1;
            let v = (self.low + mask) & !mask;
            if v < end {
                self.low = v;
                break;
            }
        }
        let body = self.out.len() + self.cache_size as usize;
        for _ in 0..5 {
            self.shift_low();
        }
        let mut out = self.out;
        // The decoder re-creates zero bytes past the end, so trailing zeros
        // written by the flush are free to drop.
        let keep = out.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1).max(body.min(out.len()));
        out.truncate(keep);
        // The first byte is the initial cache and always zero.
        debug_assert_eq!(out.first().copied().unwrap_or(0), 0);
        if !out.is_empty() {
            out.remove(0);
        }
        out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    phantom: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder { data, pos: 0, phantom: 0, code: 0, range: u32::MAX };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> u8 {
        match self.data.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                b
            }
            None => {
                self.phantom += 1;
                0
            }
        }
    }

    fn check(&self) -> Result<()> {
        if self.phantom > MAX_PHANTOM_BYTES {
            return Err(Error::decode("range-coded stream is truncated"));
        }
        Ok(())
    }

    fn decode_value(&mut self) -> (u32, u32) {
        let r = self.range >> PRECISION_BITS;
        ((self.code / r).min(TOTAL - 1), r)
    }

    fn consume(&mut self, r: u32, cum: u32, freq: u32) {
        self.code = self.code.wrapping_sub(r * cum);
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte());
            self.range <<= 8;
        }
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        let (value, r) = self.decode_value();
        let i = table.lookup(value);
        self.consume(r, table.cum[i], table.freq(i));
        let s = if i == ESCAPE {
            let (raw, r) = self.decode_value();
            self.consume(r, raw, 1);
            i32::from(raw as u16 as i16)
        } else {
            i as i32 - TAIL
        };
        self.check()?;
        Ok(s)
    }

    /// Bytes of real input consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Code `symbols[i]` under `tables[i]`.
pub fn rc_encode(symbols: &[i32], tables: &[CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::shape(format!("{} symbols but {} tables", symbols.len(), tables.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t)?;
    }
    Ok(enc.finish())
}

pub fn rc_decode(bytes: &[u8], tables: &[CdfTable]) -> Result<Vec<i32>> {
    if tables.is_empty() {
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(bytes)?;
    tables.iter().map(|t| dec.decode(t)).collect()
}
