//! Byte-oriented range coder over 16-bit cumulative frequency tables.
//!
//! 64-bit `low` with a cached byte for carry propagation and a 32-bit
//! `range`. Symbol intervals are `[⌊range·cdf[s] / 2^16⌋, ⌊range·cdf[s+1] / 2^16⌋)`,
//! which tile the current range exactly, so no probability mass is lost to
//! truncation.

use crate::error::{Error, Result};
use crate::likelihood::{build_cdf_table, CDF_PRECISION_BITS};

const TOP: u32 = 1 << 24;
const TOTAL: u64 = 1 << CDF_PRECISION_BITS;

fn check_cdf(cdf: &[u32]) -> Result<()> {
    if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().unwrap() as u64 != TOTAL {
        return Err(Error::InvalidCdf(format!(
            "table of length {} must run from 0 to {TOTAL}",
            cdf.len()
        )));
    }
    if cdf.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidCdf("table is not strictly increasing".into()));
    }
    Ok(())
}

#[inline]
fn bound(range: u32, c: u32) -> u32 {
    ((range as u64 * c as u64) >> CDF_PRECISION_BITS) as u32
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    started: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 0,
            out: Vec::new(),
            started: false,
        }
    }

    pub fn encode_symbol(&mut self, symbol: usize, cdf: &[u32]) -> Result<()> {
        check_cdf(cdf)?;
        if symbol + 1 >= cdf.len() {
            return Err(Error::SymbolOutOfRange {
                symbol,
                alphabet: cdf.len() - 1,
            });
        }
        let lo = bound(self.range, cdf[symbol]);
        let hi = if symbol + 2 == cdf.len() {
            self.range
        } else {
            bound(self.range, cdf[symbol + 1])
        };
        self.low += lo as u64;
        self.range = hi - lo;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            if self.started {
                self.out.push(self.cache.wrapping_add(carry));
            }
            for _ in 0..self.pending {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = (self.low >> 24) as u8;
            self.started = true;
        } else {
            self.pending += 1;
        }
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Flushes the state; at most five bytes follow the last symbol.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        // The final shifts only move zero bytes out of `low`; trailing zeros
        // are implied by the decoder.
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    #[inline]
    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode_symbol(&mut self, cdf: &[u32]) -> Result<usize> {
        check_cdf(cdf)?;
        if self.code >= self.range {
            return Err(Error::CorruptStream(
                "decoder state outside the coding range".into(),
            ));
        }
        let m = cdf.len() - 1;
        // Largest s with bound(range, cdf[s]) <= code.
        let (mut lo_s, mut hi_s) = (0usize, m);
        while hi_s - lo_s > 1 {
            let mid = (lo_s + hi_s) / 2;
            if bound(self.range, cdf[mid]) <= self.code {
                lo_s = mid;
            } else {
                hi_s = mid;
            }
        }
        let s = lo_s;
        let lo = bound(self.range, cdf[s]);
        let hi = if s + 1 == m {
            self.range
        } else {
            bound(self.range, cdf[s + 1])
        };
        self.code -= lo;
        self.range = hi - lo;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
        Ok(s)
    }

    /// Bytes consumed beyond the end of the input (implied zero padding).
    pub fn overrun(&self) -> usize {
        self.pos.saturating_sub(self.input.len())
    }
}

/// Fixed CDF of the uniform distribution over `m` symbols.
pub fn uniform_cdf(m: usize) -> Result<Vec<u32>> {
    build_cdf_table(&vec![1.0 / m as f64; m], CDF_PRECISION_BITS)
}

/// Codes `symbols` with the uniform distribution over `m` symbols.
pub fn encode_uniform(symbols: &[u16], m: usize) -> Result<Vec<u8>> {
    if m < 2 {
        return Err(Error::InvalidCdf(format!("uniform alphabet of size {m}")));
    }
    let cdf = uniform_cdf(m)?;
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        enc.encode_symbol(s as usize, &cdf)?;
    }
    Ok(enc.finish())
}

pub fn decode_uniform(bytes: &[u8], count: usize, m: usize) -> Result<Vec<u16>> {
    if m < 2 {
        return Err(Error::InvalidCdf(format!("uniform alphabet of size {m}")));
    }
    let cdf = uniform_cdf(m)?;
    let mut dec = RangeDecoder::new(bytes);
    (0..count)
        .map(|_| dec.decode_symbol(&cdf).map(|s| s as u16))
        .collect()
}
