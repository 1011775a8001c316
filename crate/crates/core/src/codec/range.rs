//! Byte-oriented range coder with carry propagation and 16-bit frequency
//! totals.

use crate::error::{Error, Result};

pub const TOTAL_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << TOTAL_BITS;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
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
            pending: 1,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[start, start + freq)` out of [`TOTAL`].
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= TOTAL);
        let r = self.range >> TOTAL_BITS;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low >> 32 != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        // the encoder's first byte is always zero (the interval never
        // reaches 2³²), so anything else is corruption
        if d.next_byte()? != 0 {
            return Err(Error::Corrupt("range-coded section does not start with 0".into()));
        }
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::Corrupt("range-coded section is truncated".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Returns the cumulative frequency that identifies the next symbol.
    pub fn peek(&self) -> Result<u32> {
        let v = self.code / (self.range >> TOTAL_BITS);
        if v >= TOTAL {
            return Err(Error::Corrupt("range decoder left the coding interval".into()));
        }
        Ok(v)
    }

    /// Consumes the interval chosen after [`Self::peek`].
    pub fn consume(&mut self, start: u32, freq: u32) -> Result<()> {
        let r = self.range >> TOTAL_BITS;
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(())
    }

    /// True when every byte has been read and the final state is the one
    /// the encoder's flush leaves behind.
    pub fn is_exhausted(&self) -> bool {
        self.pos == self.data.len() && self.code == 0
    }
}
