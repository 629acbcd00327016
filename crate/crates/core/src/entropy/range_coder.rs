//! Multi-symbol range coder: 32-bit range, 64-bit low with carry
//! propagation, 16-bit frequency tables.

use super::cdf::{CdfTable, PRECISION_BITS, TOTAL};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn encode(&mut self, start: u32, freq: u32) {
        let r = self.range >> PRECISION_BITS;
        self.low += start as u64 * r as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
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

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

struct Decoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Bitstream("range coded stream is truncated".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn decode(&mut self, table: &CdfTable) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let target = (self.code / r).min(TOTAL - 1);
        let i = table.find(target);
        let (start, freq) = table.interval(i);
        self.code -= start * r;
        self.range = r * freq;
        if self.code >= self.range {
            return Err(Error::Bitstream("range coded stream is corrupt".into()));
        }
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(i)
    }
}

/// Codes `symbols[i]` with `tables[i]`. Out-of-range symbols are clamped
/// to the table ends (a lossy step, reported through the log).
pub fn rc_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::shape(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = Encoder::new();
    let mut clamped = 0usize;
    for (&s, table) in symbols.iter().zip(tables) {
        let c = table.clamp(s);
        if c != s {
            clamped += 1;
        }
        let (start, freq) = table.interval((c - table.min()) as usize);
        enc.encode(start, freq);
    }
    if clamped > 0 {
        log::warn!("{clamped} of {} symbols clamped into their table range", symbols.len());
    }
    Ok(enc.finish())
}

/// Decodes `n` symbols; every byte of `bytes` must be consumed.
pub fn rc_decode(bytes: &[u8], tables: &[&CdfTable], n: usize) -> Result<Vec<i32>> {
    if tables.len() != n {
        return Err(Error::shape(format!("{n} symbols requested but {} tables", tables.len())));
    }
    let mut dec = Decoder::new(bytes)?;
    let mut out = Vec::with_capacity(n);
    for table in tables {
        let i = dec.decode(table)?;
        out.push(table.min() + i as i32);
    }
    if dec.pos != bytes.len() {
        return Err(Error::Bitstream(format!(
            "{} trailing bytes after range coded stream",
            bytes.len() - dec.pos
        )));
    }
    Ok(out)
}
