//! Adaptive order-0 multi-symbol range coder.
//!
//! Streams are framed as `[u32 length | coded bytes | u32 CRC32]`, all
//! little-endian, so corruption is reported instead of producing symbols.
//! Alphabets up to 4096 symbols are modelled directly; larger alphabets
//! (up to 2^20) are split into a high part and a low byte, each with its
//! own adaptive model.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const MAX_TOTAL: u32 = 1 << 16;
const INCREMENT: u32 = 32;
const DIRECT_LIMIT: usize = 1 << 12;
pub const MAX_ALPHABET: usize = 1 << 20;

/// Frequency table with Fenwick-tree prefix sums.
struct AdaptiveModel {
    freq: Vec<u32>,
    tree: Vec<u32>,
    total: u32,
}

impl AdaptiveModel {
    fn new(n: usize) -> Self {
        let mut m = AdaptiveModel {
            freq: vec![1; n],
            tree: vec![0; n + 1],
            total: n as u32,
        };
        m.rebuild();
        m
    }

    fn rebuild(&mut self) {
        self.tree.iter_mut().for_each(|v| *v = 0);
        for i in 0..self.freq.len() {
            let mut j = i + 1;
            while j < self.tree.len() {
                self.tree[j] += self.freq[i];
                j += j & j.wrapping_neg();
            }
        }
        self.total = self.freq.iter().sum();
    }

    /// Sum of frequencies of symbols `< s`.
    fn cumulative(&self, s: usize) -> u32 {
        let mut acc = 0;
        let mut j = s;
        while j > 0 {
            acc += self.tree[j];
            j &= j - 1;
        }
        acc
    }

    /// Symbol whose cumulative interval contains `target`.
    fn find(&self, mut target: u32) -> usize {
        let n = self.freq.len();
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }

    fn update(&mut self, s: usize) {
        self.freq[s] += INCREMENT;
        self.total += INCREMENT;
        if self.total > MAX_TOTAL {
            for f in &mut self.freq {
                *f = (*f + 1) / 2;
            }
            self.rebuild();
        } else {
            let mut j = s + 1;
            while j < self.tree.len() {
                self.tree[j] += INCREMENT;
                j += j & j.wrapping_neg();
            }
        }
    }
}

struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn encode(&mut self, model: &mut AdaptiveModel, s: usize) {
        let cum = model.cumulative(s);
        let freq = model.freq[s];
        let r = self.range / model.total;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        model.update(s);
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
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

struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    fn new(input: &'a [u8]) -> Result<Self> {
        if input.len() < 5 {
            return Err(Error::format("range-coded payload shorter than 5 bytes"));
        }
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn decode(&mut self, model: &mut AdaptiveModel) -> Result<usize> {
        let r = self.range / model.total;
        let v = self.code / r;
        if v >= model.total {
            return Err(Error::format("range decoder left the coding interval"));
        }
        let s = model.find(v);
        let cum = model.cumulative(s);
        self.code -= r * cum;
        self.range = r * model.freq[s];
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
        model.update(s);
        Ok(s)
    }
}

enum SymbolModel {
    Direct(AdaptiveModel),
    Split { high: AdaptiveModel, low: AdaptiveModel },
}

impl SymbolModel {
    fn new(alphabet: usize) -> Self {
        if alphabet <= DIRECT_LIMIT {
            SymbolModel::Direct(AdaptiveModel::new(alphabet))
        } else {
            SymbolModel::Split {
                high: AdaptiveModel::new(alphabet.div_ceil(256)),
                low: AdaptiveModel::new(256),
            }
        }
    }
}

fn check_alphabet(alphabet_size: usize) -> Result<()> {
    if alphabet_size == 0 || alphabet_size > MAX_ALPHABET {
        return Err(Error::invalid(format!(
            "alphabet size {alphabet_size} outside 1..={MAX_ALPHABET}"
        )));
    }
    Ok(())
}

/// Range-codes `symbols` and wraps them in a length + CRC frame.
pub fn entropy_encode(symbols: &[u32], alphabet_size: usize) -> Result<Vec<u8>> {
    check_alphabet(alphabet_size)?;
    if let Some(bad) = symbols.iter().find(|&&s| s as usize >= alphabet_size) {
        return Err(Error::invalid(format!(
            "symbol {bad} outside alphabet of size {alphabet_size}"
        )));
    }
    let mut enc = RangeEncoder::new();
    let mut model = SymbolModel::new(alphabet_size);
    for &s in symbols {
        let s = s as usize;
        match &mut model {
            SymbolModel::Direct(m) => enc.encode(m, s),
            SymbolModel::Split { high, low } => {
                enc.encode(high, s >> 8);
                enc.encode(low, s & 0xFF);
            }
        }
    }
    let payload = enc.finish();
    let mut framed = Vec::with_capacity(payload.len() + 8);
    framed.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    framed.extend_from_slice(&payload);
    framed.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(framed)
}

/// Size of the frame at the start of `bytes`.
pub fn framed_len(bytes: &[u8]) -> Result<usize> {
    let len = bytes
        .get(..4)
        .ok_or_else(|| Error::format("truncated stream length"))?;
    let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
    let total = len
        .checked_add(8)
        .ok_or_else(|| Error::format("stream length overflow"))?;
    if bytes.len() < total {
        return Err(Error::format(format!(
            "stream needs {total} bytes, only {} available",
            bytes.len()
        )));
    }
    Ok(total)
}

/// Decodes `count` symbols from a frame produced by [`entropy_encode`].
pub fn entropy_decode(bytes: &[u8], count: usize, alphabet_size: usize) -> Result<Vec<u32>> {
    check_alphabet(alphabet_size)?;
    let total = framed_len(bytes)?;
    if total != bytes.len() {
        return Err(Error::format(format!(
            "stream frame is {total} bytes but {} were supplied",
            bytes.len()
        )));
    }
    let payload = &bytes[4..total - 4];
    let crc = u32::from_le_bytes(bytes[total - 4..total].try_into().unwrap());
    if crc32fast::hash(payload) != crc {
        return Err(Error::format("stream checksum mismatch"));
    }
    let mut dec = RangeDecoder::new(payload)?;
    let mut model = SymbolModel::new(alphabet_size);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let s = match &mut model {
            SymbolModel::Direct(m) => dec.decode(m)?,
            SymbolModel::Split { high, low } => {
                let h = dec.decode(high)?;
                (h << 8) | dec.decode(low)?
            }
        };
        if s >= alphabet_size {
            return Err(Error::format(format!("decoded symbol {s} outside alphabet")));
        }
        out.push(s as u32);
    }
    if dec.pos > payload.len() + 4 {
        return Err(Error::format("stream ended before all symbols were decoded"));
    }
    Ok(out)
}

/// Empirical order-0 entropy of `symbols` in bytes.
pub fn empirical_entropy_bytes(symbols: &[u32]) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for &s in symbols {
        *counts.entry(s).or_insert(0usize) += 1;
    }
    let n = symbols.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -(c as f64) * p.log2()
        })
        .sum::<f64>()
        / 8.0
}
