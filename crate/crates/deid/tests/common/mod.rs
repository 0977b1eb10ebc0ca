//! Shared test oracle: a real 32-bit arithmetic coder driven by the codec's
//! GMM bin probabilities. Used to validate codelength accounting against an
//! actually emitted bitstream.

use deid::mdlcodec::{bin_probability, CodecModel, CODE_CLAMP};
use deid::mfm::{FEAT_C, FEAT_HW};

const FREQ_TOTAL: u64 = 1 << 16;
const HALF: u64 = 1 << 31;
const QUARTER: u64 = 1 << 30;
const MASK32: u64 = 0xFFFF_FFFF;

struct BitWriter {
    bits: Vec<bool>,
    pending: u32,
}

impl BitWriter {
    fn emit(&mut self, bit: bool) {
        self.bits.push(bit);
        for _ in 0..self.pending {
            self.bits.push(!bit);
        }
        self.pending = 0;
    }
}

struct ArithmeticEncoder {
    low: u64,
    high: u64,
    out: BitWriter,
}

impl ArithmeticEncoder {
    fn new() -> Self {
        ArithmeticEncoder {
            low: 0,
            high: MASK32,
            out: BitWriter { bits: Vec::new(), pending: 0 },
        }
    }

    fn encode(&mut self, cum_lo: u64, cum_hi: u64, total: u64) {
        let range = self.high - self.low + 1;
        self.high = self.low + range * cum_hi / total - 1;
        self.low += range * cum_lo / total;
        loop {
            if self.high < HALF {
                self.out.emit(false);
            } else if self.low >= HALF {
                self.out.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < 3 * QUARTER {
                self.out.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low = (self.low << 1) & MASK32;
            self.high = ((self.high << 1) | 1) & MASK32;
        }
    }

    fn finish(mut self) -> Vec<bool> {
        self.out.pending += 1;
        let bit = self.low >= QUARTER;
        self.out.emit(bit);
        self.out.bits
    }
}

struct ArithmeticDecoder<'a> {
    low: u64,
    high: u64,
    code: u64,
    bits: &'a [bool],
    pos: usize,
}

impl<'a> ArithmeticDecoder<'a> {
    fn new(bits: &'a [bool]) -> Self {
        let mut d = ArithmeticDecoder { low: 0, high: MASK32, code: 0, bits, pos: 0 };
        for _ in 0..32 {
            d.code = (d.code << 1) | d.next_bit();
        }
        d
    }

    fn next_bit(&mut self) -> u64 {
        let b = if self.pos < self.bits.len() { self.bits[self.pos] as u64 } else { 0 };
        self.pos += 1;
        b
    }

    /// Returns the scaled cumulative value; the caller maps it to a symbol.
    fn decode_target(&self, total: u64) -> u64 {
        let range = self.high - self.low + 1;
        ((self.code - self.low + 1) * total - 1) / range
    }

    fn consume(&mut self, cum_lo: u64, cum_hi: u64, total: u64) {
        let range = self.high - self.low + 1;
        self.high = self.low + range * cum_hi / total - 1;
        self.low += range * cum_lo / total;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.code -= HALF;
            } else if self.low >= QUARTER && self.high < 3 * QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.code -= QUARTER;
            } else {
                break;
            }
            self.low = (self.low << 1) & MASK32;
            self.high = ((self.high << 1) | 1) & MASK32;
            self.code = ((self.code << 1) | self.next_bit()) & MASK32;
        }
    }
}

/// Cumulative frequency table over the clamped symbol alphabet, built from
/// the same GMM bin probabilities the codec reports.
struct FreqTable {
    cum: Vec<u64>, // length alphabet + 1
}

const ALPHABET: usize = 2 * CODE_CLAMP as usize + 1;

impl FreqTable {
    fn from_channel(model: &CodecModel, channel: usize) -> Self {
        let slice = model.gmm_channel(channel);
        let lo = -(CODE_CLAMP as i32);
        let mut counts: Vec<u64> = (0..ALPHABET)
            .map(|i| {
                let p = bin_probability(&slice, lo + i as i32).max(0.0);
                ((p * FREQ_TOTAL as f64).round() as u64).max(1)
            })
            .collect();
        // Keep the grand total at FREQ_TOTAL-ish by trimming the largest bin.
        let sum: u64 = counts.iter().sum();
        if sum > FREQ_TOTAL {
            let excess = sum - FREQ_TOTAL;
            let imax = (0..ALPHABET).max_by_key(|&i| counts[i]).unwrap();
            counts[imax] -= excess.min(counts[imax] - 1);
        }
        let mut cum = vec![0u64; ALPHABET + 1];
        for i in 0..ALPHABET {
            cum[i + 1] = cum[i] + counts[i];
        }
        FreqTable { cum }
    }

    fn total(&self) -> u64 {
        self.cum[ALPHABET]
    }

    fn symbol_of(&self, target: u64) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Encode the grids with the real coder, decode them back (asserting a
/// perfect round trip), and return (stream bits, reported codelength bits).
pub fn coder_roundtrip(model: &CodecModel, grids: &[Vec<i32>]) -> (f64, f64) {
    let hw = FEAT_HW * FEAT_HW;
    let q: Vec<i32> = grids.iter().flatten().copied().collect();
    let tables: Vec<FreqTable> =
        (0..FEAT_C).map(|c| FreqTable::from_channel(model, c)).collect();
    let mut enc = ArithmeticEncoder::new();
    for (i, &sym) in q.iter().enumerate() {
        let c = (i / hw) % FEAT_C;
        let t = &tables[c];
        let idx = (sym + CODE_CLAMP as i32) as usize;
        enc.encode(t.cum[idx], t.cum[idx + 1], t.total());
    }
    let bits = enc.finish();
    let mut dec = ArithmeticDecoder::new(&bits);
    for (i, &sym) in q.iter().enumerate() {
        let c = (i / hw) % FEAT_C;
        let t = &tables[c];
        let idx = t.symbol_of(dec.decode_target(t.total()));
        assert_eq!(idx as i32 - CODE_CLAMP as i32, sym, "decode mismatch at {i}");
        dec.consume(t.cum[idx], t.cum[idx + 1], t.total());
    }
    let reported: f64 = grids.iter().map(|g| model.codelength_bits(g, None)).sum();
    (bits.len() as f64, reported)
}

/// A random grid drawn near the model's own GMM so bin masses are moderate.
pub fn sample_grid(model: &CodecModel, rng: &mut numcore::Rng) -> Vec<i32> {
    let hw = FEAT_HW * FEAT_HW;
    let mut q = Vec::with_capacity(FEAT_C * hw);
    for c in 0..FEAT_C {
        let s = model.gmm_channel(c);
        for _ in 0..hw {
            let k = if rng.next_f64() < s.w[0] {
                0
            } else if rng.next_f64() < s.w[1] / (s.w[1] + s.w[2]) {
                1
            } else {
                2
            };
            let v = s.mu[k] + s.var[k].sqrt() * rng.normal();
            q.push(v.round().clamp(-CODE_CLAMP, CODE_CLAMP) as i32);
        }
    }
    q
}
