//! Range asymmetric numeral systems with a 64-bit state and 32-bit words.
//!
//! The state lives in `[2^31, 2^63)` between operations. Encoding is LIFO:
//! symbols are pushed in reverse of the order the decoder pops them. A
//! payload is the emitted words (little-endian) in emission order followed by
//! the final 64-bit state.
//!
//! Mass tables come from a discretized logistic whose two end symbols absorb
//! the tails. Every symbol of the alphabet keeps a frequency of at least one,
//! so anything inside the alphabet is encodable.

use crate::error::{Error, Result};
use crate::logistic::sigmoid;

/// Lower end of the normalized state interval.
pub const RANS_L: u64 = 1 << 31;

/// Total-mass exponent the codec uses for latent tables.
pub const CODEC_PRECISION: u32 = 24;

/// Integer frequencies over the alphabet `[lo, hi]` summing to `2^precision`.
///
/// Only a window `[wlo, wlo + freq.len())` is stored explicitly; all symbols
/// outside it have frequency one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MassTable {
    lo: i32,
    hi: i32,
    precision: u32,
    wlo: i32,
    freq: Vec<u32>,
    /// `cum[k]` is the cumulative frequency of symbol `wlo + k`; one longer
    /// than `freq`.
    cum: Vec<u32>,
}

fn check_precision(precision: u32, alphabet: u64) -> Result<()> {
    if !(1..=31).contains(&precision) {
        return Err(Error::InvalidArgument(format!("mass precision {precision} outside 1..=31 bits")));
    }
    if (1u64 << precision) < alphabet {
        return Err(Error::InvalidArgument(format!(
            "total mass 2^{precision} is smaller than the alphabet ({alphabet} symbols)"
        )));
    }
    Ok(())
}

impl MassTable {
    /// Explicit table over `lo..lo + freqs.len()`.
    pub fn from_freqs(lo: i32, freqs: &[u32], precision: u32) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::InvalidArgument("empty alphabet".into()));
        }
        check_precision(precision, freqs.len() as u64)?;
        if freqs.contains(&0) {
            return Err(Error::InvalidArgument("every symbol needs a frequency of at least one".into()));
        }
        let total: u64 = freqs.iter().map(|&f| f as u64).sum();
        if total != 1u64 << precision {
            return Err(Error::InvalidArgument(format!("frequencies sum to {total}, expected 2^{precision}")));
        }
        let hi = lo
            .checked_add(freqs.len() as i32 - 1)
            .ok_or_else(|| Error::InvalidArgument("alphabet overflows i32".into()))?;
        Ok(Self::assemble(lo, hi, precision, lo, freqs.to_vec()))
    }

    fn assemble(lo: i32, hi: i32, precision: u32, wlo: i32, freq: Vec<u32>) -> Self {
        let mut cum = Vec::with_capacity(freq.len() + 1);
        let mut acc = (wlo - lo) as u32;
        cum.push(acc);
        for &f in &freq {
            acc += f;
            cum.push(acc);
        }
        Self { lo, hi, precision, wlo, freq, cum }
    }

    pub fn lo(&self) -> i32 {
        self.lo
    }

    pub fn hi(&self) -> i32 {
        self.hi
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    /// `M`.
    pub fn total(&self) -> u64 {
        1 << self.precision
    }

    fn whi(&self) -> i32 {
        self.wlo + self.freq.len() as i32 - 1
    }

    pub fn contains(&self, sym: i32) -> bool {
        (self.lo..=self.hi).contains(&sym)
    }

    /// `F[sym]`; symbol must be in the alphabet.
    pub fn freq(&self, sym: i32) -> u32 {
        debug_assert!(self.contains(sym));
        if sym < self.wlo || sym > self.whi() {
            1
        } else {
            self.freq[(sym - self.wlo) as usize]
        }
    }

    /// `C[sym]`; symbol must be in the alphabet.
    pub fn cum(&self, sym: i32) -> u32 {
        debug_assert!(self.contains(sym));
        if sym < self.wlo {
            (sym - self.lo) as u32
        } else if sym > self.whi() {
            self.cum[self.freq.len()] + (sym - self.whi() - 1) as u32
        } else {
            self.cum[(sym - self.wlo) as usize]
        }
    }

    /// Symbol whose interval `[C, C + F)` contains `slot`.
    pub fn lookup(&self, slot: u32) -> i32 {
        let first = self.cum[0];
        let last = self.cum[self.freq.len()];
        if slot < first {
            self.lo + slot as i32
        } else if slot >= last {
            self.whi() + 1 + (slot - last) as i32
        } else {
            // last k with cum[k] <= slot
            let k = self.cum.partition_point(|&c| c <= slot) - 1;
            self.wlo + k as i32
        }
    }

    /// Every frequency, `lo..=hi`.
    pub fn freqs(&self) -> Vec<u32> {
        (self.lo..=self.hi).map(|s| self.freq(s)).collect()
    }

    /// Ideal code length of `sym` under this table, in bits.
    pub fn cost_bits(&self, sym: i32) -> f64 {
        self.precision as f64 - (self.freq(sym) as f64).log2()
    }
}

/// Tail-collapsed probabilities of `lo..=hi` restricted to `wlo..=whi`:
/// `p(lo)` takes everything below `lo + 1/2`, `p(hi)` everything above
/// `hi - 1/2`. Bins are differences of the CDF below `mu` and of the
/// survival function above it, which keeps the small tail bins accurate.
fn window_probs(wlo: i32, whi: i32, lo: i32, hi: i32, mu: f64, s: f64) -> Vec<f64> {
    // edges[k] = (cdf, sf) at z - 1/2 for z = wlo + k; exp(-t) advances by a
    // constant factor per edge, re-anchored every 32 edges
    let t0 = (wlo as f64 - 0.5 - mu) / s;
    let ratio = (-1.0 / s).exp();
    let mut e = 0.0;
    let edges: Vec<(f64, f64)> = (0..=(whi - wlo + 1) as usize)
        .map(|k| {
            e = if k % 32 == 0 { (-(t0 + k as f64 / s)).exp() } else { e * ratio };
            if e.is_finite() {
                (1.0 / (1.0 + e), 1.0 / (1.0 + 1.0 / e))
            } else {
                let t = t0 + k as f64 / s;
                (sigmoid(t), sigmoid(-t))
            }
        })
        .collect();
    (wlo..=whi)
        .enumerate()
        .map(|(k, z)| {
            let (cdf_lo, sf_lo) = if z == lo { (0.0, 1.0) } else { edges[k] };
            let (cdf_hi, sf_hi) = if z == hi { (1.0, 0.0) } else { edges[k + 1] };
            if (z as f64) < mu {
                cdf_hi - cdf_lo
            } else {
                sf_lo - sf_hi
            }
        })
        .collect()
}

/// Quantize a discretized logistic to integer frequencies totalling
/// `2^precision`.
///
/// Each of the `K` symbols first receives a reserved count of one; the
/// remaining `M - K` are shared out as `floor(p * (M - K))` and the leftover
/// units go to the largest fractional remainders (ties to the lower symbol).
///
/// Only symbols within `s * (ln(M K) + 1) + 1` of `mu` are evaluated. A
/// symbol at distance `d` has `p <= exp(-(d - 1/2) / s)`, so everything
/// outside gets a zero share and a remainder below `1 / K`. The remainders
/// sum to the number of leftover units `R`, which forces the `R`-th largest
/// to be at least `1 / (K - R + 1)`; no outside symbol can win a unit, and
/// the result equals the full-alphabet computation.
pub fn mass_table(mu: f64, s: f64, lo: i32, hi: i32, precision: u32) -> Result<MassTable> {
    if lo >= hi {
        return Err(Error::InvalidArgument(format!("empty alphabet [{lo}, {hi}]")));
    }
    let k = (hi as i64 - lo as i64 + 1) as u64;
    check_precision(precision, k)?;
    if !(mu.is_finite() && s.is_finite() && s > 0.0) {
        return Err(Error::NonFinite("mass table parameters"));
    }
    let budget = ((1u64 << precision) - k) as f64;
    let reach = s * (((1u64 << precision) as f64 * k as f64).ln() + 1.0) + 1.0;
    let wlo = (mu - reach).floor().max(lo as f64).min(hi as f64) as i32;
    let whi = (mu + reach).ceil().min(hi as f64).max(wlo as f64) as i32;

    let n = (whi - wlo + 1) as usize;
    let mut share = Vec::with_capacity(n);
    let mut frac = Vec::with_capacity(n);
    let mut used: u64 = 0;
    for p in window_probs(wlo, whi, lo, hi, mu, s) {
        let x = p.max(0.0) * budget;
        let f = x.floor();
        share.push(f as u64);
        frac.push(x - f);
        used += f as u64;
    }
    let budget = budget as u64;
    if used > budget {
        // Only reachable through rounding in p; take it back from the largest.
        let mut excess = used - budget;
        while excess > 0 {
            let i = (0..n).max_by_key(|&i| (share[i], std::cmp::Reverse(i))).expect("non-empty window");
            let take = excess.min(share[i]);
            share[i] -= take;
            excess -= take;
        }
    } else {
        let mut left = budget - used;
        let take = left.min(n as u64) as usize;
        if take > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            // strict total order, so the selected set is unique
            let by_remainder = |a: &usize, b: &usize| frac[*b].total_cmp(&frac[*a]).then(a.cmp(b));
            if take < n {
                order.select_nth_unstable_by(take - 1, by_remainder);
            }
            for &i in &order[..take] {
                share[i] += 1;
            }
        }
        left = left.saturating_sub(n as u64);
        if left > 0 {
            let i = (0..n).max_by_key(|&i| (share[i], std::cmp::Reverse(i))).expect("non-empty window");
            share[i] += left;
        }
    }
    let freq = share.into_iter().map(|v| v as u32 + 1).collect();
    Ok(MassTable::assemble(lo, hi, precision, wlo, freq))
}

/// `X' = floor(X / F) * M + C + X mod F`.
#[inline]
pub fn rans_encode_step(x: u64, freq: u32, cum: u32, precision: u32) -> u64 {
    let f = freq as u64;
    ((x / f) << precision) + cum as u64 + x % f
}

/// Inverse of [`rans_encode_step`]: the symbol and the previous state.
#[inline]
pub fn rans_decode_step(x: u64, table: &MassTable) -> (i32, u64) {
    let mask = table.total() - 1;
    let slot = (x & mask) as u32;
    let sym = table.lookup(slot);
    let prev = table.freq(sym) as u64 * (x >> table.precision) + slot as u64 - table.cum(sym) as u64;
    (sym, prev)
}

/// Streaming encoder. Push symbols in reverse decode order.
#[derive(Clone, Debug)]
pub struct RansEncoder {
    state: u64,
    words: Vec<u32>,
}

impl Default for RansEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RansEncoder {
    pub fn new() -> Self {
        Self { state: RANS_L, words: Vec::new() }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn put(&mut self, sym: i32, table: &MassTable) -> Result<()> {
        if !table.contains(sym) {
            return Err(Error::AlphabetOverflow { value: sym as i64, lo: table.lo, hi: table.hi });
        }
        let f = table.freq(sym);
        let x_max = ((RANS_L >> table.precision) << 32) * f as u64;
        while self.state >= x_max {
            self.words.push(self.state as u32);
            self.state >>= 32;
        }
        self.state = rans_encode_step(self.state, f, table.cum(sym), table.precision);
        Ok(())
    }

    /// Words emitted since the last call, in emission order.
    pub fn take_words(&mut self) -> Vec<u32> {
        std::mem::take(&mut self.words)
    }

    /// Remaining words followed by the final state.
    pub fn finish(self) -> Vec<u8> {
        let mut out = words_to_bytes(&self.words);
        out.extend_from_slice(&self.state.to_le_bytes());
        out
    }
}

pub fn words_to_bytes(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn bytes_to_words(bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Corrupt(format!("{} bytes is not a whole number of words", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Streaming decoder. Words are consumed from the back of the current
/// segment, i.e. in reverse emission order.
#[derive(Clone, Debug)]
pub struct RansDecoder {
    state: u64,
    words: Vec<u32>,
}

impl RansDecoder {
    pub fn from_state(state: u64) -> Result<Self> {
        if !(RANS_L..1 << 63).contains(&state) {
            return Err(Error::Corrupt(format!("state {state:#x} outside the normalized interval")));
        }
        Ok(Self { state, words: Vec::new() })
    }

    /// Decoder over a complete single-stream payload.
    pub fn new(payload: &[u8]) -> Result<Self> {
        if payload.len() < 8 {
            return Err(Error::Truncated);
        }
        let (words, tail) = payload.split_at(payload.len() - 8);
        let mut d = Self::from_state(u64::from_le_bytes(tail.try_into().unwrap()))?;
        d.words = bytes_to_words(words)?;
        Ok(d)
    }

    /// Replace the pending words with a new segment (emission order).
    pub fn set_words(&mut self, words: Vec<u32>) {
        self.words = words;
    }

    pub fn words_left(&self) -> usize {
        self.words.len()
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn get(&mut self, table: &MassTable) -> Result<i32> {
        let (sym, prev) = rans_decode_step(self.state, table);
        self.state = prev;
        while self.state < RANS_L {
            let w = self.words.pop().ok_or(Error::Truncated)?;
            self.state = (self.state << 32) | w as u64;
        }
        if self.state >= 1 << 63 {
            return Err(Error::Corrupt("state overflow while decoding".into()));
        }
        Ok(sym)
    }

    /// A well-formed stream ends with every word consumed and the state
    /// back at its initial value.
    pub fn finish(&self) -> Result<()> {
        if !self.words.is_empty() || self.state != RANS_L {
            return Err(Error::Corrupt(format!(
                "stream did not end cleanly ({} words left, state {:#x})",
                self.words.len(),
                self.state
            )));
        }
        Ok(())
    }
}

/// Encode `symbols[i]` under `tables[i]` into one payload.
pub fn encode_stream(symbols: &[i32], tables: &[MassTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::InvalidArgument(format!("{} symbols but {} tables", symbols.len(), tables.len())));
    }
    let mut enc = RansEncoder::new();
    for (&s, t) in symbols.iter().zip(tables).rev() {
        enc.put(s, t)?;
    }
    Ok(enc.finish())
}

pub fn decode_stream(payload: &[u8], tables: &[MassTable]) -> Result<Vec<i32>> {
    let mut dec = RansDecoder::new(payload)?;
    let out = tables.iter().map(|t| dec.get(t)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
