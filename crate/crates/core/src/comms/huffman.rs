//! Canonical Huffman coding of `u16` symbol streams.
//!
//! A blob serializes as `codec: u8, symbol_count: u32 BE`, then
//!
//! - raw: `width: u8` and the symbols packed MSB-first at that bit width;
//! - huffman: `entries: u32 BE`, per entry a LEB128 symbol gap and a code
//!   length byte, then the code bits packed MSB-first.
//!
//! A stream made of a single distinct symbol is a one-entry table with code
//! length zero and no code bits, i.e. a run-length header.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use crate::error::{Error, Result};

use super::wire::{read_varint, write_varint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecId {
    Raw = 0,
    Huffman = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBlob {
    pub codec: CodecId,
    pub symbol_count: usize,
    /// `(symbol, code length)` sorted by symbol; empty for raw blobs.
    pub code_lengths: Vec<(u16, u8)>,
    /// Bit width for raw blobs.
    pub raw_width: u8,
    pub payload: Vec<u8>,
}

struct BitWriter {
    bytes: Vec<u8>,
    used: u8,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { bytes: Vec::new(), used: 8 }
    }

    fn push(&mut self, code: u64, len: u8) {
        for shift in (0..len).rev() {
            if self.used == 8 {
                self.bytes.push(0);
                self.used = 0;
            }
            let bit = ((code >> shift) & 1) as u8;
            *self.bytes.last_mut().unwrap() |= bit << (7 - self.used);
            self.used += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn bit(&mut self) -> Result<u64> {
        let byte = self.bytes.get(self.pos / 8).ok_or_else(|| Error::Format("code stream truncated".into()))?;
        let bit = (byte >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Ok(bit as u64)
    }

    fn bits(&mut self, n: u8) -> Result<u64> {
        let mut v = 0;
        for _ in 0..n {
            v = (v << 1) | self.bit()?;
        }
        Ok(v)
    }
}

/// Huffman code lengths for `(symbol, frequency)` pairs, sorted by symbol.
///
/// Equal weights merge in creation order (leaves by symbol first), which
/// makes the lengths deterministic. A single symbol gets length 0.
pub fn huffman_code_lengths(freqs: &[(u16, u64)]) -> Vec<(u16, u8)> {
    let mut symbols: Vec<(u16, u64)> = freqs.iter().copied().filter(|f| f.1 > 0).collect();
    symbols.sort_by_key(|f| f.0);
    match symbols.len() {
        0 => return Vec::new(),
        1 => return vec![(symbols[0].0, 0)],
        _ => {}
    }
    // node i < n is leaf i; parents are appended as they are created
    let n = symbols.len();
    let mut parent = vec![usize::MAX; n];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = symbols.iter().enumerate().map(|(i, f)| Reverse((f.1, i))).collect();
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        let id = parent.len();
        parent.push(usize::MAX);
        parent[a] = id;
        parent[b] = id;
        heap.push(Reverse((wa + wb, id)));
    }
    symbols
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut depth = 0u8;
            let mut node = i;
            while parent[node] != usize::MAX {
                node = parent[node];
                depth += 1;
            }
            (f.0, depth)
        })
        .collect()
}

/// Canonical codes for the given lengths, keyed by symbol.
fn canonical_codes(lengths: &[(u16, u8)]) -> BTreeMap<u16, (u64, u8)> {
    let mut sorted: Vec<(u16, u8)> = lengths.to_vec();
    sorted.sort_by_key(|&(s, l)| (l, s));
    let mut codes = BTreeMap::new();
    let mut code = 0u64;
    let mut prev_len = sorted.first().map_or(0, |e| e.1);
    for (sym, len) in sorted {
        code <<= len - prev_len;
        codes.insert(sym, (code, len));
        code += 1;
        prev_len = len;
    }
    codes
}

fn raw_blob(symbols: &[u16]) -> EncodedBlob {
    let max = symbols.iter().copied().max().unwrap_or(0);
    let width = (16 - max.leading_zeros() as u8).max(1);
    let mut w = BitWriter::new();
    for &s in symbols {
        w.push(s as u64, width);
    }
    EncodedBlob { codec: CodecId::Raw, symbol_count: symbols.len(), code_lengths: Vec::new(), raw_width: width, payload: w.bytes }
}

fn huffman_blob(symbols: &[u16]) -> EncodedBlob {
    let mut counts: BTreeMap<u16, u64> = BTreeMap::new();
    for &s in symbols {
        *counts.entry(s).or_default() += 1;
    }
    let freqs: Vec<(u16, u64)> = counts.into_iter().collect();
    let lengths = huffman_code_lengths(&freqs);
    let codes = canonical_codes(&lengths);
    let mut w = BitWriter::new();
    for s in symbols {
        let (code, len) = codes[s];
        w.push(code, len);
    }
    EncodedBlob { codec: CodecId::Huffman, symbol_count: symbols.len(), code_lengths: lengths, raw_width: 0, payload: w.bytes }
}

/// Canonical Huffman coding, or packed raw symbols when that serializes smaller.
pub fn entropy_encode(symbols: &[u16]) -> EncodedBlob {
    let huff = huffman_blob(symbols);
    let raw = raw_blob(symbols);
    if raw.serialized_len() < huff.serialized_len() {
        raw
    } else {
        huff
    }
}

/// Huffman coding with no raw fallback.
pub fn huffman_encode(symbols: &[u16]) -> EncodedBlob {
    huffman_blob(symbols)
}

pub fn entropy_decode(blob: &EncodedBlob) -> Result<Vec<u16>> {
    let mut reader = BitReader { bytes: &blob.payload, pos: 0 };
    match blob.codec {
        CodecId::Raw => (0..blob.symbol_count).map(|_| reader.bits(blob.raw_width).map(|v| v as u16)).collect(),
        CodecId::Huffman => {
            if blob.symbol_count == 0 {
                return Ok(Vec::new());
            }
            match blob.code_lengths.as_slice() {
                [] => return Err(Error::Format("huffman blob without a code table".into())),
                [(sym, 0)] => return Ok(vec![*sym; blob.symbol_count]),
                _ => {}
            }
            let mut sorted = blob.code_lengths.clone();
            sorted.sort_by_key(|&(s, l)| (l, s));
            if sorted[0].1 == 0 {
                return Err(Error::Format("zero code length in a multi-symbol table".into()));
            }
            let max_len = sorted.last().unwrap().1 as usize;
            if max_len > 63 {
                return Err(Error::Format("code length above 63".into()));
            }
            let mut count = vec![0u64; max_len + 1];
            for &(_, l) in &sorted {
                count[l as usize] += 1;
            }
            let mut first = vec![0u64; max_len + 1];
            let mut offset = vec![0usize; max_len + 1];
            let mut code = 0u64;
            let mut seen = 0usize;
            for len in 1..=max_len {
                code = (code + count[len - 1]) << 1;
                first[len] = code;
                offset[len] = seen;
                seen += count[len] as usize;
            }
            let mut out = Vec::with_capacity(blob.symbol_count);
            for _ in 0..blob.symbol_count {
                let mut code = 0u64;
                let mut len = 0usize;
                loop {
                    code = (code << 1) | reader.bit()?;
                    len += 1;
                    if len > max_len {
                        return Err(Error::Format("invalid huffman code".into()));
                    }
                    if count[len] > 0 && code >= first[len] && code - first[len] < count[len] {
                        out.push(sorted[offset[len] + (code - first[len]) as usize].0);
                        break;
                    }
                }
            }
            Ok(out)
        }
    }
}

impl EncodedBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.codec as u8];
        out.extend_from_slice(&(self.symbol_count as u32).to_be_bytes());
        match self.codec {
            CodecId::Raw => out.push(self.raw_width),
            CodecId::Huffman => {
                out.extend_from_slice(&(self.code_lengths.len() as u32).to_be_bytes());
                let mut prev = 0u64;
                for (i, &(sym, len)) in self.code_lengths.iter().enumerate() {
                    let gap = if i == 0 { sym as u64 } else { sym as u64 - prev };
                    write_varint(&mut out, gap);
                    out.push(len);
                    prev = sym as u64;
                }
            }
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn serialized_len(&self) -> usize {
        self.to_bytes().len()
    }

    /// Parses a blob that occupies the whole of `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Result<EncodedBlob> {
        let truncated = || Error::Format("blob header truncated".into());
        let codec = match bytes.first().ok_or_else(truncated)? {
            0 => CodecId::Raw,
            1 => CodecId::Huffman,
            c => return Err(Error::Format(format!("unknown blob codec {c}"))),
        };
        let count_bytes = bytes.get(1..5).ok_or_else(truncated)?;
        let symbol_count = u32::from_be_bytes(count_bytes.try_into().unwrap()) as usize;
        let mut pos = 5;
        let mut code_lengths = Vec::new();
        let mut raw_width = 0;
        match codec {
            CodecId::Raw => {
                raw_width = *bytes.get(pos).ok_or_else(truncated)?;
                if !(1..=16).contains(&raw_width) {
                    return Err(Error::Format(format!("raw width {raw_width} out of range")));
                }
                pos += 1;
            }
            CodecId::Huffman => {
                let n = u32::from_be_bytes(bytes.get(pos..pos + 4).ok_or_else(truncated)?.try_into().unwrap()) as usize;
                pos += 4;
                if n > 1 << 16 {
                    return Err(Error::Format("code table larger than the alphabet".into()));
                }
                let mut sym = 0u64;
                for i in 0..n {
                    let gap = read_varint(bytes, &mut pos)?;
                    sym = if i == 0 { gap } else { sym + gap };
                    if sym > u16::MAX as u64 || (i > 0 && gap == 0) {
                        return Err(Error::Format("bad code table symbol".into()));
                    }
                    let len = *bytes.get(pos).ok_or_else(truncated)?;
                    pos += 1;
                    code_lengths.push((sym as u16, len));
                }
            }
        }
        Ok(EncodedBlob { codec, symbol_count, code_lengths, raw_width, payload: bytes[pos..].to_vec() })
    }
}
