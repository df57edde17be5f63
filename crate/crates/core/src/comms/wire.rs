//! Upload framing and the stateful client/server ends of the codec.
//!
//! Frame layout (big-endian):
//!
//! ```text
//! round: u32 | client: u32 | codec: u8 | dim: u32 | nnz: u32 | clip: f64
//! index stream: nnz LEB128 varints, first index then gaps (absent if dense)
//! values: nnz f32, or an entropy blob of quantized symbols
//! ```
//!
//! The codec byte holds flags in its low nibble and `bits - 1` of the
//! quantizer in its high nibble.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{Layout, ParamVector};

use super::huffman::{entropy_decode, entropy_encode, EncodedBlob};
use super::quantize::{dequantize, quantize};
use super::sparse::{topk_sparsify, SparseUpdate};

pub const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 8;

pub const FLAG_ENTROPY: u8 = 0x01;
pub const FLAG_QUANTIZED: u8 = 0x02;
pub const FLAG_DELTA: u8 = 0x04;
pub const FLAG_DENSE: u8 = 0x08;

pub fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *bytes.get(*pos).ok_or_else(|| Error::Format("varint truncated".into()))?;
        *pos += 1;
        v |= ((byte & 0x7f) as u64) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Format("varint longer than 64 bits".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireHeader {
    pub round: u32,
    pub client: u32,
    pub codec: u8,
    pub dim: u32,
    pub nnz: u32,
    pub clip: f64,
}

impl WireHeader {
    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.client.to_be_bytes());
        out.push(self.codec);
        out.extend_from_slice(&self.dim.to_be_bytes());
        out.extend_from_slice(&self.nnz.to_be_bytes());
        out.extend_from_slice(&self.clip.to_be_bytes());
    }

    pub fn read(bytes: &[u8]) -> Result<WireHeader> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("frame header truncated".into()));
        }
        let u32_at = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
        Ok(WireHeader {
            round: u32_at(0),
            client: u32_at(4),
            codec: bytes[8],
            dim: u32_at(9),
            nnz: u32_at(13),
            clip: f64::from_be_bytes(bytes[17..25].try_into().unwrap()),
        })
    }

    pub fn flags(&self) -> u8 {
        self.codec & 0x0f
    }

    pub fn bits(&self) -> u8 {
        (self.codec >> 4) + 1
    }
}

/// Which compression stages an upload goes through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommsConfig {
    /// Off means dense 32-bit uploads.
    pub enabled: bool,
    /// Fraction of coordinates kept by top-k; `None` disables sparsification.
    pub k_fraction: Option<f64>,
    pub delta: bool,
    pub quantize_bits: Option<u8>,
    pub huffman: bool,
    /// Percentile of |values| used as the quantizer clip.
    pub clip_percentile: f64,
}

impl Default for CommsConfig {
    fn default() -> Self {
        CommsConfig::full()
    }
}

impl CommsConfig {
    pub fn dense() -> Self {
        CommsConfig { enabled: false, ..CommsConfig::full() }
    }

    pub fn sparse_only() -> Self {
        CommsConfig { enabled: true, k_fraction: Some(0.1), delta: false, quantize_bits: None, huffman: false, clip_percentile: 99.9 }
    }

    pub fn sparse_delta() -> Self {
        CommsConfig { delta: true, ..CommsConfig::sparse_only() }
    }

    pub fn full() -> Self {
        CommsConfig { enabled: true, k_fraction: Some(0.1), delta: true, quantize_bits: Some(8), huffman: true, clip_percentile: 99.9 }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.k_fraction {
            if !(k > 0.0 && k <= 1.0) {
                return Err(invalid("comms.k_fraction must lie in (0, 1]"));
            }
        }
        if let Some(b) = self.quantize_bits {
            if !(2..=16).contains(&b) {
                return Err(invalid("comms.quantize_bits must lie in [2, 16]"));
            }
        }
        if self.huffman && self.quantize_bits.is_none() {
            return Err(invalid("comms.huffman needs comms.quantize_bits"));
        }
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 100.0) {
            return Err(invalid("comms.clip_percentile must lie in (0, 100]"));
        }
        Ok(())
    }

    /// Number of coordinates top-k keeps out of `dim`.
    pub fn k_for(&self, dim: usize) -> Option<usize> {
        self.k_fraction.map(|f| ((f * dim as f64).ceil() as usize).clamp(1, dim.max(1)).min(dim))
    }
}

/// Nearest-rank percentile of |values|, falling back to the largest
/// magnitude and then to the smallest positive float so the clip is positive.
pub fn percentile_clip(values: &[f64], percentile: f64) -> f64 {
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    if mags.is_empty() {
        return f64::MIN_POSITIVE;
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0 * mags.len() as f64 - 1e-9).ceil() as usize).clamp(1, mags.len());
    let clip = mags[rank - 1];
    if clip > 0.0 {
        clip
    } else if *mags.last().unwrap() > 0.0 {
        *mags.last().unwrap()
    } else {
        f64::MIN_POSITIVE
    }
}

struct EncodedValues {
    bytes: Vec<u8>,
    flags: u8,
    clip: f64,
    /// What the receiver will decode.
    decoded: Vec<f64>,
}

fn encode_values(values: &[f64], cfg: &CommsConfig) -> Result<EncodedValues> {
    match cfg.quantize_bits {
        Some(bits) => {
            let clip = percentile_clip(values, cfg.clip_percentile);
            let q = quantize(values, bits, clip)?;
            let blob = if cfg.huffman { entropy_encode(&q.symbols) } else { raw_symbols(&q.symbols, bits) };
            let decoded = dequantize(&q.symbols, bits, clip)?;
            let mut flags = FLAG_QUANTIZED | ((bits - 1) << 4);
            if cfg.huffman {
                flags |= FLAG_ENTROPY;
            }
            Ok(EncodedValues { bytes: blob.to_bytes(), flags, clip, decoded })
        }
        None => {
            let mut bytes = Vec::with_capacity(values.len() * 4);
            let mut decoded = Vec::with_capacity(values.len());
            for &v in values {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::Range(format!("value {v} does not fit an f32")));
                }
                bytes.extend_from_slice(&f.to_be_bytes());
                decoded.push(f as f64);
            }
            Ok(EncodedValues { bytes, flags: 0, clip: 0.0, decoded })
        }
    }
}

fn raw_symbols(symbols: &[u16], bits: u8) -> EncodedBlob {
    let mut blob = entropy_encode(&[]);
    blob.codec = super::huffman::CodecId::Raw;
    blob.raw_width = bits;
    blob.symbol_count = symbols.len();
    let mut acc = Vec::new();
    let mut used = 8u8;
    for &s in symbols {
        for shift in (0..bits).rev() {
            if used == 8 {
                acc.push(0u8);
                used = 0;
            }
            *acc.last_mut().unwrap() |= (((s >> shift) & 1) as u8) << (7 - used);
            used += 1;
        }
    }
    blob.payload = acc;
    blob
}

fn write_frame(header: WireHeader, indices: &[u32], dense: bool, values: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + indices.len() + values.len());
    header.write(&mut out);
    if !dense {
        let mut prev = 0u32;
        for (i, &idx) in indices.iter().enumerate() {
            write_varint(&mut out, if i == 0 { idx as u64 } else { (idx - prev) as u64 });
            prev = idx;
        }
    }
    out.extend_from_slice(values);
    out
}

/// Byte length of a dense 32-bit frame for `dim` parameters.
pub fn dense_frame_len(dim: usize) -> usize {
    HEADER_LEN + 4 * dim
}

/// Sender side: error-feedback residual and the receiver's view of the
/// previous upload.
#[derive(Debug, Clone, Default)]
pub struct ClientEncoder {
    residual: Option<ParamVector>,
    previous: Option<SparseUpdate>,
}

impl ClientEncoder {
    pub fn residual(&self) -> Option<&ParamVector> {
        self.residual.as_ref()
    }

    /// Frames `delta` for upload. With delta coding enabled, the encoder
    /// sends whichever of the direct and the differential encodings is
    /// shorter and flags the choice in the codec byte.
    pub fn encode(&mut self, delta: &ParamVector, cfg: &CommsConfig, round: u32, client: u32) -> Result<Vec<u8>> {
        let dim = delta.len();
        let dense_mode = !cfg.enabled || cfg.k_fraction.is_none();
        let current = if dense_mode {
            SparseUpdate::from_dense(delta.values())
        } else {
            let k = cfg.k_for(dim).unwrap_or(dim);
            let residual = self.residual.take().unwrap_or_else(|| ParamVector::zeros(delta.layout().clone()));
            let (sparse, rest) = topk_sparsify(delta, k, &residual)?;
            self.residual = Some(rest);
            sparse
        };
        let value_cfg = if cfg.enabled { cfg.clone() } else { CommsConfig { quantize_bits: None, huffman: false, ..cfg.clone() } };

        let mut best = encode_values(&current.values, &value_cfg)?;
        let mut base: Option<&SparseUpdate> = None;
        if cfg.enabled && cfg.delta {
            if let Some(prev) = self.previous.as_ref().filter(|p| p.dim == dim) {
                let diff = current.diff_on_support(prev)?;
                let candidate = encode_values(&diff.values, &value_cfg)?;
                if candidate.bytes.len() < best.bytes.len() {
                    best = candidate;
                    best.flags |= FLAG_DELTA;
                    base = Some(prev);
                }
            }
        }
        let decoded = SparseUpdate { dim, indices: current.indices.clone(), values: best.decoded.clone() };
        let reconstructed = match base {
            Some(prev) => decoded.apply_on_support(prev)?,
            None => decoded,
        };
        let mut flags = best.flags;
        if dense_mode {
            flags |= FLAG_DENSE;
        }
        let header = WireHeader {
            round,
            client,
            codec: flags,
            dim: dim as u32,
            nnz: current.nnz() as u32,
            clip: best.clip,
        };
        let frame = write_frame(header, &current.indices, dense_mode, &best.bytes);
        self.previous = Some(reconstructed);
        Ok(frame)
    }
}

/// Receiver side: decodes frames, tracking each client's previous upload.
#[derive(Debug, Clone, Default)]
pub struct ServerDecoder {
    previous: BTreeMap<u32, SparseUpdate>,
}

impl ServerDecoder {
    pub fn decode(&mut self, frame: &[u8], layout: &Layout) -> Result<(WireHeader, ParamVector)> {
        let header = WireHeader::read(frame)?;
        let dim = header.dim as usize;
        if dim != layout.total() {
            return Err(Error::Shape(format!("frame dimension {dim} vs model {}", layout.total())));
        }
        let nnz = header.nnz as usize;
        let flags = header.flags();
        let mut pos = HEADER_LEN;
        let indices: Vec<u32> = if flags & FLAG_DENSE != 0 {
            if nnz != dim {
                return Err(Error::Format("dense frame with nnz != dim".into()));
            }
            (0..dim as u32).collect()
        } else {
            let mut out = Vec::with_capacity(nnz);
            let mut prev = 0u64;
            for i in 0..nnz {
                let v = read_varint(frame, &mut pos)?;
                let idx = if i == 0 { v } else { prev + v };
                if idx >= dim as u64 || (i > 0 && v == 0) {
                    return Err(Error::Format("bad index stream".into()));
                }
                out.push(idx as u32);
                prev = idx;
            }
            out
        };
        let body = &frame[pos..];
        let values = if flags & FLAG_QUANTIZED != 0 {
            let blob = EncodedBlob::from_bytes(body)?;
            let symbols = entropy_decode(&blob)?;
            if symbols.len() != nnz {
                return Err(Error::Format("symbol count does not match nnz".into()));
            }
            dequantize(&symbols, header.bits(), header.clip)?
        } else {
            if body.len() != 4 * nnz {
                return Err(Error::Format(format!("expected {} value bytes, got {}", 4 * nnz, body.len())));
            }
            body.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap()) as f64).collect()
        };
        let decoded = SparseUpdate::new(dim, indices, values)?;
        let current = if flags & FLAG_DELTA != 0 {
            let prev = self
                .previous
                .get(&header.client)
                .ok_or_else(|| Error::Format(format!("delta frame from client {} without a previous upload", header.client)))?;
            decoded.apply_on_support(prev)?
        } else {
            decoded
        };
        let dense = ParamVector::from_values(layout.clone(), current.to_dense())?;
        self.previous.insert(header.client, current);
        Ok((header, dense))
    }
}
