//! Communication-reduction stack and network accounting.
//!
//! Uploads flow through top-k sparsification (with an error-feedback
//! residual), optional delta coding against the previous upload, optional
//! uniform quantization and canonical Huffman coding, and finally the wire
//! framing in [`wire`]. [`link`] models transfer times and counts bytes.

pub mod huffman;
pub mod link;
pub mod quantize;
pub mod sparse;
pub mod wire;

pub use huffman::{entropy_decode, entropy_encode, huffman_code_lengths, CodecId, EncodedBlob};
pub use link::{transmit, Direction, LinkModel, TrafficLedger};
pub use quantize::{dequantize, quantize, Quantized};
pub use sparse::{delta_decode, delta_encode, topk_sparsify, DeltaEntry, DeltaPayload, SparseUpdate};
pub use wire::{ClientEncoder, CommsConfig, ServerDecoder, WireHeader};
