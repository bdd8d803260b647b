//! Streaming inference for the causal codec: chunked encode/decode with
//! cached history, the packed code bitstream, and a per-window latency bench.

pub mod bench;
pub mod bitstream;
pub mod session;

pub use bench::{bench_latency, LatencyRecord, LatencyReport, Verdict};
pub use bitstream::{bitrate, BitstreamError, BitstreamHeader, FrameParser};
pub use session::{stream_decode_chunk, stream_decode_latents, stream_encode_chunk, stream_encode_latents, Role, StreamState};
