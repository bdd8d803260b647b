//! Packed code stream: a 32-byte header followed by fixed-size frames.
//!
//! Header layout (little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `ADC1`                            |
//! | 4      | 2    | version                                 |
//! | 6      | 1    | decoder variant id                      |
//! | 7      | 1    | number of books                         |
//! | 8      | 1    | bits per code                           |
//! | 9      | 3    | reserved, zero                          |
//! | 12     | 4    | sample rate (Hz)                        |
//! | 16     | 4    | hop (samples)                           |
//! | 20     | 4    | frame count, `0xFFFFFFFF` when streamed |
//! | 24     | 8    | leading bytes of the config hash        |
//!
//! Each frame holds `num_books × bits_per_code` bits, most significant bit
//! first, book 0 first, zero-padded to a whole byte.

use streamdec_core::codec::VariantId;
use streamdec_core::quantizer::CodeFrame;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ADC1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const STREAMING_FRAMES: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown bitstream version {0}")]
    UnknownVersion(u16),
    #[error("unknown decoder variant id {0}")]
    UnknownVariant(u8),
    #[error("header truncated: {0} of 32 bytes")]
    TruncatedHeader(usize),
    #[error("truncated frame at byte offset {offset}: {available} of {frame_bytes} bytes")]
    TruncatedFrame {
        offset: usize,
        available: usize,
        frame_bytes: usize,
    },
    #[error("header declares {declared} frames, payload holds {found}")]
    FrameCount { declared: u32, found: usize },
    #[error("code index {index} in book {book} does not fit in {bits} bits")]
    IndexTooLarge { book: usize, index: u16, bits: u8 },
    #[error("frame has {found} indices, header declares {expected} books")]
    BookCount { expected: usize, found: usize },
    #[error("invalid header field: {0}")]
    InvalidField(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u16,
    pub variant: VariantId,
    pub num_books: u8,
    pub bits_per_code: u8,
    pub sample_rate: u32,
    pub hop: u32,
    /// `None` for open-ended streams.
    pub num_frames: Option<u32>,
    pub config_hash: [u8; 8],
}

impl BitstreamHeader {
    pub fn new(variant: VariantId, sample_rate: u32, hop: u32, num_books: u8, bits_per_code: u8) -> Self {
        Self {
            version: VERSION,
            variant,
            num_books,
            bits_per_code,
            sample_rate,
            hop,
            num_frames: None,
            config_hash: [0; 8],
        }
    }

    /// Leading eight bytes of a hex hash string.
    pub fn with_hash_hex(mut self, hex_hash: &str) -> Self {
        let mut out = [0u8; 8];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = hex_hash
                .get(2 * i..2 * i + 2)
                .and_then(|s| u8::from_str_radix(s, 16).ok())
                .unwrap_or(0);
        }
        self.config_hash = out;
        self
    }

    pub fn hash_hex(&self) -> String {
        self.config_hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn frame_bits(&self) -> usize {
        self.num_books as usize * self.bits_per_code as usize
    }

    pub fn frame_bytes(&self) -> usize {
        self.frame_bits().div_ceil(8)
    }

    fn validate(&self) -> Result<(), BitstreamError> {
        if self.num_books == 0 || self.bits_per_code == 0 || self.bits_per_code > 16 {
            return Err(BitstreamError::InvalidField(format!(
                "{} books of {} bits",
                self.num_books, self.bits_per_code
            )));
        }
        if self.sample_rate == 0 || self.hop == 0 {
            return Err(BitstreamError::InvalidField("zero sample rate or hop".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6] = self.variant.code();
        b[7] = self.num_books;
        b[8] = self.bits_per_code;
        b[12..16].copy_from_slice(&self.sample_rate.to_le_bytes());
        b[16..20].copy_from_slice(&self.hop.to_le_bytes());
        b[20..24].copy_from_slice(&self.num_frames.unwrap_or(STREAMING_FRAMES).to_le_bytes());
        b[24..32].copy_from_slice(&self.config_hash);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BitstreamError> {
        if bytes.len() >= 4 && &bytes[0..4] != MAGIC {
            return Err(BitstreamError::BadMagic(bytes[0..4].try_into().expect("4 bytes")));
        }
        if bytes.len() < HEADER_LEN {
            return Err(BitstreamError::TruncatedHeader(bytes.len()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(BitstreamError::UnknownVersion(version));
        }
        let variant = VariantId::from_code(bytes[6]).ok_or(BitstreamError::UnknownVariant(bytes[6]))?;
        let frames = u32_at(20);
        let header = Self {
            version,
            variant,
            num_books: bytes[7],
            bits_per_code: bytes[8],
            sample_rate: u32_at(12),
            hop: u32_at(16),
            num_frames: (frames != STREAMING_FRAMES).then_some(frames),
            config_hash: bytes[24..32].try_into().expect("8 bytes"),
        };
        header.validate()?;
        Ok(header)
    }
}

/// `sample_rate / hop × num_books × bits_per_code`, multiplied out before
/// the single (floor) division.
pub fn bitrate(header: &BitstreamHeader) -> u64 {
    header.sample_rate as u64 * header.num_books as u64 * header.bits_per_code as u64 / header.hop as u64
}

/// Packs one frame into `header.frame_bytes()` bytes.
pub fn pack_frame(frame: &CodeFrame, header: &BitstreamHeader, out: &mut Vec<u8>) -> Result<(), BitstreamError> {
    let books = header.num_books as usize;
    let bits = header.bits_per_code;
    if frame.0.len() != books {
        return Err(BitstreamError::BookCount {
            expected: books,
            found: frame.0.len(),
        });
    }
    let start = out.len();
    out.resize(start + header.frame_bytes(), 0);
    let buf = &mut out[start..];
    let mut pos = 0usize;
    for (book, &idx) in frame.0.iter().enumerate() {
        if (idx as u32) >> bits != 0 {
            out.truncate(start);
            return Err(BitstreamError::IndexTooLarge { book, index: idx, bits });
        }
        for b in (0..bits).rev() {
            if (idx >> b) & 1 == 1 {
                buf[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(())
}

pub fn unpack_frame(bytes: &[u8], header: &BitstreamHeader) -> CodeFrame {
    let bits = header.bits_per_code;
    let mut pos = 0usize;
    let mut indices = Vec::with_capacity(header.num_books as usize);
    for _ in 0..header.num_books {
        let mut v = 0u16;
        for _ in 0..bits {
            let bit = (bytes[pos / 8] >> (7 - pos % 8)) & 1;
            v = (v << 1) | bit as u16;
            pos += 1;
        }
        indices.push(v);
    }
    CodeFrame(indices)
}

/// Header followed by every frame. The header's frame count is set from
/// `frames` unless it is `None` (streamed).
pub fn pack_frames(frames: &[CodeFrame], header: &BitstreamHeader) -> Result<Vec<u8>, BitstreamError> {
    header.validate()?;
    let mut header = header.clone();
    if header.num_frames.is_some() {
        header.num_frames = Some(frames.len() as u32);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + frames.len() * header.frame_bytes());
    out.extend_from_slice(&header.to_bytes());
    for f in frames {
        pack_frame(f, &header, &mut out)?;
    }
    Ok(out)
}

pub fn unpack_frames(bytes: &[u8]) -> Result<(BitstreamHeader, Vec<CodeFrame>), BitstreamError> {
    let header = BitstreamHeader::from_bytes(bytes)?;
    let fb = header.frame_bytes();
    let payload = &bytes[HEADER_LEN..];
    let whole = payload.len() / fb;
    if payload.len() % fb != 0 {
        let offset = HEADER_LEN + whole * fb;
        return Err(BitstreamError::TruncatedFrame {
            offset,
            available: payload.len() - whole * fb,
            frame_bytes: fb,
        });
    }
    if let Some(declared) = header.num_frames {
        if declared as usize != whole {
            return Err(BitstreamError::FrameCount { declared, found: whole });
        }
    }
    let frames = payload.chunks_exact(fb).map(|c| unpack_frame(c, &header)).collect();
    Ok((header, frames))
}

/// Incremental parser for streamed input: feed bytes as they arrive and
/// collect whole frames.
#[derive(Debug, Default)]
pub struct FrameParser {
    header: Option<BitstreamHeader>,
    pending: Vec<u8>,
    consumed: usize,
}

impl FrameParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn header(&self) -> Option<&BitstreamHeader> {
        self.header.as_ref()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Result<Vec<CodeFrame>, BitstreamError> {
        self.pending.extend_from_slice(bytes);
        if self.header.is_none() {
            if self.pending.len() < HEADER_LEN {
                if self.pending.len() >= 4 && &self.pending[..4] != MAGIC {
                    return Err(BitstreamError::BadMagic(self.pending[..4].try_into().expect("4 bytes")));
                }
                return Ok(Vec::new());
            }
            self.header = Some(BitstreamHeader::from_bytes(&self.pending)?);
            self.pending.drain(..HEADER_LEN);
            self.consumed = HEADER_LEN;
        }
        let header = self.header.as_ref().expect("header parsed");
        let fb = header.frame_bytes();
        let whole = self.pending.len() / fb;
        let frames = self.pending[..whole * fb].chunks_exact(fb).map(|c| unpack_frame(c, header)).collect();
        self.pending.drain(..whole * fb);
        self.consumed += whole * fb;
        Ok(frames)
    }

    /// Fails if a partial frame is left over at end of input.
    pub fn finish(&self) -> Result<(), BitstreamError> {
        match &self.header {
            None => Err(BitstreamError::TruncatedHeader(self.pending.len())),
            Some(h) if !self.pending.is_empty() => Err(BitstreamError::TruncatedFrame {
                offset: self.consumed,
                available: self.pending.len(),
                frame_bytes: h.frame_bytes(),
            }),
            Some(_) => Ok(()),
        }
    }
}
