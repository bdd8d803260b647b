use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamdec_core::codec::{Codec, CodecConfig, CodecRuntime, EncoderConfig, GeneratorVariant, VariantId};
use streamdec_core::nn::{Activation, Block, WeightInit};
use streamdec_core::quantizer::{CodeFrame, QuantizerConfig};
use streamdec_core::signal::{MelConfig, Waveform};
use streamdec_stream::bitstream::{pack_frames, unpack_frames, BitstreamHeader, FrameParser};
use streamdec_stream::{bitrate, stream_decode_chunk, stream_encode_chunk, StreamState};

const SR: u32 = 600;

fn runtime(variant: VariantId) -> CodecRuntime {
    codec(variant).runtime().unwrap()
}

fn codec(variant: VariantId) -> Codec {
    let encoder = EncoderConfig {
        downsample_factors: vec![2, 3],
        base_channels: 2,
        max_channels: 4,
        code_dim: 3,
        num_blocks_per_stage: 2,
        kernel: 3,
        activation: Activation::LeakyRelu { slope: 0.2 },
    };
    let cfg = CodecConfig {
        sample_rate: SR,
        generator: GeneratorVariant::for_id(variant, &encoder, 8),
        encoder,
        quantizer: QuantizerConfig {
            num_books: 3,
            book_size: 8,
            ..Default::default()
        },
        mel: MelConfig {
            sample_rate: SR,
            fft_size: 64,
            hop_length: 6,
            win_length: 32,
            num_mels: 8,
            fmin: 0.0,
            fmax: 300.0,
            log_floor: 1e-5,
        },
        init: WeightInit::Normal { std: 0.3 },
    };
    let mut codec = Codec::init(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let z = codec.encode(&Waveform::new(noise(&mut rng, 600), SR).unwrap()).unwrap();
    codec.codebook.kmeans_init(z.vectors(), 5, &mut rng).unwrap();
    codec
}

/// Output samples whose value can depend on state carried in from before the
/// chunk, derived from layer geometry alone.
fn lookback(blocks: &[Block], scale: &mut usize) -> usize {
    let mut total = 0;
    for b in blocks {
        total += match b {
            Block::Conv(c) => {
                assert_eq!(c.stride, 1);
                (c.kernel - 1) * c.dilation * *scale
            }
            Block::ConvTranspose(c) => {
                *scale /= c.stride;
                (c.kernel - 1) * *scale
            }
            Block::Residual(inner) => lookback(inner, &mut scale.clone()),
            Block::Branches(bs) => bs.iter().map(|br| lookback(br, &mut scale.clone())).max().unwrap_or(0),
            _ => 0,
        };
    }
    total
}

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn stream_all(rt: &CodecRuntime, x: &[f64], sizes: &[usize]) -> (Vec<CodeFrame>, Vec<f64>) {
    let mut enc = StreamState::encoder(rt);
    let mut dec = StreamState::decoder(rt);
    let mut codes = Vec::new();
    let mut audio = Vec::new();
    let mut pos = 0;
    let mut i = 0;
    while pos < x.len() {
        let end = (pos + sizes[i % sizes.len()]).min(x.len());
        let frames = stream_encode_chunk(&x[pos..end], &mut enc, rt).unwrap();
        audio.extend(stream_decode_chunk(&frames, &mut dec, rt).unwrap());
        codes.extend(frames);
        pos = end;
        i += 1;
    }
    (codes, audio)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn chunked_stream_matches_batch_for_every_variant() {
    for variant in [VariantId::Sym, VariantId::V0, VariantId::V1, VariantId::V2] {
        let rt = runtime(variant);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = noise(&mut rng, 360);
        let wave = Waveform::new(x.clone(), SR).unwrap();
        let batch_codes = rt.encode_codes(&wave).unwrap();
        let batch_audio = rt.decode_codes(&batch_codes).unwrap();
        for sizes in [vec![6], vec![1], vec![7], vec![60], vec![5, 13, 1, 36]] {
            let (codes, audio) = stream_all(&rt, &x, &sizes);
            assert_eq!(codes, batch_codes, "{variant} chunks {sizes:?}");
            assert_eq!(audio.len(), batch_audio.len());
            assert!(max_diff(&audio, batch_audio.samples()) < 1e-9, "{variant} chunks {sizes:?}");
        }
    }
}

#[test]
fn sub_hop_chunk_emits_nothing_and_is_carried() {
    let rt = runtime(VariantId::V2);
    let mut enc = StreamState::encoder(&rt);
    let out = stream_encode_chunk(&[0.1; 5], &mut enc, &rt).unwrap();
    assert!(out.is_empty());
    assert_eq!(enc.remainder().len(), 5);
    let out = stream_encode_chunk(&[0.1; 8], &mut enc, &rt).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(enc.remainder().len(), 1);
}

#[test]
fn reset_restores_fresh_state() {
    let rt = runtime(VariantId::V1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = noise(&mut rng, 48);
    let mut enc = StreamState::encoder(&rt);
    let first = stream_encode_chunk(&x, &mut enc, &rt).unwrap();
    let fresh = StreamState::encoder(&rt);
    assert_ne!(enc, fresh);
    enc.reset();
    assert_eq!(enc, fresh);
    assert_eq!(stream_encode_chunk(&x, &mut enc, &rt).unwrap(), first);
}

#[test]
fn warmed_state_differs_only_within_the_receptive_field() {
    for variant in [VariantId::Sym, VariantId::V0, VariantId::V2] {
        let codec = codec(variant);
        let rt = codec.runtime().unwrap();
        let span = lookback(&codec.nets.decoder.blocks, &mut rt.hop.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let warm = noise(&mut rng, 60);
        let x = noise(&mut rng, 6 * 120);
        let mut enc = StreamState::encoder(&rt);
        let codes_warm = stream_encode_chunk(&warm, &mut enc, &rt).unwrap();
        let codes = stream_encode_chunk(&x, &mut enc, &rt).unwrap();
        assert!(span < codes.len() * rt.hop, "{variant}: span {span}");
        let mut fresh = StreamState::decoder(&rt);
        let mut warmed = StreamState::decoder(&rt);
        stream_decode_chunk(&codes_warm, &mut warmed, &rt).unwrap();
        let a = stream_decode_chunk(&codes, &mut fresh, &rt).unwrap();
        let b = stream_decode_chunk(&codes, &mut warmed, &rt).unwrap();
        assert!(max_diff(&a[..span], &b[..span]) > 1e-9, "{variant}");
        assert_eq!(&a[span..], &b[span..], "{variant}");
    }
}

#[test]
fn zero_frames_leave_state_untouched() {
    let rt = runtime(VariantId::V1);
    let mut dec = StreamState::decoder(&rt);
    let before = dec.clone();
    assert!(stream_decode_chunk(&[], &mut dec, &rt).unwrap().is_empty());
    assert_eq!(dec, before);
}

#[test]
fn out_of_range_index_is_rejected() {
    let rt = runtime(VariantId::V1);
    let mut dec = StreamState::decoder(&rt);
    assert!(stream_decode_chunk(&[CodeFrame(vec![0, 8, 0])], &mut dec, &rt).is_err());
}

#[test]
fn state_of_wrong_role_is_rejected() {
    let rt = runtime(VariantId::V2);
    let mut dec = StreamState::decoder(&rt);
    assert!(stream_encode_chunk(&[0.0; 6], &mut dec, &rt).is_err());
}

#[test]
fn non_finite_chunk_is_rejected() {
    let rt = runtime(VariantId::V2);
    let mut enc = StreamState::encoder(&rt);
    assert!(stream_encode_chunk(&[0.0, f64::NAN], &mut enc, &rt).is_err());
}

#[test]
fn streamed_codes_survive_the_bitstream() {
    let rt = runtime(VariantId::V2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = noise(&mut rng, 120);
    let (codes, _) = stream_all(&rt, &x, &[12]);
    let mut header = BitstreamHeader::new(VariantId::V2, SR, rt.hop as u32, 3, 3);
    header.num_frames = Some(0);
    let bytes = pack_frames(&codes, &header).unwrap();
    let (h, back) = unpack_frames(&bytes).unwrap();
    assert_eq!(back, codes);
    assert_eq!(h.num_frames, Some(codes.len() as u32));
    assert_eq!(bitrate(&h), 600 * 3 * 3 / 6);

    let open = pack_frames(&codes, &BitstreamHeader::new(VariantId::V2, SR, rt.hop as u32, 3, 3)).unwrap();
    let (h, back) = unpack_frames(&open).unwrap();
    assert_eq!(h.num_frames, None);
    assert_eq!(back, codes);
}

#[test]
fn bitrate_is_linear_in_rate_and_books() {
    let h = BitstreamHeader::new(VariantId::V1, 48000, 300, 8, 10);
    assert_eq!(bitrate(&h), 12800);
    let h = BitstreamHeader::new(VariantId::V1, 24000, 300, 8, 10);
    assert_eq!(bitrate(&h), 6400);
    let h = BitstreamHeader::new(VariantId::V1, 48000, 300, 1, 10);
    assert_eq!(bitrate(&h), 1600);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn long_streams_round_trip_through_incremental_parser(seed in any::<u64>(), split in 1usize..97) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let header = BitstreamHeader::new(VariantId::V2, 48000, 600, 8, 10);
        let frames: Vec<CodeFrame> = (0..10_000)
            .map(|_| CodeFrame((0..8).map(|_| rng.random_range(0..1024u16)).collect()))
            .collect();
        let bytes = pack_frames(&frames, &header).unwrap();
        prop_assert_eq!(bytes.len(), 32 + 10_000 * 10);
        let mut parser = FrameParser::new();
        let mut back = Vec::new();
        for chunk in bytes.chunks(split) {
            back.extend(parser.push(chunk).unwrap());
        }
        parser.finish().unwrap();
        prop_assert_eq!(back, frames);
    }
}
