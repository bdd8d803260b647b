mod common;

use common::*;
use streamdec_core::codec::VariantId;
use streamdec_core::signal::load_wav;
use streamdec_stream::bitstream::{unpack_frames, HEADER_LEN};
use streamdec_train::{read_log, RunPaths, StageKind, TrainMode};

#[test]
fn train_all_writes_both_stages_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        let cfg = write_config(&tiny_config(TrainMode::SymAd, &root), &dir.path().join(format!("{run}.toml")));
        let out = streamdec(&["train", p(&cfg), "--stage", "all"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let paths = RunPaths::new(&root);
        for stage in [StageKind::Stage1, StageKind::Stage2] {
            assert!(paths.checkpoint(stage).exists());
            assert!(paths.log(stage).exists());
        }
        assert!(paths.config().exists());
        let untimed = |s| read_log(paths.log(s)).unwrap().iter().map(|r| r.untimed()).collect::<Vec<_>>();
        logs.push((untimed(StageKind::Stage1), untimed(StageKind::Stage2)));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn stage_two_without_stage_one_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&tiny_config(TrainMode::SymAd, &dir.path().join("run")), &dir.path().join("c.toml"));
    let out = streamdec(&["train", p(&cfg), "--stage", "2"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("stage1"), "{}", stderr(&out));
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let good = tiny_config(TrainMode::SymAd, &dir.path().join("run")).to_toml_string();
    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, format!("bogus_key = 1\n{good}")).unwrap();
    let out = streamdec(&["train", p(&unknown)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&streamdec(&["train", p(&missing)])), 2);

    let baseline = write_config(&tiny_config(TrainMode::SoundStreamBaseline, &dir.path().join("b")), &dir.path().join("b.toml"));
    assert_eq!(code(&streamdec(&["train", p(&baseline), "--stage", "1"])), 2);
}

#[test]
fn max_steps_halts_and_a_rerun_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let cfg = write_config(&tiny_config(TrainMode::SymAd, &root), &dir.path().join("c.toml"));
    let out = streamdec(&["train", p(&cfg), "--stage", "1", "--max-steps", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("halted"));
    let paths = RunPaths::new(&root);
    assert!(!paths.checkpoint(StageKind::Stage1).exists());
    let out = streamdec(&["train", p(&cfg), "--stage", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(paths.checkpoint(StageKind::Stage1).exists());
    assert_eq!(read_log(paths.log(StageKind::Stage1)).unwrap().len(), 4);
}

#[test]
fn vocoder_mode_extracts_codes_and_trains_the_vocoder() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let cfg = write_config(&tiny_config(TrainMode::Vocoder, &root), &dir.path().join("c.toml"));
    let out = streamdec(&["train", p(&cfg), "--stage", "all"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let paths = RunPaths::new(&root);
    assert!(paths.codes().exists());
    assert!(paths.checkpoint(StageKind::Vocoder).exists());
    let codes = dir.path().join("codes.json");
    let out = streamdec(&["extract-codes", p(&cfg), "--out", p(&codes)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(&codes).unwrap(), std::fs::read(paths.codes()).unwrap());
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(TrainMode::SymAd, std::path::Path::new("rel/run"));
    let file = write_config(&cfg, &dir.path().join("c.toml"));
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_streamdec"))
        .args(["train", p(&file), "--stage", "1"])
        .env("STREAMDEC_HOME", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(RunPaths::new(dir.path().join("rel/run")).checkpoint(StageKind::Stage1).exists());
}

#[test]
fn one_second_at_48k_is_160_frames_of_10_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_checkpoint(&wide_codec(VariantId::Sym, 1), "ab12", &dir.path().join("m.sdck"));
    let wav = speech_wav(&dir.path().join("in.wav"), 1.0, 48_000, 5);
    let adc = dir.path().join("out.adc");
    let out = streamdec(&["encode", "--checkpoint", p(&ck), p(&wav), p(&adc)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("12800 bps"), "{}", stdout(&out));
    let bytes = std::fs::read(&adc).unwrap();
    assert_eq!(bytes.len(), HEADER_LEN + 1600);
    let (header, frames) = unpack_frames(&bytes).unwrap();
    assert_eq!(frames.len(), 160);
    assert_eq!(header.num_frames, Some(160));
}

#[test]
fn chunked_encode_is_byte_identical_and_decodes_alike() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_checkpoint(&wide_codec(VariantId::Sym, 2), "cd34", &dir.path().join("m.sdck"));
    // 0.61 s leaves a partial final hop.
    let wav = speech_wav(&dir.path().join("in.wav"), 0.61, 48_000, 6);
    let batch = dir.path().join("batch.adc");
    assert_eq!(code(&streamdec(&["encode", "--checkpoint", p(&ck), p(&wav), p(&batch)])), 0);
    let reference = std::fs::read(&batch).unwrap();
    let (_, frames) = unpack_frames(&reference).unwrap();
    assert!(frames.iter().any(|f| f.0 != frames[0].0), "codes should vary");
    for ms in ["12.5", "25", "50", "100", "7"] {
        let chunked = dir.path().join(format!("c{ms}.adc"));
        let out = streamdec(&["encode", "--checkpoint", p(&ck), p(&wav), p(&chunked), "--chunk-ms", ms]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert_eq!(std::fs::read(&chunked).unwrap(), reference, "chunk {ms} ms");
    }
    let full = dir.path().join("full.wav");
    let streamed = dir.path().join("streamed.wav");
    assert_eq!(code(&streamdec(&["decode", "--checkpoint", p(&ck), p(&batch), p(&full)])), 0);
    let out = streamdec(&["decode", "--checkpoint", p(&ck), p(&batch), p(&streamed), "--chunk-ms", "12.5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let a = load_wav(&full, None).unwrap();
    let b = load_wav(&streamed, None).unwrap();
    assert_eq!(a.len(), frames.len() * 300);
    assert_eq!(a.len(), b.len());
    // Both pass through 16-bit PCM; allow one quantization step.
    let worst = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 32768.0 + 1e-4, "{worst}");
}

#[test]
fn decode_refuses_incompatible_and_corrupt_input() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_checkpoint(&wide_codec(VariantId::Sym, 3), "ef56", &dir.path().join("m.sdck"));
    let v2 = save_checkpoint(&wide_codec(VariantId::V2, 3), "ef56", &dir.path().join("v2.sdck"));
    let other_hash = save_checkpoint(&wide_codec(VariantId::Sym, 3), "0123", &dir.path().join("h.sdck"));
    let wav = speech_wav(&dir.path().join("in.wav"), 0.2, 48_000, 7);
    let adc = dir.path().join("x.adc");
    assert_eq!(code(&streamdec(&["encode", "--checkpoint", p(&ck), p(&wav), p(&adc)])), 0);
    let out_wav = dir.path().join("o.wav");

    for chunk in [None, Some("25")] {
        let run = |ck: &std::path::Path, input: &std::path::Path, force: bool| {
            let mut args = vec!["decode", "--checkpoint", p(ck), p(input), p(&out_wav)];
            if let Some(c) = chunk {
                args.extend(["--chunk-ms", c]);
            }
            if force {
                args.push("--force");
            }
            streamdec(&args)
        };
        let out = run(&v2, &adc, false);
        assert_eq!(code(&out), 4, "{}", stderr(&out));
        assert!(stderr(&out).contains("variant"));
        assert_eq!(code(&run(&v2, &adc, true)), 4, "--force does not override a layout mismatch");
        let out = run(&other_hash, &adc, false);
        assert_eq!(code(&out), 4, "{}", stderr(&out));
        assert!(stderr(&out).contains("hash"));
        assert_eq!(code(&run(&other_hash, &adc, true)), 0);

        let bytes = std::fs::read(&adc).unwrap();
        let truncated = dir.path().join("t.adc");
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert_eq!(code(&run(&ck, &truncated, false)), 5);
        let short_header = dir.path().join("s.adc");
        std::fs::write(&short_header, &bytes[..10]).unwrap();
        assert_eq!(code(&run(&ck, &short_header, false)), 5);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let bad_magic = dir.path().join("m.adc");
        std::fs::write(&bad_magic, &bad).unwrap();
        assert_eq!(code(&run(&ck, &bad_magic, false)), 5);
    }
    let missing = dir.path().join("none.sdck");
    assert_eq!(code(&streamdec(&["decode", "--checkpoint", p(&missing), p(&adc), p(&out_wav)])), 3);
}

#[test]
fn bench_emits_four_windows_per_role_in_text_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_checkpoint(&wide_codec(VariantId::Sym, 4), "aa", &dir.path().join("m.sdck"));
    let v2 = save_checkpoint(&wide_codec(VariantId::V2, 4), "aa", &dir.path().join("v2.sdck"));
    let json = dir.path().join("bench.json");
    let decoder = format!("v2={}", p(&v2));
    let out = streamdec(&[
        "bench",
        "--checkpoint",
        p(&ck),
        "synthetic:1:0.3",
        "--decoder",
        &decoder,
        "--json",
        p(&json),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let records = report["records"].as_array().unwrap();
    // Encoder plus two decoders at each of four windows.
    assert_eq!(records.len(), 12);
    assert_eq!(report["verdicts"].as_array().unwrap().len(), 8);
    assert!(!report["warnings"].as_array().unwrap().is_empty());
    for r in records {
        assert_eq!(r["std_ms"].as_f64().unwrap(), 0.0);
        let mean = format!("{:.4}", r["mean_ms"].as_f64().unwrap());
        assert!(text.contains(&mean), "{mean} missing from\n{text}");
    }
}

#[test]
fn identity_eval_is_zero_with_one_row_per_utterance_plus_mean() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("refs");
    std::fs::create_dir(&corpus).unwrap();
    for i in 0..3 {
        speech_wav(&corpus.join(format!("u{i}.wav")), 0.5, 16_000, i);
    }
    let json = dir.path().join("eval.json");
    let out = streamdec(&["eval", "--identity", p(&corpus), "--sample-rate", "16000", "--json", p(&json)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().skip(1).count(), 4);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    for key in ["f0_rmse", "uv_error", "mcd", "lsd"] {
        assert_eq!(report[key].as_f64().unwrap(), 0.0, "{key}");
    }
    assert_eq!(report["per_utterance"].as_array().unwrap().len(), 3);

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&streamdec(&["eval", "--identity", p(&empty)])), 2);
}

#[test]
fn codec_eval_embeds_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_checkpoint(&wide_codec(VariantId::Sym, 5), "feed", &dir.path().join("m.sdck"));
    let json = dir.path().join("eval.json");
    let out = streamdec(&["eval", "--checkpoint", p(&ck), "synthetic:2:0.4", "--json", p(&json)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["config_hash"], "feed");
    assert!(report["mcd"].as_f64().unwrap() > 0.0);
}

#[test]
fn preset_configs_print_as_toml() {
    let out = streamdec(&["config", "desk"]);
    assert_eq!(code(&out), 0);
    assert!(streamdec_train::ExperimentConfig::from_toml_str(&stdout(&out)).is_ok());
    assert_eq!(code(&streamdec(&["config", "nonexistent"])), 2);
}
