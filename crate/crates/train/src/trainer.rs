//! Stage drivers: metric-only stage 1, adversarial stage 2, joint baseline
//! training and vocoder training on normalized codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use streamdec_core::adversary::{Discriminators, DISCRIMINATOR_PREFIX};
use streamdec_core::autograd::{Graph, Var};
use streamdec_core::checkpoint::Checkpoint;
use streamdec_core::codec::{Codec, ENCODER_PREFIX, PROJECTOR_PREFIX};
use streamdec_core::losses::{
    d_loss_graph, feature_matching_graph, g_adv_graph, mel_loss, mel_loss_graph, total_graph, GanFlavor, LossVars,
};
use streamdec_core::nn::{Binder, CompiledNetwork, Initializer, ParamStore};
use streamdec_core::optim::{Adam, AdamConfig};
use streamdec_core::quantizer::StageTrace;
use streamdec_core::signal::MelPlan;
use streamdec_core::tensor::Tensor;

use crate::codes::CodesDataset;
use crate::config::{ExperimentConfig, TrainMode};
use crate::corpus::Corpus;
use crate::error::{Result, TrainError};
use crate::log::{smoothed, JsonlLog, LogRecord};

pub const GEN_OPT_PREFIX: &str = "opt.gen.";
pub const DISC_OPT_PREFIX: &str = "opt.disc.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Stage1,
    Stage2,
    Vocoder,
    /// Single adversarial stage from scratch (baseline).
    Joint,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Stage1 => "stage1",
            StageKind::Stage2 => "stage2",
            StageKind::Vocoder => "vocoder",
            StageKind::Joint => "joint",
        }
    }

    pub fn iterations(self, cfg: &ExperimentConfig) -> u64 {
        let s = &cfg.schedule;
        match self {
            StageKind::Stage1 => s.stage1_iters,
            StageKind::Stage2 => s.stage2_iters,
            StageKind::Vocoder => s.vocoder_iters,
            StageKind::Joint => s.stage1_iters + s.stage2_iters,
        }
    }
}

/// File layout of a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self, stage: StageKind) -> PathBuf {
        self.root.join(format!("{}.sdck", stage.name()))
    }

    pub fn resume(&self, stage: StageKind) -> PathBuf {
        self.root.join(format!("{}.resume.sdck", stage.name()))
    }

    pub fn log(&self, stage: StageKind) -> PathBuf {
        self.root.join("logs").join(format!("{}.jsonl", stage.name()))
    }

    pub fn report(&self, stage: StageKind) -> PathBuf {
        self.root.join(format!("{}.report.json", stage.name()))
    }

    pub fn codes(&self) -> PathBuf {
        self.root.join("codes.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}

/// Per-invocation controls that do not change a run's identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Accept a prerequisite checkpoint produced under a different config.
    pub force: bool,
    /// Stop once this many steps of the stage are done, leaving a resume
    /// snapshot behind as an interrupted run would.
    pub halt_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: StageKind,
    pub mode: TrainMode,
    pub config_hash: String,
    pub iterations: u64,
    /// Steps completed so far; equals `iterations` once the stage finished.
    pub completed: u64,
    pub complete: bool,
    /// Step a resumed run continued from.
    pub resumed_from: Option<u64>,
    /// Over the iterations executed by this invocation.
    pub iters_per_sec: f64,
    /// Code usage perplexity per book on the last batch.
    pub perplexity: Vec<f64>,
    pub smoothed_mel_first: Option<f64>,
    pub smoothed_mel_last: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    #[serde(skip)]
    pub records: Vec<LogRecord>,
}

/// Deterministic per-step generator so resumed runs replay exactly.
pub fn step_rng(seed: u64, stage: &str, step: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    h.update(step.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Mean mel L1 of batch reconstructions over `corpus`.
pub fn heldout_mel(codec: &Codec, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus("held-out set is empty".into()));
    }
    let rt = codec.runtime()?;
    let mut total = 0.0;
    for u in &corpus.utterances {
        let y = rt.reconstruct(&u.wave)?;
        total += mel_loss(&u.wave, &y, &codec.config.mel)?;
    }
    Ok(total / corpus.len() as f64)
}

/// Fresh codec with a k-means initialized codebook.
pub fn init_codec(cfg: &ExperimentConfig, train: &Corpus) -> Result<Codec> {
    let mut codec = Codec::init(cfg.codec.clone(), cfg.seed)?;
    let rt = codec.runtime()?;
    let mut vectors = Vec::new();
    for u in train.utterances.iter().take(16) {
        vectors.extend_from_slice(rt.encode(&u.wave)?.vectors());
    }
    let mut rng = step_rng(cfg.seed, "codebook-init", 0);
    codec
        .codebook
        .kmeans_init(&vectors, cfg.codec.quantizer.kmeans_iters, &mut rng)?;
    Ok(codec)
}

struct Adversary {
    nets: Discriminators,
    params: ParamStore,
    opt: Adam,
    flavor: GanFlavor,
}

struct VocoderItem {
    input: Tensor,
    wave: Vec<f64>,
}

enum Source<'a> {
    Waves(&'a Corpus),
    Codes(Vec<VocoderItem>),
}

struct Session<'a> {
    kind: StageKind,
    cfg: &'a ExperimentConfig,
    codec: Codec,
    adversary: Option<Adversary>,
    gen_opt: Adam,
    plan: Arc<MelPlan>,
    source: Source<'a>,
    /// Encoder runtime for stages that keep the encoder fixed.
    frozen_analysis: Option<CompiledNetwork>,
    total: u64,
}

struct StepOut {
    record: LogRecord,
}

fn nonfinite(kind: StageKind, step: u64, detail: String) -> TrainError {
    TrainError::NonFiniteLoss {
        stage: kind.name().into(),
        step,
        detail,
    }
}

impl<'a> Session<'a> {
    fn trains_encoder(&self) -> bool {
        match self.kind {
            StageKind::Stage1 | StageKind::Joint => true,
            StageKind::Stage2 => !self.cfg.schedule.mode.freezes_encoder(),
            StageKind::Vocoder => false,
        }
    }

    fn batch(&self, rng: &mut ChaCha8Rng) -> Result<(Tensor, Option<Tensor>)> {
        let s = &self.cfg.schedule;
        let hop = self.codec.config.hop();
        match &self.source {
            Source::Waves(c) => Ok((c.sample_batch(rng, s.batch_size, s.segment_length, hop)?, None)),
            Source::Codes(items) => {
                let frames = s.segment_length / hop;
                let dim = self.codec.config.encoder.code_dim;
                let mut x = Vec::with_capacity(s.batch_size * s.segment_length);
                let mut c = vec![0.0; s.batch_size * dim * frames];
                for b in 0..s.batch_size {
                    let item = &items[rng.random_range(0..items.len())];
                    let avail = item.input.len();
                    let start = if avail > frames { rng.random_range(0..=avail - frames) } else { 0 };
                    let take = frames.min(avail - start);
                    for d in 0..dim {
                        let row = &item.input.row(0, d)[start..start + take];
                        c[(b * dim + d) * frames..(b * dim + d) * frames + take].copy_from_slice(row);
                    }
                    let s0 = start * hop;
                    let s1 = ((start + frames) * hop).min(item.wave.len());
                    x.extend_from_slice(&item.wave[s0..s1]);
                    x.resize((b + 1) * s.segment_length, 0.0);
                }
                Ok((
                    Tensor::from_vec([s.batch_size, 1, s.segment_length], x),
                    Some(Tensor::from_vec([s.batch_size, dim, frames], c)),
                ))
            }
        }
    }

    fn step(&mut self, step: u64, rng: &mut ChaCha8Rng) -> Result<StepOut> {
        let sched = &self.cfg.schedule;
        let gen_lr = sched.lr_at(sched.gen_lr, step, self.total);
        let disc_lr = sched.lr_at(sched.disc_lr, step, self.total);
        let (x, code_input) = self.batch(rng)?;
        let trains_encoder = self.trains_encoder();

        // Generator forward up to the reconstruction.
        let mut g = Graph::new();
        let mut gen_binder = Binder::new(&self.codec.params);
        if !trains_encoder {
            gen_binder = gen_binder.freeze_prefix(ENCODER_PREFIX).freeze_prefix(PROJECTOR_PREFIX);
        }
        let mut vq = None;
        let mut trace: Option<StageTrace> = None;
        let dec_in = if let Some(c) = code_input {
            g.constant(c)
        } else if trains_encoder {
            let xv = g.constant(x.clone());
            let h = self.codec.nets.encoder.forward_graph(&mut g, &mut gen_binder, xv)?;
            let z = self.codec.nets.projector.forward_graph(&mut g, &mut gen_binder, h)?;
            let (q, loss, quant) = self.codec.codebook.quantize_graph(&mut g, z)?;
            vq = Some(loss);
            trace = Some(quant.trace);
            q
        } else {
            let analysis = self.frozen_analysis.as_ref().expect("frozen encoder runtime");
            let z = analysis.forward(&x);
            let zc = g.constant(z);
            let (q, _, _) = self.codec.codebook.quantize_graph(&mut g, zc)?;
            q
        };
        let y = self.codec.nets.decoder.forward_graph(&mut g, &mut gen_binder, dec_in)?;
        let mel = mel_loss_graph(&mut g, y, &x, &self.plan)?;

        let mut vars = LossVars {
            mel: Some(mel),
            vq,
            ..Default::default()
        };
        let mut d_value = 0.0;
        if let Some(adv) = self.adversary.as_mut() {
            // D-step on the detached reconstruction.
            let y_val = g.value(y).clone();
            let mut gd = Graph::new();
            let grads = {
                let mut bd = Binder::new(&adv.params);
                let real_in = gd.constant(x.clone());
                let fake_in = gd.constant(y_val);
                let real = adv.nets.forward_graph(&mut gd, &mut bd, real_in)?;
                let fake = adv.nets.forward_graph(&mut gd, &mut bd, fake_in)?;
                let rl: Vec<Var> = real.iter().map(|o| o.logits).collect();
                let fl: Vec<Var> = fake.iter().map(|o| o.logits).collect();
                let dl = d_loss_graph(&mut gd, adv.flavor, &rl, &fl);
                d_value = gd.value(dl).item();
                if !d_value.is_finite() {
                    return Err(nonfinite(self.kind, step, format!("discriminator loss {d_value}")));
                }
                bd.gradients(&gd.backward(dl))
            };
            adv.opt.step(&mut adv.params, &grads, disc_lr)?;
            adv.nets.update_spectral_state(&mut adv.params)?;

            // Generator adversarial and feature-matching terms against the updated D.
            let mut bdf = Binder::new(&adv.params).freeze_prefix("");
            let fake = adv.nets.forward_graph(&mut g, &mut bdf, y)?;
            let real = adv.nets.forward(&adv.params, &x)?;
            let fl: Vec<Var> = fake.iter().map(|o| o.logits).collect();
            let fake_maps: Vec<Var> = fake.iter().flat_map(|o| o.feature_maps.iter().copied()).collect();
            let real_maps: Vec<Tensor> = real.into_iter().flat_map(|o| o.feature_maps).collect();
            vars.adv = Some(g_adv_graph(&mut g, adv.flavor, &fl));
            vars.fm = Some(feature_matching_graph(&mut g, &real_maps, &fake_maps)?);
        }
        let total = total_graph(&mut g, &vars, &self.cfg.weights);
        let parts = vars.values(&g);
        let total_value = g.value(total).item();
        if !total_value.is_finite() {
            return Err(nonfinite(
                self.kind,
                step,
                format!("generator loss {total_value} (mel {}, vq {}, adv {}, fm {})", parts.mel, parts.vq, parts.adv, parts.fm),
            ));
        }
        let grads = gen_binder.gradients(&g.backward(total));
        drop(gen_binder);
        self.gen_opt.step(&mut self.codec.params, &grads, gen_lr)?;

        let mut perplexity = Vec::new();
        let mut reseeded = 0;
        if let Some(trace) = trace {
            perplexity = self.codec.codebook.perplexity(&trace);
            self.codec.codebook.ema_update(&trace)?;
            let q = &self.codec.config.quantizer;
            if q.reseed_interval > 0 && (step + 1) % q.reseed_interval as u64 == 0 {
                reseeded = self.codec.codebook.reseed_dead(&trace, q.dead_code_threshold, rng)?;
            }
        }
        Ok(StepOut {
            record: LogRecord {
                stage: self.kind.name().into(),
                step,
                mel: parts.mel,
                vq: parts.vq,
                adv: parts.adv,
                fm: parts.fm,
                d_loss: d_value,
                total: total_value,
                gen_lr,
                perplexity,
                reseeded,
                elapsed_s: 0.0,
            },
        })
    }

    fn snapshot(&self, step: u64, complete: bool, perplexity: &[f64]) -> Checkpoint {
        let mut codec = self.codec.clone();
        if complete && self.kind == StageKind::Stage1 {
            // The codebook is final once stage 1 ends.
            codec.codebook.freeze();
        }
        let extra = serde_json::json!({
            "stage": self.kind.name(),
            "mode": self.cfg.schedule.mode,
            "step": step,
            "complete": complete,
            "perplexity": perplexity,
            "experiment": self.cfg,
        });
        let mut ckpt = Checkpoint::from_codec(&codec, &self.cfg.hash(), extra);
        ckpt.tensors.extend(self.gen_opt.state(GEN_OPT_PREFIX));
        if let Some(adv) = &self.adversary {
            ckpt.tensors.extend(adv.params.iter().map(|(k, v)| (k.clone(), v.clone())));
            ckpt.tensors.extend(adv.opt.state(DISC_OPT_PREFIX));
        }
        ckpt
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<u64> {
        self.codec = ckpt.to_codec()?;
        self.gen_opt = Adam::from_state(self.gen_opt.config, GEN_OPT_PREFIX, &ckpt.tensors);
        if let Some(adv) = self.adversary.as_mut() {
            let mut params = ParamStore::new();
            for (k, v) in ckpt.with_prefix(DISCRIMINATOR_PREFIX) {
                params.insert(k, v);
            }
            adv.params = params;
            adv.opt = Adam::from_state(adv.opt.config, DISC_OPT_PREFIX, &ckpt.tensors);
        }
        self.refresh_frozen();
        ckpt.meta.extra["step"]
            .as_u64()
            .ok_or_else(|| TrainError::Corrupt {
                path: PathBuf::new(),
                message: "resume snapshot lacks a step".into(),
            })
    }

    fn refresh_frozen(&mut self) {
        self.frozen_analysis = if self.trains_encoder() || matches!(self.source, Source::Codes(_)) {
            None
        } else {
            Some(self.codec.nets.analysis().compile(&self.codec.params).expect("bound encoder"))
        };
    }
}

fn adam(cfg: &ExperimentConfig, lr: f64) -> Adam {
    Adam::new(AdamConfig {
        grad_clip: cfg.schedule.grad_clip,
        ..AdamConfig::with_lr(lr)
    })
}

fn adversary(cfg: &ExperimentConfig, seed_tag: &str) -> Result<Adversary> {
    let dcfg = cfg.stage2_discriminators();
    let nets = Discriminators::new(&dcfg)?;
    let mut params = ParamStore::new();
    let mut h = Sha256::new();
    h.update(cfg.seed.to_le_bytes());
    h.update(seed_tag.as_bytes());
    let seed = u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"));
    nets.init(&mut params, &mut Initializer::with_scheme(seed, cfg.codec.init));
    if nets.min_input_len() > cfg.schedule.segment_length {
        return Err(TrainError::Config(format!(
            "segment_length {} is shorter than the discriminators accept ({})",
            cfg.schedule.segment_length,
            nets.min_input_len()
        )));
    }
    Ok(Adversary {
        nets,
        params,
        opt: adam(cfg, cfg.schedule.disc_lr),
        flavor: cfg.schedule.mode.gan_flavor(),
    })
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(TrainError::Prerequisite(format!("{what} checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).map_err(|e| TrainError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a finished checkpoint of `stage` produced under `cfg`.
pub fn load_stage_checkpoint(cfg: &ExperimentConfig, paths: &RunPaths, stage: StageKind, force: bool) -> Result<Checkpoint> {
    let path = paths.checkpoint(stage);
    let ckpt = load_checkpoint(&path, stage.name())?;
    if ckpt.meta.extra["complete"] != serde_json::Value::Bool(true) {
        return Err(TrainError::Prerequisite(format!("{} is not a finished {} checkpoint", path.display(), stage.name())));
    }
    if !force && ckpt.meta.config_hash != cfg.hash() {
        return Err(TrainError::Compatibility(format!(
            "{} was produced by config {} but the current config hashes to {} (use --force to override)",
            path.display(),
            ckpt.meta.config_hash,
            cfg.hash()
        )));
    }
    Ok(ckpt)
}

fn run(mut session: Session<'_>, paths: &RunPaths, opts: &RunOptions, perplexity_hint: Vec<f64>) -> Result<TrainReport> {
    let kind = session.kind;
    let cfg = session.cfg;
    std::fs::create_dir_all(&paths.root).map_err(|e| TrainError::io(&paths.root, e))?;
    let resume_path = paths.resume(kind);
    let mut start = 0;
    let mut resumed_from = None;
    if resume_path.exists() {
        let ckpt = load_checkpoint(&resume_path, "resume")?;
        if ckpt.meta.config_hash != cfg.hash() {
            return Err(TrainError::Compatibility(format!(
                "resume snapshot {} belongs to a different config",
                resume_path.display()
            )));
        }
        start = session.restore(&ckpt)?;
        resumed_from = Some(start);
    }
    let mut log = JsonlLog::open(paths.log(kind), start)?;
    let t0 = Instant::now();
    let mut records = Vec::new();
    let mut perplexity = perplexity_hint;
    let end = opts.halt_after.map_or(session.total, |h| h.clamp(start, session.total));
    for step in start..end {
        let mut rng = step_rng(cfg.seed, kind.name(), step);
        let mut out = session.step(step, &mut rng)?;
        out.record.elapsed_s = t0.elapsed().as_secs_f64();
        if !out.record.perplexity.is_empty() {
            perplexity = out.record.perplexity.clone();
        }
        log.append(&out.record)?;
        records.push(out.record);
        let every = cfg.schedule.checkpoint_every;
        if every > 0 && (step + 1) % every == 0 && step + 1 < session.total {
            log.flush()?;
            session.snapshot(step + 1, false, &perplexity).save(&resume_path)?;
        }
    }
    log.flush()?;
    let elapsed = t0.elapsed().as_secs_f64();
    let executed = end - start;
    let complete = end == session.total;
    let ckpt_path = if complete {
        let p = paths.checkpoint(kind);
        session.snapshot(session.total, true, &perplexity).save(&p)?;
        if resume_path.exists() {
            std::fs::remove_file(&resume_path).map_err(|e| TrainError::io(&resume_path, e))?;
        }
        p
    } else {
        session.snapshot(end, false, &perplexity).save(&resume_path)?;
        resume_path
    };
    let all = crate::log::read_log(paths.log(kind))?;
    let mel: Vec<f64> = all.iter().map(|r| r.mel).collect();
    let sm = smoothed(&mel, cfg.schedule.smoothing_window);
    let report = TrainReport {
        stage: kind,
        mode: cfg.schedule.mode,
        config_hash: cfg.hash(),
        iterations: session.total,
        completed: end,
        complete,
        resumed_from,
        iters_per_sec: if elapsed > 0.0 { executed as f64 / elapsed } else { 0.0 },
        perplexity,
        smoothed_mel_first: sm.get((cfg.schedule.smoothing_window.min(sm.len())).saturating_sub(1)).copied(),
        smoothed_mel_last: sm.last().copied(),
        checkpoint: ckpt_path,
        log: paths.log(kind),
        records,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let rp = paths.report(kind);
    std::fs::write(&rp, json).map_err(|e| TrainError::io(&rp, e))?;
    Ok(report)
}

fn mel_plan(cfg: &ExperimentConfig) -> Result<Arc<MelPlan>> {
    Ok(Arc::new(MelPlan::new(&cfg.codec.mel)?))
}

/// Metric-only training of encoder, projector, codebook (EMA) and decoder.
/// No discriminator is constructed.
pub fn train_stage1(cfg: &ExperimentConfig, train: &Corpus, paths: &RunPaths, opts: &RunOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.schedule.mode == TrainMode::SoundStreamBaseline {
        return Err(TrainError::Config("the baseline trains jointly; use the joint stage".into()));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus("no training utterances".into()));
    }
    let session = Session {
        kind: StageKind::Stage1,
        cfg,
        codec: init_codec(cfg, train)?,
        adversary: None,
        gen_opt: adam(cfg, cfg.schedule.gen_lr),
        plan: mel_plan(cfg)?,
        source: Source::Waves(train),
        frozen_analysis: None,
        total: cfg.schedule.stage1_iters,
    };
    run(session, paths, opts, Vec::new())
}

/// Adversarial stage. In symAD/asymAD the encoder, projector and codebook
/// come from stage 1 and stay fixed; symAD_star keeps training everything.
pub fn train_stage2(cfg: &ExperimentConfig, train: &Corpus, paths: &RunPaths, opts: &RunOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let mode = cfg.schedule.mode;
    if matches!(mode, TrainMode::SoundStreamBaseline | TrainMode::Vocoder) {
        return Err(TrainError::Config(format!("mode {mode:?} has no adversarial stage 2")));
    }
    let ckpt = load_stage_checkpoint(cfg, paths, StageKind::Stage1, opts.force)?;
    let mut codec = ckpt.to_codec()?;
    if mode.freezes_encoder() {
        codec.codebook.freeze();
    } else {
        codec.codebook.thaw();
    }
    let perplexity = ckpt.meta.extra["perplexity"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
        .unwrap_or_default();
    let mut session = Session {
        kind: StageKind::Stage2,
        cfg,
        codec,
        adversary: Some(adversary(cfg, "stage2-disc")?),
        gen_opt: adam(cfg, cfg.schedule.gen_lr),
        plan: mel_plan(cfg)?,
        source: Source::Waves(train),
        frozen_analysis: None,
        total: cfg.schedule.stage2_iters,
    };
    session.refresh_frozen();
    run(session, paths, opts, perplexity)
}

/// Baseline: everything trained jointly from scratch with hinge losses.
pub fn train_joint(cfg: &ExperimentConfig, train: &Corpus, paths: &RunPaths, opts: &RunOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.schedule.mode != TrainMode::SoundStreamBaseline {
        return Err(TrainError::Config("joint training is the soundstream_baseline mode".into()));
    }
    let session = Session {
        kind: StageKind::Joint,
        cfg,
        codec: init_codec(cfg, train)?,
        adversary: Some(adversary(cfg, "joint-disc")?),
        gen_opt: adam(cfg, cfg.schedule.gen_lr),
        plan: mel_plan(cfg)?,
        source: Source::Waves(train),
        frozen_analysis: None,
        total: StageKind::Joint.iterations(cfg),
    };
    run(session, paths, opts, Vec::new())
}

/// Trains a fresh vocoder-style decoder on normalized codes. The encoder
/// and codebook of `source` are carried over untouched so the result is a
/// complete codec.
pub fn train_vocoder(
    cfg: &ExperimentConfig,
    source: &Checkpoint,
    codes: &CodesDataset,
    train: &Corpus,
    paths: &RunPaths,
    opts: &RunOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    let gen = cfg.vocoder_codec()?.generator;
    let base = source.to_codec()?;
    if !base.codebook.is_frozen() {
        return Err(TrainError::Prerequisite("vocoder training needs a frozen-codebook checkpoint".into()));
    }
    if codes.dim != base.config.encoder.code_dim || codes.stats.dim() != codes.dim {
        return Err(TrainError::Config(format!(
            "code dataset dim {} (stats {}) does not match the codec code_dim {}",
            codes.dim,
            codes.stats.dim(),
            base.config.encoder.code_dim
        )));
    }
    if codes.hop != base.config.hop() {
        return Err(TrainError::Config("code dataset hop differs from the codec hop".into()));
    }
    let waves: BTreeMap<&str, &[f64]> = train.utterances.iter().map(|u| (u.name.as_str(), u.wave.samples())).collect();
    let mut items = Vec::new();
    for (i, u) in codes.utterances.iter().enumerate() {
        let Some(w) = waves.get(u.name.as_str()) else { continue };
        let input = codes.normalized_tensor(i)?;
        let mut wave = w.to_vec();
        wave.resize(input.len() * codes.hop, 0.0);
        items.push(VocoderItem { input, wave });
    }
    if items.is_empty() {
        return Err(TrainError::EmptyCorpus("no coded utterance matches the training corpus".into()));
    }
    let mut codec = base.with_decoder(gen, cfg.seed ^ 0x5eed)?;
    codec.norm = Some(codes.stats.clone());
    let session = Session {
        kind: StageKind::Vocoder,
        cfg,
        codec,
        adversary: Some(adversary(cfg, "vocoder-disc")?),
        gen_opt: adam(cfg, cfg.schedule.gen_lr),
        plan: mel_plan(cfg)?,
        source: Source::Codes(items),
        frozen_analysis: None,
        total: cfg.schedule.vocoder_iters,
    };
    run(session, paths, opts, Vec::new())
}

/// Hash of every parameter under `prefix` (codebook included for `vq.`).
pub fn weight_hash(ckpt: &Checkpoint, prefix: &str) -> String {
    ckpt.tensor_hash(prefix)
}
