//! Discriminator ensembles: period (MPD), multi-scale (MSD) and STFT
//! discriminators, each returning logits plus per-layer feature maps.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::nn::{power_iteration, Binder, Conv1d, Initializer, Padding, ParamStore, WeightParam};
use crate::signal::StftPlan;
use crate::tensor::Tensor;

pub const DISCRIMINATOR_PREFIX: &str = "disc.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorKind {
    Mpd,
    Msd,
    Stftd,
}

/// One convolution of a discriminator stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

const fn layer(out_channels: usize, kernel: usize, stride: usize, groups: usize) -> DiscLayer {
    DiscLayer {
        out_channels,
        kernel,
        stride,
        groups,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub kinds: Vec<DiscriminatorKind>,
    pub periods: Vec<usize>,
    pub mpd_layers: Vec<DiscLayer>,
    pub msd_scales: usize,
    pub msd_layers: Vec<DiscLayer>,
    /// Spectral normalization on the first (unpooled) scale.
    pub msd_first_spectral: bool,
    pub stft_fft_size: usize,
    pub stft_hop: usize,
    pub stftd_layers: Vec<DiscLayer>,
    pub slope: f64,
}

impl DiscriminatorConfig {
    /// Full-width stacks.
    pub fn full() -> Self {
        Self {
            kinds: vec![DiscriminatorKind::Mpd, DiscriminatorKind::Msd],
            periods: vec![2, 3, 5, 7, 11],
            mpd_layers: vec![layer(32, 5, 3, 1), layer(128, 5, 3, 1), layer(512, 5, 3, 1), layer(1024, 5, 3, 1), layer(1024, 5, 1, 1)],
            msd_scales: 3,
            msd_layers: vec![
                layer(128, 15, 1, 1),
                layer(128, 41, 2, 4),
                layer(256, 41, 2, 16),
                layer(512, 41, 4, 16),
                layer(1024, 41, 4, 16),
                layer(1024, 41, 1, 16),
                layer(1024, 5, 1, 1),
            ],
            msd_first_spectral: true,
            stft_fft_size: 1024,
            stft_hop: 256,
            stftd_layers: vec![layer(32, 3, 1, 1), layer(32, 3, 2, 1), layer(32, 3, 2, 1), layer(32, 3, 1, 1)],
            slope: 0.2,
        }
    }

    /// Narrow stacks for CPU-scale runs.
    pub fn desk() -> Self {
        Self {
            mpd_layers: vec![layer(8, 5, 3, 1), layer(16, 5, 3, 1), layer(16, 5, 1, 1)],
            msd_layers: vec![layer(8, 15, 1, 1), layer(16, 41, 4, 4), layer(16, 41, 4, 4), layer(16, 5, 1, 1)],
            stftd_layers: vec![layer(16, 3, 1, 1), layer(16, 3, 2, 1), layer(16, 3, 1, 1)],
            ..Self::full()
        }
    }

    /// Hinge-loss baseline ensemble: STFT and multi-scale discriminators.
    pub fn with_kinds(mut self, kinds: &[DiscriminatorKind]) -> Self {
        self.kinds = kinds.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::Config("no discriminator kinds selected".into()));
        }
        if self.periods.contains(&0) {
            return Err(Error::Config("MPD periods must be ≥ 1".into()));
        }
        if self.kinds.contains(&DiscriminatorKind::Msd) && self.msd_scales == 0 {
            return Err(Error::Config("MSD needs at least one scale".into()));
        }
        for (name, layers, mut cin) in [("mpd", &self.mpd_layers, 1), ("msd", &self.msd_layers, 1), ("stftd", &self.stftd_layers, 2 * (self.stft_fft_size / 2 + 1))] {
            for l in layers {
                if l.kernel == 0 || l.stride == 0 || l.groups == 0 || cin % l.groups != 0 || l.out_channels % l.groups != 0 {
                    return Err(Error::Config(format!("{name}: layer {l:?} incompatible with {cin} input channels")));
                }
                cin = l.out_channels;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum DiscInput {
    Period(usize),
    /// Input average-pooled by 2 this many times.
    Pooled(usize),
    Stft(Arc<StftPlan>),
}

#[derive(Clone, Debug)]
struct SubDiscriminator {
    name: String,
    input: DiscInput,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

/// Logits and intermediate activations of one sub-discriminator.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    pub name: String,
    pub logits: Var,
    pub feature_maps: Vec<Var>,
}

/// Plain-tensor counterpart of [`DiscriminatorOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorValues {
    pub name: String,
    pub logits: Tensor,
    pub feature_maps: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Discriminators {
    config: DiscriminatorConfig,
    subs: Vec<SubDiscriminator>,
}

fn stack(name: &str, layers: &[DiscLayer], in_channels: usize, param: WeightParam) -> (Vec<Conv1d>, Conv1d) {
    let mut cin = in_channels;
    let convs = layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let c = Conv1d::causal(format!("{name}.l{i}"), cin, l.out_channels, l.kernel)
                .stride(l.stride)
                .groups(l.groups)
                .padding(Padding::Same((l.kernel - 1) / 2))
                .param(param);
            cin = l.out_channels;
            c
        })
        .collect();
    let post = Conv1d::causal(format!("{name}.post"), cin, 1, 3).padding(Padding::Same(1)).param(param);
    (convs, post)
}

impl Discriminators {
    pub fn new(config: &DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let mut subs = Vec::new();
        for kind in &config.kinds {
            match kind {
                DiscriminatorKind::Mpd => {
                    for &p in &config.periods {
                        let name = format!("disc.mpd.p{p}");
                        let (convs, post) = stack(&name, &config.mpd_layers, 1, WeightParam::WeightNorm);
                        subs.push(SubDiscriminator {
                            name,
                            input: DiscInput::Period(p),
                            convs,
                            post,
                        });
                    }
                }
                DiscriminatorKind::Msd => {
                    for s in 0..config.msd_scales {
                        let name = format!("disc.msd.s{s}");
                        let param = if s == 0 && config.msd_first_spectral {
                            WeightParam::SpectralNorm
                        } else {
                            WeightParam::WeightNorm
                        };
                        let (convs, post) = stack(&name, &config.msd_layers, 1, param);
                        subs.push(SubDiscriminator {
                            name,
                            input: DiscInput::Pooled(s),
                            convs,
                            post,
                        });
                    }
                }
                DiscriminatorKind::Stftd => {
                    let plan = Arc::new(StftPlan::new(config.stft_fft_size, config.stft_hop));
                    let name = "disc.stftd".to_string();
                    let (convs, post) = stack(&name, &config.stftd_layers, 2 * plan.bins(), WeightParam::WeightNorm);
                    subs.push(SubDiscriminator {
                        name,
                        input: DiscInput::Stft(plan),
                        convs,
                        post,
                    });
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            subs,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn names(&self) -> Vec<String> {
        self.subs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn uses_stft(&self) -> bool {
        self.subs.iter().any(|s| matches!(s.input, DiscInput::Stft(_)))
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        for s in &self.subs {
            let net = crate::nn::Network::new(
                s.convs
                    .iter()
                    .chain(std::iter::once(&s.post))
                    .cloned()
                    .map(crate::nn::Block::Conv)
                    .collect(),
            );
            net.init(store, init);
        }
    }

    /// Shortest input every sub-discriminator accepts.
    pub fn min_input_len(&self) -> usize {
        let mut min = 1;
        for s in &self.subs {
            let need = match &s.input {
                DiscInput::Period(_) => 1,
                DiscInput::Pooled(k) => 1 << k,
                DiscInput::Stft(plan) => plan.fft_size() / 2 + 1,
            };
            min = min.max(need);
        }
        min
    }

    /// Records every sub-discriminator on `x` (`[B, 1, T]`).
    pub fn forward_graph(&self, g: &mut Graph, binder: &mut Binder, x: Var) -> Result<Vec<DiscriminatorOutput>> {
        let len = g.value(x).len();
        if len < self.min_input_len() {
            return Err(Error::Shape(format!(
                "discriminator input of {len} samples is shorter than the minimum {}",
                self.min_input_len()
            )));
        }
        let slope = self.config.slope;
        let mut outs = Vec::with_capacity(self.subs.len());
        let mut pooled = vec![x];
        for s in &self.subs {
            let mut h = match &s.input {
                DiscInput::Period(p) => g.period_fold(x, *p),
                DiscInput::Pooled(k) => {
                    while pooled.len() <= *k {
                        let last = *pooled.last().expect("non-empty");
                        let next = g.avg_pool(last, 2, 2, 0);
                        pooled.push(next);
                    }
                    pooled[*k]
                }
                DiscInput::Stft(plan) => g.stft(x, plan.clone()),
            };
            let mut maps = Vec::with_capacity(s.convs.len() + 1);
            for c in &s.convs {
                let y = c.forward_graph(g, binder, h)?;
                h = g.unary(y, Unary::LeakyRelu(slope));
                maps.push(h);
            }
            let logits = s.post.forward_graph(g, binder, h)?;
            maps.push(logits);
            outs.push(DiscriminatorOutput {
                name: s.name.clone(),
                logits,
                feature_maps: maps,
            });
        }
        Ok(outs)
    }

    /// Inference on a `[B, 1, T]` batch.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<DiscriminatorValues>> {
        let mut g = Graph::new();
        let mut binder = Binder::new(store).freeze_prefix("");
        let xv = g.constant(x.clone());
        let outs = self.forward_graph(&mut g, &mut binder, xv)?;
        Ok(outs
            .into_iter()
            .map(|o| DiscriminatorValues {
                name: o.name,
                logits: g.value(o.logits).clone(),
                feature_maps: o.feature_maps.iter().map(|&m| g.value(m).clone()).collect(),
            })
            .collect())
    }

    /// Advances the stored power-iteration vectors of spectrally
    /// normalized layers by one step.
    pub fn update_spectral_state(&self, store: &mut ParamStore) -> Result<()> {
        for s in &self.subs {
            for c in s.convs.iter().chain(std::iter::once(&s.post)) {
                if c.param != WeightParam::SpectralNorm {
                    continue;
                }
                let w = store.get(&format!("{}.weight", c.name))?.clone();
                let key = format!("{}.sn_u", c.name);
                let u0 = store.get(&key)?.data().to_vec();
                let (u, _) = power_iteration(&w, &u0);
                store.insert(key, Tensor::from_vec([1, 1, u.len()], u));
            }
        }
        Ok(())
    }
}

fn single_kind(config: &DiscriminatorConfig, kind: DiscriminatorKind) -> DiscriminatorConfig {
    config.clone().with_kinds(&[kind])
}

/// Period discriminators for each of `periods` on a mono waveform.
pub fn mpd_forward(wave: &[f64], periods: &[usize], config: &DiscriminatorConfig, store: &ParamStore) -> Result<Vec<DiscriminatorValues>> {
    if wave.is_empty() {
        return Err(Error::EmptyAudio("discriminator input".into()));
    }
    let cfg = DiscriminatorConfig {
        periods: periods.to_vec(),
        ..single_kind(config, DiscriminatorKind::Mpd)
    };
    Discriminators::new(&cfg)?.forward(store, &Tensor::signal(wave))
}

/// Multi-scale discriminators: scale `k` sees the input pooled `k` times.
pub fn msd_forward(wave: &[f64], num_scales: usize, config: &DiscriminatorConfig, store: &ParamStore) -> Result<Vec<DiscriminatorValues>> {
    let cfg = DiscriminatorConfig {
        msd_scales: num_scales,
        ..single_kind(config, DiscriminatorKind::Msd)
    };
    Discriminators::new(&cfg)?.forward(store, &Tensor::signal(wave))
}

pub fn stftd_forward(wave: &[f64], config: &DiscriminatorConfig, store: &ParamStore) -> Result<DiscriminatorValues> {
    let d = Discriminators::new(&single_kind(config, DiscriminatorKind::Stftd))?;
    Ok(d.forward(store, &Tensor::signal(wave))?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{period_fold, period_unfold};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &DiscriminatorConfig) -> (Discriminators, ParamStore) {
        let d = Discriminators::new(cfg).unwrap();
        let mut store = ParamStore::new();
        d.init(&mut store, &mut Initializer::new(3, 0.1));
        (d, store)
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn period_grid_shapes_and_inverse() {
        let x = Tensor::signal(&noise(100, 1));
        let f = period_fold(&x, 4);
        assert_eq!(f.shape(), [4, 1, 25]);
        assert_eq!(period_unfold(&f, 4, x.shape()), x);
        let y = Tensor::signal(&noise(101, 2));
        let f = period_fold(&y, 4);
        assert_eq!(f.shape(), [4, 1, 26]);
        // padded tail is zero
        assert_eq!(f.row(1, 0)[25], 0.0);
        assert_eq!(f.row(0, 0)[25], y.data()[100]);
    }

    #[test]
    fn periodic_input_gives_identical_logits_for_shifted_copy() {
        let cfg = DiscriminatorConfig::desk();
        let (_, store) = setup(&cfg);
        let p = 5;
        let cycle = noise(p, 3);
        let x: Vec<f64> = (0..200).map(|n| cycle[n % p]).collect();
        let shifted: Vec<f64> = (0..200).map(|n| cycle[(n + p) % p]).collect();
        let a = mpd_forward(&x, &[p], &cfg, &store).unwrap();
        let b = mpd_forward(&shifted, &[p], &cfg, &store).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn feature_maps_congruent_between_real_and_fake() {
        let cfg = DiscriminatorConfig::desk().with_kinds(&[DiscriminatorKind::Mpd, DiscriminatorKind::Msd, DiscriminatorKind::Stftd]);
        let (d, store) = setup(&cfg);
        let real = d.forward(&store, &Tensor::signal(&noise(1200, 4))).unwrap();
        let fake = d.forward(&store, &Tensor::signal(&noise(1200, 5))).unwrap();
        assert_eq!(real.len(), 5 + 3 + 1);
        for (r, f) in real.iter().zip(&fake) {
            assert_eq!(r.name, f.name);
            assert_eq!(r.feature_maps.len(), f.feature_maps.len());
            for (a, b) in r.feature_maps.iter().zip(&f.feature_maps) {
                assert_eq!(a.shape(), b.shape());
            }
        }
        let again = d.forward(&store, &Tensor::signal(&noise(1200, 4))).unwrap();
        assert_eq!(real, again);
    }

    #[test]
    fn pooling_is_repeated_halving() {
        let x = noise(64, 6);
        let mut g = Graph::new();
        let v = g.constant(Tensor::signal(&x));
        let p1 = g.avg_pool(v, 2, 2, 0);
        let p2 = g.avg_pool(p1, 2, 2, 0);
        let manual1: Vec<f64> = x.chunks(2).map(|c| (c[0] + c[1]) / 2.0).collect();
        let manual2: Vec<f64> = manual1.chunks(2).map(|c| (c[0] + c[1]) / 2.0).collect();
        assert_eq!(g.value(p2).data(), manual2.as_slice());

        let constant = vec![0.7; 63];
        let mut g = Graph::new();
        let v = g.constant(Tensor::signal(&constant));
        let p = g.avg_pool(v, 2, 2, 0);
        let p = g.avg_pool(p, 2, 2, 0);
        assert!(g.value(p).data().iter().all(|&s| s == 0.7));
    }

    #[test]
    fn msd_scale_count_and_short_input() {
        let cfg = DiscriminatorConfig::desk();
        let (_, store) = setup(&cfg);
        assert_eq!(msd_forward(&noise(300, 7), 1, &cfg, &store).unwrap().len(), 1);
        assert_eq!(msd_forward(&noise(300, 7), 3, &cfg, &store).unwrap().len(), 3);
        assert!(msd_forward(&noise(3, 7), 3, &cfg, &store).is_err());
    }

    #[test]
    fn stft_discriminator_on_silence_is_bias_response() {
        let cfg = DiscriminatorConfig::desk();
        let d = Discriminators::new(&cfg.clone().with_kinds(&[DiscriminatorKind::Stftd])).unwrap();
        let mut store = ParamStore::new();
        d.init(&mut store, &mut Initializer::new(1, 0.1));
        let out = stftd_forward(&vec![0.0; 2048], &cfg, &store).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        assert!(!Discriminators::new(&cfg).unwrap().uses_stft());
        assert!(stftd_forward(&[0.0; 10], &cfg, &store).is_err());
    }

    #[test]
    fn spectral_state_update_changes_only_sn_vectors() {
        let cfg = DiscriminatorConfig::desk();
        let (d, mut store) = setup(&cfg);
        let before = store.clone();
        d.update_spectral_state(&mut store).unwrap();
        for (name, t) in before.iter() {
            if !name.ends_with(".sn_u") {
                assert_eq!(store.get(name).unwrap(), t);
            }
        }
        assert!(store.names().iter().any(|n| n.starts_with("disc.msd.s0") && n.ends_with("sn_u")));
        assert!(!store.names().iter().any(|n| n.starts_with("disc.msd.s1") && n.ends_with("sn_u")));
    }
}
