//! Deterministic DDIM sampling with the guidance hook.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Element, Tape, Tensor};
use crate::diffusion::{AttentionSnapshot, DenoiserModel, NoiseSchedule, PromptSpec};
use crate::error::{Error, Result};
use crate::guidance::{
    alpha_t, guidance_active, guidance_step, layout_energy, refine_latent, semantic_loss,
    GuidanceConfig, LayoutSpec, TraceRecord,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Keep the attention map of every `map_every`-th step (0 keeps none).
    pub map_every: usize,
    /// 0 is deterministic DDIM; 1 is ancestral.
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            map_every: 5,
            eta: 0.0,
        }
    }
}

/// Training timesteps visited by `steps` sampling steps, noisiest first.
pub fn timesteps(t_train: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_train {
        return Err(Error::param(format!(
            "sampling steps must lie in 1..={t_train}, got {steps}"
        )));
    }
    let stride = t_train / steps;
    Ok((0..steps).map(|k| t_train - 1 - stride * k).collect())
}

/// One DDIM update from `abar_t` to `abar_prev`; `None` means this is the
/// final step, which returns the clamped clean estimate.
pub fn ddim_step<E: Element>(
    z: &Tensor<E>,
    eps: &Tensor<E>,
    abar_t: f64,
    abar_prev: Option<f64>,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<E>> {
    if z.shape() != eps.shape() {
        return Err(Error::Dimension {
            op: "ddim_step",
            lhs: z.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    eps.check_finite("predicted noise")?;
    let (sa, sn) = (abar_t.sqrt(), (1.0 - abar_t).sqrt());
    let x0 = |x: E, e: E| (x.as_f64() - sn * e.as_f64()) / sa;
    let data = match abar_prev {
        None => z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| E::of(x0(x, e).clamp(-1.0, 1.0)))
            .collect(),
        Some(ap) => {
            let sigma = if eta > 0.0 {
                eta * ((1.0 - ap) / (1.0 - abar_t)).sqrt() * (1.0 - abar_t / ap).max(0.0).sqrt()
            } else {
                0.0
            };
            let dir = (1.0 - ap - sigma * sigma).max(0.0).sqrt();
            z.data()
                .iter()
                .zip(eps.data())
                .map(|(&x, &e)| {
                    let mut v = ap.sqrt() * x0(x, e) + dir * e.as_f64();
                    if sigma > 0.0 {
                        let n: f64 = StandardNormal.sample(rng);
                        v += sigma * n;
                    }
                    E::of(v)
                })
                .collect()
        }
    };
    Tensor::new(z.shape().to_vec(), data)
}

/// Attention readouts of the denoising pass at one step, measured the same
/// way whether or not the run is guided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub t: usize,
    pub subject_maxes: BTreeMap<usize, f64>,
    pub box_ratios: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SamplerState<E> {
    pub z: Tensor<E>,
    /// Next step to run, 1-based; `steps + 1` when finished.
    pub step_index: usize,
    pub seed: u64,
    pub rng: ChaCha8Rng,
    pub trace: Vec<TraceRecord>,
    pub stats: Vec<StepStats>,
    pub maps: Vec<(usize, AttentionSnapshot)>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Final image in `[-1, 1]`, `[32, 32, 3]`.
    pub image: Tensor<f32>,
    pub maps: Vec<(usize, AttentionSnapshot)>,
    pub trace: Vec<TraceRecord>,
    pub stats: Vec<StepStats>,
    /// Words consumed from the sampler stream.
    pub rng_words: u128,
}

pub struct Sampler<'a, E: Element> {
    pub model: &'a DenoiserModel<E>,
    pub schedule: &'a NoiseSchedule,
    pub prompt: &'a PromptSpec,
    pub layout: Option<&'a LayoutSpec>,
    /// `None` samples without guidance.
    pub guidance: Option<&'a GuidanceConfig>,
    pub config: SamplerConfig,
    /// Boxes measured in the step stats but not guided towards.
    pub probe: Option<&'a LayoutSpec>,
    timesteps: Vec<usize>,
    measure: GuidanceConfig,
}

impl<'a, E: Element> Sampler<'a, E> {
    pub fn new(
        model: &'a DenoiserModel<E>,
        schedule: &'a NoiseSchedule,
        prompt: &'a PromptSpec,
        layout: Option<&'a LayoutSpec>,
        guidance: Option<&'a GuidanceConfig>,
        config: SamplerConfig,
    ) -> Result<Self> {
        prompt.validate()?;
        if let Some(l) = layout {
            l.validate(prompt)?;
        }
        if let Some(g) = guidance {
            g.validate(config.steps)?;
        }
        if !(config.eta >= 0.0 && config.eta <= 1.0) {
            return Err(Error::param(format!(
                "eta must lie in [0, 1], got {}",
                config.eta
            )));
        }
        Ok(Self {
            model,
            schedule,
            prompt,
            layout,
            guidance,
            timesteps: timesteps(schedule.t_train, config.steps)?,
            config,
            probe: None,
            measure: GuidanceConfig::default(),
        })
    }

    /// Also records in-box ratios for `layout` when it is not guided.
    pub fn with_probe(mut self, layout: Option<&'a LayoutSpec>) -> Result<Self> {
        if let Some(l) = layout {
            l.validate(self.prompt)?;
        }
        self.probe = layout;
        Ok(self)
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Initial noise drawn from the stream seeded by `seed`.
    pub fn init(&self, seed: u64) -> SamplerState<E> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::from_fn(&self.model.config.image_shape(), |_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            E::of(n)
        });
        SamplerState {
            z,
            step_index: 1,
            seed,
            rng,
            trace: Vec::new(),
            stats: Vec::new(),
            maps: Vec::new(),
        }
    }

    pub fn is_done(&self, state: &SamplerState<E>) -> bool {
        state.step_index > self.config.steps
    }

    /// Runs one sampling step: optional refinement and guidance on the
    /// latent, then the denoising update.
    pub fn step(&self, state: &mut SamplerState<E>) -> Result<()> {
        let step = state.step_index;
        if self.is_done(state) {
            return Err(Error::contract("sampler already finished"));
        }
        self.step_inner(state, step).map_err(|e| e.at_step(step))
    }

    fn step_inner(&self, state: &mut SamplerState<E>, step: usize) -> Result<()> {
        let t = self.timesteps[step - 1];
        let abar = self.schedule.alpha_bar(t);

        if let Some(g) = self.guidance {
            if guidance_active(step, self.config.steps, g)? {
                let alpha = alpha_t(g, abar);
                let mut refinement = None;
                if let Some(m) = g.milestone_at(step) {
                    let (z, rep) = refine_latent(
                        self.model,
                        &state.z,
                        t,
                        self.prompt,
                        self.layout,
                        g,
                        m,
                        alpha,
                    )?;
                    state.z = z;
                    refinement = Some(rep);
                }
                let (z, losses) =
                    guidance_step(self.model, &state.z, t, self.prompt, self.layout, g, alpha)?;
                state.z = z;
                state.trace.push(TraceRecord {
                    step,
                    t,
                    alpha_t: alpha,
                    losses,
                    refinement,
                });
            }
        }

        let tape = Tape::new();
        let out = self
            .model
            .forward(&tape, tape.constant(state.z.clone()), t, self.prompt)?;
        let subject_maxes = if self.prompt.subject_positions.is_empty() {
            BTreeMap::new()
        } else {
            let s = semantic_loss(&out.maps, 0, &self.prompt.subject_positions, &self.measure)?;
            s.subjects.into_iter().zip(s.maxes).collect()
        };
        let box_ratios = match self.layout.or(self.probe) {
            Some(l) if !l.is_empty() => layout_energy(&out.maps, 0, l, &self.measure)?.ratios,
            _ => Vec::new(),
        };
        state.stats.push(StepStats {
            step,
            t,
            subject_maxes,
            box_ratios,
        });
        if self.config.map_every > 0 && step % self.config.map_every == 0 {
            state.maps.push((step, out.maps.snapshot(0)));
        }
        let eps = out.eps.to_tensor();
        drop(out);
        let prev = self
            .timesteps
            .get(step)
            .map(|&tp| self.schedule.alpha_bar(tp));
        state.z = ddim_step(&state.z, &eps, abar, prev, self.config.eta, &mut state.rng)?;
        state.step_index += 1;
        Ok(())
    }

    pub fn finish(&self, mut state: SamplerState<E>) -> Result<SampleOutput> {
        while !self.is_done(&state) {
            self.step(&mut state)?;
        }
        Ok(SampleOutput {
            image: state.z.cast(),
            maps: state.maps,
            trace: state.trace,
            stats: state.stats,
            rng_words: state.rng.get_word_pos(),
        })
    }

    pub fn run(&self, seed: u64) -> Result<SampleOutput> {
        self.finish(self.init(seed))
    }
}

/// Plain DDIM loop without any guidance machinery, kept as an independent
/// reference for no-op comparisons.
pub fn sample_reference<E: Element>(
    model: &DenoiserModel<E>,
    schedule: &NoiseSchedule,
    prompt: &PromptSpec,
    seed: u64,
    steps: usize,
) -> Result<(Tensor<f32>, u128)> {
    let ts = timesteps(schedule.t_train, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::from_fn(&model.config.image_shape(), |_| {
        let n: f64 = StandardNormal.sample(&mut rng);
        E::of(n)
    });
    for (k, &t) in ts.iter().enumerate() {
        let tape = Tape::new();
        let eps = model
            .forward(&tape, tape.constant(z.clone()), t, prompt)?
            .eps
            .to_tensor();
        let prev = ts.get(k + 1).map(|&tp| schedule.alpha_bar(tp));
        z = ddim_step(&z, &eps, schedule.alpha_bar(t), prev, 0.0, &mut rng)?;
    }
    Ok((z.cast(), rng.get_word_pos()))
}

/// Per-sample seed derived from a master seed and the sample index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Worker count: available parallelism, capped by `ATTNGUIDE_THREADS`.
pub fn worker_count() -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("ATTNGUIDE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(cap) if cap > 0 => hw.min(cap),
        _ => hw,
    }
}

/// Runs `f(0..n)` on up to `workers` threads, returning results in index
/// order. The first error wins.
pub fn fan_out<T: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::Internal("missing worker result".into()))))
        .collect()
}
