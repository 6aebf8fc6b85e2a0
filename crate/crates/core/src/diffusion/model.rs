//! Patch transformer denoiser: self-attention over image patches, then
//! cross-attention from patches to prompt tokens, then an MLP, per block.
//! The noise prediction is `g(t) * z + s(t) * head(h)` with both gains read
//! from the time embedding, so the network never has to copy the input noise
//! through its patch tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::attention::{AttentionMap, Provenance};
use super::prompt::PromptSpec;
use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vocab::{Token, PROMPT_LEN, VOCAB_SIZE};

const LN_EPS: f64 = 1e-5;
/// Logit offset that removes pad slots from the cross-attention softmax.
const PAD_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub prompt_len: usize,
    /// Remove pad slots from the cross-attention softmax.
    #[serde(default)]
    pub pad_mask: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 4,
            dim: 64,
            heads: 4,
            blocks: 2,
            mlp_hidden: 128,
            vocab: VOCAB_SIZE,
            prompt_len: PROMPT_LEN,
            pad_mask: false,
        }
    }
}

impl ModelConfig {
    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::param(
                "image size must be a multiple of the patch size",
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::param(
                "model dim must be divisible by the head count",
            ));
        }
        if self.dim % 2 != 0 {
            return Err(Error::param(
                "model dim must be even for the timestep embedding",
            ));
        }
        Ok(())
    }
}

macro_rules! weight_set {
    ($name:ident { $($field:ident),* $(,)? }) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)*
                }
            }

            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &self.$field));)*
            }

            fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
                $(out.push(&mut self.$field);)*
            }
        }
    };
}

weight_set!(StemWeights {
    tok_emb,
    tok_pos,
    patch_w,
    patch_b,
    patch_pos,
    time_w1,
    time_b1,
    time_w2,
    time_b2,
    out_ln_g,
    out_ln_b,
    out_w,
    out_b,
    gain_w,
    gain_b,
});

weight_set!(BlockWeights {
    ln1_g,
    ln1_b,
    sa_q,
    sa_k,
    sa_v,
    sa_o,
    sa_o_b,
    ln2_g,
    ln2_b,
    ca_q,
    ca_k,
    ca_v,
    ca_o,
    ca_o_b,
    ln3_g,
    ln3_b,
    mlp_w1,
    mlp_b1,
    mlp_w2,
    mlp_b2,
});

/// All model parameters, generic over storage (plain tensors or tape vars).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub stem: StemWeights<T>,
    pub blocks: Vec<BlockWeights<T>>,
}

impl<T> Weights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Weights<U> {
        Weights {
            stem: self.stem.map_named("", &mut f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_named(&format!("block{i}."), &mut f))
                .collect(),
        }
    }

    /// Parameters in their canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.stem.visit("", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}."), &mut out);
        }
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.stem.visit_mut(&mut out);
        for b in &mut self.blocks {
            b.visit_mut(&mut out);
        }
        out
    }
}

/// Sinusoidal embedding of a training timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[j] = arg.sin();
        out[half + j] = arg.cos();
    }
    out
}

/// 2-D sin-cos table, `[grid * grid, dim]`: row code then column code.
/// Used to initialize the patch positions so neighbouring patches start out
/// similar.
pub fn grid_embedding(grid: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            out.extend(timestep_embedding(r, dim / 2));
            out.extend(timestep_embedding(c, dim - dim / 2));
        }
    }
    out
}

/// Output of one denoiser pass.
pub struct ForwardOutput<'t, E: Element> {
    /// Predicted noise, same shape as the input sample.
    pub eps: Var<'t, E>,
    pub maps: AttentionMap<'t, E>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel<E> {
    pub config: ModelConfig,
    pub weights: Weights<Tensor<E>>,
}

impl<E: Element> DenoiserModel<E> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f64| -> Tensor<E> {
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                E::of(z * std)
            })
        };
        let (d, h) = (config.dim, config.mlp_hidden);
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let resid = lin(d) / (2.0 * config.blocks as f64).sqrt();
        let ones = |n: usize| Tensor::full(&[n], E::one());
        let zeros = |n: usize| Tensor::zeros(&[n]);

        let stem = StemWeights {
            tok_emb: normal(&[config.vocab, d], 1.0),
            tok_pos: normal(&[config.prompt_len, d], 0.1),
            patch_w: normal(&[config.patch_dim(), d], lin(config.patch_dim())),
            patch_b: zeros(d),
            patch_pos: Tensor::new(
                vec![config.patches(), d],
                grid_embedding(config.grid(), d)
                    .into_iter()
                    .map(E::of)
                    .collect(),
            )?,
            time_w1: normal(&[d, d], lin(d)),
            time_b1: zeros(d),
            time_w2: normal(&[d, d], lin(d)),
            time_b2: zeros(d),
            out_ln_g: ones(d),
            out_ln_b: zeros(d),
            out_w: normal(&[d, config.patch_dim()], 0.02),
            out_b: zeros(config.patch_dim()),
            gain_w: Tensor::zeros(&[d, 2]),
            gain_b: Tensor::full(&[2], E::one()),
        };
        let blocks = (0..config.blocks)
            .map(|_| BlockWeights {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                sa_q: normal(&[d, d], lin(d)),
                sa_k: normal(&[d, d], lin(d)),
                sa_v: normal(&[d, d], lin(d)),
                sa_o: normal(&[d, d], resid),
                sa_o_b: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                ca_q: normal(&[d, d], lin(d)),
                ca_k: normal(&[d, d], lin(d)),
                ca_v: normal(&[d, d], lin(d)),
                ca_o: normal(&[d, d], resid),
                ca_o_b: zeros(d),
                ln3_g: ones(d),
                ln3_b: zeros(d),
                mlp_w1: normal(&[d, h], lin(d)),
                mlp_b1: zeros(h),
                mlp_w2: normal(&[h, d], lin(h) / (2.0 * config.blocks as f64).sqrt()),
                mlp_b2: zeros(d),
            })
            .collect();
        Ok(Self {
            config,
            weights: Weights { stem, blocks },
        })
    }

    pub fn cast<F: Element>(&self) -> DenoiserModel<F> {
        DenoiserModel {
            config: self.config,
            weights: self.weights.map(|_, t| t.cast()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Digest of the configuration and every parameter name and shape.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.weights.named() {
            h.update(format!("{name}:{:?};", t.shape()).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Places the weights on a tape, as differentiable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<E>, trainable: bool) -> Weights<Var<'t, E>> {
        self.weights.map(|_, t| {
            if trainable {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Single-sample pass with frozen weights. `z` is `[32, 32, 3]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<E>,
        z: Var<'t, E>,
        t: usize,
        prompt: &PromptSpec,
    ) -> Result<ForwardOutput<'t, E>> {
        let w = self.bind(tape, false);
        let [hh, ww, cc] = self.config.image_shape();
        let zb = z.reshape(&[1, hh, ww, cc])?;
        let out = self.forward_batch(&w, zb, &[t], &[prompt])?;
        Ok(ForwardOutput {
            eps: out.eps.reshape(&[hh, ww, cc])?,
            maps: out.maps,
        })
    }

    /// Batched pass. `z` is `[B, 32, 32, 3]`.
    pub fn forward_batch<'t>(
        &self,
        w: &Weights<Var<'t, E>>,
        z: Var<'t, E>,
        timesteps: &[usize],
        prompts: &[&PromptSpec],
    ) -> Result<ForwardOutput<'t, E>> {
        let cfg = &self.config;
        let tape = z.tape();
        let b = timesteps.len();
        let [hh, ww, cc] = cfg.image_shape();
        let (g, p, d, s) = (cfg.grid(), cfg.patch, cfg.dim, cfg.prompt_len);
        let np = cfg.patches();
        if z.shape() != [b, hh, ww, cc] || prompts.len() != b {
            return Err(Error::Dimension {
                op: "denoiser_forward",
                lhs: z.shape(),
                rhs: vec![b, hh, ww, cc],
            });
        }
        z.value().check_finite("denoiser input")?;

        // patchify: [B, g, p, g, p, C] -> [B, g, g, p, p, C]
        let patches = z
            .reshape(&[b, g, p, g, p, cc])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b * np, cfg.patch_dim()])?;
        let st = &w.stem;
        let mut h = patches.matmul(st.patch_w)?.add_bias(st.patch_b)?;
        let pos = tile(st.patch_pos, b)?;
        let temb_in: Vec<E> = timesteps
            .iter()
            .flat_map(|&t| timestep_embedding(t, d).into_iter().map(E::of))
            .collect();
        let temb = tape
            .constant(Tensor::new(vec![b, d], temb_in)?)
            .matmul(st.time_w1)?
            .add_bias(st.time_b1)?
            .gelu()
            .matmul(st.time_w2)?
            .add_bias(st.time_b2)?;
        // per-sample [input gain, head gain]
        let gains = temb.matmul(st.gain_w)?.add_bias(st.gain_b)?;
        h = h.add(pos)?.add(temb.repeat_rows(np)?)?;

        let mut ids = Vec::with_capacity(b * s);
        for pr in prompts {
            pr.validate()?;
            ids.extend_from_slice(&pr.token_ids);
        }
        let ctx = st.tok_emb.embedding(&ids)?.add(tile(st.tok_pos, b)?)?;
        // pad keys get zero cross-attention weight
        let pad = Token::Pad.id();
        let mask = cfg.pad_mask.then(|| {
            tape.constant(Tensor::from_fn(&[b * cfg.heads, np, s], |i| {
                let (sample, key) = (i / (cfg.heads * np * s), i % s);
                if ids[sample * s + key] == pad {
                    E::of(PAD_LOGIT)
                } else {
                    E::zero()
                }
            }))
        });

        let mut map_sum: Option<Var<'t, E>> = None;
        for blk in &w.blocks {
            let x = h.layer_norm(blk.ln1_g, blk.ln1_b, LN_EPS)?;
            let (sa, _) = self.attention(
                x,
                x,
                [blk.sa_q, blk.sa_k, blk.sa_v, blk.sa_o, blk.sa_o_b],
                None,
                b,
                np,
                np,
            )?;
            h = h.add(sa)?;

            let x = h.layer_norm(blk.ln2_g, blk.ln2_b, LN_EPS)?;
            let (ca, weights) = self.attention(
                x,
                ctx,
                [blk.ca_q, blk.ca_k, blk.ca_v, blk.ca_o, blk.ca_o_b],
                mask,
                b,
                np,
                s,
            )?;
            h = h.add(ca)?;
            // [B*H, P, S] -> [B, P, S], summed over heads
            let per_head = weights.reshape(&[b, cfg.heads, np, s])?.sum_axis(1)?;
            map_sum = Some(match map_sum {
                Some(acc) => acc.add(per_head)?,
                None => per_head,
            });

            let x = h.layer_norm(blk.ln3_g, blk.ln3_b, LN_EPS)?;
            let m = x
                .matmul(blk.mlp_w1)?
                .add_bias(blk.mlp_b1)?
                .gelu()
                .matmul(blk.mlp_w2)?
                .add_bias(blk.mlp_b2)?;
            h = h.add(m)?;
        }

        let out = h
            .layer_norm(st.out_ln_g, st.out_ln_b, LN_EPS)?
            .matmul(st.out_w)?
            .add_bias(st.out_b)?;
        let head = out
            .reshape(&[b, g, g, p, p, cc])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, hh * ww * cc])?;
        // eps = g(t) * z + s(t) * head, so the noise need not pass through the patch tokens
        let n = hh * ww * cc;
        let pick = |k: usize| {
            tape.constant(Tensor::from_fn(&[2, n], |i| {
                if i / n == k {
                    E::one()
                } else {
                    E::zero()
                }
            }))
        };
        let eps = z
            .reshape(&[b, n])?
            .mul(gains.matmul(pick(0))?)?
            .add(head.mul(gains.matmul(pick(1))?)?)?
            .reshape(&[b, hh, ww, cc])?;

        let averaged = map_sum
            .ok_or_else(|| Error::param("model has no blocks"))?
            .scale(1.0 / (cfg.heads * cfg.blocks) as f64);
        let maps = AttentionMap::new(
            averaged,
            g,
            Provenance {
                blocks: (0..cfg.blocks).collect(),
                heads: cfg.heads,
                smoothed: false,
            },
        )?;
        Ok(ForwardOutput { eps, maps })
    }

    /// Multi-head attention from `xq` rows to `xkv` rows, per sample.
    /// `mask` is added to the `[B*H, Pq, Pk]` logits. Returns the projected
    /// output and the weights.
    #[allow(clippy::too_many_arguments)]
    fn attention<'t>(
        &self,
        xq: Var<'t, E>,
        xkv: Var<'t, E>,
        [wq, wk, wv, wo, bo]: [Var<'t, E>; 5],
        mask: Option<Var<'t, E>>,
        b: usize,
        nq: usize,
        nk: usize,
    ) -> Result<(Var<'t, E>, Var<'t, E>)> {
        let (hd, nh, d) = (self.config.head_dim(), self.config.heads, self.config.dim);
        let split = |x: Var<'t, E>, n: usize| -> Result<Var<'t, E>> {
            x.reshape(&[b, n, nh, hd])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * nh, n, hd])
        };
        let q = split(xq.matmul(wq)?, nq)?;
        let k = split(xkv.matmul(wk)?, nk)?;
        let v = split(xkv.matmul(wv)?, nk)?;
        let mut logits = q.bmm(k, true)?;
        if let Some(m) = mask {
            logits = logits.add(m)?;
        }
        let weights = logits.softmax_rows((hd as f64).sqrt())?;
        let o = weights
            .bmm(v, false)?
            .reshape(&[b, nh, nq, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * nq, d])?;
        Ok((o.matmul(wo)?.add_bias(bo)?, weights))
    }
}

/// Stacks `times` copies of a `[n, d]` block into `[times * n, d]`.
fn tile<'t, E: Element>(x: Var<'t, E>, times: usize) -> Result<Var<'t, E>> {
    let s = x.shape();
    x.reshape(&[1, s[0] * s[1]])?
        .repeat_rows(times)?
        .reshape(&[times * s[0], s[1]])
}
