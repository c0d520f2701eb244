//! The 3D denoising U-Net: 3D cross-attention blocks (temporal convolutions,
//! spatial, gated, cross and temporal attention) on a down/up-sampling path,
//! conditioned on the diffusion step, text token features and box tokens.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, temporal_neighbours, Init, LayerNorm, Linear, ParamStore};
use crate::scenario::text::MAX_TOKENS;
use crate::scenario::{BBox, BBoxTrack};

/// Sub-blocks of a 3D cross-attention block, applied in configured order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubBlock {
    Conv,
    Spatial,
    Gated,
    Cross,
    Temporal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub frames: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub heads: usize,
    pub fourier_freqs: usize,
    pub max_tokens: usize,
    pub text_width: usize,
    pub time_dim: usize,
    pub grounding_dim: usize,
    pub class_embedding: bool,
    pub block_order: Vec<SubBlock>,
    pub seed: u64,
}

impl UNetConfig {
    pub const DEFAULT_ORDER: [SubBlock; 5] =
        [SubBlock::Conv, SubBlock::Spatial, SubBlock::Gated, SubBlock::Cross, SubBlock::Temporal];

    pub fn desk() -> Self {
        Self {
            latent_channels: 192,
            latent_size: 8,
            frames: 16,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            heads: 4,
            fourier_freqs: 8,
            max_tokens: 8,
            text_width: 64,
            time_dim: 128,
            grounding_dim: 64,
            class_embedding: false,
            block_order: Self::DEFAULT_ORDER.to_vec(),
            seed: 0,
        }
    }

    /// Large configuration mirroring the published model scale. Not runnable on a desk CPU.
    pub fn paper_faithful() -> Self {
        Self {
            base_channels: 320,
            channel_mults: vec![1, 2, 4, 4],
            heads: 8,
            time_dim: 1280,
            grounding_dim: 768,
            latent_size: 8,
            ..Self::desk()
        }
    }

    /// Small configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            base_channels: 16,
            channel_mults: vec![1, 2],
            heads: 2,
            time_dim: 32,
            grounding_dim: 16,
            ..Self::desk()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.heads == 0 {
            return Err(Error::Config("U-Net needs at least one level and one head".into()));
        }
        for w in self.widths() {
            if w == 0 || w % self.heads != 0 {
                return Err(Error::Config(format!("width {w} not divisible by {} heads", self.heads)));
            }
        }
        let scale = 1usize << (self.channel_mults.len() - 1);
        if self.latent_size == 0 || self.latent_size % scale != 0 {
            return Err(Error::Config(format!(
                "latent size {} not divisible by {scale}",
                self.latent_size
            )));
        }
        let mut order = self.block_order.clone();
        order.sort_by_key(|b| *b as u8);
        order.dedup();
        if order.len() != 5 || self.block_order.len() != 5 {
            return Err(Error::Config(format!("block order {:?} must list each sub-block once", self.block_order)));
        }
        if self.time_dim % 2 != 0 || self.fourier_freqs == 0 || self.max_tokens == 0 {
            return Err(Error::Config("time_dim must be even; fourier_freqs and max_tokens positive".into()));
        }
        Ok(())
    }
}

/// `(sin(2^i π x), cos(2^i π x))` for `i < F`, concatenated over the four coordinates.
pub fn fourier_embed(b: &BBox, freqs: usize) -> Result<Vec<f64>> {
    let coords = b.coords();
    if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Domain(format!("box {coords:?} not normalized")));
    }
    let mut out = Vec::with_capacity(8 * freqs);
    for x in coords {
        for i in 0..freqs {
            let a = (1u64 << i) as f64 * PI * x;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Ok(out)
}

/// Track indices of the boxes kept at frame `t`: largest area first, lower
/// track index on ties, at most `n`.
pub fn select_boxes(tracks: &[BBoxTrack], t: usize, n: usize) -> Vec<usize> {
    let mut present: Vec<(usize, f64)> = tracks
        .iter()
        .enumerate()
        .filter_map(|(i, tr)| tr.boxes.get(t).copied().flatten().map(|b| (i, b.area())))
        .collect();
    present.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    present.into_iter().take(n).map(|(i, _)| i).collect()
}

/// Fourier features, validity and class ids of the selected boxes of a clip,
/// laid out `(frames, n, 8F)`, `(frames, n)` and `(frames, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingInput {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    pub valid: Vec<bool>,
    pub classes: Vec<u8>,
}

impl GroundingInput {
    pub fn from_tracks(tracks: &[BBoxTrack], frames: usize, freqs: usize, n: usize) -> Result<Self> {
        let dim = 8 * freqs;
        let mut features = vec![0.0; frames * n * dim];
        let mut valid = vec![false; frames * n];
        let mut classes = vec![0; frames * n];
        for t in 0..frames {
            for (slot, i) in select_boxes(tracks, t, n).into_iter().enumerate() {
                let b = tracks[i].boxes[t].expect("selected boxes are present");
                let at = (t * n + slot) * dim;
                features[at..at + dim].copy_from_slice(&fourier_embed(&b, freqs)?);
                valid[t * n + slot] = true;
                classes[t * n + slot] = tracks[i].class_id;
            }
        }
        Ok(Self {
            frames,
            tokens: n,
            dim,
            features,
            valid,
            classes,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Batched conditioning for one forward pass.
#[derive(Clone, Debug)]
pub struct Conditioning {
    /// `(b, l, text_width)` token features.
    pub text: Tensor,
    /// `(b, l)` 1 for real tokens.
    pub text_mask: Tensor,
    /// `(b, frames, n, 8F)` Fourier features.
    pub boxes: Tensor,
    /// `(b, frames, n)` 1 for present boxes.
    pub box_valid: Tensor,
    /// `(b, frames, n)` class ids.
    pub box_class: Tensor,
}

impl Conditioning {
    pub fn new(text: Tensor, text_mask: Tensor, grounding: &[&GroundingInput]) -> Result<Self> {
        let b = text.dim(0)?;
        if grounding.len() != b || text_mask.dims2()? != (b, text.dim(1)?) {
            return Err(Error::Shape(format!(
                "{} grounding inputs / mask {:?} for text {:?}",
                grounding.len(),
                text_mask.dims(),
                text.dims()
            )));
        }
        if text.dim(1)? > MAX_TOKENS {
            return Err(Error::Domain(format!("text of {} tokens exceeds {MAX_TOKENS}", text.dim(1)?)));
        }
        let g0 = grounding[0];
        if grounding.iter().any(|g| (g.frames, g.tokens, g.dim) != (g0.frames, g0.tokens, g0.dim)) {
            return Err(Error::Shape("grounding inputs differ in layout".into()));
        }
        let dev = &Device::Cpu;
        let (f, n, d) = (g0.frames, g0.tokens, g0.dim);
        let feats: Vec<f32> = grounding.iter().flat_map(|g| g.features.iter().map(|v| *v as f32)).collect();
        let valid: Vec<f32> = grounding.iter().flat_map(|g| g.valid.iter().map(|v| *v as u8 as f32)).collect();
        let class: Vec<u32> = grounding.iter().flat_map(|g| g.classes.iter().map(|c| *c as u32)).collect();
        Ok(Self {
            text: text.to_dtype(DType::F32)?,
            text_mask: text_mask.to_dtype(DType::F32)?,
            boxes: Tensor::from_vec(feats, (b, f, n, d), dev)?,
            box_valid: Tensor::from_vec(valid, (b, f, n), dev)?,
            box_class: Tensor::from_vec(class, (b, f, n), dev)?,
        })
    }
}

/// Pre-norm multi-head attention with its own projections.
pub struct Attention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, kv_in: usize, heads: usize, zero_out: bool) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c)?,
            q: Linear::new(ps, &format!("{name}.q"), c, c, false)?,
            k: Linear::new(ps, &format!("{name}.k"), kv_in, c, false)?,
            v: Linear::new(ps, &format!("{name}.v"), kv_in, c, false)?,
            out: if zero_out {
                Linear::zeros(ps, &format!("{name}.out"), c, c)?
            } else {
                Linear::new(ps, &format!("{name}.out"), c, c, true)?
            },
            heads,
        })
    }

    /// Self-attention when `ctx` is `None`, otherwise queries `x` against `ctx`.
    /// Returns the projected update (not yet added to `x`) and the weights.
    pub fn attend(&self, x: &Tensor, ctx: Option<&Tensor>, key_mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let h = self.norm.forward(x)?;
        let kv = ctx.unwrap_or(&h);
        let (o, w) = multi_head_attention(
            &self.q.forward(&h)?,
            &self.k.forward(kv)?,
            &self.v.forward(kv)?,
            self.heads,
            key_mask,
        )?;
        Ok((self.out.forward(&o)?, w))
    }
}

/// Residual attention over visual and grounding tokens scaled by `tanh(gate)`.
pub struct GatedSelfAttention {
    proj: Linear,
    attn: Attention,
    gate: Tensor,
    gate_name: String,
}

impl GatedSelfAttention {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, token_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, &format!("{name}.proj"), token_dim, c, true)?,
            attn: Attention::new(ps, &format!("{name}.attn"), c, c, heads, false)?,
            gate: ps.param(&format!("{name}.gate"), &[], Init::Zeros)?,
            gate_name: format!("{name}.gate"),
        })
    }

    pub fn gate_name(&self) -> &str {
        &self.gate_name
    }

    /// `visual: (n, l, c)`, `tokens: (n, m, token_dim)`, `valid: (n, m)`.
    pub fn forward(&self, visual: &Tensor, tokens: &Tensor, valid: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, l, c) = visual.dims3()?;
        let (tn, m, _) = tokens.dims3()?;
        if tn != n || valid.dims2()? != (n, m) {
            return Err(Error::Shape(format!(
                "visual {:?}, tokens {:?}, valid {:?}",
                visual.dims(),
                tokens.dims(),
                valid.dims()
            )));
        }
        let g = self.proj.forward(tokens)?;
        if g.dim(2)? != c {
            return Err(Error::Shape(format!("grounding width {} vs visual {c}", g.dim(2)?)));
        }
        let joint = Tensor::cat(&[visual, &g], 1)?;
        let mask = Tensor::cat(&[&Tensor::ones((n, l), valid.dtype(), valid.device())?, valid], 1)?;
        let (upd, w) = self.attn.attend(&joint, None, Some(&mask))?;
        let upd = upd.narrow(1, 0, l)?;
        Ok((visual.broadcast_add(&upd.broadcast_mul(&self.gate.tanh()?)?)?, w))
    }
}

/// Four temporal convolutions of kernel (3,1,1) with edge replication, SiLU
/// between layers and a residual connection. Input `(b, frames, h, w, c)`.
pub struct Conv3dBlock {
    layers: Vec<Linear>,
}

impl Conv3dBlock {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let layers = (0..4)
            .map(|i| Linear::new(ps, &format!("{name}.{i}"), 3 * c, c, true))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() < 2 || x.dim(1)? == 0 {
            return Err(Error::Shape(format!("temporal convolution on {:?}", x.dims())));
        }
        let mut y = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.forward(&temporal_neighbours(&y)?)?;
            if i + 1 < self.layers.len() {
                y = y.silu()?;
            }
        }
        Ok((x + y)?)
    }
}

struct Cab {
    film: Linear,
    conv: Conv3dBlock,
    sa: Attention,
    ga: GatedSelfAttention,
    ca: Attention,
    ta: Attention,
}

struct CabInputs<'a> {
    temb: &'a Tensor,
    text: &'a Tensor,
    text_mask: &'a Tensor,
    tokens: &'a Tensor,
    token_valid: &'a Tensor,
}

impl Cab {
    fn new(ps: &mut ParamStore, name: &str, c: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            film: Linear::zeros(ps, &format!("{name}.film"), cfg.time_dim, 2 * c)?,
            conv: Conv3dBlock::new(ps, &format!("{name}.conv"), c)?,
            sa: Attention::new(ps, &format!("{name}.sa"), c, c, cfg.heads, true)?,
            ga: GatedSelfAttention::new(ps, &format!("{name}.ga"), c, cfg.grounding_dim, cfg.heads)?,
            ca: Attention::new(ps, &format!("{name}.ca"), c, cfg.text_width, cfg.heads, true)?,
            ta: Attention::new(ps, &format!("{name}.ta"), c, c, cfg.heads, true)?,
        })
    }

    fn forward(&self, x: &Tensor, inp: &CabInputs, order: &[SubBlock], log: &RefCell<Option<Vec<Tensor>>>) -> Result<Tensor> {
        let (b, t, h, w, c) = x.dims5()?;
        let ss = self.film.forward(&inp.temb.silu()?)?;
        let scale = (ss.narrow(1, 0, c)? + 1.0)?.reshape((b, 1, 1, 1, c))?;
        let shift = ss.narrow(1, c, c)?.reshape((b, 1, 1, 1, c))?;
        let mut x = x.broadcast_mul(&scale)?.broadcast_add(&shift)?;
        let record = |wts: Tensor| {
            if let Some(v) = log.borrow_mut().as_mut() {
                v.push(wts);
            }
        };
        let l = inp.text.dim(1)?;
        for blk in order {
            x = match blk {
                SubBlock::Conv => self.conv.forward(&x)?,
                SubBlock::Spatial => {
                    let flat = x.reshape((b * t, h * w, c))?;
                    let (upd, wts) = self.sa.attend(&flat, None, None)?;
                    record(wts);
                    (flat + upd)?.reshape((b, t, h, w, c))?
                }
                SubBlock::Gated => {
                    let flat = x.reshape((b * t, h * w, c))?;
                    let (m, g) = (inp.tokens.dim(2)?, inp.tokens.dim(3)?);
                    let (out, wts) = self.ga.forward(
                        &flat,
                        &inp.tokens.reshape((b * t, m, g))?,
                        &inp.token_valid.reshape((b * t, m))?,
                    )?;
                    record(wts);
                    out.reshape((b, t, h, w, c))?
                }
                SubBlock::Cross => {
                    let flat = x.reshape((b * t, h * w, c))?;
                    let tw = inp.text.dim(2)?;
                    let ctx = inp.text.unsqueeze(1)?.broadcast_as((b, t, l, tw))?.reshape((b * t, l, tw))?;
                    let mask = inp.text_mask.unsqueeze(1)?.broadcast_as((b, t, l))?.reshape((b * t, l))?;
                    let (upd, wts) = self.ca.attend(&flat, Some(&ctx), Some(&mask))?;
                    record(wts);
                    (flat + upd)?.reshape((b, t, h, w, c))?
                }
                SubBlock::Temporal => {
                    let seq = x.reshape((b, t, h * w, c))?.transpose(1, 2)?.reshape((b * h * w, t, c))?;
                    let (upd, wts) = self.ta.attend(&seq, None, None)?;
                    record(wts);
                    (seq + upd)?
                        .reshape((b, h * w, t, c))?
                        .transpose(1, 2)?
                        .reshape((b, t, h, w, c))?
                }
            };
        }
        Ok(x)
    }
}

/// Sinusoidal embedding of diffusion steps, `(b, dim)`.
pub fn timestep_embedding(ks: &[usize], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ks.len() * dim);
    for &k in ks {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((k as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((k as f64 * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(v, (ks.len(), dim), &Device::Cpu)?)
}

fn downsample(x: &Tensor) -> Result<Tensor> {
    let (b, t, h, w, c) = x.dims5()?;
    Ok(x.reshape((b * t, h / 2, 2, w / 2, 2, c))?
        .mean(4)?
        .mean(2)?
        .reshape((b, t, h / 2, w / 2, c))?)
}

fn upsample(x: &Tensor) -> Result<Tensor> {
    let (b, t, h, w, c) = x.dims5()?;
    Ok(x.reshape((b * t, h, 1, w, 1, c))?
        .broadcast_as((b * t, h, 2, w, 2, c))?
        .reshape((b, t, 2 * h, 2 * w, c))?)
}

/// The denoiser `φ(z_k, k, z_t, z_b)`.
pub struct OavdUNet {
    cfg: UNetConfig,
    params: ParamStore,
    time1: Linear,
    time2: Linear,
    ground1: Linear,
    ground2: Linear,
    class_embed: Option<Tensor>,
    input: Linear,
    down: Vec<(Cab, Linear)>,
    mid: Cab,
    up: Vec<(Linear, Cab)>,
    out_norm: LayerNorm,
    out: Linear,
    skip_in: Linear,
    skip_gain: Linear,
    skip_out: Linear,
    attn_log: RefCell<Option<Vec<Tensor>>>,
    gates_disabled: bool,
}

impl OavdUNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(cfg.seed, DType::F32);
        let widths = cfg.widths();
        let levels = widths.len();
        let time1 = Linear::new(&mut ps, "unet.time.0", cfg.time_dim, cfg.time_dim, true)?;
        let time2 = Linear::new(&mut ps, "unet.time.1", cfg.time_dim, cfg.time_dim, true)?;
        let ground1 = Linear::new(&mut ps, "unet.ground.0", 8 * cfg.fourier_freqs, cfg.grounding_dim, true)?;
        let ground2 = Linear::new(&mut ps, "unet.ground.1", cfg.grounding_dim, cfg.grounding_dim, true)?;
        let class_embed = if cfg.class_embedding {
            Some(ps.param("unet.ground.class", &[3, cfg.grounding_dim], Init::Normal(0.1))?)
        } else {
            None
        };
        let input = Linear::new(&mut ps, "unet.input", cfg.latent_channels, widths[0], true)?;
        let mut down = Vec::new();
        for i in 0..levels - 1 {
            let cab = Cab::new(&mut ps, &format!("unet.down{i}"), widths[i], &cfg)?;
            let proj = Linear::new(&mut ps, &format!("unet.down{i}.proj"), widths[i], widths[i + 1], true)?;
            down.push((cab, proj));
        }
        let mid = Cab::new(&mut ps, "unet.mid", widths[levels - 1], &cfg)?;
        let mut up = Vec::new();
        for i in (0..levels - 1).rev() {
            let merge = Linear::new(&mut ps, &format!("unet.up{i}.merge"), widths[i + 1] + widths[i], widths[i], true)?;
            let cab = Cab::new(&mut ps, &format!("unet.up{i}"), widths[i], &cfg)?;
            up.push((merge, cab));
        }
        let out_norm = LayerNorm::new(&mut ps, "unet.out_norm", widths[0])?;
        let out = Linear::zeros(&mut ps, "unet.out", widths[0], cfg.latent_channels)?;
        let c = cfg.latent_channels;
        let skip_in = Linear::with_init(&mut ps, "unet.skip.in", c, c, true, Init::Eye)?;
        let skip_gain = Linear::zeros(&mut ps, "unet.skip.gain", cfg.time_dim, c)?;
        let skip_out = Linear::with_init(&mut ps, "unet.skip.out", c, c, false, Init::Eye)?;
        Ok(Self {
            cfg,
            params: ps,
            time1,
            time2,
            ground1,
            ground2,
            class_embed,
            input,
            down,
            mid,
            up,
            out_norm,
            out,
            skip_in,
            skip_gain,
            skip_out,
            attn_log: RefCell::new(None),
            gates_disabled: false,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter names of the attention sub-blocks.
    pub fn is_attention_param(name: &str) -> bool {
        [".sa.", ".ga.", ".ca.", ".ta."].iter().any(|p| name.contains(p))
    }

    /// Replaces every gate by zero during forward passes (does not touch the stored gates).
    pub fn disable_gates(&mut self, disabled: bool) {
        self.gates_disabled = disabled;
    }

    pub fn gate_values(&self) -> Result<Vec<f32>> {
        self.params
            .named()
            .filter(|(k, _)| k.ends_with(".gate"))
            .map(|(_, v)| Ok(v.as_tensor().to_scalar::<f32>()?))
            .collect()
    }

    /// Starts collecting attention weight tensors from subsequent forward passes.
    pub fn record_attention(&self, on: bool) {
        *self.attn_log.borrow_mut() = on.then(Vec::new);
    }

    pub fn take_attention(&self) -> Vec<Tensor> {
        self.attn_log.borrow_mut().as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Box tokens `(b, frames, n, grounding_dim)`.
    pub fn grounding_tokens(&self, cond: &Conditioning) -> Result<Tensor> {
        let mut g = self.ground2.forward(&self.ground1.forward(&cond.boxes)?.silu()?)?;
        if let Some(emb) = &self.class_embed {
            let dims = cond.box_class.dims().to_vec();
            let e = emb
                .index_select(&cond.box_class.flatten_all()?, 0)?
                .reshape((dims[0], dims[1], dims[2], self.cfg.grounding_dim))?;
            g = (g + e)?;
        }
        Ok(g)
    }

    /// Predicted noise for `z_k: (b, frames, h, w, latent_channels)` at steps `ks`.
    pub fn forward(&self, z: &Tensor, ks: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let (b, t, h, w, c) = z.dims5()?;
        let cfg = &self.cfg;
        if c != cfg.latent_channels || h != cfg.latent_size || w != cfg.latent_size {
            return Err(Error::Shape(format!(
                "U-Net expects (*, *, {s}, {s}, {c}) latents, got {d:?}",
                s = cfg.latent_size,
                c = cfg.latent_channels,
                d = z.dims()
            )));
        }
        if ks.len() != b || cond.text.dim(0)? != b || cond.boxes.dims()[..2] != [b, t] {
            return Err(Error::Shape(format!(
                "batch {b}x{t}: {} steps, text {:?}, boxes {:?}",
                ks.len(),
                cond.text.dims(),
                cond.boxes.dims()
            )));
        }
        if cond.text.dim(2)? != cfg.text_width {
            return Err(Error::Shape(format!("text width {} vs {}", cond.text.dim(2)?, cfg.text_width)));
        }
        if cond.text.dim(1)? > MAX_TOKENS {
            return Err(Error::Domain(format!("text of {} tokens exceeds {MAX_TOKENS}", cond.text.dim(1)?)));
        }
        let temb = self
            .time2
            .forward(&self.time1.forward(&timestep_embedding(ks, cfg.time_dim)?)?.silu()?)?;
        let tokens = self.grounding_tokens(cond)?;
        let order = cfg.block_order.clone();
        let saved_gates = if self.gates_disabled { Some(self.zero_gates()?) } else { None };
        let inp = CabInputs {
            temb: &temb,
            text: &cond.text,
            text_mask: &cond.text_mask,
            tokens: &tokens,
            token_valid: &cond.box_valid,
        };
        let run = || -> Result<Tensor> {
            let mut x = self.input.forward(z)?;
            let mut skips = Vec::new();
            for (cab, proj) in &self.down {
                x = cab.forward(&x, &inp, &order, &self.attn_log)?;
                skips.push(x.clone());
                x = proj.forward(&downsample(&x)?)?;
            }
            x = self.mid.forward(&x, &inp, &order, &self.attn_log)?;
            for (merge, cab) in &self.up {
                let skip = skips.pop().expect("one skip per level");
                x = merge.forward(&Tensor::cat(&[&upsample(&x)?, &skip], D::Minus1)?)?;
                x = cab.forward(&x, &inp, &order, &self.attn_log)?;
            }
            let eps = self.out.forward(&self.out_norm.forward(&x)?)?;
            // Per-cell linear path with a step-dependent gain per channel; it carries
            // the part of the noise the narrow first level cannot represent.
            let gain = self.skip_gain.forward(&temb)?.reshape((b, 1, 1, 1, c))?;
            let skip = self.skip_out.forward(&self.skip_in.forward(z)?.broadcast_mul(&gain)?)?;
            Ok((eps + skip)?)
        };
        let result = run();
        if let Some(saved) = saved_gates {
            for (name, v) in saved {
                self.params.set(&name, &v)?;
            }
        }
        result
    }

    fn zero_gates(&self) -> Result<Vec<(String, Tensor)>> {
        let mut saved = Vec::new();
        for (name, var) in self.params.named() {
            if name.ends_with(".gate") {
                saved.push((name.clone(), var.as_tensor().copy()?));
                var.set(&var.as_tensor().zeros_like()?)?;
            }
        }
        Ok(saved)
    }

    pub fn checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut header = serde_json::json!({
            "kind": "oavd_unet",
            "config": self.cfg,
        });
        if let (Some(h), serde_json::Value::Object(e)) = (header.as_object_mut(), extra) {
            h.extend(e);
        }
        Checkpoint::new(&header, self.params.snapshot()?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("oavd_unet")?;
        let cfg: UNetConfig = serde_json::from_value(
            ck.header
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Compatibility("checkpoint lacks a U-Net config".into()))?,
        )?;
        let mut net = Self::new(cfg)?;
        net.params.load(&ck.tensors)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.checkpoint(extra)?.save(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn standard_normal_vec(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
        crate::rng::standard_normal_vec(rng, n).into_iter().map(f64::from).collect()
    }

    fn boxes(rng: &mut impl Rng, frames: usize, tracks: usize, p: f64) -> Vec<BBoxTrack> {
        (0..tracks)
            .map(|i| BBoxTrack {
                class_id: (i % 3) as u8,
                boxes: (0..frames)
                    .map(|_| {
                        rng.random_bool(p).then(|| {
                            let x0 = rng.random_range(0.0..0.8);
                            let y0 = rng.random_range(0.0..0.8);
                            BBox::new(x0, y0, x0 + rng.random_range(0.05..0.2), y0 + rng.random_range(0.05..0.2)).unwrap()
                        })
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn fourier_cases() {
        let zero = BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 0.0,
            y_max: 0.0,
        };
        let e = fourier_embed(&zero, 3).unwrap();
        assert_eq!(e.len(), 24);
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        let half = BBox::new(0.5, 0.5, 0.5 + 1e-9, 0.6).unwrap();
        let e = fourier_embed(&half, 1).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
        let b = BBox::new(0.1, 0.2, 0.6, 0.9).unwrap();
        let e = fourier_embed(&b, 2).unwrap();
        let mut want = Vec::new();
        for x in [0.1f64, 0.2, 0.6, 0.9] {
            want.extend([(PI * x).sin(), (PI * x).cos(), (2.0 * PI * x).sin(), (2.0 * PI * x).cos()]);
        }
        for (a, b) in e.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = BBox {
            x_min: -0.1,
            y_min: 0.0,
            x_max: 0.5,
            y_max: 0.5,
        };
        assert!(matches!(fourier_embed(&bad, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn selection_by_area_with_index_tie_break() {
        let mut rng = rng_for(1, "sel");
        for _ in 0..50 {
            let tracks = boxes(&mut rng, 1, 10, 0.7);
            let got = select_boxes(&tracks, 0, 8);
            let mut all: Vec<(usize, f64)> = tracks
                .iter()
                .enumerate()
                .filter_map(|(i, t)| t.boxes[0].map(|b| (i, b.area())))
                .collect();
            for i in 0..all.len() {
                for j in 0..all.len() - 1 - i {
                    let (a, b) = (all[j], all[j + 1]);
                    if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                        all.swap(j, j + 1);
                    }
                }
            }
            let want: Vec<usize> = all.iter().take(8).map(|p| p.0).collect();
            assert_eq!(got, want);
        }
        let same = BBox::new(0.0, 0.0, 0.25, 0.25).unwrap();
        let shifted = BBox::new(0.5, 0.5, 0.75, 0.75).unwrap();
        let tracks = vec![
            BBoxTrack { class_id: 0, boxes: vec![Some(shifted)] },
            BBoxTrack { class_id: 1, boxes: vec![Some(same)] },
        ];
        assert_eq!(select_boxes(&tracks, 0, 1), vec![0]);
        assert!(select_boxes(&[], 0, 4).is_empty());
    }

    fn setup(cfg: UNetConfig, b: usize, seed: u64) -> (OavdUNet, Tensor, Conditioning, Vec<usize>) {
        let net = OavdUNet::new(cfg.clone()).unwrap();
        let mut rng = rng_for(seed, "unet-test");
        let n = b * cfg.frames * cfg.latent_size * cfg.latent_size * cfg.latent_channels;
        let z = Tensor::from_vec(
            standard_normal_vec(&mut rng, n).into_iter().map(|v| v as f32).collect::<Vec<_>>(),
            (b, cfg.frames, cfg.latent_size, cfg.latent_size, cfg.latent_channels),
            &Device::Cpu,
        )
        .unwrap();
        let l = 5;
        let text = Tensor::from_vec(
            standard_normal_vec(&mut rng, b * l * cfg.text_width).into_iter().map(|v| v as f32).collect::<Vec<_>>(),
            (b, l, cfg.text_width),
            &Device::Cpu,
        )
        .unwrap();
        let mask = Tensor::ones((b, l), DType::F32, &Device::Cpu).unwrap();
        let g: Vec<GroundingInput> = (0..b)
            .map(|_| GroundingInput::from_tracks(&boxes(&mut rng, cfg.frames, 3, 0.9), cfg.frames, cfg.fourier_freqs, cfg.max_tokens).unwrap())
            .collect();
        let refs: Vec<&GroundingInput> = g.iter().collect();
        let cond = Conditioning::new(text, mask, &refs).unwrap();
        let ks = (0..b).map(|i| 10 + 40 * i).collect();
        (net, z, cond, ks)
    }

    #[test]
    fn zero_output_at_init_and_shapes() {
        for cfg in [UNetConfig::tiny(), UNetConfig::desk()] {
            let (net, z, cond, ks) = setup(cfg, 2, 0);
            let e = net.forward(&z, &ks, &cond).unwrap();
            assert_eq!(e.dims(), z.dims());
            assert_eq!(e.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn skip_path_is_identity_at_unit_gain() {
        let (net, z, cond, ks) = setup(UNetConfig::tiny(), 2, 0);
        let bias = net.params().get("unet.skip.gain.bias").unwrap();
        bias.set(&bias.as_tensor().ones_like().unwrap()).unwrap();
        let e = net.forward(&z, &ks, &cond).unwrap();
        let err = (e - &z).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let (net, z, cond, ks) = setup(UNetConfig::tiny(), 1, 1);
        net.record_attention(true);
        net.forward(&z, &ks, &cond).unwrap();
        let maps = net.take_attention();
        assert_eq!(maps.len(), 3 * 4);
        for m in maps {
            let sums = m.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn gated_attention_identity_at_zero_gate_and_grounding_gradient() {
        let mut ps = ParamStore::new(3, DType::F64);
        let ga = GatedSelfAttention::new(&mut ps, "ga", 8, 6, 2).unwrap();
        let dev = &Device::Cpu;
        let mut rng = rng_for(3, "ga");
        let visual = Tensor::from_vec(standard_normal_vec(&mut rng, 2 * 5 * 8), (2, 5, 8), dev).unwrap();
        let tokens = candle_core::Var::from_tensor(&Tensor::from_vec(standard_normal_vec(&mut rng, 2 * 3 * 6), (2, 3, 6), dev).unwrap()).unwrap();
        let valid = Tensor::from_vec(vec![1.0f64, 0.0, 1.0, 0.0, 0.0, 0.0], (2, 3), dev).unwrap();
        let (out, _) = ga.forward(&visual, tokens.as_tensor(), &valid).unwrap();
        assert_eq!(out.to_vec3::<f64>().unwrap(), visual.to_vec3::<f64>().unwrap());
        ps.set("ga.gate", &Tensor::new(0.7f64, dev).unwrap()).unwrap();
        let (out, _) = ga.forward(&visual, tokens.as_tensor(), &valid).unwrap();
        let diff = (&out - &visual).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 0.0);
        let loss = |tok: &Tensor| -> f64 {
            ga.forward(&visual, tok, &valid).unwrap().0.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let grads = ga.forward(&visual, tokens.as_tensor(), &valid).unwrap().0.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(tokens.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = tokens.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-5;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            let mut m = base.clone();
            m[i] -= eps;
            let fd = (loss(&Tensor::from_vec(p, (2, 3, 6), dev).unwrap()) - loss(&Tensor::from_vec(m, (2, 3, 6), dev).unwrap())) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
        assert!(g[..6].iter().any(|v| v.abs() > 1e-8), "valid token receives gradient");
        assert!(g[6..12].iter().chain(&g[18..]).all(|v| v.abs() < 1e-12), "masked tokens receive none");
        let none = Tensor::zeros((2, 3), DType::F64, dev).unwrap();
        let (with_tokens, _) = ga.forward(&visual, tokens.as_tensor(), &none).unwrap();
        let other = (tokens.as_tensor() * 3.0).unwrap();
        let (other_tokens, _) = ga.forward(&visual, &other, &none).unwrap();
        assert_eq!(with_tokens.to_vec3::<f64>().unwrap(), other_tokens.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn conv_block_matches_sliding_window_oracle() {
        let mut ps = ParamStore::new(4, DType::F64);
        let c = 2;
        let block = Conv3dBlock::new(&mut ps, "conv", c).unwrap();
        let dev = &Device::Cpu;
        let mut rng = rng_for(4, "conv");
        let (t, h, w) = (3, 2, 2);
        let x = standard_normal_vec(&mut rng, t * h * w * c);
        let got = block
            .forward(&Tensor::from_vec(x.clone(), (1, t, h, w, c), dev).unwrap())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let mut y = x.clone();
        for (li, name) in (0..4).map(|i| (i, format!("conv.{i}"))) {
            let wt = ps.get(&format!("{name}.weight")).unwrap().as_tensor().to_vec2::<f64>().unwrap();
            let bias = ps.get(&format!("{name}.bias")).unwrap().as_tensor().to_vec1::<f64>().unwrap();
            let mut next = vec![0.0; y.len()];
            for f in 0..t {
                for p in 0..h * w {
                    for o in 0..c {
                        let mut acc = bias[o];
                        for (tap, df) in [-1i64, 0, 1].iter().enumerate() {
                            let src = (f as i64 + df).clamp(0, t as i64 - 1) as usize;
                            for i in 0..c {
                                acc += y[(src * h * w + p) * c + i] * wt[tap * c + i][o];
                            }
                        }
                        next[(f * h * w + p) * c + o] = if li < 3 { acc / (1.0 + (-acc).exp()) } else { acc };
                    }
                }
            }
            y = next;
        }
        for i in 0..y.len() {
            assert!((got[i] - (x[i] + y[i])).abs() < 1e-12);
        }
        let constant: Vec<f64> = (0..h * w * c).map(|i| i as f64 * 0.1).collect::<Vec<_>>().repeat(t);
        let out = block
            .forward(&Tensor::from_vec(constant, (1, t, h, w, c), dev).unwrap())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let per = h * w * c;
        for f in 1..t {
            assert_eq!(out[f * per..(f + 1) * per], out[..per]);
        }
    }

    #[test]
    fn single_frame_temporal_attention_is_residual_identity() {
        let mut ps = ParamStore::new(5, DType::F64);
        let ta = Attention::new(&mut ps, "ta", 4, 4, 2, true).unwrap();
        let x = Tensor::from_vec(vec![0.3f64, -1.0, 2.0, 0.5], (1, 1, 4), &Device::Cpu).unwrap();
        let (upd, w) = ta.attend(&x, None, None).unwrap();
        assert_eq!(w.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
        assert!(upd.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn disabled_gates_ignore_grounding() {
        let (mut net, z, cond, ks) = setup(UNetConfig::tiny(), 1, 2);
        for name in net.params().named().map(|(k, _)| k.clone()).collect::<Vec<_>>() {
            if name.ends_with(".gate") || name == "unet.out.weight" {
                let v = net.params().get(&name).unwrap().as_tensor().clone();
                let mut rng = rng_for(7, &name);
                let noise: Vec<f32> = standard_normal_vec(&mut rng, v.elem_count()).into_iter().map(|x| x as f32 * 0.5).collect();
                net.params().set(&name, &Tensor::from_vec(noise, v.dims(), &Device::Cpu).unwrap()).unwrap();
            }
        }
        let mut moved = cond.clone();
        moved.boxes = (cond.boxes.clone() * 0.5).unwrap();
        let a = net.forward(&z, &ks, &cond).unwrap();
        let b = net.forward(&z, &ks, &moved).unwrap();
        assert!((&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() > 0.0);
        net.disable_gates(true);
        let a = net.forward(&z, &ks, &cond).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = net.forward(&z, &ks, &moved).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(net.gate_values().unwrap().iter().all(|g| *g != 0.0), "stored gates restored");
    }

    #[test]
    fn config_validation_and_checkpoint() {
        let mut cfg = UNetConfig::tiny();
        cfg.heads = 3;
        assert!(OavdUNet::new(cfg).is_err());
        let mut cfg = UNetConfig::tiny();
        cfg.block_order = vec![SubBlock::Conv; 5];
        assert!(OavdUNet::new(cfg).is_err());
        let net = OavdUNet::new(UNetConfig::tiny()).unwrap();
        let ck = net.checkpoint(serde_json::json!({"note": 1})).unwrap();
        assert_eq!(ck.header["note"], 1);
        let back = OavdUNet::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config(), net.config());
        assert!(UNetConfig::paper_faithful().validate().is_ok());
    }
}
