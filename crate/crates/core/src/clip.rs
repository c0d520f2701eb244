//! Abductive CLIP: small video and text encoders trained with the contrastive
//! interaction loss over the four interaction groups.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{temporal_neighbours, Init, LayerNorm, Linear, ParamStore};
use crate::scenario::text::{vocab_size, MAX_TOKENS, PAD};
use crate::scenario::{build_interaction_groups, ClipSource, Group, NegativeMapping, TextAnnotation, TokenId, CLIP_LEN};
use crate::video::VideoClip;

/// Which batch items contribute the two extra negative terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeIndexing {
    /// Negatives of every other item, `j != i`.
    ExcludeSelf,
    /// Negatives of every item including `i`.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub embed_dim: usize,
    pub frame_dim: usize,
    pub conv_channels: [usize; 3],
    pub text_width: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub normalize: bool,
    pub negatives: NegativeIndexing,
    pub seed: u64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            frame_dim: 64,
            conv_channels: [8, 16, 32],
            text_width: 64,
            image_size: 64,
            image_channels: 3,
            tau_init: 0.07,
            tau_min: 0.01,
            tau_max: 1.0,
            normalize: true,
            negatives: NegativeIndexing::ExcludeSelf,
            seed: 0,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_init && self.tau_init <= self.tau_max) {
            return Err(Error::Config(format!(
                "temperature bounds must satisfy 0 < {} <= {} <= {}",
                self.tau_min, self.tau_init, self.tau_max
            )));
        }
        if self.image_size % 16 != 0 || self.image_size == 0 {
            return Err(Error::Config(format!("clip image size {} must be a multiple of 16", self.image_size)));
        }
        Ok(())
    }
}

/// Stride-2, kernel-2 convolution on channels-last input, applied as a
/// space-to-depth rearrangement followed by a linear map.
struct Patchify {
    proj: Linear,
}

impl Patchify {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, name, 4 * c_in, c_out, true)?,
        })
    }

    /// `(n, h, w, c)` -> `(n, h/2, w/2, c_out)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&space_to_depth2(x)?)
    }
}

fn space_to_depth2(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((n, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((n, h / 2, w / 2, 4 * c))?)
}

/// 2x2 average pooling of `(n, t, h, w, c)` frames, with the temporal central
/// difference of the pooled frames appended as `c` extra channels. Inputs carry
/// no gradient, so this runs on plain buffers.
fn pool_with_motion(x: &Tensor) -> Result<Tensor> {
    let (n, t, h, w, c) = x.dims5()?;
    let data = x.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let (ho, wo) = (h / 2, w / 2);
    let plane = ho * wo * c;
    let mut pooled = vec![0f32; n * t * plane];
    for f in 0..n * t {
        for y in 0..ho {
            for xx in 0..wo {
                for k in 0..c {
                    let at = |dy: usize, dx: usize| data[((f * h + 2 * y + dy) * w + 2 * xx + dx) * c + k];
                    pooled[f * plane + (y * wo + xx) * c + k] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
    }
    let mut out = vec![0f32; 2 * pooled.len()];
    for i in 0..n {
        for s in 0..t {
            let (prev, next) = ((i * t + s.saturating_sub(1)) * plane, (i * t + (s + 1).min(t - 1)) * plane);
            let here = (i * t + s) * plane;
            for p in 0..ho * wo {
                for k in 0..c {
                    let o = 2 * (here + p * c) + k;
                    out[o] = pooled[here + p * c + k];
                    out[o + c] = pooled[next + p * c + k] - pooled[prev + p * c + k];
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (n * t, ho, wo, 2 * c), x.device())?)
}

/// Per-frame strided CNN over pooled frames and their temporal differences,
/// a learned frame-position embedding and a temporal convolution over frame
/// features. The clip summary concatenates the temporal mean with the
/// late-half minus early-half mean, which changes sign under reversal.
pub struct VideoEncoder {
    convs: [Patchify; 3],
    frame: Linear,
    frame_norm: LayerNorm,
    time_pos: Tensor,
    temporal_in: Linear,
    temporal_out: Linear,
    out: Linear,
}

impl VideoEncoder {
    fn new(ps: &mut ParamStore, cfg: &ClipConfig) -> Result<Self> {
        let [c1, c2, c3] = cfg.conv_channels;
        let side = cfg.image_size / 16;
        let f = cfg.frame_dim;
        Ok(Self {
            convs: [
                Patchify::new(ps, "video.conv1", 2 * cfg.image_channels, c1)?,
                Patchify::new(ps, "video.conv2", c1, c2)?,
                Patchify::new(ps, "video.conv3", c2, c3)?,
            ],
            frame: Linear::new(ps, "video.frame", c3 * side * side, f, true)?,
            frame_norm: LayerNorm::new(ps, "video.frame_norm", f)?,
            time_pos: ps.param("video.time_pos", &[CLIP_LEN, f], Init::Normal(0.1))?,
            temporal_in: Linear::new(ps, "video.temporal_in", 3 * f, 2 * f, true)?,
            temporal_out: Linear::new(ps, "video.temporal_out", 2 * f, f, true)?,
            out: Linear::new(ps, "video.out", 2 * f, cfg.embed_dim, true)?,
        })
    }

    /// `(n, frames, h, w, c)` -> unnormalized `(n, d)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, _, _, _) = x.dims5()?;
        let mut y = pool_with_motion(x)?;
        for conv in &self.convs {
            y = conv.forward(&y)?.silu()?;
        }
        let y = y.flatten_from(1)?;
        let f = self.frame_norm.forward(&self.frame.forward(&y)?)?.silu()?.reshape((n, t, ()))?.broadcast_add(&self.time_pos.unsqueeze(0)?)?;
        let h = self.temporal_in.forward(&temporal_neighbours(&f)?)?.silu()?;
        let f = (f + self.temporal_out.forward(&h)?)?;
        let half = t / 2;
        let trend = (f.narrow(1, t - half, half)?.mean(1)? - f.narrow(1, 0, half)?.mean(1)?)?;
        self.out.forward(&Tensor::cat(&[&f.mean(1)?, &trend], 1)?)
    }
}

/// Token embedding, a token-wise residual MLP giving per-token features, masked
/// mean pooling and a projection to the joint space.
pub struct TextEncoder {
    embed: Tensor,
    mlp1: Linear,
    mlp2: Linear,
    out: Linear,
    width: usize,
}

/// Padded token batch: ids `(n, l)` and validity mask `(n, l)`.
pub struct TokenBatch {
    pub ids: Tensor,
    pub mask: Tensor,
}

impl TokenBatch {
    pub fn new(texts: &[&[TokenId]]) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Shape("empty text batch".into()));
        }
        let len = texts.iter().map(|t| t.len()).max().unwrap_or(0).max(1);
        if len > MAX_TOKENS {
            return Err(Error::Domain(format!("{len} tokens exceed the limit of {MAX_TOKENS}")));
        }
        let mut ids = vec![PAD; texts.len() * len];
        let mut mask = vec![0f32; texts.len() * len];
        for (i, t) in texts.iter().enumerate() {
            for (j, &tok) in t.iter().enumerate() {
                if tok as usize >= vocab_size() {
                    return Err(Error::Domain(format!("token id {tok} outside vocabulary")));
                }
                ids[i * len + j] = tok;
                mask[i * len + j] = 1.0;
            }
        }
        Ok(Self {
            ids: Tensor::from_vec(ids, (texts.len(), len), &Device::Cpu)?,
            mask: Tensor::from_vec(mask, (texts.len(), len), &Device::Cpu)?,
        })
    }
}

impl TextEncoder {
    fn new(ps: &mut ParamStore, cfg: &ClipConfig) -> Result<Self> {
        let w = cfg.text_width;
        Ok(Self {
            embed: ps.param("text.embed", &[vocab_size(), w], Init::Normal(1.0))?,
            mlp1: Linear::new(ps, "text.mlp1", w, 2 * w, true)?,
            mlp2: Linear::new(ps, "text.mlp2", 2 * w, w, true)?,
            out: Linear::new(ps, "text.out", w, cfg.embed_dim, true)?,
            width: w,
        })
    }

    /// Per-token features `(n, l, width)`.
    pub fn token_features(&self, batch: &TokenBatch) -> Result<Tensor> {
        let (n, l) = batch.ids.dims2()?;
        let e = self
            .embed
            .index_select(&batch.ids.flatten_all()?, 0)?
            .reshape((n, l, self.width))?;
        let h = self.mlp2.forward(&self.mlp1.forward(&e)?.silu()?)?;
        Ok((e + h)?)
    }

    fn forward(&self, batch: &TokenBatch) -> Result<Tensor> {
        let feats = self.token_features(batch)?;
        let mask = batch.mask.to_dtype(feats.dtype())?;
        let count = mask.sum_keepdim(1)?.clamp(1.0, f64::MAX)?;
        let pooled = feats.broadcast_mul(&mask.unsqueeze(2)?)?.sum(1)?.broadcast_div(&count)?;
        self.out.forward(&pooled)
    }
}

/// L2-normalizes the rows of `(n, d)`.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub struct AbductiveClip {
    cfg: ClipConfig,
    params: ParamStore,
    video: VideoEncoder,
    text: TextEncoder,
    log_tau: Tensor,
    trained_steps: usize,
}

impl AbductiveClip {
    pub fn new(cfg: ClipConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(cfg.seed, DType::F32);
        let video = VideoEncoder::new(&mut params, &cfg)?;
        let text = TextEncoder::new(&mut params, &cfg)?;
        let log_tau = params.param("log_tau", &[], Init::Zeros)?;
        params.set("log_tau", &Tensor::new(cfg.tau_init.ln() as f32, &Device::Cpu)?)?;
        Ok(Self {
            cfg,
            params,
            video,
            text,
            log_tau,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    pub fn text_width(&self) -> usize {
        self.cfg.text_width
    }

    /// τ as a differentiable scalar tensor, clamped to the configured range.
    pub fn tau(&self) -> Result<Tensor> {
        Ok(self
            .log_tau
            .clamp(self.cfg.tau_min.ln(), self.cfg.tau_max.ln())?
            .exp()?)
    }

    pub fn tau_value(&self) -> Result<f64> {
        Ok(self.tau()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    fn finish(&self, z: Tensor) -> Result<Tensor> {
        if self.cfg.normalize {
            l2_normalize(&z)
        } else {
            Ok(z)
        }
    }

    /// Embeds a `(n, 16, h, w, c)` video batch.
    pub fn encode_video(&self, clips: &Tensor) -> Result<Tensor> {
        let (_, t, h, w, c) = clips.dims5()?;
        if t != CLIP_LEN {
            return Err(Error::Shape(format!("video encoder expects {CLIP_LEN} frames, got {t}")));
        }
        if h != self.cfg.image_size || w != self.cfg.image_size || c != self.cfg.image_channels {
            return Err(Error::Shape(format!(
                "video encoder expects {0}x{0}x{1} frames, got {h}x{w}x{c}",
                self.cfg.image_size, self.cfg.image_channels
            )));
        }
        self.finish(self.video.forward(clips)?)
    }

    pub fn encode_clips(&self, clips: &[&VideoClip]) -> Result<Tensor> {
        let ts = clips.iter().map(|c| c.to_tensor()).collect::<Result<Vec<_>>>()?;
        self.encode_video(&Tensor::stack(&ts, 0)?)
    }

    pub fn encode_text(&self, texts: &[&[TokenId]]) -> Result<Tensor> {
        self.finish(self.text.forward(&TokenBatch::new(texts)?)?)
    }

    /// Per-token text features and validity mask for cross-attention conditioning.
    pub fn token_features(&self, texts: &[&[TokenId]]) -> Result<(Tensor, Tensor)> {
        let batch = TokenBatch::new(texts)?;
        Ok((self.text.token_features(&batch)?.detach(), batch.mask))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = ClipHeader {
            kind: "abductive_clip".into(),
            config: self.cfg.clone(),
            embed_dim: self.cfg.embed_dim,
            vocab_size: vocab_size(),
            tau: self.tau_value()?,
            trained_steps: self.trained_steps,
        };
        Checkpoint::new(&header, self.params.snapshot()?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("abductive_clip")?;
        let header: ClipHeader = ck.header_as()?;
        if header.vocab_size != vocab_size() {
            return Err(Error::Compatibility(format!(
                "checkpoint vocabulary {} differs from {}",
                header.vocab_size,
                vocab_size()
            )));
        }
        let mut model = Self::new(header.config)?;
        model.params.load(&ck.tensors)?;
        model.trained_steps = header.trained_steps;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClipHeader {
    kind: String,
    config: ClipConfig,
    embed_dim: usize,
    vocab_size: usize,
    tau: f64,
    trained_steps: usize,
}

/// `exp(z_v · z_t / τ)`.
pub fn coherence(zv: &[f64], zt: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    if zv.len() != zt.len() {
        return Err(Error::Shape(format!("embedding sizes {} and {}", zv.len(), zt.len())));
    }
    Ok((zv.iter().zip(zt).map(|(a, b)| a * b).sum::<f64>() / tau).exp())
}

/// Embeddings of one interaction group: videos and positive/negative texts, each `(b, d)`.
#[derive(Clone, Debug)]
pub struct GroupEmbeddings {
    pub video: Tensor,
    pub positive: Tensor,
    pub negative1: Tensor,
    pub negative2: Tensor,
}

/// Contrastive interaction loss of one group, summed over the batch.
pub fn ciloss_group(g: &GroupEmbeddings, tau: &Tensor, negatives: NegativeIndexing) -> Result<Tensor> {
    let (b, d) = g.video.dims2()?;
    for t in [&g.positive, &g.negative1, &g.negative2] {
        if t.dims() != [b, d] {
            return Err(Error::Shape(format!("group texts {:?} vs videos {:?}", t.dims(), g.video.dims())));
        }
    }
    let sim = |t: &Tensor| -> Result<Tensor> { Ok(g.video.matmul(&t.t()?)?.broadcast_div(tau)?) };
    let s_pos = sim(&g.positive)?;
    let (mut s_n1, mut s_n2) = (sim(&g.negative1)?, sim(&g.negative2)?);
    if negatives == NegativeIndexing::ExcludeSelf {
        let block = (Tensor::eye(b, g.video.dtype(), g.video.device())? * -1e9)?;
        s_n1 = (s_n1 + &block)?;
        s_n2 = (s_n2 + &block)?;
    }
    let logits = Tensor::cat(&[&s_pos, &s_n1, &s_n2], 1)?;
    let m = logits.max_keepdim(1)?.detach();
    let lse = (logits.broadcast_sub(&m)?.exp()?.sum_keepdim(1)?.log()? + m)?.squeeze(1)?;
    let eye = Tensor::eye(b, s_pos.dtype(), s_pos.device())?;
    let pos = (&s_pos * eye)?.sum(1)?;
    Ok((lse - pos)?.sum_all()?)
}

/// Sum of the four group losses; also returns the per-group values.
pub fn total_ciloss(groups: &[GroupEmbeddings], tau: &Tensor, negatives: NegativeIndexing) -> Result<(Tensor, Vec<Tensor>)> {
    if groups.len() != 4 {
        return Err(Error::Shape(format!("expected 4 interaction groups, got {}", groups.len())));
    }
    let b = groups[0].video.dim(0)?;
    if groups.iter().any(|g| g.video.dim(0).ok() != Some(b)) {
        return Err(Error::Shape("interaction groups differ in batch size".into()));
    }
    let parts = groups
        .iter()
        .map(|g| ciloss_group(g, tau, negatives))
        .collect::<Result<Vec<_>>>()?;
    let mut total = parts[0].clone();
    for p in &parts[1..] {
        total = (total + p)?;
    }
    Ok((total, parts))
}

/// Ranks candidate texts by descending `z_v · ẑ_t` (candidates normalized);
/// ties keep the lower index first.
pub fn rank_candidates(zv: &[f32], candidates: &[Vec<f32>]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Domain("retrieval needs at least one candidate".into()));
    }
    let scores = candidates
        .iter()
        .map(|c| {
            if c.len() != zv.len() {
                return Err(Error::Shape(format!("candidate dim {} vs {}", c.len(), zv.len())));
            }
            let norm = c.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            Ok(zv.iter().zip(c).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / norm)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    Ok(order)
}

/// Ranks `candidates` for `clip` with the trained encoders.
pub fn retrieve(model: &AbductiveClip, clip: &VideoClip, candidates: &[&[TokenId]]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Domain("retrieval needs at least one candidate".into()));
    }
    let zv = model.encode_clips(&[clip])?.get(0)?.to_vec1::<f32>()?;
    let zt = model.encode_text(candidates)?.to_vec2::<f32>()?;
    rank_candidates(&zv, &zt)
}

/// Outcome of the four-way held-out text retrieval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub trials: usize,
    /// Fraction of clips whose reason text ranks first.
    pub accuracy: f64,
    /// Fraction ranking the reason text above the same scenario's prevention text.
    pub beats_prevention: f64,
    /// Fraction ranking the reason text above both foreign reason texts.
    pub beats_foreign: f64,
}

/// Scores each scenario's near-accident clip against four texts: its reason
/// text (correct), its prevention text, and the reason texts of two other
/// scenarios whose category description differs.
pub fn evaluate_retrieval<S: ClipSource>(model: &AbductiveClip, scenarios: &[S], seed: u64) -> Result<RetrievalReport> {
    if scenarios.len() < 2 {
        return Err(Error::Domain("retrieval evaluation needs at least two scenarios".into()));
    }
    let mut rng = crate::rng::rng_for(seed, "retrieval-eval");
    let (mut top, mut vs_p, mut vs_f) = (0usize, 0usize, 0usize);
    for (i, s) in scenarios.iter().enumerate() {
        let texts = s.texts();
        let foreign: Vec<&[TokenId]> = scenarios
            .iter()
            .enumerate()
            .filter(|(j, o)| *j != i && o.texts().category != texts.category)
            .map(|(_, o)| o.texts().reason.as_slice())
            .collect();
        if foreign.is_empty() {
            return Err(Error::Domain(format!("scenario {i} has no distractor with a different category")));
        }
        let a = foreign[rng.random_range(0..foreign.len())];
        let b = foreign[rng.random_range(0..foreign.len())];
        let window = crate::scenario::sample_window(s.segments()?.near, &mut rng)?;
        let clip = s.clip(window, false)?;
        let order = retrieve(model, &clip, &[&texts.reason, &texts.prevention, a, b])?;
        let rank = |k: usize| order.iter().position(|&x| x == k).unwrap_or(usize::MAX);
        top += (order[0] == 0) as usize;
        vs_p += (rank(0) < rank(1)) as usize;
        vs_f += (rank(0) < rank(2) && rank(0) < rank(3)) as usize;
    }
    let n = scenarios.len() as f64;
    Ok(RetrievalReport {
        trials: scenarios.len(),
        accuracy: top as f64 / n,
        beats_prevention: vs_p as f64 / n,
        beats_foreign: vs_f as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for ClipTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 8,
            steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipLogRow {
    pub step: usize,
    pub loss_o: f64,
    pub loss_r: f64,
    pub loss_p: f64,
    pub loss_a: f64,
    pub total: f64,
    pub tau: f64,
}

/// Builds one batch of interaction groups from randomly drawn sources.
fn sample_batch<S: ClipSource>(
    sources: &[S],
    indices: &[usize],
    pool: &[TextAnnotation],
    mapping: &NegativeMapping,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[crate::scenario::InteractionGroup; 4]>> {
    indices
        .iter()
        .map(|&i| build_interaction_groups(&sources[i], pool, mapping, rng))
        .collect()
}

fn embed_groups(model: &AbductiveClip, batch: &[[crate::scenario::InteractionGroup; 4]]) -> Result<Vec<GroupEmbeddings>> {
    let b = batch.len();
    let clips: Vec<&VideoClip> = Group::ALL
        .iter()
        .flat_map(|g| batch.iter().map(move |s| s[g.index()].positive.clip.as_ref()))
        .collect();
    let videos = model.encode_clips(&clips)?;
    let mut texts: Vec<&[TokenId]> = Vec::with_capacity(12 * b);
    for g in Group::ALL {
        for s in batch {
            texts.push(&s[g.index()].positive.text);
        }
        for s in batch {
            texts.push(&s[g.index()].negatives[0].text);
        }
        for s in batch {
            texts.push(&s[g.index()].negatives[1].text);
        }
    }
    let zt = model.encode_text(&texts)?;
    Group::ALL
        .iter()
        .map(|g| {
            let gi = g.index();
            Ok(GroupEmbeddings {
                video: videos.narrow(0, gi * b, b)?,
                positive: zt.narrow(0, (3 * gi) * b, b)?,
                negative1: zt.narrow(0, (3 * gi + 1) * b, b)?,
                negative2: zt.narrow(0, (3 * gi + 2) * b, b)?,
            })
        })
        .collect()
}

/// Mean total loss over fixed held-out batches drawn from `seed`.
pub fn heldout_ciloss<S: ClipSource>(
    model: &AbductiveClip,
    sources: &[S],
    pool: &[TextAnnotation],
    mapping: &NegativeMapping,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = crate::rng::rng_for(seed, "clip-heldout");
    let b = batch.clamp(1, sources.len().max(1));
    let mut total = 0.0;
    let mut count = 0;
    for chunk in (0..sources.len()).collect::<Vec<_>>().chunks(b) {
        if chunk.len() != b {
            break;
        }
        let groups = sample_batch(sources, chunk, pool, mapping, &mut rng)?;
        let emb = embed_groups(model, &groups)?;
        let (loss, _) = total_ciloss(&emb, &model.tau()?, model.cfg.negatives)?;
        total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("held-out set smaller than one batch".into()));
    }
    Ok(total / count as f64)
}

/// Trains the encoders and τ; returns one log row per step.
pub fn train_abductive_clip<S: ClipSource>(
    model: &mut AbductiveClip,
    sources: &[S],
    pool: &[TextAnnotation],
    mapping: &NegativeMapping,
    cfg: &ClipTrainConfig,
) -> Result<Vec<ClipLogRow>> {
    if sources.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = crate::rng::rng_for(cfg.seed, "clip-train");
    let mut opt = AdamW::new(
        model.params.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..sources.len())).collect();
        let groups = sample_batch(sources, &indices, pool, mapping, &mut rng)?;
        let emb = embed_groups(model, &groups)?;
        let tau = model.tau()?;
        let (loss, parts) = total_ciloss(&emb, &tau, model.cfg.negatives)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let row = ClipLogRow {
            step,
            loss_o: scalar(&parts[0])?,
            loss_r: scalar(&parts[1])?,
            loss_p: scalar(&parts[2])?,
            loss_a: scalar(&parts[3])?,
            total: scalar(&loss)?,
            tau: scalar(&tau)?,
        };
        if !row.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("contrastive loss {row:?}"),
            });
        }
        opt.backward_step(&loss)?;
        model.trained_steps += 1;
        if step % 100 == 0 {
            log::debug!("clip step {step} loss {:.4} tau {:.4}", row.total, row.tau);
        }
        log.push(row);
    }
    Ok(log)
}

pub fn write_clip_log(path: &Path, rows: &[ClipLogRow]) -> Result<()> {
    let mut out = String::from("step,loss_o,loss_r,loss_p,loss_a,total,tau\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.loss_o, r.loss_r, r.loss_p, r.loss_a, r.total, r.tau
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_layout, GeneratorConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tensor(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        Tensor::from_vec(rows.concat(), (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    fn group(rng: &mut ChaCha8Rng, b: usize, d: usize) -> (GroupEmbeddings, [Vec<Vec<f64>>; 4]) {
        let raw = [unit_rows(rng, b, d), unit_rows(rng, b, d), unit_rows(rng, b, d), unit_rows(rng, b, d)];
        (
            GroupEmbeddings {
                video: tensor(&raw[0]),
                positive: tensor(&raw[1]),
                negative1: tensor(&raw[2]),
                negative2: tensor(&raw[3]),
            },
            raw,
        )
    }

    fn tau(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    /// Direct evaluation with explicit loops.
    fn loop_oracle(raw: &[Vec<Vec<f64>>; 4], t: f64) -> f64 {
        let b = raw[0].len();
        let mut loss = 0.0;
        for i in 0..b {
            let e = |x: &Vec<f64>| coherence(&raw[0][i], x, t).unwrap();
            let mut k = 0.0;
            for j in 0..b {
                k += e(&raw[1][j]);
                if j != i {
                    k += e(&raw[2][j]) + e(&raw[3][j]);
                }
            }
            loss -= (e(&raw[1][i]) / k).ln();
        }
        loss
    }

    #[test]
    fn coherence_cases() {
        let a = [1.0, 0.0];
        assert!((coherence(&a, &a, 1.0).unwrap() - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(coherence(&a, &[0.0, 1.0], 0.3).unwrap(), 1.0);
        let b = [0.5, 0.75f64.sqrt()];
        assert!((coherence(&a, &b, 0.5).unwrap() - std::f64::consts::E).abs() < 1e-15);
        assert!(matches!(coherence(&a, &a, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn analytic_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (g, _) = group(&mut rng, 1, 8);
        assert_eq!(val(&ciloss_group(&g, &tau(0.07), NegativeIndexing::ExcludeSelf).unwrap()), 0.0);
        let row = unit_rows(&mut rng, 1, 8).remove(0);
        let same = tensor(&[row.clone(), row]);
        let g = GroupEmbeddings {
            video: same.clone(),
            positive: same.clone(),
            negative1: same.clone(),
            negative2: same,
        };
        let l = val(&ciloss_group(&g, &tau(0.5), NegativeIndexing::ExcludeSelf).unwrap());
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        let groups = vec![g.clone(), g.clone(), g.clone(), g.clone()];
        let (total, _) = total_ciloss(&groups, &tau(0.5), NegativeIndexing::ExcludeSelf).unwrap();
        assert!((val(&total) - 8.0 * 4f64.ln()).abs() < 1e-12);
        assert!(matches!(total_ciloss(&groups[..3], &tau(0.5), NegativeIndexing::All), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (g, raw) = group(&mut rng, 3, 6);
            let t = rng.random_range(0.05..1.0);
            let got = val(&ciloss_group(&g, &tau(t), NegativeIndexing::ExcludeSelf).unwrap());
            assert!((got - loop_oracle(&raw, t)).abs() < 1e-10);
        }
    }

    #[test]
    fn mismatched_batch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut g, _) = group(&mut rng, 3, 4);
        g.negative2 = tensor(&unit_rows(&mut rng, 2, 4));
        assert!(matches!(ciloss_group(&g, &tau(0.1), NegativeIndexing::All), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_drops_as_margin_grows() {
        let d = 4;
        let mut prev = f64::INFINITY;
        for step in 1..8 {
            let m = step as f64 * 0.12;
            let cosv = |c: f64| vec![c, (1.0 - c * c).sqrt(), 0.0, 0.0];
            let e0 = vec![1.0, 0.0, 0.0, 0.0];
            let g = GroupEmbeddings {
                video: tensor(&[e0.clone(), e0.clone()]),
                positive: tensor(&[cosv(0.1 + m), cosv(0.1 + m)]),
                negative1: tensor(&[cosv(0.1), cosv(0.1)]),
                negative2: tensor(&[cosv(0.05), cosv(0.05)]),
            };
            assert_eq!(g.video.dims(), &[2, d]);
            let l = val(&ciloss_group(&g, &tau(0.1), NegativeIndexing::ExcludeSelf).unwrap());
            assert!(l.is_finite() && l < prev);
            prev = l;
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, raw) = group(&mut rng, 3, 5);
        let perm = [2usize, 0, 1];
        let p = |rows: &Vec<Vec<f64>>| tensor(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>());
        let gp = GroupEmbeddings {
            video: p(&raw[0]),
            positive: p(&raw[1]),
            negative1: p(&raw[2]),
            negative2: p(&raw[3]),
        };
        for mode in [NegativeIndexing::ExcludeSelf, NegativeIndexing::All] {
            let a = val(&ciloss_group(&g, &tau(0.2), mode).unwrap());
            let b = val(&ciloss_group(&gp, &tau(0.2), mode).unwrap());
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieval_tie_break_and_single() {
        let zv = vec![1.0f32, 0.0];
        assert_eq!(rank_candidates(&zv, &[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap(), vec![1, 2, 0]);
        assert_eq!(rank_candidates(&zv, &[vec![0.3, 0.2]]).unwrap(), vec![0]);
        assert!(matches!(rank_candidates(&zv, &[]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn ranking_ignores_uniform_rescaling(seed in 0u64..500, scale in 0.01f32..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let zv: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cands: Vec<Vec<f32>> = (0..5).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let scaled: Vec<Vec<f32>> = cands.iter().map(|c| c.iter().map(|x| x * scale).collect()).collect();
            prop_assert_eq!(rank_candidates(&zv, &cands).unwrap(), rank_candidates(&zv, &scaled).unwrap());
        }
    }

    fn small_model() -> AbductiveClip {
        AbductiveClip::new(ClipConfig {
            embed_dim: 16,
            frame_dim: 16,
            text_width: 16,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn encoders_are_deterministic_and_normalized() {
        let model = small_model();
        let layout = generate_layout(5, &GeneratorConfig::default()).unwrap();
        let clip = layout.render_range(crate::scenario::FrameRange::new(0, 16), false).unwrap();
        let a = model.encode_clips(&[&clip, &clip]).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a[0], a[1]);
        let again = small_model().encode_clips(&[&clip]).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a[0], again[0]);
        for row in &a {
            let n: f32 = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let zt = model.encode_text(&[&layout.texts.reason, &layout.texts.prevention]).unwrap();
        for row in zt.to_vec2::<f32>().unwrap() {
            assert!((row.iter().map(|x| x * x).sum::<f32>().sqrt() - 1.0).abs() < 1e-6);
        }
        let short = layout.render_range(crate::scenario::FrameRange::new(0, 8), false).unwrap();
        assert!(matches!(model.encode_clips(&[&short]), Err(Error::Shape(_))));
        let rev = model.encode_clips(&[&clip.reversed()]).unwrap().to_vec2::<f32>().unwrap();
        assert_ne!(rev[0], a[0]);
    }

    #[test]
    fn zero_steps_checkpoint_equals_init_and_training_runs() {
        let cfg = GeneratorConfig::default();
        let sources: Vec<_> = (0..4).map(|s| generate_layout(s, &cfg).unwrap()).collect();
        let pool: Vec<TextAnnotation> = sources.iter().map(|s| s.texts.clone()).collect();
        let mut model = small_model();
        let init = model.params().snapshot().unwrap();
        let log = train_abductive_clip(
            &mut model,
            &sources,
            &pool,
            &NegativeMapping::default(),
            &ClipTrainConfig {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(log.is_empty());
        let ck = model.checkpoint().unwrap();
        for (k, v) in &init {
            assert_eq!(v.flatten_all().unwrap().to_vec1::<f32>().unwrap(), ck.tensors[k].flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
        let log = train_abductive_clip(
            &mut model,
            &sources,
            &pool,
            &NegativeMapping::default(),
            &ClipTrainConfig {
                steps: 3,
                batch: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|r| r.total.is_finite() && r.tau > 0.0));
        let back = AbductiveClip::from_checkpoint(&model.checkpoint().unwrap()).unwrap();
        assert_eq!(back.trained_steps(), 3);
        assert!((back.tau_value().unwrap() - model.tau_value().unwrap()).abs() < 1e-7);
    }
}
