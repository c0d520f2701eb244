//! Optional learned per-block autoencoder sharing the latent grid of the
//! deterministic codec. Lossy; used for realism experiments only.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LatentClip, LatentCodec, LatentRange, SpaceToDepthCodec, FACTOR};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::rng::rng_for;
use crate::video::VideoClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedCodecConfig {
    pub image_channels: usize,
    pub latent_channels: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LearnedCodecConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            latent_channels: 48,
            steps: 500,
            batch: 256,
            lr: 3e-3,
            seed: 0,
        }
    }
}

pub struct LearnedCodec {
    cfg: LearnedCodecConfig,
    blocks: SpaceToDepthCodec,
    params: ParamStore,
    enc: Linear,
    dec: Linear,
}

impl LearnedCodec {
    pub fn new(cfg: LearnedCodecConfig) -> Result<Self> {
        if cfg.latent_channels == 0 || cfg.image_channels == 0 {
            return Err(Error::Config("learned codec needs positive channel counts".into()));
        }
        let block = FACTOR * FACTOR * cfg.image_channels;
        let mut params = ParamStore::new(cfg.seed, DType::F32);
        let enc = Linear::new(&mut params, "codec.enc", block, cfg.latent_channels, true)?;
        let dec = Linear::new(&mut params, "codec.dec", cfg.latent_channels, block, true)?;
        Ok(Self {
            blocks: SpaceToDepthCodec::new(cfg.image_channels),
            cfg,
            params,
            enc,
            dec,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(
            &serde_json::json!({ "kind": "learned_codec", "config": self.cfg }),
            self.params.snapshot()?,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("learned_codec")?;
        let cfg: LearnedCodecConfig = serde_json::from_value(
            ck.header
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Compatibility("codec checkpoint lacks a config".into()))?,
        )?;
        let mut codec = Self::new(cfg)?;
        codec.params.load(&ck.tensors)?;
        Ok(codec)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn block_rows(&self, clip: &VideoClip) -> Result<(Tensor, (usize, usize, usize))> {
        let z = self.blocks.encode(clip)?;
        let (t, h, w, c) = z.dims();
        Ok((Tensor::from_slice(z.data(), (t * h * w, c), &Device::Cpu)?, (t, h, w)))
    }

    /// Fits the autoencoder to pixel blocks of `clips`; returns the per-step MSE.
    pub fn train(&mut self, clips: &[VideoClip]) -> Result<Vec<f32>> {
        if clips.is_empty() {
            return Err(Error::Config("learned codec training needs at least one clip".into()));
        }
        let rows = clips
            .iter()
            .map(|c| self.block_rows(c).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        let all = Tensor::cat(&rows, 0)?;
        let n = all.dim(0)?;
        let mut rng = rng_for(self.cfg.seed, "learned-codec");
        let mut opt = AdamW::new(
            self.params.vars(),
            ParamsAdamW {
                lr: self.cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for step in 0..self.cfg.steps {
            let idx: Vec<u32> = (0..self.cfg.batch.min(n)).map(|_| rng.random_range(0..n as u32)).collect();
            let x = all.index_select(&Tensor::new(idx, &Device::Cpu)?, 0)?;
            let recon = candle_nn::ops::sigmoid(&self.dec.forward(&candle_nn::ops::sigmoid(&self.enc.forward(&x)?)?)?)?;
            let loss = (recon - &x)?.sqr()?.mean_all()?;
            let v = loss.to_scalar::<f32>()?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: "learned codec reconstruction".into(),
                });
            }
            opt.backward_step(&loss)?;
            losses.push(v);
        }
        Ok(losses)
    }
}

impl LatentCodec for LearnedCodec {
    fn descriptor(&self) -> String {
        format!("learned-block-ae-v1-c{}-l{}", self.cfg.image_channels, self.cfg.latent_channels)
    }

    fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    fn encode(&self, clip: &VideoClip) -> Result<LatentClip> {
        let (rows, (t, h, w)) = self.block_rows(clip)?;
        let z = candle_nn::ops::sigmoid(&self.enc.forward(&rows)?)?;
        let data = z.flatten_all()?.to_vec1::<f32>()?;
        LatentClip::new((t, h, w, self.cfg.latent_channels), LatentRange::Unit, data)
    }

    fn decode(&self, latent: &LatentClip) -> Result<VideoClip> {
        if latent.range() != LatentRange::Unit {
            return Err(Error::Convention("decode expects a unit-range latent".into()));
        }
        let (t, h, w, c) = latent.dims();
        if c != self.cfg.latent_channels {
            return Err(Error::Shape(format!("latent has {c} channels, codec expects {}", self.cfg.latent_channels)));
        }
        let z = Tensor::from_slice(latent.data(), (t * h * w, c), &Device::Cpu)?;
        let x = candle_nn::ops::sigmoid(&self.dec.forward(&z)?)?;
        let blocks = LatentClip::new(
            (t, h, w, self.blocks.latent_channels()),
            LatentRange::Unit,
            x.flatten_all()?.to_vec1::<f32>()?,
        )?;
        self.blocks.decode(&blocks)
    }
}
