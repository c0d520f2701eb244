//! Masked latent diffusion objective, the OAVD training loop and DDIM-based
//! clip generation.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::clip::AbductiveClip;
use crate::codec::{latent_mask, LatentClip, LatentCodec, LatentRange, MaskMode};
use crate::error::{Error, Result};
use crate::rng::{rng_for, standard_normal_vec};
use crate::scenario::{sample_window, BBoxTrack, ClipSource, Group, TokenId};
use crate::schedule::{add_noise, add_noise_batch, ddim_sample, inference_steps, noised_mask, NoiseSchedule, ScheduleSpec};
use crate::unet::{Conditioning, GroundingInput, OavdUNet, UNetConfig};
use crate::video::VideoClip;

/// Which tensor weights the masked reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskWeight {
    /// The binary latent mask `m`.
    Binary,
    /// The mask pushed through the forward process with the sample's noise.
    Noised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OavdTrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub mask_mode: MaskMode,
    pub mask_weight: MaskWeight,
    pub schedule: ScheduleSpec,
    pub attention_only: bool,
    pub seed: u64,
}

impl Default for OavdTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            lr: 1e-4,
            batch: 4,
            steps: 3000,
            beta1: 0.9,
            beta2: 0.999,
            mask_mode: MaskMode::Geometric,
            mask_weight: MaskWeight::Binary,
            schedule: ScheduleSpec::linear(200),
            attention_only: false,
            seed: 0,
        }
    }
}

impl OavdTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.schedule.build().map(|_| ())
    }
}

/// `mean((e − ê)²) + λ · mean(|(e − ê) ⊙ (1 − mask)|)`.
pub fn oavd_loss(e: &Tensor, e_hat: &Tensor, mask: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok(oavd_loss_terms(e, e_hat, mask, lambda)?.0)
}

/// The loss together with its squared-error and masked absolute-error terms.
pub fn oavd_loss_terms(e: &Tensor, e_hat: &Tensor, mask: &Tensor, lambda: f64) -> Result<(Tensor, Tensor, Tensor)> {
    if e.dims() != e_hat.dims() || e.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "noise {:?}, prediction {:?}, mask {:?}",
            e.dims(),
            e_hat.dims(),
            mask.dims()
        )));
    }
    let diff = (e - e_hat)?;
    let mse = diff.sqr()?.mean_all()?;
    let object = diff.mul(&mask.affine(-1.0, 1.0)?)?.abs()?.mean_all()?;
    Ok(((&mse + (&object * lambda)?)?, mse, object))
}

/// One positive co-occurrence pair with its boxes.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub clip: VideoClip,
    pub text: Vec<TokenId>,
    pub tracks: Vec<BBoxTrack>,
    pub group: Group,
}

/// Draws a group uniformly, a window from its segment and the group's positive text.
pub fn sample_training_pair(source: &impl ClipSource, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
    let group = Group::ALL[rng.random_range(0..4)];
    let seg = source.segments()?;
    let (range, reversed) = match group {
        Group::Normal => (seg.normal, false),
        Group::Reason => (seg.near, false),
        Group::Prevention => (seg.near, true),
        Group::Accident => (seg.accident, false),
    };
    let window = sample_window(range, rng)?;
    Ok(TrainingPair {
        clip: source.clip(window, reversed)?,
        text: source.texts().get(group.positive_text()).to_vec(),
        tracks: source.clip_tracks(window, reversed),
        group,
    })
}

/// A trained denoiser with everything inference must reproduce from training.
pub struct OavdModel {
    pub unet: OavdUNet,
    pub schedule: ScheduleSpec,
    pub codec: String,
    pub train: OavdTrainConfig,
    pub trained_steps: usize,
    pub text_encoder: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OavdHeader {
    schedule: ScheduleSpec,
    codec: String,
    train: OavdTrainConfig,
    trained_steps: usize,
    text_encoder: String,
}

impl OavdModel {
    pub fn new(cfg: UNetConfig, train: OavdTrainConfig, codec: &dyn LatentCodec, text_encoder: impl Into<String>) -> Result<Self> {
        train.validate()?;
        if cfg.latent_channels != codec.latent_channels() {
            return Err(Error::Config(format!(
                "U-Net takes {} latent channels, codec produces {}",
                cfg.latent_channels,
                codec.latent_channels()
            )));
        }
        Ok(Self {
            unet: OavdUNet::new(cfg)?,
            schedule: train.schedule,
            codec: codec.descriptor(),
            train,
            trained_steps: 0,
            text_encoder: text_encoder.into(),
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = OavdHeader {
            schedule: self.schedule,
            codec: self.codec.clone(),
            train: self.train.clone(),
            trained_steps: self.trained_steps,
            text_encoder: self.text_encoder.clone(),
        };
        self.unet.checkpoint(serde_json::to_value(header)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let unet = OavdUNet::from_checkpoint(ck)?;
        let h: OavdHeader = ck.header_as()?;
        Ok(Self {
            unet,
            schedule: h.schedule,
            codec: h.codec,
            train: h.train,
            trained_steps: h.trained_steps,
            text_encoder: h.text_encoder,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn check_codec(&self, codec: &dyn LatentCodec) -> Result<()> {
        if codec.descriptor() != self.codec {
            return Err(Error::Compatibility(format!(
                "model trained with codec {} but {} supplied",
                self.codec,
                codec.descriptor()
            )));
        }
        Ok(())
    }

    fn check_schedule(&self, sched: &ScheduleSpec) -> Result<()> {
        if *sched != self.schedule {
            return Err(Error::Compatibility(format!(
                "model trained with schedule {:?}, inference requested {:?}",
                self.schedule, sched
            )));
        }
        Ok(())
    }
}

fn to_latent_tensor(codec: &dyn LatentCodec, clip: &VideoClip) -> Result<Tensor> {
    codec.encode(clip)?.to_signed().to_tensor()
}

fn normal_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Result<Tensor> {
    let n = dims.iter().product();
    Ok(Tensor::from_vec(standard_normal_vec(rng, n), dims, &Device::Cpu)?)
}

fn conditioning(clip_model: &AbductiveClip, texts: &[&[TokenId]], grounding: &[GroundingInput]) -> Result<Conditioning> {
    let (feats, mask) = clip_model.token_features(texts)?;
    let refs: Vec<&GroundingInput> = grounding.iter().collect();
    Conditioning::new(feats, mask, &refs)
}

/// Per-step training record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OavdLogRow {
    pub step: usize,
    pub loss: f64,
    /// `mean((e − ê)²)`.
    pub mse: f64,
    /// `mean(|(e − ê) ⊙ (1 − mask)|)`.
    pub masked: f64,
}

/// Optimizes the denoiser on positive pairs drawn from `sources`.
///
/// On a non-finite loss the parameters are rolled back to the last set that
/// produced a finite loss and a [`Error::NonFinite`] is returned.
pub fn train_oavd<S: ClipSource>(
    model: &mut OavdModel,
    sources: &[S],
    codec: &dyn LatentCodec,
    clip_model: &AbductiveClip,
    steps: usize,
) -> Result<Vec<OavdLogRow>> {
    model.check_codec(codec)?;
    if sources.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let cfg = model.train.clone();
    let sched = cfg.schedule.build()?;
    let ucfg = model.unet.config().clone();
    let vars = if cfg.attention_only {
        model.unet.params().vars_where(OavdUNet::is_attention_param)
    } else {
        model.unet.params().vars()
    };
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = rng_for(cfg.seed, &format!("oavd-train-{}", model.trained_steps));
    let mut log = Vec::with_capacity(steps);
    let mut last_good = model.unet.params().snapshot()?;
    for step in 0..steps {
        let pairs = (0..cfg.batch)
            .map(|_| sample_training_pair(&sources[rng.random_range(0..sources.len())], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let z0 = Tensor::stack(
            &pairs.iter().map(|p| to_latent_tensor(codec, &p.clip)).collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let masks = pairs
            .iter()
            .map(|p| latent_mask(cfg.mask_mode, codec, &p.clip, &p.tracks))
            .collect::<Result<Vec<_>>>()?;
        let ks: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(1..=sched.steps())).collect();
        let e = normal_tensor(&mut rng, z0.dims())?;
        let zk = add_noise_batch(&z0, &ks, &e, &sched)?;
        let weight = match cfg.mask_weight {
            MaskWeight::Binary => Tensor::stack(&masks.iter().map(|m| m.to_tensor()).collect::<Result<Vec<_>>>()?, 0)?,
            MaskWeight::Noised => Tensor::stack(
                &masks
                    .iter()
                    .zip(&ks)
                    .enumerate()
                    .map(|(i, (m, &k))| noised_mask(m, k, &e.get(i)?, &sched))
                    .collect::<Result<Vec<_>>>()?,
                0,
            )?,
        };
        let grounding = pairs
            .iter()
            .map(|p| GroundingInput::from_tracks(&p.tracks, ucfg.frames, ucfg.fourier_freqs, ucfg.max_tokens))
            .collect::<Result<Vec<_>>>()?;
        let texts: Vec<&[TokenId]> = pairs.iter().map(|p| p.text.as_slice()).collect();
        let cond = conditioning(clip_model, &texts, &grounding)?;
        let e_hat = model.unet.forward(&zk, &ks, &cond)?;
        let (loss, mse, masked) = oavd_loss_terms(&e, &e_hat, &weight, cfg.lambda)?;
        let f64_of = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let value = f64_of(&loss)?;
        if !value.is_finite() {
            model.unet.params_mut().load(&last_good)?;
            return Err(Error::NonFinite {
                step: model.trained_steps,
                detail: format!("diffusion loss {value}; parameters restored to the last finite step"),
            });
        }
        last_good = model.unet.params().snapshot()?;
        opt.backward_step(&loss)?;
        if step % 100 == 0 {
            log::debug!("oavd step {} loss {value:.4}", model.trained_steps);
        }
        log.push(OavdLogRow {
            step: model.trained_steps,
            loss: value,
            mse: f64_of(&mse)?,
            masked: f64_of(&masked)?,
        });
        model.trained_steps += 1;
    }
    Ok(log)
}

pub fn write_oavd_log(path: &Path, rows: &[OavdLogRow]) -> Result<()> {
    let mut out = String::from("step,loss,mse,masked\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.mse, r.masked));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Inputs of one generation.
#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub clip: VideoClip,
    pub text: Vec<TokenId>,
    pub tracks: Vec<BBoxTrack>,
    pub steps: usize,
    /// Fraction of the schedule the source latent is noised to, in `(0, 1]`.
    pub strength: f64,
    pub seed: u64,
}

/// Bundles everything inference needs.
pub struct Generator<'a> {
    pub model: &'a OavdModel,
    pub clip_model: &'a AbductiveClip,
    pub codec: &'a dyn LatentCodec,
    sched: NoiseSchedule,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a OavdModel, clip_model: &'a AbductiveClip, codec: &'a dyn LatentCodec, schedule: &ScheduleSpec) -> Result<Self> {
        model.check_codec(codec)?;
        model.check_schedule(schedule)?;
        Ok(Self {
            model,
            clip_model,
            codec,
            sched: schedule.build()?,
        })
    }

    fn denoise(&self, z: &Tensor, text: &[TokenId], tracks: &[BBoxTrack], steps: &[usize]) -> Result<Tensor> {
        let cfg = self.model.unet.config();
        let g = GroundingInput::from_tracks(tracks, cfg.frames, cfg.fourier_freqs, cfg.max_tokens)?;
        let cond = conditioning(self.clip_model, &[text], std::slice::from_ref(&g))?;
        let z = z.unsqueeze(0)?;
        let out = ddim_sample(&z, |zk, k| self.model.unet.forward(zk, &[k], &cond), steps, &self.sched)?;
        Ok(out.squeeze(0)?)
    }

    fn decode(&self, z: &Tensor) -> Result<VideoClip> {
        let latent = LatentClip::from_tensor(&z.clamp(-1.0, 1.0)?, LatentRange::Signed)?;
        let mut clip = self.codec.decode(&latent.to_unit())?;
        clip.clamp_unit();
        Ok(clip)
    }

    /// Re-generates a source clip under a text prompt and its boxes.
    pub fn generate(&self, req: &GenerationRequest) -> Result<VideoClip> {
        let source = self.codec.encode(&req.clip)?;
        if req.steps == 0 {
            return self.codec.decode(&source);
        }
        let ts = inference_steps(self.sched.steps(), req.steps, req.strength)?;
        let z0 = source.to_signed().to_tensor()?;
        let mut rng = rng_for(req.seed, "generate");
        let e = normal_tensor(&mut rng, z0.dims())?;
        let zk = add_noise(&z0, ts[0], &e, &self.sched)?;
        self.decode(&self.denoise(&zk, &req.text, &req.tracks, &ts)?)
    }

    /// Generates a clip from boxes and text alone, starting from pure noise.
    pub fn video_free_generate(&self, tracks: &[BBoxTrack], text: &[TokenId], steps: usize, seed: u64) -> Result<VideoClip> {
        let has_box = tracks.iter().any(|t| t.boxes.iter().any(|b| b.is_some()));
        if !has_box && text.is_empty() {
            return Err(Error::Domain("video-free generation needs boxes or text".into()));
        }
        if steps == 0 {
            return Err(Error::Domain("video-free generation needs at least one step".into()));
        }
        let cfg = self.model.unet.config();
        let mut rng = rng_for(seed, "video-free");
        let z = normal_tensor(&mut rng, &[cfg.frames, cfg.latent_size, cfg.latent_size, cfg.latent_channels])?;
        let ts = inference_steps(self.sched.steps(), steps, 1.0)?;
        self.decode(&self.denoise(&z, text, tracks, &ts)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::ClipConfig;
    use crate::codec::SpaceToDepthCodec;
    use crate::scenario::{generate_layout, GeneratorConfig, ScenarioLayout};

    fn t(v: Vec<f64>, n: usize) -> Tensor {
        Tensor::from_vec(v, n, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn loss_special_cases_and_oracle() {
        let mut rng = rng_for(0, "loss");
        let n = 50;
        let e: Vec<f64> = standard_normal_vec(&mut rng, n).into_iter().map(f64::from).collect();
        let eh: Vec<f64> = standard_normal_vec(&mut rng, n).into_iter().map(f64::from).collect();
        let m: Vec<f64> = (0..n).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let (te, teh, tm) = (t(e.clone(), n), t(eh.clone(), n), t(m.clone(), n));
        let ones = t(vec![1.0; n], n);
        let mse = scalar(&oavd_loss(&te, &teh, &ones, 0.5).unwrap());
        assert_eq!(mse, scalar(&oavd_loss(&te, &teh, &tm, 0.0).unwrap()));
        let mut sq = 0.0;
        let mut l1 = 0.0;
        for i in 0..n {
            sq += (e[i] - eh[i]).powi(2);
            l1 += ((e[i] - eh[i]) * (1.0 - m[i])).abs();
        }
        let want = sq / n as f64 + 0.5 * l1 / n as f64;
        assert!((scalar(&oavd_loss(&te, &teh, &tm, 0.5).unwrap()) - want).abs() < 1e-12);
        let l = |lam| scalar(&oavd_loss(&te, &teh, &tm, lam).unwrap());
        assert!(l(0.0) <= l(0.5) && l(0.5) <= l(1.0));
        assert!(matches!(oavd_loss(&te, &t(vec![0.0; 3], 3), &tm, 0.5), Err(Error::Shape(_))));
    }

    struct Fixture {
        layouts: Vec<ScenarioLayout>,
        codec: SpaceToDepthCodec,
        clip: AbductiveClip,
    }

    fn fixture() -> Fixture {
        let cfg = GeneratorConfig::default();
        Fixture {
            layouts: (0..3).map(|s| generate_layout(s, &cfg).unwrap()).collect(),
            codec: SpaceToDepthCodec::new(3),
            clip: AbductiveClip::new(ClipConfig {
                text_width: UNetConfig::tiny().text_width,
                ..Default::default()
            })
            .unwrap(),
        }
    }

    fn tiny_train(steps: usize) -> OavdTrainConfig {
        OavdTrainConfig {
            batch: 1,
            steps,
            lr: 1e-3,
            schedule: ScheduleSpec::linear(50),
            ..Default::default()
        }
    }

    #[test]
    fn initial_loss_is_unit_and_training_is_reproducible() {
        let f = fixture();
        let run = || {
            let mut m = OavdModel::new(UNetConfig::tiny(), tiny_train(3), &f.codec, "clip").unwrap();
            train_oavd(&mut m, &f.layouts, &f.codec, &f.clip, 3).unwrap()
        };
        let a = run();
        assert!((a[0].mse - 1.0).abs() < 0.05, "{}", a[0].mse);
        assert!((a[0].loss - (a[0].mse + 0.5 * a[0].masked)).abs() < 1e-6);
        assert_eq!(a, run());
    }

    #[test]
    fn generation_paths() {
        let f = fixture();
        let model = OavdModel::new(UNetConfig::tiny(), tiny_train(0), &f.codec, "clip").unwrap();
        let spec = model.schedule;
        let g = Generator::new(&model, &f.clip, &f.codec, &spec).unwrap();
        let layout = &f.layouts[0];
        let seg = layout.segments().unwrap();
        let window = crate::scenario::FrameRange::new(seg.near.start, seg.near.start + 16);
        let req = GenerationRequest {
            clip: layout.clip(window, false).unwrap(),
            text: layout.texts.reason.clone(),
            tracks: layout.clip_tracks(window, false),
            steps: 0,
            strength: 1.0,
            seed: 1,
        };
        assert_eq!(g.generate(&req).unwrap(), req.clip);
        let req = GenerationRequest { steps: 3, ..req };
        let a = g.generate(&req).unwrap();
        assert_eq!(a, g.generate(&req).unwrap());
        assert_eq!(a.dims(), req.clip.dims());
        let v = g.video_free_generate(&req.tracks, &req.text, 3, 4).unwrap();
        assert_eq!(v, g.video_free_generate(&req.tracks, &req.text, 3, 4).unwrap());
        assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(matches!(g.video_free_generate(&[], &[], 3, 4), Err(Error::Domain(_))));
        let other = ScheduleSpec::linear(60);
        assert!(matches!(Generator::new(&model, &f.clip, &f.codec, &other), Err(Error::Compatibility(_))));
    }

    #[test]
    fn checkpoint_roundtrip_keeps_header() {
        let f = fixture();
        let m = OavdModel::new(UNetConfig::tiny(), tiny_train(0), &f.codec, "clip-abc").unwrap();
        let back = OavdModel::from_checkpoint(&m.checkpoint().unwrap()).unwrap();
        assert_eq!(back.schedule, m.schedule);
        assert_eq!(back.codec, m.codec);
        assert_eq!(back.text_encoder, "clip-abc");
        assert_eq!(back.train, m.train);
    }
}
