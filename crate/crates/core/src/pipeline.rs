//! The end-to-end pipeline over a run directory: data generation, both
//! training stages, inference and evaluation. Every stage records the config
//! hash it ran under and refuses upstream artifacts made under another one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::{evaluate_retrieval, heldout_ciloss, train_abductive_clip, write_clip_log, AbductiveClip, RetrievalReport};
use crate::codec::{LatentCodec, LearnedCodec, SpaceToDepthCodec};
use crate::config::{CodecKind, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    background_fidelity, clip_score, frechet_distance, video_features, write_metrics_csv, FeatureSource, MetricsRow,
};
use crate::oavd::{train_oavd, write_oavd_log, GenerationRequest, Generator, OavdLogRow, OavdModel};
use crate::rng::{derive_seed, rng_for, stream};
use crate::scenario::{generate_layout, sample_window, BBoxTrack, ClipSource, FrameRange, NegativeMapping, TextKind};
use crate::store::{write_clip_frames, write_scenario, Manifest, StoredScenario, STORE_FORMAT};
use crate::video::VideoClip;

pub const CONFIG_FILE: &str = "config.toml";
pub const STAGE_FILE: &str = "stage.json";

/// Layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn clip_dir(&self) -> PathBuf {
        self.root.join("clip")
    }
    pub fn clip_checkpoint(&self) -> PathBuf {
        self.clip_dir().join("clip.ckpt")
    }
    pub fn clip_log(&self) -> PathBuf {
        self.clip_dir().join("train_log.csv")
    }
    pub fn oavd_dir(&self) -> PathBuf {
        self.root.join("oavd")
    }
    pub fn oavd_checkpoint(&self) -> PathBuf {
        self.oavd_dir().join("oavd.ckpt")
    }
    pub fn text_encoder_checkpoint(&self) -> PathBuf {
        self.oavd_dir().join("text_encoder.ckpt")
    }
    pub fn codec_checkpoint(&self) -> PathBuf {
        self.oavd_dir().join("codec.ckpt")
    }
    pub fn oavd_log(&self) -> PathBuf {
        self.oavd_dir().join("train_log.csv")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn metrics(&self) -> PathBuf {
        self.eval_dir().join("metrics.csv")
    }
    pub fn infer_dir(&self) -> PathBuf {
        self.root.join("infer")
    }
    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Marker written by every finished stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
}

fn record_stage(dir: &Path, stage: &str, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let rec = StageRecord {
        stage: stage.into(),
        config_hash: cfg.hash()?,
        seed: cfg.seed,
    };
    std::fs::write(dir.join(STAGE_FILE), serde_json::to_string_pretty(&rec)?)?;
    Ok(())
}

/// Fails with a path error when `stage` has not run in `dir`, and with a
/// compatibility error when it ran under a different config.
pub fn require_stage(dir: &Path, stage: &str, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(STAGE_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::path(&path, format!("{e}; run `{stage}` first")))?;
    let rec: StageRecord = serde_json::from_str(&text)?;
    let hash = cfg.hash()?;
    if rec.stage != stage || rec.config_hash != hash {
        return Err(Error::Compatibility(format!(
            "{} was produced by stage {} under config {}, current config is {hash}",
            path.display(),
            rec.stage,
            rec.config_hash
        )));
    }
    Ok(())
}

/// Writes the resolved config into the run directory.
pub fn write_config(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    std::fs::create_dir_all(&run.root)?;
    cfg.save(&run.config())
}

pub fn scenario_seed(master: u64, index: u64) -> u64 {
    derive_seed(derive_seed(master, stream("scenario")), index) >> 1
}

/// Generates and stores the training and held-out corpora.
pub fn gen_data(cfg: &RunConfig, run: &RunDir) -> Result<Manifest> {
    cfg.validate()?;
    write_config(cfg, run)?;
    let root = run.data();
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }
    let write_split = |split: &str, count: usize, offset: u64| -> Result<Vec<String>> {
        (0..count)
            .map(|i| {
                let name = format!("{split}/{i:06}");
                let layout = generate_layout(scenario_seed(cfg.seed, offset + i as u64), &cfg.data.generator)?;
                write_scenario(&root.join(&name), &layout)?;
                Ok(name)
            })
            .collect()
    };
    let train = write_split("train", cfg.data.train_count, 0)?;
    let heldout = write_split("heldout", cfg.data.heldout_count, cfg.data.heldout_offset)?;
    let manifest = Manifest {
        format_version: STORE_FORMAT,
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        train,
        heldout,
    };
    manifest.save(&root)?;
    record_stage(&root, "gen-data", cfg)?;
    log::info!(
        "wrote {} training and {} held-out scenarios to {}",
        manifest.train.len(),
        manifest.heldout.len(),
        root.display()
    );
    Ok(manifest)
}

/// Opens the training (`heldout = false`) or held-out corpus.
pub fn load_corpus(cfg: &RunConfig, run: &RunDir, heldout: bool) -> Result<Vec<StoredScenario>> {
    let root = run.data();
    require_stage(&root, "gen-data", cfg)?;
    Manifest::load(&root)?.open_split(&root, heldout)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipStageReport {
    pub steps: usize,
    pub heldout_loss_initial: f64,
    pub heldout_loss_final: f64,
    pub tau: f64,
    pub retrieval: RetrievalReport,
}

fn retrieval_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, stream("retrieval"))
}

pub fn train_clip(cfg: &RunConfig, run: &RunDir) -> Result<ClipStageReport> {
    cfg.validate()?;
    let train = load_corpus(cfg, run, false)?;
    let heldout = load_corpus(cfg, run, true)?;
    let pool: Vec<_> = train.iter().map(|s| s.meta.texts.clone()).collect();
    let mapping = NegativeMapping::default();
    let mut model = AbductiveClip::new(cfg.clip.clone())?;
    let eval_seed = derive_seed(cfg.seed, stream("clip-heldout"));
    let batch = cfg.clip_train.batch.min(heldout.len());
    let initial = heldout_ciloss(&model, &heldout, &pool, &mapping, batch, eval_seed)?;
    let log = train_abductive_clip(&mut model, &train, &pool, &mapping, &cfg.clip_train)?;
    let fin = heldout_ciloss(&model, &heldout, &pool, &mapping, batch, eval_seed)?;
    let retrieval = evaluate_retrieval(&model, &heldout, retrieval_seed(cfg))?;
    let dir = run.clip_dir();
    std::fs::create_dir_all(&dir)?;
    model.save(&run.clip_checkpoint())?;
    write_clip_log(&run.clip_log(), &log)?;
    let report = ClipStageReport {
        steps: log.len(),
        heldout_loss_initial: initial,
        heldout_loss_final: fin,
        tau: model.tau_value()?,
        retrieval,
    };
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    record_stage(&dir, "train-clip", cfg)?;
    log::info!(
        "abductive clip: held-out loss {initial:.4} -> {fin:.4}, retrieval accuracy {:.3}",
        report.retrieval.accuracy
    );
    Ok(report)
}

pub fn load_clip(cfg: &RunConfig, run: &RunDir) -> Result<AbductiveClip> {
    require_stage(&run.clip_dir(), "train-clip", cfg)?;
    AbductiveClip::load(&run.clip_checkpoint())
}

/// The configured codec. A learned codec is fitted on training clips the
/// first time and reloaded afterwards.
pub fn build_codec(cfg: &RunConfig, run: &RunDir, train: &[StoredScenario]) -> Result<Box<dyn LatentCodec>> {
    match cfg.codec.kind {
        CodecKind::SpaceToDepth => Ok(Box::new(SpaceToDepthCodec::new(3))),
        CodecKind::Learned => {
            let path = run.codec_checkpoint();
            if path.exists() {
                return Ok(Box::new(LearnedCodec::from_checkpoint(&crate::checkpoint::Checkpoint::load(&path)?)?));
            }
            let mut rng = rng_for(cfg.seed, "codec-clips");
            let clips = train
                .iter()
                .take(32)
                .map(|s| {
                    let seg = s.segments()?;
                    s.clip(sample_window(seg.near, &mut rng)?, false)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut codec = LearnedCodec::new(cfg.codec.learned.clone())?;
            codec.train(&clips)?;
            std::fs::create_dir_all(run.oavd_dir())?;
            codec.checkpoint()?.save(&path)?;
            Ok(Box::new(codec))
        }
    }
}

fn load_codec(cfg: &RunConfig, run: &RunDir) -> Result<Box<dyn LatentCodec>> {
    if cfg.codec.kind == CodecKind::Learned && !run.codec_checkpoint().exists() {
        return Err(Error::path(run.codec_checkpoint(), "learned codec missing; run `train-oavd` first"));
    }
    build_codec(cfg, run, &[])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OavdStageReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_smoothed_loss: f64,
}

/// Mean loss over the first and last `window` steps.
pub fn loss_endpoints(log: &[OavdLogRow], window: usize) -> (f64, f64) {
    let w = window.clamp(1, log.len().max(1));
    let mean = |rows: &[OavdLogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64;
    (mean(&log[..w.min(log.len())]), mean(&log[log.len().saturating_sub(w)..]))
}

const UNTRAINED_TEXT: &str = "untrained-clip";

/// Trains the denoiser. With `untrained_text_encoder` the text features come
/// from a freshly initialized encoder, stored next to the denoiser, instead
/// of the `train-clip` checkpoint.
pub fn train_oavd_stage(cfg: &RunConfig, run: &RunDir, untrained_text_encoder: bool) -> Result<OavdStageReport> {
    cfg.validate()?;
    let clip = if untrained_text_encoder {
        AbductiveClip::new(cfg.clip.clone())?
    } else {
        load_clip(cfg, run)?
    };
    let train = load_corpus(cfg, run, false)?;
    let dir = run.oavd_dir();
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let codec = build_codec(cfg, run, &train)?;
    let encoder = if untrained_text_encoder { UNTRAINED_TEXT } else { "abductive-clip" };
    let mut model = OavdModel::new(
        cfg.unet.clone(),
        cfg.oavd_train.clone(),
        codec.as_ref(),
        format!("{encoder}@{}", cfg.hash()?),
    )?;
    let log = train_oavd(&mut model, &train, codec.as_ref(), &clip, cfg.oavd_train.steps)?;
    std::fs::create_dir_all(&dir)?;
    if untrained_text_encoder {
        clip.save(&run.text_encoder_checkpoint())?;
    }
    model.save(&run.oavd_checkpoint())?;
    write_oavd_log(&run.oavd_log(), &log)?;
    let (initial_loss, final_smoothed_loss) = loss_endpoints(&log, 50);
    let report = OavdStageReport {
        steps: log.len(),
        initial_loss,
        final_smoothed_loss,
    };
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    record_stage(&dir, "train-oavd", cfg)?;
    log::info!("oavd: loss {initial_loss:.4} -> {final_smoothed_loss:.4} over {} steps", log.len());
    Ok(report)
}

/// Trained models needed for generation.
pub struct Trained {
    pub clip: AbductiveClip,
    pub oavd: OavdModel,
    pub codec: Box<dyn LatentCodec>,
}

impl Trained {
    pub fn load(cfg: &RunConfig, run: &RunDir) -> Result<Self> {
        require_stage(&run.oavd_dir(), "train-oavd", cfg)?;
        let oavd = OavdModel::load(&run.oavd_checkpoint())?;
        let clip = if oavd.text_encoder.starts_with(UNTRAINED_TEXT) {
            AbductiveClip::load(&run.text_encoder_checkpoint())?
        } else {
            load_clip(cfg, run)?
        };
        let codec = load_codec(cfg, run)?;
        Ok(Self { clip, oavd, codec })
    }

    pub fn generator(&self) -> Result<Generator<'_>> {
        Generator::new(&self.oavd, &self.clip, self.codec.as_ref(), &self.oavd.schedule)
    }
}

/// Near-accident window used when scoring held-out scenario `index`.
pub fn eval_window(source: &impl ClipSource, seed: u64, index: usize) -> Result<FrameRange> {
    let mut rng = rng_for(derive_seed(seed, index as u64), "eval-window");
    sample_window(source.segments()?.near, &mut rng)
}

fn generation_seed(seed: u64, index: usize) -> u64 {
    derive_seed(derive_seed(seed, stream("generation")), index as u64)
}

/// Per-scenario evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScore {
    pub index: usize,
    pub bg_err: f64,
    pub obj_err: f64,
    pub clip_score: f64,
    /// Mean pixel difference between reason- and prevention-conditioned generations.
    pub direction_bg: f64,
    pub direction_obj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsRow,
    pub retrieval: RetrievalReport,
    pub direction_bg: f64,
    pub direction_obj: f64,
    pub scenarios: Vec<ScenarioScore>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Scores generation on the first `eval.scenarios` held-out scenarios and
/// writes `metrics.csv` and `report.json`.
pub fn evaluate(cfg: &RunConfig, run: &RunDir) -> Result<EvalReport> {
    cfg.validate()?;
    let trained = Trained::load(cfg, run)?;
    let heldout = load_corpus(cfg, run, true)?;
    let heldout = &heldout[..cfg.eval.scenarios.min(heldout.len())];
    let generator = trained.generator()?;
    let mut real = Vec::with_capacity(heldout.len());
    let mut generated = Vec::with_capacity(heldout.len());
    let mut scores = Vec::with_capacity(heldout.len());
    for (i, s) in heldout.iter().enumerate() {
        let window = eval_window(s, cfg.seed, i)?;
        let clip = s.clip(window, false)?;
        let tracks = s.clip_tracks(window, false);
        let texts = s.texts();
        let seed = generation_seed(cfg.seed, i);
        let request = |text: &[u32], steps, strength| GenerationRequest {
            clip: clip.clone(),
            text: text.to_vec(),
            tracks: tracks.clone(),
            steps,
            strength,
            seed,
        };
        let g = generator.generate(&request(&texts.reason, cfg.eval.steps, cfg.eval.strength))?;
        let fid = background_fidelity(&clip, &g, &tracks)?;
        let cs = clip_score(&trained.clip, &g, &texts.reason)?;
        let g_r = generator.generate(&request(&texts.reason, cfg.inference.steps, cfg.inference.strength))?;
        let g_p = generator.generate(&request(&texts.prevention, cfg.inference.steps, cfg.inference.strength))?;
        let dir = background_fidelity(&g_r, &g_p, &tracks)?;
        scores.push(ScenarioScore {
            index: i,
            bg_err: fid.bg_err,
            obj_err: fid.obj_err,
            clip_score: cs,
            direction_bg: dir.bg_err,
            direction_obj: dir.obj_err,
        });
        real.push(clip);
        generated.push(g);
    }
    let fvd = frechet_distance(
        &video_features(&trained.clip, &real, FeatureSource::Real)?,
        &video_features(&trained.clip, &generated, FeatureSource::Generated)?,
    )?;
    let metrics = MetricsRow {
        clip_score: mean(scores.iter().map(|s| s.clip_score)),
        fvd,
        bg_err: mean(scores.iter().map(|s| s.bg_err)),
        obj_err: mean(scores.iter().map(|s| s.obj_err)),
        config_hash: cfg.hash()?,
    };
    let report = EvalReport {
        metrics: metrics.clone(),
        retrieval: evaluate_retrieval(&trained.clip, heldout, retrieval_seed(cfg))?,
        direction_bg: mean(scores.iter().map(|s| s.direction_bg)),
        direction_obj: mean(scores.iter().map(|s| s.direction_obj)),
        scenarios: scores,
    };
    let dir = run.eval_dir();
    std::fs::create_dir_all(&dir)?;
    write_metrics_csv(&run.metrics(), std::slice::from_ref(&metrics))?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    record_stage(&dir, "eval", cfg)?;
    Ok(report)
}

/// One CLI generation request against a held-out scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    pub scenario: usize,
    pub text: TextKind,
    pub steps: usize,
    pub strength: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GenManifest {
    request: InferRequest,
    window: FrameRange,
    text_tokens: Vec<u32>,
    tracks: Vec<BBoxTrack>,
    checkpoint: String,
    config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub bg_err: f64,
    pub obj_err: f64,
    pub clip_score: f64,
    pub output: PathBuf,
}

fn text_kind_name(kind: TextKind) -> &'static str {
    match kind {
        TextKind::Reason => "reason",
        TextKind::Prevention => "prevention",
        TextKind::Category => "category",
        TextKind::CategoryNeg => "category_neg",
    }
}

/// Generates one clip for a held-out scenario and writes `gen.json`, the
/// source and generated frames, and `result.json`.
pub fn infer(cfg: &RunConfig, run: &RunDir, req: &InferRequest) -> Result<InferResult> {
    cfg.validate()?;
    let trained = Trained::load(cfg, run)?;
    let heldout = load_corpus(cfg, run, true)?;
    let s = heldout.get(req.scenario).ok_or_else(|| {
        Error::Domain(format!("scenario {} outside the {} held-out scenarios", req.scenario, heldout.len()))
    })?;
    let window = eval_window(s, cfg.seed, req.scenario)?;
    let clip = s.clip(window, false)?;
    let tracks = s.clip_tracks(window, false);
    let text = s.texts().get(req.text).to_vec();
    let out = run
        .infer_dir()
        .join(format!("{:06}-{}", req.scenario, text_kind_name(req.text)));
    std::fs::create_dir_all(&out)?;
    let gen = GenManifest {
        request: req.clone(),
        window,
        text_tokens: text.clone(),
        tracks: tracks.clone(),
        checkpoint: run.oavd_checkpoint().display().to_string(),
        config_hash: cfg.hash()?,
    };
    std::fs::write(out.join("gen.json"), serde_json::to_string_pretty(&gen)?)?;
    let g = trained.generator()?.generate(&GenerationRequest {
        clip: clip.clone(),
        text: text.clone(),
        tracks: tracks.clone(),
        steps: req.steps,
        strength: req.strength,
        seed: req.seed,
    })?;
    write_clip_frames(&out.join("source"), &clip)?;
    write_clip_frames(&out.join("generated"), &g)?;
    let fid = background_fidelity(&clip, &g, &tracks)?;
    let result = InferResult {
        bg_err: fid.bg_err,
        obj_err: fid.obj_err,
        clip_score: clip_score(&trained.clip, &g, &text)?,
        output: out.join("generated"),
    };
    std::fs::write(out.join("result.json"), serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

/// Reads a stored clip back from a frame directory.
pub fn read_clip_frames(dir: &Path, frames: usize) -> Result<VideoClip> {
    let mut out = Vec::with_capacity(frames);
    let (mut h, mut w) = (0, 0);
    for t in 0..frames {
        let path = dir.join(crate::store::frame_file(t));
        let img = image::open(&path).map_err(|e| Error::path(&path, e.to_string()))?.to_rgb8();
        (h, w) = (img.height() as usize, img.width() as usize);
        out.push(img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect());
    }
    VideoClip::from_frames(h, w, 3, &out)
}
