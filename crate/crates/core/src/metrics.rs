//! Evaluation metrics: text-frame alignment score, Fréchet feature distance
//! and background fidelity.

use std::path::Path;

use candle_core::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::clip::AbductiveClip;
use crate::error::{Error, Result};
use crate::scenario::{rasterize_pixel_mask, BBoxTrack, TokenId, CLIP_LEN};
use crate::video::VideoClip;

/// Which side of a comparison a feature set was extracted from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Real,
    Generated,
}

/// `N × D` feature matrix.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    features: DMatrix<f64>,
    pub source: FeatureSource,
}

impl FeatureSet {
    pub fn new(rows: &[Vec<f64>], source: FeatureSource) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        Ok(Self {
            features: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
            source,
        })
    }

    pub fn from_matrix(features: DMatrix<f64>, source: FeatureSource) -> Self {
        Self { features, source }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::Domain(format!("covariance needs at least 2 samples, got {n}")));
        }
        let mean = self.features.row_mean().transpose();
        let mut centered = self.features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok((mean, cov))
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between Gaussian fits of two feature sets.
///
/// `Tr((Σ_A Σ_B)^{1/2})` is evaluated as `Tr((Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2})`,
/// which keeps every root symmetric; negative eigenvalues are clamped to 0.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    let (mu_a, cov_a) = a.moments()?;
    let (mu_b, cov_b) = b.moments()?;
    let root_a = sym_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d2 = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d2.max(0.0))
}

/// `100 × mean_t max(0, cos(f_t, z_text))` over precomputed embeddings.
pub fn clip_score_from_embeddings(frames: &[Vec<f32>], text: &[f32]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Domain("clip score over zero frames".into()));
    }
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let tn = norm(text);
    let mut total = 0.0;
    for f in frames {
        if f.len() != text.len() {
            return Err(Error::Shape(format!("frame embedding dim {} vs text {}", f.len(), text.len())));
        }
        let dot: f64 = f.iter().zip(text).map(|(a, b)| *a as f64 * *b as f64).sum();
        let denom = norm(f) * tn;
        let cos = if denom > 0.0 { dot / denom } else { 0.0 };
        total += cos.max(0.0);
    }
    Ok(100.0 * total / frames.len() as f64)
}

/// Embeds every frame of `clip` on its own, as a clip of the frame repeated.
pub fn frame_embeddings(model: &AbductiveClip, clip: &VideoClip) -> Result<Vec<Vec<f32>>> {
    let (t, h, w, c) = clip.dims();
    let mut out = Vec::with_capacity(t);
    // bounded batches keep peak memory flat for long clips
    for start in (0..t).step_by(8) {
        let end = (start + 8).min(t);
        let batch = (start..end)
            .map(|i| {
                let f = Tensor::from_slice(clip.frame(i), (1, h, w, c), &candle_core::Device::Cpu)?;
                Ok(f.repeat((CLIP_LEN, 1, 1, 1))?)
            })
            .collect::<Result<Vec<_>>>()?;
        let z = model.encode_video(&Tensor::stack(&batch, 0)?)?;
        out.extend(z.to_vec2::<f32>()?);
    }
    Ok(out)
}

/// Text-frame alignment on a 0..100 scale.
pub fn clip_score(model: &AbductiveClip, clip: &VideoClip, text: &[TokenId]) -> Result<f64> {
    if model.trained_steps() == 0 {
        log::warn!("clip score computed with an untrained encoder");
    }
    let frames = frame_embeddings(model, clip)?;
    let z = model.encode_text(&[text])?.get(0)?.to_vec1::<f32>()?;
    clip_score_from_embeddings(&frames, &z)
}

/// Normalized clip embeddings of a set of clips.
pub fn video_features(model: &AbductiveClip, clips: &[VideoClip], source: FeatureSource) -> Result<FeatureSet> {
    let mut rows = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(8) {
        let refs: Vec<&VideoClip> = chunk.iter().collect();
        let z = model.encode_clips(&refs)?.to_dtype(candle_core::DType::F64)?;
        rows.extend(z.to_vec2::<f64>()?);
    }
    FeatureSet::new(&rows, source)
}

/// Mean absolute pixel error outside and inside the union of boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub bg_err: f64,
    pub obj_err: f64,
}

pub fn background_fidelity(source: &VideoClip, generated: &VideoClip, tracks: &[BBoxTrack]) -> Result<Fidelity> {
    if source.dims() != generated.dims() {
        return Err(Error::Shape(format!("clip shapes {:?} vs {:?}", source.dims(), generated.dims())));
    }
    let (t, h, w, c) = source.dims();
    let mask = rasterize_pixel_mask(tracks, t, h, w);
    let (mut bg, mut obj) = ((0.0, 0usize), (0.0, 0usize));
    for (p, inside) in mask.iter().enumerate() {
        let err: f64 = (0..c)
            .map(|k| (source.data()[p * c + k] as f64 - generated.data()[p * c + k] as f64).abs())
            .sum();
        let acc = if *inside { &mut obj } else { &mut bg };
        acc.0 += err;
        acc.1 += c;
    }
    if bg.1 == 0 {
        return Err(Error::UndefinedRegion("boxes cover every pixel; background is empty".into()));
    }
    if obj.1 == 0 {
        return Err(Error::UndefinedRegion("no box is visible; object region is empty".into()));
    }
    Ok(Fidelity {
        bg_err: bg.0 / bg.1 as f64,
        obj_err: obj.0 / obj.1 as f64,
    })
}

/// One evaluation row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub clip_score: f64,
    pub fvd: f64,
    pub bg_err: f64,
    pub obj_err: f64,
    pub config_hash: String,
}

pub const METRICS_HEADER: &str = "clip_score,fvd,bg_err,obj_err,config_hash";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{:.9},{:.9},{:.9},{:.9},{}\n",
            r.clip_score, r.fvd, r.bg_err, r.obj_err, r.config_hash
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{} lacks the metrics header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("metrics row {l:?} has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
            Ok(MetricsRow {
                clip_score: num(f[0])?,
                fvd: num(f[1])?,
                bg_err: num(f[2])?,
                obj_err: num(f[3])?,
                config_hash: f[4].to_string(),
            })
        })
        .collect()
}
