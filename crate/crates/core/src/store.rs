//! On-disk scenario store: one directory per scenario holding 8-bit PNG
//! frames and a `meta.json`, plus a manifest per corpus.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{
    check_invariants, BBoxTrack, ClipSource, FrameRange, ScenarioAttributes, ScenarioLayout, TemporalAnnotation,
    TextAnnotation,
};
use crate::video::VideoClip;

pub const STORE_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub format_version: u32,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub annotation: TemporalAnnotation,
    pub tracks: Vec<BBoxTrack>,
    pub texts: TextAnnotation,
    pub attributes: ScenarioAttributes,
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:05}.png")
}

/// Writes `layout` into `dir` (created if missing).
pub fn write_scenario(dir: &Path, layout: &ScenarioLayout) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in 0..layout.frames {
        let px = layout.render_frame_u8(t);
        image::save_buffer_with_format(
            dir.join(frame_file(t)),
            &px,
            layout.width as u32,
            layout.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
    }
    let meta = ScenarioMeta {
        format_version: STORE_FORMAT,
        seed: layout.seed,
        frames: layout.frames,
        height: layout.height,
        width: layout.width,
        annotation: layout.annotation,
        tracks: layout.tracks.clone(),
        texts: layout.texts.clone(),
        attributes: layout.attributes,
    };
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Writes every frame of `clip` as an 8-bit PNG into `dir`.
pub fn write_clip_frames(dir: &Path, clip: &VideoClip) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (t, h, w, c) = clip.dims();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Shape(format!("cannot write {c}-channel frames as PNG"))),
    };
    for i in 0..t {
        let px: Vec<u8> = clip.frame(i).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::save_buffer_with_format(dir.join(frame_file(i)), &px, w as u32, h as u32, color, image::ImageFormat::Png)?;
    }
    Ok(())
}

/// A stored scenario. Frames are decoded from disk on demand.
#[derive(Clone, Debug)]
pub struct StoredScenario {
    pub dir: PathBuf,
    pub meta: ScenarioMeta,
}

impl StoredScenario {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::path(&path, e.to_string()))?;
        let meta: ScenarioMeta = serde_json::from_str(&text)?;
        if meta.format_version != STORE_FORMAT {
            return Err(Error::Compatibility(format!(
                "{} has store format {}, expected {STORE_FORMAT}",
                path.display(),
                meta.format_version
            )));
        }
        check_invariants(meta.frames, &meta.annotation, &meta.tracks, &meta.texts)?;
        Ok(Self { dir: dir.to_path_buf(), meta })
    }

    pub fn frame(&self, t: usize) -> Result<Vec<f32>> {
        let path = self.dir.join(frame_file(t));
        let img = image::open(&path).map_err(|e| Error::path(&path, e.to_string()))?.to_rgb8();
        if (img.width() as usize, img.height() as usize) != (self.meta.width, self.meta.height) {
            return Err(Error::Shape(format!(
                "{} is {}x{}, expected {}x{}",
                path.display(),
                img.width(),
                img.height(),
                self.meta.width,
                self.meta.height
            )));
        }
        Ok(img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
    }
}

impl ClipSource for StoredScenario {
    fn total_frames(&self) -> usize {
        self.meta.frames
    }
    fn annotation(&self) -> TemporalAnnotation {
        self.meta.annotation
    }
    fn tracks(&self) -> &[BBoxTrack] {
        &self.meta.tracks
    }
    fn texts(&self) -> &TextAnnotation {
        &self.meta.texts
    }
    fn clip(&self, window: FrameRange, reversed: bool) -> Result<VideoClip> {
        if window.end > self.meta.frames || window.start > window.end {
            return Err(Error::Shape(format!("{window} outside video of {} frames", self.meta.frames)));
        }
        let mut frames = (window.start..window.end).map(|t| self.frame(t)).collect::<Result<Vec<_>>>()?;
        if reversed {
            frames.reverse();
        }
        VideoClip::from_frames(self.meta.height, self.meta.width, 3, &frames)
    }
}

/// Index of one generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::path(&path, e.to_string()))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != STORE_FORMAT {
            return Err(Error::Compatibility(format!("manifest format {} vs {STORE_FORMAT}", m.format_version)));
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        std::fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn open_split(&self, root: &Path, heldout: bool) -> Result<Vec<StoredScenario>> {
        let names = if heldout { &self.heldout } else { &self.train };
        names.iter().map(|n| StoredScenario::open(&root.join(n))).collect()
    }
}
