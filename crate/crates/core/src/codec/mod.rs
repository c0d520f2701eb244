//! Pixel clip <-> latent clip mapping, object masking and latent masks.

mod learned;

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{rasterize_pixel_mask, BBoxTrack};
use crate::video::VideoClip;

pub use learned::{LearnedCodec, LearnedCodecConfig};

/// Spatial downsampling factor between pixels and latents.
pub const FACTOR: usize = 8;

/// Value convention of a latent tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentRange {
    /// Values in `[0, 1]`.
    Unit,
    /// Values in `[-1, 1]`.
    Signed,
}

impl LatentRange {
    fn as_str(self) -> &'static str {
        match self {
            LatentRange::Unit => "unit",
            LatentRange::Signed => "signed",
        }
    }
}

/// Latent clip `frames × h × w × c`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    range: LatentRange,
    data: Vec<f32>,
}

impl LatentClip {
    pub fn new(dims: (usize, usize, usize, usize), range: LatentRange, data: Vec<f32>) -> Result<Self> {
        let (frames, height, width, channels) = dims;
        if data.len() != frames * height * width * channels {
            return Err(Error::Shape(format!(
                "latent data has {} values, expected {frames}x{height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            range,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    pub fn range(&self) -> LatentRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The same latent in the signed view, `2u - 1`.
    pub fn to_signed(&self) -> LatentClip {
        match self.range {
            LatentRange::Signed => self.clone(),
            LatentRange::Unit => self.with_data(LatentRange::Signed, self.data.iter().map(|u| 2.0 * u - 1.0).collect()),
        }
    }

    /// The same latent in the unit view, `(s + 1) / 2`.
    pub fn to_unit(&self) -> LatentClip {
        match self.range {
            LatentRange::Unit => self.clone(),
            LatentRange::Signed => self.with_data(LatentRange::Unit, self.data.iter().map(|s| (s + 1.0) * 0.5).collect()),
        }
    }

    fn with_data(&self, range: LatentRange, data: Vec<f32>) -> LatentClip {
        LatentClip {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            range,
            data,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.dims(), &Device::Cpu)?)
    }

    pub fn from_tensor(t: &Tensor, range: LatentRange) -> Result<Self> {
        let dims = t.dims4()?;
        let data = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
        Self::new(dims, range, data)
    }

    /// Writes a one-line text header followed by little-endian `f32` values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let (t, h, wd, c) = self.dims();
        writeln!(
            w,
            "adversa-latent v1 dtype=f32 shape={t},{h},{wd},{c} range={}",
            self.range.as_str()
        )?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let mut dims = None;
        let mut range = None;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("adversa-latent") || fields.next() != Some("v1") {
            return Err(Error::Format(format!("bad latent header {:?}", header.trim_end())));
        }
        for field in fields {
            match field.split_once('=') {
                Some(("dtype", "f32")) => {}
                Some(("dtype", other)) => return Err(Error::Format(format!("unsupported dtype {other}"))),
                Some(("shape", s)) => {
                    let v: Vec<usize> = s
                        .split(',')
                        .map(|x| x.parse().map_err(|_| Error::Format(format!("bad shape {s}"))))
                        .collect::<Result<_>>()?;
                    if v.len() != 4 {
                        return Err(Error::Format(format!("latent shape must have 4 dims, got {s}")));
                    }
                    dims = Some((v[0], v[1], v[2], v[3]));
                }
                Some(("range", "unit")) => range = Some(LatentRange::Unit),
                Some(("range", "signed")) => range = Some(LatentRange::Signed),
                _ => return Err(Error::Format(format!("unknown latent header field {field}"))),
            }
        }
        let (dims, range) = dims
            .zip(range)
            .ok_or_else(|| Error::Format("latent header lacks shape or range".into()))?;
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(Error::Format(format!("latent body has {} bytes, expected {}", bytes.len(), n * 4)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(dims, range, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::path(path, e.to_string()))?;
        Self::read_from(f)
    }
}

/// Binary background indicator in latent space; 1 = background, 0 = object.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMask {
    dims: (usize, usize, usize, usize),
    data: Vec<f32>,
}

impl LatentMask {
    pub fn new(dims: (usize, usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 * dims.3 {
            return Err(Error::Shape(format!("mask data has {} values for dims {dims:?}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::Domain(format!("mask entry {v} is not binary")));
        }
        Ok(Self { dims, data })
    }

    pub fn ones(dims: (usize, usize, usize, usize)) -> Self {
        Self {
            dims,
            data: vec![1.0; dims.0 * dims.1 * dims.2 * dims.3],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.dims, &Device::Cpu)?)
    }
}

/// A reversible map between pixel clips and unit-range latents.
pub trait LatentCodec: Send + Sync {
    /// Identifier stored in checkpoints so inference can refuse a mismatched codec.
    fn descriptor(&self) -> String;
    fn latent_channels(&self) -> usize;
    fn encode(&self, clip: &VideoClip) -> Result<LatentClip>;
    fn decode(&self, latent: &LatentClip) -> Result<VideoClip>;
}

fn check_divisible(clip: &VideoClip) -> Result<()> {
    let (_, h, w, _) = clip.dims();
    if h % FACTOR != 0 || w % FACTOR != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("frame size {h}x{w} is not a positive multiple of {FACTOR}")));
    }
    Ok(())
}

/// Space-to-depth by 8 followed by a fixed channel permutation: every 8×8×C
/// pixel block becomes one latent cell of `64·C` channels. The permutation is
/// an orthonormal mixing matrix, so the map is exact and range preserving.
#[derive(Clone, Debug)]
pub struct SpaceToDepthCodec {
    image_channels: usize,
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl SpaceToDepthCodec {
    const PERM_SEED: u64 = 0x5eed_c0de;

    pub fn new(image_channels: usize) -> Self {
        let n = FACTOR * FACTOR * image_channels;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(Self::PERM_SEED));
        let mut inverse = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Self {
            image_channels,
            perm,
            inverse,
        }
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.image_channels {
            return Err(Error::Shape(format!("codec built for {} channels, got {c}", self.image_channels)));
        }
        Ok(())
    }
}

impl LatentCodec for SpaceToDepthCodec {
    fn descriptor(&self) -> String {
        format!("s2d{FACTOR}-perm-v1-c{}", self.image_channels)
    }

    fn latent_channels(&self) -> usize {
        self.perm.len()
    }

    fn encode(&self, clip: &VideoClip) -> Result<LatentClip> {
        check_divisible(clip)?;
        let (t, h, w, c) = clip.dims();
        self.check_channels(c)?;
        let (lh, lw, lc) = (h / FACTOR, w / FACTOR, self.perm.len());
        let src = clip.data();
        let mut out = vec![0f32; t * lh * lw * lc];
        for f in 0..t {
            for by in 0..lh {
                for bx in 0..lw {
                    let cell = ((f * lh + by) * lw + bx) * lc;
                    for dy in 0..FACTOR {
                        let row = ((f * h + by * FACTOR + dy) * w + bx * FACTOR) * c;
                        for dx in 0..FACTOR {
                            for ch in 0..c {
                                let j = (dy * FACTOR + dx) * c + ch;
                                out[cell + self.perm[j]] = src[row + dx * c + ch];
                            }
                        }
                    }
                }
            }
        }
        LatentClip::new((t, lh, lw, lc), LatentRange::Unit, out)
    }

    fn decode(&self, latent: &LatentClip) -> Result<VideoClip> {
        if latent.range() != LatentRange::Unit {
            return Err(Error::Convention("decode expects a unit-range latent".into()));
        }
        let (t, lh, lw, lc) = latent.dims();
        if lc != self.perm.len() {
            return Err(Error::Shape(format!("latent has {lc} channels, codec expects {}", self.perm.len())));
        }
        let (h, w, c) = (lh * FACTOR, lw * FACTOR, self.image_channels);
        let src = latent.data();
        let mut out = vec![0f32; t * h * w * c];
        for f in 0..t {
            for by in 0..lh {
                for bx in 0..lw {
                    let cell = ((f * lh + by) * lw + bx) * lc;
                    for (k, &j) in self.inverse.iter().enumerate() {
                        let ch = j % c;
                        let dx = (j / c) % FACTOR;
                        let dy = j / (c * FACTOR);
                        out[((f * h + by * FACTOR + dy) * w + bx * FACTOR + dx) * c + ch] = src[cell + k];
                    }
                }
            }
        }
        VideoClip::from_vec(t, h, w, c, out)
    }
}

/// Zeroes every pixel inside any box; `tracks` are indexed by clip frame.
pub fn mask_clip(clip: &VideoClip, tracks: &[BBoxTrack]) -> VideoClip {
    let (t, h, w, c) = clip.dims();
    let mask = rasterize_pixel_mask(tracks, t, h, w);
    let mut out = clip.clone();
    for (px, hit) in out.data_mut().chunks_exact_mut(c).zip(mask) {
        if hit {
            px.fill(0.0);
        }
    }
    out
}

/// Thresholds a unit-range latent at 0.5: values `>= 0.5` map to 1.
pub fn binarize_latent(z: &LatentClip) -> Result<LatentMask> {
    if z.range() != LatentRange::Unit {
        return Err(Error::Convention("binarize_latent needs a unit-range latent".into()));
    }
    let data = z.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    LatentMask::new(z.dims(), data)
}

/// Background indicator on the latent grid: a cell is 0 when any pixel of its
/// 8×8 footprint is covered by a box, 1 otherwise. Replicated over channels.
pub fn rasterize_latent_mask(tracks: &[BBoxTrack], latent_dims: (usize, usize, usize, usize)) -> LatentMask {
    let (t, lh, lw, lc) = latent_dims;
    let (h, w) = (lh * FACTOR, lw * FACTOR);
    let mut cells = vec![true; t * lh * lw];
    for track in tracks {
        for (f, b) in track.boxes.iter().enumerate().take(t) {
            let Some(b) = b else { continue };
            let (x0, x1) = b.pixel_cols(w);
            let (y0, y1) = b.pixel_rows(h);
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            for cy in y0 / FACTOR..y1.div_ceil(FACTOR) {
                for cx in x0 / FACTOR..x1.div_ceil(FACTOR) {
                    cells[(f * lh + cy) * lw + cx] = false;
                }
            }
        }
    }
    let data = cells
        .into_iter()
        .flat_map(|bg| std::iter::repeat_n(if bg { 1.0 } else { 0.0 }, lc))
        .collect();
    LatentMask {
        dims: latent_dims,
        data,
    }
}

/// How the latent background mask is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Threshold the latent of the object-masked clip.
    Literal,
    /// Rasterize the boxes onto the latent grid.
    Geometric,
}

pub fn latent_mask(mode: MaskMode, codec: &dyn LatentCodec, clip: &VideoClip, tracks: &[BBoxTrack]) -> Result<LatentMask> {
    match mode {
        MaskMode::Literal => binarize_latent(&codec.encode(&mask_clip(clip, tracks))?),
        MaskMode::Geometric => {
            let (t, h, w, _) = clip.dims();
            Ok(rasterize_latent_mask(tracks, (t, h / FACTOR, w / FACTOR, codec.latent_channels())))
        }
    }
}
