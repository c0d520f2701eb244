use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{BBox, BBoxTrack, ObjectClass};
use super::text::{describe, Approach, Location, TextAnnotation};
use super::{FrameRange, Scenario, ScenarioAttributes, TemporalAnnotation};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::video::VideoClip;

/// Shortest video for which all three segments can hold a 16-frame clip.
pub const MIN_FRAMES: usize = 60;
const MAX_TRACKS: usize = 6;
const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Total tracked objects: the colliding pair plus parked distractors.
    pub tracks: usize,
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            frames: 120,
            height: 64,
            width: 64,
            tracks: 3,
            max_attempts: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < MIN_FRAMES {
            return Err(Error::Config(format!("frames = {} < {MIN_FRAMES}", self.frames)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!("frame size {}x{} below 32x32", self.height, self.width)));
        }
        if !(2..=MAX_TRACKS).contains(&self.tracks) {
            return Err(Error::Config(format!("tracks = {} outside [2, {MAX_TRACKS}]", self.tracks)));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Everything about a scenario except its rendered pixels. Frames are a pure
/// function of the layout, so corpora can render clips on demand.
#[derive(Clone, Debug)]
pub struct ScenarioLayout {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub annotation: TemporalAnnotation,
    pub tracks: Vec<BBoxTrack>,
    pub texts: TextAnnotation,
    pub attributes: ScenarioAttributes,
    background: Vec<u8>,
    colors: Vec<[u8; 3]>,
}

impl ScenarioLayout {
    /// Frame `t` as 8-bit RGB, row-major.
    pub fn render_frame_u8(&self, t: usize) -> Vec<u8> {
        let mut px = self.background.clone();
        // tracks[0] is the subject; draw it last so it sits on top
        let order = (1..self.tracks.len()).rev().chain(std::iter::once(0));
        for i in order {
            let Some(b) = self.tracks[i].boxes[t] else { continue };
            let (x0, x1) = b.pixel_cols(self.width);
            let (y0, y1) = b.pixel_rows(self.height);
            for y in y0..y1 {
                for x in x0..x1 {
                    let o = (y * self.width + x) * CHANNELS;
                    px[o..o + CHANNELS].copy_from_slice(&self.colors[i]);
                }
            }
        }
        px
    }

    pub fn render_frame(&self, t: usize) -> Vec<f32> {
        self.render_frame_u8(t).into_iter().map(|v| v as f32 / 255.0).collect()
    }

    pub fn render_range(&self, range: FrameRange, reversed: bool) -> Result<VideoClip> {
        if range.end > self.frames || range.start > range.end {
            return Err(Error::Shape(format!("{range} outside video of {} frames", self.frames)));
        }
        let mut frames: Vec<Vec<f32>> = (range.start..range.end).map(|t| self.render_frame(t)).collect();
        if reversed {
            frames.reverse();
        }
        VideoClip::from_frames(self.height, self.width, CHANNELS, &frames)
    }

    pub fn render(&self) -> Scenario {
        let clip = self
            .render_range(FrameRange::new(0, self.frames), false)
            .expect("full range is always in bounds");
        Scenario {
            frames: clip,
            annotation: self.annotation,
            tracks: self.tracks.clone(),
            texts: self.texts.clone(),
            seed: self.seed,
            attributes: self.attributes,
        }
    }
}

/// Deterministic synthetic accident scenario for `seed`.
pub fn generate_scenario(seed: u64, cfg: &GeneratorConfig) -> Result<Scenario> {
    Ok(generate_layout(seed, cfg)?.render())
}

/// Samples a layout, rejecting draws whose normal segment would be too short or
/// whose geometry breaks an invariant and retrying with a derived seed.
pub fn generate_layout(seed: u64, cfg: &GeneratorConfig) -> Result<ScenarioLayout> {
    cfg.validate()?;
    for attempt in 0..cfg.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt as u64));
        if let Some(layout) = try_layout(seed, cfg, &mut rng)? {
            if layout.check_invariants().is_ok() {
                return Ok(layout);
            }
        }
    }
    Err(Error::Invariant(format!(
        "no valid scenario for seed {seed} within {} attempts",
        cfg.max_attempts
    )))
}

fn subject_color(class: ObjectClass) -> [u8; 3] {
    match class {
        ObjectClass::Car => [210, 45, 35],
        ObjectClass::Pedestrian => [45, 200, 70],
        ObjectClass::Cyclist => [50, 90, 225],
    }
}

const EGO_COLOR: [u8; 3] = [235, 205, 40];

fn parked_color(class: ObjectClass) -> [u8; 3] {
    subject_color(class).map(|c| (c as u16 * 11 / 20) as u8)
}

fn background(location: Location, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let fx = rng.random_range(1..=2) as f64;
    let fy = rng.random_range(1..=2) as f64;
    let phase_x = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_y = rng.random_range(0.0..std::f64::consts::TAU);
    let (sx, sy) = (width as f64 / 64.0, height as f64 / 64.0);
    let mut px = vec![0u8; width * height * CHANNELS];
    for y in 0..height {
        for x in 0..width {
            // positions in the nominal 64x64 frame
            let (u, v) = (x as f64 / sx, y as f64 / sy);
            let base: [f64; 3] = match location {
                Location::Intersection => {
                    let crossing = ((8.0..12.0).contains(&v) || (52.0..56.0).contains(&v)) && (u as usize / 3) % 2 == 0;
                    if crossing {
                        [200.0, 200.0, 195.0]
                    } else {
                        [95.0, 95.0, 100.0]
                    }
                }
                Location::Highway => {
                    let line = ((21.0..23.0).contains(&u) || (42.0..44.0).contains(&u)) && (v as usize / 6) % 2 == 0;
                    if line {
                        [185.0, 185.0, 170.0]
                    } else {
                        [70.0, 72.0, 78.0]
                    }
                }
                Location::Street => {
                    if u < 8.0 || u >= 56.0 {
                        [150.0, 138.0, 118.0]
                    } else {
                        [108.0, 108.0, 108.0]
                    }
                }
            };
            let tex = 8.0
                * (std::f64::consts::TAU * fx * u / 64.0 + phase_x).sin()
                * (std::f64::consts::TAU * fy * v / 64.0 + phase_y).cos();
            let o = (y * width + x) * CHANNELS;
            for c in 0..CHANNELS {
                px[o + c] = (base[c] + tex).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    px
}

fn try_layout(seed: u64, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Option<ScenarioLayout>> {
    let (w, h, n) = (cfg.width, cfg.height, cfg.frames);
    let (sx, sy) = (w as f64 / 64.0, h as f64 / 64.0);

    let actor = ObjectClass::ALL[rng.random_range(0..3)];
    let approach = Approach::ALL[rng.random_range(0..4)];
    let location = Location::ALL[rng.random_range(0..3)];

    let t_ai = rng.random_range(40..=n - 32);
    if t_ai < 56 {
        return Ok(None);
    }
    let t_co = t_ai + rng.random_range(4..=10);
    let t_ae = (t_ai + rng.random_range(16..=28)).min(n - 1);

    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..=1.0);
    let (vw, vh) = ObjectClass::Car.footprint();
    let (vw, vh) = ((vw + jitter(rng)) * sx, (vh + jitter(rng)) * sy);
    let (aw, ah) = actor.footprint();
    let (aw, ah) = ((aw + jitter(rng)) * sx, (ah + jitter(rng)) * sy);
    let ego = (rng.random_range(26.0..=38.0) * sx, rng.random_range(26.0..=38.0) * sy);

    let (dx, dy) = approach.motion();
    let overlap = 1.0;
    let lateral = rng.random_range(-1.5..=1.5);
    let contact = if dx != 0.0 {
        (ego.0 - dx * ((vw + aw) / 2.0 - overlap * sx), ego.1 + lateral * sy)
    } else {
        (ego.0 + lateral * sx, ego.1 - dy * ((vh + ah) / 2.0 - overlap * sy))
    };
    // subject enters from the frame edge it approaches from
    let start = match approach {
        Approach::FromLeft => (aw / 2.0 - 2.0 * sx, contact.1),
        Approach::FromRight => (w as f64 - aw / 2.0 + 2.0 * sx, contact.1),
        Approach::FromBehind => (contact.0, h as f64 - ah / 2.0 + 2.0 * sy),
        Approach::Oncoming => (contact.0, ah / 2.0 - 2.0 * sy),
    };
    let dist = ((contact.0 - start.0).powi(2) + (contact.1 - start.1).powi(2)).sqrt();
    let speed = dist / t_co as f64;
    let drift = speed * 0.3;

    // displacement shared by both colliding objects after impact
    let push = |t: usize| -> (f64, f64) {
        let dt = (t.min(t_ae) as f64 - t_co as f64).max(0.0);
        (dx * drift * dt, dy * drift * dt)
    };
    let make_box = |cx: f64, cy: f64, bw: f64, bh: f64| {
        BBox::from_pixels_clipped(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0, w, h)
    };

    let mut subject = Vec::with_capacity(n);
    let mut victim = Vec::with_capacity(n);
    for t in 0..n {
        let (px, py) = push(t);
        let lead = (t_co as f64 - t as f64).max(0.0) * speed;
        subject.push(make_box(contact.0 - dx * lead + px, contact.1 - dy * lead + py, aw, ah));
        victim.push(make_box(ego.0 + px, ego.1 + py, vw, vh));
    }

    let mut tracks = vec![
        BBoxTrack {
            class_id: actor.id(),
            boxes: subject,
        },
        BBoxTrack {
            class_id: ObjectClass::Car.id(),
            boxes: victim,
        },
    ];
    let mut colors = vec![subject_color(actor), EGO_COLOR];

    let mut corners = [(0usize, 0usize), (1, 0), (0, 1), (1, 1)];
    corners.shuffle(rng);
    for k in 0..cfg.tracks - 2 {
        let class = ObjectClass::ALL[rng.random_range(0..3)];
        let (pw, ph) = class.footprint();
        let (pw, ph) = (pw * 0.8 * sx, ph * 0.8 * sy);
        let (cx, cy) = corners[k % 4];
        let margin = 2.0 + 2.0 * (k / 4) as f64;
        let x0 = if cx == 0 { margin * sx } else { w as f64 - margin * sx - pw };
        let y0 = if cy == 0 { margin * sy } else { h as f64 - margin * sy - ph };
        let b = BBox::from_pixels_clipped(x0, y0, x0 + pw, y0 + ph, w, h);
        tracks.push(BBoxTrack {
            class_id: class.id(),
            boxes: vec![b; n],
        });
        colors.push(parked_color(class));
    }

    let texts = describe(actor, approach, location, rng)?;
    let background = background(location, w, h, rng);
    Ok(Some(ScenarioLayout {
        seed,
        height: h,
        width: w,
        frames: n,
        annotation: TemporalAnnotation { t_ai, t_co, t_ae },
        tracks,
        texts,
        attributes: ScenarioAttributes {
            actor,
            approach,
            location,
        },
        background,
        colors,
    }))
}
