//! Synthetic accident scenarios: rendering, temporal segments, and the four
//! interaction groups of text-video co-occurrence pairs.

mod generate;
mod geometry;
pub mod text;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use generate::{generate_layout, generate_scenario, GeneratorConfig, ScenarioLayout, MIN_FRAMES};
pub use geometry::{rasterize_pixel_mask, BBox, BBoxTrack, ObjectClass};
pub use text::{Approach, Location, TextAnnotation, TextKind, TokenId};

use crate::error::{Error, Result};
use crate::video::VideoClip;

/// Frames per co-occurrence clip.
pub const CLIP_LEN: usize = 16;
/// Length of the near-accident window preceding accident onset.
pub const NEAR_WINDOW: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalAnnotation {
    pub t_ai: usize,
    pub t_co: usize,
    pub t_ae: usize,
}

impl TemporalAnnotation {
    pub fn near_accident_start(&self) -> usize {
        self.t_ai.saturating_sub(NEAR_WINDOW)
    }
}

/// Latent attributes the texts are rendered from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioAttributes {
    pub actor: ObjectClass,
    pub approach: Approach,
    pub location: Location,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub frames: VideoClip,
    pub annotation: TemporalAnnotation,
    pub tracks: Vec<BBoxTrack>,
    pub texts: TextAnnotation,
    pub seed: u64,
    pub attributes: ScenarioAttributes,
}

/// Half-open frame interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

impl FrameRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }
}

impl fmt::Display for FrameRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Normal, near-accident and accident segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    pub normal: FrameRange,
    pub near: FrameRange,
    /// `[t_ai, t_ae]` inclusive, stored half-open.
    pub accident: FrameRange,
}

/// Splits a video into `[0, t_ai-40)`, `[t_ai-40, t_ai)` and `[t_ai, t_ae]`.
pub fn partition_segments(a: &TemporalAnnotation, total_frames: usize) -> Result<Segments> {
    if !(a.t_ai <= a.t_co && a.t_co <= a.t_ae) {
        return Err(Error::Domain(format!("unordered annotation {a:?}")));
    }
    if a.t_ae >= total_frames {
        return Err(Error::Domain(format!("t_ae = {} outside {total_frames} frames", a.t_ae)));
    }
    let near_start = a.near_accident_start();
    let segments = Segments {
        normal: FrameRange::new(0, near_start),
        near: FrameRange::new(near_start, a.t_ai),
        accident: FrameRange::new(a.t_ai, a.t_ae + 1),
    };
    for (name, r) in [("normal", segments.normal), ("near-accident", segments.near), ("accident", segments.accident)] {
        if r.len() < CLIP_LEN {
            return Err(Error::DegenerateSegment(format!(
                "{name} segment {r} shorter than {CLIP_LEN} frames (t_ai = {})",
                a.t_ai
            )));
        }
    }
    Ok(segments)
}

/// Uniformly placed window of `CLIP_LEN` successive frames inside `range`.
pub fn sample_window(range: FrameRange, rng: &mut ChaCha8Rng) -> Result<FrameRange> {
    if range.len() < CLIP_LEN {
        return Err(Error::DegenerateSegment(format!("{range} shorter than {CLIP_LEN} frames")));
    }
    let start = rng.random_range(range.start..=range.end - CLIP_LEN);
    Ok(FrameRange::new(start, start + CLIP_LEN))
}

/// Random 16-frame clip from `range` of the scenario video.
pub fn sample_clip(source: &impl ClipSource, range: FrameRange, rng: &mut ChaCha8Rng) -> Result<VideoClip> {
    let w = sample_window(range, rng)?;
    source.clip(w, false)
}

/// Anything that can serve annotated clips: an in-memory scenario, a layout
/// rendered on demand, or a scenario on disk.
pub trait ClipSource {
    fn total_frames(&self) -> usize;
    fn annotation(&self) -> TemporalAnnotation;
    fn tracks(&self) -> &[BBoxTrack];
    fn texts(&self) -> &TextAnnotation;
    fn clip(&self, window: FrameRange, reversed: bool) -> Result<VideoClip>;

    fn segments(&self) -> Result<Segments> {
        partition_segments(&self.annotation(), self.total_frames())
    }

    fn clip_tracks(&self, window: FrameRange, reversed: bool) -> Vec<BBoxTrack> {
        self.tracks()
            .iter()
            .map(|t| t.window(window.start, window.end, reversed))
            .collect()
    }
}

impl ClipSource for Scenario {
    fn total_frames(&self) -> usize {
        self.frames.frames()
    }
    fn annotation(&self) -> TemporalAnnotation {
        self.annotation
    }
    fn tracks(&self) -> &[BBoxTrack] {
        &self.tracks
    }
    fn texts(&self) -> &TextAnnotation {
        &self.texts
    }
    fn clip(&self, window: FrameRange, reversed: bool) -> Result<VideoClip> {
        let c = self.frames.slice_frames(window.start, window.end)?;
        Ok(if reversed { c.reversed() } else { c })
    }
}

impl ClipSource for ScenarioLayout {
    fn total_frames(&self) -> usize {
        self.frames
    }
    fn annotation(&self) -> TemporalAnnotation {
        self.annotation
    }
    fn tracks(&self) -> &[BBoxTrack] {
        &self.tracks
    }
    fn texts(&self) -> &TextAnnotation {
        &self.texts
    }
    fn clip(&self, window: FrameRange, reversed: bool) -> Result<VideoClip> {
        self.render_range(window, reversed)
    }
}

/// Checks ordering, box validity, text grammar, and the overlap pattern
/// (some pair overlaps at `t_co`, no pair overlaps before `t_ai`).
pub fn check_invariants(frames: usize, a: &TemporalAnnotation, tracks: &[BBoxTrack], texts: &TextAnnotation) -> Result<()> {
    if !(a.t_ai <= a.t_co && a.t_co <= a.t_ae && a.t_ae < frames) {
        return Err(Error::Invariant(format!("annotation {a:?} not ordered within {frames} frames")));
    }
    if tracks.len() < 2 {
        return Err(Error::Invariant("fewer than two tracks".into()));
    }
    for t in tracks {
        t.validate()?;
        if t.boxes.len() != frames {
            return Err(Error::Invariant(format!("track has {} boxes for {frames} frames", t.boxes.len())));
        }
    }
    texts.validate()?;
    let overlapping = |f: usize| {
        for i in 0..tracks.len() {
            for j in i + 1..tracks.len() {
                if let (Some(a), Some(b)) = (tracks[i].boxes[f], tracks[j].boxes[f]) {
                    if a.iou(&b) > 0.0 {
                        return true;
                    }
                }
            }
        }
        false
    };
    if !overlapping(a.t_co) {
        return Err(Error::Invariant(format!("no overlapping pair at t_co = {}", a.t_co)));
    }
    if let Some(f) = (0..a.t_ai).find(|&f| overlapping(f)) {
        return Err(Error::Invariant(format!("boxes overlap at frame {f} before t_ai = {}", a.t_ai)));
    }
    Ok(())
}

impl Scenario {
    pub fn check_invariants(&self) -> Result<()> {
        check_invariants(self.frames.frames(), &self.annotation, &self.tracks, &self.texts)
    }
}

impl ScenarioLayout {
    pub fn check_invariants(&self) -> Result<()> {
        check_invariants(self.frames, &self.annotation, &self.tracks, &self.texts)?;
        partition_segments(&self.annotation, self.frames).map(|_| ())
    }
}

/// Interaction group of the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Normal clip with the negated category text.
    #[serde(rename = "o")]
    Normal,
    /// Near-accident clip with the reason text.
    #[serde(rename = "r")]
    Reason,
    /// Time-reversed near-accident clip with the prevention text.
    #[serde(rename = "p")]
    Prevention,
    /// Accident clip with the category text.
    #[serde(rename = "a")]
    Accident,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Normal, Group::Reason, Group::Prevention, Group::Accident];

    pub fn letter(self) -> char {
        match self {
            Group::Normal => 'o',
            Group::Reason => 'r',
            Group::Prevention => 'p',
            Group::Accident => 'a',
        }
    }

    pub fn positive_text(self) -> TextKind {
        match self {
            Group::Normal => TextKind::CategoryNeg,
            Group::Reason => TextKind::Reason,
            Group::Prevention => TextKind::Prevention,
            Group::Accident => TextKind::Category,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative1,
    Negative2,
}

/// Where a negative text comes from: the scenario's own annotation, or a
/// random annotation of the distractor pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSource {
    pub kind: TextKind,
    #[serde(default)]
    pub from_pool: bool,
}

impl NegativeSource {
    const fn own(kind: TextKind) -> Self {
        Self { kind, from_pool: false }
    }
}

/// The two negative text slots of every group, indexed like [`Group::ALL`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeMapping(pub [[NegativeSource; 2]; 4]);

impl Default for NegativeMapping {
    fn default() -> Self {
        use TextKind::*;
        Self([
            [NegativeSource::own(Category), NegativeSource::own(Reason)],
            [NegativeSource::own(Prevention), NegativeSource::own(CategoryNeg)],
            [NegativeSource::own(Reason), NegativeSource::own(Category)],
            [NegativeSource::own(CategoryNeg), NegativeSource::own(Prevention)],
        ])
    }
}

/// A text-video co-occurrence pair.
#[derive(Clone, Debug)]
pub struct CoCP {
    pub clip: Arc<VideoClip>,
    pub window: FrameRange,
    pub reversed: bool,
    pub text: Vec<TokenId>,
    pub polarity: Polarity,
    pub group: Group,
}

#[derive(Clone, Debug)]
pub struct InteractionGroup {
    pub group: Group,
    pub positive: CoCP,
    pub negatives: [CoCP; 2],
    /// Boxes aligned with the clip frames.
    pub tracks: Vec<BBoxTrack>,
}

/// Clip windows drawn for one scenario: the prevention group reuses the
/// reason window, reversed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupWindows {
    pub normal: FrameRange,
    pub near: FrameRange,
    pub accident: FrameRange,
}

impl GroupWindows {
    pub fn sample(segments: &Segments, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            normal: sample_window(segments.normal, rng)?,
            near: sample_window(segments.near, rng)?,
            accident: sample_window(segments.accident, rng)?,
        })
    }

    /// `(window, reversed)` of a group's clip.
    pub fn for_group(&self, g: Group) -> (FrameRange, bool) {
        match g {
            Group::Normal => (self.normal, false),
            Group::Reason => (self.near, false),
            Group::Prevention => (self.near, true),
            Group::Accident => (self.accident, false),
        }
    }
}

fn pool_text(pool: &[TextAnnotation], kind: TextKind, avoid: &[TokenId], rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
    let candidates: Vec<&[TokenId]> = pool.iter().map(|t| t.get(kind)).filter(|t| *t != avoid).collect();
    if candidates.is_empty() {
        return Err(Error::Domain(format!("distractor pool holds no {kind:?} text distinct from the positive")));
    }
    Ok(candidates[rng.random_range(0..candidates.len())].to_vec())
}

/// Negative texts for `group` under `mapping`; own texts equal to the positive
/// are replaced from the pool.
pub fn negative_texts(
    texts: &TextAnnotation,
    group: Group,
    mapping: &NegativeMapping,
    pool: &[TextAnnotation],
    rng: &mut ChaCha8Rng,
) -> Result<[Vec<TokenId>; 2]> {
    let positive = texts.get(group.positive_text());
    let mut pick = |src: NegativeSource| -> Result<Vec<TokenId>> {
        let own = texts.get(src.kind);
        if !src.from_pool && own != positive {
            Ok(own.to_vec())
        } else {
            pool_text(pool, src.kind, positive, rng)
        }
    };
    let [a, b] = mapping.0[group.index()];
    Ok([pick(a)?, pick(b)?])
}

/// Builds the o/r/p/a groups for one scenario: one positive and two negative
/// pairs each, all sharing the group's clip.
pub fn build_interaction_groups(
    source: &impl ClipSource,
    pool: &[TextAnnotation],
    mapping: &NegativeMapping,
    rng: &mut ChaCha8Rng,
) -> Result<[InteractionGroup; 4]> {
    if pool.is_empty() {
        return Err(Error::Domain("distractor pool is empty".into()));
    }
    let segments = source.segments()?;
    let windows = GroupWindows::sample(&segments, rng)?;
    let near = Arc::new(source.clip(windows.near, false)?);
    let mut out = Vec::with_capacity(4);
    for g in Group::ALL {
        let (window, reversed) = windows.for_group(g);
        let clip = match g {
            Group::Reason => near.clone(),
            Group::Prevention => Arc::new(near.reversed()),
            _ => Arc::new(source.clip(window, reversed)?),
        };
        let pair = |text: Vec<TokenId>, polarity| CoCP {
            clip: clip.clone(),
            window,
            reversed,
            text,
            polarity,
            group: g,
        };
        let [n1, n2] = negative_texts(source.texts(), g, mapping, pool, rng)?;
        out.push(InteractionGroup {
            group: g,
            positive: pair(source.texts().get(g.positive_text()).to_vec(), Polarity::Positive),
            negatives: [pair(n1, Polarity::Negative1), pair(n2, Polarity::Negative2)],
            tracks: source.clip_tracks(window, reversed),
        });
    }
    Ok(out.try_into().expect("exactly four groups"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ann(t_ai: usize, t_co: usize, t_ae: usize) -> TemporalAnnotation {
        TemporalAnnotation { t_ai, t_co, t_ae }
    }

    #[test]
    fn partition_reference_case() {
        let s = partition_segments(&ann(60, 70, 100), 120).unwrap();
        assert_eq!(s.normal, FrameRange::new(0, 20));
        assert_eq!(s.near, FrameRange::new(20, 60));
        assert_eq!(s.accident, FrameRange::new(60, 101));
    }

    #[test]
    fn partition_rejects_short_normal_segment() {
        let err = partition_segments(&ann(40, 50, 80), 120).unwrap_err();
        assert!(matches!(err, Error::DegenerateSegment(_)));
        assert!(matches!(partition_segments(&ann(55, 60, 90), 120), Err(Error::DegenerateSegment(_))));
        assert!(partition_segments(&ann(56, 60, 90), 120).is_ok());
    }

    #[test]
    fn partition_rejects_short_accident_segment() {
        assert!(matches!(partition_segments(&ann(60, 62, 70), 120), Err(Error::DegenerateSegment(_))));
    }

    #[test]
    fn partition_brute_force_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let t_ai = rng.random_range(0..110);
            let t_co = rng.random_range(t_ai..115);
            let t_ae = rng.random_range(t_co..120);
            let a = ann(t_ai, t_co, t_ae);
            match partition_segments(&a, 120) {
                Ok(s) => {
                    // every frame below t_ae+1 lands in exactly one segment, in order
                    for f in 0..=t_ae {
                        let hits = [s.normal, s.near, s.accident].iter().filter(|r| r.contains(f)).count();
                        assert_eq!(hits, 1, "frame {f} in {s:?}");
                    }
                    assert!(s.normal.end == s.near.start && s.near.end == s.accident.start);
                    assert_eq!(s.near.len(), NEAR_WINDOW.min(t_ai));
                }
                Err(Error::DegenerateSegment(_)) => {
                    assert!(t_ai < 56 || t_ae + 1 - t_ai < CLIP_LEN);
                }
                Err(e) => panic!("unexpected {e}"),
            }
        }
    }

    #[test]
    fn window_in_exact_range_is_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_window(FrameRange::new(0, 16), &mut rng).unwrap(), FrameRange::new(0, 16));
        }
        assert!(matches!(
            sample_window(FrameRange::new(0, 15), &mut rng),
            Err(Error::DegenerateSegment(_))
        ));
    }

    #[test]
    fn window_starts_are_uniform() {
        // chi-square goodness of fit over the 5 admissible starts of [0, 20)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            counts[sample_window(FrameRange::new(0, 20), &mut rng).unwrap().start] += 1;
        }
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(counts.iter().all(|&c| c > 0));
        // 4 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 18.467, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn default_scenario_shape() {
        let s = generate_scenario(0, &GeneratorConfig::default()).unwrap();
        assert!(s.annotation.t_ai < s.annotation.t_co && s.annotation.t_co < s.annotation.t_ae);
        assert!(s.tracks.len() >= 2);
        assert_eq!(s.frames.dims(), (120, 64, 64, 3));
        s.check_invariants().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = generate_scenario(9, &cfg).unwrap();
        let b = generate_scenario(9, &cfg).unwrap();
        let bytes = |s: &Scenario| s.frames.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.texts, b.texts);
    }

    #[test]
    fn invariant_sweep_over_seeds() {
        let cfg = GeneratorConfig::default();
        for seed in 1..=64 {
            let layout = generate_layout(seed, &cfg).unwrap();
            layout.check_invariants().unwrap();
            let seg = layout.segments().unwrap();
            assert_eq!(seg.near.len(), NEAR_WINDOW.min(layout.annotation.t_ai));
        }
    }

    #[test]
    fn rendered_objects_match_rasterized_boxes() {
        // every pixel inside a box carries a track color; everything else is background
        for seed in 0..8 {
            let layout = generate_layout(seed, &GeneratorConfig::default()).unwrap();
            let scenario = layout.render();
            let mut empty = layout.clone();
            for t in &mut empty.tracks {
                t.boxes.fill(None);
            }
            let bg = empty.render();
            let mask = rasterize_pixel_mask(&scenario.tracks, 120, 64, 64);
            for t in (0..120).step_by(7) {
                for p in 0..64 * 64 {
                    let idx = t * 64 * 64 + p;
                    let same = (0..3).all(|c| scenario.frames.data()[idx * 3 + c] == bg.frames.data()[idx * 3 + c]);
                    if !mask[idx] {
                        assert!(same, "unmasked pixel changed at frame {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GeneratorConfig { frames: 50, ..Default::default() };
        assert!(matches!(generate_scenario(0, &cfg), Err(Error::Config(_))));
        let cfg = GeneratorConfig { tracks: 1, ..Default::default() };
        assert!(matches!(generate_scenario(0, &cfg), Err(Error::Config(_))));
    }

    fn corpus_pool(n: u64) -> Vec<TextAnnotation> {
        (100..100 + n)
            .map(|s| generate_layout(s, &GeneratorConfig::default()).unwrap().texts)
            .collect()
    }

    #[test]
    fn groups_have_twelve_pairs_and_reversed_prevention_clip() {
        let layout = generate_layout(3, &GeneratorConfig::default()).unwrap();
        let pool = corpus_pool(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let groups = build_interaction_groups(&layout, &pool, &NegativeMapping::default(), &mut rng).unwrap();
        let pairs: usize = groups.iter().map(|g| 1 + g.negatives.len()).sum();
        assert_eq!(pairs, 12);
        assert_eq!(groups.iter().filter(|g| g.positive.polarity == Polarity::Positive).count(), 4);
        let r = &groups[Group::Reason.index()];
        let p = &groups[Group::Prevention.index()];
        assert_eq!(r.positive.window, p.positive.window);
        assert_eq!(*p.positive.clip, r.positive.clip.reversed());
        assert_eq!(groups[Group::Normal.index()].positive.text, layout.texts.category_neg);
        assert_eq!(groups[Group::Accident.index()].positive.text, layout.texts.category);
        for g in &groups {
            assert_eq!(g.positive.clip.frames(), CLIP_LEN);
            assert_eq!(g.tracks[0].boxes.len(), CLIP_LEN);
        }
    }

    #[test]
    fn negatives_never_equal_positive() {
        let pool = corpus_pool(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pooled = NegativeMapping::default();
        pooled.0[1][0].from_pool = true;
        pooled.0[3][1].from_pool = true;
        for seed in 0..40 {
            let layout = generate_layout(seed, &GeneratorConfig::default()).unwrap();
            for mapping in [&NegativeMapping::default(), &pooled] {
                let groups = build_interaction_groups(&layout, &pool, mapping, &mut rng).unwrap();
                for g in &groups {
                    for n in &g.negatives {
                        assert_ne!(n.text, g.positive.text);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_pool_is_rejected() {
        let layout = generate_layout(3, &GeneratorConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(build_interaction_groups(&layout, &[], &NegativeMapping::default(), &mut rng).is_err());
    }
}
