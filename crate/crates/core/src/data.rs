//! Synthetic labelled video, memory samplers, clip augmentation and
//! sliding-window snippets.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_INDEX};
use crate::rng::{derive_seed, stream_rng};
use crate::tensor::{self, Tensor};

/// Memory frames, the query frame and the query's label map.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `3×H×W` frames in temporal order.
    pub memory: Vec<Tensor>,
    pub query: Tensor,
    pub label: LabelMap,
    /// Position of the query frame in its source video.
    pub query_index: usize,
}

impl VideoClip {
    pub fn height(&self) -> usize {
        self.label.height()
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (c, h, w) = self.query.chw()?;
        if c != 3 || (h, w) != (self.label.height(), self.label.width()) {
            return Err(Error::shape(format!(
                "query {:?} does not match label {}×{}",
                self.query.shape(),
                self.label.height(),
                self.label.width()
            )));
        }
        if let Some(f) = self.memory.iter().find(|f| f.shape() != self.query.shape()) {
            return Err(Error::shape(format!("memory frame {:?} vs query {:?}", f.shape(), self.query.shape())));
        }
        self.label.validate(num_classes)
    }

    /// Treats `self.memory` as the frames immediately preceding the query and
    /// picks `memory_length` of them with the given sampler.
    pub fn select_memory(&self, memory_length: usize, mode: SamplerMode, window: usize, rng: &mut impl Rng) -> Result<VideoClip> {
        let picks = sample_memory(self.memory.len(), memory_length, mode, window, rng)?;
        Ok(VideoClip {
            memory: picks.into_iter().map(|i| self.memory[i].clone()).collect(),
            query: self.query.clone(),
            label: self.label.clone(),
            query_index: self.query_index,
        })
    }
}

// ---------------------------------------------------------------------------
// memory sampling

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    /// `T` distinct frames drawn from the last `window` frames, sorted.
    Random,
    /// The `T` frames immediately preceding the query.
    Continuous,
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMode::Random => "random",
            SamplerMode::Continuous => "continuous",
        })
    }
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplerMode::Random),
            "continuous" => Ok(SamplerMode::Continuous),
            other => Err(Error::Config(format!("unknown sampler '{other}' (expected random or continuous)"))),
        }
    }
}

/// Default look-back for the random sampler.
pub const DEFAULT_WINDOW: usize = 10;

/// Indices of `memory_length` past frames for the frame at `query_index`.
pub fn sample_memory(
    query_index: usize,
    memory_length: usize,
    mode: SamplerMode,
    window: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if memory_length == 0 {
        return Ok(Vec::new());
    }
    match mode {
        SamplerMode::Continuous => {
            if query_index < memory_length {
                return Err(Error::Sampling(format!(
                    "continuous sampling of {memory_length} frames needs query index >= {memory_length}, got {query_index}"
                )));
            }
            Ok((query_index - memory_length..query_index).collect())
        }
        SamplerMode::Random => {
            if window < memory_length {
                return Err(Error::Sampling(format!("window {window} is shorter than memory length {memory_length}")));
            }
            let start = query_index.saturating_sub(window);
            let available = query_index - start;
            if available < memory_length {
                return Err(Error::Sampling(format!(
                    "only {available} past frames before index {query_index}, need {memory_length}"
                )));
            }
            let mut picks: Vec<usize> = index::sample(rng, available, memory_length)
                .into_iter()
                .map(|i| start + i)
                .collect();
            picks.sort_unstable();
            Ok(picks)
        }
    }
}

// ---------------------------------------------------------------------------
// synthetic scenes

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OccluderPolicy {
    None,
    /// A class-less patch hides the centre of every object in the final
    /// (query) frame only.
    OccludeQueryOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub num_objects: usize,
    pub kinds: Vec<ShapeKind>,
    /// Integer velocities are drawn from `-max_speed..=max_speed` on each axis.
    pub max_speed: i64,
    /// Object half-extent range as fractions of `min(H, W)`.
    pub min_extent: f64,
    pub max_extent: f64,
    pub occluder: OccluderPolicy,
    /// Occluder half-side relative to the object's half-extent.
    pub occluder_coverage: f64,
    /// Probability that an object is missing from any one non-final frame.
    /// Every object stays visible in at least one of the `memory_length`
    /// frames before the final one.
    pub blink_prob: f64,
    pub background_class: u8,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            num_objects: 2,
            kinds: vec![ShapeKind::Circle, ShapeKind::Rectangle],
            max_speed: 2,
            min_extent: 0.12,
            max_extent: 0.25,
            occluder: OccluderPolicy::None,
            occluder_coverage: 1.0,
            blink_prob: 0.0,
            background_class: 0,
            num_classes: 4,
            seed: 0,
        }
    }
}

/// Fully labelled synthetic video.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
    /// Occluder mask of the final frame (row-major), all false without occluders.
    pub occluded: Vec<bool>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The final frame as query, every earlier frame as memory.
    pub fn final_snippet(&self) -> VideoClip {
        let q = self.frames.len() - 1;
        VideoClip {
            memory: self.frames[..q].to_vec(),
            query: self.frames[q].clone(),
            label: self.labels[q].clone(),
            query_index: q,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct SceneObject {
    kind: ShapeKind,
    class: u8,
    x: i64,
    y: i64,
    vx: i64,
    vy: i64,
    half_w: f64,
    half_h: f64,
}

impl SceneObject {
    fn center(&self, t: usize, h: usize, w: usize) -> (i64, i64) {
        let t = t as i64;
        ((self.x + self.vx * t).rem_euclid(w as i64), (self.y + self.vy * t).rem_euclid(h as i64))
    }

    fn covers(&self, dx: f64, dy: f64) -> bool {
        match self.kind {
            ShapeKind::Circle => (dx / self.half_w).powi(2) + (dy / self.half_h).powi(2) <= 1.0,
            ShapeKind::Rectangle => dx.abs() <= self.half_w && dy.abs() <= self.half_h,
        }
    }
}

/// Signed offset on a ring of length `n`, in `[-n/2, n/2)`.
fn ring_offset(p: i64, c: i64, n: usize) -> f64 {
    let n = n as i64;
    let d = (p - c).rem_euclid(n);
    (if d >= (n + 1) / 2 { d - n } else { d }) as f64
}

/// RGB colour used to paint `class`.
pub fn class_color(class: u8) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.10, 0.10, 0.15],
        [0.90, 0.20, 0.20],
        [0.20, 0.80, 0.30],
        [0.25, 0.35, 0.95],
        [0.95, 0.85, 0.20],
        [0.80, 0.30, 0.90],
        [0.20, 0.85, 0.85],
        [0.95, 0.55, 0.15],
    ];
    match PALETTE.get(class as usize) {
        Some(c) => *c,
        None => {
            // golden-angle hue walk for the remaining ids
            let hue = (class as f64 * 0.618_033_988_75).fract() * 6.0;
            let x = 1.0 - (hue % 2.0 - 1.0).abs();
            let (r, g, b) = match hue as u32 {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
        }
    }
}

/// Colour of the class-less occluder patch.
pub const OCCLUDER_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

fn paint(frame: &mut [f64], hw: usize, px: usize, rgb: [f64; 3]) {
    for (c, v) in rgb.iter().enumerate() {
        frame[c * hw + px] = *v;
    }
}

/// Renders a video of `video_length` frames of size `height×width` with every
/// frame labelled. Objects move linearly with wraparound; later objects are
/// drawn on top. With [`OccluderPolicy::OccludeQueryOnly`] the final frame gets
/// occluder patches, restricted to pixels whose class is visible somewhere in
/// the `memory_length` preceding frames.
pub fn generate_clip(
    spec: &SyntheticSceneSpec,
    memory_length: usize,
    height: usize,
    width: usize,
    video_length: usize,
) -> Result<Video> {
    if video_length <= memory_length {
        return Err(Error::contract(format!(
            "video length {video_length} must exceed memory length {memory_length}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::shape("frame extents must be positive"));
    }
    if spec.num_classes < 2 || spec.num_classes > 255 || spec.background_class as usize >= spec.num_classes {
        return Err(Error::Config(format!(
            "background class {} invalid for {} classes",
            spec.background_class, spec.num_classes
        )));
    }
    if spec.num_objects > 0 && spec.kinds.is_empty() {
        return Err(Error::Config("objects requested but no shape kinds allowed".into()));
    }

    let mut rng = stream_rng(spec.seed, &[0x5CE7E]);
    let base = height.min(width) as f64;
    let object_classes: Vec<u8> = (0..spec.num_classes as u8).filter(|&c| c != spec.background_class).collect();
    let objects: Vec<SceneObject> = (0..spec.num_objects)
        .map(|_| {
            let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
            let class = object_classes[rng.gen_range(0..object_classes.len())];
            let mut extent = || {
                let lo = (spec.min_extent * base).max(1.0);
                let hi = (spec.max_extent * base).max(lo);
                rng.gen_range(lo..=hi).round()
            };
            let (half_w, half_h) = match kind {
                ShapeKind::Circle => {
                    let r = extent();
                    (r, r)
                }
                ShapeKind::Rectangle => (extent(), extent()),
            };
            SceneObject {
                kind,
                class,
                x: rng.gen_range(0..width as i64),
                y: rng.gen_range(0..height as i64),
                vx: rng.gen_range(-spec.max_speed..=spec.max_speed),
                vy: rng.gen_range(-spec.max_speed..=spec.max_speed),
                half_w,
                half_h,
            }
        })
        .collect();

    // visible[o][t]: object o is drawn in frame t
    let last = video_length - 1;
    let lookback = memory_length.max(1).min(last);
    let visible: Vec<Vec<bool>> = objects
        .iter()
        .map(|_| {
            let mut v: Vec<bool> = (0..video_length)
                .map(|t| t == last || spec.blink_prob <= 0.0 || !rng.gen_bool(spec.blink_prob.min(1.0)))
                .collect();
            if lookback > 0 && !v[last - lookback..last].iter().any(|&x| x) {
                v[last - rng.gen_range(1..=lookback)] = true;
            }
            v
        })
        .collect();

    let hw = height * width;
    let bg = class_color(spec.background_class);
    let mut frames = Vec::with_capacity(video_length);
    let mut labels = Vec::with_capacity(video_length);
    for t in 0..video_length {
        let mut frame = vec![0.0; 3 * hw];
        let mut label = vec![spec.background_class; hw];
        for px in 0..hw {
            paint(&mut frame, hw, px, bg);
        }
        for (obj, vis) in objects.iter().zip(&visible) {
            if !vis[t] {
                continue;
            }
            let (cx, cy) = obj.center(t, height, width);
            let color = class_color(obj.class);
            for y in 0..height {
                let dy = ring_offset(y as i64, cy, height);
                for x in 0..width {
                    if obj.covers(ring_offset(x as i64, cx, width), dy) {
                        let px = y * width + x;
                        label[px] = obj.class;
                        paint(&mut frame, hw, px, color);
                    }
                }
            }
        }
        frames.push(Tensor::new(vec![3, height, width], frame)?);
        labels.push(LabelMap::new(height, width, label)?);
    }

    let mut occluded = vec![false; hw];
    if spec.occluder == OccluderPolicy::OccludeQueryOnly {
        let q = video_length - 1;
        let mut visible = [false; 256];
        for l in &labels[q - memory_length.max(1)..q] {
            for &c in l.data() {
                visible[c as usize] = true;
            }
        }
        let query_labels = labels[q].clone();
        let frame = frames[q].data_mut();
        for obj in &objects {
            let (cx, cy) = obj.center(q, height, width);
            let half_x = (obj.half_w * spec.occluder_coverage).ceil();
            let half_y = (obj.half_h * spec.occluder_coverage).ceil();
            for y in 0..height {
                let dy = ring_offset(y as i64, cy, height);
                if dy.abs() > half_y {
                    continue;
                }
                for x in 0..width {
                    let px = y * width + x;
                    let class = query_labels.data()[px];
                    if ring_offset(x as i64, cx, width).abs() <= half_x
                        && (class == spec.background_class || visible[class as usize])
                    {
                        occluded[px] = true;
                        paint(frame, hw, px, OCCLUDER_COLOR);
                    }
                }
            }
        }
    }

    Ok(Video { frames, labels, occluded })
}

/// `count` videos whose scene seeds are derived from `spec.seed` and the
/// video index, so any prefix of a larger set is identical.
pub fn synthetic_videos(
    spec: &SyntheticSceneSpec,
    count: usize,
    memory_length: usize,
    size: usize,
    video_length: usize,
) -> Result<Vec<Video>> {
    (0..count)
        .map(|i| {
            let scene = SyntheticSceneSpec { seed: derive_seed(spec.seed, &[0x5CE7E, i as u64]), ..spec.clone() };
            generate_clip(&scene, memory_length, size, size, video_length)
        })
        .collect()
}

/// Checks that every occluded non-background pixel of the final frame carries
/// a class that is visible in at least one of the `memory_length` preceding
/// frames at a pixel free of occluders.
pub fn verify_occluder_invariant(video: &Video, memory_length: usize, background_class: u8) -> Result<()> {
    let q = video.len() - 1;
    let lookback = memory_length.max(1);
    if q < lookback {
        return Err(Error::contract("video too short for the requested memory length"));
    }
    let mut visible = [false; 256];
    for l in &video.labels[q - lookback..q] {
        for &c in l.data() {
            visible[c as usize] = true;
        }
    }
    for (px, (&hidden, &class)) in video.occluded.iter().zip(video.labels[q].data()).enumerate() {
        if hidden && class != background_class && !visible[class as usize] {
            return Err(Error::contract(format!(
                "occluded pixel {px} has class {class}, absent from the preceding {lookback} frames"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub crop: usize,
    pub hflip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { min_ratio: 0.5, max_ratio: 2.0, crop: 32, hflip_prob: 0.5 }
    }
}

/// One concrete draw of the augmentation randomness, shared by every frame of a clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub ratio: f64,
    pub crop_y: usize,
    pub crop_x: usize,
    pub flip: bool,
}

fn resized_extent(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).max(1)
}

pub fn draw_augment(height: usize, width: usize, rng: &mut impl Rng, params: &AugmentParams) -> AugmentDraw {
    let ratio = if params.max_ratio > params.min_ratio {
        rng.gen_range(params.min_ratio..=params.max_ratio)
    } else {
        params.min_ratio
    };
    let rh = resized_extent(height, ratio).max(params.crop);
    let rw = resized_extent(width, ratio).max(params.crop);
    let crop_y = rng.gen_range(0..=rh - params.crop);
    let crop_x = rng.gen_range(0..=rw - params.crop);
    let flip = rng.gen_bool(params.hflip_prob.clamp(0.0, 1.0));
    AugmentDraw { ratio, crop_y, crop_x, flip }
}

/// Random resize, crop (padding with zeros / ignore labels when the resized
/// clip is smaller than the crop) and horizontal flip, applied identically to
/// every frame and the label.
pub fn augment(clip: &VideoClip, rng: &mut impl Rng, params: &AugmentParams) -> Result<VideoClip> {
    let draw = draw_augment(clip.height(), clip.width(), rng, params);
    apply_augment(clip, &draw, params.crop)
}

pub fn apply_augment(clip: &VideoClip, draw: &AugmentDraw, crop: usize) -> Result<VideoClip> {
    let (h, w) = (clip.height(), clip.width());
    let (rh, rw) = (resized_extent(h, draw.ratio), resized_extent(w, draw.ratio));
    if crop == 0 || draw.crop_y + crop > rh.max(crop) || draw.crop_x + crop > rw.max(crop) {
        return Err(Error::shape(format!("crop {crop} at ({}, {}) exceeds {rh}×{rw}", draw.crop_y, draw.crop_x)));
    }
    let source_x = |x: usize| if draw.flip { crop - 1 - x } else { x };

    let frame = |f: &Tensor| -> Result<Tensor> {
        let resized = tensor::resize_bilinear(f.data(), 3, h, w, rh, rw);
        let mut out = vec![0.0; 3 * crop * crop];
        for c in 0..3 {
            for y in 0..crop {
                let sy = draw.crop_y + y;
                if sy >= rh {
                    continue;
                }
                for x in 0..crop {
                    let sx = draw.crop_x + source_x(x);
                    if sx < rw {
                        out[(c * crop + y) * crop + x] = resized[(c * rh + sy) * rw + sx];
                    }
                }
            }
        }
        Tensor::new(vec![3, crop, crop], out)
    };

    let mut label = vec![IGNORE_INDEX; crop * crop];
    for y in 0..crop {
        let sy = draw.crop_y + y;
        if sy >= rh {
            continue;
        }
        let ly = nearest(sy, h, rh);
        for x in 0..crop {
            let sx = draw.crop_x + source_x(x);
            if sx < rw {
                label[y * crop + x] = clip.label.get(ly, nearest(sx, w, rw));
            }
        }
    }

    Ok(VideoClip {
        memory: clip.memory.iter().map(frame).collect::<Result<_>>()?,
        query: frame(&clip.query)?,
        label: LabelMap::new(crop, crop, label)?,
        query_index: clip.query_index,
    })
}

/// Nearest source index under half-pixel-centre resampling `src → dst`.
fn nearest(d: usize, src: usize, dst: usize) -> usize {
    (((d as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

// ---------------------------------------------------------------------------
// sliding window

/// One clip per valid query index (`memory_length..len`), in ascending order,
/// with memory picked by `sample_memory` under a per-index stream of `seed`.
pub fn sliding_window_snippets(
    video: &Video,
    memory_length: usize,
    mode: SamplerMode,
    seed: u64,
) -> Result<impl Iterator<Item = VideoClip> + '_> {
    if video.len() <= memory_length {
        return Err(Error::contract(format!(
            "video of {} frames is too short for memory length {memory_length}",
            video.len()
        )));
    }
    Ok((memory_length..video.len()).map(move |q| {
        let mut rng = snippet_rng(seed, q);
        let picks = sample_memory(q, memory_length, mode, DEFAULT_WINDOW.max(memory_length), &mut rng)
            .expect("query index >= memory length always has enough past frames");
        VideoClip {
            memory: picks.into_iter().map(|i| video.frames[i].clone()).collect(),
            query: video.frames[q].clone(),
            label: video.labels[q].clone(),
            query_index: q,
        }
    }))
}

fn snippet_rng(seed: u64, query_index: usize) -> ChaCha8Rng {
    stream_rng(seed, &[0x511D, query_index as u64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn continuous_sampling() {
        assert_eq!(sample_memory(20, 4, SamplerMode::Continuous, 10, &mut rng()).unwrap(), vec![16, 17, 18, 19]);
        assert_eq!(sample_memory(7, 1, SamplerMode::Continuous, 10, &mut rng()).unwrap(), vec![6]);
        assert!(matches!(sample_memory(2, 3, SamplerMode::Continuous, 10, &mut rng()), Err(Error::Sampling(_))));
    }

    #[test]
    fn random_sampling_range() {
        let mut r = rng();
        for _ in 0..200 {
            let picks = sample_memory(20, 4, SamplerMode::Random, 10, &mut r).unwrap();
            assert_eq!(picks.len(), 4);
            assert!(picks.windows(2).all(|w| w[0] < w[1]));
            assert!(picks.iter().all(|&i| (10..20).contains(&i)));
        }
        // clamped at frame 0
        let picks = sample_memory(3, 3, SamplerMode::Random, 10, &mut r).unwrap();
        assert_eq!(picks, vec![0, 1, 2]);
        assert!(sample_memory(2, 3, SamplerMode::Random, 10, &mut r).is_err());
        assert!(sample_memory(20, 4, SamplerMode::Random, 3, &mut r).is_err());
    }

    #[test]
    fn empty_scene_is_background() {
        let spec = SyntheticSceneSpec { num_objects: 0, background_class: 2, ..Default::default() };
        let v = generate_clip(&spec, 2, 8, 8, 4).unwrap();
        assert!(v.labels.iter().all(|l| l.data().iter().all(|&c| c == 2)));
    }

    #[test]
    fn wraparound_motion() {
        let obj = SceneObject { kind: ShapeKind::Circle, class: 1, x: 30, y: 5, vx: 2, vy: 0, half_w: 1.0, half_h: 1.0 };
        assert_eq!(obj.center(0, 32, 32), (30, 5));
        assert_eq!(obj.center(1, 32, 32), (0, 5));
        assert_eq!(ring_offset(0, 31, 32), 1.0);
        assert_eq!(ring_offset(31, 0, 32), -1.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSceneSpec { seed: 9, occluder: OccluderPolicy::OccludeQueryOnly, ..Default::default() };
        let a = generate_clip(&spec, 2, 16, 16, 6).unwrap();
        let b = generate_clip(&spec, 2, 16, 16, 6).unwrap();
        assert_eq!(a, b);
        assert!(generate_clip(&spec, 6, 16, 16, 6).is_err());
    }

    #[test]
    fn occluder_only_touches_query_frame() {
        let spec = SyntheticSceneSpec { seed: 3, num_objects: 1, occluder: OccluderPolicy::OccludeQueryOnly, ..Default::default() };
        let v = generate_clip(&spec, 2, 16, 16, 5).unwrap();
        assert!(v.occluded.iter().any(|&o| o));
        let gray = |f: &Tensor, px: usize| (0..3).all(|c| f.data()[c * 256 + px] == 0.5);
        for f in &v.frames[..4] {
            assert!((0..256).all(|px| !gray(f, px)));
        }
        verify_occluder_invariant(&v, 2, 0).unwrap();
    }

    #[test]
    fn identity_augmentation() {
        let spec = SyntheticSceneSpec { seed: 1, ..Default::default() };
        let clip = generate_clip(&spec, 1, 16, 16, 3).unwrap().final_snippet();
        let draw = AugmentDraw { ratio: 1.0, crop_y: 0, crop_x: 0, flip: false };
        assert_eq!(apply_augment(&clip, &draw, 16).unwrap(), clip);
    }

    #[test]
    fn flip_mirrors_frames_and_label() {
        let spec = SyntheticSceneSpec { seed: 5, ..Default::default() };
        let clip = generate_clip(&spec, 1, 8, 8, 3).unwrap().final_snippet();
        let draw = AugmentDraw { ratio: 1.0, crop_y: 0, crop_x: 0, flip: true };
        let out = apply_augment(&clip, &draw, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.label.get(y, x), clip.label.get(y, 7 - x));
                for c in 0..3 {
                    assert_eq!(out.query.data()[(c * 8 + y) * 8 + x], clip.query.data()[(c * 8 + y) * 8 + 7 - x]);
                    assert_eq!(out.memory[0].data()[(c * 8 + y) * 8 + x], clip.memory[0].data()[(c * 8 + y) * 8 + 7 - x]);
                }
            }
        }
    }

    #[test]
    fn small_resize_pads_with_ignore() {
        let spec = SyntheticSceneSpec { seed: 5, ..Default::default() };
        let clip = generate_clip(&spec, 1, 16, 16, 3).unwrap().final_snippet();
        let draw = AugmentDraw { ratio: 0.5, crop_y: 0, crop_x: 0, flip: false };
        let out = apply_augment(&clip, &draw, 16).unwrap();
        assert_eq!(out.label.get(15, 15), IGNORE_INDEX);
        assert_ne!(out.label.get(0, 0), IGNORE_INDEX);
        assert_eq!(out.query.data()[15 * 16 + 15], 0.0);
    }

    #[test]
    fn sliding_window_counts() {
        let spec = SyntheticSceneSpec { seed: 2, ..Default::default() };
        let v = generate_clip(&spec, 2, 8, 8, 6).unwrap();
        let idx: Vec<usize> = sliding_window_snippets(&v, 2, SamplerMode::Continuous, 0).unwrap().map(|c| c.query_index).collect();
        assert_eq!(idx, vec![2, 3, 4, 5]);

        let short = generate_clip(&spec, 2, 8, 8, 3).unwrap();
        assert_eq!(sliding_window_snippets(&short, 2, SamplerMode::Random, 0).unwrap().count(), 1);
        assert!(sliding_window_snippets(&short, 3, SamplerMode::Random, 0).is_err());

        let a: Vec<_> = sliding_window_snippets(&v, 2, SamplerMode::Random, 11).unwrap().collect();
        let b: Vec<_> = sliding_window_snippets(&v, 2, SamplerMode::Random, 11).unwrap().collect();
        assert_eq!(a, b);
    }
}
