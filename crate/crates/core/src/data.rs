//! Synthetic moving-sprite video and the binary clip file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{Episode, PipelineError, Targets};
use crate::tensor::{Scalar, Tensor};

pub const CLIP_MAGIC: &[u8; 4] = b"SWC1";
const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sprite of size {size} does not fit a {height}x{width} frame")]
    SpriteTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("clip must have at least one frame")]
    EmptyClip,
    #[error("bad magic {0:?}, expected \"SWC1\"")]
    BadMagic([u8; 4]),
    #[error("truncated header: {0} bytes")]
    TruncatedHeader(usize),
    #[error("truncated payload at frame {frame}: need {expected} bytes, have {actual}")]
    Truncated {
        frame: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("clip shape {0:?} overflows the addressable size")]
    ShapeOverflow([u32; 4]),
    #[error("clip shape {0:?} has a zero extent")]
    ZeroExtent([u32; 4]),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteShape {
    Square,
    Disc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassRule {
    /// All sprites share one of four directions; the label is the direction.
    MotionDirection4way,
    /// Sprites move freely; the label is the first sprite's shape.
    ShapeClass,
}

impl ClassRule {
    pub fn num_classes(&self) -> usize {
        match self {
            ClassRule::MotionDirection4way => 4,
            ClassRule::ShapeClass => 2,
        }
    }
}

/// Direction labels of [`ClassRule::MotionDirection4way`].
pub const DIRECTIONS: [&str; 4] = ["right", "left", "down", "up"];

fn direction_vector(label: usize) -> (f64, f64) {
    match label {
        0 => (0.0, 1.0),
        1 => (0.0, -1.0),
        2 => (1.0, 0.0),
        _ => (-1.0, 0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpriteSceneSpec {
    pub n_sprites: usize,
    pub shapes: Vec<SpriteShape>,
    /// Displacement per frame in pixels.
    pub delta: f64,
    /// Inclusive range of sprite side lengths (diameters for discs).
    pub sizes: (usize, usize),
    /// Sprite colors; random when empty.
    pub colors: Vec<[f32; 3]>,
    pub class_rule: ClassRule,
    /// Intensity of the fading trail left at earlier positions (0 disables it).
    pub trail: f64,
    /// Number of earlier positions drawn in the trail.
    pub trail_length: usize,
    /// Distance in pixels between consecutive trail copies.
    pub trail_spacing: f64,
}

impl Default for SpriteSceneSpec {
    fn default() -> Self {
        Self {
            n_sprites: 1,
            shapes: vec![SpriteShape::Square, SpriteShape::Disc],
            delta: 1.0,
            sizes: (3, 5),
            colors: Vec::new(),
            class_rule: ClassRule::MotionDirection4way,
            trail: 0.5,
            trail_length: 3,
            trail_spacing: 1.0,
        }
    }
}

impl SpriteSceneSpec {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(DataError::InvalidScene(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.n_sprites == 0 || self.shapes.is_empty() {
            return Err(DataError::InvalidScene("need at least one sprite and one shape".into()));
        }
        if self.sizes.0 == 0 || self.sizes.0 > self.sizes.1 {
            return Err(DataError::InvalidScene(format!("bad size range {:?}", self.sizes)));
        }
        if !(self.trail_spacing > 0.0 && self.trail_spacing.is_finite()) {
            return Err(DataError::InvalidScene(format!(
                "trail_spacing must be positive, got {}",
                self.trail_spacing
            )));
        }
        if !(0.0..=1.0).contains(&self.trail) {
            return Err(DataError::InvalidScene(format!("trail must be in [0, 1], got {}", self.trail)));
        }
        if self.sizes.1 >= height.min(width) {
            return Err(DataError::SpriteTooLarge {
                size: self.sizes.1,
                height,
                width,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    /// Frames per generator time unit; striding divides it.
    pub fps: f64,
    pub seed: u64,
    pub class_rule: Option<ClassRule>,
}

impl Default for ClipMeta {
    fn default() -> Self {
        Self {
            fps: 1.0,
            seed: 0,
            class_rule: None,
        }
    }
}

/// A sequence of `[H, W, C]` frames with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<Tensor<f32>>,
    pub label: Option<usize>,
    pub meta: ClipMeta,
}

impl Clip {
    pub fn new(frames: Vec<Tensor<f32>>, label: Option<usize>, meta: ClipMeta) -> Result<Self> {
        let first = frames.first().ok_or(DataError::EmptyClip)?;
        if first.shape().len() != 3 || frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(DataError::InvalidScene("frames must share one [H, W, C] shape".into()));
        }
        Ok(Self { frames, label, meta })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }

    /// Episode labelled with the clip label, or with each frame as its own target.
    pub fn to_episode<T: Scalar>(&self) -> std::result::Result<Episode<T>, PipelineError> {
        let targets = match self.label {
            Some(l) => Targets::Label(l),
            None => Targets::Frames,
        };
        Episode::new(self.frames.iter().map(Tensor::cast).collect(), targets)
    }

    /// Mean absolute per-pixel difference between consecutive frames.
    pub fn mean_interframe_diff(&self) -> f64 {
        if self.len() < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut n = 0usize;
        for w in self.frames.windows(2) {
            for (a, b) in w[0].data().iter().zip(w[1].data()) {
                total += f64::from((a - b).abs());
                n += 1;
            }
        }
        total / n as f64
    }
}

/// Folds a coordinate into `[0, span]` as if reflecting off both walls.
fn reflect(x: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let m = x.rem_euclid(2.0 * span);
    if m > span {
        2.0 * span - m
    } else {
        m
    }
}

struct Sprite {
    shape: SpriteShape,
    size: usize,
    color: [f32; 3],
    start: (f64, f64),
    velocity: (f64, f64),
}

impl Sprite {
    fn position(&self, time: f64, height: usize, width: usize) -> (f64, f64) {
        let span_r = (height - self.size) as f64;
        let span_c = (width - self.size) as f64;
        (
            reflect(self.start.0 + self.velocity.0 * time, span_r),
            reflect(self.start.1 + self.velocity.1 * time, span_c),
        )
    }

    fn draw(&self, frame: &mut [f32], width: usize, at: (f64, f64), weight: f32) {
        let r0 = at.0.round() as usize;
        let c0 = at.1.round() as usize;
        let radius = self.size as f64 / 2.0;
        for dr in 0..self.size {
            for dc in 0..self.size {
                if self.shape == SpriteShape::Disc {
                    let y = dr as f64 + 0.5 - radius;
                    let x = dc as f64 + 0.5 - radius;
                    if x * x + y * y > radius * radius {
                        continue;
                    }
                }
                let base = ((r0 + dr) * width + c0 + dc) * 3;
                for ch in 0..3 {
                    let v = self.color[ch] * weight;
                    if frame[base + ch] < v {
                        frame[base + ch] = v;
                    }
                }
            }
        }
    }
}

/// Generates a clip whose label is drawn from `seed`.
pub fn generate_clip(spec: &SpriteSceneSpec, k: usize, height: usize, width: usize, seed: u64) -> Result<Clip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = rng.gen_range(0..spec.class_rule.num_classes());
    generate_labeled_clip(spec, label, k, height, width, seed)
}

/// Generates a clip with a chosen class.
///
/// For the direction rule, start positions are chosen so that the sprites do
/// not reach a wall within the clip whenever the frame is large enough.
pub fn generate_labeled_clip(
    spec: &SpriteSceneSpec,
    label: usize,
    k: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Clip> {
    spec.validate(height, width)?;
    if k == 0 {
        return Err(DataError::EmptyClip);
    }
    if label >= spec.class_rule.num_classes() {
        return Err(DataError::InvalidScene(format!("label {label} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c11b);
    let travel = spec.delta * (k - 1) as f64;
    let tail = if spec.trail > 0.0 && spec.delta > 0.0 {
        spec.trail_spacing * spec.trail_length as f64
    } else {
        0.0
    };
    let sprites: Vec<Sprite> = (0..spec.n_sprites)
        .map(|n| {
            let shape = if n == 0 && spec.class_rule == ClassRule::ShapeClass {
                if label == 0 {
                    SpriteShape::Square
                } else {
                    SpriteShape::Disc
                }
            } else {
                spec.shapes[rng.gen_range(0..spec.shapes.len())]
            };
            let size = rng.gen_range(spec.sizes.0..=spec.sizes.1);
            let color = if spec.colors.is_empty() {
                [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)]
            } else {
                spec.colors[rng.gen_range(0..spec.colors.len())]
            };
            let span = ((height - size) as f64, (width - size) as f64);
            let dir = match spec.class_rule {
                ClassRule::MotionDirection4way => direction_vector(label),
                ClassRule::ShapeClass => direction_vector(rng.gen_range(0..4)),
            };
            let axis_range = |span: f64, d: f64| -> (f64, f64) {
                if d == 0.0 || travel >= span {
                    (0.0, span)
                } else if travel + tail >= span {
                    if d > 0.0 {
                        (0.0, span - travel)
                    } else {
                        (travel, span)
                    }
                } else if d > 0.0 {
                    (tail, span - travel)
                } else {
                    (travel, span - tail)
                }
            };
            let (lo_r, hi_r) = axis_range(span.0, dir.0);
            let (lo_c, hi_c) = axis_range(span.1, dir.1);
            let start = (
                rng.gen_range(lo_r..=hi_r).round(),
                rng.gen_range(lo_c..=hi_c).round(),
            );
            Sprite {
                shape,
                size,
                color,
                start,
                velocity: (dir.0 * spec.delta, dir.1 * spec.delta),
            }
        })
        .collect();

    let frames = (0..k)
        .map(|t| {
            let mut data = vec![0.0f32; height * width * 3];
            for s in &sprites {
                if spec.trail > 0.0 && spec.delta > 0.0 {
                    let lag = spec.trail_spacing / spec.delta;
                    for back in (1..=spec.trail_length).rev() {
                        let at = s.position(t as f64 - back as f64 * lag, height, width);
                        s.draw(&mut data, width, at, spec.trail.powi(back as i32) as f32);
                    }
                }
                s.draw(&mut data, width, s.position(t as f64, height, width), 1.0);
            }
            Tensor::new(vec![height, width, 3], data).expect("frame buffer matches its shape")
        })
        .collect();
    Clip::new(
        frames,
        Some(label),
        ClipMeta {
            fps: 1.0,
            seed,
            class_rule: Some(spec.class_rule),
        },
    )
}

/// Every `(k+1)`-th frame, starting with the first.
pub fn stride_subsample(clip: &Clip, k: usize) -> Clip {
    Clip {
        frames: clip.frames.iter().step_by(k + 1).cloned().collect(),
        label: clip.label,
        meta: ClipMeta {
            fps: clip.meta.fps / (k + 1) as f64,
            ..clip.meta.clone()
        },
    }
}

/// Repeats frames cyclically to `target` frames.
pub fn torus_pad(clip: &Clip, target: usize) -> Clip {
    let target = target.max(1);
    Clip {
        frames: (0..target).map(|t| clip.frames[t % clip.len()].clone()).collect(),
        label: clip.label,
        meta: clip.meta.clone(),
    }
}

/// A clip of length `k_out` sampled with stride `k+1` from `source`, torus
/// padding the source first when it is shorter than `(k+1)·k_out`.
pub fn strided_clip(source: &Clip, k: usize, k_out: usize) -> Clip {
    let needed = (k + 1) * k_out;
    let padded = if source.len() < needed {
        torus_pad(source, needed)
    } else {
        source.clone()
    };
    let mut out = stride_subsample(&padded, k);
    out.frames.truncate(k_out);
    out
}

/// Mirrors every frame left to right. Direction labels swap left and right.
pub fn hflip(clip: &Clip) -> Clip {
    let frames = clip
        .frames
        .iter()
        .map(|f| {
            let (w, c) = (f.shape()[1], f.shape()[2]);
            let src = f.data();
            Tensor::from_fn(f.shape(), |idx| {
                let (r, rest) = (idx / (w * c), idx % (w * c));
                let (col, ch) = (rest / c, rest % c);
                src[(r * w + (w - 1 - col)) * c + ch]
            })
        })
        .collect();
    let label = match (clip.meta.class_rule, clip.label) {
        (Some(ClassRule::MotionDirection4way), Some(0)) => Some(1),
        (Some(ClassRule::MotionDirection4way), Some(1)) => Some(0),
        (_, l) => l,
    };
    Clip {
        frames,
        label,
        meta: clip.meta.clone(),
    }
}

/// A class-balanced set of clips: clip `n` has label `n mod classes`.
pub fn balanced_dataset(
    spec: &SpriteSceneSpec,
    n_clips: usize,
    k: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<Clip>> {
    let classes = spec.class_rule.num_classes();
    (0..n_clips)
        .map(|n| {
            generate_labeled_clip(
                spec,
                n % classes,
                k,
                height,
                width,
                seed.wrapping_mul(1_000_003).wrapping_add(n as u64),
            )
        })
        .collect()
}

pub fn encode_clip(clip: &Clip) -> Vec<u8> {
    let s = clip.frame_shape();
    let mut out = Vec::with_capacity(HEADER_LEN + clip.len() * clip.frames[0].len() * 4);
    out.extend_from_slice(CLIP_MAGIC);
    for d in [clip.len(), s[0], s[1], s[2]] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for f in &clip.frames {
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_clip(bytes: &[u8]) -> Result<Clip> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != CLIP_MAGIC {
            return Err(DataError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(DataError::TruncatedHeader(bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != CLIP_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let dims: [u32; 4] = std::array::from_fn(|i| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap())
    });
    if dims.contains(&0) {
        return Err(DataError::ZeroExtent(dims));
    }
    let frame_len = (dims[1] as usize)
        .checked_mul(dims[2] as usize)
        .and_then(|n| n.checked_mul(dims[3] as usize))
        .ok_or(DataError::ShapeOverflow(dims))?;
    let frame_bytes = frame_len.checked_mul(4).ok_or(DataError::ShapeOverflow(dims))?;
    let total = frame_bytes
        .checked_mul(dims[0] as usize)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(DataError::ShapeOverflow(dims))?;
    let payload = &bytes[HEADER_LEN..];
    if bytes.len() < total {
        let frame = payload.len() / frame_bytes + 1;
        return Err(DataError::Truncated {
            frame,
            expected: total,
            actual: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(DataError::TrailingBytes(bytes.len() - total));
    }
    let shape = vec![dims[1] as usize, dims[2] as usize, dims[3] as usize];
    let frames = payload
        .chunks_exact(frame_bytes)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Tensor::new(shape.clone(), data).expect("payload length checked")
        })
        .collect();
    Clip::new(frames, None, ClipMeta::default())
}

pub fn write_clip_file(path: impl AsRef<Path>, clip: &Clip) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_clip(clip))?;
    Ok(())
}

pub fn read_clip_file(path: impl AsRef<Path>) -> Result<Clip> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_clip(&bytes)
}
