//! Synthetic expression clips with known intensity curves and class regions.
//!
//! A clip of class `k` shows a class-specific texture inside class `k`'s
//! region, scaled frame by frame by an intensity curve that either rises from
//! neutral to peak (`Ramp`) or rises and falls back (`Bump`). Distractors are
//! static decoys: a class region showing its own texture at a constant
//! amplitude for the whole clip. Which regions get a decoy, and how strong it
//! is, come from a random stream that never sees the label, so a decoy can
//! even land on the true region. Only the true region changes over time.
//!
//! Randomness is counter based: sample `i` draws its curve and noise from
//! ChaCha stream `2i` and its distractors from stream `2i + 1`, so any sample
//! can be regenerated on its own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::ImageSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurveFamily {
    /// Neutral to peak; intensity is non-decreasing and ends at 1.
    #[default]
    Ramp,
    /// Neutral, peak somewhere in the middle, back to neutral.
    Bump,
}

impl CurveFamily {
    pub fn name(self) -> &'static str {
        match self {
            CurveFamily::Ramp => "ramp",
            CurveFamily::Bump => "bump",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(Self::Ramp),
            "bump" => Ok(Self::Bump),
            other => Err(Error::Config(format!("unknown curve family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub curve: CurveFamily,
    pub noise_sigma: f64,
    /// Side length of the square class regions.
    pub region_side: usize,
    /// Static decoys per clip, at most one per class region.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            frames: 16,
            rows: 16,
            cols: 16,
            curve: CurveFamily::Ramp,
            noise_sigma: 0.1,
            region_side: 4,
            distractors: 2,
            seed: 7,
        }
    }
}

const BACKGROUND: f64 = 0.1;
const TEXTURE_ON: f64 = 0.8;
const TEXTURE_OFF: f64 = 0.3;
/// Amplitude range of the static decoy patterns.
const DECOY_AMPLITUDE: std::ops::Range<f64> = 0.3..1.0;

impl SyntheticSpec {
    /// Pixels per class region.
    pub fn region_size(&self) -> usize {
        self.region_side * self.region_side
    }

    fn grid(&self) -> (usize, usize) {
        (self.rows / self.region_side, self.cols / self.region_side)
    }

    fn block_count(&self) -> usize {
        let (gr, gc) = self.grid();
        gr * gc
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("need at least two frames".into()));
        }
        if self.classes > u16::MAX as usize {
            return Err(Error::Config("too many classes".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if self.region_side == 0
            || self.region_side > self.rows
            || self.region_side > self.cols
        {
            return Err(Error::Config(format!(
                "region side {} does not fit a {}x{} frame",
                self.region_side, self.rows, self.cols
            )));
        }
        if self.classes > self.block_count() {
            return Err(Error::Config(format!(
                "{} classes need more than the {} available regions",
                self.classes,
                self.block_count()
            )));
        }
        if self.distractors > self.classes {
            return Err(Error::Config(format!(
                "at most one decoy per class region, got {} for {} classes",
                self.distractors, self.classes
            )));
        }
        Ok(())
    }

    /// Region block of class `k`; classes are spread evenly over the grid.
    pub fn class_block(&self, label: usize) -> usize {
        label * self.block_count() / self.classes
    }

    fn block_origin(&self, block: usize) -> (usize, usize) {
        let gc = self.grid().1;
        ((block / gc) * self.region_side, (block % gc) * self.region_side)
    }

    /// Binary `rows x cols` mask of class `label`'s region.
    pub fn region_mask(&self, label: usize) -> Vec<u8> {
        let mut mask = vec![0u8; self.rows * self.cols];
        let (r0, c0) = self.block_origin(self.class_block(label));
        for r in r0..r0 + self.region_side {
            for c in c0..c0 + self.region_side {
                mask[r * self.cols + c] = 1;
            }
        }
        mask
    }

    /// Texture of class `k` at offset `(y, x)` inside a region.
    fn texture(&self, k: usize, y: usize, x: usize) -> f64 {
        let on = match k % 4 {
            0 => y.is_multiple_of(2),
            1 => x.is_multiple_of(2),
            2 => (x + y).is_multiple_of(2),
            _ => (y / 2 + x / 2).is_multiple_of(2),
        };
        let flip = (k / 4) % 2 == 1;
        if on != flip {
            TEXTURE_ON
        } else {
            TEXTURE_OFF
        }
    }

    fn paint(&self, image: &mut [f64], block: usize, texture: usize, amplitude: f64) {
        let (r0, c0) = self.block_origin(block);
        for y in 0..self.region_side {
            for x in 0..self.region_side {
                image[(r0 + y) * self.cols + c0 + x] += amplitude * self.texture(texture, y, x);
            }
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One labelled clip with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub images: ImageSequence,
    pub label: usize,
    /// Per-frame expression intensity in `[0, 1]`, peak normalized to 1.
    pub intensity: Vec<f64>,
    /// `rows x cols` mask of the class region, entries 0 or 1.
    pub mask: Vec<u8>,
}

/// Draws an intensity curve of the given family with peak 1.
pub fn intensity_curve(family: CurveFamily, frames: usize, rng: &mut impl Rng) -> Vec<f64> {
    let last = (frames - 1) as f64;
    let raw: Vec<f64> = match family {
        CurveFamily::Ramp => {
            let onset = rng.random_range(0.0..last / 3.0);
            let gamma = rng.random_range(0.5..2.5);
            (0..frames)
                .map(|t| (((t as f64) - onset) / (last - onset)).clamp(0.0, 1.0).powf(gamma))
                .collect()
        }
        CurveFamily::Bump => {
            let peak = rng.random_range(0.3..0.7) * last;
            let width = rng.random_range(0.1..0.2) * frames as f64;
            (0..frames)
                .map(|t| (-((t as f64 - peak).powi(2)) / (2.0 * width * width)).exp())
                .collect()
        }
    };
    let max = raw.iter().copied().fold(0.0, f64::max);
    raw.into_iter().map(|v| v / max).collect()
}

/// Renders the frames of a clip for a given intensity curve.
///
/// `sample_index` selects the distractor and noise streams. With zero noise
/// and an all-zero curve every frame equals the clip's static background.
pub fn render_frames(
    spec: &SyntheticSpec,
    label: usize,
    intensity: &[f64],
    sample_index: u64,
    noise_rng: &mut impl Rng,
) -> Result<ImageSequence> {
    let mut background = vec![BACKGROUND; spec.rows * spec.cols];
    let mut distractor_rng = stream(spec.seed, 2 * sample_index + 1);
    let mut candidates: Vec<usize> = (0..spec.classes).collect();
    for _ in 0..spec.distractors {
        let owner = candidates.swap_remove(distractor_rng.random_range(0..candidates.len()));
        let amplitude = distractor_rng.random_range(DECOY_AMPLITUDE);
        spec.paint(&mut background, spec.class_block(owner), owner, amplitude);
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut pixels = Vec::with_capacity(spec.frames * spec.rows * spec.cols);
    for &level in intensity {
        let mut frame = background.clone();
        spec.paint(&mut frame, spec.class_block(label), label, level);
        for p in frame.iter_mut() {
            if spec.noise_sigma > 0.0 {
                *p += noise.sample(noise_rng);
            }
            *p = p.clamp(0.0, 1.0);
        }
        pixels.extend(frame);
    }
    ImageSequence::new(spec.frames, spec.rows, spec.cols, pixels)
}

/// Generates sample `sample_index` of class `label`.
pub fn make_sample(spec: &SyntheticSpec, label: usize, sample_index: u64) -> Result<SequenceSample> {
    spec.validate()?;
    if label >= spec.classes {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            spec.classes
        )));
    }
    let mut rng = stream(spec.seed, 2 * sample_index);
    let intensity = intensity_curve(spec.curve, spec.frames, &mut rng);
    let images = render_frames(spec, label, &intensity, sample_index, &mut rng)?;
    Ok(SequenceSample {
        images,
        label,
        intensity,
        mask: spec.region_mask(label),
    })
}

/// Dataset-level metadata written into the container header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetInfo {
    pub classes: usize,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub curve: CurveFamily,
    pub seed: u64,
}

impl From<&SyntheticSpec> for DatasetInfo {
    fn from(s: &SyntheticSpec) -> Self {
        Self {
            classes: s.classes,
            frames: s.frames,
            rows: s.rows,
            cols: s.cols,
            curve: s.curve,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub samples: Vec<SequenceSample>,
}

/// Indices of the training and validation samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    /// Stratified 80/20 split: within each class, the first 80% of its samples
    /// (in file order) train and the rest validate. Every class with at least
    /// two samples contributes to both sides.
    pub fn split(&self) -> Split {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for k in 0..self.info.classes {
            let members: Vec<usize> = self
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == k)
                .map(|(i, _)| i)
                .collect();
            let mut n_train = members.len() * 4 / 5;
            if members.len() >= 2 {
                n_train = n_train.clamp(1, members.len() - 1);
            }
            train.extend_from_slice(&members[..n_train]);
            val.extend_from_slice(&members[n_train..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        Split { train, val }
    }
}

/// `per_class` clips of every class, interleaved by class.
pub fn make_dataset(spec: &SyntheticSpec, per_class: usize) -> Result<Dataset> {
    spec.validate()?;
    if per_class < 2 {
        return Err(Error::Config(format!(
            "need at least two samples per class, got {per_class}"
        )));
    }
    let mut samples = Vec::with_capacity(per_class * spec.classes);
    for i in 0..per_class {
        for k in 0..spec.classes {
            let index = (i * spec.classes + k) as u64;
            samples.push(make_sample(spec, k, index)?);
        }
    }
    Ok(Dataset {
        info: spec.into(),
        samples,
    })
}
