//! Small two-stage CNN that turns each grayscale frame into a feature vector.
//!
//! Each stage is a 3x3 "same" convolution, leaky relu and 2x2 average pooling.
//! The pooled activations are flattened and projected to `d` dimensions.
//! Frames are encoded independently with shared weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::DEFAULT_SLOPE;
use crate::init::he_normal;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `N` grayscale frames of `rows x cols` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    frames: usize,
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
}

impl ImageSequence {
    pub fn new(frames: usize, rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if frames == 0 || rows == 0 || cols == 0 {
            return Err(Error::shape(
                "image_sequence",
                format!("empty sequence {frames}x{rows}x{cols}"),
            ));
        }
        if pixels.len() != frames * rows * cols {
            return Err(Error::shape(
                "image_sequence",
                format!(
                    "{frames} frames of {rows}x{cols} need {} pixels, got {}",
                    frames * rows * cols,
                    pixels.len()
                ),
            ));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            rows,
            cols,
            pixels,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let len = self.rows * self.cols;
        &self.pixels[t * len..(t + 1) * len]
    }

    /// `[frames, 1, rows, cols]` tensor for the convolution stages.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames, 1, self.rows, self.cols], self.pixels.clone())
            .expect("validated in constructor")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub rows: usize,
    pub cols: usize,
    pub channels: [usize; 2],
    pub kernel: usize,
    pub dim: usize,
}

impl EncoderConfig {
    pub fn new(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            channels: [4, 8],
            kernel: 3,
            dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rows.is_multiple_of(4) || !self.cols.is_multiple_of(4) || self.rows == 0 || self.cols == 0 {
            return Err(Error::shape(
                "encoder",
                format!(
                    "frame size {}x{} must be a positive multiple of 4",
                    self.rows, self.cols
                ),
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if self.dim == 0 || self.channels.contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size after both pooling stages.
    pub fn pooled(&self) -> (usize, usize) {
        (self.rows / 4, self.cols / 4)
    }

    pub fn flat_len(&self) -> usize {
        let (h, w) = self.pooled();
        self.channels[1] * h * w
    }
}

/// Extra scale on the He-initialized projection. At plain He scale the
/// features of `[0, 1]` frames start around 0.05 RMS, too small to move the
/// sigmoid recurrent cells away from their state-driven fixed point.
pub const PROJECTION_GAIN: f64 = 10.0;

/// Parameter handles of the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvEncoderParams {
    pub config: EncoderConfig,
    pub conv1_kernel: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_kernel: ParamId,
    pub conv2_bias: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
}

impl ConvEncoderParams {
    pub fn init(store: &mut ParamStore, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let [c1, c2] = config.channels;
        let conv1_kernel = store.add("encoder.conv1.kernel", he_normal(&[c1, 1, k, k], k * k, rng));
        let conv1_bias = store.add("encoder.conv1.bias", Tensor::zeros(&[1, c1]));
        let conv2_kernel = store.add(
            "encoder.conv2.kernel",
            he_normal(&[c2, c1, k, k], c1 * k * k, rng),
        );
        let conv2_bias = store.add("encoder.conv2.bias", Tensor::zeros(&[1, c2]));
        let flat = config.flat_len();
        let mut pw = he_normal(&[flat, config.dim], flat, rng);
        pw.data_mut().iter_mut().for_each(|v| *v *= PROJECTION_GAIN);
        let proj_weight = store.add("encoder.proj.weight", pw);
        let proj_bias = store.add("encoder.proj.bias", Tensor::zeros(&[1, config.dim]));
        Ok(Self {
            config,
            conv1_kernel,
            conv1_bias,
            conv2_kernel,
            conv2_bias,
            proj_weight,
            proj_bias,
        })
    }

    pub fn bind(&self, vars: &[Var]) -> EncoderVars {
        EncoderVars {
            config: self.config,
            conv1_kernel: vars[self.conv1_kernel.index()],
            conv1_bias: vars[self.conv1_bias.index()],
            conv2_kernel: vars[self.conv2_kernel.index()],
            conv2_bias: vars[self.conv2_bias.index()],
            proj_weight: vars[self.proj_weight.index()],
            proj_bias: vars[self.proj_bias.index()],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub config: EncoderConfig,
    pub conv1_kernel: Var,
    pub conv1_bias: Var,
    pub conv2_kernel: Var,
    pub conv2_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
}

/// Encoder output plus the pooled second-stage activations
/// (`[N, c2, rows/4, cols/4]`).
#[derive(Debug, Clone, Copy)]
pub struct EncoderTrace {
    pub features: Var,
    pub spatial: Var,
}

/// Encodes a `[N, 1, rows, cols]` image tensor into `N x d` features.
pub fn encode_sequence(tape: &mut Tape, images: Var, p: &EncoderVars) -> Result<EncoderTrace> {
    let shape = tape.shape(images).to_vec();
    let cfg = p.config;
    let &[n, 1, rows, cols] = shape.as_slice() else {
        return Err(Error::shape(
            "encode_sequence",
            format!("expected [frames, 1, rows, cols], got {shape:?}"),
        ));
    };
    if rows != cfg.rows || cols != cfg.cols {
        return Err(Error::shape(
            "encode_sequence",
            format!(
                "encoder built for {}x{} frames, got {rows}x{cols}",
                cfg.rows, cfg.cols
            ),
        ));
    }
    let x = tape.conv2d(images, p.conv1_kernel, p.conv1_bias)?;
    let x = tape.leaky_relu(x, DEFAULT_SLOPE)?;
    let x = tape.mean_pool2(x)?;
    let x = tape.conv2d(x, p.conv2_kernel, p.conv2_bias)?;
    let x = tape.leaky_relu(x, DEFAULT_SLOPE)?;
    let spatial = tape.mean_pool2(x)?;
    let flat = tape.reshape(spatial, &[n, cfg.flat_len()])?;
    let projected = tape.matmul(flat, p.proj_weight)?;
    let biased = tape.add_row_vector(projected, p.proj_bias)?;
    let features = tape.leaky_relu(biased, DEFAULT_SLOPE)?;
    Ok(EncoderTrace { features, spatial })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(rows: usize, cols: usize, d: usize) -> (ParamStore, ConvEncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ConvEncoderParams::init(&mut store, EncoderConfig::new(rows, cols, d), &mut rng)
            .unwrap();
        (store, p)
    }

    fn encode(store: &ParamStore, p: &ConvEncoderParams, images: &ImageSequence) -> Tensor {
        let mut t = Tape::new();
        let vars = store.bind(&mut t).unwrap();
        let x = t.leaf(images.to_tensor()).unwrap();
        let tr = encode_sequence(&mut t, x, &p.bind(&vars)).unwrap();
        t.value(tr.features).clone()
    }

    #[test]
    fn sixteen_frames_give_sixteen_vectors() {
        let (store, p) = setup(8, 8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pixels = (0..16 * 64).map(|_| rng.random::<f64>()).collect();
        let seq = ImageSequence::new(16, 8, 8, pixels).unwrap();
        let f = encode(&store, &p, &seq);
        assert_eq!(f.shape(), &[16, 12]);
    }

    #[test]
    fn output_is_n_by_d_for_any_resolution() {
        for (r, c) in [(4, 4), (8, 12), (16, 16), (20, 8)] {
            let (store, p) = setup(r, c, 6);
            let seq = ImageSequence::new(3, r, c, vec![0.5; 3 * r * c]).unwrap();
            assert_eq!(encode(&store, &p, &seq).shape(), &[3, 6]);
        }
    }

    #[test]
    fn zero_frames_give_zero_features() {
        let (store, p) = setup(8, 8, 6);
        let seq = ImageSequence::new(4, 8, 8, vec![0.0; 4 * 64]).unwrap();
        assert!(encode(&store, &p, &seq).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_frames_give_identical_features() {
        let (store, p) = setup(8, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let other: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let pixels = [frame.clone(), other, frame].concat();
        let seq = ImageSequence::new(3, 8, 8, pixels).unwrap();
        let f = encode(&store, &p, &seq);
        assert_eq!(f.row(0), f.row(2));
        assert_ne!(f.row(0), f.row(1));
        assert_eq!(f, encode(&store, &p, &seq));
    }

    #[test]
    fn incompatible_dimensions_are_shape_errors() {
        assert!(matches!(
            EncoderConfig::new(6, 8, 4).validate(),
            Err(Error::Shape { .. })
        ));
        let (store, p) = setup(8, 8, 4);
        let seq = ImageSequence::new(1, 12, 12, vec![0.0; 144]).unwrap();
        let mut t = Tape::new();
        let vars = store.bind(&mut t).unwrap();
        let x = t.leaf(seq.to_tensor()).unwrap();
        assert!(matches!(
            encode_sequence(&mut t, x, &p.bind(&vars)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn pixels_must_lie_in_unit_interval() {
        assert!(ImageSequence::new(1, 1, 2, vec![0.0, 1.5]).is_err());
        assert!(ImageSequence::new(1, 1, 2, vec![0.0, 1.0]).is_ok());
    }
}
