//! The full pipeline: encoder, stacked graph modules sharing one adjacency
//! matrix, adjacency-derived frame weights, weighted fusion and classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode_sequence, ConvEncoderParams, EncoderConfig, ImageSequence};
use crate::error::{Error, Result};
use crate::fusion::{
    classify, intensity_weights, intensity_weights_of, weighted_fusion, ClassifierParams,
    IntensityWeights, MeanAxis,
};
use crate::graph::{stacked_forward, AdjacencyMatrix, GraphModuleParams, RecurrentCell};
use crate::params::ParamStore;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const MAX_MODULES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    /// Number of stacked graph modules. Zero gives the encoder + mean pooling
    /// + classifier baseline.
    pub module_count: usize,
    pub weighted_fusion: bool,
    pub mean_axis: MeanAxis,
    pub cell: RecurrentCell,
    pub channels: [usize; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            dim: 32,
            classes: 6,
            rows: 16,
            cols: 16,
            module_count: 2,
            weighted_fusion: true,
            mean_axis: MeanAxis::Column,
            cell: RecurrentCell::Gateless,
            channels: [4, 8],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("frame count must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least two classes, got {}",
                self.classes
            )));
        }
        if self.module_count > MAX_MODULES {
            return Err(Error::Config(format!(
                "module count must be at most {MAX_MODULES}, got {}",
                self.module_count
            )));
        }
        if self.dim == 0 || (self.module_count > 0 && !self.dim.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "feature dimension must be positive and even, got {}",
                self.dim
            )));
        }
        self.encoder().validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels,
            ..EncoderConfig::new(self.rows, self.cols, self.dim)
        }
    }
}

/// Forward-pass handles. Intermediates are kept for heatmaps and diagnostics.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub weights: Var,
    pub encoded: Var,
    pub spatial: Var,
    pub module_outputs: Vec<Var>,
    pub fused: Var,
}

impl ForwardOutput {
    /// Frame features entering the fusion step.
    pub fn final_features(&self) -> Var {
        *self.module_outputs.last().unwrap_or(&self.encoded)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: ConvEncoderParams,
    adjacency: AdjacencyMatrix,
    modules: Vec<GraphModuleParams>,
    classifier: crate::fusion::ClassifierParams,
}

impl Model {
    /// Seeded initialization. `A` starts as the identity.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = ConvEncoderParams::init(&mut store, config.encoder(), &mut rng)?;
        let adjacency = AdjacencyMatrix::identity(&mut store, config.frames);
        let modules = (0..config.module_count)
            .map(|k| {
                GraphModuleParams::init(&mut store, &format!("module{k}"), config.dim, config.cell, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = ClassifierParams::init(&mut store, config.classes, config.dim, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            adjacency,
            modules,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn adjacency(&self) -> &Tensor {
        self.store.get(self.adjacency.id)
    }

    pub fn adjacency_handle(&self) -> AdjacencyMatrix {
        self.adjacency
    }

    pub fn encoder_params(&self) -> &ConvEncoderParams {
        &self.encoder
    }

    pub fn modules(&self) -> &[GraphModuleParams] {
        &self.modules
    }

    /// Number of graph modules reading the shared adjacency matrix.
    pub fn adjacency_refcount(&self) -> usize {
        self.modules.len()
    }

    pub fn intensity_weights(&self) -> Result<IntensityWeights> {
        intensity_weights_of(self.adjacency(), self.config.mean_axis)
    }

    fn check_images(&self, images: &ImageSequence) -> Result<()> {
        let c = &self.config;
        if images.frames() != c.frames || images.rows() != c.rows || images.cols() != c.cols {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "model expects {}x{}x{} clips, got {}x{}x{}",
                    c.frames,
                    c.rows,
                    c.cols,
                    images.frames(),
                    images.rows(),
                    images.cols()
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass with parameters already on the tape (`vars` indexed by
    /// parameter id) and an `[N, 1, rows, cols]` image tensor.
    pub fn forward_bound(&self, tape: &mut Tape, vars: &[Var], images: Var) -> Result<ForwardOutput> {
        self.forward_with_weights(tape, vars, images, None)
    }

    /// [`Model::forward_bound`] with the fusion weights optionally replaced by
    /// a constant `1 x N` row. Gradient checks use this to hold the weights
    /// fixed while perturbing `A`.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        images: Var,
        fixed_weights: Option<&Tensor>,
    ) -> Result<ForwardOutput> {
        let trace = encode_sequence(tape, images, &self.encoder.bind(vars))?;
        let a = vars[self.adjacency.id.index()];
        let modules: Vec<_> = self.modules.iter().map(|m| m.bind(vars)).collect();
        let module_outputs = stacked_forward(tape, trace.features, a, &modules)?;
        let features = *module_outputs.last().unwrap_or(&trace.features);
        let weights = if let Some(w) = fixed_weights {
            tape.leaf(w.clone())?
        } else if self.config.weighted_fusion {
            intensity_weights(tape, a, self.config.mean_axis)?
        } else {
            tape.leaf(Tensor::filled(&[1, self.config.frames], 1.0 / self.config.frames as f64))?
        };
        let fused = weighted_fusion(tape, features, weights)?;
        let logits = classify(tape, fused, &self.classifier.bind(vars))?;
        Ok(ForwardOutput {
            logits,
            weights,
            encoded: trace.features,
            spatial: trace.spatial,
            module_outputs,
            fused,
        })
    }

    pub fn forward(&self, tape: &mut Tape, images: &ImageSequence) -> Result<ForwardOutput> {
        self.check_images(images)?;
        let vars = self.store.bind(tape)?;
        let x = tape.leaf(images.to_tensor())?;
        self.forward_bound(tape, &vars, x)
    }

    /// Cross-entropy loss, gradients of every parameter and the logits for one clip.
    pub fn sample_gradients(&self, images: &ImageSequence, label: usize) -> Result<SampleResult> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images)?;
        let loss = tape.cross_entropy(out.logits, label)?;
        let grads = tape.backward(loss)?;
        Ok(SampleResult {
            loss: tape.value(loss).data()[0],
            logits: tape.value(out.logits).data().to_vec(),
            grads,
        })
    }

    /// Logits for one clip, without recording gradients for later use.
    pub fn logits(&self, images: &ImageSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    /// Replaces every parameter value with the same-named tensor in `other`.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model has {}",
                other.len(),
                self.store.len()
            )));
        }
        for (_, name, tensor) in other.iter() {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            self.store.assign(id, tensor.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SampleResult {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Gradients,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
