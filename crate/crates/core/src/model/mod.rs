//! Small differentiable model: an MLP feature extractor `f`, a linear leaf
//! classifier `g`, and optional per-level heads for the per-level-classifier
//! baseline. Gradients are analytic; all reductions run in a fixed order.

mod adam;
mod checkpoint;
mod schedule;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorShape};
pub use schedule::LrSchedule;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `max(0, x)`; the subgradient at 0 is taken as 0.
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine map `y = x W^T + b`, `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn uniform(inputs: usize, outputs: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Widths of the extractor layers; the last one is the embedding width.
    pub extractor_widths: Vec<usize>,
    pub num_classes: usize,
    /// Widths of extra per-level heads (empty unless training the
    /// per-level-classifier baseline).
    #[serde(default)]
    pub head_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, extractor_widths: &[usize], num_classes: usize) -> Self {
        Self {
            input_dim,
            extractor_widths: extractor_widths.to_vec(),
            num_classes,
            head_widths: Vec::new(),
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub extractor: Vec<Linear>,
    pub classifier: Linear,
    pub heads: Vec<Linear>,
    pub activation: Activation,
    extractor_frozen: bool,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub embedding: Array2<f64>,
    pub logits: Array2<f64>,
    pub head_logits: Vec<Array2<f64>>,
}

/// Forward pass with the intermediates backpropagation needs.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each extractor layer (index 0 is the batch itself).
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    pub output: Forward,
}

impl Trace {
    pub fn embedding(&self) -> &Array2<f64> {
        &self.output.embedding
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.output.logits
    }
}

/// Upstream gradients fed to [`ModelBundle::backward`]. Absent parts count
/// as zero; present parts are summed.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub d_embedding: Option<Array2<f64>>,
    pub d_logits: Option<Array2<f64>>,
    pub d_heads: Vec<Option<Array2<f64>>>,
}

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub extractor: Vec<Linear>,
    pub classifier: Linear,
    pub heads: Vec<Linear>,
}

impl GradBundle {
    pub fn zeros_like(model: &ModelBundle) -> Self {
        let z = |l: &Linear| Linear::zeros(l.inputs(), l.outputs());
        Self {
            extractor: model.extractor.iter().map(z).collect(),
            classifier: z(&model.classifier),
            heads: model.heads.iter().map(z).collect(),
        }
    }

    /// Flat views in the canonical tensor order (see [`ModelBundle::tensors`]).
    pub fn tensors(&self) -> Vec<&[f64]> {
        linear_views(&self.extractor, &self.classifier, &self.heads)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

fn linear_views<'a>(extractor: &'a [Linear], classifier: &'a Linear, heads: &'a [Linear]) -> Vec<&'a [f64]> {
    extractor
        .iter()
        .chain(std::iter::once(classifier))
        .chain(heads)
        .flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

impl ModelBundle {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 || spec.extractor_widths.is_empty() || spec.num_classes == 0 {
            return Err(Error::Config(format!("degenerate model spec {spec:?}")));
        }
        if spec.extractor_widths.contains(&0) || spec.head_widths.contains(&0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = match spec.activation {
            Activation::Relu => 6.0,
            Activation::Identity => 3.0,
        };
        let mut fan_in = spec.input_dim;
        let mut extractor = Vec::with_capacity(spec.extractor_widths.len());
        for &width in &spec.extractor_widths {
            extractor.push(Linear::uniform(fan_in, width, (gain / fan_in as f64).sqrt(), &mut rng));
            fan_in = width;
        }
        let bound = (3.0 / fan_in as f64).sqrt();
        let classifier = Linear::uniform(fan_in, spec.num_classes, bound, &mut rng);
        let heads = spec
            .head_widths
            .iter()
            .map(|&w| Linear::uniform(fan_in, w, bound, &mut rng))
            .collect();
        Ok(Self {
            extractor,
            classifier,
            heads,
            activation: spec.activation,
            extractor_frozen: false,
        })
    }

    /// Assembles a model from explicit layers, checking that shapes chain.
    pub fn from_layers(extractor: Vec<Linear>, classifier: Linear, heads: Vec<Linear>, activation: Activation) -> Result<Self> {
        let model = Self {
            extractor,
            classifier,
            heads,
            activation,
            extractor_frozen: false,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        if self.extractor.is_empty() {
            return Err(Error::Shape("extractor needs at least one layer".into()));
        }
        for (i, pair) in self.extractor.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "extractor layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        let e = self.embedding_dim();
        for (name, l) in std::iter::once(("classifier", &self.classifier)).chain(self.heads.iter().map(|h| ("head", h))) {
            if l.inputs() != e {
                return Err(Error::Shape(format!("{name} expects {} inputs, embedding is {e}", l.inputs())));
            }
        }
        for l in self.extractor.iter().chain(std::iter::once(&self.classifier)).chain(&self.heads) {
            if l.bias.len() != l.outputs() {
                return Err(Error::Shape("bias length does not match weight rows".into()));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.input_dim(),
            extractor_widths: self.extractor.iter().map(Linear::outputs).collect(),
            num_classes: self.num_classes(),
            head_widths: self.heads.iter().map(Linear::outputs).collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].inputs()
    }

    pub fn embedding_dim(&self) -> usize {
        self.extractor.last().expect("non-empty extractor").outputs()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.outputs()
    }

    /// Marks the extractor as frozen: backward emits zero extractor
    /// gradients and the optimizer leaves those parameters untouched.
    pub fn freeze_extractor(&mut self) {
        self.extractor_frozen = true;
    }

    pub fn unfreeze_extractor(&mut self) {
        self.extractor_frozen = false;
    }

    pub fn extractor_frozen(&self) -> bool {
        self.extractor_frozen
    }

    /// Flat parameter views: each extractor layer (weight, bias), then the
    /// classifier, then the heads.
    pub fn tensors(&self) -> Vec<&[f64]> {
        linear_views(&self.extractor, &self.classifier, &self.heads)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .chain(self.heads.iter_mut())
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// One flag per tensor in canonical order.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let extractor = 2 * self.extractor.len();
        let total = extractor + 2 + 2 * self.heads.len();
        (0..total).map(|i| !(self.extractor_frozen && i < extractor)).collect()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        Ok(self.trace(x)?.output)
    }

    pub fn trace(&self, x: ArrayView2<'_, f64>) -> Result<Trace> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has width {}, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.extractor.len());
        let mut pre_activations = Vec::with_capacity(self.extractor.len());
        let mut a = x.to_owned();
        for layer in &self.extractor {
            let h = layer.apply(a.view());
            let next = h.mapv(|v| self.activation.apply(v));
            inputs.push(a);
            pre_activations.push(h);
            a = next;
        }
        let logits = self.classifier.apply(a.view());
        let head_logits = self.heads.iter().map(|h| h.apply(a.view())).collect();
        Ok(Trace {
            inputs,
            pre_activations,
            output: Forward {
                embedding: a,
                logits,
                head_logits,
            },
        })
    }

    /// Backpropagates upstream gradients through a recorded trace.
    pub fn backward(&self, trace: &Trace, grads: &OutputGrads) -> Result<GradBundle> {
        let out = &trace.output;
        let check = |name: &str, g: &Array2<f64>, target: &Array2<f64>| -> Result<()> {
            if g.dim() != target.dim() {
                return Err(Error::Shape(format!(
                    "{name} gradient is {:?}, output is {:?}",
                    g.dim(),
                    target.dim()
                )));
            }
            Ok(())
        };
        if grads.d_heads.len() > self.heads.len() {
            return Err(Error::Shape(format!(
                "{} head gradients for {} heads",
                grads.d_heads.len(),
                self.heads.len()
            )));
        }

        let mut result = GradBundle::zeros_like(self);
        let mut d_embed = Array2::<f64>::zeros(out.embedding.dim());
        if let Some(dv) = &grads.d_embedding {
            check("embedding", dv, &out.embedding)?;
            d_embed += dv;
        }
        if let Some(dz) = &grads.d_logits {
            check("logit", dz, &out.logits)?;
            result.classifier.weight = dz.t().dot(&out.embedding);
            result.classifier.bias = dz.sum_axis(Axis(0));
            d_embed += &dz.dot(&self.classifier.weight);
        }
        for (m, dz) in grads.d_heads.iter().enumerate() {
            if let Some(dz) = dz {
                check("head", dz, &out.head_logits[m])?;
                result.heads[m].weight = dz.t().dot(&out.embedding);
                result.heads[m].bias = dz.sum_axis(Axis(0));
                d_embed += &dz.dot(&self.heads[m].weight);
            }
        }
        if self.extractor_frozen {
            return Ok(result);
        }
        let mut upstream = d_embed;
        for l in (0..self.extractor.len()).rev() {
            let pre = &trace.pre_activations[l];
            let act = self.activation;
            let dh = ndarray::Zip::from(&upstream)
                .and(pre)
                .map_collect(|&g, &h| g * act.derivative(h));
            result.extractor[l].weight = dh.t().dot(&trace.inputs[l]);
            result.extractor[l].bias = dh.sum_axis(Axis(0));
            if l > 0 {
                upstream = dh.dot(&self.extractor[l].weight);
            }
        }
        Ok(result)
    }

    /// Convenience: forward then backward on the same batch.
    pub fn backward_from_input(&self, x: ArrayView2<'_, f64>, grads: &OutputGrads) -> Result<GradBundle> {
        let trace = self.trace(x)?;
        self.backward(&trace, grads)
    }
}
