//! Small feed-forward network with block-sparse hidden weights, manual
//! backpropagation, and the synthetic teacher-student regression task.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::tensor::{
    dense_weight_grad, random_mask, sparse_weight_grad, spmm_backward_input, spmm_forward,
    BlockSparseMatrix, DenseMatrix, Shape, SparsityMask,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            // exact Gaussian CDF formulation: x * Phi(x)
            Activation::Gelu => z * 0.5 * (1.0 + erf(z / SQRT_2)),
        }
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let phi = 0.5 * (1.0 + erf(z / SQRT_2));
                let pdf = INV_SQRT_2PI * (-0.5 * z * z).exp();
                phi + z * pdf
            }
        }
    }
}

/// Architecture description. Layer l maps `layer_widths[l]` inputs to
/// `layer_widths[l + 1]` outputs; indices in `sparse_layers` carry
/// block-sparse weights, everything else stays dense (the analogue of
/// embeddings being excluded from sparsification).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer_widths: Vec<usize>,
    pub sparse_layers: BTreeSet<usize>,
    pub activation: Activation,
    pub init_std: f64,
    pub block_size: usize,
}

impl ModelConfig {
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len().saturating_sub(1)
    }

    pub fn layer_shape(&self, layer: usize) -> Shape {
        Shape {
            rows: self.layer_widths[layer + 1],
            cols: self.layer_widths[layer],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least input and output widths".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::InvalidArgument("init_std must be > 0".into()));
        }
        let n = self.num_layers();
        for &l in &self.sparse_layers {
            if l >= n {
                return Err(Error::UnknownLayer(l));
            }
            let shape = self.layer_shape(l);
            shape.block_grid(self.block_size)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Dense(DenseMatrix),
    Sparse(BlockSparseMatrix),
}

impl LayerWeights {
    pub fn shape(&self) -> Shape {
        match self {
            LayerWeights::Dense(d) => d.shape,
            LayerWeights::Sparse(s) => s.mask.shape,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            LayerWeights::Dense(d) => &d.values,
            LayerWeights::Sparse(s) => &s.values,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            LayerWeights::Dense(d) => &mut d.values,
            LayerWeights::Sparse(s) => &mut s.values,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: LayerWeights,
    pub bias: Vec<f64>,
    /// Layer-level trainability switch for the freeze ablations.
    pub trainable: bool,
    /// Optional per-entry freeze mask aligned with the weight value array.
    /// Frozen entries are skipped entirely by the optimizer.
    pub frozen: Option<Vec<bool>>,
}

impl Layer {
    pub fn mask(&self) -> Option<&SparsityMask> {
        match &self.weights {
            LayerWeights::Sparse(s) => Some(&s.mask),
            LayerWeights::Dense(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

impl Model {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn sparse_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.weights, LayerWeights::Sparse(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Achieved sparsity per layer (None for dense layers).
    pub fn achieved_sparsity(&self) -> Vec<Option<f64>> {
        self.layers
            .iter()
            .map(|l| l.mask().map(|m| m.sparsity()))
            .collect()
    }

    /// Per-entry freeze mask for `layer`, allocating it if absent.
    pub fn frozen_mut(&mut self, layer: usize) -> &mut Vec<bool> {
        let n = self.layers[layer].weights.values().len();
        self.layers[layer]
            .frozen
            .get_or_insert_with(|| vec![false; n])
    }

    pub fn clear_frozen(&mut self) {
        for l in &mut self.layers {
            l.frozen = None;
        }
    }
}

/// Draw from N(0, std^2) truncated at +/- 2 std, by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Build a model with truncated-normal weights and zero biases; layers in
/// `config.sparse_layers` get a fresh random mask at the requested sparsity
/// and only their active values are ever sampled.
pub fn init_model<R: Rng + ?Sized>(config: &ModelConfig, sparsity: f64, rng: &mut R) -> Result<Model> {
    config.validate()?;
    let mut layers = Vec::with_capacity(config.num_layers());
    for l in 0..config.num_layers() {
        let shape = config.layer_shape(l);
        let sparse = sparsity > 0.0 && config.sparse_layers.contains(&l);
        let weights = if sparse {
            let mask = random_mask(shape, config.block_size, sparsity, rng)?;
            let mut w = BlockSparseMatrix::zeros(mask);
            for v in &mut w.values {
                *v = truncated_normal(rng, config.init_std);
            }
            LayerWeights::Sparse(w)
        } else {
            let values = (0..shape.len())
                .map(|_| truncated_normal(rng, config.init_std))
                .collect();
            LayerWeights::Dense(DenseMatrix::from_values(shape, values)?)
        };
        layers.push(Layer {
            weights,
            bias: vec![0.0; shape.rows],
            trainable: true,
            frozen: None,
        });
    }
    Ok(Model {
        config: config.clone(),
        layers,
    })
}

/// Activation record kept by the forward pass for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (post-activation of the previous one).
    pub inputs: Vec<DenseMatrix>,
    /// Pre-activation output of each layer.
    pub preacts: Vec<DenseMatrix>,
}

fn layer_forward(layer: &Layer, x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut z = match &layer.weights {
        LayerWeights::Sparse(w) => spmm_forward(w, x)?,
        LayerWeights::Dense(w) => {
            let (o, i_dim, batch) = (w.shape.rows, w.shape.cols, x.shape.rows);
            let mut y = DenseMatrix::zeros(Shape { rows: batch, cols: o });
            for b in 0..batch {
                for i in 0..o {
                    let mut acc = 0.0;
                    for j in 0..i_dim {
                        acc += w.values[i * i_dim + j] * x.values[b * i_dim + j];
                    }
                    y.values[b * o + i] = acc;
                }
            }
            y
        }
    };
    let o = z.shape.cols;
    for b in 0..z.shape.rows {
        for i in 0..o {
            z.values[b * o + i] += layer.bias[i];
        }
    }
    Ok(z)
}

/// Affine + activation composition; the output layer is linear.
pub fn forward(model: &Model, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
    if x.shape.cols != model.config.layer_widths[0] {
        return Err(Error::DimensionMismatch(format!(
            "input cols {} vs model input width {}",
            x.shape.cols, model.config.layer_widths[0]
        )));
    }
    let n = model.num_layers();
    let mut inputs = Vec::with_capacity(n);
    let mut preacts = Vec::with_capacity(n);
    let mut a = x.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        let z = layer_forward(layer, &a)?;
        inputs.push(a);
        let next = if l + 1 < n {
            let mut act = z.clone();
            for v in &mut act.values {
                *v = model.config.activation.apply(*v);
            }
            act
        } else {
            z.clone()
        };
        preacts.push(z);
        a = next;
    }
    Ok((a, ForwardCache { inputs, preacts }))
}

/// Prediction without keeping the activation record.
pub fn predict(model: &Model, x: &DenseMatrix) -> Result<DenseMatrix> {
    forward(model, x).map(|(y, _)| y)
}

#[derive(Debug, Clone)]
pub enum WeightGrad {
    Dense(DenseMatrix),
    Sparse(BlockSparseMatrix),
}

impl WeightGrad {
    pub fn values(&self) -> &[f64] {
        match self {
            WeightGrad::Dense(d) => &d.values,
            WeightGrad::Sparse(s) => &s.values,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            WeightGrad::Dense(d) => &mut d.values,
            WeightGrad::Sparse(s) => &mut s.values,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: WeightGrad,
    pub bias: Vec<f64>,
    /// Full dense weight gradient, populated for sparse layers only on
    /// request (gradient-based re-allocation; breaks the always-sparse
    /// property and is flagged in run logs).
    pub dense_weights: Option<DenseMatrix>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
}

/// Mean-squared-error loss and backprop gradients.
///
/// Sparse layers produce mask-restricted weight gradients via the sparse
/// outer product; `need_dense_grads` additionally materializes their dense
/// gradients for RigL-style re-allocation.
pub fn loss_and_grads(
    model: &Model,
    x: &DenseMatrix,
    targets: &DenseMatrix,
    need_dense_grads: bool,
) -> Result<(f64, Grads)> {
    if x.shape.rows == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if targets.shape.rows != x.shape.rows
        || targets.shape.cols != *model.config.layer_widths.last().unwrap()
    {
        return Err(Error::DimensionMismatch(format!(
            "targets {}x{} vs batch {} and output width {}",
            targets.shape.rows,
            targets.shape.cols,
            x.shape.rows,
            model.config.layer_widths.last().unwrap()
        )));
    }

    let (pred, cache) = forward(model, x)?;
    let batch = x.shape.rows;
    let out_dim = targets.shape.cols;
    let denom = (batch * out_dim) as f64;

    let mut loss = 0.0;
    let mut dz = DenseMatrix::zeros(pred.shape);
    for idx in 0..pred.values.len() {
        let e = pred.values[idx] - targets.values[idx];
        loss += e * e;
        dz.values[idx] = 2.0 * e / denom;
    }
    loss /= denom;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("loss = {loss}")));
    }

    let n = model.num_layers();
    let mut layer_grads: Vec<Option<LayerGrads>> = (0..n).map(|_| None).collect();
    for l in (0..n).rev() {
        let a_in = &cache.inputs[l];
        let o = dz.shape.cols;
        let mut bias = vec![0.0; o];
        for b in 0..batch {
            for i in 0..o {
                bias[i] += dz.values[b * o + i];
            }
        }
        let layer = &model.layers[l];
        let (wgrad, dense_opt) = match &layer.weights {
            LayerWeights::Sparse(w) => {
                let g = sparse_weight_grad(a_in, &dz, &w.mask)?;
                let dense = if need_dense_grads {
                    Some(dense_weight_grad(a_in, &dz)?)
                } else {
                    None
                };
                (WeightGrad::Sparse(g), dense)
            }
            LayerWeights::Dense(_) => (WeightGrad::Dense(dense_weight_grad(a_in, &dz)?), None),
        };
        layer_grads[l] = Some(LayerGrads {
            weights: wgrad,
            bias,
            dense_weights: dense_opt,
        });

        if l > 0 {
            let mut da = match &layer.weights {
                LayerWeights::Sparse(w) => spmm_backward_input(w, &dz)?,
                LayerWeights::Dense(w) => {
                    let (o, i_dim) = (w.shape.rows, w.shape.cols);
                    let mut dx = DenseMatrix::zeros(Shape {
                        rows: batch,
                        cols: i_dim,
                    });
                    for b in 0..batch {
                        for i in 0..o {
                            let g = dz.values[b * o + i];
                            if g == 0.0 {
                                continue;
                            }
                            for j in 0..i_dim {
                                dx.values[b * i_dim + j] += g * w.values[i * i_dim + j];
                            }
                        }
                    }
                    dx
                }
            };
            let zprev = &cache.preacts[l - 1];
            for idx in 0..da.values.len() {
                da.values[idx] *= model.config.activation.derivative(zprev.values[idx]);
            }
            dz = da;
        }
    }

    Ok((
        loss,
        Grads {
            layers: layer_grads.into_iter().map(|g| g.unwrap()).collect(),
        },
    ))
}

/// Per-feature input scaling for the synthetic task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputScales {
    /// Plain standard-normal inputs.
    Ones,
    /// Heavy-tailed per-feature scales drawn once from log-normal(0, sigma);
    /// reproduces the activation-outlier condition behind the RigL collapse.
    Lognormal { sigma: f64 },
}

/// Fixed teacher network plus the input distribution generating the
/// regression task; stands in for the pre-training loss.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub teacher: Model,
    pub input_scales: Vec<f64>,
    pub noise_std: f64,
}

impl TaskSpec {
    /// Teacher weights use std 1/sqrt(fan_in) so its outputs are O(1);
    /// seed-determined and fixed for the experiment lifetime.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        scales: &InputScales,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if noise_std < 0.0 {
            return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
        }
        let config = ModelConfig {
            layer_widths: widths.to_vec(),
            sparse_layers: BTreeSet::new(),
            activation,
            init_std: 1.0,
            block_size: 1,
        };
        config.validate()?;
        let mut layers = Vec::with_capacity(config.num_layers());
        for l in 0..config.num_layers() {
            let shape = config.layer_shape(l);
            let std = 1.0 / (shape.cols as f64).sqrt();
            let values = (0..shape.len()).map(|_| truncated_normal(rng, std)).collect();
            layers.push(Layer {
                weights: LayerWeights::Dense(DenseMatrix::from_values(shape, values)?),
                bias: vec![0.0; shape.rows],
                trainable: false,
                frozen: None,
            });
        }
        let input_scales = match scales {
            InputScales::Ones => vec![1.0; widths[0]],
            InputScales::Lognormal { sigma } => (0..widths[0])
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (z * sigma).exp()
                })
                .collect(),
        };
        Ok(Self {
            teacher: Model { config, layers },
            input_scales,
            noise_std,
        })
    }
}

/// Sample a batch: scaled standard-normal inputs, teacher outputs plus noise.
pub fn make_batch<R: Rng + ?Sized>(
    task: &TaskSpec,
    batch_size: usize,
    rng: &mut R,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let in_dim = task.teacher.config.layer_widths[0];
    let mut x = DenseMatrix::zeros(Shape {
        rows: batch_size,
        cols: in_dim,
    });
    for b in 0..batch_size {
        for j in 0..in_dim {
            let z: f64 = StandardNormal.sample(rng);
            x.values[b * in_dim + j] = z * task.input_scales[j];
        }
    }
    let mut targets = predict(&task.teacher, &x)?;
    if task.noise_std > 0.0 {
        for v in &mut targets.values {
            let z: f64 = StandardNormal.sample(rng);
            *v += z * task.noise_std;
        }
    }
    Ok((x, targets))
}
