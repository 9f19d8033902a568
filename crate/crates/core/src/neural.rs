//! Dense feed-forward networks with exact reverse-mode gradients, Adam and
//! Polyak averaging. Batches are row-major: one sample per row.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("input width {got} does not match network input width {expected}")]
    Width { expected: usize, got: usize },
    #[error("forward cache is stale: parameters changed since it was computed")]
    StaleCache,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer followed by an activation. `weights` is `(outputs, inputs)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "NetFile", into = "NetFile")]
pub struct DenseNet {
    layers: Vec<Layer>,
    generation: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by [`DenseNet::forward_cached`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            bias: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.bias.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.bias.iter().flat_map(|b| b.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl DenseNet {
    /// Network with layer widths `sizes` (input first). Hidden layers use
    /// `hidden`, the last layer `output`. Weights are uniform in
    /// `±1/sqrt(fan_in)`, biases zero; the last layer uses `±last_scale`
    /// when given.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        last_scale: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NeuralError::Shape(format!("need at least two positive widths, got {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let last = i + 1 == n;
                let bound = match (last, last_scale) {
                    (true, Some(s)) => s,
                    _ => 1.0 / (fan_in as f64).sqrt(),
                };
                Layer {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound)),
                    bias: Array1::zeros(fan_out),
                    activation: if last { output } else { hidden },
                }
            })
            .collect();
        Ok(DenseNet { layers, generation: 0 })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NeuralError::Shape("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() || l.inputs() == 0 || l.outputs() == 0 {
                return Err(NeuralError::Shape(format!("layer {i}: bias does not match weights")));
            }
            if i > 0 && layers[i - 1].outputs() != l.inputs() {
                return Err(NeuralError::Shape(format!("layer {i}: input width does not chain")));
            }
            if !l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(NeuralError::Shape(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(DenseNet { layers, generation: 0 })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to a layer. Invalidates outstanding caches.
    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        self.generation += 1;
        &mut self.layers[i]
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_width(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(NeuralError::Width { expected: self.input_width(), got: x.ncols() });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&x)?;
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            z.mapv_inplace(|v| l.activation.apply(v));
            a = z;
        }
        Ok(a)
    }

    /// Single-sample forward pass.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_width(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            let y = z.mapv(|v| l.activation.apply(v));
            inputs.push(a);
            pre.push(z);
            a = y;
        }
        Ok(ForwardCache { generation: self.generation, inputs, pre, output: a })
    }

    /// Gradients of `sum(grad_out ∘ output)` with respect to the parameters
    /// and the input batch.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(NeuralError::StaleCache);
        }
        if grad_out.dim() != cache.output.dim() {
            return Err(NeuralError::Shape(format!(
                "output gradient {:?} vs output {:?}",
                grad_out.dim(),
                cache.output.dim()
            )));
        }
        let n = self.layers.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = grad_out.to_owned();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            let y = if i + 1 == n { &cache.output } else { &cache.inputs[i + 1] };
            Zip::from(&mut delta)
                .and(&cache.pre[i])
                .and(y)
                .for_each(|d, &z, &yv| *d *= l.activation.derivative(z, yv));
            gw.push(delta.t().dot(&cache.inputs[i]));
            gb.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&l.weights);
        }
        gw.reverse();
        gb.reverse();
        Ok((Gradients { weights: gw, bias: gb }, delta))
    }

    /// `self ← (1 − tau)·self + tau·online`, elementwise.
    pub fn soft_update(&mut self, online: &DenseNet, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(NeuralError::Shape(format!("tau {tau} outside [0, 1]")));
        }
        self.check_same_shape(online)?;
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weights).and(&o.weights).for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
            Zip::from(&mut t.bias).and(&o.bias).for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
        }
        self.generation += 1;
        Ok(())
    }

    fn check_same_shape(&self, other: &DenseNet) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.weights.dim() == b.weights.dim());
        if same {
            Ok(())
        } else {
            Err(NeuralError::Shape("networks differ in architecture".into()))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| NeuralError::Checkpoint(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    format_version: u32,
    layers: Vec<LayerFile>,
}

impl From<DenseNet> for NetFile {
    fn from(net: DenseNet) -> Self {
        NetFile {
            format_version: CHECKPOINT_VERSION,
            layers: net
                .layers
                .into_iter()
                .map(|l| LayerFile {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weights: l.weights.as_standard_layout().iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<NetFile> for DenseNet {
    type Error = String;

    fn try_from(f: NetFile) -> std::result::Result<Self, String> {
        if f.format_version != CHECKPOINT_VERSION {
            return Err(format!("unsupported format_version {}", f.format_version));
        }
        let layers = f
            .layers
            .into_iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.outputs, l.inputs), l.weights).map_err(|e| e.to_string())?;
                Ok(Layer { weights, bias: Array1::from(l.bias), activation: l.activation })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        DenseNet::from_layers(layers).map_err(|e| e.to_string())
    }
}

/// Adam optimizer state for one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl Adam {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        let z = Gradients::zeros_like(net);
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            m_w: z.weights.clone(),
            v_w: z.weights,
            m_b: z.bias.clone(),
            v_b: z.bias,
        }
    }

    /// One bias-corrected Adam step. Non-finite gradients leave both the
    /// network and the optimizer untouched.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        let shapes_match = grads.weights.len() == net.layers.len()
            && self.m_w.len() == net.layers.len()
            && net.layers.iter().enumerate().all(|(i, l)| {
                grads.weights[i].dim() == l.weights.dim()
                    && grads.bias[i].dim() == l.bias.dim()
                    && self.m_w[i].dim() == l.weights.dim()
            });
        if !shapes_match {
            return Err(NeuralError::Shape("gradients or optimizer state do not match network".into()));
        }
        if !grads.is_finite() {
            return Err(NeuralError::Divergence("non-finite gradient".into()));
        }
        self.steps += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let lr = self.learning_rate;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (i, l) in net.layers.iter_mut().enumerate() {
            Zip::from(&mut l.weights)
                .and(&mut self.m_w[i])
                .and(&mut self.v_w[i])
                .and(&grads.weights[i])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut l.bias)
                .and(&mut self.m_b[i])
                .and(&mut self.v_b[i])
                .and(&grads.bias[i])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        net.generation += 1;
        Ok(())
    }
}
