//! Time-conditioned MLP velocity field `v(x, t)`.
//!
//! The scalar time is appended to the input, so a field over `R^d` has layer
//! widths `(d+1) -> hidden -> ... -> hidden -> d`. Hidden layers use SiLU,
//! the output layer is affine. All products are batched over rows.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::train::Formulation;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `a * sigmoid(a)`
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Silu => a / (1.0 + (-a).exp()),
            Activation::Identity => a,
        }
    }

    #[inline]
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-a).exp());
                s * (1.0 + a * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    input_dim: usize,
    hidden_dim: usize,
    activation: Activation,
    layers: Vec<Layer>,
}

/// Parameter-shaped gradient (or any parameter-shaped buffer).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(field: &VelocityField) -> Self {
        ParamGrads {
            layers: field
                .layers
                .iter()
                .map(|l| Layer { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.len()) })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Activations kept from a forward pass for the reverse sweep.
struct Tape {
    /// Layer inputs: `inputs[0]` is `[x, t]`, `inputs[l]` the activated output of layer `l-1`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl VelocityField {
    /// Uniform `±sqrt(1/fan_in)` initialization, deterministic in `seed`.
    ///
    /// `layers` counts affine layers, so `layers = 4` gives three hidden layers.
    pub fn init(seed: u64, d: usize, hidden: usize, layers: usize) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::invalid("input and hidden widths must be positive"));
        }
        if layers < 2 {
            return Err(Error::invalid(format!("need at least 2 layers (one hidden), got {layers}")));
        }
        let mut rng = rng::seeded(seed);
        let mut widths = vec![d + 1];
        widths.extend(std::iter::repeat_n(hidden, layers - 1));
        widths.push(d);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..bound));
                let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..bound));
                Layer { weight, bias }
            })
            .collect();
        Ok(VelocityField { input_dim: d, hidden_dim: hidden, activation: Activation::Silu, layers })
    }

    /// Builds a field from explicit layers, validating the shape chain.
    pub fn from_layers(input_dim: usize, activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a velocity field needs at least one layer"));
        }
        let mut width = input_dim + 1;
        for (i, l) in layers.iter().enumerate() {
            let (out, inp) = l.weight.dim();
            if inp != width || l.bias.len() != out {
                return Err(Error::invalid(format!(
                    "layer {i} has shape {out}x{inp} (bias {}), expected input width {width}",
                    l.bias.len()
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
            width = out;
        }
        if width != input_dim {
            return Err(Error::invalid(format!("output width {width} does not match input dimension {input_dim}")));
        }
        let hidden_dim = if layers.len() > 1 { layers[0].weight.nrows() } else { 0 };
        Ok(VelocityField { input_dim, hidden_dim, activation, layers })
    }

    /// Sets the output layer to zero, making the field identically zero.
    pub fn with_zero_output(mut self) -> Self {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.ncols()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    fn check_input(&self, x: ArrayView2<f64>, times: ArrayView1<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::invalid(format!("expected {} columns, got {}", self.input_dim, x.ncols())));
        }
        if times.len() != x.nrows() {
            return Err(Error::invalid("one time per row is required"));
        }
        if x.iter().chain(times.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite network input"));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<f64>, times: ArrayView1<f64>, keep: bool) -> Result<Tape> {
        self.check_input(x, times)?;
        let (b, d) = x.dim();
        let mut z = Array2::zeros((b, d + 1));
        z.slice_mut(ndarray::s![.., ..d]).assign(&x);
        z.column_mut(d).assign(&times);

        let last = self.layers.len() - 1;
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = z.dot(&layer.weight.t());
            a += &layer.bias;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: l });
            }
            if keep {
                inputs.push(z);
            }
            if l == last {
                return Ok(Tape { inputs, pre, output: a });
            }
            let act = self.activation;
            z = a.mapv(|v| act.apply(v));
            if keep {
                pre.push(a);
            }
        }
        unreachable!("loop returns at the last layer")
    }

    /// Velocities for a batch of rows sharing time `t`.
    pub fn forward_batch(&self, x: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let times = Array1::from_elem(x.nrows(), t);
        self.forward_batch_times(x, times.view())
    }

    /// Velocities for a batch with one time per row.
    pub fn forward_batch_times(&self, x: ArrayView2<f64>, times: ArrayView1<f64>) -> Result<Array2<f64>> {
        Ok(self.run(x, times, false)?.output)
    }

    pub fn forward(&self, x: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        let x2 = x.insert_axis(Axis(0));
        Ok(self.forward_batch(x2, t)?.row(0).to_owned())
    }

    /// Reverse sweep; returns the cotangent at the network input (time column included).
    fn backward(&self, tape: &Tape, cot: ArrayView2<f64>, mut grads: Option<&mut ParamGrads>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut g = cot.to_owned();
        for l in (0..=last).rev() {
            if l < last {
                let act = self.activation;
                ndarray::Zip::from(&mut g).and(&tape.pre[l]).for_each(|gv, &a| *gv *= act.derivative(a));
            }
            if let Some(pg) = grads.as_deref_mut() {
                let slot = &mut pg.layers[l];
                slot.weight += &g.t().dot(&tape.inputs[l]);
                slot.bias += &g.sum_axis(Axis(0));
            }
            g = g.dot(&self.layers[l].weight);
        }
        g
    }

    /// Forward pass that keeps its activations for later input products.
    pub fn forward_pass(&self, x: ArrayView2<f64>, t: f64) -> Result<ForwardPass<'_>> {
        let times = Array1::from_elem(x.nrows(), t);
        let tape = self.run(x, times.view(), true)?;
        Ok(ForwardPass { field: self, tape })
    }

    /// Velocities and row-wise `Jᵀu` with `J = ∂v/∂x`, for one shared time.
    pub fn vjp_input_batch(&self, x: ArrayView2<f64>, t: f64, cot: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let pass = self.forward_pass(x, t)?;
        let g = pass.vjp_input(cot)?;
        Ok((pass.tape.output, g))
    }

    /// `Jᵀu` at a single point. Excludes the identity term of `∂x̂₁/∂x`.
    pub fn vjp_input(&self, x: ArrayView1<f64>, t: f64, cot: ArrayView1<f64>) -> Result<Array1<f64>> {
        let (_, g) = self.vjp_input_batch(x.insert_axis(Axis(0)), t, cot.insert_axis(Axis(0)))?;
        Ok(g.row(0).to_owned())
    }

    /// Gradient of `Σ_rows <cot_row, v(x_row, t_row)>` with respect to all parameters.
    ///
    /// Also returns the forward outputs, which the trainer needs for its loss.
    pub fn vjp_params_batch(&self, x: ArrayView2<f64>, times: ArrayView1<f64>, cot: ArrayView2<f64>) -> Result<(Array2<f64>, ParamGrads)> {
        if cot.dim() != x.dim() {
            return Err(Error::invalid("cotangent must match the input batch shape"));
        }
        let tape = self.run(x, times, true)?;
        let mut grads = ParamGrads::zeros_like(self);
        self.backward(&tape, cot, Some(&mut grads));
        Ok((tape.output, grads))
    }

    pub fn vjp_params(&self, x: ArrayView1<f64>, t: f64, cot: ArrayView1<f64>) -> Result<ParamGrads> {
        let times = ndarray::arr1(&[t]);
        Ok(self.vjp_params_batch(x.insert_axis(Axis(0)), times.view(), cot.insert_axis(Axis(0)))?.1)
    }
}

/// Recorded forward evaluation of a batch at one time.
pub struct ForwardPass<'a> {
    field: &'a VelocityField,
    tape: Tape,
}

impl ForwardPass<'_> {
    pub fn output(&self) -> &Array2<f64> {
        &self.tape.output
    }

    /// Row-wise `Jᵀu` at the recorded inputs.
    pub fn vjp_input(&self, cot: ArrayView2<f64>) -> Result<Array2<f64>> {
        if cot.dim() != self.tape.output.dim() {
            return Err(Error::invalid("cotangent must match the input batch shape"));
        }
        let g = self.field.backward(&self.tape, cot, None);
        let d = self.field.input_dim;
        Ok(g.slice(ndarray::s![.., ..d]).to_owned())
    }
}

/// A trained field together with how it was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub field: VelocityField,
    pub formulation: Formulation,
    /// Hex SHA-256 of the resolved training configuration.
    pub train_config_digest: String,
}

/// On-disk layout of a checkpoint (JSON).
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    input_dim: usize,
    hidden_dim: usize,
    dims: Vec<usize>,
    activation: Activation,
    formulation: Formulation,
    train_config_digest: String,
    layers: Vec<LayerFile>,
}

/// Weights are row-major `out × in` nested arrays.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let f = &self.field;
        let file = CheckpointFile {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            input_dim: f.input_dim,
            hidden_dim: f.hidden_dim,
            dims: f.dims(),
            activation: f.activation,
            formulation: self.formulation,
            train_config_digest: self.train_config_digest.clone(),
            layers: f
                .layers
                .iter()
                .map(|l| LayerFile { weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(), bias: l.bias.to_vec() })
                .collect(),
        };
        let mut s = serde_json::to_string(&file).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |source| Error::Parse { path: path.to_path_buf(), source };
        let value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
        let found = value.get("schema_version").and_then(|v| v.as_u64());
        match found {
            Some(v) if v == CHECKPOINT_SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(Error::SchemaVersion { found: v as u32, expected: CHECKPOINT_SCHEMA_VERSION }),
            None => return Err(Error::invalid(format!("{}: missing schema_version", path.display()))),
        }
        let file: CheckpointFile = serde_json::from_value(value).map_err(parse_err)?;
        let layers = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let rows = l.weight.len();
                let cols = l.weight.first().map_or(0, |r| r.len());
                if l.weight.iter().any(|r| r.len() != cols) {
                    return Err(Error::invalid(format!("layer {i} weight rows have unequal lengths")));
                }
                let flat: Vec<f64> = l.weight.into_iter().flatten().collect();
                let weight = Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::invalid(e.to_string()))?;
                Ok(Layer { weight, bias: Array1::from(l.bias) })
            })
            .collect::<Result<Vec<_>>>()?;
        let field = VelocityField::from_layers(file.input_dim, file.activation, layers)?;
        if field.dims() != file.dims {
            return Err(Error::invalid(format!("declared dims {:?} disagree with layer shapes {:?}", file.dims, field.dims())));
        }
        Ok(Checkpoint { field, formulation: file.formulation, train_config_digest: file.train_config_digest })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text, path)
    }
}
