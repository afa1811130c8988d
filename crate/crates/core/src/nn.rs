//! Dense feedforward networks described by an [`MlpSpec`] and a flat
//! [`ParamVector`].
//!
//! Parameters live in one flat vector so the same network can be driven
//! either by its own trainable parameters or by the output of a
//! hypernetwork. Layer `l` occupies `in_l * out_l` row-major weights
//! followed by `out_l` biases.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout_mask, Array2, Bindings, Mode, NodeId, Tape, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    None,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub output_transform: OutputTransform,
    /// Applied after each hidden activation, never to the output layer.
    pub dropout_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl MlpSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: Activation,
        output_transform: OutputTransform,
        dropout_rate: f64,
    ) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            output_transform,
            dropout_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Parameter(
                "an MLP needs an input size and at least one layer".into(),
            ));
        }
        if self.layer_sizes[1..].contains(&0) {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn layout(&self) -> Vec<LayerSlice> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let s = LayerSlice {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                s
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Indices of the last layer's weights and biases in the flat vector.
    pub fn final_layer_indices(&self) -> Vec<usize> {
        let last = *self.layout().last().expect("validated");
        (last.weight_offset..self.n_params()).collect()
    }
}

/// Flat parameter vector together with the layout it was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayerSlice>,
}

impl ParamVector {
    pub fn from_flat(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_params() {
            return Err(Error::Parameter(format!(
                "{} values for a network with {} parameters",
                values.len(),
                spec.n_params()
            )));
        }
        Ok(Self {
            values,
            layout: spec.layout(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weight matrix (`fan_in x fan_out`) and bias row of layer `l`.
    pub fn layer(&self, l: usize) -> (Array2, Array2) {
        let s = self.layout[l];
        let w = self.values[s.weight_offset..s.bias_offset].to_vec();
        let b = self.values[s.bias_offset..s.bias_offset + s.fan_out].to_vec();
        (
            Array2::new(s.fan_in, s.fan_out, w).expect("layout consistent"),
            Array2::row_vector(b),
        )
    }

    /// Rebuilds from per-layer arrays; inverse of [`ParamVector::layer`].
    pub fn from_layers(spec: &MlpSpec, layers: &[(Array2, Array2)]) -> Result<Self> {
        let mut values = Vec::with_capacity(spec.n_params());
        for (w, b) in layers {
            values.extend_from_slice(w.data());
            values.extend_from_slice(b.data());
        }
        Self::from_flat(spec, values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    XavierUniform,
    Uniform(f64, f64),
    Zeros,
}

/// Draws initial parameters. Biases start at zero under the Xavier scheme;
/// the uniform scheme covers weights and biases alike.
pub fn init_params(spec: &MlpSpec, scheme: InitScheme, rng: &mut Rng) -> ParamVector {
    let mut values = vec![0.0; spec.n_params()];
    for s in spec.layout() {
        match scheme {
            InitScheme::Zeros => {}
            InitScheme::XavierUniform => {
                let bound = (6.0 / (s.fan_in + s.fan_out) as f64).sqrt();
                for v in &mut values[s.weight_offset..s.bias_offset] {
                    *v = rng.random_range(-bound..=bound);
                }
            }
            InitScheme::Uniform(a, b) => {
                for v in &mut values[s.weight_offset..s.bias_offset + s.fan_out] {
                    *v = rng.random_range(a..=b);
                }
            }
        }
    }
    ParamVector {
        values,
        layout: spec.layout(),
    }
}

/// Records the forward pass of `spec` on `tape`, reading all parameters from
/// the flat row node `params` (`1 x n_params`).
pub fn mlp_on_tape(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: NodeId,
    x: NodeId,
    mode: Mode,
    rng: &mut Rng,
) -> Result<NodeId> {
    let layout = spec.layout();
    let mut h = x;
    for (l, s) in layout.iter().enumerate() {
        let w = tape.slice_reshape(params, s.weight_offset, s.fan_in, s.fan_out);
        let b = tape.slice_reshape(params, s.bias_offset, 1, s.fan_out);
        let z = tape.matmul(h, w);
        h = tape.add_row(z, b);
        if l + 1 < layout.len() {
            h = match spec.activation {
                Activation::LeakyRelu => tape.leaky_relu(h, LEAKY_SLOPE),
                Activation::Relu => tape.relu(h),
                Activation::None => h,
            };
            h = tape.dropout(h, spec.dropout_rate, mode, rng)?;
        }
    }
    if spec.output_transform == OutputTransform::Softmax {
        h = tape.softmax_rows(h);
    }
    Ok(h)
}

/// Plain forward pass. `x` must have `spec.input_size()` columns.
pub fn mlp_forward(
    spec: &MlpSpec,
    params: &ParamVector,
    x: &Array2,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Array2> {
    if x.cols() != spec.input_size() {
        return Err(crate::error::shape_err(
            "mlp input",
            format!("{} columns, network expects {}", x.cols(), spec.input_size()),
        ));
    }
    if params.len() != spec.n_params() {
        return Err(Error::Parameter(format!(
            "{} parameters for a network with {}",
            params.len(),
            spec.n_params()
        )));
    }
    if mode == Mode::Eval {
        return Ok(eval_forward(spec, &params.values, x));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Array2::row_vector(params.values.clone()));
    let xi = tape.constant(x.clone());
    mlp_on_tape(&mut tape, spec, p, xi, mode, rng)?;
    tape.forward(&Bindings::new())
}

/// Tape-free eval-mode forward pass over a flat parameter slice.
pub(crate) fn eval_forward(spec: &MlpSpec, params: &[f64], x: &Array2) -> Array2 {
    run(spec, params, x, None, false).output
}

/// Activations kept from a forward pass for [`backward_cached`].
pub(crate) struct MlpCache {
    /// Input of each layer, after activation and dropout of the previous one.
    inputs: Vec<Array2>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2>,
    masks: Vec<Option<Array2>>,
    pub output: Array2,
}

/// `h · W + b` with `W` read in place from the flat vector.
fn affine(h: &Array2, params: &[f64], s: &LayerSlice) -> Array2 {
    let w = &params[s.weight_offset..s.bias_offset];
    let bias = &params[s.bias_offset..s.bias_offset + s.fan_out];
    let (n, k, m) = (h.rows(), s.fan_in, s.fan_out);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &a) in h.row(i).iter().enumerate().take(k) {
            if a == 0.0 {
                continue;
            }
            for (o, &b) in orow.iter_mut().zip(&w[p * m..(p + 1) * m]) {
                *o += a * b;
            }
        }
        for (o, b) in orow.iter_mut().zip(bias) {
            *o += b;
        }
    }
    Array2::new(n, m, out).expect("sized above")
}

fn run(spec: &MlpSpec, params: &[f64], x: &Array2, mut dropout: Option<&mut Rng>, keep: bool) -> MlpCache {
    let layout = spec.layout();
    let mut cache = MlpCache {
        inputs: Vec::new(),
        pre: Vec::new(),
        masks: Vec::new(),
        output: Array2::zeros(0, 0),
    };
    let mut h = x.clone();
    for (l, s) in layout.iter().enumerate() {
        let mut z = affine(&h, params, s);
        if keep {
            cache.inputs.push(h);
        }
        if l + 1 < layout.len() {
            let mut a = match spec.activation {
                Activation::LeakyRelu => z.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
                Activation::Relu => z.map(|v| if v > 0.0 { v } else { 0.0 }),
                Activation::None => z.clone(),
            };
            let mut mask = None;
            if let Some(rng) = dropout.as_deref_mut() {
                if spec.dropout_rate > 0.0 {
                    let seed: u64 = rng.random();
                    let mut mrng = <Rng as rand::SeedableRng>::seed_from_u64(seed);
                    let m = dropout_mask(a.rows(), a.cols(), spec.dropout_rate, &mut mrng);
                    a = a.zip_map(&m, |v, k| v * k);
                    mask = Some(m);
                }
            }
            if keep {
                cache.pre.push(std::mem::replace(&mut z, Array2::zeros(0, 0)));
                cache.masks.push(mask);
            }
            h = a;
        } else {
            h = z;
        }
    }
    if spec.output_transform == OutputTransform::Softmax {
        h = crate::autodiff::softmax_rows(&h);
    }
    cache.output = h;
    cache
}

/// Forward pass that keeps what [`backward_cached`] needs. Dropout draws
/// from `rng` exactly as [`mlp_on_tape`] does.
pub(crate) fn forward_cached(spec: &MlpSpec, params: &[f64], x: &Array2, mode: Mode, rng: &mut Rng) -> MlpCache {
    let dropout = if mode == Mode::Train { Some(rng) } else { None };
    run(spec, params, x, dropout, true)
}

/// Gradient of `sum(d_out ⊙ output)` with respect to the flat parameters
/// and, when `need_dx`, the input.
pub(crate) fn backward_cached(
    spec: &MlpSpec,
    params: &[f64],
    cache: &MlpCache,
    d_out: &Array2,
    need_dx: bool,
) -> (Vec<f64>, Option<Array2>) {
    let layout = spec.layout();
    let mut dz = if spec.output_transform == OutputTransform::Softmax {
        let s = &cache.output;
        let mut g = d_out.clone();
        for r in 0..g.rows() {
            let dot: f64 = d_out.row(r).iter().zip(s.row(r)).map(|(a, b)| a * b).sum();
            for (gv, sv) in g.row_mut(r).iter_mut().zip(s.row(r)) {
                *gv = sv * (*gv - dot);
            }
        }
        g
    } else {
        d_out.clone()
    };
    let mut grad = vec![0.0; params.len()];
    let mut dx = None;
    for l in (0..layout.len()).rev() {
        let s = layout[l];
        let input = &cache.inputs[l];
        let dw = input.matmul_tn(&dz);
        grad[s.weight_offset..s.bias_offset].copy_from_slice(dw.data());
        let db = &mut grad[s.bias_offset..s.bias_offset + s.fan_out];
        for r in 0..dz.rows() {
            for (b, g) in db.iter_mut().zip(dz.row(r)) {
                *b += g;
            }
        }
        if l == 0 && !need_dx {
            break;
        }
        let w = Array2::new(s.fan_in, s.fan_out, params[s.weight_offset..s.bias_offset].to_vec())
            .expect("layout consistent");
        let mut dh = dz.matmul_nt(&w);
        if l == 0 {
            dx = Some(dh);
            break;
        }
        if let Some(m) = &cache.masks[l - 1] {
            dh = dh.zip_map(m, |g, k| g * k);
        }
        let pre = &cache.pre[l - 1];
        dz = match spec.activation {
            Activation::LeakyRelu => dh.zip_map(pre, |g, v| if v > 0.0 { g } else { LEAKY_SLOPE * g }),
            Activation::Relu => dh.zip_map(pre, |g, v| if v > 0.0 { g } else { 0.0 }),
            Activation::None => dh,
        };
    }
    (grad, dx)
}
