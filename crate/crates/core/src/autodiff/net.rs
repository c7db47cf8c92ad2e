use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, ParamId, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
    Softmax,
}

impl Activation {
    fn apply_row(self, row: &mut [f64]) {
        match self {
            Activation::Tanh => row.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Identity => {}
            Activation::Softmax => {
                let p = softmax(row);
                row.copy_from_slice(&p);
            }
        }
    }
}

/// Fully connected layer computing `activation(W·x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Multi-layer perceptron with per-layer activations.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Parameter ids of a network registered on a tape, ordered
/// `w0, b0, w1, b1, ...`.
#[derive(Debug, Clone)]
pub struct NetBinding {
    ids: Vec<ParamId>,
    vars: Vec<(Var, Var)>,
}

impl NetBinding {
    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNet("network has no layers".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::dim(
                    format!("layer {k} bias"),
                    layer.out_dim(),
                    layer.bias.len(),
                ));
            }
            if k + 1 < layers.len() {
                if layer.activation == Activation::Softmax {
                    return Err(Error::InvalidNet(format!(
                        "softmax on hidden layer {k}; only the final layer may use it"
                    )));
                }
                let next_in = layers[k + 1].in_dim();
                if next_in != layer.out_dim() {
                    return Err(Error::dim(
                        format!("layer {} input", k + 1),
                        layer.out_dim(),
                        next_in,
                    ));
                }
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidNet(format!("layer {k} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases. `sizes` lists every width from
    /// input to output; hidden layers use `hidden`, the last layer `output`.
    pub fn glorot<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        Self::build(sizes, hidden, output, |fan_in, fan_out| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..=limit))
        })
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        Self::build(sizes, hidden, output, |fan_in, fan_out| {
            Array2::zeros((fan_out, fan_in))
        })
    }

    fn build(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        mut weights: impl FnMut(usize, usize) -> Array2<f64>,
    ) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output widths");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| Layer {
                weight: weights(sizes[k], sizes[k + 1]),
                bias: Array1::zeros(sizes[k + 1]),
                activation: if k + 1 == n { output } else { hidden },
            })
            .collect();
        Self::new(layers).expect("generated layers chain")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Widths from input to output.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Evaluates a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("layer 0 input", self.input_dim(), input.len()));
        }
        let mut x = Array1::from(input.to_vec());
        for layer in &self.layers {
            let mut y = layer.weight.dot(&x) + &layer.bias;
            layer
                .activation
                .apply_row(y.as_slice_mut().expect("contiguous"));
            x = y;
        }
        Ok(x.to_vec())
    }

    /// Evaluates a batch, one sample per row.
    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.input_dim() {
            return Err(Error::dim("layer 0 input", self.input_dim(), input.ncols()));
        }
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut y = x.dot(&layer.weight.t()) + &layer.bias;
            for mut row in y.rows_mut() {
                let mut buf = row.to_vec();
                layer.activation.apply_row(&mut buf);
                row.assign(&ArrayView1::from(&buf[..]));
            }
            x = y;
        }
        Ok(x)
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> NetBinding {
        let mut ids = Vec::with_capacity(2 * self.layers.len());
        let mut vars = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (w, wid) = tape.param(layer.weight.clone());
            let (b, bid) = tape.param(layer.bias.clone().insert_axis(ndarray::Axis(0)));
            ids.extend([wid, bid]);
            vars.push((w, b));
        }
        NetBinding { ids, vars }
    }

    /// Records the forward pass of `input` (one sample per row) using
    /// parameters bound earlier on the same tape.
    pub fn apply(&self, tape: &mut Tape, binding: &NetBinding, input: Var) -> Result<Var> {
        let cols = tape.value(input).ncols();
        if cols != self.input_dim() {
            return Err(Error::dim("layer 0 input", self.input_dim(), cols));
        }
        let mut x = input;
        for (layer, &(w, b)) in self.layers.iter().zip(&binding.vars) {
            let h = tape.matmul_t(x, w);
            let h = tape.add_row(h, b);
            x = match layer.activation {
                Activation::Tanh => tape.tanh(h),
                Activation::Identity => h,
                Activation::Softmax => tape.softmax_rows(h),
            };
        }
        Ok(x)
    }

    /// [`DenseNet::bind`] followed by [`DenseNet::apply`].
    pub fn record(&self, tape: &mut Tape, input: Var) -> Result<(Var, NetBinding)> {
        let binding = self.bind(tape);
        let out = self.apply(tape, &binding, input)?;
        Ok((out, binding))
    }

    /// Mutable views of every parameter tensor, in binding order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("contiguous"),
                ]
            })
            .collect()
    }

    /// Flattened gradients aligned with [`DenseNet::params_mut`].
    pub fn collect_grads(&self, binding: &NetBinding, grads: &Gradients) -> Vec<Vec<f64>> {
        binding
            .ids
            .iter()
            .map(|id| {
                grads
                    .get(*id)
                    .map(|g| g.iter().copied().collect())
                    .expect("binding ids come from the same tape")
            })
            .collect()
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
