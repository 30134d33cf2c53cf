use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{EmmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// Derivative with respect to the pre-activation value.
    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// One affine map. `weight` is `in × out` so a row batch multiplies on the left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Fully connected network parameters: layers plus one activation per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    activations: Vec<Activation>,
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

/// Gradients shaped exactly like the parameters of the [`Mlp`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(&l.bias))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Mlp {
    /// Random initialization with `U(−1/√fan_in, 1/√fan_in)` for weights and biases.
    ///
    /// `sizes` lists every layer width including input and output, so a network
    /// with `n` layers takes `n + 1` sizes and `n` activations.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(EmmError::shape(format!(
                "{} sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(EmmError::shape("layer width 0"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = (0..w[0] * w[1])
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let bias = (0..w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weight: Matrix::from_vec(w[0], w[1], weight).expect("sized above"),
                    bias,
                }
            })
            .collect();
        Ok(Self {
            layers,
            activations: activations.to_vec(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(EmmError::shape(format!(
                "{} layers with {} activations",
                layers.len(),
                activations.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(EmmError::shape(format!(
                    "layer {i}: bias length {} vs output dim {}",
                    l.bias.len(),
                    l.output_dim()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(EmmError::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            activations,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(EmmError::shape(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        Ok(())
    }

    fn affine(layer: &Layer, x: &Matrix) -> Result<Matrix> {
        let mut pre = x.matmul(&layer.weight)?;
        let width = layer.bias.len();
        for row in pre.data_mut().chunks_exact_mut(width) {
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        Ok(pre)
    }

    /// Forward pass that keeps everything [`Mlp::backward`] needs.
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (layer, &act) in self.layers.iter().zip(&self.activations) {
            let pre = Self::affine(layer, &x)?;
            let post = pre.map(|v| act.apply(v));
            inputs.push(x);
            pre_activations.push(pre);
            x = post;
        }
        Ok((
            x,
            Tape {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without recording a tape.
    pub fn apply(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut x = Self::affine(&self.layers[0], input)?;
        x.data_mut()
            .iter_mut()
            .for_each(|v| *v = self.activations[0].apply(*v));
        for (layer, &act) in self.layers.iter().zip(&self.activations).skip(1) {
            x = Self::affine(layer, &x)?;
            x.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        }
        Ok(x)
    }

    /// Reverse pass. Returns parameter gradients and the gradient with respect
    /// to the network input.
    pub fn backward(&self, tape: &Tape, output_grad: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if tape.inputs.len() != self.layers.len() {
            return Err(EmmError::shape(format!(
                "tape recorded {} layers, network has {}",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, input)) in self.layers.iter().zip(&tape.inputs).enumerate() {
            if input.cols() != layer.input_dim()
                || tape.pre_activations[i].cols() != layer.output_dim()
            {
                return Err(EmmError::shape(format!("stale tape at layer {i}")));
            }
        }
        let rows = tape.inputs[0].rows();
        if output_grad.shape() != (rows, self.output_dim()) {
            return Err(EmmError::shape(format!(
                "output gradient is {}x{}, expected {}x{}",
                output_grad.rows(),
                output_grad.cols(),
                rows,
                self.output_dim()
            )));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = output_grad.clone();
        for i in (0..self.layers.len()).rev() {
            let act = self.activations[i];
            let pre = &tape.pre_activations[i];
            if act != Activation::Identity {
                for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                    *gv *= act.derivative(p);
                }
            }
            let weight = tape.inputs[i].t_matmul(&g)?;
            let bias = g.column_sums();
            let next = g.matmul_t(&self.layers[i].weight)?;
            grads.push(Layer { weight, bias });
            g = next;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }
}
