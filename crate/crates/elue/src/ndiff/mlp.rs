use rand::Rng;

use super::{ParameterSet, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    None,
    Tanh,
}

/// Architecture of a dense feed-forward network.
///
/// `layer_widths` lists input width followed by each layer's output width,
/// so `[7, 64, 64, 10]` is a three-layer net from 7 inputs to 10 outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "MlpSpec needs at least 2 widths".into(),
            ));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("MlpSpec widths must be >= 1".into()));
        }
        Ok(MlpSpec {
            layer_widths,
            activation,
            output_activation,
        })
    }

    pub fn relu(layer_widths: Vec<usize>) -> Self {
        MlpSpec::new(layer_widths, Activation::Relu, OutputActivation::None)
            .expect("static widths")
    }

    pub fn in_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.w{layer}")
    }

    fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.b{layer}")
    }

    /// Insert freshly initialized parameters under `prefix`: weights are
    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero.
    pub fn init_params(&self, prefix: &str, params: &mut ParameterSet, rng: &mut impl Rng) {
        for layer in 0..self.n_layers() {
            let fan_in = self.layer_widths[layer];
            let fan_out = self.layer_widths[layer + 1];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.insert(
                Self::weight_name(prefix, layer),
                Tensor::from_parts(vec![fan_in, fan_out], values),
            );
            params.insert(
                Self::bias_name(prefix, layer),
                Tensor::from_parts(vec![fan_out], vec![0.0; fan_out]),
            );
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(Error::shape("mlp layer 0 input", self.in_dim(), cols));
        }
        Ok(())
    }

    /// Taped forward pass; the input may be a batch (rows are samples).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        prefix: &str,
        input: Var,
    ) -> Result<Var> {
        let (_, cols) = tape.value(input).dims2();
        self.check_input(cols)?;
        let mut h = input;
        for layer in 0..self.n_layers() {
            let w = tape.param(params, &Self::weight_name(prefix, layer))?;
            let b = tape.param(params, &Self::bias_name(prefix, layer))?;
            h = tape.affine(h, w, b).map_err(|_| {
                Error::shape(
                    format!("mlp layer {layer} ({prefix})"),
                    self.layer_widths[layer],
                    tape.value(h).dims2().1,
                )
            })?;
            let last = layer == self.n_layers() - 1;
            if !last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            } else if self.output_activation == OutputActivation::Tanh {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Taped forward pass with the parameters registered as constants:
    /// gradients flow through the input but not to the weights. Used where a
    /// loss differentiates through a network it does not own.
    pub fn forward_frozen(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        prefix: &str,
        input: Var,
    ) -> Result<Var> {
        let (_, cols) = tape.value(input).dims2();
        self.check_input(cols)?;
        let mut h = input;
        for layer in 0..self.n_layers() {
            let w = tape.constant(params.require(&Self::weight_name(prefix, layer))?.clone());
            let b = tape.constant(params.require(&Self::bias_name(prefix, layer))?.clone());
            h = tape.affine(h, w, b)?;
            let last = layer == self.n_layers() - 1;
            if !last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            } else if self.output_activation == OutputActivation::Tanh {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Plain forward pass without recording; used for rollouts and for
    /// bootstrap targets that must stay constant under differentiation.
    pub fn eval(&self, params: &ParameterSet, prefix: &str, input: &Tensor) -> Result<Tensor> {
        let (rows, cols) = input.dims2();
        self.check_input(cols)?;
        let mut h = input.values().to_vec();
        let mut h_cols = cols;
        for layer in 0..self.n_layers() {
            let w = params.require(&Self::weight_name(prefix, layer))?;
            let b = params.require(&Self::bias_name(prefix, layer))?;
            let (k, m) = w.dims2();
            if k != h_cols {
                return Err(Error::shape(
                    format!("mlp layer {layer} ({prefix})"),
                    k,
                    h_cols,
                ));
            }
            let wv = w.values();
            let bv = b.values();
            let mut out = vec![0.0; rows * m];
            for i in 0..rows {
                let row = &mut out[i * m..(i + 1) * m];
                row.copy_from_slice(bv);
                for l in 0..k {
                    let a = h[i * k + l];
                    let wrow = &wv[l * m..(l + 1) * m];
                    for j in 0..m {
                        row[j] += a * wrow[j];
                    }
                }
            }
            let last = layer == self.n_layers() - 1;
            if !last {
                match self.activation {
                    Activation::Relu => {
                        for v in out.iter_mut() {
                            if *v < 0.0 {
                                *v = 0.0;
                            }
                        }
                    }
                    Activation::Tanh => {
                        for v in out.iter_mut() {
                            *v = v.tanh();
                        }
                    }
                }
            } else if self.output_activation == OutputActivation::Tanh {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            h = out;
            h_cols = m;
        }
        Ok(Tensor::from_parts(vec![rows, h_cols], h))
    }
}
