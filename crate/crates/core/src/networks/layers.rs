//! Parameterised layers over NHWC tensors and the named parameter store.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{col2im, im2col, ConvGeometry};
use crate::{Error, Result};

/// Ordered list of named trainable variables.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every variable from `tensors`, which must hold exactly the same names and shapes.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, var) in &self.entries {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))?;
            if t.dims() != var.dims() {
                return Err(Error::Format(format!(
                    "'{name}' has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    fn push(&mut self, name: String, var: Var) {
        self.entries.push((name, var));
    }
}

/// Weight initialiser: uniform weights drawn in `f64` and cast, zero biases,
/// so the same seed gives the same weights at every precision.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: &'a Device,
    pub store: &'a mut ParamStore,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let t = Tensor::from_vec(values, shape, self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.push(name, var.clone());
        Ok(var)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<Var> {
        let var = Var::zeros(shape, self.dtype, self.device)?;
        self.store.push(name, var.clone());
        Ok(var)
    }
}

/// He-uniform bound for weights feeding a rectifier-like activation.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    /// Read-out layer: weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub(crate) fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Self::with_bound(init, name, inputs, outputs, 1.0 / (inputs as f64).sqrt())
    }

    /// Hidden layer followed by an activation: He-uniform weights.
    pub(crate) fn hidden(init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Self::with_bound(init, name, inputs, outputs, he_bound(inputs))
    }

    fn with_bound(init: &mut Init, name: &str, inputs: usize, outputs: usize, bound: f64) -> Result<Self> {
        Ok(Self {
            weight: init.uniform(format!("{name}.weight"), &[inputs, outputs], bound)?,
            bias: init.zeros(format!("{name}.bias"), &[outputs])?,
        })
    }

    /// `(B, in)` -> `(B, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Square-kernel convolution, `(B, H, W, C_in)` -> `(B, OH, OW, C_out)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * in_channels;
        Ok(Self {
            weight: init.uniform(format!("{name}.weight"), &[fan_in, out_channels], he_bound(fan_in))?,
            bias: init.zeros(format!("{name}.bias"), &[out_channels])?,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(height, width, self.in_channels, self.kernel, self.stride, self.pad)
            .ok_or_else(|| Error::Config(format!("kernel {} does not fit a {height}x{width} input", self.kernel)))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Param(format!(
                "conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let g = self.geometry(h, w)?;
        let y = im2col(x, g)?
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        Ok(y.reshape((b, g.out_h, g.out_w, self.out_channels))?)
    }
}

/// Transposed convolution (adjoint of [`Conv2d`]'s patch map),
/// `(B, H, W, C_in)` -> `(B, (H-1)s - 2p + k, .., C_out)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        // each output pixel receives about k²/s² · C_in contributions
        let fan_in = (kernel * kernel * in_channels / (stride * stride)).max(1);
        Ok(Self {
            weight: init.uniform(
                format!("{name}.weight"),
                &[in_channels, kernel * kernel * out_channels],
                he_bound(fan_in),
            )?,
            bias: init.zeros(format!("{name}.bias"), &[out_channels])?,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let grow = |n: usize| ((n - 1) * self.stride + self.kernel).checked_sub(2 * self.pad);
        match (grow(h), grow(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::Config(format!("transposed conv cannot expand {h}x{w}"))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Param(format!(
                "transposed conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.output_size(h, w)?;
        let g = ConvGeometry::new(oh, ow, self.out_channels, self.kernel, self.stride, self.pad)
            .filter(|g| g.out_h == h && g.out_w == w)
            .ok_or_else(|| Error::Config("inconsistent transposed conv geometry".into()))?;
        let cols = x.reshape((b * h * w, c))?.matmul(self.weight.as_tensor())?;
        Ok(col2im(&cols, g)?.broadcast_add(self.bias.as_tensor())?)
    }
}
