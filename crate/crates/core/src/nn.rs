//! Named parameterised layers. Each layer owns only its name and geometry;
//! values live in a [`ParameterStore`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::numerics::ConvSpec;
use crate::params::{init_conv, kaiming_uniform, ParameterStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        init_conv(store, &self.name, &self.spec, rng)
    }

    pub fn init_zero<T: Real>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        store.insert(self.weight_name(), Tensor::zeros(self.spec.weight_shape()))?;
        if self.spec.has_bias {
            store.insert(self.bias_name(), Tensor::zeros(self.spec.bias_shape()))?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = if self.spec.has_bias {
            Some(g.param(store, &self.bias_name())?)
        } else {
            None
        };
        g.conv2d(x, w, b, &self.spec)
    }
}

/// 2x upsampling transposed convolution, weight `(in, out, 2, 2)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        store.insert(
            format!("{}.weight", self.name),
            kaiming_uniform([self.in_channels, self.out_channels, 2, 2], self.in_channels, rng),
        )?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros([self.out_channels, 1, 1, 1]))
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * 4 + self.out_channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = g.param(store, &format!("{}.bias", self.name))?;
        g.conv_transpose2x2(x, w, Some(b))
    }
}

/// Deformable 3x3 (or any odd size) convolution with its own weights; the
/// offset field is supplied by the caller.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub conv: Conv,
}

impl DeformConv {
    pub fn new(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        Self {
            conv: Conv::new(name, ConvSpec::new(channels, channels, kernel)),
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        offsets: Var,
    ) -> Result<Var> {
        let w = g.param(store, &self.conv.weight_name())?;
        let b = g.param(store, &self.conv.bias_name())?;
        g.deform_conv2d(x, offsets, w, Some(b), &self.conv.spec)
    }
}
