//! Feature alignment block.
//!
//! The half-resolution decoder feature is upsampled bilinearly and reduced to
//! the level's channel count (`f_llc`). A shared offset head looks at
//! `[f_llc, f_rgb, f_ir]` and emits two 18-channel offset fields, one per
//! deformable 3x3 convolution. Both the reduced decoder feature and the IR
//! feature are resampled onto the RGB grid and summed with it:
//!
//! ```text
//! f_align = f_rgb + deform(f_llc, delta_llc) + deform(f_ir, delta_ir)
//! ```
//!
//! At the deepest level there is no decoder input; only the IR feature is
//! aligned, from offsets predicted on `[f_rgb, f_ir]`.
//!
//! The last offset conv starts at zero so a fresh block behaves like plain
//! convolution.

use rand::Rng;

use crate::deform::offset_channels;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, DeformConv};
use crate::numerics::ConvSpec;
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

pub const DEFORM_KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct Fab {
    pub name: String,
    pub channels: usize,
    /// Channel count of the decoder input; `None` at the deepest level.
    pub decoder_channels: Option<usize>,
    pub reduce: Option<Conv>,
    pub offset1: Conv,
    pub offset2: Conv,
    pub deform_llc: Option<DeformConv>,
    pub deform_ir: DeformConv,
}

/// Every intermediate of one alignment; `f_llc`, `delta_llc` and `f_auf` are
/// absent at the deepest level.
#[derive(Clone, Copy, Debug)]
pub struct FabState {
    pub f_llc: Option<Var>,
    pub delta_llc: Option<Var>,
    pub delta_ir: Var,
    pub f_auf: Option<Var>,
    pub f_aif: Var,
    pub f_align: Var,
}

impl Fab {
    /// Block fusing a decoder feature with `decoder_channels` channels.
    pub fn new(name: impl Into<String>, channels: usize, decoder_channels: usize) -> Self {
        Self::build(name.into(), channels, Some(decoder_channels))
    }

    /// Deepest-level block without decoder input.
    pub fn lowest(name: impl Into<String>, channels: usize) -> Self {
        Self::build(name.into(), channels, None)
    }

    fn build(name: String, channels: usize, decoder_channels: Option<usize>) -> Self {
        let taps = offset_channels((DEFORM_KERNEL, DEFORM_KERNEL));
        let (head_in, head_out) = match decoder_channels {
            Some(_) => (3 * channels, 2 * taps),
            None => (2 * channels, taps),
        };
        Self {
            reduce: decoder_channels
                .map(|dc| Conv::new(format!("{name}.reduce"), ConvSpec::new(dc, channels, 1))),
            offset1: Conv::new(format!("{name}.offset1"), ConvSpec::new(head_in, channels, 3)),
            offset2: Conv::new(format!("{name}.offset2"), ConvSpec::new(channels, head_out, 3)),
            deform_llc: decoder_channels
                .map(|_| DeformConv::new(format!("{name}.deform_llc"), channels, DEFORM_KERNEL)),
            deform_ir: DeformConv::new(format!("{name}.deform_ir"), channels, DEFORM_KERNEL),
            name,
            channels,
            decoder_channels,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        if let Some(r) = &self.reduce {
            r.init(store, rng)?;
        }
        self.offset1.init(store, rng)?;
        self.offset2.init_zero(store)?;
        if let Some(d) = &self.deform_llc {
            d.init(store, rng)?;
        }
        self.deform_ir.init(store, rng)
    }

    pub fn param_count(&self) -> usize {
        self.reduce.as_ref().map_or(0, Conv::param_count)
            + self.offset1.param_count()
            + self.offset2.param_count()
            + self.deform_llc.as_ref().map_or(0, DeformConv::param_count)
            + self.deform_ir.param_count()
    }

    /// Offset-head parameter names.
    pub fn offset_head_params(&self) -> Vec<String> {
        let mut v = Vec::new();
        for c in [&self.offset1, &self.offset2] {
            v.push(c.weight_name());
            v.push(c.bias_name());
        }
        v
    }

    /// Aligns `f_dec` (half resolution; `None` for the deepest block) and
    /// `f_ir` to `f_rgb`. With `zero_offsets` every offset field is replaced by
    /// zeros, reducing both deformable convolutions to plain ones.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        f_dec: Option<Var>,
        f_rgb: Var,
        f_ir: Var,
        zero_offsets: bool,
    ) -> Result<FabState> {
        let shape = g.shape(f_rgb);
        if shape != g.shape(f_ir) {
            return Err(Error::Shape(format!(
                "FAB `{}`: rgb {:?} and ir {:?} differ",
                self.name,
                shape,
                g.shape(f_ir)
            )));
        }
        if shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "FAB `{}` built for {} channels, got {}",
                self.name, self.channels, shape[1]
            )));
        }
        let [n, _, h, w] = shape;
        let taps = offset_channels((DEFORM_KERNEL, DEFORM_KERNEL));

        let f_llc = match (f_dec, &self.reduce) {
            (Some(dec), Some(reduce)) => {
                let [dn, _, dh, dw] = g.shape(dec);
                if dn != n || 2 * dh != h || 2 * dw != w {
                    return Err(Error::Shape(format!(
                        "FAB `{}`: decoder feature {dh}x{dw} must be exactly half of {h}x{w}",
                        self.name
                    )));
                }
                let up = g.resize_bilinear(dec, h, w)?;
                Some(reduce.forward(g, store, up)?)
            }
            (None, None) => None,
            (Some(_), None) => {
                return Err(Error::Contract(format!(
                    "FAB `{}` is a deepest-level block and takes no decoder input",
                    self.name
                )))
            }
            (None, Some(_)) => {
                return Err(Error::Contract(format!("FAB `{}` requires a decoder input", self.name)))
            }
        };

        let (delta_llc, delta_ir) = if zero_offsets {
            let zeros = || Tensor::zeros([n, taps, h, w]);
            (f_llc.map(|_| g.input(zeros())), g.input(zeros()))
        } else {
            let mut parts = Vec::with_capacity(3);
            parts.extend(f_llc);
            parts.push(f_rgb);
            parts.push(f_ir);
            let cat = g.concat(&parts)?;
            let hid = self.offset1.forward(g, store, cat)?;
            let hid = g.relu(hid);
            let offsets = self.offset2.forward(g, store, hid)?;
            if f_llc.is_some() {
                (
                    Some(g.slice_channels(offsets, 0, taps)?),
                    g.slice_channels(offsets, taps, taps)?,
                )
            } else {
                (None, offsets)
            }
        };

        let f_auf = match (f_llc, delta_llc, &self.deform_llc) {
            (Some(x), Some(d), Some(conv)) => Some(conv.forward(g, store, x, d)?),
            _ => None,
        };
        let f_aif = self.deform_ir.forward(g, store, f_ir, delta_ir)?;
        let mut f_align = g.add(f_rgb, f_aif)?;
        if let Some(auf) = f_auf {
            f_align = g.add(f_align, auf)?;
        }
        Ok(FabState {
            f_llc,
            delta_llc,
            delta_ir,
            f_auf,
            f_aif,
            f_align,
        })
    }
}
