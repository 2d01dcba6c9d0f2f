//! Mutual multi-modal enhancement.
//!
//! Both modality features are concatenated, summarised by 3x3/stride-2 max
//! and average pooling, upsampled back, and fed to two independent gate
//! heads producing per-channel weight maps in (0, 1). Each modality is then
//! enhanced by the other, gated:
//!
//! ```text
//! ef_rgb = f_rgb + f_ir  * w_ir
//! ef_ir  = f_ir  + f_rgb * w_rgb
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv;
use crate::numerics::{ConvSpec, PoolKind, PoolSpec};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

/// Window used for both pooling branches.
pub const POOL_KERNEL: usize = 3;
pub const POOL_STRIDE: usize = 2;
pub const POOL_PADDING: usize = 1;

/// Debug hook replacing a gate map by a constant.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateOverride {
    pub w_rgb: Option<f64>,
    pub w_ir: Option<f64>,
}

impl GateOverride {
    pub fn both(value: f64) -> Self {
        Self {
            w_rgb: Some(value),
            w_ir: Some(value),
        }
    }
}

/// `3x3 conv (4C -> C) -> ReLU -> 3x3 conv (C -> C) -> sigmoid`.
#[derive(Clone, Debug)]
pub struct GateHead {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl GateHead {
    fn new(name: &str, channels: usize) -> Self {
        Self {
            conv1: Conv::new(format!("{name}.conv1"), ConvSpec::new(4 * channels, channels, 3)),
            conv2: Conv::new(format!("{name}.conv2"), ConvSpec::new(channels, channels, 3)),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, f2: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, f2)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h)?;
        Ok(g.sigmoid(h))
    }
}

#[derive(Clone, Debug)]
pub struct Mmeb {
    pub name: String,
    pub channels: usize,
    pub head_rgb: GateHead,
    pub head_ir: GateHead,
}

/// Intermediate and final maps of one enhancement.
#[derive(Clone, Copy, Debug)]
pub struct MmebState {
    pub f1: Var,
    pub f2: Option<Var>,
    pub w_rgb: Var,
    pub w_ir: Var,
    pub ef_rgb: Var,
    pub ef_ir: Var,
}

impl Mmeb {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        Self {
            head_rgb: GateHead::new(&format!("{name}.head_rgb"), channels),
            head_ir: GateHead::new(&format!("{name}.head_ir"), channels),
            name,
            channels,
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        for head in [&self.head_rgb, &self.head_ir] {
            head.conv1.init(store, rng)?;
            head.conv2.init(store, rng)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        [&self.head_rgb, &self.head_ir]
            .iter()
            .map(|h| h.conv1.param_count() + h.conv2.param_count())
            .sum()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        f_rgb: Var,
        f_ir: Var,
        gates: &GateOverride,
    ) -> Result<MmebState> {
        let shape = g.shape(f_rgb);
        if shape != g.shape(f_ir) {
            return Err(Error::Shape(format!(
                "MMEB modalities differ in shape: rgb {:?}, ir {:?}",
                shape,
                g.shape(f_ir)
            )));
        }
        if shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "MMEB `{}` built for {} channels, got {}",
                self.name, self.channels, shape[1]
            )));
        }
        let [n, c, h, w] = shape;
        let f1 = g.concat(&[f_rgb, f_ir])?;

        let needs_heads = gates.w_rgb.is_none() || gates.w_ir.is_none();
        let f2 = if needs_heads {
            let max = g.pool2d(f1, &PoolSpec::new(PoolKind::Max, POOL_KERNEL, POOL_STRIDE, POOL_PADDING))?;
            let avg = g.pool2d(f1, &PoolSpec::new(PoolKind::Avg, POOL_KERNEL, POOL_STRIDE, POOL_PADDING))?;
            let pooled = g.concat(&[max, avg])?;
            Some(g.resize_bilinear(pooled, h, w)?)
        } else {
            None
        };

        let gate = |g: &mut Graph<T>, head: &GateHead, fixed: Option<f64>| -> Result<Var> {
            match fixed {
                Some(v) => Ok(g.input(Tensor::full([n, c, h, w], T::lit(v)))),
                None => head.forward(g, store, f2.expect("pooled map computed when a head runs")),
            }
        };
        let w_rgb = gate(g, &self.head_rgb, gates.w_rgb)?;
        let w_ir = gate(g, &self.head_ir, gates.w_ir)?;

        let cross_rgb = g.mul(f_ir, w_ir)?;
        let ef_rgb = g.add(f_rgb, cross_rgb)?;
        let cross_ir = g.mul(f_rgb, w_rgb)?;
        let ef_ir = g.add(f_ir, cross_ir)?;
        Ok(MmebState {
            f1,
            f2,
            w_rgb,
            w_ir,
            ef_rgb,
            ef_ir,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize) -> (Mmeb, ParameterStore<f64>, Tensor<f64>, Tensor<f64>) {
        let block = Mmeb::new("mmeb", c);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        block.init(&mut store, &mut rng).unwrap();
        let a = Tensor::from_fn([1, c, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn([1, c, 4, 4], |_| rng.gen_range(-1.0..1.0));
        (block, store, a, b)
    }

    #[test]
    fn zero_gates_are_exact_identity() {
        let (block, store, a, b) = setup(2);
        let mut g = Graph::new();
        let (x, y) = (g.input(a.clone()), g.input(b.clone()));
        let s = block.forward(&mut g, &store, x, y, &GateOverride::both(0.0)).unwrap();
        assert_eq!(g.value(s.ef_rgb), &a);
        assert_eq!(g.value(s.ef_ir), &b);
    }

    #[test]
    fn unit_ir_gate_adds_ir_to_rgb() {
        let (block, store, a, b) = setup(2);
        let mut g = Graph::new();
        let (x, y) = (g.input(a.clone()), g.input(b.clone()));
        let gates = GateOverride { w_rgb: None, w_ir: Some(1.0) };
        let s = block.forward(&mut g, &store, x, y, &gates).unwrap();
        assert_eq!(g.value(s.ef_rgb), &a.zip_map(&b, |p, q| p + q).unwrap());
    }

    #[test]
    fn gates_lie_in_open_unit_interval_and_bound_the_residual() {
        let (block, store, a, b) = setup(3);
        let mut g = Graph::new();
        let (x, y) = (g.input(a.clone()), g.input(b.clone()));
        let s = block.forward(&mut g, &store, x, y, &GateOverride::default()).unwrap();
        for w in [s.w_rgb, s.w_ir] {
            assert!(g.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let delta = g.value(s.ef_rgb).zip_map(&a, |e, f| e - f).unwrap();
        assert!(delta.max_abs() <= b.max_abs());
        assert_eq!(g.shape(s.ef_ir), b.shape());
    }

    #[test]
    fn mismatched_modalities_are_rejected() {
        let (block, store, a, _) = setup(2);
        let mut g = Graph::new();
        let x = g.input(a);
        let y = g.input(Tensor::zeros([1, 2, 2, 4]));
        assert!(matches!(
            block.forward(&mut g, &store, x, y, &GateOverride::default()),
            Err(Error::Shape(_))
        ));
    }
}
