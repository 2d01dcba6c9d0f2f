//! Dual-stream hierarchical feature extraction in the inverted-residual
//! style. Each stream is five stages, each stage halving resolution; the IR
//! image passes through a learned 1 -> 3 channel stem first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv;
use crate::numerics::ConvSpec;
use crate::params::ParameterStore;
use crate::tensor::Real;

pub const NUM_STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stage_channels: [usize; NUM_STAGES],
    pub expansion_factor: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 24, 32, 96, 320],
            expansion_factor: 6,
        }
    }
}

impl EncoderConfig {
    /// Every stage has stride 2.
    pub const STAGE_STRIDE: usize = 2;
    /// Input sizes must be multiples of this.
    pub const TOTAL_STRIDE: usize = 32;

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.expansion_factor == 0 {
            return Err(Error::Contract(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }
}

/// Expand (1x1, ReLU6) -> depthwise 3x3 (stride s, ReLU6) -> project (1x1,
/// linear), with an identity skip when the shape is preserved.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: Conv,
    pub depthwise: Conv,
    pub project: Conv,
    pub residual: bool,
}

impl InvertedResidual {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, expansion: usize) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Contract(format!("inverted residual stride must be 1 or 2, got {stride}")));
        }
        let hidden = in_ch * expansion;
        Ok(Self {
            expand: Conv::new(format!("{name}.expand"), ConvSpec::new(in_ch, hidden, 1)),
            depthwise: Conv::new(
                format!("{name}.depthwise"),
                ConvSpec::depthwise(hidden, 3).with_stride(stride),
            ),
            project: Conv::new(format!("{name}.project"), ConvSpec::new(hidden, out_ch, 1)),
            residual: stride == 1 && in_ch == out_ch,
        })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        self.expand.init(store, rng)?;
        self.depthwise.init(store, rng)?;
        self.project.init(store, rng)
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.depthwise.param_count() + self.project.param_count()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, store, x)?;
        let h = g.relu6(h);
        let h = self.depthwise.forward(g, store, h)?;
        let h = g.relu6(h);
        let y = self.project.forward(g, store, h)?;
        if self.residual {
            g.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// Learned 3x3 conv lifting the single IR channel to three.
#[derive(Clone, Debug)]
pub struct IrStem {
    pub conv: Conv,
}

impl IrStem {
    pub fn new(name: &str) -> Self {
        Self {
            conv: Conv::new(name, ConvSpec::new(1, 3, 3)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, ir: Var) -> Result<Var> {
        let c = g.shape(ir)[1];
        if c != 1 {
            return Err(Error::Shape(format!("IR stem expects 1 channel, got {c}")));
        }
        self.conv.forward(g, store, ir)
    }
}

#[derive(Clone, Debug)]
enum Downsample {
    Stem(Conv),
    Block(InvertedResidual),
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    down: Downsample,
    refine: InvertedResidual,
}

impl EncoderStage {
    pub fn param_count(&self) -> usize {
        let down = match &self.down {
            Downsample::Stem(c) => c.param_count(),
            Downsample::Block(b) => b.param_count(),
        };
        down + self.refine.param_count()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let h = match &self.down {
            Downsample::Stem(conv) => {
                let h = conv.forward(g, store, x)?;
                g.relu6(h)
            }
            Downsample::Block(block) => block.forward(g, store, x)?,
        };
        self.refine.forward(g, store, h)
    }
}

/// One modality's five-stage feature extractor.
#[derive(Clone, Debug)]
pub struct StreamEncoder {
    pub config: EncoderConfig,
    stages: Vec<EncoderStage>,
}

impl StreamEncoder {
    pub fn new(name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels;
        let t = config.expansion_factor;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for k in 0..NUM_STAGES {
            let prefix = format!("{name}.stage{k}");
            let down = if k == 0 {
                Downsample::Stem(Conv::new(
                    format!("{prefix}.stem"),
                    ConvSpec::new(3, ch[0], 3).with_stride(2),
                ))
            } else {
                Downsample::Block(InvertedResidual::new(&format!("{prefix}.down"), ch[k - 1], ch[k], 2, t)?)
            };
            let refine = InvertedResidual::new(&format!("{prefix}.refine"), ch[k], ch[k], 1, t)?;
            stages.push(EncoderStage { down, refine });
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        for stage in &self.stages {
            match &stage.down {
                Downsample::Stem(c) => c.init(store, rng)?,
                Downsample::Block(b) => b.init(store, rng)?,
            }
            stage.refine.init(store, rng)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(EncoderStage::param_count).sum()
    }

    pub fn stage(&self, k: usize) -> &EncoderStage {
        &self.stages[k]
    }

    /// Runs stage `k` alone; used when fusion blocks sit between stages.
    pub fn forward_stage<T: Real>(
        &self,
        k: usize,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        self.stages[k].forward(g, store, x)
    }

    /// Full pyramid without any cross-modal interaction.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, image: Var) -> Result<FeaturePyramid> {
        check_image(g.shape(image))?;
        let mut levels = Vec::with_capacity(NUM_STAGES);
        let mut x = image;
        for k in 0..NUM_STAGES {
            x = self.forward_stage(k, g, store, x)?;
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Five feature maps at 1/2 ... 1/32 of the input resolution.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// A 3-channel image whose spatial dims are multiples of 32.
pub fn check_image(shape: [usize; 4]) -> Result<()> {
    let [_, c, h, w] = shape;
    if c != 3 {
        return Err(Error::Shape(format!("encoder expects 3 channels, got {c}")));
    }
    let m = EncoderConfig::TOTAL_STRIDE;
    if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} must have height and width divisible by {m}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_residual_block_is_identity() {
        let block = InvertedResidual::new("b", 4, 4, 1, 6).unwrap();
        let mut store = ParameterStore::<f64>::new();
        block.expand.init_zero(&mut store).unwrap();
        block.depthwise.init_zero(&mut store).unwrap();
        block.project.init_zero(&mut store).unwrap();
        let mut g = Graph::new();
        let xv = Tensor::from_fn([1, 4, 5, 5], |[_, c, y, x]| (c * 25 + y * 5 + x) as f64 - 40.0);
        let x = g.input(xv.clone());
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), &xv);
    }

    #[test]
    fn stride_two_block_halves_resolution() {
        let block = InvertedResidual::new("b", 4, 8, 2, 6).unwrap();
        assert!(!block.residual);
        let mut store = ParameterStore::<f32>::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 4, 32, 32], 0.5));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), [1, 8, 16, 16]);
    }

    #[test]
    fn ir_stem_identity_kernel_replicates_input() {
        let stem = IrStem::new("ir_stem");
        let mut store = ParameterStore::<f64>::new();
        let w = Tensor::from_fn([3, 1, 3, 3], |[_, _, a, b]| if a == 1 && b == 1 { 1.0 } else { 0.0 });
        store.insert("ir_stem.weight", w).unwrap();
        store.insert("ir_stem.bias", Tensor::zeros([3, 1, 1, 1])).unwrap();
        let xv = Tensor::from_fn([1, 1, 6, 7], |[_, _, y, x]| (y * 7 + x) as f64 / 10.0);
        let mut g = Graph::new();
        let x = g.input(xv.clone());
        let y = stem.forward(&mut g, &store, x).unwrap();
        for c in 0..3 {
            assert_eq!(g.value(y).slice_channels(c, 1).unwrap(), xv);
        }

        store.set_value("ir_stem.weight", Tensor::zeros([3, 1, 3, 3])).unwrap();
        let mut g = Graph::new();
        let x = g.input(xv);
        let y = stem.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), [1, 3, 6, 7]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ir_stem_rejects_multichannel_input() {
        let stem = IrStem::new("s");
        let mut store = ParameterStore::<f32>::new();
        stem.conv.init_zero(&mut store).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 3, 4, 4]));
        assert!(stem.forward(&mut g, &store, x).is_err());
    }

    #[test]
    fn indivisible_input_names_required_multiple() {
        let err = check_image([1, 3, 100, 64]).unwrap_err().to_string();
        assert!(err.contains("32"), "{err}");
    }
}
