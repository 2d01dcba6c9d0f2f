//! Decode blocks and the full-resolution prediction head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, InvertedResidual, NUM_STAGES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, ConvTranspose};
use crate::numerics::ConvSpec;
use crate::params::ParameterStore;
use crate::tensor::Real;

/// Channel counts from the deepest level up, mirroring the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub level_channels: [usize; NUM_STAGES],
    pub expansion_factor: usize,
}

impl DecoderConfig {
    pub fn mirror(encoder: &EncoderConfig) -> Self {
        let mut level_channels = encoder.stage_channels;
        level_channels.reverse();
        Self {
            level_channels,
            expansion_factor: encoder.expansion_factor,
        }
    }

    /// Channels at encoder level `k` (0 = shallowest).
    pub fn channels_at(&self, k: usize) -> usize {
        self.level_channels[NUM_STAGES - 1 - k]
    }
}

/// `ConvTranspose (2x) -> ReLU6 -> inverted residual (stride 1)`.
#[derive(Clone, Debug)]
pub struct DecodeBlock {
    pub up: ConvTranspose,
    pub refine: InvertedResidual,
}

impl DecodeBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, expansion: usize) -> Result<Self> {
        Ok(Self {
            up: ConvTranspose::new(format!("{name}.up"), in_ch, out_ch),
            refine: InvertedResidual::new(&format!("{name}.refine"), out_ch, out_ch, 1, expansion)?,
        })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        self.up.init(store, rng)?;
        self.refine.init(store, rng)
    }

    pub fn param_count(&self) -> usize {
        self.up.param_count() + self.refine.param_count()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.relu6(h);
        self.refine.forward(g, store, h)
    }
}

/// `ConvTranspose (2x) -> ReLU6 -> 1x1 conv to one channel`; returns logits.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub up: ConvTranspose,
    pub classifier: Conv,
}

impl PredictionHead {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            up: ConvTranspose::new(format!("{name}.up"), channels, channels),
            classifier: Conv::new(format!("{name}.classifier"), ConvSpec::new(channels, 1, 1)),
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        self.up.init(store, rng)?;
        self.classifier.init_zero(store)
    }

    pub fn param_count(&self) -> usize {
        self.up.param_count() + self.classifier.param_count()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.relu6(h);
        self.classifier.forward(g, store, h)
    }
}

/// Decode blocks `db1 ..= db4` (block `k` maps level `k` to level `k - 1`)
/// plus the head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub blocks: Vec<DecodeBlock>,
    pub head: PredictionHead,
}

impl Decoder {
    pub fn new(config: &DecoderConfig) -> Result<Self> {
        if config.level_channels.contains(&0) || config.expansion_factor == 0 {
            return Err(Error::Contract(format!("invalid decoder config {config:?}")));
        }
        let mut blocks = Vec::with_capacity(NUM_STAGES - 1);
        for k in 1..NUM_STAGES {
            blocks.push(DecodeBlock::new(
                &format!("decoder.db{k}"),
                config.channels_at(k),
                config.channels_at(k - 1),
                config.expansion_factor,
            )?);
        }
        Ok(Self {
            config: config.clone(),
            blocks,
            head: PredictionHead::new("head", config.channels_at(0)),
        })
    }

    /// Block taking level `k` to level `k - 1`, `k` in `1..5`.
    pub fn block(&self, k: usize) -> &DecodeBlock {
        &self.blocks[k - 1]
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.head.init(store, rng)
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(DecodeBlock::param_count).sum::<usize>() + self.head.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decode_block_doubles_resolution() {
        let db = DecodeBlock::new("db", 8, 4, 2).unwrap();
        let mut store = ParameterStore::<f32>::new();
        db.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 8, 8, 8], 0.1));
        let y = db.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), [1, 4, 16, 16]);
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero() {
        let db = DecodeBlock::new("db", 3, 3, 2).unwrap();
        let mut store = ParameterStore::<f64>::new();
        db.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 3, 4, 4]));
        let y = db.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).max_abs(), 0.0);
    }

    #[test]
    fn head_returns_unbounded_logits() {
        let head = PredictionHead::new("head", 2);
        let mut store = ParameterStore::<f64>::new();
        head.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        store.set_value("head.up.weight", Tensor::zeros([2, 2, 2, 2])).unwrap();
        store.set_value("head.classifier.bias", Tensor::full([1, 1, 1, 1], 5.0)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 2, 4, 4], 1.0));
        let y = head.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), [1, 1, 8, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn full_decoder_reaches_input_resolution() {
        let cfg = DecoderConfig::mirror(&EncoderConfig {
            stage_channels: [2, 2, 3, 3, 4],
            expansion_factor: 1,
        });
        let dec = Decoder::new(&cfg).unwrap();
        let mut store = ParameterStore::<f32>::new();
        dec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new();
        let mut x = g.input(Tensor::full([1, 4, 8, 8], 0.3));
        for k in (1..NUM_STAGES).rev() {
            x = dec.block(k).forward(&mut g, &store, x).unwrap();
        }
        let y = dec.head.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), [1, 1, 256, 256]);
    }
}
