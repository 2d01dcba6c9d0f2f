//! Full model assembly and the ablation variants.
//!
//! Data flow, with `k` running over the five pyramid levels:
//!
//! ```text
//! rgb ───────────► rgb stage k ─┐
//! ir ─► ir_stem ─► ir  stage k ─┤ fusion (concat+1x1, or MMEB) ─► skip_k
//!                               │ (MMEB outputs feed stage k+1)
//! X_4 = FAB_lowest(skip_4, ir_4)          | skip_4
//! X_k = db_{k+1}(X_{k+1}) + FAB_k(X_{k+1}, skip_k, ir_k)
//!                                         | db_{k+1}(X_{k+1}) + skip_k
//! logits = head(X_0)
//! ```

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{check_image, EncoderConfig, IrStem, StreamEncoder, NUM_STAGES};
use crate::error::{Error, Result};
use crate::fab::{Fab, FabState};
use crate::graph::{Graph, Var};
use crate::mmeb::{GateOverride, Mmeb, MmebState};
use crate::nn::Conv;
use crate::numerics::{resize_bilinear, ConvSpec};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    BaselineUnet,
    WMmeb,
    WFab,
    Hmmen,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::BaselineUnet, Self::WMmeb, Self::WFab, Self::Hmmen];

    pub fn tag(self) -> &'static str {
        match self {
            Self::BaselineUnet => "baseline_unet",
            Self::WMmeb => "w_mmeb",
            Self::WFab => "w_fab",
            Self::Hmmen => "hmmen",
        }
    }

    pub fn uses_mmeb(self) -> bool {
        matches!(self, Self::WMmeb | Self::Hmmen)
    }

    pub fn uses_fab(self) -> bool {
        matches!(self, Self::WFab | Self::Hmmen)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Contract(format!("unknown variant `{s}` (expected baseline_unet, w_mmeb, w_fab or hmmen)")))
    }
}

/// Debug hooks threaded through a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Hooks {
    pub gates: GateOverride,
    pub zero_offsets: bool,
}

#[derive(Clone, Debug)]
pub struct NetworkOutput {
    pub logits: Var,
    /// Last feature map before the prediction head.
    pub penultimate: Var,
    pub skips: Vec<Var>,
    pub mmeb: Vec<MmebState>,
    /// Indexed by level; empty for variants without alignment.
    pub fab: Vec<FabState>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub variant: ModelVariant,
    pub encoder_config: EncoderConfig,
    pub ir_stem: IrStem,
    pub rgb_encoder: StreamEncoder,
    pub ir_encoder: StreamEncoder,
    pub mmeb: Vec<Mmeb>,
    pub fuse: Vec<Conv>,
    pub fab: Vec<Fab>,
    pub decoder: Decoder,
}

impl Network {
    pub fn new(variant: ModelVariant, config: &EncoderConfig) -> Result<Self> {
        let ch = config.stage_channels;
        let mut net = Self {
            variant,
            encoder_config: config.clone(),
            ir_stem: IrStem::new("ir_stem"),
            rgb_encoder: StreamEncoder::new("rgb_encoder", config)?,
            ir_encoder: StreamEncoder::new("ir_encoder", config)?,
            mmeb: Vec::new(),
            fuse: Vec::new(),
            fab: Vec::new(),
            decoder: Decoder::new(&DecoderConfig::mirror(config))?,
        };
        for (k, &c) in ch.iter().enumerate() {
            if variant.uses_mmeb() {
                net.mmeb.push(Mmeb::new(format!("mmeb.level{k}"), c));
            } else {
                net.fuse
                    .push(Conv::new(format!("fuse.level{k}"), ConvSpec::new(2 * c, c, 1)));
            }
            if variant.uses_fab() {
                let name = format!("fab.level{k}");
                net.fab.push(if k + 1 == NUM_STAGES {
                    Fab::lowest(name, c)
                } else {
                    Fab::new(name, c, ch[k + 1])
                });
            }
        }
        Ok(net)
    }

    /// Fresh parameters drawn in double precision from `seed`, then cast.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::<f64>::new();
        self.ir_stem.conv.init(&mut store, &mut rng)?;
        self.rgb_encoder.init(&mut store, &mut rng)?;
        self.ir_encoder.init(&mut store, &mut rng)?;
        for m in &self.mmeb {
            m.init(&mut store, &mut rng)?;
        }
        for f in &self.fuse {
            f.init(&mut store, &mut rng)?;
        }
        for f in &self.fab {
            f.init(&mut store, &mut rng)?;
        }
        self.decoder.init(&mut store, &mut rng)?;
        Ok(store.cast())
    }

    pub fn param_count(&self) -> usize {
        self.ir_stem.conv.param_count()
            + self.rgb_encoder.param_count()
            + self.ir_encoder.param_count()
            + self.mmeb.iter().map(Mmeb::param_count).sum::<usize>()
            + self.fuse.iter().map(Conv::param_count).sum::<usize>()
            + self.fab.iter().map(Fab::param_count).sum::<usize>()
            + self.decoder.param_count()
    }

    /// Rejects stores whose name set differs from this model's.
    pub fn check_params<T: Real>(&self, store: &ParameterStore<T>) -> Result<()> {
        let expected = self.init_params::<f32>(0)?;
        let want: Vec<&str> = expected.names().collect();
        let have: Vec<&str> = store.names().collect();
        if want == have {
            for (name, p) in expected.iter() {
                let got = store.value(name)?.shape();
                if got != p.value.shape() {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {got:?}, model expects {:?}",
                        p.value.shape()
                    )));
                }
            }
            return Ok(());
        }
        let missing: Vec<&str> = want.iter().filter(|n| !store.contains(n)).copied().collect();
        let extra: Vec<&str> = have.iter().filter(|n| !expected.contains(n)).copied().collect();
        Err(Error::Contract(format!(
            "parameter names do not match {} model: missing {:?}, unexpected {:?}",
            self.variant, missing, extra
        )))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        rgb: Var,
        ir: Var,
        hooks: &Hooks,
    ) -> Result<NetworkOutput> {
        let rs = g.shape(rgb);
        let is = g.shape(ir);
        check_image(rs)?;
        if is[1] != 1 || is[0] != rs[0] || is[2] != rs[2] || is[3] != rs[3] {
            return Err(Error::Shape(format!(
                "ir image {is:?} must be single-channel and match rgb {rs:?}"
            )));
        }

        let mut x_rgb = rgb;
        let mut x_ir = self.ir_stem.forward(g, store, ir)?;
        let mut skips = Vec::with_capacity(NUM_STAGES);
        let mut ir_levels = Vec::with_capacity(NUM_STAGES);
        let mut mmeb_states = Vec::new();
        for k in 0..NUM_STAGES {
            let f_rgb = self.rgb_encoder.forward_stage(k, g, store, x_rgb)?;
            let f_ir = self.ir_encoder.forward_stage(k, g, store, x_ir)?;
            if self.variant.uses_mmeb() {
                let s = self.mmeb[k].forward(g, store, f_rgb, f_ir, &hooks.gates)?;
                skips.push(s.ef_rgb);
                ir_levels.push(s.ef_ir);
                x_rgb = s.ef_rgb;
                x_ir = s.ef_ir;
                mmeb_states.push(s);
            } else {
                let cat = g.concat(&[f_rgb, f_ir])?;
                skips.push(self.fuse[k].forward(g, store, cat)?);
                ir_levels.push(f_ir);
                x_rgb = f_rgb;
                x_ir = f_ir;
            }
        }

        let deepest = NUM_STAGES - 1;
        let mut fab_states: Vec<Option<FabState>> = vec![None; NUM_STAGES];
        let mut x = if self.variant.uses_fab() {
            let s = self.fab[deepest].forward(g, store, None, skips[deepest], ir_levels[deepest], hooks.zero_offsets)?;
            fab_states[deepest] = Some(s);
            s.f_align
        } else {
            skips[deepest]
        };
        for k in (0..deepest).rev() {
            let up = self.decoder.block(k + 1).forward(g, store, x)?;
            let lateral = if self.variant.uses_fab() {
                let s = self.fab[k].forward(g, store, Some(x), skips[k], ir_levels[k], hooks.zero_offsets)?;
                fab_states[k] = Some(s);
                s.f_align
            } else {
                skips[k]
            };
            x = g.add(up, lateral)?;
        }
        let logits = self.decoder.head.forward(g, store, x)?;
        Ok(NetworkOutput {
            logits,
            penultimate: x,
            skips,
            mmeb: mmeb_states,
            fab: fab_states.into_iter().flatten().collect(),
        })
    }

    /// Logits for a batch, without keeping the graph.
    pub fn predict<T: Real>(&self, store: &ParameterStore<T>, rgb: &Tensor<T>, ir: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let r = g.input(rgb.clone());
        let i = g.input(ir.clone());
        let out = self.forward(&mut g, store, r, i, &Hooks::default())?;
        Ok(g.value(out.logits).clone())
    }

    /// Normalised penultimate-layer activation map at input resolution,
    /// shape `(N, 1, H, W)`.
    pub fn dump_heatmap<T: Real>(&self, store: &ParameterStore<T>, rgb: &Tensor<T>, ir: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let r = g.input(rgb.clone());
        let i = g.input(ir.clone());
        let out = self.forward(&mut g, store, r, i, &Hooks::default())?;
        Ok(heatmap(g.value(out.penultimate), rgb.height(), rgb.width()))
    }
}

/// Channel-mean absolute activation, resized to `h x w` and min-max
/// normalised per sample. A constant map normalises to zeros.
pub fn heatmap<T: Real>(features: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, fh, fw] = features.shape();
    let plane = fh * fw;
    let mut mean = Tensor::zeros([n, 1, fh, fw]);
    for s in 0..n {
        let src = features.sample(s);
        let dst = mean.sample_mut(s);
        for ch in 0..c {
            for (d, v) in dst.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                *d += v.abs();
            }
        }
        let inv = T::lit(1.0 / c as f64);
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    let mut map = resize_bilinear(&mean, h, w).expect("positive output size");
    for s in 0..n {
        let d = map.sample_mut(s);
        let lo = d.iter().copied().fold(T::infinity(), T::min);
        let hi = d.iter().copied().fold(T::neg_infinity(), T::max);
        let range = hi - lo;
        if range > T::zero() && range.is_finite() {
            d.iter_mut().for_each(|v| *v = ((*v - lo) / range).max(T::zero()).min(T::one()));
        } else {
            d.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            stage_channels: [2, 3, 4, 5, 6],
            expansion_factor: 2,
        }
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.tag().parse::<ModelVariant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.tag()));
        }
        assert!("unet".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn logits_match_input_resolution() {
        for v in ModelVariant::ALL {
            let net = Network::new(v, &tiny()).unwrap();
            let store = net.init_params::<f32>(1).unwrap();
            let logits = net
                .predict(&store, &Tensor::full([1, 3, 64, 32], 0.5), &Tensor::full([1, 1, 64, 32], 0.5))
                .unwrap();
            assert_eq!(logits.shape(), [1, 1, 64, 32]);
            assert!(logits.all_finite());
        }
    }

    #[test]
    fn constant_features_give_zero_heatmap() {
        let h = heatmap(&Tensor::<f64>::full([2, 3, 4, 4], -1.5), 8, 8);
        assert_eq!(h.shape(), [2, 1, 8, 8]);
        assert!(h.data().iter().all(|&v| v == 0.0));
        let ramp = Tensor::<f64>::from_fn([1, 2, 4, 4], |[_, c, y, x]| (c + y * 4 + x) as f64);
        let h = heatmap(&ramp, 16, 16);
        assert!(h.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(h.data().iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn parameter_names_match_model() {
        let net = Network::new(ModelVariant::Hmmen, &tiny()).unwrap();
        let store = net.init_params::<f32>(3).unwrap();
        net.check_params(&store).unwrap();
        let other = Network::new(ModelVariant::WMmeb, &tiny()).unwrap();
        assert!(matches!(other.check_params(&store), Err(Error::Contract(_))));
    }
}
