//! Tape gradients against central finite differences in double precision.

use hmmen::gradcheck::{check_gradients, GradCheckOptions};
use hmmen::network::{Hooks, ModelVariant, Network};
use hmmen::fab::Fab;
use hmmen::mmeb::{GateOverride, Mmeb};
use hmmen::nn::{Conv, ConvTranspose, DeformConv};
use hmmen::numerics::{ConvSpec, PoolKind, PoolSpec};
use hmmen::params::scaled_uniform;
use hmmen::encoder::EncoderConfig;
use hmmen::{ParameterStore, Tensor};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-4;
const BLOCK_TOL: f64 = 1e-3;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 12,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Small step keeps central differences from straddling ReLU, max-pool and
/// bilinear kinks.
fn opts() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-6,
        ..GradCheckOptions::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn conv2d_matches_finite_differences(
        seed in any::<u64>(),
        c in 1usize..4,
        oc in 1usize..4,
        h in 3usize..8,
        w in 3usize..8,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        depthwise in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = if depthwise {
            ConvSpec::depthwise(c.max(2), k).with_stride(stride)
        } else {
            ConvSpec::new(c, oc, k).with_stride(stride)
        };
        let conv = Conv::new("c", spec);
        let mut store = ParameterStore::new();
        conv.init(&mut store, &mut rng).unwrap();
        let x = random([2, spec.in_channels, h, w], &mut rng);
        let rep = check_gradients(&store, &[x], &opts(), |g, s, v| conv.forward(g, s, v[0])).unwrap();
        prop_assert!(rep.max_rel_err() <= PRIMITIVE_TOL, "{:?}", rep.worst());
    }

    #[test]
    fn transposed_conv_matches_finite_differences(seed in any::<u64>(), c in 1usize..4, oc in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let up = ConvTranspose::new("t", c, oc);
        let mut store = ParameterStore::new();
        up.init(&mut store, &mut rng).unwrap();
        let x = random([2, c, h, w], &mut rng);
        let rep = check_gradients(&store, &[x], &opts(), |g, s, v| up.forward(g, s, v[0])).unwrap();
        prop_assert!(rep.max_rel_err() <= PRIMITIVE_TOL, "{:?}", rep.worst());
    }

    #[test]
    fn pooling_matches_finite_differences(seed in any::<u64>(), max in any::<bool>(), h in 2usize..9, w in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if max { PoolKind::Max } else { PoolKind::Avg };
        let spec = PoolSpec::new(kind, 3, 2, 1);
        let x = random([2, 2, h, w], &mut rng);
        let rep = check_gradients(&ParameterStore::new(), &[x], &opts(), |g, _, v| g.pool2d(v[0], &spec)).unwrap();
        prop_assert!(rep.max_rel_err() <= PRIMITIVE_TOL, "{:?}", rep.worst());
    }

    #[test]
    fn resize_matches_finite_differences(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random([1, 2, h, w], &mut rng);
        let rep = check_gradients(&ParameterStore::new(), &[x], &opts(), |g, _, v| g.resize_bilinear(v[0], oh, ow)).unwrap();
        prop_assert!(rep.max_rel_err() <= PRIMITIVE_TOL, "{:?}", rep.worst());
    }

    #[test]
    fn activations_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep clear of the ReLU kinks at 0 and 6.
        let x = Tensor::from_fn([1, 2, 3, 4], |_| {
            let v: f64 = rng.gen_range(0.05..2.9);
            if rng.gen_bool(0.5) { v * 2.0 + 0.1 } else { -v }
        });
        let rep = check_gradients(&ParameterStore::new(), &[x], &opts(), |g, _, v| {
            let a = g.sigmoid(v[0]);
            let b = g.relu(v[0]);
            let c = g.relu6(v[0]);
            g.concat(&[a, b, c])
        }).unwrap();
        prop_assert!(rep.max_rel_err() <= PRIMITIVE_TOL, "{:?}", rep.worst());
    }

    #[test]
    fn deformable_conv_matches_finite_differences(seed in any::<u64>(), c in 1usize..4, h in 3usize..7, w in 3usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = DeformConv::new("d", c, 3);
        let mut store = ParameterStore::new();
        conv.init(&mut store, &mut rng).unwrap();
        let x = random([2, c, h, w], &mut rng);
        // Fractional parts kept away from the bilinear kinks at integers.
        let off = Tensor::from_fn([2, 18, h, w], |_| rng.gen_range(-3i32..=2) as f64 + rng.gen_range(0.1..0.9));
        let rep = check_gradients(&store, &[x, off], &opts(), |g, s, v| conv.forward(g, s, v[0], v[1])).unwrap();
        prop_assert!(rep.max_rel_err() <= PRIMITIVE_TOL, "{:?}", rep.worst());
    }

    #[test]
    fn losses_match_finite_differences(seed in any::<u64>(), n in 1usize..3, h in 1usize..6, w in 1usize..6, lambda in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn([n, 1, h, w], |_| rng.gen_range(-4.0..4.0));
        let gt = Tensor::from_fn([n, 1, h, w], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let cfg = hmmen::losses::LossConfig { lambda, epsilon: 1e-7 };
        let rep = check_gradients(&ParameterStore::new(), &[logits], &opts(), |g, _, v| {
            hmmen::losses::total_loss_var(g, v[0], &gt, &cfg)
        }).unwrap();
        prop_assert!(rep.max_rel_err() <= PRIMITIVE_TOL, "{:?}", rep.worst());
    }

    #[test]
    fn mmeb_matches_finite_differences(seed in any::<u64>(), c in 1usize..4, h in 2usize..7, w in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mmeb::new("m", c);
        let mut store = ParameterStore::new();
        m.init(&mut store, &mut rng).unwrap();
        let inputs = [random([1, c, h, w], &mut rng), random([1, c, h, w], &mut rng)];
        let rep = check_gradients(&store, &inputs, &opts(), |g, s, v| {
            let st = m.forward(g, s, v[0], v[1], &GateOverride::default())?;
            g.concat(&[st.ef_rgb, st.ef_ir])
        }).unwrap();
        prop_assert!(rep.max_rel_err() <= BLOCK_TOL, "{:?}", rep.worst());
    }

    #[test]
    fn fab_matches_finite_differences(seed in any::<u64>(), c in 1usize..3, dc in 1usize..4, h in 1usize..4, w in 1usize..4, lowest in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fab = if lowest { Fab::lowest("f", c) } else { Fab::new("f", c, dc) };
        let mut store = ParameterStore::new();
        fab.init(&mut store, &mut rng).unwrap();
        // A live offset head with fractional offsets.
        let wn = fab.offset2.weight_name();
        let shape = store.value(&wn).unwrap().shape();
        store.set_value(&wn, scaled_uniform(shape, 0.02, &mut rng)).unwrap();
        let bn = fab.offset2.bias_name();
        let shape = store.value(&bn).unwrap().shape();
        store.set_value(&bn, Tensor::from_fn(shape, |_| rng.gen_range(0.3..0.7))).unwrap();
        let (fh, fw) = (2 * h, 2 * w);
        let mut inputs = vec![random([1, c, fh, fw], &mut rng), random([1, c, fh, fw], &mut rng)];
        if !lowest {
            inputs.push(random([1, dc, h, w], &mut rng));
        }
        let rep = check_gradients(&store, &inputs, &opts(), |g, s, v| {
            let dec = v.get(2).copied();
            Ok(fab.forward(g, s, dec, v[0], v[1], false)?.f_align)
        }).unwrap();
        prop_assert!(rep.max_rel_err() <= BLOCK_TOL, "{:?}", rep.worst());
    }
}

#[test]
fn whole_network_gradients_on_a_tiny_model() {
    let cfg = EncoderConfig {
        stage_channels: [2, 2, 3, 3, 4],
        expansion_factor: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for variant in ModelVariant::ALL {
        let net = Network::new(variant, &cfg).unwrap();
        let mut store = net.init_params::<f64>(9).unwrap();
        // Zero biases put pre-activations exactly on ReLU kinks; zero offsets
        // put samples exactly on bilinear kinks. Move off both.
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let shape = store.value(&name).unwrap().shape();
            let value = if name.contains("offset2.bias") {
                Tensor::from_fn(shape, |_| rng.gen_range(0.3..0.7))
            } else if name.contains("offset2.weight") {
                scaled_uniform(shape, 0.02, &mut rng)
            } else if name.ends_with(".bias") {
                scaled_uniform(shape, 0.1, &mut rng)
            } else if name == "head.classifier.weight" {
                scaled_uniform(shape, 1.0, &mut rng)
            } else {
                continue;
            };
            store.set_value(&name, value).unwrap();
        }
        let inputs = [
            Tensor::from_fn([1, 3, 32, 32], |_| rng.gen_range(0.0..1.0)),
            Tensor::from_fn([1, 1, 32, 32], |_| rng.gen_range(0.0..1.0)),
        ];
        let opts = GradCheckOptions {
            max_elements: Some(3),
            check_inputs: false,
            ..opts()
        };
        let rep = check_gradients(&store, &inputs, &opts, |g, s, v| {
            Ok(net.forward(g, s, v[0], v[1], &Hooks::default())?.logits)
        })
        .unwrap();
        let bad: Vec<(&str, f64)> = rep
            .entries
            .iter()
            .filter(|e| e.rel_err() > BLOCK_TOL)
            .map(|e| (e.name.as_str(), e.rel_err()))
            .collect();
        assert!(bad.is_empty(), "{variant}: {bad:?}");
    }
}
