//! Fast invariant suite behind the `verify` command.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{deform_conv2d, offset_channels};
use crate::error::Result;
use crate::fab::Fab;
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::graph::{Graph, Var};
use crate::losses::{bce_loss, dice_loss, total_loss, LossConfig};
use crate::metrics::{curve_metrics, object_recall, pixel_metrics};
use crate::mmeb::{GateOverride, Mmeb};
use crate::nn::{Conv, ConvTranspose, DeformConv};
use crate::numerics::{conv2d, ConvSpec, PoolKind, PoolSpec};
use crate::params::{scaled_uniform, ParameterStore};
use crate::tensor::Tensor;

const PRIMITIVE_TOL: f64 = 1e-4;
const BLOCK_TOL: f64 = 1e-3;

/// Deliberate defects for exercising the suite's failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Perturbs the weights fed to the deformable convolution in the
    /// zero-offset equivalence check.
    CorruptDeformWeights,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub fault: Option<Fault>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(&VerifyOptions) -> Result<(bool, String)>;

pub const CHECKS: &[(&str, Check)] = &[
    ("grad_conv2d", grad_conv2d),
    ("grad_conv_transpose", grad_conv_transpose),
    ("grad_pool", grad_pool),
    ("grad_resize", grad_resize),
    ("grad_sigmoid", grad_sigmoid),
    ("grad_deform_conv2d", grad_deform),
    ("grad_losses", grad_losses),
    ("grad_mmeb", grad_mmeb),
    ("grad_fab", grad_fab),
    ("deform_zero_offset", deform_zero_offset),
    ("mmeb_zero_gate_identity", mmeb_identity),
    ("fab_zero_branch_identity", fab_identity),
    ("loss_closed_forms", loss_closed_forms),
    ("metric_oracles", metric_oracles),
];

pub fn run_verify(opts: &VerifyOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check(opts) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn rng(opts: &VerifyOptions, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn random(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn within(err: f64, tol: f64, what: &str) -> (bool, String) {
    (err <= tol, format!("{what} max rel err {err:.2e} (tol {tol:.0e})"))
}

fn grad_conv2d(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 1);
    let mut worst: f64 = 0.0;
    for spec in [
        ConvSpec::new(3, 4, 3),
        ConvSpec::new(3, 2, 3).with_stride(2),
        ConvSpec::new(3, 5, 1),
        ConvSpec::depthwise(3, 3).with_stride(2),
    ] {
        let conv = Conv::new("c", spec);
        let mut store = ParameterStore::new();
        conv.init(&mut store, &mut r)?;
        let x = random([2, 3, 6, 5], &mut r);
        let rep = check_gradients(&store, &[x], &GradCheckOptions::default(), |g, s, v| conv.forward(g, s, v[0]))?;
        worst = worst.max(rep.max_rel_err());
    }
    Ok(within(worst, PRIMITIVE_TOL, "conv2d"))
}

fn grad_conv_transpose(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 2);
    let up = ConvTranspose::new("t", 3, 2);
    let mut store = ParameterStore::new();
    up.init(&mut store, &mut r)?;
    let x = random([2, 3, 3, 4], &mut r);
    let rep = check_gradients(&store, &[x], &GradCheckOptions::default(), |g, s, v| up.forward(g, s, v[0]))?;
    Ok(within(rep.max_rel_err(), PRIMITIVE_TOL, "conv_transpose2x2"))
}

fn grad_pool(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 3);
    let store = ParameterStore::new();
    let mut worst: f64 = 0.0;
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let x = random([2, 2, 7, 6], &mut r);
        let spec = PoolSpec::new(kind, 3, 2, 1);
        let rep = check_gradients(&store, &[x], &GradCheckOptions::default(), |g, _, v| g.pool2d(v[0], &spec))?;
        worst = worst.max(rep.max_rel_err());
    }
    Ok(within(worst, PRIMITIVE_TOL, "pool2d"))
}

fn grad_resize(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 4);
    let x = random([1, 2, 4, 3], &mut r);
    let rep = check_gradients(&ParameterStore::new(), &[x], &GradCheckOptions::default(), |g, _, v| {
        g.resize_bilinear(v[0], 7, 6)
    })?;
    Ok(within(rep.max_rel_err(), PRIMITIVE_TOL, "resize_bilinear"))
}

fn grad_sigmoid(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 5);
    let x = Tensor::from_fn([1, 2, 3, 4], |_| r.gen_range(-4.0..4.0));
    let rep = check_gradients(&ParameterStore::new(), &[x], &GradCheckOptions::default(), |g, _, v| Ok(g.sigmoid(v[0])))?;
    Ok(within(rep.max_rel_err(), PRIMITIVE_TOL, "sigmoid"))
}

/// Offsets with fractional parts away from 0, where bilinear sampling is
/// smooth.
fn smooth_offsets(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(-2i32..=1) as f64 + r.gen_range(0.15..0.85))
}

fn grad_deform(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 6);
    let conv = DeformConv::new("d", 2, 3);
    let mut store = ParameterStore::new();
    conv.init(&mut store, &mut r)?;
    let x = random([2, 2, 5, 6], &mut r);
    let off = smooth_offsets([2, offset_channels((3, 3)), 5, 6], &mut r);
    let rep = check_gradients(&store, &[x, off], &GradCheckOptions::default(), |g, s, v| {
        conv.forward(g, s, v[0], v[1])
    })?;
    Ok(within(rep.max_rel_err(), PRIMITIVE_TOL, "deform_conv2d"))
}

fn grad_losses(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 7);
    let logits = Tensor::from_fn([2, 1, 4, 5], |_| r.gen_range(-3.0..3.0));
    let gt = Tensor::from_fn([2, 1, 4, 5], |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
    let store = ParameterStore::new();
    let opt = GradCheckOptions::default();
    let bce = check_gradients(&store, std::slice::from_ref(&logits), &opt, |g, _, v| g.bce_loss(v[0], &gt))?;
    let dice = check_gradients(&store, &[logits], &opt, |g, _, v| g.dice_loss(v[0], &gt, 1e-7))?;
    Ok(within(bce.max_rel_err().max(dice.max_rel_err()), PRIMITIVE_TOL, "bce/dice"))
}

fn grad_mmeb(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 8);
    let m = Mmeb::new("m", 2);
    let mut store = ParameterStore::new();
    m.init(&mut store, &mut r)?;
    let inputs = [random([1, 2, 6, 6], &mut r), random([1, 2, 6, 6], &mut r)];
    let rep = check_gradients(&store, &inputs, &GradCheckOptions::default(), |g, s, v| {
        let st = m.forward(g, s, v[0], v[1], &GateOverride::default())?;
        g.concat(&[st.ef_rgb, st.ef_ir])
    })?;
    Ok(within(rep.max_rel_err(), BLOCK_TOL, "mmeb"))
}

/// FAB with a non-zero offset head so the sampled positions are fractional.
fn fab_with_live_offsets(r: &mut ChaCha8Rng) -> Result<(Fab, ParameterStore<f64>)> {
    let fab = Fab::new("f", 2, 3);
    let mut store = ParameterStore::new();
    fab.init(&mut store, r)?;
    let w = store.value(&fab.offset2.weight_name())?.shape();
    store.set_value(&fab.offset2.weight_name(), scaled_uniform(w, 0.02, r))?;
    let b = store.value(&fab.offset2.bias_name())?.shape();
    store.set_value(&fab.offset2.bias_name(), Tensor::from_fn(b, |_| r.gen_range(0.3..0.7)))?;
    Ok((fab, store))
}

fn grad_fab(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 9);
    let (fab, store) = fab_with_live_offsets(&mut r)?;
    let inputs = [random([1, 3, 3, 3], &mut r), random([1, 2, 6, 6], &mut r), random([1, 2, 6, 6], &mut r)];
    let rep = check_gradients(&store, &inputs, &GradCheckOptions::default(), |g, s, v| {
        Ok(fab.forward(g, s, Some(v[0]), v[1], v[2], false)?.f_align)
    })?;
    Ok(within(rep.max_rel_err(), BLOCK_TOL, "fab"))
}

fn deform_zero_offset(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 10);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let (n, c, oc) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
        let (h, w) = (r.gen_range(3..=9), r.gen_range(3..=9));
        let k = if r.gen_bool(0.5) { 3 } else { 1 };
        let spec = ConvSpec::new(c, oc, k);
        let x = Tensor::from_fn([n, c, h, w], |_| r.gen_range(-1.0f32..1.0));
        let wt = Tensor::from_fn(spec.weight_shape(), |_| r.gen_range(-1.0f32..1.0));
        let b = Tensor::from_fn(spec.bias_shape(), |_| r.gen_range(-1.0f32..1.0));
        let mut wd = wt.clone();
        if opts.fault == Some(Fault::CorruptDeformWeights) {
            wd.data_mut()[0] += 0.05;
        }
        let zeros = Tensor::zeros([n, offset_channels(spec.kernel), h, w]);
        let a = deform_conv2d(&x, &zeros, &wd, Some(&b), &spec)?;
        let p = conv2d(&x, &wt, Some(&b), &spec)?;
        worst = worst.max(a.max_abs_diff(&p));
    }
    Ok((worst <= 1e-5, format!("max abs diff {worst:.2e} over 100 trials (tol 1e-5)")))
}

fn mmeb_identity(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 11);
    let m = Mmeb::new("m", 3);
    let mut store = ParameterStore::new();
    m.init(&mut store, &mut r)?;
    let (a, b) = (random([2, 3, 6, 4], &mut r), random([2, 3, 6, 4], &mut r));
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let st = m.forward(&mut g, &store, va, vb, &GateOverride::both(0.0))?;
    let ok = g.value(st.ef_rgb) == &a && g.value(st.ef_ir) == &b;
    Ok((ok, format!("outputs {} the inputs bit for bit", if ok { "equal" } else { "differ from" })))
}

fn fab_identity(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 12);
    let (fab, mut store) = fab_with_live_offsets(&mut r)?;
    for d in [fab.deform_ir.conv.clone(), fab.deform_llc.clone().expect("non-deepest block").conv] {
        for name in [d.weight_name(), d.bias_name()] {
            let shape = store.value(&name)?.shape();
            store.set_value(&name, Tensor::zeros(shape))?;
        }
    }
    let f_rgb = random([1, 2, 6, 6], &mut r);
    let mut g = Graph::new();
    let vars: Vec<Var> = [random([1, 3, 3, 3], &mut r), f_rgb.clone(), random([1, 2, 6, 6], &mut r)]
        .into_iter()
        .map(|t| g.input(t))
        .collect();
    let st = fab.forward(&mut g, &store, Some(vars[0]), vars[1], vars[2], false)?;
    let ok = g.value(st.f_align) == &f_rgb;
    Ok((ok, format!("f_align {} f_rgb exactly", if ok { "equals" } else { "differs from" })))
}

fn loss_closed_forms(_: &VerifyOptions) -> Result<(bool, String)> {
    let one = |v: &[f64]| Tensor::from_vec([1, 1, 1, v.len()], v.to_vec());
    let bce = bce_loss(&one(&[0.0])?, &one(&[1.0])?)?;
    let logits = one(&[0.0, 0.0])?;
    let gt = one(&[1.0, 0.0])?;
    let dice = dice_loss(&logits, &gt, 1e-7)?;
    let total = total_loss(&logits, &gt, &LossConfig { lambda: 2.0, epsilon: 1e-7 })?;
    let ok = (bce - std::f64::consts::LN_2).abs() <= 1e-9
        && (dice - 1.0 / 3.0).abs() <= 1e-6
        && (total - 1.359814).abs() <= 1e-5;
    Ok((ok, format!("bce {bce:.10}, dice {dice:.8}, total(lambda=2) {total:.7}")))
}

fn brute_iou(pred: &[u8], gt: &[u8]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p == 1 && **g == 1).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p == 1 || **g == 1).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
fn brute_roc(probs: &[f64], gt: &[u8]) -> Option<f64> {
    let pos: Vec<f64> = probs.iter().zip(gt).filter(|(_, g)| **g == 1).map(|(p, _)| *p).collect();
    let neg: Vec<f64> = probs.iter().zip(gt).filter(|(_, g)| **g == 0).map(|(p, _)| *p).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Minimum-label propagation over the 8-neighbourhood until stable.
fn brute_components(mask: &[u8], h: usize, w: usize) -> Vec<usize> {
    let mut label: Vec<usize> = (0..mask.len()).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for i in (0..mask.len()).filter(|&i| mask[i] == 1) {
            let (y, x) = (i / w, i % w);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let j = yy * w + xx;
                    if mask[j] == 1 && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
        }
    }
    label
}

fn brute_object_recall(pred: &[u8], gt: &[u8], h: usize, w: usize) -> f64 {
    let label = brute_components(gt, h, w);
    let mut roots: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == 1).map(|i| label[i]).collect();
    roots.sort_unstable();
    roots.dedup();
    if roots.is_empty() {
        return 1.0;
    }
    let hits = roots
        .iter()
        .filter(|&&root| {
            let members: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == 1 && label[i] == root).collect();
            let covered = members.iter().filter(|&&i| pred[i] == 1).count();
            2 * covered > members.len()
        })
        .count();
    hits as f64 / roots.len() as f64
}

fn metric_oracles(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut r = rng(opts, 13);
    let (h, w) = (16, 16);
    let mut failures = 0;
    for _ in 0..1000 {
        let density = r.gen_range(0.0..0.6);
        let gt: Vec<u8> = (0..h * w).map(|_| u8::from(r.gen_bool(density))).collect();
        let probs: Vec<f64> = (0..h * w).map(|_| (r.gen_range(0..11) as f64) / 10.0).collect();
        let pred: Vec<u8> = probs.iter().map(|&p| u8::from(p > 0.5)).collect();
        let m = pixel_metrics(&pred, &gt)?;
        let iou = brute_iou(&pred, &gt);
        let curves = curve_metrics(&probs, &gt)?;
        let roc_ok = match (curves.roc_auc, brute_roc(&probs, &gt)) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
            (None, None) => true,
            _ => false,
        };
        let recall = object_recall(&pred, &gt, h, w, 0.5)?;
        let ok = m.iou == iou
            && (m.dice - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12
            && roc_ok
            && recall == brute_object_recall(&pred, &gt, h, w);
        failures += usize::from(!ok);
    }
    Ok((failures == 0, format!("{failures} of 1000 random 16x16 cases disagree")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn injected_deform_fault_is_named() {
        let clean = deform_zero_offset(&VerifyOptions::default()).unwrap();
        assert!(clean.0, "{}", clean.1);
        let broken = deform_zero_offset(&VerifyOptions {
            fault: Some(Fault::CorruptDeformWeights),
            seed: 0,
        })
        .unwrap();
        assert!(!broken.0);
    }

    #[test]
    fn every_check_passes() {
        for r in run_verify(&VerifyOptions::default()) {
            println!("{:<26} {} {:.2}s {}", r.name, r.passed, r.seconds, r.detail);
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
