//! Central finite-difference verification of tape gradients.
//!
//! The function under test may return a tensor of any shape; it is reduced to
//! a scalar by a dot product with a fixed pseudo-random probe so every output
//! element contributes a distinct weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_elements: Option<usize>,
    /// Restrict parameter checks to names accepted by this filter.
    pub param_filter: Option<fn(&str) -> bool>,
    pub check_inputs: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_elements: None,
            param_filter: None,
            check_inputs: true,
            seed: 0x9e37_79b9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradEntry {
    /// `||a - n|| / max(||a||, ||n||)`, or the absolute gap when both vanish.
    pub fn rel_err(&self) -> f64 {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (a, n) in self.analytic.iter().zip(&self.numeric) {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale < 1e-12 {
            diff.sqrt()
        } else {
            diff.sqrt() / scale
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(GradEntry::rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.rel_err()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Largest per-scalar `|a - n| / max(|a|, |n|, floor)`.
    pub fn max_scalar_rel_err(&self, floor: f64) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.analytic.iter().zip(&e.numeric))
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    pub fn checked_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.analytic.len()).sum()
    }
}

/// Fixed probe for reducing an output to a scalar.
pub fn probe(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn chosen(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut idx: Vec<usize> = (0..len).collect();
            for i in 0..m {
                let j = rng.gen_range(i..len);
                idx.swap(i, j);
            }
            let mut picked = idx[..m].to_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

/// Compares tape gradients of `build` with central differences for every
/// input tensor and every (filtered) parameter.
pub fn check_gradients<F>(
    store: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParameterStore<f64>, inputs: &[Tensor<f64>], probe_t: Option<&Tensor<f64>>| -> Result<(f64, Graph<f64>, Vec<Var>, Var, Tensor<f64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, store, &vars)?;
        let p = match probe_t {
            Some(p) => p.clone(),
            None => probe(g.shape(out), opts.seed),
        };
        let s = g.dot(out, &p)?;
        let v = g.value(s).item();
        Ok((v, g, vars, s, p))
    };

    let (_, g, vars, root, probe_t) = eval(store, inputs, None)?;
    let grads = g.backward(root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let h = opts.step;

    if opts.check_inputs {
        for (k, (v, t)) in vars.iter().zip(inputs).enumerate() {
            let zero = Tensor::zeros(t.shape());
            let analytic_full = grads.get(*v).unwrap_or(&zero);
            let idx = chosen(t.len(), opts.max_elements, &mut rng);
            let mut entry = GradEntry {
                name: format!("input{k}"),
                analytic: Vec::with_capacity(idx.len()),
                numeric: Vec::with_capacity(idx.len()),
            };
            for &i in &idx {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fp = eval(store, &plus, Some(&probe_t))?.0;
                let fm = eval(store, &minus, Some(&probe_t))?.0;
                entry.analytic.push(analytic_full.data()[i]);
                entry.numeric.push((fp - fm) / (2.0 * h));
            }
            report.entries.push(entry);
        }
    }

    let bound: Vec<(Var, String)> = g.bindings().to_vec();
    for (v, name) in bound {
        if opts.param_filter.is_some_and(|f| !f(&name)) {
            continue;
        }
        let value = store.value(&name)?;
        let zero = Tensor::zeros(value.shape());
        let analytic_full = grads.get(v).unwrap_or(&zero);
        let idx = chosen(value.len(), opts.max_elements, &mut rng);
        let mut entry = GradEntry {
            name: name.clone(),
            analytic: Vec::with_capacity(idx.len()),
            numeric: Vec::with_capacity(idx.len()),
        };
        let mut perturbed = store.clone();
        for &i in &idx {
            let orig = value.data()[i];
            perturbed.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let fp = eval(&perturbed, inputs, Some(&probe_t))?.0;
            perturbed.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let fm = eval(&perturbed, inputs, Some(&probe_t))?.0;
            perturbed.get_mut(&name)?.value.data_mut()[i] = orig;
            entry.analytic.push(analytic_full.data()[i]);
            entry.numeric.push((fp - fm) / (2.0 * h));
        }
        report.entries.push(entry);
    }
    Ok(report)
}
