//! Optimisation loop: Adam with a step-decay schedule, per-epoch validation,
//! best/last checkpoints and a history CSV.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{augment_train, collate, SamplePair};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{total_loss_var, LossConfig};
use crate::metrics::{MetricAccumulator, MetricReport, DEFAULT_THRESHOLD};
use crate::network::{Hooks, ModelVariant, Network};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

/// Stream offset separating the data-order generator from parameter init.
const DATA_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub decay_start: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub variant: ModelVariant,
    pub checkpoint_dir: PathBuf,
    pub augment: bool,
    pub threshold: f64,
    pub overlap_threshold: f64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 5,
            base_lr: 1e-4,
            decay_factor: 0.5,
            decay_every: 25,
            decay_start: 150,
            loss: LossConfig::default(),
            seed: 0,
            variant: ModelVariant::Hmmen,
            checkpoint_dir: PathBuf::from("checkpoints"),
            augment: true,
            threshold: DEFAULT_THRESHOLD,
            overlap_threshold: 0.5,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every == 0 {
            return fail("decay_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return fail(format!("threshold must lie in [0, 1), got {}", self.threshold));
        }
        self.loss.validate()
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            threshold: self.threshold,
            overlap_threshold: self.overlap_threshold,
        }
    }
}

/// Learning rate for a 1-based epoch:
/// `base_lr * decay_factor^max(0, floor((epoch - decay_start) / decay_every))`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let blocks = epoch.saturating_sub(cfg.decay_start) / cfg.decay_every.max(1);
    cfg.base_lr * cfg.decay_factor.powi(blocks as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }
}

/// Applies one bias-corrected Adam update from the gradients held in `store`.
/// Gradients are checked before anything is modified; a non-finite entry
/// aborts with the parameter's name. With `lr == 0` only the moments move.
pub fn adam_step<T: Real>(store: &mut ParameterStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    for (name, p) in store.iter() {
        if !p.grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}` is not finite")));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let b1 = T::lit(beta1);
    let b2 = T::lit(beta2);
    let c1 = T::lit(1.0 - beta1.powi(t));
    let c2 = T::lit(1.0 - beta2.powi(t));
    let eps = T::lit(eps);
    let lr_t = T::lit(lr);
    let one = T::one();
    for (name, p) in store.iter_mut() {
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
        let values = p.value.data_mut();
        for (((w, &g), m), v) in values
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            if lr != 0.0 {
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub overlap_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            overlap_threshold: 0.5,
        }
    }
}

/// Foreground probabilities of one image pair, flattened row-major.
pub fn predict_probabilities(
    network: &Network,
    store: &ParameterStore<f32>,
    rgb: &Tensor<f32>,
    ir: &Tensor<f32>,
) -> Result<Vec<f64>> {
    let logits = network.predict(store, rgb, ir)?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("network produced non-finite logits".into()));
    }
    Ok(logits
        .data()
        .iter()
        .map(|&x| 1.0 / (1.0 + (-(x as f64)).exp()))
        .collect())
}

pub struct Evaluation {
    pub report: MetricReport,
    /// Binary prediction per pair, in input order.
    pub predictions: Vec<Vec<u8>>,
}

/// Scores every pair one image at a time. Training-time validation and the
/// standalone evaluation share this path.
pub fn evaluate(
    network: &Network,
    store: &ParameterStore<f32>,
    pairs: &[SamplePair],
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let mut acc = MetricAccumulator::new(opts.threshold, opts.overlap_threshold);
    let mut predictions = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let start = Instant::now();
        let probs = predict_probabilities(network, store, &pair.rgb, &pair.ir)?;
        let seconds = start.elapsed().as_secs_f64();
        let pred = acc.add(&pair.id, &probs, &pair.gt_mask(), pair.height(), pair.width(), seconds)?;
        predictions.push(pred);
    }
    Ok(Evaluation {
        report: acc.finish()?,
        predictions,
    })
}

/// Network, parameters and optimiser state for step-by-step training.
pub struct Trainer {
    pub network: Network,
    pub store: ParameterStore<f32>,
    pub adam: AdamState<f32>,
    pub loss: LossConfig,
}

impl Trainer {
    pub fn new(variant: ModelVariant, encoder: &EncoderConfig, loss: LossConfig, seed: u64) -> Result<Self> {
        loss.validate()?;
        let network = Network::new(variant, encoder)?;
        let store = network.init_params(seed)?;
        Ok(Self {
            network,
            store,
            adam: AdamState::new(AdamConfig::default()),
            loss,
        })
    }

    /// Loss of a batch under the current parameters, with gradients
    /// accumulated into the store.
    pub fn loss_and_grad(&mut self, batch: &[&SamplePair]) -> Result<f64> {
        let (rgb, ir, gt) = collate(batch)?;
        self.store.zero_grad();
        let mut g = Graph::new();
        let r = g.input(rgb);
        let i = g.input(ir);
        let out = self.network.forward(&mut g, &self.store, r, i, &Hooks::default())?;
        let loss = total_loss_var(&mut g, out.logits, &gt, &self.loss)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {value}")));
        }
        g.backward(loss)?.accumulate_into(&g, &mut self.store)?;
        Ok(value)
    }

    /// One forward/backward/update; returns the pre-update loss.
    pub fn step(&mut self, batch: &[&SamplePair], lr: f64) -> Result<f64> {
        let loss = self.loss_and_grad(batch)?;
        adam_step(&mut self.store, &mut self.adam, lr)?;
        Ok(loss)
    }

    pub fn evaluate(&self, pairs: &[SamplePair], opts: &EvalOptions) -> Result<Evaluation> {
        evaluate(&self.network, &self.store, pairs, opts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_iou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_iou: Option<f64>,
    pub history: Vec<HistoryRow>,
}

fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["epoch", "lr", "train_loss", "val_iou"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Trains `cfg.variant` from a seeded initialisation. Writes `best.ckpt`,
/// `last.ckpt` and `history.csv` into `cfg.checkpoint_dir` and one
/// `key=value` progress line per epoch to `progress`. `last.ckpt` holds the
/// initialisation until the first epoch completes. On a non-finite loss or
/// gradient the run aborts and the checkpoints from the last completed epoch
/// stay on disk.
pub fn train(
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    cfg: &TrainConfig,
    config_digest: &str,
    progress: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and validation sets (got {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let dir = &cfg.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let best_path = dir.join(BEST_CHECKPOINT);
    let last_path = dir.join(LAST_CHECKPOINT);
    let history_path = dir.join(HISTORY_FILE);

    let mut trainer = Trainer::new(cfg.variant, &cfg.encoder, cfg.loss, cfg.seed)?;
    let meta = |epoch: usize, lr: f64, snapshot: BTreeMap<String, f64>| CheckpointMeta {
        variant: cfg.variant,
        epoch,
        learning_rate: lr,
        seed: cfg.seed,
        config_digest: config_digest.to_string(),
        metric_snapshot: snapshot,
        encoder: cfg.encoder.clone(),
    };

    let mut history = Vec::new();
    write_history(&history_path, &history)?;
    let init = meta(0, lr_at(1, cfg), BTreeMap::new());
    save_checkpoint(&last_path, &init, &trainer.store)?;
    if cfg.epochs == 0 {
        save_checkpoint(&best_path, &init, &trainer.store)?;
        return Ok(TrainOutcome {
            best_checkpoint: best_path,
            last_checkpoint: last_path,
            best_epoch: 0,
            best_val_iou: None,
            history,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(DATA_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let opts = cfg.eval_options();
    let mut best: Option<(usize, f64)> = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let owned: Vec<SamplePair> = if cfg.augment {
                chunk.iter().map(|&i| augment_train(&train_set[i], &mut rng)).collect()
            } else {
                chunk.iter().map(|&i| train_set[i].clone()).collect()
            };
            let batch: Vec<&SamplePair> = owned.iter().collect();
            loss_sum += trainer.step(&batch, lr)?;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_iou = trainer.evaluate(val_set, &opts)?.report.aggregate.iou;
        let row = HistoryRow {
            epoch,
            lr,
            train_loss,
            val_iou,
        };
        history.push(row);
        write_history(&history_path, &history)?;

        let snapshot: BTreeMap<String, f64> = [("train_loss".to_string(), train_loss), ("val_iou".to_string(), val_iou)]
            .into_iter()
            .collect();
        let m = meta(epoch, lr, snapshot);
        save_checkpoint(&last_path, &m, &trainer.store)?;
        let improved = best.is_none_or(|(_, b)| val_iou > b);
        if improved {
            best = Some((epoch, val_iou));
            save_checkpoint(&best_path, &m, &trainer.store)?;
        }
        let (best_epoch, best_iou) = best.expect("set on the first epoch");
        writeln!(
            progress,
            "epoch={epoch} lr={lr:e} train_loss={train_loss:.6} val_iou={val_iou:.6} best_epoch={best_epoch} best_val_iou={best_iou:.6} seconds={:.2}",
            start.elapsed().as_secs_f64()
        )
        .map_err(|e| Error::io(Path::new("<progress>"), e))?;
    }
    let (best_epoch, best_iou) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_epoch,
        best_val_iou: Some(best_iou),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_the_pinned_reading() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(1, &cfg), 1e-4);
        assert_eq!(lr_at(100, &cfg), 1e-4);
        assert_eq!(lr_at(174, &cfg), 1e-4);
        assert_eq!(lr_at(175, &cfg), 5e-5);
        assert_eq!(lr_at(200, &cfg), 2.5e-5);
        let mut prev = f64::INFINITY;
        for e in 1..=400 {
            let lr = lr_at(e, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn one_scalar(value: f64, grad: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::full([1, 1, 1, 1], value)).unwrap();
        s.accumulate_grad("w", &Tensor::full([1, 1, 1, 1], grad)).unwrap();
        s
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8f64, 1e-3f64, 1.0f64);
        let mut s = one_scalar(0.25, g);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &mut st, lr).unwrap();
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let expected = 0.25 - lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps);
        assert!((s.value("w").unwrap().item() - expected).abs() <= 1e-12);
    }

    #[test]
    fn zero_gradient_decays_moments_only() {
        let mut s = one_scalar(0.5, 2.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &mut st, 1e-2).unwrap();
        let after_one = s.value("w").unwrap().item();
        let (m1, v1) = st.moments("w").map(|(m, v)| (m.item(), v.item())).unwrap();
        s.zero_grad();
        adam_step(&mut s, &mut st, 0.0).unwrap();
        assert_eq!(s.value("w").unwrap().item(), after_one);
        let (m2, v2) = st.moments("w").map(|(m, v)| (m.item(), v.item())).unwrap();
        assert!((m2 - 0.9 * m1).abs() < 1e-15 && (v2 - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut s = one_scalar(0.0, -3.0);
        let mut st = AdamState::new(AdamConfig::default());
        let lr = 1e-3;
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = s.value("w").unwrap().item();
            adam_step(&mut s, &mut st, lr).unwrap();
            last = s.value("w").unwrap().item() - before;
        }
        assert!((last - lr).abs() < 1e-6, "{last}");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = one_scalar(1.0, f64::NAN);
        let mut st = AdamState::new(AdamConfig::default());
        match adam_step(&mut s, &mut st, 1e-3) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("`w`")),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.value("w").unwrap().item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn zero_lr_is_bit_exact() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::from_vec([1, 1, 1, 3], vec![-0.0f32, 1e-30, -7.5]).unwrap()).unwrap();
        s.accumulate_grad("a", &Tensor::from_vec([1, 1, 1, 3], vec![-1.0, 2.0, 1e-3]).unwrap()).unwrap();
        let before: Vec<u32> = s.value("a").unwrap().data().iter().map(|v| v.to_bits()).collect();
        adam_step(&mut s, &mut AdamState::new(AdamConfig::default()), 0.0).unwrap();
        let after: Vec<u32> = s.value("a").unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }
}
