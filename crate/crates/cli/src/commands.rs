use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use hmmen::checkpoint::{config_digest, load_checkpoint, CheckpointMeta};
use hmmen::data::png_io::write_png_u8;
use hmmen::data::{generate_synthetic, load_dataset, load_inputs, split, SamplePair, GT_DIR, IR_DIR, MANIFEST_FILE, RGB_DIR};
use hmmen::metrics::{mean_variance, one_sided_t_test, MetricReport, PerImage, PER_IMAGE_FILE};
use hmmen::network::Network;
use hmmen::train::{evaluate, predict_probabilities, train};
use hmmen::verify::{run_verify, Fault, VerifyOptions};
use hmmen::ParameterStore;

use crate::config::{RunConfig, CONFIG_FILE};
use crate::{NumericFailure, UsageError};

pub const PREDICTIONS_DIR: &str = "predictions";

fn echo(text: &str) {
    print!("{text}");
}

pub fn synth(out: &Path, cfg: &RunConfig, force: bool) -> Result<()> {
    let synth = cfg.synth_config();
    synth.validate()?;
    let occupied = out.is_dir() && fs::read_dir(out).with_context(|| format!("listing {}", out.display()))?.next().is_some();
    if occupied {
        if !force {
            return Err(hmmen::Error::Data(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            ))
            .into());
        }
        for d in [RGB_DIR, IR_DIR, GT_DIR] {
            let p = out.join(d);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
        for f in [MANIFEST_FILE, CONFIG_FILE] {
            let p = out.join(f);
            if p.is_file() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let ds = generate_synthetic(&synth)?;
    ds.save(out)?;
    echo(&cfg.write_beside(out)?);
    println!("wrote {} image triplets to {}", ds.pairs.len(), out.display());
    Ok(())
}

fn split_named(pairs: Vec<SamplePair>, cfg: &RunConfig, seed: u64, which: &str) -> Result<Vec<SamplePair>> {
    if which == "all" {
        return Ok(pairs);
    }
    let (train, val, test) = split(pairs, cfg.split_fractions(), seed)?;
    Ok(match which {
        "train" => train,
        "val" => val,
        "test" => test,
        other => return Err(UsageError(format!("unknown split `{other}` (expected train, val, test or all)")).into()),
    })
}

pub fn train_cmd(data: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let tc = cfg.train_config(out);
    tc.validate()?;
    let pairs = load_dataset(data, cfg.data.image_size)?;
    let (train_set, val_set, _) = split(pairs, cfg.split_fractions(), cfg.seed())?;
    let text = cfg.write_beside(out)?;
    echo(&text);
    let digest = config_digest(&text);
    println!(
        "variant={} train_images={} val_images={} config_digest={digest}",
        tc.variant,
        train_set.len(),
        val_set.len()
    );
    let mut stdout = io::stdout();
    let outcome = train(&train_set, &val_set, &tc, &digest, &mut stdout)?;
    stdout.flush()?;
    println!(
        "best_epoch={} best_val_iou={} best_checkpoint={} last_checkpoint={}",
        outcome.best_epoch,
        outcome.best_val_iou.map_or("none".into(), |v| format!("{v:.6}")),
        outcome.best_checkpoint.display(),
        outcome.last_checkpoint.display()
    );
    Ok(())
}

/// Configuration stored beside a checkpoint by `train`, if any.
pub fn config_for_checkpoint(explicit: Option<&Path>, checkpoint: &Path) -> Result<RunConfig> {
    if explicit.is_some() {
        return RunConfig::load(explicit);
    }
    let beside = checkpoint.parent().map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    RunConfig::load(beside.as_deref())
}

fn restore(checkpoint: &Path) -> Result<(CheckpointMeta, Network, ParameterStore<f32>)> {
    let (meta, store) = load_checkpoint(checkpoint)?;
    let network = Network::new(meta.variant, &meta.encoder)?;
    network.check_params(&store)?;
    Ok((meta, network, store))
}

fn mask_png(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m == 1 { 255 } else { 0 }).collect();
    write_png_u8(path, w, h, 1, &bytes)?;
    Ok(())
}

pub fn eval_cmd(checkpoint: &Path, data: &Path, which: &str, out: &Path, cfg: &RunConfig) -> Result<()> {
    let (meta, network, store) = restore(checkpoint)?;
    let pairs = load_dataset(data, cfg.data.image_size)?;
    let pairs = split_named(pairs, cfg, meta.seed, which)?;
    if pairs.is_empty() {
        return Err(hmmen::Error::Data(format!("split `{which}` of {} is empty", data.display())).into());
    }
    let evaluation = evaluate(&network, &store, &pairs, &cfg.eval_options())?;
    evaluation.report.write(out)?;
    let pred_dir = out.join(PREDICTIONS_DIR);
    fs::create_dir_all(&pred_dir).with_context(|| format!("creating {}", pred_dir.display()))?;
    for (pair, pred) in pairs.iter().zip(&evaluation.predictions) {
        mask_png(&pred_dir.join(format!("{}.png", pair.id)), pred, pair.height(), pair.width())?;
    }
    echo(&cfg.write_beside(out)?);
    println!(
        "checkpoint={} variant={} epoch={} split={which} images={}",
        checkpoint.display(),
        meta.variant,
        meta.epoch,
        pairs.len()
    );
    println!("{}", serde_json::to_string_pretty(&evaluation.report.aggregate)?);
    Ok(())
}

pub fn predict_cmd(
    checkpoint: &Path,
    rgb: &Path,
    ir: &Path,
    out: &Path,
    dump_heatmap: bool,
    cfg: &RunConfig,
) -> Result<()> {
    let (_, network, store) = restore(checkpoint)?;
    let (rgb_t, ir_t) = load_inputs(rgb, ir, cfg.data.image_size)?;
    let (h, w) = (rgb_t.height(), rgb_t.width());
    let probs = predict_probabilities(&network, &store, &rgb_t, &ir_t)?;
    let mask = hmmen::metrics::binarize(&probs, cfg.eval.threshold);
    let stem = rgb
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mask_path = out.join(format!("{stem}_mask.png"));
    mask_png(&mask_path, &mask, h, w)?;
    println!("mask={}", mask_path.display());
    if dump_heatmap {
        let heat = network.dump_heatmap(&store, &rgb_t, &ir_t)?;
        let bytes: Vec<u8> = heat.data().iter().map(|&v| hmmen::data::png_io::quantize(v)).collect();
        let heat_path = out.join(format!("{stem}_heatmap.png"));
        write_png_u8(&heat_path, w, h, 1, &bytes)?;
        println!("heatmap={}", heat_path.display());
    }
    echo(&cfg.write_beside(out)?);
    Ok(())
}

fn per_image_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(PER_IMAGE_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn stats_cmd(a: &Path, b: &Path, alpha: f64, out: Option<&Path>) -> Result<()> {
    let rows_a = MetricReport::read_per_image(&per_image_path(a))?;
    let rows_b = MetricReport::read_per_image(&per_image_path(b))?;
    let index = |rows: &[PerImage]| -> BTreeMap<String, PerImage> { rows.iter().map(|r| (r.id.clone(), r.clone())).collect() };
    let (ia, ib) = (index(&rows_a), index(&rows_b));
    if ia.keys().ne(ib.keys()) {
        return Err(hmmen::Error::Data(format!(
            "reports cover different images ({} vs {} ids, or different names)",
            ia.len(),
            ib.len()
        ))
        .into());
    }
    let ious = |m: &BTreeMap<String, PerImage>| -> Vec<f64> { m.values().map(|r| r.iou).collect() };
    let (xa, xb) = (ious(&ia), ious(&ib));
    let t = one_sided_t_test(&xa, &xb, alpha)?;
    let method = |name: &Path, m: &BTreeMap<String, PerImage>, x: &[f64]| {
        let (mean, var) = mean_variance(x);
        let runtime = m.values().map(|r| r.runtime_seconds).sum::<f64>() / m.len() as f64;
        json!({
            "report": name.display().to_string(),
            "images": x.len(),
            "mean_iou": mean,
            "variance": var,
            "stddev": var.sqrt(),
            "runtime_seconds_per_image": runtime,
        })
    };
    let doc = json!({
        "metric": "iou",
        "alpha": alpha,
        "t_test": {
            "statistic": t.statistic,
            "p_value": t.p_value,
            "degrees_of_freedom": t.degrees_of_freedom,
            "significant": t.significant,
            "direction": t.direction,
        },
        "methods": [method(a, &ia, &xa), method(b, &ib, &xb)],
    });
    let text = serde_json::to_string_pretty(&doc)?;
    println!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("stats.json"), &text).with_context(|| format!("writing stats to {}", dir.display()))?;
    }
    Ok(())
}

pub fn verify_cmd(seed: u64, fault: Option<Fault>) -> Result<()> {
    let results = run_verify(&VerifyOptions { fault, seed });
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{} {:<width$} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    println!("{}/{} checks passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        bail!(NumericFailure(format!("failing checks: {}", failed.join(", "))))
    }
}
