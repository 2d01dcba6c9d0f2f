use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{binarize, curve_metrics, mean_variance, object_counts, pixel_metrics};
use crate::error::{Error, Result};

pub const PER_IMAGE_FILE: &str = "per_image.csv";
pub const AGGREGATE_FILE: &str = "aggregate.json";

/// One row of the per-image CSV; column order is the field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub id: String,
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub pixel_accuracy: f64,
    pub runtime_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub num_images: usize,
    pub threshold: f64,
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub pixel_accuracy: f64,
    /// `None` when the pooled ground truth has a single class.
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub object_recall: f64,
    pub iou_variance: f64,
    pub iou_stddev: f64,
    pub runtime_seconds_per_image: f64,
    /// The same values under the short column labels used in comparison
    /// tables: `AP` is pixel accuracy and `AUC` the precision-recall area.
    pub table1: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<PerImage>,
    pub aggregate: Aggregate,
}

/// Collects per-image results and pools pixels for the curve metrics.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    threshold: f64,
    overlap_threshold: f64,
    rows: Vec<PerImage>,
    probabilities: Vec<f64>,
    labels: Vec<u8>,
    detected: usize,
    components: usize,
}

impl MetricAccumulator {
    pub fn new(threshold: f64, overlap_threshold: f64) -> Self {
        Self {
            threshold,
            overlap_threshold,
            rows: Vec::new(),
            probabilities: Vec::new(),
            labels: Vec::new(),
            detected: 0,
            components: 0,
        }
    }

    /// Scores one image and returns its binarised prediction.
    pub fn add(
        &mut self,
        id: &str,
        probabilities: &[f64],
        gt: &[u8],
        height: usize,
        width: usize,
        runtime_seconds: f64,
    ) -> Result<Vec<u8>> {
        let pred = binarize(probabilities, self.threshold);
        let m = pixel_metrics(&pred, gt)?;
        let (hit, total) = object_counts(&pred, gt, height, width, self.overlap_threshold)?;
        self.detected += hit;
        self.components += total;
        self.probabilities.extend_from_slice(probabilities);
        self.labels.extend_from_slice(gt);
        self.rows.push(PerImage {
            id: id.to_string(),
            iou: m.iou,
            dice: m.dice,
            precision: m.precision,
            sensitivity: m.sensitivity,
            pixel_accuracy: m.pixel_accuracy,
            runtime_seconds,
        });
        Ok(pred)
    }

    pub fn finish(self) -> Result<MetricReport> {
        if self.rows.is_empty() {
            return Err(Error::Contract("no images were evaluated".into()));
        }
        let curves = curve_metrics(&self.probabilities, &self.labels)?;
        let n = self.rows.len() as f64;
        let mean = |f: fn(&PerImage) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        let ious: Vec<f64> = self.rows.iter().map(|r| r.iou).collect();
        let (_, iou_variance) = mean_variance(&ious);
        let aggregate = Aggregate {
            num_images: self.rows.len(),
            threshold: self.threshold,
            iou: mean(|r| r.iou),
            dice: mean(|r| r.dice),
            precision: mean(|r| r.precision),
            sensitivity: mean(|r| r.sensitivity),
            pixel_accuracy: mean(|r| r.pixel_accuracy),
            roc_auc: curves.roc_auc,
            pr_auc: curves.pr_auc,
            object_recall: if self.components == 0 {
                1.0
            } else {
                self.detected as f64 / self.components as f64
            },
            iou_variance,
            iou_stddev: iou_variance.sqrt(),
            runtime_seconds_per_image: mean(|r| r.runtime_seconds),
            table1: BTreeMap::new(),
        };
        let mut report = MetricReport {
            per_image: self.rows,
            aggregate,
        };
        report.aggregate.table1 = table1(&report.aggregate);
        Ok(report)
    }
}

fn table1(a: &Aggregate) -> BTreeMap<String, Option<f64>> {
    [
        ("Se", Some(a.sensitivity)),
        ("Dice", Some(a.dice)),
        ("AUC", a.pr_auc),
        ("AP", Some(a.pixel_accuracy)),
        ("Pr", Some(a.precision)),
        ("IoU", Some(a.iou)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl MetricReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(PER_IMAGE_FILE);
        let mut w = csv::Writer::from_path(&csv_path)?;
        for row in &self.per_image {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(AGGREGATE_FILE);
        let text = serde_json::to_string_pretty(&self.aggregate)?;
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
    }

    pub fn read_per_image(path: &Path) -> Result<Vec<PerImage>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Data(format!("cannot read {}: {e}", path.display())),
            _ => Error::Csv(e),
        })?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<PerImage>, _>>()?;
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut acc = MetricAccumulator::new(0.5, 0.5);
        acc.add("a", &[0.9, 0.1, 0.2, 0.8], &[1, 0, 0, 1], 2, 2, 0.01).unwrap();
        acc.add("b", &[0.9, 0.6, 0.2, 0.1], &[1, 0, 0, 1], 2, 2, 0.03).unwrap();
        let report = acc.finish().unwrap();
        report.write(dir.path()).unwrap();
        let rows = MetricReport::read_per_image(&dir.path().join(PER_IMAGE_FILE)).unwrap();
        assert_eq!(rows, report.per_image);
        let a = &report.aggregate;
        assert!((a.iou_stddev * a.iou_stddev - a.iou_variance).abs() < 1e-12);
        assert!((a.runtime_seconds_per_image - 0.02).abs() < 1e-12);
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(AGGREGATE_FILE)).unwrap()).unwrap();
        for key in ["Se", "Dice", "AUC", "AP", "Pr", "IoU"] {
            assert!(json["table1"].get(key).is_some(), "{key}");
        }
        let header = std::fs::read_to_string(dir.path().join(PER_IMAGE_FILE)).unwrap();
        assert!(header.starts_with("id,iou,dice,precision,sensitivity,pixel_accuracy,runtime_seconds\n"));
    }
}
