//! Held-out evaluation: accuracy, per-class recall and precision, the
//! confusion matrix, and the probability RMSE; plus report files and a
//! synthetic dataset generator used as a separability oracle.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::fingerprint::{compute_fingerprint, LabeledInstance};
use crate::forest::RandomForest;
use crate::ingest::PacketRecord;
use crate::mac::MacAddress;
use crate::numfmt::format_g17;
use crate::rng::Xoshiro256StarStar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("test label `{0}` is not in the model's label vocabulary")]
    UnknownLabel(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `counts[i][j]`: instances of true class `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub label: String,
    pub n_test: u64,
    /// `None` when the class has no test instances.
    pub recall: Option<f64>,
    /// `None` when nothing was predicted as this class.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub rmse: f64,
    pub n_test: u64,
    pub per_class: Vec<ClassMetrics>,
    pub matrix: ConfusionMatrix,
}

impl EvalReport {
    pub fn class(&self, label: &str) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|c| c.label == label)
    }
}

/// Scores `forest` on `test`.
///
/// RMSE is taken over every (instance, class) pair of the forest's label
/// vocabulary: the vote fraction against the one-hot truth.
pub fn evaluate(forest: &RandomForest, test: &Dataset) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let truth_of_test_label: Vec<usize> = test
        .labels()
        .iter()
        .map(|l| {
            forest
                .class_index(l)
                .ok_or_else(|| EvalError::UnknownLabel(l.clone()))
        })
        .collect::<Result<_, _>>()?;

    let k = forest.labels().len();
    let n_trees = forest.trees().len() as f64;
    let rows: Vec<(usize, usize, f64)> = test
        .features()
        .par_iter()
        .zip(test.label_ids().par_iter())
        .map(|(x, &id)| {
            let truth = truth_of_test_label[id as usize];
            let votes = forest.votes(x);
            let mut predicted = 0;
            for (i, &v) in votes.iter().enumerate() {
                if v > votes[predicted] {
                    predicted = i;
                }
            }
            let sq: f64 = votes
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    let p = f64::from(v) / n_trees;
                    let y = if c == truth { 1.0 } else { 0.0 };
                    (p - y) * (p - y)
                })
                .sum();
            (truth, predicted, sq)
        })
        .collect();

    let mut counts = vec![vec![0u64; k]; k];
    let mut sq_sum = 0.0;
    for &(t, p, sq) in &rows {
        counts[t][p] += 1;
        sq_sum += sq;
    }
    let n = rows.len() as u64;
    let matrix = ConfusionMatrix {
        labels: forest.labels().to_vec(),
        counts,
    };
    let per_class = (0..k)
        .map(|i| {
            let row = matrix.row_sum(i);
            let col = matrix.col_sum(i);
            let hit = matrix.counts[i][i] as f64;
            ClassMetrics {
                label: matrix.labels[i].clone(),
                n_test: row,
                recall: (row > 0).then(|| hit / row as f64),
                precision: (col > 0).then(|| hit / col as f64),
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: matrix.trace() as f64 / n as f64,
        rmse: (sq_sum / (n as f64 * k as f64)).sqrt(),
        n_test: n,
        per_class,
        matrix,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_g17)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `label,n_test,recall,precision`, one row per class in label order.
/// Undefined ratios are written as `NA`.
pub fn per_device_csv(report: &EvalReport) -> String {
    let mut out = String::from("label,n_test,recall,precision\n");
    for c in &report.per_class {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            csv_field(&c.label),
            c.n_test,
            opt(c.recall),
            opt(c.precision)
        );
    }
    out
}

pub fn per_device_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    fs::write(path, per_device_csv(report))?;
    Ok(())
}

/// Square matrix, true classes down, predicted classes across.
pub fn confusion_csv(matrix: &ConfusionMatrix) -> String {
    let mut out = String::from("true\\predicted");
    for l in &matrix.labels {
        out.push(',');
        out.push_str(&csv_field(l));
    }
    out.push('\n');
    for (l, row) in matrix.labels.iter().zip(&matrix.counts) {
        out.push_str(&csv_field(l));
        for c in row {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

pub fn summary_text(report: &EvalReport, forest: &RandomForest) -> String {
    let p = forest.params();
    let mut out = String::new();
    let _ = writeln!(out, "accuracy: {}", format_g17(report.accuracy));
    let _ = writeln!(out, "rmse: {}", format_g17(report.rmse));
    let _ = writeln!(out, "n_test: {}", report.n_test);
    let _ = writeln!(out, "classes: {}", forest.labels().len());
    let _ = writeln!(
        out,
        "params: trees={} mtry={} min_leaf={} max_depth={} seed={}",
        p.n_trees,
        p.mtry,
        p.min_leaf,
        p.max_depth
            .map_or("unlimited".to_string(), |d| d.to_string()),
        forest.seed()
    );
    out.push_str("note: per-device accuracy in report.csv is recall (correct fraction of that device's test instances); NA marks classes with no test instances or no predictions\n");
    out
}

/// Writes `report.csv`, `confusion.csv` and `summary.txt` into `dir`.
pub fn write_reports(
    report: &EvalReport,
    forest: &RandomForest,
    dir: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    per_device_report(report, dir.join("report.csv"))?;
    fs::write(dir.join("confusion.csv"), confusion_csv(&report.matrix))?;
    fs::write(dir.join("summary.txt"), summary_text(report, forest))?;
    Ok(())
}

/// Traffic profile of a synthetic device.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProfile {
    pub label: String,
    pub iplen_mean: f64,
    pub iplen_sd: f64,
    pub win_mean: f64,
    pub win_sd: f64,
    pub n_instances: usize,
}

/// Synthetic fingerprints: each instance is computed from a window of five
/// packets whose IP lengths and TCP windows are Gaussian draws, rounded and
/// clamped to the valid header ranges (lengths 40..=65535, windows
/// 0..=65535). Profiles are generated in order from one seeded stream.
pub fn make_synthetic(profiles: &[SyntheticProfile], seed: u64) -> Dataset {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut draw = |mean: f64, sd: f64, lo: f64| -> u16 {
        let v = if sd > 0.0 {
            mean + sd * rng.next_gaussian()
        } else {
            mean
        };
        v.round().clamp(lo, 65535.0) as u16
    };
    let mut instances = Vec::new();
    for p in profiles {
        for _ in 0..p.n_instances {
            let window: Vec<PacketRecord> = (0..crate::fingerprint::DEFAULT_WINDOW)
                .map(|_| PacketRecord {
                    timestamp: 0.0,
                    src_mac: MacAddress([0; 6]),
                    ip_total_length: draw(p.iplen_mean, p.iplen_sd, 40.0),
                    tcp_window: draw(p.win_mean, p.win_sd, 0.0),
                })
                .collect();
            instances.push(LabeledInstance {
                fingerprint: compute_fingerprint(&window).expect("non-empty window"),
                label: p.label.clone(),
            });
        }
    }
    Dataset::from_instances(instances).expect("synthetic instances are valid")
}
