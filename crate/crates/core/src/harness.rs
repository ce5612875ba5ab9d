//! Grouped evaluation of an estimator over labelled patches.
//!
//! Results are pooled per (first-pass quality, alignment) cell and written as
//! CSV tables plus an SVG line chart of per-coefficient accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{read_shards, DatasetError, PatchRecord};
use crate::estimator::{estimate_batch, patch_metrics, Estimate, EstimatorError};
use crate::jpeg::QTarget;
use crate::nn::{load_checkpoint, DenseNet, NnError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("label width {labels} does not match predictor outputs {outputs}")]
    NcMismatch { labels: usize, outputs: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
}

/// Anything that maps patches to estimates.
pub trait Predictor: Sync {
    fn nc(&self) -> usize;
    fn predict(&self, records: &[&PatchRecord]) -> Result<Vec<Estimate>, HarnessError>;
}

impl Predictor for DenseNet<f32> {
    fn nc(&self) -> usize {
        self.config().nc_outputs
    }

    fn predict(&self, records: &[&PatchRecord]) -> Result<Vec<Estimate>, HarnessError> {
        let pixels: Vec<&[u8]> = records.iter().map(|r| r.pixels.as_slice()).collect();
        Ok(estimate_batch(self, &pixels)?)
    }
}

/// Emits the true label of every patch.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor {
    pub nc: usize,
}

impl Predictor for OraclePredictor {
    fn nc(&self) -> usize {
        self.nc
    }

    fn predict(&self, records: &[&PatchRecord]) -> Result<Vec<Estimate>, HarnessError> {
        Ok(records
            .iter()
            .map(|r| Estimate::from_raw(r.label.values().iter().map(|&v| f64::from(v)).collect()))
            .collect())
    }
}

/// Emits the same vector for every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPredictor {
    pub values: Vec<f64>,
}

impl ConstantPredictor {
    /// Per-coefficient median of the training labels (lower median for even
    /// counts, so the output is itself a label value).
    pub fn median_of(labels: &[QTarget]) -> Result<Self, HarnessError> {
        let first = labels.first().ok_or(HarnessError::Empty)?;
        let nc = first.nc();
        let mut values = Vec::with_capacity(nc);
        for i in 0..nc {
            let mut col: Vec<u16> = labels
                .iter()
                .map(|l| {
                    l.values().get(i).copied().ok_or(HarnessError::NcMismatch {
                        labels: l.nc(),
                        outputs: nc,
                    })
                })
                .collect::<Result<_, _>>()?;
            col.sort_unstable();
            values.push(f64::from(col[(col.len() - 1) / 2]));
        }
        Ok(Self { values })
    }
}

impl Predictor for ConstantPredictor {
    fn nc(&self) -> usize {
        self.values.len()
    }

    fn predict(&self, records: &[&PatchRecord]) -> Result<Vec<Estimate>, HarnessError> {
        Ok(records
            .iter()
            .map(|_| Estimate::from_raw(self.values.clone()))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Alignment {
    Aligned,
    NonAligned,
    /// Both kinds pooled, when the table is not split by alignment.
    All,
}

impl Alignment {
    pub fn label(self) -> &'static str {
        match self {
            Alignment::Aligned => "aligned",
            Alignment::NonAligned => "non-aligned",
            Alignment::All => "all",
        }
    }
}

/// Running sums for one table cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub mse_sum: f64,
    pub acc_sum: f64,
    pub count: u64,
    /// Exact-match counts per coefficient.
    pub coeff_hits: Vec<u64>,
}

impl CellStats {
    fn new(nc: usize) -> Self {
        Self {
            mse_sum: 0.0,
            acc_sum: 0.0,
            count: 0,
            coeff_hits: vec![0; nc],
        }
    }

    fn merge(&mut self, other: &CellStats) {
        self.mse_sum += other.mse_sum;
        self.acc_sum += other.acc_sum;
        self.count += other.count;
        for (a, b) in self.coeff_hits.iter_mut().zip(&other.coeff_hits) {
            *a += b;
        }
    }

    pub fn mean_mse(&self) -> f64 {
        self.mse_sum / self.count as f64
    }

    pub fn mean_acc(&self) -> f64 {
        self.acc_sum / self.count as f64
    }
}

/// One output row: pooled per-patch means for a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub qf1: u8,
    pub alignment: Alignment,
    pub mse: f64,
    pub acc: f64,
    pub n: u64,
}

/// Evaluation results keyed by (qf1, alignment).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    nc: usize,
    align_split: bool,
    cells: BTreeMap<(u8, Alignment), CellStats>,
    /// Second-pass quality at training and at test time, for mismatch runs.
    pub annotation: Option<(Option<u8>, u8)>,
}

impl EvalTable {
    pub fn new(nc: usize, align_split: bool) -> Self {
        Self {
            nc,
            align_split,
            cells: BTreeMap::new(),
            annotation: None,
        }
    }

    pub fn nc(&self) -> usize {
        self.nc
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &BTreeMap<(u8, Alignment), CellStats> {
        &self.cells
    }

    fn key(&self, record: &PatchRecord) -> (u8, Alignment) {
        let alignment = match (self.align_split, record.is_aligned()) {
            (false, _) => Alignment::All,
            (true, true) => Alignment::Aligned,
            (true, false) => Alignment::NonAligned,
        };
        (record.qf1, alignment)
    }

    /// Adds one scored patch.
    pub fn add(&mut self, record: &PatchRecord, est: &Estimate) -> Result<(), HarnessError> {
        if est.nc() != self.nc || record.nc() != self.nc {
            return Err(HarnessError::NcMismatch {
                labels: record.nc(),
                outputs: est.nc(),
            });
        }
        let m = patch_metrics(est, &record.label)?;
        let nc = self.nc;
        let cell = self
            .cells
            .entry(self.key(record))
            .or_insert_with(|| CellStats::new(nc));
        cell.mse_sum += m.mse;
        cell.acc_sum += m.acc;
        cell.count += 1;
        for (h, (&e, &t)) in cell
            .coeff_hits
            .iter_mut()
            .zip(est.rounded.iter().zip(record.label.values()))
        {
            *h += u64::from(e == t);
        }
        Ok(())
    }

    /// Count-weighted union of two tables over disjoint patch sets.
    pub fn merge(&mut self, other: &EvalTable) -> Result<(), HarnessError> {
        if other.nc != self.nc || other.align_split != self.align_split {
            return Err(HarnessError::NcMismatch {
                labels: other.nc,
                outputs: self.nc,
            });
        }
        for (key, cell) in &other.cells {
            self.cells
                .entry(*key)
                .or_insert_with(|| CellStats::new(other.nc))
                .merge(cell);
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<EvalRow> {
        self.cells
            .iter()
            .map(|(&(qf1, alignment), c)| EvalRow {
                qf1,
                alignment,
                mse: c.mean_mse(),
                acc: c.mean_acc(),
                n: c.count,
            })
            .collect()
    }

    pub fn total_count(&self) -> u64 {
        self.cells.values().map(|c| c.count).sum()
    }

    /// Per-patch means over every cell.
    pub fn pooled(&self) -> Option<(f64, f64)> {
        let n = self.total_count();
        if n == 0 {
            return None;
        }
        let mse: f64 = self.cells.values().map(|c| c.mse_sum).sum();
        let acc: f64 = self.cells.values().map(|c| c.acc_sum).sum();
        Some((mse / n as f64, acc / n as f64))
    }

    fn coeff_accuracy<'a>(&self, cells: impl Iterator<Item = &'a CellStats>) -> Vec<f64> {
        let mut hits = vec![0u64; self.nc];
        let mut n = 0u64;
        for c in cells {
            n += c.count;
            for (h, &v) in hits.iter_mut().zip(&c.coeff_hits) {
                *h += v;
            }
        }
        hits.into_iter()
            .map(|h| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect()
    }

    /// Per-coefficient accuracy over all patches.
    pub fn per_coefficient(&self) -> Vec<f64> {
        self.coeff_accuracy(self.cells.values())
    }

    /// Per-coefficient accuracy for each first-pass quality.
    pub fn per_coefficient_by_qf1(&self) -> BTreeMap<u8, Vec<f64>> {
        let qfs: std::collections::BTreeSet<u8> = self.cells.keys().map(|k| k.0).collect();
        qfs.into_iter()
            .map(|q| {
                let acc = self.coeff_accuracy(
                    self.cells
                        .iter()
                        .filter(move |(k, _)| k.0 == q)
                        .map(|(_, c)| c),
                );
                (q, acc)
            })
            .collect()
    }
}

/// Scores every record with `predictor` and aggregates the results.
pub fn evaluate_with<P: Predictor + ?Sized>(
    predictor: &P,
    records: &[PatchRecord],
    align_split: bool,
    batch_size: usize,
) -> Result<EvalTable, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Empty);
    }
    let nc = predictor.nc();
    if let Some(r) = records.iter().find(|r| r.nc() != nc) {
        return Err(HarnessError::NcMismatch {
            labels: r.nc(),
            outputs: nc,
        });
    }
    let partials: Vec<EvalTable> = records
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&PatchRecord> = chunk.iter().collect();
            let estimates = predictor.predict(&refs)?;
            let mut table = EvalTable::new(nc, align_split);
            for (r, e) in chunk.iter().zip(&estimates) {
                table.add(r, e)?;
            }
            Ok(table)
        })
        .collect::<Result<_, HarnessError>>()?;
    let mut table = EvalTable::new(nc, align_split);
    for p in &partials {
        table.merge(p)?;
    }
    Ok(table)
}

/// File-level description of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model_checkpoint: PathBuf,
    pub test_shards: Vec<PathBuf>,
    pub align_split: bool,
    pub output_dir: Option<PathBuf>,
    pub batch_size: usize,
}

impl ExperimentConfig {
    pub fn new(model_checkpoint: PathBuf, test_shards: Vec<PathBuf>) -> Self {
        Self {
            model_checkpoint,
            test_shards,
            align_split: true,
            output_dir: None,
            batch_size: 32,
        }
    }
}

/// Loads the checkpoint and shards named by `config`, evaluates, and writes
/// outputs when an output directory is set.
pub fn evaluate(config: &ExperimentConfig) -> Result<EvalTable, HarnessError> {
    Ok(run(config)?.0)
}

/// As [`evaluate`], with the table annotated by the training and test
/// second-pass qualities. Shards may mix several test qualities; the most
/// frequent one is reported.
pub fn mismatch_eval(config: &ExperimentConfig) -> Result<EvalTable, HarnessError> {
    let (mut table, trained, records) = run_without_output(config)?;
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for r in &records {
        *counts.entry(r.qf2).or_default() += 1;
    }
    let tested = counts
        .iter()
        .max_by_key(|(q, n)| (**n, std::cmp::Reverse(**q)))
        .map(|(q, _)| *q)
        .ok_or(HarnessError::Empty)?;
    table.annotation = Some((trained, tested));
    if let Some(dir) = &config.output_dir {
        emit_outputs(&table, dir)?;
    }
    Ok(table)
}

fn run(config: &ExperimentConfig) -> Result<(EvalTable, Option<u8>), HarnessError> {
    let (table, trained, _) = run_without_output(config)?;
    if let Some(dir) = &config.output_dir {
        emit_outputs(&table, dir)?;
    }
    Ok((table, trained))
}

fn run_without_output(
    config: &ExperimentConfig,
) -> Result<(EvalTable, Option<u8>, Vec<PatchRecord>), HarnessError> {
    let ck = load_checkpoint(&config.model_checkpoint)?;
    let records = read_shards(&config.test_shards)?;
    let table = evaluate_with(&ck.model, &records, config.align_split, config.batch_size)?;
    Ok((table, ck.trained_qf2, records))
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|source| HarnessError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// `eval.csv` contents: one row per cell, six decimals.
pub fn eval_csv(table: &EvalTable) -> String {
    let mut s = String::from("qf1,alignment,mse,acc,n\n");
    for r in table.rows() {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{}",
            r.qf1,
            r.alignment.label(),
            r.mse,
            r.acc,
            r.n
        );
    }
    s
}

/// `per_coeff.csv` contents: one row per coefficient, overall accuracy and
/// one column per first-pass quality.
pub fn per_coeff_csv(table: &EvalTable) -> String {
    let by_qf = table.per_coefficient_by_qf1();
    let mut s = String::from("coefficient,acc");
    for q in by_qf.keys() {
        let _ = write!(s, ",qf1_{q}");
    }
    s.push('\n');
    for (i, acc) in table.per_coefficient().iter().enumerate() {
        let _ = write!(s, "{},{acc:.6}", i + 1);
        for v in by_qf.values() {
            let _ = write!(s, ",{:.6}", v[i]);
        }
        s.push('\n');
    }
    s
}

/// Line chart of per-coefficient accuracy, one polyline per first-pass quality.
pub fn per_coeff_svg(table: &EvalTable) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLOURS: [&str; 8] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];
    let nc = table.nc().max(2);
    let x = |i: usize| M + (W - 2.0 * M) * i as f64 / (nc - 1) as f64;
    let y = |a: f64| H - M - (H - 2.0 * M) * a.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let title = match table.annotation {
        Some((Some(a), b)) => format!("Per-coefficient accuracy (QF2 train {a}, test {b})"),
        Some((None, b)) => format!("Per-coefficient accuracy (QF2 test {b})"),
        None => "Per-coefficient accuracy".to_string(),
    };
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    for t in 0..=4 {
        let a = f64::from(t) / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{a:.2}</text>"#,
            M - 6.0,
            y(a) + 4.0
        );
    }
    for i in 0..table.nc() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x(i),
            H - M + 16.0,
            i + 1
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">zig-zag coefficient</text>"#,
        W / 2.0,
        H - 10.0
    );
    for (k, (q, acc)) in table.per_coefficient_by_qf1().iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let points: Vec<String> = acc
            .iter()
            .enumerate()
            .map(|(i, &a)| format!("{:.1},{:.1}", x(i), y(a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">QF1 {q}</text>"#,
            W - M + 4.0,
            M + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `eval.csv`, `per_coeff.csv` and `per_coeff.svg` into `dir`, plus
/// `annotation.csv` for mismatch runs.
pub fn emit_outputs(table: &EvalTable, dir: &Path) -> Result<(), HarnessError> {
    if table.is_empty() {
        return Err(HarnessError::Empty);
    }
    fs::create_dir_all(dir).map_err(|source| HarnessError::Write {
        path: dir.display().to_string(),
        source,
    })?;
    write_file(&dir.join("eval.csv"), &eval_csv(table))?;
    write_file(&dir.join("per_coeff.csv"), &per_coeff_csv(table))?;
    write_file(&dir.join("per_coeff.svg"), &per_coeff_svg(table))?;
    if let Some((trained, tested)) = table.annotation {
        let trained = trained.map(|q| q.to_string()).unwrap_or_default();
        write_file(
            &dir.join("annotation.csv"),
            &format!("qf2_train,qf2_test\n{trained},{tested}\n"),
        )?;
    }
    Ok(())
}
