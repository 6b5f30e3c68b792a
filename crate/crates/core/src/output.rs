//! CSV / JSON writers for run outputs.
//!
//! Reals are written with 17 significant digits so every file parses back
//! to the exact values. Undefined metrics (accuracy-based columns for
//! regression models) are left empty.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::config::RunManifest;
use crate::federation::{FederatedConfig, RoundRecord};
use crate::metrics::FairnessReport;

/// Lossless real formatting with 17 significant digits.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_real(x: Option<f64>) -> String {
    x.map(format_real).unwrap_or_default()
}

pub const ROUNDS_HEADER: [&str; 12] = [
    "round",
    "global_lr",
    "direction_norm",
    "rho",
    "mean_loss",
    "mean_acc",
    "std_acc",
    "worst10",
    "best10",
    "angle",
    "kl",
    "dropped_count",
];

/// One parsed row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub global_lr: f64,
    pub direction_norm: f64,
    pub rho: f64,
    pub mean_loss: f64,
    pub mean_acc: Option<f64>,
    pub std_acc: Option<f64>,
    pub worst10: Option<f64>,
    pub best10: Option<f64>,
    pub angle: Option<f64>,
    pub kl: Option<f64>,
    pub dropped_count: usize,
}

impl From<&RoundRecord> for RoundRow {
    fn from(r: &RoundRecord) -> Self {
        let f = r.fairness.as_ref();
        Self {
            round: r.round,
            global_lr: r.global_lr,
            direction_norm: r.direction_norm,
            rho: r.rho,
            mean_loss: r.mean_loss(),
            mean_acc: f.map(|f| f.mean_accuracy),
            std_acc: f.map(|f| f.std_accuracy),
            worst10: f.map(|f| f.worst_k_pct),
            best10: f.map(|f| f.best_k_pct),
            angle: f.map(|f| f.angle_degrees),
            kl: f.map(|f| f.kl_to_uniform),
            dropped_count: r.dropped.len(),
        }
    }
}

/// Incremental `rounds.csv` writer.
pub struct RoundsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RoundsWriter<W> {
    pub fn new(writer: W) -> csv::Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        inner.write_record(ROUNDS_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, record: &RoundRecord) -> csv::Result<()> {
        let r = RoundRow::from(record);
        self.inner.write_record([
            r.round.to_string(),
            format_real(r.global_lr),
            format_real(r.direction_norm),
            format_real(r.rho),
            format_real(r.mean_loss),
            opt_real(r.mean_acc),
            opt_real(r.std_acc),
            opt_real(r.worst10),
            opt_real(r.best10),
            opt_real(r.angle),
            opt_real(r.kl),
            r.dropped_count.to_string(),
        ])
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

pub fn write_rounds_csv<W: Write>(records: &[RoundRecord], writer: W) -> csv::Result<()> {
    let mut w = RoundsWriter::new(writer)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(())
}

fn parse_opt(s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|e| format!("{s:?}: {e}"))
    }
}

pub fn read_rounds_csv<R: Read>(reader: R) -> Result<Vec<RoundRow>, String> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| e.to_string())?.clone();
    if header.iter().ne(ROUNDS_HEADER) {
        return Err(format!("unexpected header {header:?}"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let real = |i: usize| -> Result<f64, String> {
            rec[i].parse().map_err(|e| format!("{:?}: {e}", &rec[i]))
        };
        out.push(RoundRow {
            round: rec[0].parse().map_err(|e| format!("round: {e}"))?,
            global_lr: real(1)?,
            direction_norm: real(2)?,
            rho: real(3)?,
            mean_loss: real(4)?,
            mean_acc: parse_opt(&rec[5])?,
            std_acc: parse_opt(&rec[6])?,
            worst10: parse_opt(&rec[7])?,
            best10: parse_opt(&rec[8])?,
            angle: parse_opt(&rec[9])?,
            kl: parse_opt(&rec[10])?,
            dropped_count: rec[11].parse().map_err(|e| format!("dropped_count: {e}"))?,
        });
    }
    Ok(out)
}

/// `round,client_id,lambda`, one row per aggregated client.
pub struct LambdaWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> LambdaWriter<W> {
    pub fn new(writer: W) -> csv::Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        inner.write_record(["round", "client_id", "lambda"])?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, record: &RoundRecord) -> csv::Result<()> {
        for (id, l) in record.aggregated.iter().zip(&record.lambda) {
            self.inner
                .write_record([record.round.to_string(), id.to_string(), format_real(*l)])?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub config: FederatedConfig,
    pub seed: u64,
    pub rounds_completed: usize,
    pub aborted_rounds: Vec<usize>,
    pub final_mean_loss: Option<f64>,
    pub final_fairness: Option<FairnessReport>,
    pub final_direction_norm: Option<f64>,
    pub min_direction_norm: Option<f64>,
    pub min_rho: Option<f64>,
}

impl RunSummary {
    pub fn new(manifest: RunManifest, config: FederatedConfig, records: &[RoundRecord]) -> Self {
        let last = records.last();
        Self {
            manifest,
            seed: config.training.seed,
            config,
            rounds_completed: records.len(),
            aborted_rounds: records
                .iter()
                .filter(|r| r.error.is_some())
                .map(|r| r.round)
                .collect(),
            final_mean_loss: last.map(RoundRecord::mean_loss),
            final_fairness: last.and_then(|r| r.fairness.clone()),
            final_direction_norm: last.map(|r| r.direction_norm),
            min_direction_norm: records.iter().map(|r| r.direction_norm).reduce(f64::min),
            min_rho: records.iter().map(|r| r.rho).reduce(f64::min),
        }
    }
}

/// One row of `compare.csv`: seed-mean and population std of each final
/// fairness statistic for one aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub aggregator: String,
    pub seeds: usize,
    /// `(mean, std)` per field of [`FairnessReport::CSV_HEADER`].
    pub fairness: Vec<(f64, f64)>,
    pub final_mean_loss: (f64, f64),
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn write_compare_csv<W: Write>(rows: &[CompareRow], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["aggregator".to_string(), "seeds".to_string()];
    for f in FairnessReport::CSV_HEADER
        .iter()
        .copied()
        .chain(["final_mean_loss"])
    {
        header.push(format!("{f}_mean"));
        header.push(format!("{f}_std"));
    }
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.aggregator.clone(), row.seeds.to_string()];
        for (m, s) in row.fairness.iter().chain([&row.final_mean_loss]) {
            rec.push(format_real(*m));
            rec.push(format_real(*s));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize, W: Write>(value: &T, mut writer: W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    writer.flush()
}
