//! Text outputs: loss traces, metric reports, summaries and numeric grids.
//!
//! Traces and summaries are comma-separated with a header row. Grids
//! (attention maps, projections) are tab-separated with a header row and a
//! label in the first column.

use std::fs;
use std::io::Write;
use std::path::Path;

use tridira_core::fusion::AttentionTrace;
use tridira_core::losses::LossComponents;
use tridira_core::metrics::MetricReport;
use tridira_core::probe::{ProbeResult, ProbeTask};
use tridira_core::projection::Projection;
use tridira_core::trainer::EpochRecord;
use tridira_core::{Matrix, Modality};

use crate::error::{IoContext, Result};

/// Shortest text that parses back to the same `f64`.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn writer(path: &Path, delimiter: u8) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).at(path)?;
    Ok(csv::WriterBuilder::new().delimiter(delimiter).from_writer(file))
}

/// Column names of a loss trace: epoch, the seven components, the weighted
/// total, degenerate batches, then the validation metrics of `sample`.
pub fn trace_header(sample: &MetricReport) -> Vec<String> {
    let mut cols = vec!["epoch".to_owned()];
    cols.extend(LossComponents::NAMES.iter().map(|s| s.to_string()));
    cols.push("total".into());
    cols.push("degenerate_batches".into());
    cols.extend(sample.entries().iter().map(|(n, _)| format!("valid_{n}")));
    cols
}

pub fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let mut w = writer(path, b',')?;
    let header = trace_header(&trace.first().map(|r| r.valid).unwrap_or_default());
    w.write_record(&header)?;
    for r in trace {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.losses.components.values().iter().map(|v| num(*v)));
        row.push(num(r.losses.total));
        row.push(r.degenerate_batches.to_string());
        row.extend(r.valid.entries().iter().map(|(_, v)| num(*v)));
        w.write_record(&row)?;
    }
    w.flush().at(path)
}

pub fn metrics_json(report: &MetricReport) -> String {
    let map: serde_json::Map<String, serde_json::Value> =
        report.entries().into_iter().map(|(k, v)| (k.to_owned(), serde_json::Value::from(v))).collect();
    serde_json::to_string_pretty(&map).expect("metrics serialize")
}

pub fn write_metrics(path: &Path, report: &MetricReport) -> Result<()> {
    fs::write(path, metrics_json(report) + "\n").at(path)
}

pub fn read_metrics(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).at(path)?;
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| crate::error::Error::Format { path: path.into(), reason: e.to_string() })?;
    let mut report = MetricReport::default();
    let get = |k: &str| map.get(k).and_then(serde_json::Value::as_f64);
    report.mae = get("mae");
    report.corr = get("corr");
    report.acc2_nonneg = get("acc2_nonneg");
    report.acc2_pos = get("acc2_pos");
    report.f1_nonneg = get("f1_nonneg");
    report.f1_pos = get("f1_pos");
    report.acc7 = get("acc7");
    report.acc_c = get("acc_c");
    report.f1_weighted = get("f1_weighted");
    Ok(report)
}

/// One row per labelled report, e.g. per seed followed by the mean.
pub fn write_summary(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = writer(path, b',')?;
    let Some((_, first)) = rows.first() else {
        return w.flush().at(path);
    };
    let names: Vec<&str> = first.entries().iter().map(|(n, _)| *n).collect();
    let mut header = vec!["run"];
    header.extend(&names);
    w.write_record(&header)?;
    for (label, report) in rows {
        let mut row = vec![label.clone()];
        row.extend(names.iter().map(|n| report.get(n).map(num).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush().at(path)
}

/// Square grid with the same labels on rows and columns.
pub fn render_grid(corner: &str, labels: &[String], m: &Matrix) -> String {
    let mut out = String::new();
    out.push_str(corner);
    for l in labels {
        out.push('\t');
        out.push_str(l);
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        out.push_str(l);
        for v in m.row(i) {
            out.push('\t');
            out.push_str(&format!("{v:.8}"));
        }
        out.push('\n');
    }
    out
}

/// Head-averaged attention: rows are queries, columns are keys.
pub fn write_attention(path: &Path, trace: &AttentionTrace) -> Result<()> {
    fs::write(path, render_grid("query\\key", &trace.labels, &trace.mean())).at(path)
}

/// Two-dimensional coordinates of stacked rows (all samples of the first
/// modality, then the second, then the third).
pub fn write_projection(path: &Path, ids: &[String], labels: &[f64], proj: &Projection) -> Result<()> {
    let mut w = writer(path, b'\t')?;
    w.write_record(["id", "modality", "label", "pc1", "pc2"])?;
    let n = ids.len();
    for row in 0..proj.coords.rows() {
        let (m, i) = (Modality::ALL[row / n], row % n);
        w.write_record([ids[i].clone(), m.name().to_owned(), num(labels[i]), num(proj.coords.get(row, 0)), num(proj.coords.get(row, 1))])?;
    }
    w.flush().at(path)
}

/// Probe results as two tables, sentiment then modality, one row per representation.
pub fn render_probe_table(results: &[ProbeResult], untrained: bool) -> String {
    let mut out = String::new();
    if untrained {
        out.push_str(UNTRAINED_BANNER);
        out.push('\n');
    }
    for task in [ProbeTask::Sentiment, ProbeTask::Modality] {
        let rows: Vec<&ProbeResult> = results.iter().filter(|r| r.probe_task == task).collect();
        let Some(first) = rows.first() else { continue };
        let names: Vec<&str> = first.report.entries().iter().map(|(n, _)| *n).collect();
        out.push_str(&format!("[{} probe]\nrepresentation", task.name()));
        for n in &names {
            out.push('\t');
            out.push_str(n);
        }
        out.push('\n');
        for r in rows {
            out.push_str(r.representation.name());
            for n in &names {
                out.push_str(&format!("\t{:.4}", r.report.get(n).unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub const UNTRAINED_BANNER: &str =
    "WARNING: the checkpoint has no trained disentangler; the representations below come from untrained weights";

/// Writes `text` and also echoes it to `sink`.
pub fn write_and_echo(path: &Path, text: &str, sink: &mut dyn Write) -> Result<()> {
    fs::write(path, text).at(path)?;
    sink.write_all(text.as_bytes()).at("<stdout>")
}
