//! Tab-separated result files. Every file starts with `#`-prefixed header
//! lines, then a column line, then one record per row. Floats use a fixed
//! number of decimals so identical runs give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use super::SweepOutput;
use crate::error::{Error, Result};
use crate::retrieval::RetrievalConfig;
use crate::session::DecodeStepReport;

pub const SWEEP_COLUMNS: [&str; 16] = [
    "id",
    "m",
    "centroids",
    "alpha",
    "rho",
    "period",
    "tau",
    "window",
    "seeds",
    "steps",
    "mean_recall",
    "mean_output_error",
    "cost_mean",
    "cost_p50",
    "cost_p90",
    "cost_p99",
];

pub const DECODE_COLUMNS: [&str; 11] = [
    "step",
    "context_len",
    "keep",
    "searched",
    "centroid_dot_ops",
    "gathered_entries",
    "reduce_ops",
    "attention_key_ops",
    "h2d_bytes_model",
    "inserts_applied",
    "insert_dot_ops",
];

/// Writes `results.tsv` plus one `<metric>.tsv` series per numeric metric
/// (x = row number in `results.tsv`) into `dir`.
pub fn write_sweep_results(dir: &Path, out: &SweepOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    let mut text = String::new();
    for s in &out.skipped {
        let _ = writeln!(text, "# skipped {}: {}", s.id, s.reason);
    }
    let _ = writeln!(text, "{}\tindex_bytes", SWEEP_COLUMNS.join("\t"));
    for r in &out.results {
        let c = &r.cell;
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6e}\t{:.1}\t{:.4}\t{:.4}\t{:.4}\t{}",
            r.id,
            c.m,
            c.centroids,
            c.alpha,
            c.rho,
            c.period,
            c.tau,
            c.window,
            r.seeds,
            r.steps,
            r.mean_recall,
            r.mean_output_error,
            r.cost_mean,
            r.cost_p50,
            r.cost_p90,
            r.cost_p99,
            r.index_bytes
        );
    }
    write(&dir.join("results.tsv"), &text)?;

    type Metric = fn(&super::SweepResult) -> f64;
    let series: [(&str, Metric); 7] = [
        ("mean_recall", |r| r.mean_recall),
        ("mean_output_error", |r| r.mean_output_error),
        ("cost_mean", |r| r.cost_mean),
        ("cost_p50", |r| r.cost_p50),
        ("cost_p90", |r| r.cost_p90),
        ("cost_p99", |r| r.cost_p99),
        ("index_bytes", |r| r.index_bytes as f64),
    ];
    for (name, f) in series {
        let mut s = format!("x\t{name}\n");
        for (x, r) in out.results.iter().enumerate() {
            let _ = writeln!(s, "{x}\t{:.6e}", f(r));
        }
        write(&dir.join(format!("{name}.tsv")), &s)?;
    }
    Ok(())
}

/// Renders a decode results file. With `oracle`, recall and output-error
/// columns are appended.
pub fn write_decode_results(cfg: &RetrievalConfig, reports: &[DecodeStepReport], oracle: bool) -> String {
    let mut text = String::new();
    let _ = writeln!(
        text,
        "# rho={} period={} window={} tau={} backoff_threshold={} schedule={}",
        cfg.keep_ratio,
        cfg.search_period,
        cfg.recent_window,
        cfg.backoff_tau,
        cfg.backoff_threshold,
        cfg.schedule()
    );
    let searches = reports.iter().filter(|r| r.searched).count();
    let _ = writeln!(text, "# steps={} searches={searches}", reports.len());
    text.push_str(&DECODE_COLUMNS.join("\t"));
    if oracle {
        text.push_str("\trecall_at_k\toutput_error");
    }
    text.push('\n');
    for r in reports {
        let c = &r.counters;
        let _ = write!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.1}\t{}\t{}",
            r.step,
            r.context_len,
            r.keep,
            u8::from(r.searched),
            c.centroid_dot_ops,
            c.gathered_entries,
            c.reduce_ops,
            c.attention_key_ops,
            c.h2d_bytes_model,
            c.inserts_applied,
            c.insert_dot_ops
        );
        if oracle {
            let _ = write!(
                text,
                "\t{:.6}\t{:.6e}",
                r.recall_at_k.unwrap_or(f64::NAN),
                r.output_error.unwrap_or(f64::NAN)
            );
        }
        text.push('\n');
    }
    text
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::from(e).in_file(path))
}
