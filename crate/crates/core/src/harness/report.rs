use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::pipeline::{artifacts, RunReport, SCHEMA_VERSION};

/// NPD as a percentage with two decimals.
pub fn format_npd(v: f64) -> String {
    format!("{:.2}", v)
}

/// Human-readable table of a run report.
pub fn render_text(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "schema_version {}", r.schema_version);
    let _ = writeln!(s, "config_hash    {}", r.config_hash);
    let _ = writeln!(
        s,
        "method         {} (W{}A{})",
        r.method.name(),
        r.w_bits,
        r.a_bits
    );
    let _ = writeln!(
        s,
        "train loss     {:.6e} -> {:.6e} (grad norm {:.3e})",
        r.train.initial_loss, r.train.final_loss, r.train.final_grad_norm
    );
    s.push('\n');
    let _ = writeln!(s, "{:<20} {:>14} {:>10}", "metric", "value", "NPD %");
    let npd = &r.eval.npd.per_metric;
    for ((name, value), (_, d)) in r.eval.metrics.named().into_iter().zip(npd) {
        let d = d.map(format_npd).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{:<20} {:>14.6} {:>10}", name, value, d);
    }
    s.push('\n');
    let _ = writeln!(s, "{:<8} {:>10}", "task", "NPD %");
    for (task, v) in [
        ("camera", r.eval.npd.camera),
        ("depth", r.eval.npd.depth),
        ("point", r.eval.npd.point),
    ] {
        let _ = writeln!(s, "{:<8} {:>10}", task, format_npd(v));
    }
    s.push('\n');
    let _ = writeln!(s, "{:<10} {:>14}", "block", "output MSE");
    for (l, v) in r.eval.block_loss.iter().enumerate() {
        let _ = writeln!(s, "{:<10} {:>14.6e}", l, v);
    }
    if let Some(c) = &r.calibration {
        s.push('\n');
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>14} {:>9} {:>9}",
            "calibrated", "initial", "final", "rejected", "restored"
        );
        for b in &c.blocks {
            let _ = writeln!(
                s,
                "{:<10} {:>14.6e} {:>14.6e} {:>9} {:>9}",
                b.name, b.initial_loss, b.final_loss, b.rejected_steps, b.restored_snapshot
            );
        }
    }
    if let Some(c) = &r.correlation {
        s.push('\n');
        let _ = writeln!(
            s,
            "correlation pooled r {:.4} (diagonal {:.4})",
            c.pooled, c.pooled_diagonal
        );
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>14} {:>14}",
            "block", "task", "predicted", "measured"
        );
        for row in &c.rows {
            for (k, task) in ["camera", "depth", "point"].iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{:<10} {:>6} {:>14.6e} {:>14.6e}",
                    row.name, task, row.predicted[k], row.measured[k]
                );
            }
        }
    }
    s
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn emit_report(r: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join(artifacts::REPORT_JSON),
        serde_json::to_vec_pretty(r)?,
    )?;
    std::fs::write(dir.join(artifacts::REPORT_TEXT), render_text(r))?;
    Ok(())
}

/// Parses a report written by [`emit_report`], rejecting other schemas.
pub fn read_report(path: &Path) -> Result<RunReport> {
    let r: RunReport = serde_json::from_slice(&std::fs::read(path)?)?;
    if r.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "report schema {} is not supported (expected {})",
            r.schema_version, SCHEMA_VERSION
        )));
    }
    Ok(r)
}
