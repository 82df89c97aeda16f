//! Text, CSV and JSON renderings of audit reports, loss logs and spectra.

use favae_core::audit::{AuditReport, ClassNmse};
use favae_core::favae::LossBreakdown;
use favae_core::spectrum::SpectrumGrid;
use serde_json::{json, Value};
use std::fmt::Write;

fn class_rows(classes: &[ClassNmse]) -> Value {
    classes.iter().map(|c| json!({ "class": c.class, "nmse": c.nmse, "count": c.count })).collect()
}

pub fn audit_json(r: &AuditReport, top: Option<&[ClassNmse]>) -> Value {
    let mut v = json!({
        "pair_count": r.pair_count,
        "rec_loss": r.rec_loss,
        "low_freq_loss": r.low_freq_loss,
        "high_freq_loss": r.high_freq_loss,
        "perceptual_proxy": r.perceptual_proxy,
        "feature_frechet": r.feature_frechet,
        "per_class": class_rows(&r.per_class),
    });
    if let Some(t) = top {
        v["top_k"] = class_rows(t);
    }
    v
}

pub fn audit_text(r: &AuditReport, top: Option<&[ClassNmse]>) -> String {
    let mut s = String::new();
    for (name, v) in [
        ("pairs", r.pair_count as f64),
        ("rec_loss", r.rec_loss),
        ("low_freq_loss", r.low_freq_loss),
        ("high_freq_loss", r.high_freq_loss),
        ("perceptual_proxy", r.perceptual_proxy),
        ("feature_frechet", r.feature_frechet),
    ] {
        let _ = writeln!(s, "{name:<18} {v:>14.6e}");
    }
    let mut table = |title: &str, rows: &[ClassNmse]| {
        if rows.is_empty() {
            return;
        }
        let _ = writeln!(s, "\n{title}\n{:>6} {:>14} {:>7}", "class", "nmse", "count");
        for c in rows {
            let _ = writeln!(s, "{:>6} {:>14.6e} {:>7}", c.class, c.nmse, c.count);
        }
    };
    table("per-class NMSE", &r.per_class);
    if let Some(t) = top {
        table("worst classes", t);
    }
    s
}

pub fn class_csv(classes: &[ClassNmse]) -> String {
    let mut s = String::from("class,nmse,count\n");
    for c in classes {
        let _ = writeln!(s, "{},{:e},{}", c.class, c.nmse, c.count);
    }
    s
}

pub const LOSS_HEADER: &str = "step,branch,total,rec,kl,vf,gan_g,gan_d,lpips_proxy";

pub fn loss_row(l: &LossBreakdown) -> String {
    format!(
        "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
        l.step,
        l.branch.name(),
        l.total,
        l.rec,
        l.kl,
        l.vf,
        l.gan_g,
        l.gan_d,
        l.lpips_proxy
    )
}

pub fn loss_csv(log: &[LossBreakdown]) -> String {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for l in log {
        s.push_str(&loss_row(l));
        s.push('\n');
    }
    s
}

/// Row-major grid, one CSV line per row.
pub fn spectrum_csv(g: &SpectrumGrid) -> String {
    let mut s = String::new();
    for row in g.psd.chunks(g.width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}
