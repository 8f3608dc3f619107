//! Metric reports as plain text and JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use edgefill_core::dataset::Split;
use edgefill_core::pipeline::EvalReport;
use edgefill_core::{Float, Result};
use serde_json::{json, Value};

use crate::commands::variant_label;
use crate::config::RunConfig;

pub const METRICS_TXT: &str = "metrics.txt";
pub const METRICS_JSON: &str = "metrics.json";

pub struct ReportContext<'a> {
    pub cfg: &'a RunConfig,
    pub split: Split,
    /// `model` or `reference`.
    pub mode: &'static str,
}

impl<'a> ReportContext<'a> {
    pub fn model(cfg: &'a RunConfig, split: Split) -> Self {
        ReportContext { cfg, split, mode: "model" }
    }

    pub fn reference(cfg: &'a RunConfig, split: Split) -> Self {
        ReportContext {
            cfg,
            split,
            mode: "reference",
        }
    }
}

/// JSON has no infinity, so an exact reconstruction is reported as the
/// string `"inf"`.
fn number(v: Float) -> Value {
    if v.is_infinite() && v > 0.0 {
        json!("inf")
    } else {
        json!(v)
    }
}

fn fid_mode(cfg: &RunConfig) -> &'static str {
    if cfg.fid_unsquared {
        "unsquared"
    } else {
        "squared"
    }
}

pub fn flags(cfg: &RunConfig) -> Value {
    json!({
        "structure": cfg.structure.to_string(),
        "use_edges": cfg.use_edges,
        "use_skip_links": cfg.use_skip_links,
        "sconv_norm": cfg.sconv_norm.to_string(),
        "edge_source": cfg.edge_source.to_string(),
        "fid_unsquared": cfg.fid_unsquared,
        "style_on_composite": cfg.style_on_composite,
    })
}

fn metrics_value(r: &EvalReport) -> Value {
    json!({
        "psnr": number(r.psnr),
        "ssim": number(r.ssim),
        "fid": r.fid.map(number),
        "fid_regularized": r.fid_regularized,
        "sample_count": r.sample_count,
    })
}

pub fn metrics_json(r: &EvalReport, ctx: &ReportContext<'_>) -> Value {
    let mut v = metrics_value(r);
    let o = v.as_object_mut().expect("object");
    o.insert("fid_mode".into(), json!(fid_mode(ctx.cfg)));
    o.insert("split".into(), json!(ctx.split.as_str()));
    o.insert("mode".into(), json!(ctx.mode));
    o.insert("config_hash".into(), json!(ctx.cfg.hash()));
    o.insert("completion_config_hash".into(), json!(ctx.cfg.completion_hash()));
    o.insert("edge_config_hash".into(), json!(ctx.cfg.edge_hash()));
    o.insert("flags".into(), flags(ctx.cfg));
    v
}

fn fmt_metric(v: Float) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn metrics_text(r: &EvalReport, ctx: &ReportContext<'_>) -> String {
    let cfg = ctx.cfg;
    let mut s = String::new();
    writeln!(s, "mode: {}", ctx.mode).unwrap();
    writeln!(s, "split: {}", ctx.split.as_str()).unwrap();
    writeln!(s, "sample_count: {}", r.sample_count).unwrap();
    writeln!(s, "psnr_db: {}", fmt_metric(r.psnr)).unwrap();
    writeln!(s, "ssim: {}", fmt_metric(r.ssim)).unwrap();
    match r.fid {
        Some(f) => writeln!(s, "fid ({}): {}", fid_mode(cfg), fmt_metric(f)).unwrap(),
        None => writeln!(s, "fid ({}): n/a (needs at least 2 samples)", fid_mode(cfg)).unwrap(),
    }
    if r.fid_regularized {
        writeln!(s, "fid_regularized: true").unwrap();
    }
    writeln!(s, "config_hash: {}", cfg.hash()).unwrap();
    writeln!(s, "completion_config_hash: {}", cfg.completion_hash()).unwrap();
    writeln!(s, "edge_config_hash: {}", cfg.edge_hash()).unwrap();
    if let Value::Object(f) = flags(cfg) {
        for (k, v) in f {
            writeln!(s, "{k}: {}", v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string())).unwrap();
        }
    }
    s
}

pub fn write_metrics(dir: &Path, r: &EvalReport, ctx: &ReportContext<'_>) -> Result<()> {
    fs::write(dir.join(METRICS_TXT), metrics_text(r, ctx))?;
    let json = serde_json::to_string_pretty(&metrics_json(r, ctx)).expect("serialisable");
    fs::write(dir.join(METRICS_JSON), json + "\n")?;
    Ok(())
}

pub const ABLATION_TXT: &str = "ablation.txt";
pub const ABLATION_JSON: &str = "ablation.json";

pub fn write_ablation(dir: &Path, base: &RunConfig, rows: &[(RunConfig, EvalReport)]) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "{:<32} {:>10} {:>8} {:>10}", "variant", "psnr_db", "ssim", "fid").unwrap();
    for (c, r) in rows {
        let fid = r.fid.map(fmt_metric).unwrap_or_else(|| "n/a".into());
        writeln!(
            s,
            "{:<32} {:>10} {:>8} {:>10}",
            variant_label(c),
            fmt_metric(r.psnr),
            format!("{:.4}", r.ssim),
            fid
        )
        .unwrap();
    }
    writeln!(s, "steps per variant: {}", base.inpaint_steps).unwrap();
    writeln!(s, "config_hash: {}", base.hash()).unwrap();
    fs::write(dir.join(ABLATION_TXT), s)?;
    let json = json!({
        "config_hash": base.hash(),
        "steps_per_variant": base.inpaint_steps,
        "fid_mode": fid_mode(base),
        "variants": rows.iter().map(|(c, r)| {
            let mut v = metrics_value(r);
            v.as_object_mut().expect("object").insert("flags".into(), flags(c));
            v
        }).collect::<Vec<_>>(),
    });
    fs::write(dir.join(ABLATION_JSON), serde_json::to_string_pretty(&json).expect("serialisable") + "\n")?;
    Ok(())
}
