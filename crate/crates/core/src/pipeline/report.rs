use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::detection::ErrorPatchSet;
use crate::error::{Error, Result};
use crate::systematicity::SystematicityScore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportNeighbor {
    pub patch_id: String,
    pub caption: Option<String>,
    /// Run-dir-relative crop path.
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportGroup {
    pub class: String,
    pub patch_id: String,
    pub caption: String,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub margin: f64,
    pub image: String,
    pub neighbors: Vec<ReportNeighbor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset_id: String,
    pub ssm_id: String,
    pub alpha: f64,
    pub q: usize,
    pub error_patches: usize,
    pub scored_patches: usize,
    pub systematic_count: usize,
    pub summary: String,
    /// One per systematic patch, by descending margin.
    pub groups: Vec<ReportGroup>,
}

fn crop_path(class: &str, patch_id: &str) -> String {
    format!("patches/{class}/{patch_id}.png")
}

pub fn build_report(
    cfg: &RunConfig,
    scores: &[SystematicityScore],
    errors: &[ErrorPatchSet],
    captions: &BTreeMap<String, String>,
) -> Report {
    let class_of: HashMap<&str, &str> = errors
        .iter()
        .flat_map(|e| e.error_patch_ids.iter().map(|id| (id.as_str(), e.class.name.as_str())))
        .collect();
    let class = |id: &str| class_of.get(id).copied().unwrap_or("unknown").to_string();
    let mut groups: Vec<ReportGroup> = scores
        .iter()
        .filter(|s| s.is_systematic())
        .map(|s| ReportGroup {
            class: class(&s.patch_id),
            patch_id: s.patch_id.clone(),
            caption: s.caption.clone(),
            sigma1: s.sigma1,
            sigma2: s.sigma2,
            sigma3: s.sigma3,
            margin: s.margin(),
            image: crop_path(&class(&s.patch_id), &s.patch_id),
            neighbors: s
                .neighbor_ids
                .iter()
                .map(|n| ReportNeighbor {
                    patch_id: n.clone(),
                    caption: captions.get(n).cloned(),
                    image: crop_path(&class(n), n),
                })
                .collect(),
        })
        .collect();
    groups.sort_by(|a, b| b.margin.total_cmp(&a.margin).then(a.patch_id.cmp(&b.patch_id)));

    let error_patches = errors.iter().map(|e| e.error_patch_ids.len()).sum();
    let summary = if groups.is_empty() {
        format!(
            "No systematic errors found: none of the {} scored error patches reached alpha = {}.",
            scores.len(),
            cfg.alpha
        )
    } else {
        format!(
            "{} of {} scored error patches are systematic errors (alpha = {}, q = {}).",
            groups.len(),
            scores.len(),
            cfg.alpha,
            cfg.q
        )
    };
    Report {
        dataset_id: cfg.dataset_id.clone(),
        ssm_id: cfg.ssm_id.clone(),
        alpha: cfg.alpha,
        q: cfg.q,
        error_patches,
        scored_patches: scores.len(),
        systematic_count: groups.len(),
        summary,
        groups,
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn data_uri(run_dir: &Path, rel: &str) -> Result<String> {
    let path = run_dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(format!("data:image/png;base64,{}", BASE64.encode(bytes)))
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;color:#222}\
.row{display:flex;gap:1em;align-items:flex-start;border-top:1px solid #ccc;padding:1em 0}\
figure{margin:0;max-width:220px}figure img{max-width:200px;image-rendering:pixelated}\
figcaption{font-size:.85em}.query img{outline:3px solid #c33}.scores{font-family:monospace}";

/// Single-file gallery: one row per systematic patch, query first, then its
/// neighbors, each with its caption.
pub fn render_html(report: &Report, run_dir: &Path) -> Result<String> {
    let mut h = String::new();
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Systematic errors: {}</title><style>{STYLE}</style></head><body>\n",
        escape(&report.dataset_id)
    );
    let _ = writeln!(
        h,
        "<h1>Systematic errors</h1>\n<p>Dataset {} / model {}. {}</p>",
        escape(&report.dataset_id),
        escape(&report.ssm_id),
        escape(&report.summary)
    );
    for g in &report.groups {
        let _ = write!(
            h,
            "<div class=\"row\"><figure class=\"query\"><img src=\"{}\" alt=\"{}\"><figcaption><b>{}</b> ({})<br>{}<div class=\"scores\">s1 {:.3} s2 {:.3} s3 {:.3} margin {:.3}</div></figcaption></figure>",
            data_uri(run_dir, &g.image)?,
            escape(&g.patch_id),
            escape(&g.caption),
            escape(&g.class),
            &g.patch_id[..g.patch_id.len().min(12)],
            g.sigma1,
            g.sigma2,
            g.sigma3,
            g.margin
        );
        for n in &g.neighbors {
            let _ = write!(
                h,
                "<figure><img src=\"{}\" alt=\"{}\"><figcaption>{}</figcaption></figure>",
                data_uri(run_dir, &n.image)?,
                escape(&n.patch_id),
                escape(n.caption.as_deref().unwrap_or(""))
            );
        }
        h.push_str("</div>\n");
    }
    h.push_str("</body></html>\n");
    Ok(h)
}
