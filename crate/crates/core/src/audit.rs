//! Parameter accounting over shape manifests. Everything here counts specs
//! only; no values are allocated, so reference-scale audits stay instant.

use crate::foundation::FoundationConfig;
use crate::model::model_manifest;
use crate::prompt::PromptConfig;
use crate::tuner::{count_specs, ParamFilter, ParamSpec, TuneMode};

/// One audit line: a module and its scalar-parameter count.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub module: String,
    pub params: usize,
    pub trainable: bool,
}

fn module_of(name: &str) -> &'static str {
    if name.starts_with("foundation.layers.") {
        "foundation.encoder"
    } else if name.starts_with("foundation.head.") {
        "foundation.head"
    } else if name.starts_with("foundation.pos") {
        "foundation.pos"
    } else if name.starts_with("foundation.embed") {
        "foundation.embed"
    } else if name.starts_with("foundation.norm") {
        "foundation.norm"
    } else if name.starts_with("aux_embed.") {
        "aux_embed"
    } else if name.starts_with("prompt.mcp.") {
        "prompt.mcp"
    } else {
        "prompt.vpt"
    }
}

/// Group a manifest into per-module rows (manifest order preserved).
pub fn audit_rows(specs: &[ParamSpec], mode: TuneMode) -> Vec<AuditRow> {
    let mut rows: Vec<AuditRow> = Vec::new();
    for spec in specs {
        let module = module_of(&spec.name);
        let trainable = mode.trains(spec.group);
        match rows.iter_mut().find(|r| r.module == module) {
            Some(row) => row.params += spec.numel(),
            None => rows.push(AuditRow {
                module: module.to_string(),
                params: spec.numel(),
                trainable,
            }),
        }
    }
    rows
}

/// Trainable counts of the standard variants at a given foundation scale.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantCounts {
    pub vipt_deep: usize,
    pub vipt_shallow: usize,
    pub vpt_shallow: usize,
    pub vpt_deep: usize,
    pub full: usize,
}

pub fn variant_counts(f: &FoundationConfig, latent_dim: usize) -> VariantCounts {
    let count = |p: &PromptConfig, mode: TuneMode| {
        count_specs(&model_manifest(f, Some(p)), mode, ParamFilter::Trainable)
    };
    let deep = PromptConfig::vipt_deep(f.layers, latent_dim);
    VariantCounts {
        vipt_deep: count(&deep, TuneMode::PromptTune),
        vipt_shallow: count(&PromptConfig::vipt_shallow(f.layers, latent_dim), TuneMode::PromptTune),
        vpt_shallow: count(&PromptConfig::vpt_sum(false), TuneMode::PromptTune),
        vpt_deep: count(&PromptConfig::vpt_sum(true), TuneMode::PromptTune),
        full: count(&deep, TuneMode::FullTune),
    }
}

/// Human-readable audit: per-module table for the active config plus the
/// variants summary.
pub fn audit_report(
    f: &FoundationConfig,
    p: Option<&PromptConfig>,
    mode: TuneMode,
    latent_dim: usize,
) -> String {
    let specs = model_manifest(f, p);
    let rows = audit_rows(&specs, mode);
    let total = count_specs(&specs, mode, ParamFilter::All);
    let trainable = count_specs(&specs, mode, ParamFilter::Trainable);
    let mut out = format!(
        "parameter audit (D={}, L={}, patch={}, template={}, search={})\n",
        f.dim, f.layers, f.patch, f.template_size, f.search_size
    );
    out.push_str(&format!("{:<22}{:>14}  trainable\n", "module", "params"));
    for row in &rows {
        out.push_str(&format!(
            "{:<22}{:>14}  {}\n",
            row.module,
            row.params,
            if row.trainable { "yes" } else { "no" }
        ));
    }
    out.push_str(&format!("{:<22}{:>14}\n", "total", total));
    let ratio = if total > 0 {
        trainable as f64 / total as f64
    } else {
        0.0
    };
    out.push_str(&format!(
        "trainable {trainable} ({:.4}% of total)\n",
        100.0 * ratio
    ));
    let v = variant_counts(f, latent_dim);
    out.push_str(&format!(
        "variants: vipt-deep {} | vipt-shallow {} | vpt-sum-shallow {} | vpt-sum-deep {} | full {}\n",
        v.vipt_deep, v.vipt_shallow, v.vpt_shallow, v.vpt_deep, v.full
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_scale_variant_counts() {
        let f = FoundationConfig::reference();
        let v = variant_counts(&f, 8);
        // τ^A = 3·16²·768 + 768; one block = 19,217.
        assert_eq!(v.vpt_shallow, 590_592);
        assert_eq!(v.vipt_shallow, 590_592 + 19_217);
        assert_eq!(v.vipt_deep, 590_592 + 12 * 19_217);
        assert_eq!(v.vpt_deep, 590_592 + 12 * 320 * 768);
        assert!(v.full > 90_000_000);
    }

    #[test]
    fn trainable_ratio_below_one_percent_at_reference_scale() {
        let f = FoundationConfig::reference();
        let p = PromptConfig::vipt_deep(f.layers, 8);
        let specs = model_manifest(&f, Some(&p));
        let total = count_specs(&specs, TuneMode::PromptTune, ParamFilter::All);
        let trainable = count_specs(&specs, TuneMode::PromptTune, ParamFilter::Trainable);
        assert!((trainable as f64) / (total as f64) < 0.01);
    }

    #[test]
    fn report_lists_every_module_once() {
        let f = FoundationConfig::toy();
        let p = PromptConfig::vipt_deep(f.layers, 8);
        let report = audit_report(&f, Some(&p), TuneMode::PromptTune, 8);
        for needle in [
            "foundation.embed",
            "foundation.pos",
            "foundation.encoder",
            "foundation.norm",
            "foundation.head",
            "aux_embed",
            "prompt.mcp",
            "variants:",
        ] {
            assert!(report.contains(needle), "missing {needle} in:\n{report}");
        }
    }
}
