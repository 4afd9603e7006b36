//! Ablation harness: re-runs evaluation under single-knob config changes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::dataset::Dataset;
use crate::error::{PahsError, Result};
use crate::model::config::{AttentionKind, AttentionSource, UpdateOrder};
use crate::model::params::PahsParameters;
use crate::model::ModelConfig;
use crate::sequence::run;
use crate::tensor::Real;
use crate::train::evaluate;

/// Every variant name, in report order.
pub const VARIANTS: &[&str] = &[
    "n0",
    "n1",
    "n2",
    "n3",
    "n4",
    "order_b_first",
    "order_l_first",
    "attn_none",
    "attn_nla",
    "attn_snla",
    "mode_cross",
    "mode_self",
    "window0",
    "window3",
    "window7",
];

/// `base` with the single change named by `variant`. Window variants turn
/// on bidirectional inference.
pub fn variant_config(base: &ModelConfig, variant: &str) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    match variant {
        "order_b_first" => cfg.update_order = UpdateOrder::BlurFirst,
        "order_l_first" => cfg.update_order = UpdateOrder::LatentFirst,
        "attn_none" => cfg.attention = AttentionKind::None,
        "attn_nla" => cfg.attention = AttentionKind::NonLocal,
        "attn_snla" => cfg.attention = AttentionKind::Selective,
        "mode_cross" => cfg.attention_source = AttentionSource::Cross,
        "mode_self" => cfg.attention_source = AttentionSource::SelfAttention,
        _ => {
            if let Some(n) = variant.strip_prefix('n').and_then(|s| s.parse::<usize>().ok()) {
                cfg.n_pp = n;
            } else if let Some(w) = variant.strip_prefix("window").and_then(|s| s.parse::<usize>().ok()) {
                cfg.bidirectional = true;
                cfg.future_window = w;
            } else {
                return Err(PahsError::Config(format!(
                    "unknown variant `{variant}`; known: {}",
                    VARIANTS.join(", ")
                )));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parameters for `config`, copied from `base` wherever a tensor of the same
/// name and shape exists and freshly initialised elsewhere.
pub fn adapt_params<T: Real>(base: &PahsParameters<T>, config: &ModelConfig) -> Result<PahsParameters<T>> {
    let mut out = PahsParameters::init(config)?;
    for (name, t) in out.store.iter_mut() {
        if let Some(src) = base.store.get(name) {
            if src.shape() == t.shape() {
                *t = src.clone();
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Best-of-repeats inference time over the whole validation set.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOptions {
    /// Variant names; empty means all of [`VARIANTS`].
    pub variants: Vec<String>,
    pub repeats: usize,
}

impl Default for AblationOptions {
    fn default() -> Self {
        AblationOptions {
            variants: Vec::new(),
            repeats: 3,
        }
    }
}

/// Wall time of inference over `data`, minimum over `repeats` runs.
pub fn time_inference<T: Real>(params: &PahsParameters<T>, data: &Dataset<T>, repeats: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        for seq in &data.sequences {
            run(&seq.blur, params)?;
        }
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

pub fn ablate<T: Real>(
    base: &PahsParameters<T>,
    data: &Dataset<T>,
    opts: &AblationOptions,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let names: Vec<String> = if opts.variants.is_empty() {
        VARIANTS.iter().map(|s| s.to_string()).collect()
    } else {
        opts.variants.clone()
    };
    // resolve every name before spending time on evaluation
    let configs = names
        .iter()
        .map(|n| variant_config(&base.config, n))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(names.len());
    for (name, cfg) in names.iter().zip(&configs) {
        let params = adapt_params(base, cfg)?;
        let report = evaluate(&params, data)?;
        let wall_ms = time_inference(&params, data, opts.repeats)?;
        let row = AblationRow {
            variant: name.clone(),
            psnr: report.psnr,
            ssim: report.ssim,
            wall_ms,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn report_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,psnr,ssim,wall_ms\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.3}", r.variant, r.psnr, r.ssim, r.wall_ms);
    }
    out
}

pub fn write_report(path: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::write(path, report_csv(rows)).map_err(|e| PahsError::io(path, e))
}
