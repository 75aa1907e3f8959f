//! Trainable-parameter accounting.
//!
//! Every attached method carries a [`ParamAccount`]: a per-component
//! breakdown whose symbolic formula (a pure function of the model config
//! and the adapter spec) must match a live enumeration of the parameter
//! store exactly. [`account_presets`] evaluates the formulas at the
//! whisper-small and whisper-medium dimension presets and reports deltas
//! against the published trainable-parameter column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

use super::{AdapterSpec, Method};

/// Per-component trainable parameter counts plus totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAccount {
    /// component name → trainable count, in a fixed order
    pub components: Vec<(String, u64)>,
    pub total: u64,
    pub frozen_total: u64,
}

impl ParamAccount {
    pub fn component(&self, name: &str) -> Option<u64> {
        self.components.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    pub fn total_millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

/// Symbolic trainable-parameter count per component. Pure arithmetic over
/// the config and spec; never instantiates a model.
pub fn symbolic_account(config: &ModelConfig, spec: &AdapterSpec) -> ParamAccount {
    let e = config.d_model as u64;
    let (n_enc, n_dec) = spec.prompt_lens();
    let mut components: Vec<(String, u64)> = Vec::new();

    if spec.base_trainable() {
        components.push(("base".into(), Model::symbolic_base_count(config)));
    }
    if n_enc > 0 {
        components.push(("prompt.encoder".into(), n_enc as u64 * e));
    }
    if n_dec > 0 {
        components.push(("prompt.decoder".into(), n_dec as u64 * e));
    }
    if spec.uses_deep() && spec.n_deep > 0 {
        let mut blocks = 0u64;
        if n_enc > 0 {
            blocks += config.n_enc_blocks as u64;
        }
        if n_dec > 0 {
            blocks += config.n_dec_blocks as u64;
        }
        components.push(("prompt.deep".into(), blocks * spec.n_deep as u64 * e));
    }
    if spec.uses_respt() {
        let b = spec.resolved_bottleneck(config.d_model) as u64;
        components.push(("respt_mlp".into(), e * b + b + b * e + e));
    }
    if spec.uses_lpt() {
        let h = spec.lpt_hidden as u64;
        components.push(("lpt_encoder".into(), e * h + h + h * e + e));
    }
    if spec.uses_lora() {
        let r = spec.lora_rank as u64;
        let modules = config.n_enc_blocks as u64 + 2 * config.n_dec_blocks as u64;
        let per_proj = r * e + e * r;
        components.push(("lora".into(), modules * spec.lora_targets.len() as u64 * per_proj));
    }

    let total = components.iter().map(|(_, c)| c).sum();
    let base = Model::symbolic_base_count(config);
    let frozen_total = if spec.base_trainable() { 0 } else { base };
    ParamAccount { components, total, frozen_total }
}

/// Builds the account for a live attached model and cross-checks the
/// symbolic formula against an enumeration of the store. A mismatch means
/// a parameter was created but not accounted (or vice versa) and is a bug.
pub(super) fn build_account(model: &Model, spec: &AdapterSpec) -> Result<ParamAccount> {
    let account = symbolic_account(model.config(), spec);
    let live_trainable = model.store().trainable_count();
    let live_frozen = model.store().frozen_count();
    if live_trainable != account.total || live_frozen != account.frozen_total {
        return Err(Error::Config(format!(
            "parameter account mismatch: symbolic {}/{} vs live {}/{} (trainable/frozen)",
            account.total, account.frozen_total, live_trainable, live_frozen
        )));
    }
    Ok(account)
}

/// One row of the preset comparison: our reconstruction vs the published
/// trainable-parameter figure, where one is defined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PresetRow {
    pub method: String,
    pub count: u64,
    pub millions: f64,
    pub published_millions: Option<f64>,
    pub delta_millions: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: String,
    pub rows: Vec<PresetRow>,
}

fn preset_spec(method: Method) -> AdapterSpec {
    // Published comparison configuration: prompt length 128 on both sides,
    // deep length 64 on all blocks, bottleneck e/2, language-encoder
    // hidden 512, LoRA rank 8 alpha 16 on q,v.
    AdapterSpec { method, ..AdapterSpec::default() }
}

fn row(config: &ModelConfig, method: Method, published: Option<f64>) -> PresetRow {
    let account = symbolic_account(config, &preset_spec(method));
    let millions = account.total_millions();
    PresetRow {
        method: method.label().to_string(),
        count: account.total,
        millions,
        published_millions: published,
        delta_millions: published.map(|p| millions - p),
    }
}

/// Preset accounting for both published dimension presets.
pub fn account_presets() -> Vec<PresetReport> {
    let small = ModelConfig::whisper_small_preset();
    let medium = ModelConfig::whisper_medium_preset();
    vec![
        PresetReport {
            preset: "whisper-small".into(),
            rows: vec![
                row(&small, Method::Fft, Some(240.58)),
                row(&small, Method::Lora, Some(1.85)),
                row(&small, Method::VanillaSpt, Some(0.20)),
                row(&small, Method::Dpt, Some(1.39)),
                row(&small, Method::ResPt, Some(0.79)),
                row(&small, Method::Lpt, Some(0.99)),
                row(&small, Method::Spt4Asr, Some(3.74)),
                row(&small, Method::WholeModelSpt, Some(240.69)),
            ],
        },
        PresetReport {
            preset: "whisper-medium".into(),
            rows: vec![
                row(&medium, Method::Fft, Some(762.32)),
                row(&medium, Method::Lora, Some(4.94)),
                row(&medium, Method::Spt4Asr, Some(7.48)),
                row(&medium, Method::WholeModelSpt, Some(762.59)),
            ],
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::whisper_small_preset()
    }

    #[test]
    fn vanilla_entire_prompt_count_at_small_preset() {
        let account = symbolic_account(&small(), &preset_spec(Method::VanillaSpt));
        assert_eq!(account.total, 196_608);
        assert_eq!(account.component("prompt.encoder"), Some(128 * 768));
        assert_eq!(account.component("prompt.decoder"), Some(128 * 768));
    }

    #[test]
    fn respt_addition_reconstructs_published_count() {
        let account = symbolic_account(&small(), &preset_spec(Method::ResPt));
        // bottleneck e/2 = 384: 2·768·384 + 384 + 768 on top of vanilla
        assert_eq!(account.component("respt_mlp"), Some(2 * 768 * 384 + 384 + 768));
        assert_eq!(account.total, 787_584);
    }

    #[test]
    fn lpt_addition_reconstructs_published_count() {
        let account = symbolic_account(&small(), &preset_spec(Method::Lpt));
        assert_eq!(account.component("lpt_encoder"), Some(787_712));
        assert_eq!(account.total, 984_320);
    }

    #[test]
    fn dpt_addition_is_within_published_tolerance() {
        let account = symbolic_account(&small(), &preset_spec(Method::Dpt));
        assert_eq!(account.component("prompt.deep"), Some(64 * 768 * 24));
        assert_eq!(account.total, 1_376_256);
        // known residual vs the published 1.39M is at most 0.02M
        assert!((account.total_millions() - 1.39).abs() <= 0.02);
    }

    #[test]
    fn medium_prompt_delta_matches_published_within_tolerance() {
        let medium = ModelConfig::whisper_medium_preset();
        let whole = symbolic_account(&medium, &preset_spec(Method::WholeModelSpt));
        let fft = symbolic_account(&medium, &preset_spec(Method::Fft));
        let delta = whole.total - fft.total;
        assert_eq!(delta, 2 * 128 * 1024);
        // published delta 762.59M − 762.32M = 0.27M
        assert!(((delta as f64) / 1e6 - 0.27).abs() < 0.01);
    }

    #[test]
    fn spt4asr_total_is_sum_of_constituents() {
        let config = small();
        let composed = symbolic_account(&config, &preset_spec(Method::Spt4Asr));
        let vanilla = symbolic_account(&config, &preset_spec(Method::VanillaSpt)).total;
        let deep = symbolic_account(&config, &preset_spec(Method::Dpt)).total - vanilla;
        let respt = symbolic_account(&config, &preset_spec(Method::ResPt)).total - vanilla;
        let lpt = symbolic_account(&config, &preset_spec(Method::Lpt)).total - vanilla;
        assert_eq!(composed.total, vanilla + deep + respt + lpt);
    }

    #[test]
    fn presets_cover_every_published_row() {
        let reports = account_presets();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].rows.len(), 8);
        assert_eq!(reports[1].rows.len(), 4);
        for report in &reports {
            for row in &report.rows {
                assert!(row.published_millions.is_some());
                assert!(row.delta_millions.is_some());
            }
        }
    }
}
