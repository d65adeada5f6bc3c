//! Closed-form parameter and multiply-accumulate counts.
//!
//! MACs are those of the matrix products of one sequence's forward pass
//! (mixer weights, gate, period-scaling convolution, head projection and
//! item scoring). Element-wise work, normalization and embedding lookups
//! are not counted.

use serde::Serialize;

use super::table;
use crate::error::Result;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// Same module with every latent width equal to its axis width.
    pub dense_params: u64,
    pub dense_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub modules: Vec<ModuleCost>,
    pub embedding_params: u64,
    pub total_params: u64,
    pub total_macs: u64,
    /// Mixer blocks only (behavior and feature).
    pub mixer_macs: u64,
    pub dense_mixer_macs: u64,
    pub mixer_mac_ratio: f64,
    pub feature_mac_ratio: f64,
    pub behavior_mac_ratio: f64,
    /// Everything between the embeddings and the head: mixers, gates and
    /// period scaling.
    pub encoder_params: u64,
    pub encoder_macs: u64,
    pub dense_encoder_params: u64,
    pub dense_encoder_macs: u64,
    /// Encoder MAC increment of the low-rank model relative to the dense one.
    pub increment_mac_ratio: f64,
    pub increment_param_ratio: f64,
    /// Reference cost that increments are expressed against; defaults to
    /// the head (pooled projection plus item scoring).
    pub base_macs: u64,
    pub increment_pct: f64,
    pub dense_increment_pct: f64,
}

fn u(x: usize) -> u64 {
    x as u64
}

/// A mixer block mixing `rows` vectors of length `axis` through `latent`.
fn mixer(name: String, width: usize, rows: usize, axis: usize, latent: usize, dense_latent: usize) -> ModuleCost {
    let params = |h: usize| u(2 * width + axis * h + h + h * axis + axis);
    let macs = |h: usize| u(2 * rows * axis * h);
    ModuleCost {
        name,
        params: params(latent),
        macs: macs(latent),
        dense_params: params(dense_latent),
        dense_macs: macs(dense_latent),
    }
}

fn fixed(name: String, params: u64, macs: u64) -> ModuleCost {
    ModuleCost {
        name,
        params,
        macs,
        dense_params: params,
        dense_macs: macs,
    }
}

/// Per-sequence cost of `config` (fields must be set).
pub fn count_cost(config: &ModelConfig) -> Result<CostReport> {
    count_cost_with_base(config, None)
}

/// Like [`count_cost`] but expresses increments against `base_macs`.
pub fn count_cost_with_base(config: &ModelConfig, base_macs: Option<u64>) -> Result<CostReport> {
    config.validate()?;
    let width = config.width;
    let d = config.field_dim();
    let lengths = config.scale_lengths();
    let mut modules = Vec::new();
    for (s, &len) in lengths.iter().enumerate() {
        let p = format!("layer{}", s + 1);
        if config.cross_behavior {
            modules.push(mixer(format!("{p}.behavior"), width, width, len, config.behavior_latent(len), len));
        }
        if config.cross_feature {
            modules.push(mixer(format!("{p}.feature"), width, len, width, config.feature_latent(), width));
        }
        if config.uses_gate() {
            modules.push(fixed(format!("{p}.gate"), u(width + 1), u(len * width)));
        }
        if config.pyramid && s + 1 < lengths.len() {
            let next = lengths[s + 1];
            modules.push(fixed(
                format!("{p}.scale"),
                u(config.kernel * width * width + width),
                u(next * config.kernel * width * width),
            ));
        }
    }
    let encoder_end = modules.len();
    modules.push(fixed(
        "head.proj".into(),
        u(config.layers * width * d + d),
        u(config.layers * width * d),
    ));
    modules.push(fixed("head.score".into(), 0, u(config.num_items() * d)));

    let embedding_params: u64 = config.fields.iter().map(|f| u(f.vocab * d)).sum();
    let enc = &modules[..encoder_end];
    let total = |ms: &[&ModuleCost], f: fn(&ModuleCost) -> u64| ms.iter().map(|&m| f(m)).sum::<u64>();
    let select = |pred: &dyn Fn(&str) -> bool| enc.iter().filter(|m| pred(&m.name)).collect::<Vec<_>>();
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let ratio = |ms: &[&ModuleCost]| div(total(ms, |m| m.macs), total(ms, |m| m.dense_macs));
    let mixers = select(&|n| n.ends_with(".behavior") || n.ends_with(".feature"));
    let encoder = select(&|_| true);
    let everything: Vec<&ModuleCost> = modules.iter().collect();
    let head: Vec<&ModuleCost> = modules[encoder_end..].iter().collect();
    let mixer_macs = total(&mixers, |m| m.macs);
    let dense_mixer_macs = total(&mixers, |m| m.dense_macs);
    let encoder_params = total(&encoder, |m| m.params);
    let encoder_macs = total(&encoder, |m| m.macs);
    let dense_encoder_params = total(&encoder, |m| m.dense_params);
    let dense_encoder_macs = total(&encoder, |m| m.dense_macs);
    let head_macs = total(&head, |m| m.macs);
    let base = base_macs.unwrap_or(head_macs).max(1);
    Ok(CostReport {
        embedding_params,
        total_params: embedding_params + total(&everything, |m| m.params),
        total_macs: total(&everything, |m| m.macs),
        mixer_macs,
        dense_mixer_macs,
        mixer_mac_ratio: div(mixer_macs, dense_mixer_macs),
        feature_mac_ratio: ratio(&select(&|n| n.ends_with(".feature"))),
        behavior_mac_ratio: ratio(&select(&|n| n.ends_with(".behavior"))),
        encoder_params,
        encoder_macs,
        dense_encoder_params,
        dense_encoder_macs,
        increment_mac_ratio: div(encoder_macs, dense_encoder_macs),
        increment_param_ratio: div(encoder_params, dense_encoder_params),
        base_macs: base,
        increment_pct: 100.0 * div(encoder_macs, base),
        dense_increment_pct: 100.0 * div(dense_encoder_macs, base),
        modules,
    })
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .modules
            .iter()
            .map(|m| {
                vec![
                    m.name.clone(),
                    m.params.to_string(),
                    m.macs.to_string(),
                    m.dense_params.to_string(),
                    m.dense_macs.to_string(),
                ]
            })
            .collect();
        rows.push(vec![
            "encoder".into(),
            self.encoder_params.to_string(),
            self.encoder_macs.to_string(),
            self.dense_encoder_params.to_string(),
            self.dense_encoder_macs.to_string(),
        ]);
        rows.push(vec![
            "embeddings".into(),
            self.embedding_params.to_string(),
            "0".into(),
            self.embedding_params.to_string(),
            "0".into(),
        ]);
        let mut out = table(&["module", "params", "macs", "dense_params", "dense_macs"], &rows);
        out.push_str(&format!(
            "\nmixer MAC ratio {:.4} (feature {:.4}, behavior {:.4})\n\
             encoder increment: {:.2}% low-rank vs {:.2}% dense of {} base MACs, ratio {:.4}\n",
            self.mixer_mac_ratio,
            self.feature_mac_ratio,
            self.behavior_mac_ratio,
            self.increment_pct,
            self.dense_increment_pct,
            self.base_macs,
            self.increment_mac_ratio,
        ));
        out
    }
}
