use serde::Serialize;

use super::{evaluate_ranking, table, MetricReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
}

/// The full model and the three single-module removals.
pub fn standard_variants(base: &ModelConfig) -> Vec<Variant> {
    let with = |name: &str, f: fn(&mut ModelConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Variant {
            name: name.into(),
            config,
        }
    };
    vec![
        with("full", |_| {}),
        with("w/o cross-behavior", |c| c.cross_behavior = false),
        with("w/o cross-feature", |c| c.cross_feature = false),
        with("w/o cross-period", |c| c.pyramid = false),
    ]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = match n {
            1 => 0.0,
            _ => (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt(),
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRow {
    pub name: String,
    pub runs: Vec<MetricReport>,
    pub hr: MeanStd,
    pub ndcg: MeanStd,
    pub mrr: MeanStd,
    /// Set when a run diverged; the other variants are still reported.
    pub failed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
    pub warnings: Vec<String>,
}

/// Trains every variant once per seed and reports test metrics of the
/// best-validation parameters.
pub fn compare_variants(
    ds: &Dataset,
    variants: &[Variant],
    train: &TrainConfig,
    seeds: &[u64],
    k: usize,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut warnings = Vec::new();
    if seeds.len() == 1 {
        let w = "one seed: std columns are 0".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut runs = Vec::new();
        let mut failed = None;
        for &seed in seeds {
            log::info!("ablation: {} seed {seed}", v.name);
            let outcome = Trainer::new(v.config.clone(), train.clone(), seed)
                .and_then(|mut t| t.fit(ds, |_, _| Ok(())).map(|_| t))
                .and_then(|t| evaluate_ranking(&t.best_model(), ds, &ds.split.test, k));
            match outcome {
                Ok(report) => runs.push(report),
                Err(Error::Divergence(msg)) => {
                    log::warn!("variant {} diverged: {msg}", v.name);
                    failed = Some(format!("seed {seed}: {msg}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let pick = |f: fn(&MetricReport) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        rows.push(VariantRow {
            name: v.name.clone(),
            hr: pick(|r| r.hr),
            ndcg: pick(|r| r.ndcg),
            mrr: pick(|r| r.mrr),
            runs,
            failed,
        });
    }
    Ok(AblationTable {
        k,
        seeds: seeds.to_vec(),
        rows,
        warnings,
    })
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let k = self.k;
        let cell = |m: &MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| match &r.failed {
                Some(why) => vec![r.name.clone(), "failed".into(), "failed".into(), "failed".into(), why.clone()],
                None => vec![r.name.clone(), cell(&r.mrr), cell(&r.ndcg), cell(&r.hr), String::new()],
            })
            .collect();
        let headers = [
            "variant".to_string(),
            format!("MRR@{k}"),
            format!("NDCG@{k}"),
            format!("HR@{k}"),
            "note".into(),
        ];
        let headers: Vec<&str> = headers.iter().map(String::as_str).collect();
        let mut out = table(&headers, &rows);
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_boundaries() {
        assert_eq!(MeanStd::of(&[0.3]), MeanStd { mean: 0.3, std: 0.0 });
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_standard_variants() {
        let names: Vec<String> = standard_variants(&ModelConfig::tiny()).into_iter().map(|v| v.name).collect();
        assert_eq!(names, ["full", "w/o cross-behavior", "w/o cross-feature", "w/o cross-period"]);
    }
}
