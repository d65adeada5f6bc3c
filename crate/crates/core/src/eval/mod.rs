//! Ranking metrics, analytic cost accounting and ablation sweeps.

mod ablation;
mod cost;
mod metrics;

pub use ablation::{compare_variants, standard_variants, AblationTable, MeanStd, Variant, VariantRow};
pub use cost::{count_cost, count_cost_with_base, CostReport, ModuleCost};
pub use metrics::{
    eval_threads, evaluate_ranking, evaluate_sampled, hit_at, metrics_from_ranks, mrr_at, ndcg_at, rank_of,
    rank_samples, MetricReport, RankResult,
};

impl MetricReport {
    pub fn to_table(&self) -> String {
        let k = self.k;
        table(
            &[&format!("HR@{k}"), &format!("NDCG@{k}"), &format!("MRR@{k}"), "users"],
            &[vec![
                format!("{:.4}", self.hr),
                format!("{:.4}", self.ndcg),
                format!("{:.4}", self.mrr),
                self.users.to_string(),
            ]],
        )
    }
}

/// Left-aligned text table with two-space column gaps.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}
