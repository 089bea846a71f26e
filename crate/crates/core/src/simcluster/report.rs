//! Aggregated run metrics and their CSV rendering.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{percentile, MetricKind, MetricSeries};

/// Everything a run reports. Built once at the end of a simulation from
/// the measured (post-warm-up) completions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub label: String,
    pub xpyd: String,
    pub per_die_batch: usize,
    pub concurrency: usize,
    pub completed: usize,
    /// Completed queries per minute over the measured window.
    pub qpm: f64,
    pub ttft_mean_s: f64,
    pub ttft_p99_s: f64,
    pub tpot_mean_ms: f64,
    pub tpot_p99_ms: f64,
    pub e2e_mean_s: f64,
    pub e2e_p99_s: f64,
    /// Output-token throughput, tokens/s.
    pub ott_tok_s: f64,
    /// Prompt-token throughput, tokens/s.
    pub prompt_tok_s: f64,
    /// Total-token throughput; by construction exactly `ott + prompt`.
    pub ttt_tok_s: f64,
    pub output_tokens: u64,
    pub prompt_tokens: u64,
    /// Tokens served from the radix cache at prefill scheduling time.
    pub radix_hit_tokens: u64,
    pub rebalances: usize,
    pub prefill_utilization: Vec<f64>,
    pub decode_utilization: Vec<f64>,
    /// Worst-layer imbalance ratio sampled at each scheduler tick.
    pub imbalance_series: Vec<(f64, f64)>,
    pub measured_window_s: (f64, f64),
    /// Closed-loop violations observed after warm-up (should be zero).
    pub concurrency_violations: usize,
}

/// CSV column header, frozen to the table layout reports are compared
/// against: identity, throughput, latency means, tails, token rates.
pub const CSV_HEADER: &str =
    "xpyd,batch,qpm,ttft_s,tpot_ms,p99_ttft_s,p99_tpot_ms,e2e_s,p99_e2e_s,ott_tok_s,ttt_tok_s";

impl SimReport {
    /// One CSV row in [`CSV_HEADER`] order, fixed precision so identical
    /// runs are byte-identical.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.2},{:.4},{:.3},{:.4},{:.3},{:.3},{:.3},{:.1},{:.1}",
            self.xpyd,
            self.per_die_batch,
            self.qpm,
            self.ttft_mean_s,
            self.tpot_mean_ms,
            self.ttft_p99_s,
            self.tpot_p99_ms,
            self.e2e_mean_s,
            self.e2e_p99_s,
            self.ott_tok_s,
            self.ttt_tok_s,
        )
    }
}

/// Per-request samples collected during the measured window.
#[derive(Debug, Default)]
pub(crate) struct MetricsBank {
    pub ttft: Vec<f64>,
    pub tpot_ms: Vec<f64>,
    pub e2e: Vec<f64>,
    pub output_tokens: u64,
    pub prompt_tokens: u64,
}

impl MetricsBank {
    pub fn series(&self) -> Result<(MetricSeries, MetricSeries, MetricSeries)> {
        let mut ttft = MetricSeries::new(MetricKind::TtftSeconds);
        let mut tpot = MetricSeries::new(MetricKind::TpotMillis);
        let mut e2e = MetricSeries::new(MetricKind::E2eSeconds);
        for &v in &self.ttft {
            ttft.push(v)?;
        }
        for &v in &self.tpot_ms {
            tpot.push(v)?;
        }
        for &v in &self.e2e {
            e2e.push(v)?;
        }
        Ok((ttft, tpot, e2e))
    }
}

pub(crate) struct ReportInputs<'a> {
    pub label: String,
    pub xpyd: String,
    pub per_die_batch: usize,
    pub concurrency: usize,
    pub bank: &'a MetricsBank,
    pub window: (f64, f64),
    pub radix_hit_tokens: u64,
    pub rebalances: usize,
    pub prefill_utilization: Vec<f64>,
    pub decode_utilization: Vec<f64>,
    pub imbalance_series: Vec<(f64, f64)>,
    pub concurrency_violations: usize,
}

pub(crate) fn build_report(inputs: ReportInputs<'_>) -> Result<SimReport> {
    let (ttft, tpot, e2e) = inputs.bank.series()?;
    let elapsed = (inputs.window.1 - inputs.window.0).max(f64::EPSILON);
    let completed = inputs.bank.e2e.len();
    let ott = inputs.bank.output_tokens as f64 / elapsed;
    let prompt_rate = inputs.bank.prompt_tokens as f64 / elapsed;
    Ok(SimReport {
        label: inputs.label,
        xpyd: inputs.xpyd,
        per_die_batch: inputs.per_die_batch,
        concurrency: inputs.concurrency,
        completed,
        qpm: completed as f64 / elapsed * 60.0,
        ttft_mean_s: ttft.mean()?,
        ttft_p99_s: percentile(&ttft, 0.99)?,
        tpot_mean_ms: tpot.mean()?,
        tpot_p99_ms: percentile(&tpot, 0.99)?,
        e2e_mean_s: e2e.mean()?,
        e2e_p99_s: percentile(&e2e, 0.99)?,
        ott_tok_s: ott,
        prompt_tok_s: prompt_rate,
        // The conservation identity TTT = OTT + prompt throughput holds
        // exactly because it is computed as that sum.
        ttt_tok_s: ott + prompt_rate,
        output_tokens: inputs.bank.output_tokens,
        prompt_tokens: inputs.bank.prompt_tokens,
        radix_hit_tokens: inputs.radix_hit_tokens,
        rebalances: inputs.rebalances,
        prefill_utilization: inputs.prefill_utilization,
        decode_utilization: inputs.decode_utilization,
        imbalance_series: inputs.imbalance_series,
        measured_window_s: inputs.window,
        concurrency_violations: inputs.concurrency_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_row_is_stable_and_ordered() {
        let bank = MetricsBank {
            ttft: vec![1.5, 2.0],
            tpot_ms: vec![50.0, 60.0],
            e2e: vec![50.0, 70.0],
            output_tokens: 2000,
            prompt_tokens: 7000,
        };
        let report = build_report(ReportInputs {
            label: "t".into(),
            xpyd: "6P8-1D32".into(),
            per_die_batch: 40,
            concurrency: 2560,
            bank: &bank,
            window: (10.0, 110.0),
            radix_hit_tokens: 123,
            rebalances: 1,
            prefill_utilization: vec![0.5],
            decode_utilization: vec![0.9],
            imbalance_series: vec![],
            concurrency_violations: 0,
        })
        .unwrap();
        assert_eq!(report.ttt_tok_s, report.ott_tok_s + report.prompt_tok_s);
        let row = report.csv_row();
        assert!(row.starts_with("6P8-1D32,40,1.20,1.7500,55.000,"));
        assert_eq!(row, report.csv_row());
        assert_eq!(CSV_HEADER.split(',').count(), row.split(',').count());
    }
}
