//! Relative latency of two-stage retrieval versus an exhaustive scan.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::eval::overlap_ratio;
use crate::pipeline::{CandidateStats, Mode, PipelineConfig, PipelineError, Retriever};
use crate::query::QueryDocument;

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub queries: usize,
    pub k_query: usize,
    pub depth: usize,
    pub sr_full_mean_ms: f64,
    pub two_stage_mean_ms: f64,
    /// `two_stage_mean_ms / sr_full_mean_ms`.
    pub latency_ratio: f64,
    pub mean_pool_size: f64,
    pub max_pool_size: usize,
    /// Queries whose pool exceeded `entities_found × k_query` (always 0).
    pub pool_bound_violations: usize,
    /// `None` when no query had any postings.
    pub overlap_ratio: Option<f64>,
}

fn mean_ms(total: Duration, n: usize) -> f64 {
    total.as_secs_f64() * 1e3 / n as f64
}

/// Times `sr_full` and `two_stage` on the same queries, alternating per
/// query so both see the same cache conditions. One untimed warm-up pass
/// over the first query precedes measurement.
pub fn benchmark(
    retriever: &Retriever<'_>,
    queries: &[QueryDocument],
    k_query: usize,
    depth: usize,
) -> Result<BenchReport, PipelineError> {
    if queries.is_empty() {
        return Err(PipelineError::ZeroParameter("query count"));
    }
    let full = PipelineConfig {
        mode: Mode::SrFull,
        k_query,
        depth,
        fallback_to_sr_full: false,
    };
    let two = PipelineConfig {
        mode: Mode::TwoStage,
        ..full
    };

    retriever.run_query(&queries[0], &full)?;
    retriever.run_query(&queries[0], &two)?;

    let mut full_time = Duration::ZERO;
    let mut two_time = Duration::ZERO;
    let mut stats: Vec<CandidateStats> = Vec::with_capacity(queries.len());
    for q in queries {
        let t = Instant::now();
        retriever.run_query(q, &full)?;
        full_time += t.elapsed();

        let t = Instant::now();
        let res = retriever.run_query(q, &two)?;
        two_time += t.elapsed();
        stats.push(res.candidates.unwrap_or_default());
    }

    let n = queries.len();
    let sr_full_mean_ms = mean_ms(full_time, n);
    let two_stage_mean_ms = mean_ms(two_time, n);
    Ok(BenchReport {
        queries: n,
        k_query,
        depth,
        sr_full_mean_ms,
        two_stage_mean_ms,
        latency_ratio: two_stage_mean_ms / sr_full_mean_ms,
        mean_pool_size: stats.iter().map(|s| s.pool_size as f64).sum::<f64>() / n as f64,
        max_pool_size: stats.iter().map(|s| s.pool_size).max().unwrap_or(0),
        pool_bound_violations: stats
            .iter()
            .filter(|s| s.pool_size > s.entities_found * k_query)
            .count(),
        overlap_ratio: overlap_ratio(&stats).ok(),
    })
}
