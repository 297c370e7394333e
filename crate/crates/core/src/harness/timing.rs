//! Crop-stage latency measurement.
//!
//! Only the strategy call is timed: image decoding and VQA answering are
//! outside the clock. Records are processed serially so per-call latencies
//! do not overlap.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{load_image, HarnessError};
use crate::datasets::VqaRecord;
use crate::geometry::Image;
use crate::strategies::{run_strategy, StrategyBackends, StrategyConfig, StrategyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingResult {
    pub method: StrategyKind,
    pub n_measured: usize,
    pub mean_seconds: f64,
}

/// For each strategy: `n_warmup` discarded passes over `records`, then the
/// mean crop-stage seconds over `n_measure` passes.
pub fn measure_timing(
    records: &[VqaRecord],
    strategies: &[StrategyConfig],
    backends: &StrategyBackends,
    n_warmup: usize,
    n_measure: usize,
) -> Result<BTreeMap<StrategyKind, TimingResult>, HarnessError> {
    if n_measure == 0 {
        return Err(HarnessError::Config("n_measure must be at least 1".into()));
    }
    if records.is_empty() {
        return Err(HarnessError::Config("no records to time".into()));
    }
    for cfg in strategies {
        cfg.validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        backends
            .check(cfg.kind)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    let images: Vec<Image> = records.iter().map(load_image).collect::<Result<_, _>>()?;
    let mut out = BTreeMap::new();
    for cfg in strategies {
        let mut total = 0.0;
        let mut n = 0;
        for pass in 0..n_warmup + n_measure {
            for (r, img) in records.iter().zip(&images) {
                let t0 = Instant::now();
                run_strategy(cfg, backends, img, &r.question, r.gt_box)?;
                let dt = t0.elapsed().as_secs_f64();
                if pass >= n_warmup {
                    total += dt;
                    n += 1;
                }
            }
        }
        out.insert(
            cfg.kind,
            TimingResult {
                method: cfg.kind,
                n_measured: n,
                mean_seconds: total / n as f64,
            },
        );
    }
    Ok(out)
}
