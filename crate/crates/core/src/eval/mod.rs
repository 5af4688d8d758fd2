//! Localization-error statistics and the ablation harness.

mod ablation;
mod benchmark;

use std::fs;
use std::path::Path;

use ndcore::Scalar;
use serde::{Deserialize, Serialize};

use crate::daan::{predict_locations, DaanModel, Location, PredictMode};
use crate::error::{Error, Result};
use crate::radiosim::{FingerprintDataset, RadioImage};

pub use ablation::{ablate, ablate_arms, write_summary_csv, AblationRow, AblationTable, Arm};
pub use benchmark::{
    benchmark_with, standard_benchmark, Benchmark, BenchmarkShift, ShiftMagnitudes,
    BENCHMARK_SCALE, QUERY_SAMPLES_PER_RP, SOURCE_SAMPLES_PER_RP, TARGET_SAMPLES_PER_RP,
};

/// Euclidean distance in meters.
pub fn localization_error(pred: [f64; 2], truth: [f64; 2]) -> f64 {
    (pred[0] - truth[0]).hypot(pred[1] - truth[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub errors: Vec<f64>,
    pub median: f64,
    pub p90: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `(error, fraction of errors <= error)` at each distinct error.
    pub cdf: Vec<[f64; 2]>,
}

/// Percentile of sorted values, interpolating linearly between the closest
/// ranks (rank `p * (n - 1)`).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

pub fn summarize(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(Error::invalid("error list", "no errors to summarize"));
    }
    if let Some(bad) = errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(Error::invalid(
            "error list",
            format!("{bad} is not a finite distance"),
        ));
    }
    let n = errors.len() as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mae = errors.iter().sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let std = (errors.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / n).sqrt();
    let mut cdf: Vec<[f64; 2]> = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match cdf.last_mut() {
            Some(last) if last[0] == e => last[1] = frac,
            _ => cdf.push([e, frac]),
        }
    }
    // i + 1 == n at the end, so the last fraction is exactly 1.
    Ok(ErrorStats {
        errors: errors.to_vec(),
        median: percentile(&sorted, 0.5),
        p90: percentile(&sorted, 0.9),
        rmse,
        mae,
        std,
        cdf,
    })
}

/// Errors of a list of predictions against each query's true position.
pub fn prediction_errors(locations: &[Location], queries: &FingerprintDataset) -> Result<Vec<f64>> {
    if locations.len() != queries.len() {
        return Err(Error::shape("predictions", queries.len(), locations.len()));
    }
    locations
        .iter()
        .enumerate()
        .map(|(i, loc)| {
            let truth = queries
                .truth(i)
                .ok_or_else(|| Error::invalid("query set", "queries need labels or positions"))?;
            Ok(localization_error(loc.position, truth))
        })
        .collect()
}

/// Predicts every query in eval mode and summarizes the errors.
pub fn evaluate_model<T: Scalar>(
    model: &mut DaanModel<T>,
    queries: &FingerprintDataset,
    mode: PredictMode,
) -> Result<ErrorStats> {
    queries.validate()?;
    if !queries.is_labeled() {
        return Err(Error::invalid("query set", "queries need labels"));
    }
    if queries.shape != model.input_shape() {
        return Err(Error::shape(
            "query images",
            format!("{:?}", model.input_shape()),
            format!("{:?}", queries.shape),
        ));
    }
    let images: Vec<&RadioImage> = queries.images.iter().collect();
    let locations = predict_locations(model, &images, &queries.rp_coords, mode)?;
    summarize(&prediction_errors(&locations, queries)?)
}

pub fn write_metrics_json(stats: &ErrorStats, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(stats).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Header plus one summary row.
pub fn metrics_csv(stats: &ErrorStats) -> String {
    format!(
        "median,p90,rmse,mae,std,count\n{},{},{},{},{},{}\n",
        stats.median,
        stats.p90,
        stats.rmse,
        stats.mae,
        stats.std,
        stats.errors.len()
    )
}

pub fn write_metrics_csv(stats: &ErrorStats, path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(stats)).map_err(|e| Error::io(path, e))
}
