//! Metrics and per-patient report generation: RMSE/MAE, fingerstick
//! reference comparison, persistence baseline, and the dual-reference
//! (raw vs smoothed) evaluation report.

use std::fmt::Write as _;

use thiserror::Error;

use crate::features::ChannelBlock;
use crate::ingest::{nearest_sample, EventStream, GriddedSeries, Timestamp};
use crate::kalman::SmoothedSeries;
use crate::train::Prediction;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
}

/// Root-mean-square error between two equal-length lists.
pub fn rmse(pred: &[f64], reference: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != reference.len() {
        return Err(EvalError::LengthMismatch(pred.len(), reference.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum_sq: f64 = pred.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sum_sq / pred.len() as f64).sqrt())
}

/// Mean absolute error between two equal-length lists.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// Fingerstick comparison result.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerstickComparison {
    pub n_matched: usize,
    pub n_unmatched: usize,
    pub mae: Option<f64>,
}

/// Matches each fingerstick event to the nearest in-tolerance series slot
/// and reports the MAE over matched pairs.
pub fn fingerstick_mae(
    series: &GriddedSeries,
    fingerstick: &EventStream,
    tolerance_minutes: i64,
) -> FingerstickComparison {
    let mut diffs = Vec::new();
    let mut unmatched = 0usize;
    for &(ts, reference) in &fingerstick.events {
        match nearest_sample(series, ts, tolerance_minutes) {
            Some(v) => diffs.push((v - reference).abs()),
            None => unmatched += 1,
        }
    }
    let mae = if diffs.is_empty() {
        None
    } else {
        Some(diffs.iter().sum::<f64>() / diffs.len() as f64)
    };
    FingerstickComparison { n_matched: diffs.len(), n_unmatched: unmatched, mae }
}

/// Naive last-value forecasts: prediction at anchor t is glucose(t),
/// emitted wherever both glucose(t) and glucose(t+ph) are present.
pub fn persistence_baseline(block: &ChannelBlock, ph_slots: usize) -> Vec<(usize, f64)> {
    let n = block.len();
    let mut out = Vec::new();
    for t in 0..n.saturating_sub(ph_slots) {
        if let (Some(now), Some(_)) = (block.glucose[t], block.glucose[t + ph_slots]) {
            out.push((t, now));
        }
    }
    out
}

/// One evaluated anchor with both references where available.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub anchor_ts: Timestamp,
    pub mu: f64,
    pub sigma2: f64,
    pub ref_raw: Option<f64>,
    pub ref_smoothed: Option<f64>,
}

/// Per-patient evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub patient_id: String,
    pub ph_minutes: usize,
    pub glucose_source: String,
    pub n_predictions: usize,
    pub rmse_vs_raw: Option<f64>,
    pub rmse_vs_smoothed: Option<f64>,
    pub mae: Option<f64>,
    pub baseline_rmse: Option<f64>,
    pub residuals: Vec<ResidualRow>,
}

/// Builds the report: RMSE against the raw and smoothed references (each
/// over the anchors where that reference exists at t+ph), MAE against the
/// raw reference, and the persistence baseline over the same channel.
pub fn build_report(
    predictions: &[Prediction],
    block: &ChannelBlock,
    raw_glucose: &GriddedSeries,
    smoothed: Option<&SmoothedSeries>,
    fingerstick: Option<&EventStream>,
    patient_id: &str,
    ph_slots: usize,
) -> EvalReport {
    let _ = fingerstick; // fingerstick comparison reported separately
    let n = block.len();
    let mut residuals = Vec::with_capacity(predictions.len());
    let mut pred_raw = Vec::new();
    let mut ref_raw_list = Vec::new();
    let mut pred_sm = Vec::new();
    let mut ref_sm_list = Vec::new();
    for p in predictions {
        let target = p.t_anchor + ph_slots;
        if target >= n {
            continue;
        }
        let ref_raw = raw_glucose.values.get(target).copied().flatten();
        let ref_smoothed = smoothed.map(|s| s.mean[target]);
        if let Some(r) = ref_raw {
            pred_raw.push(p.mu);
            ref_raw_list.push(r);
        }
        if let Some(r) = ref_smoothed {
            pred_sm.push(p.mu);
            ref_sm_list.push(r);
        }
        residuals.push(ResidualRow {
            anchor_ts: p.anchor_ts,
            mu: p.mu,
            sigma2: p.sigma2,
            ref_raw,
            ref_smoothed,
        });
    }

    let baseline = {
        let base = persistence_baseline(block, ph_slots);
        let mut preds = Vec::new();
        let mut refs = Vec::new();
        for (t, v) in base {
            if let Some(r) = raw_glucose.values.get(t + ph_slots).copied().flatten() {
                preds.push(v);
                refs.push(r);
            }
        }
        rmse(&preds, &refs).ok()
    };

    EvalReport {
        patient_id: patient_id.to_string(),
        ph_minutes: ph_slots * crate::ingest::STEP_MINUTES as usize,
        glucose_source: block.source.name().to_string(),
        n_predictions: residuals.len(),
        rmse_vs_raw: rmse(&pred_raw, &ref_raw_list).ok(),
        rmse_vs_smoothed: rmse(&pred_sm, &ref_sm_list).ok(),
        mae: mae(&pred_raw, &ref_raw_list).ok(),
        baseline_rmse: baseline,
        residuals,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".to_string())
}

impl EvalReport {
    /// Aligned-column text table, one row per report.
    pub fn render_text(reports: &[EvalReport]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>4} {:>9} {:>6} {:>10} {:>13} {:>10} {:>10}",
            "patient", "ph", "source", "n", "rmse_raw", "rmse_smoothed", "mae", "baseline"
        );
        for r in reports {
            let _ = writeln!(
                out,
                "{:<12} {:>4} {:>9} {:>6} {:>10} {:>13} {:>10} {:>10}",
                r.patient_id,
                r.ph_minutes,
                r.glucose_source,
                r.n_predictions,
                fmt_opt(r.rmse_vs_raw),
                fmt_opt(r.rmse_vs_smoothed),
                fmt_opt(r.mae),
                fmt_opt(r.baseline_rmse),
            );
        }
        if reports.len() > 1 {
            let mean = |f: fn(&EvalReport) -> Option<f64>| -> Option<f64> {
                let vals: Vec<f64> = reports.iter().filter_map(f).collect();
                (vals.len() == reports.len())
                    .then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let _ = writeln!(
                out,
                "{:<12} {:>4} {:>9} {:>6} {:>10} {:>13} {:>10} {:>10}",
                "mean",
                "-",
                "-",
                "-",
                fmt_opt(mean(|r| r.rmse_vs_raw)),
                fmt_opt(mean(|r| r.rmse_vs_smoothed)),
                fmt_opt(mean(|r| r.mae)),
                fmt_opt(mean(|r| r.baseline_rmse)),
            );
        }
        out
    }

    fn fmt_csv_opt(v: Option<f64>) -> String {
        v.map(|x| format!("{x:?}")).unwrap_or_default()
    }

    /// Summary CSV: `patient,ph,source,n,rmse_raw,rmse_smoothed,mae,baseline`.
    pub fn render_csv(reports: &[EvalReport]) -> String {
        let mut out = String::from("patient,ph,source,n,rmse_raw,rmse_smoothed,mae,baseline\n");
        for r in reports {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.patient_id,
                r.ph_minutes,
                r.glucose_source,
                r.n_predictions,
                Self::fmt_csv_opt(r.rmse_vs_raw),
                Self::fmt_csv_opt(r.rmse_vs_smoothed),
                Self::fmt_csv_opt(r.mae),
                Self::fmt_csv_opt(r.baseline_rmse),
            );
        }
        out
    }

    /// Per-anchor CSV: `anchor_ts,mu,sigma2,ref_raw,ref_smoothed`.
    pub fn residuals_csv(&self) -> String {
        let mut out = String::from("anchor_ts,mu,sigma2,ref_raw,ref_smoothed\n");
        for row in &self.residuals {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{},{}",
                row.anchor_ts,
                row.mu,
                row.sigma2,
                Self::fmt_csv_opt(row.ref_raw),
                Self::fmt_csv_opt(row.ref_smoothed),
            );
        }
        out
    }
}
