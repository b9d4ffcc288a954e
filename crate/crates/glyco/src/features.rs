//! Crafted physiological input channels: effective carbohydrates,
//! effective insulin, and a weighted step average.
//!
//! Carbs ramp up after a 15-minute delay at 11.1% of the meal per slot,
//! peak at the 60-minute mark, then decay at 2.8% per slot. Insulin
//! decays linearly from the delivered dose at the blended absorption
//! rate. Steps are averaged over the previous 10 readings with linearly
//! decreasing weights.

use thiserror::Error;

use crate::ingest::{EventKind, GriddedSeries, Timestamp};
use crate::kalman::SmoothedSeries;
use std::collections::BTreeMap;

/// Kinetic constants for the feature channels, in grid-slot units.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureParams {
    /// Carbs increasing factor per slot.
    pub beta_inc: f64,
    /// Carbs decreasing factor per slot.
    pub beta_dec: f64,
    /// Slots before a meal affects blood glucose (15 min).
    pub delay_slots: usize,
    /// Slots from meal to peak effect (60 min).
    pub peak_offset_slots: usize,
    /// Insulin decay in units per slot (5 min x 0.014 min^-1).
    pub r_insulin: f64,
    /// Window length for the weighted step average.
    pub step_window_n: usize,
    /// Compatibility switch for the literal decreasing-phase formula and
    /// most-recent-event-only accounting.
    pub compat: CompatMode,
}

/// Literal-formula compatibility switches. The default mode anchors the
/// carb decay at the peak and superposes all active meals/boluses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompatMode {
    /// Decay as written, anchored at the meal time instead of the peak.
    pub literal_decay: bool,
    /// Track only the most recent meal/bolus instead of superposing.
    pub most_recent_only: bool,
}

impl Default for FeatureParams {
    fn default() -> FeatureParams {
        FeatureParams {
            beta_inc: 0.111,
            beta_dec: 0.028,
            delay_slots: 3,
            peak_offset_slots: 12,
            r_insulin: 5.0 * 0.014,
            step_window_n: 10,
            compat: CompatMode::default(),
        }
    }
}

/// Contribution of a single meal at slot distance `delta`.
fn carb_contribution(c_meal: f64, delta: i64, p: &FeatureParams) -> f64 {
    let delay = p.delay_slots as i64;
    let peak = p.peak_offset_slots as i64;
    if delta <= delay {
        return 0.0;
    }
    if delta <= peak {
        let ramp = ((delta - delay) as f64 * p.beta_inc).min(1.0);
        return c_meal * ramp;
    }
    let decay_slots = if p.compat.literal_decay { delta } else { delta - peak };
    (c_meal * (1.0 - decay_slots as f64 * p.beta_dec)).max(0.0)
}

/// Effective carbohydrates (grams) at slot `t_s` from the given meals.
pub fn effective_carbs(meals: &[(i64, f64)], t_s: i64, p: &FeatureParams) -> f64 {
    assert!(t_s >= 0);
    let active: Box<dyn Iterator<Item = &(i64, f64)>> = if p.compat.most_recent_only {
        Box::new(meals.iter().filter(|(t, _)| *t <= t_s).max_by_key(|(t, _)| *t).into_iter())
    } else {
        Box::new(meals.iter())
    };
    let total: f64 = active.map(|&(t_meal, c)| carb_contribution(c, t_s - t_meal, p)).sum();
    total.max(0.0)
}

/// Effective insulin (units) at slot `t_s` from the given boluses.
pub fn effective_insulin(boluses: &[(i64, f64)], t_s: i64, p: &FeatureParams) -> f64 {
    let active: Box<dyn Iterator<Item = &(i64, f64)>> = if p.compat.most_recent_only {
        Box::new(boluses.iter().filter(|(t, _)| *t <= t_s).max_by_key(|(t, _)| *t).into_iter())
    } else {
        Box::new(boluses.iter())
    };
    let total: f64 = active
        .map(|&(t_bolus, dose)| {
            let delta = t_s - t_bolus;
            if delta < 0 {
                0.0
            } else {
                (dose - delta as f64 * p.r_insulin).max(0.0)
            }
        })
        .sum();
    total.max(0.0)
}

/// Weighted step average over the previous `step_window_n` slots; missing
/// or out-of-range slots contribute 0.
pub fn weighted_steps(steps: &GriddedSeries, t_s: i64, p: &FeatureParams) -> f64 {
    assert!(t_s >= 0);
    let n = p.step_window_n as i64;
    let mut acc = 0.0;
    for i in 0..n {
        let slot = t_s - i;
        if slot < 0 || slot >= steps.len() as i64 {
            continue;
        }
        if let Some(v) = steps.values[slot as usize] {
            acc += (n - i) as f64 * v;
        }
    }
    acc / n as f64
}

/// Which series supplies the glucose channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlucoseSource {
    Raw,
    Smoothed,
}

impl GlucoseSource {
    pub fn name(self) -> &'static str {
        match self {
            GlucoseSource::Raw => "raw",
            GlucoseSource::Smoothed => "smoothed",
        }
    }

    pub fn from_name(s: &str) -> Option<GlucoseSource> {
        match s {
            "raw" => Some(GlucoseSource::Raw),
            "smoothed" => Some(GlucoseSource::Smoothed),
            _ => None,
        }
    }
}

/// The four aligned input channels over one patient's grid.
#[derive(Debug, Clone)]
pub struct ChannelBlock {
    pub start: Timestamp,
    /// mg/dl; may carry missing markers when sourced from raw CGM.
    pub glucose: Vec<Option<f64>>,
    pub c_eff: Vec<f64>,
    pub i_eff: Vec<f64>,
    pub s_avg: Vec<f64>,
    pub source: GlucoseSource,
}

impl ChannelBlock {
    pub fn len(&self) -> usize {
        self.glucose.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glucose.is_empty()
    }

    pub fn glucose_series(&self) -> GriddedSeries {
        GriddedSeries { start: self.start, values: self.glucose.clone() }
    }

    /// CSV export `slot_ts,glucose,c_eff,i_eff,s_avg,glucose_missing`;
    /// missing glucose slots leave the glucose field empty.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("slot_ts,glucose,c_eff,i_eff,s_avg,glucose_missing\n");
        for t in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{}",
                self.start.0 + t as i64 * crate::ingest::STEP_MINUTES,
                self.glucose[t].map(|v| format!("{v:?}")).unwrap_or_default(),
                self.c_eff[t],
                self.i_eff[t],
                self.s_avg[t],
                self.glucose[t].is_none(),
            );
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("channel length mismatch: {0}")]
    LengthMismatch(String),
    #[error("glucose source is smoothed but no smoothed series was provided")]
    MissingSmoothed,
}

/// Extracts (slot, mass) impulses from a slot-summed gridded channel.
fn impulses(g: Option<&GriddedSeries>) -> Vec<(i64, f64)> {
    let Some(g) = g else { return Vec::new() };
    g.values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| match v {
            Some(m) if *m > 0.0 => Some((i as i64, *m)),
            _ => None,
        })
        .collect()
}

/// Builds the four aligned input channels from the gridded streams.
pub fn build_channels(
    gridded: &BTreeMap<EventKind, GriddedSeries>,
    glucose_source: GlucoseSource,
    smoothed: Option<&SmoothedSeries>,
    p: &FeatureParams,
) -> Result<ChannelBlock, FeatureError> {
    let cgm = gridded
        .get(&EventKind::Cgm)
        .ok_or_else(|| FeatureError::LengthMismatch("no cgm grid".into()))?;
    let n = cgm.len();
    let glucose: Vec<Option<f64>> = match glucose_source {
        GlucoseSource::Raw => cgm.values.clone(),
        GlucoseSource::Smoothed => {
            let sm = smoothed.ok_or(FeatureError::MissingSmoothed)?;
            if sm.mean.len() != n {
                return Err(FeatureError::LengthMismatch(format!(
                    "smoothed length {} vs grid {}",
                    sm.mean.len(),
                    n
                )));
            }
            sm.mean.iter().map(|v| Some(*v)).collect()
        }
    };
    for (kind, g) in gridded {
        if g.len() != n {
            return Err(FeatureError::LengthMismatch(format!(
                "{} length {} vs grid {}",
                kind.name(),
                g.len(),
                n
            )));
        }
    }

    let meals = impulses(gridded.get(&EventKind::MealCarbs));
    let boluses = impulses(gridded.get(&EventKind::Bolus));
    let empty_steps = GriddedSeries { start: cgm.start, values: vec![None; n] };
    let steps = gridded.get(&EventKind::Steps).unwrap_or(&empty_steps);

    let mut c_eff = Vec::with_capacity(n);
    let mut i_eff = Vec::with_capacity(n);
    let mut s_avg = Vec::with_capacity(n);
    for t in 0..n as i64 {
        c_eff.push(effective_carbs(&meals, t, p));
        i_eff.push(effective_insulin(&boluses, t, p));
        s_avg.push(weighted_steps(steps, t, p));
    }

    Ok(ChannelBlock {
        start: cgm.start,
        glucose,
        c_eff,
        i_eff,
        s_avg,
        source: glucose_source,
    })
}
