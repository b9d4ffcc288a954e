//! Seeded synthetic glucoregulatory data generator with sensor-fault
//! injection. The latent dynamics reuse the effective-carb and effective-
//! insulin kinetics from the feature module, so the forecasting task is
//! realizable by the feature set and pipeline tests are isolated from
//! model-mismatch effects.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::features::{effective_carbs, FeatureParams};
use crate::ingest::{
    EventKind, EventStream, GriddedSeries, PatientDataset, SplitTag, Timestamp, STEP_MINUTES,
};

/// Slots per day on the 5-minute grid.
pub const SLOTS_PER_DAY: usize = 288;

const GLUCOSE_MIN: f64 = 40.0;
const GLUCOSE_MAX: f64 = 400.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub days: u32,
    pub seed: u64,
    /// Basal glucose G_b (mg/dl).
    pub basal_glucose: f64,
    /// Clearance rate k0 per slot.
    pub clearance: f64,
    /// Carb gain k_c (mg/dl per effective gram).
    pub carb_gain: f64,
    /// Insulin gain k_i (mg/dl per absorbed unit).
    pub insulin_gain: f64,
    /// Process noise sigma (mg/dl per slot).
    pub process_noise: f64,
    /// Sensor noise sigma (mg/dl).
    pub sensor_noise: f64,
    /// Per-slot probability of an additive spike (magnitude 40-80, signed).
    pub spike_prob: f64,
    /// Per-slot probability of starting a missing run (length 1-6).
    pub dropout_prob: f64,
    /// Per-night-slot probability of starting an attenuation episode
    /// (depth 20-40%, duration 6-24 slots).
    pub attenuation_prob: f64,
    pub meals_per_day: usize,
    pub fingersticks_per_day: usize,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            days: 10,
            seed: 0,
            basal_glucose: 110.0,
            clearance: 0.02,
            carb_gain: 0.4,
            insulin_gain: 2.0,
            process_noise: 1.0,
            sensor_noise: 5.0,
            spike_prob: 0.002,
            dropout_prob: 0.003,
            attenuation_prob: 0.001,
            meals_per_day: 3,
            fingersticks_per_day: 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.days < 1 {
            return Err(SynthError::Config("days must be >= 1".into()));
        }
        for (name, p) in [
            ("spike_prob", self.spike_prob),
            ("dropout_prob", self.dropout_prob),
            ("attenuation_prob", self.attenuation_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        for (name, g) in [
            ("carb_gain", self.carb_gain),
            ("insulin_gain", self.insulin_gain),
        ] {
            if g <= 0.0 {
                return Err(SynthError::Config(format!("{name} must be > 0, got {g}")));
            }
        }
        if self.process_noise < 0.0 || self.sensor_noise < 0.0 {
            return Err(SynthError::Config("noise sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

/// One injected sensor fault. Application order: attenuation, then spikes,
/// then dropouts; final values clamp to the device range [40, 400].
#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    Spike { slot: usize, offset: f64 },
    Dropout { start: usize, len: usize },
    Attenuation { start: usize, len: usize, depth: f64 },
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Fault-free, sensor-noise-free glucose; every slot present.
    pub latent_truth: GriddedSeries,
    /// Faulted CGM plus meals, boluses, steps, and sparse fingersticks.
    pub dataset: PatientDataset,
    /// Realized fault log for the CGM channel.
    pub faults: Vec<Fault>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Total insulin absorbed by slot `t` under the linear absorption model:
/// each bolus releases `r_insulin` units per slot until exhausted.
fn insulin_absorbed(boluses: &[(i64, f64)], t: i64, p: &FeatureParams) -> f64 {
    boluses
        .iter()
        .map(|&(t_b, dose)| {
            let delta = t - t_b;
            if delta < 0 {
                0.0
            } else {
                (delta as f64 * p.r_insulin).min(dose)
            }
        })
        .sum()
}

/// Runs the latent dynamics for `n_slots` starting at equilibrium:
/// G(t+1) = G(t) + k_c·ΔC_eff − k_i·ΔI_absorbed − k0·(G − G_b) + noise(t),
/// clamped to [40, 400]. `noise` must have at least `n_slots` entries
/// (entry t perturbs the step into slot t+1).
pub fn simulate_latent(
    n_slots: usize,
    meals: &[(i64, f64)],
    boluses: &[(i64, f64)],
    cfg: &SynthConfig,
    noise: &[f64],
) -> Vec<f64> {
    assert!(noise.len() >= n_slots);
    let fp = FeatureParams::default();
    let mut g = vec![0.0f64; n_slots];
    g[0] = cfg.basal_glucose;
    let mut c_prev = effective_carbs(meals, 0, &fp);
    let mut i_prev = insulin_absorbed(boluses, 0, &fp);
    for t in 1..n_slots {
        let c_now = effective_carbs(meals, t as i64, &fp);
        let i_now = insulin_absorbed(boluses, t as i64, &fp);
        let next = g[t - 1] + cfg.carb_gain * (c_now - c_prev)
            - cfg.insulin_gain * (i_now - i_prev)
            - cfg.clearance * (g[t - 1] - cfg.basal_glucose)
            + noise[t - 1];
        g[t] = next.clamp(GLUCOSE_MIN, GLUCOSE_MAX);
        c_prev = c_now;
        i_prev = i_now;
    }
    g
}

/// Applies a fault log to a clean series. Deterministic; the realized
/// series is fully reconstructable from (clean, faults).
pub fn apply_faults(clean: &GriddedSeries, faults: &[Fault]) -> GriddedSeries {
    let n = clean.len();
    let mut values = clean.values.clone();
    for f in faults {
        if let Fault::Attenuation { start, len, depth } = f {
            for slot in *start..(*start + *len).min(n) {
                if let Some(v) = values[slot].as_mut() {
                    *v *= 1.0 - depth;
                }
            }
        }
    }
    for f in faults {
        if let Fault::Spike { slot, offset } = f {
            if let Some(v) = values.get_mut(*slot).and_then(Option::as_mut) {
                *v += offset;
            }
        }
    }
    for f in faults {
        if let Fault::Dropout { start, len } = f {
            for slot in *start..(*start + *len).min(n) {
                values[slot] = None;
            }
        }
    }
    for v in values.iter_mut().flatten() {
        *v = v.clamp(GLUCOSE_MIN, GLUCOSE_MAX);
    }
    GriddedSeries { start: clean.start, values }
}

fn sample_faults(n_slots: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Fault> {
    let mut faults = Vec::new();
    for slot in 0..n_slots {
        if rng.random::<f64>() < cfg.spike_prob {
            let magnitude = rng.random_range(40.0..=80.0);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            faults.push(Fault::Spike { slot, offset: sign * magnitude });
        }
        if rng.random::<f64>() < cfg.dropout_prob {
            let len = rng.random_range(1..=6usize);
            faults.push(Fault::Dropout { start: slot, len });
        }
        // Pressure-induced attenuation happens while sleeping on the
        // sensor, so episodes only start in night slots (00:00-06:00).
        let night = slot % SLOTS_PER_DAY < SLOTS_PER_DAY / 4;
        if night && rng.random::<f64>() < cfg.attenuation_prob {
            let len = rng.random_range(6..=24usize);
            let depth = rng.random_range(0.2..=0.4);
            faults.push(Fault::Attenuation { start: slot, len, depth });
        }
    }
    faults
}

/// Samples a fault log for `clean` and applies it.
pub fn inject_faults(
    clean: &GriddedSeries,
    cfg: &SynthConfig,
    seed: u64,
) -> (GriddedSeries, Vec<Fault>) {
    let mut rng = rng_stream(seed, 3);
    let faults = sample_faults(clean.len(), cfg, &mut rng);
    (apply_faults(clean, &faults), faults)
}

/// Generates one synthetic patient, fully determined by `cfg` (including
/// its seed).
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let n_slots = cfg.days as usize * SLOTS_PER_DAY;

    // Daily schedule: meals with boluses, and daytime activity bouts.
    let mut sched = rng_stream(cfg.seed, 0);
    let mut meals: Vec<(i64, f64)> = Vec::new();
    let mut boluses: Vec<(i64, f64)> = Vec::new();
    let mut step_slots: Vec<(usize, f64)> = Vec::new();
    let meal_hours = [8.0, 13.0, 19.0];
    for day in 0..cfg.days as usize {
        for m in 0..cfg.meals_per_day {
            let hour = meal_hours[m % meal_hours.len()];
            let base = day * SLOTS_PER_DAY + (hour * 12.0) as usize;
            let jitter: i64 = sched.random_range(-6..=6);
            let slot = (base as i64 + jitter).clamp(0, n_slots as i64 - 1);
            let carbs = sched.random_range(30.0..=90.0);
            meals.push((slot, carbs));
            // carb-ratio dosing at 10 g/unit with +-20% noise
            let dose = carbs / 10.0 * sched.random_range(0.8..=1.2);
            boluses.push((slot, dose));
        }
        for _ in 0..2 {
            let start = day * SLOTS_PER_DAY + sched.random_range(96..240usize);
            let len = sched.random_range(3..=12usize);
            for slot in start..(start + len).min(n_slots) {
                let steps = sched.random_range(300..=1500u32);
                step_slots.push((slot, steps as f64));
            }
        }
    }
    meals.sort_by_key(|&(t, _)| t);
    boluses.sort_by_key(|&(t, _)| t);

    // Latent truth.
    let mut proc = rng_stream(cfg.seed, 1);
    let proc_noise = Normal::new(0.0, cfg.process_noise.max(f64::MIN_POSITIVE))
        .expect("valid sigma");
    let noise: Vec<f64> = (0..n_slots)
        .map(|_| if cfg.process_noise > 0.0 { proc_noise.sample(&mut proc) } else { 0.0 })
        .collect();
    let latent = simulate_latent(n_slots, &meals, &boluses, cfg, &noise);
    let latent_truth = GriddedSeries {
        start: Timestamp(0),
        values: latent.iter().map(|&v| Some(v)).collect(),
    };

    // Sensor reading, then faults.
    let mut sens = rng_stream(cfg.seed, 2);
    let sens_noise = Normal::new(0.0, cfg.sensor_noise.max(f64::MIN_POSITIVE))
        .expect("valid sigma");
    let clean_cgm = GriddedSeries {
        start: Timestamp(0),
        values: latent
            .iter()
            .map(|&v| {
                let e = if cfg.sensor_noise > 0.0 { sens_noise.sample(&mut sens) } else { 0.0 };
                Some((v + e).clamp(GLUCOSE_MIN, GLUCOSE_MAX))
            })
            .collect(),
    };
    let (faulted_cgm, faults) = inject_faults(&clean_cgm, cfg, cfg.seed);

    // Sparse fingersticks: latent truth plus small meter noise.
    let mut fs_rng = rng_stream(cfg.seed, 4);
    let meter_noise = Normal::new(0.0, 2.0).expect("valid sigma");
    let mut fingersticks: Vec<(Timestamp, f64)> = Vec::new();
    for day in 0..cfg.days as usize {
        for _ in 0..cfg.fingersticks_per_day {
            let slot = day * SLOTS_PER_DAY + fs_rng.random_range(0..SLOTS_PER_DAY);
            let v = (latent[slot] + meter_noise.sample(&mut fs_rng))
                .clamp(GLUCOSE_MIN, GLUCOSE_MAX);
            fingersticks.push((Timestamp(slot as i64 * STEP_MINUTES), v));
        }
    }

    let slot_ts = |slot: usize| Timestamp(slot as i64 * STEP_MINUTES);
    let mut streams = std::collections::BTreeMap::new();
    let mut insert = |kind: EventKind, records: Vec<(Timestamp, f64)>| {
        if !records.is_empty() {
            streams.insert(kind, EventStream::from_records(kind, records));
        }
    };
    insert(
        EventKind::Cgm,
        faulted_cgm
            .values
            .iter()
            .enumerate()
            .filter_map(|(slot, v)| v.map(|v| (slot_ts(slot), v)))
            .collect(),
    );
    insert(
        EventKind::MealCarbs,
        meals.iter().map(|&(t, c)| (slot_ts(t as usize), c)).collect(),
    );
    insert(
        EventKind::Bolus,
        boluses.iter().map(|&(t, d)| (slot_ts(t as usize), d)).collect(),
    );
    insert(
        EventKind::Steps,
        step_slots.iter().map(|&(t, s)| (slot_ts(t), s)).collect(),
    );
    insert(EventKind::Fingerstick, fingersticks);

    let dataset = PatientDataset {
        patient_id: format!("synth-{}", cfg.seed),
        streams,
        split_tag: SplitTag::Train,
    };
    Ok(SynthOutput { latent_truth, dataset, faults })
}

/// Renders a dataset in the CSV ingest format (`ts,kind,value`, epoch
/// minutes), so synthetic data flows through the same parser as clinical
/// data. Rows sorted by timestamp, then kind.
pub fn to_ingest_csv(ds: &PatientDataset) -> String {
    let mut rows: Vec<(Timestamp, EventKind, f64)> = Vec::new();
    for (kind, stream) in &ds.streams {
        for &(ts, v) in &stream.events {
            rows.push((ts, *kind, v));
        }
    }
    rows.sort_by_key(|&(ts, kind, _)| (ts, kind));
    let mut out = String::from("ts,kind,value\n");
    for (ts, kind, v) in rows {
        let _ = writeln!(out, "{},{},{:?}", ts.0, kind.name(), v);
    }
    out
}

/// Renders a total series as `slot_ts,value` CSV (epoch minutes).
pub fn series_to_csv(series: &GriddedSeries, value_header: &str) -> String {
    let mut out = format!("slot_ts,{value_header}\n");
    for (slot, v) in series.values.iter().enumerate() {
        let ts = series.slot_ts(slot).0;
        match v {
            Some(v) => {
                let _ = writeln!(out, "{ts},{v:?}");
            }
            None => {
                let _ = writeln!(out, "{ts},");
            }
        }
    }
    out
}
