//! Event-stream ingestion and 5-minute gridding.
//!
//! Parses clinical-format XML and a plain CSV fallback into per-patient
//! event streams, then aligns every channel to the uniform 5-minute CGM
//! grid. Impulse channels (meals, boluses) are slot-summed so delivered
//! mass is preserved; sampled channels take the last value per slot.

use std::collections::BTreeMap;
use std::fmt;

use chrono::NaiveDateTime;
use quick_xml::events::Event;
use quick_xml::Reader;
use thiserror::Error;

/// Grid cadence in minutes.
pub const STEP_MINUTES: i64 = 5;

/// Integer minutes since the Unix epoch (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn minutes(self) -> i64 {
        self.0
    }

    /// Largest grid timestamp <= self.
    pub fn floor_to_grid(self) -> Timestamp {
        Timestamp(self.0.div_euclid(STEP_MINUTES) * STEP_MINUTES)
    }

    /// Smallest grid timestamp >= self.
    pub fn ceil_to_grid(self) -> Timestamp {
        Timestamp((self.0 + STEP_MINUTES - 1).div_euclid(STEP_MINUTES) * STEP_MINUTES)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Cgm,
    Fingerstick,
    Bolus,
    MealCarbs,
    Basal,
    Steps,
    HeartRate,
    Gsr,
    SkinTemp,
    AirTemp,
    Sleep,
    Exercise,
}

impl EventKind {
    /// Impulse kinds carry delivered mass and sum within a slot; sampled
    /// kinds take the last value per slot.
    pub fn is_impulse(self) -> bool {
        matches!(self, EventKind::MealCarbs | EventKind::Bolus)
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Cgm => "cgm",
            EventKind::Fingerstick => "fingerstick",
            EventKind::Bolus => "bolus",
            EventKind::MealCarbs => "meal_carbs",
            EventKind::Basal => "basal",
            EventKind::Steps => "steps",
            EventKind::HeartRate => "heart_rate",
            EventKind::Gsr => "gsr",
            EventKind::SkinTemp => "skin_temp",
            EventKind::AirTemp => "air_temp",
            EventKind::Sleep => "sleep",
            EventKind::Exercise => "exercise",
        }
    }

    pub fn from_name(s: &str) -> Option<EventKind> {
        Some(match s {
            "cgm" => EventKind::Cgm,
            "fingerstick" => EventKind::Fingerstick,
            "bolus" => EventKind::Bolus,
            "meal_carbs" => EventKind::MealCarbs,
            "basal" => EventKind::Basal,
            "steps" => EventKind::Steps,
            "heart_rate" => EventKind::HeartRate,
            "gsr" => EventKind::Gsr,
            "skin_temp" => EventKind::SkinTemp,
            "air_temp" => EventKind::AirTemp,
            "sleep" => EventKind::Sleep,
            "exercise" => EventKind::Exercise,
            _ => return None,
        })
    }
}

/// One channel of timestamped events, sorted strictly ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub kind: EventKind,
    pub events: Vec<(Timestamp, f64)>,
}

impl EventStream {
    /// Builds a stream from raw records: sorts by timestamp and collapses
    /// duplicate timestamps to the last occurrence in input order.
    pub fn from_records(kind: EventKind, mut records: Vec<(Timestamp, f64)>) -> EventStream {
        // Stable sort keeps input order within equal timestamps, so the
        // last record for a timestamp survives dedup.
        records.sort_by_key(|(ts, _)| *ts);
        let mut events: Vec<(Timestamp, f64)> = Vec::with_capacity(records.len());
        for (ts, v) in records {
            match events.last_mut() {
                Some((last_ts, last_v)) if *last_ts == ts => *last_v = v,
                _ => events.push((ts, v)),
            }
        }
        EventStream { kind, events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// All event streams for one subject.
#[derive(Debug, Clone)]
pub struct PatientDataset {
    pub patient_id: String,
    pub streams: BTreeMap<EventKind, EventStream>,
    pub split_tag: SplitTag,
}

impl PatientDataset {
    pub fn stream(&self, kind: EventKind) -> Option<&EventStream> {
        self.streams.get(&kind)
    }

    pub fn cgm(&self) -> &EventStream {
        self.streams
            .get(&EventKind::Cgm)
            .expect("PatientDataset invariant: cgm stream present")
    }
}

/// One channel resampled to the uniform 5-minute grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedSeries {
    /// Multiple of 5 minutes.
    pub start: Timestamp,
    pub values: Vec<Option<f64>>,
}

impl GriddedSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot_ts(&self, slot: usize) -> Timestamp {
        Timestamp(self.start.0 + slot as i64 * STEP_MINUTES)
    }

    /// Nearest slot index for a timestamp, exact ties rounding down.
    /// May fall outside [0, len).
    pub fn nearest_slot(&self, ts: Timestamp) -> i64 {
        let offset = ts.0 - self.start.0;
        // round-half-down
        (offset * 2 + STEP_MINUTES - 1).div_euclid(2 * STEP_MINUTES)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed XML at byte offset {offset}: {detail}")]
    Xml { offset: u64, detail: String },
    #[error("bad record in stream {stream} at ordinal {ordinal}: {detail}")]
    Record {
        stream: String,
        ordinal: usize,
        detail: String,
    },
    #[error("structural error: {0}")]
    Structure(String),
}

fn parse_clinical_ts(s: &str) -> Option<Timestamp> {
    let dt = NaiveDateTime::parse_from_str(s, "%d-%m-%Y %H:%M:%S").ok()?;
    let minutes = dt.and_utc().timestamp().div_euclid(60);
    if minutes < 0 {
        return None;
    }
    Some(Timestamp(minutes))
}

/// Maps a clinical XML section name to the event kind it carries.
fn section_kind(name: &str) -> Option<EventKind> {
    Some(match name {
        "glucose_level" => EventKind::Cgm,
        "finger_stick" => EventKind::Fingerstick,
        "bolus" => EventKind::Bolus,
        "meal" => EventKind::MealCarbs,
        "basal" | "temp_basal" => EventKind::Basal,
        "basis_steps" => EventKind::Steps,
        "basis_heart_rate" => EventKind::HeartRate,
        "basis_gsr" => EventKind::Gsr,
        "basis_skin_temperature" => EventKind::SkinTemp,
        "basis_air_temperature" => EventKind::AirTemp,
        "basis_sleep" | "sleep" => EventKind::Sleep,
        "exercise" => EventKind::Exercise,
        _ => return None,
    })
}

fn validate_value(kind: EventKind, v: f64) -> Result<(), String> {
    if !v.is_finite() {
        return Err(format!("non-finite value {v}"));
    }
    match kind {
        EventKind::Cgm | EventKind::Fingerstick if v <= 0.0 => {
            Err(format!("glucose value must be > 0, got {v}"))
        }
        EventKind::MealCarbs | EventKind::Bolus if v < 0.0 => {
            Err(format!("dose/carbs must be >= 0, got {v}"))
        }
        EventKind::Steps if v < 0.0 || v.fract() != 0.0 => {
            Err(format!("step count must be a non-negative integer, got {v}"))
        }
        _ => Ok(()),
    }
}

/// Parses an OhioT1DM-style XML document into a patient dataset.
///
/// Recognized sections become event streams; unrecognized sections are
/// skipped. Within each stream, duplicate timestamps collapse to the last
/// occurrence. Bolus events may carry the amount under `dose` instead of
/// `value` (`dose` wins when both are present); meal events may use
/// `carbs`. Event timestamps accept `ts` or `ts_begin`.
pub fn parse_ohio_xml(bytes: &[u8]) -> Result<PatientDataset, IngestError> {
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().trim_text(true);

    let mut patient_id: Option<String> = None;
    let mut current: Option<(EventKind, String)> = None;
    let mut ordinal = 0usize;
    let mut records: BTreeMap<EventKind, Vec<(Timestamp, f64)>> = BTreeMap::new();

    let mut buf = Vec::new();
    loop {
        let pos = reader.buffer_position();
        let ev = reader.read_event_into(&mut buf).map_err(|e| IngestError::Xml {
            offset: pos,
            detail: e.to_string(),
        })?;
        match ev {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if name == "patient" {
                    for attr in e.attributes().flatten() {
                        if attr.key.as_ref() == b"id" {
                            patient_id =
                                Some(String::from_utf8_lossy(&attr.value).into_owned());
                        }
                    }
                } else if name == "event" {
                    if let Some((kind, section)) = &current {
                        let kind = *kind;
                        let mut ts_attr: Option<String> = None;
                        let mut ts_begin: Option<String> = None;
                        let mut value: Option<String> = None;
                        let mut dose: Option<String> = None;
                        let mut carbs: Option<String> = None;
                        for attr in e.attributes().flatten() {
                            let v = String::from_utf8_lossy(&attr.value).into_owned();
                            match attr.key.as_ref() {
                                b"ts" => ts_attr = Some(v),
                                b"ts_begin" => ts_begin = Some(v),
                                b"value" => value = Some(v),
                                b"dose" => dose = Some(v),
                                b"carbs" => carbs = Some(v),
                                _ => {}
                            }
                        }
                        let record_err = |detail: String| IngestError::Record {
                            stream: section.clone(),
                            ordinal,
                            detail,
                        };
                        let ts_str = ts_attr
                            .or(ts_begin)
                            .ok_or_else(|| record_err("missing ts attribute".into()))?;
                        let ts = parse_clinical_ts(&ts_str)
                            .ok_or_else(|| record_err(format!("unparseable ts `{ts_str}`")))?;
                        let val_str = dose
                            .or(value)
                            .or(carbs)
                            .ok_or_else(|| record_err("missing value attribute".into()))?;
                        let val: f64 = val_str
                            .parse()
                            .map_err(|_| record_err(format!("non-numeric value `{val_str}`")))?;
                        validate_value(kind, val).map_err(record_err)?;
                        records.entry(kind).or_default().push((ts, val));
                        ordinal += 1;
                    }
                } else if current.is_none() {
                    if let Some(kind) = section_kind(&name) {
                        current = Some((kind, name));
                        ordinal = 0;
                    }
                }
            }
            Event::End(ref e) => {
                let name = e.name();
                if let Some((_, section)) = &current {
                    if name.as_ref() == section.as_bytes() {
                        current = None;
                    }
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }

    let patient_id = patient_id
        .ok_or_else(|| IngestError::Structure("no patient element with id attribute".into()))?;
    finish_dataset(patient_id, records)
}

fn finish_dataset(
    patient_id: String,
    records: BTreeMap<EventKind, Vec<(Timestamp, f64)>>,
) -> Result<PatientDataset, IngestError> {
    if patient_id.is_empty() {
        return Err(IngestError::Structure("empty patient id".into()));
    }
    let streams: BTreeMap<EventKind, EventStream> = records
        .into_iter()
        .map(|(kind, recs)| (kind, EventStream::from_records(kind, recs)))
        .collect();
    if !streams.contains_key(&EventKind::Cgm) {
        return Err(IngestError::Structure("missing cgm stream".into()));
    }
    Ok(PatientDataset {
        patient_id,
        streams,
        split_tag: SplitTag::Train,
    })
}

/// Maps CSV `kind` strings to event kinds. Canonical names are always
/// accepted; `aliases` adds dataset-specific spellings.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub aliases: BTreeMap<String, EventKind>,
}

impl CsvSchema {
    pub fn with_alias(mut self, from: &str, to: EventKind) -> CsvSchema {
        self.aliases.insert(from.to_string(), to);
        self
    }

    fn resolve(&self, s: &str) -> Option<EventKind> {
        self.aliases.get(s).copied().or_else(|| EventKind::from_name(s))
    }
}

fn parse_csv_ts(s: &str) -> Option<Timestamp> {
    if let Ok(m) = s.parse::<i64>() {
        return (m >= 0).then_some(Timestamp(m));
    }
    let dt = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()?;
    let minutes = dt.and_utc().timestamp().div_euclid(60);
    (minutes >= 0).then_some(Timestamp(minutes))
}

/// Parses the CSV fallback format: header `ts,kind,value`, one event per
/// row, `ts` as ISO-8601 or integer epoch-minutes.
pub fn parse_csv(bytes: &[u8], schema: &CsvSchema) -> Result<PatientDataset, IngestError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| IngestError::Structure(format!("not UTF-8: {e}")))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| IngestError::Structure("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let idx_of = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| IngestError::Structure(format!("missing `{name}` column")))
    };
    let (i_ts, i_kind, i_val) = (idx_of("ts")?, idx_of("kind")?, idx_of("value")?);

    let mut records: BTreeMap<EventKind, Vec<(Timestamp, f64)>> = BTreeMap::new();
    for (ordinal, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let record_err = |stream: &str, detail: String| IngestError::Record {
            stream: stream.to_string(),
            ordinal,
            detail,
        };
        let get = |i: usize| {
            fields
                .get(i)
                .copied()
                .ok_or_else(|| record_err("csv", format!("row has {} fields", fields.len())))
        };
        let kind_str = get(i_kind)?;
        let kind = schema
            .resolve(kind_str)
            .ok_or_else(|| record_err("csv", format!("unknown kind `{kind_str}`")))?;
        let ts_str = get(i_ts)?;
        let ts = parse_clinical_ts(ts_str).or_else(|| parse_csv_ts(ts_str)).ok_or_else(|| {
            record_err(kind.name(), format!("unparseable ts `{ts_str}`"))
        })?;
        let val_str = get(i_val)?;
        let val: f64 = val_str
            .parse()
            .map_err(|_| record_err(kind.name(), format!("non-numeric value `{val_str}`")))?;
        validate_value(kind, val).map_err(|d| record_err(kind.name(), d))?;
        records.entry(kind).or_default().push((ts, val));
    }
    finish_dataset("csv".to_string(), records)
}

/// Aligns every stream to the 5-minute grid spanned by the CGM channel.
///
/// Grid span: floor-to-grid of the earliest CGM event through ceil-to-grid
/// of the latest. Each event goes to its nearest slot (exact ties down);
/// events of other kinds outside the CGM span clamp to the boundary slot
/// so impulse mass is never dropped. Sampled kinds keep the last value
/// assigned to a slot, impulse kinds sum.
pub fn align_to_grid(ds: &PatientDataset) -> BTreeMap<EventKind, GriddedSeries> {
    let cgm = ds.cgm();
    assert!(!cgm.is_empty(), "align_to_grid precondition: cgm non-empty");
    let start = cgm.events.first().unwrap().0.floor_to_grid();
    let end = cgm.events.last().unwrap().0.ceil_to_grid();
    let n_slots = ((end.0 - start.0) / STEP_MINUTES + 1) as usize;

    let mut out = BTreeMap::new();
    for (kind, stream) in &ds.streams {
        let impulse = kind.is_impulse();
        let mut values: Vec<Option<f64>> = if impulse {
            vec![Some(0.0); n_slots]
        } else {
            vec![None; n_slots]
        };
        let probe = GriddedSeries { start, values: Vec::new() };
        for &(ts, v) in &stream.events {
            let slot = probe.nearest_slot(ts).clamp(0, n_slots as i64 - 1) as usize;
            if impulse {
                *values[slot].get_or_insert(0.0) += v;
            } else {
                values[slot] = Some(v);
            }
        }
        out.insert(*kind, GriddedSeries { start, values });
    }
    out
}

/// Maximal contiguous runs of a gridded series where no internal run of
/// missing slots exceeds `max_gap_slots`. Returned as (offset, length)
/// pairs; runs start and end on present slots.
pub fn segment_contiguous(g: &GriddedSeries, max_gap_slots: usize) -> Vec<(usize, usize)> {
    let mut segments = Vec::new();
    let mut seg_start: Option<usize> = None;
    let mut last_present: usize = 0;
    for (i, v) in g.values.iter().enumerate() {
        if v.is_some() {
            match seg_start {
                None => {
                    seg_start = Some(i);
                }
                Some(s) => {
                    if i - last_present - 1 > max_gap_slots {
                        segments.push((s, last_present - s + 1));
                        seg_start = Some(i);
                    }
                }
            }
            last_present = i;
        }
    }
    if let Some(s) = seg_start {
        segments.push((s, last_present - s + 1));
    }
    segments
}

/// Value of the nearest present slot within `tolerance_minutes` of `ts`,
/// exact distance ties resolving to the earlier slot.
pub fn nearest_sample(
    g: &GriddedSeries,
    ts: Timestamp,
    tolerance_minutes: i64,
) -> Option<f64> {
    assert!(tolerance_minutes >= 0);
    let mut best: Option<(i64, f64)> = None;
    // Only slots within tolerance can win; scan that window.
    let lo = (ts.0 - tolerance_minutes - g.start.0).div_euclid(STEP_MINUTES).max(0);
    let hi = ((ts.0 + tolerance_minutes - g.start.0).div_euclid(STEP_MINUTES) + 1)
        .min(g.values.len() as i64 - 1);
    for slot in lo..=hi.max(lo - 1) {
        if slot < 0 || slot >= g.values.len() as i64 {
            continue;
        }
        if let Some(v) = g.values[slot as usize] {
            let dist = (g.slot_ts(slot as usize).0 - ts.0).abs();
            if dist <= tolerance_minutes {
                let better = match best {
                    None => true,
                    Some((bd, _)) => dist < bd, // tie keeps the earlier slot
                };
                if better {
                    best = Some((dist, v));
                }
            }
        }
    }
    best.map(|(_, v)| v)
}
