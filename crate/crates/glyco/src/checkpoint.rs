//! Checkpoint file format: a plain-text manifest (version, config,
//! channel statistics, tensor directory) followed by a binary payload of
//! little-endian f64 tensors, row-major, in manifest order. Offsets are
//! bytes from the start of the payload. Byte-exact across platforms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::features::{CompatMode, FeatureParams, GlucoseSource};
use crate::nn::{AdamState, ModelParams, Tensor};
use crate::train::{Checkpoint, Normalizer, TrainConfig, CHECKPOINT_VERSION, N_CHANNELS};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unrecognized checkpoint version `{0}`")]
    Version(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

const PAYLOAD_MARKER: &str = "payload";

fn fmt_f64(v: f64) -> String {
    // Debug formatting is shortest-round-trip, so parse() restores the
    // exact bit pattern.
    format!("{v:?}")
}

fn fmt_f64_list(vs: &[f64]) -> String {
    vs.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut manifest = String::new();
    let c = &ckpt.config;
    let _ = writeln!(manifest, "{}", ckpt.version);
    let _ = writeln!(manifest, "config.history_slots = {}", c.history_slots);
    let _ = writeln!(manifest, "config.ph_slots = {}", c.ph_slots);
    let _ = writeln!(manifest, "config.batch_size = {}", c.batch_size);
    let _ = writeln!(manifest, "config.lr = {}", fmt_f64(c.lr));
    let _ = writeln!(manifest, "config.max_epochs = {}", c.max_epochs);
    let _ = writeln!(manifest, "config.patience = {}", c.patience);
    let _ = writeln!(manifest, "config.val_fraction = {}", fmt_f64(c.val_fraction));
    let _ = writeln!(manifest, "config.hidden = {}", c.hidden);
    let _ = writeln!(manifest, "config.dense1 = {}", c.dense1);
    let _ = writeln!(manifest, "config.dense2 = {}", c.dense2);
    let _ = writeln!(manifest, "config.dropout_rate = {}", fmt_f64(c.dropout_rate));
    let _ = writeln!(manifest, "config.glucose_source = {}", c.glucose_source.name());
    let _ = writeln!(manifest, "config.seed = {}", c.seed);
    let _ = writeln!(manifest, "norm.mean = {}", fmt_f64_list(&ckpt.normalizer.mean));
    let _ = writeln!(manifest, "norm.std = {}", fmt_f64_list(&ckpt.normalizer.std));
    let f = &ckpt.feature_params;
    let _ = writeln!(manifest, "feat.beta_inc = {}", fmt_f64(f.beta_inc));
    let _ = writeln!(manifest, "feat.beta_dec = {}", fmt_f64(f.beta_dec));
    let _ = writeln!(manifest, "feat.delay_slots = {}", f.delay_slots);
    let _ = writeln!(manifest, "feat.peak_offset_slots = {}", f.peak_offset_slots);
    let _ = writeln!(manifest, "feat.r_insulin = {}", fmt_f64(f.r_insulin));
    let _ = writeln!(manifest, "feat.step_window_n = {}", f.step_window_n);
    let _ = writeln!(manifest, "feat.literal_decay = {}", f.compat.literal_decay);
    let _ = writeln!(manifest, "feat.most_recent_only = {}", f.compat.most_recent_only);
    let _ = writeln!(manifest, "adam.step = {}", ckpt.adam.step);
    let history = ckpt
        .history
        .iter()
        .map(|(t, v)| format!("{}:{}", fmt_f64(*t), fmt_f64(*v)))
        .collect::<Vec<_>>()
        .join(" ");
    let _ = writeln!(manifest, "history = {history}");

    // tensor directory: params, then adam first/second moments
    let mut directory: Vec<(String, &Tensor)> = ckpt.params.named_tensors();
    for (i, (name, _)) in ckpt.params.named_tensors().iter().enumerate() {
        directory.push((format!("adam.m.{name}"), &ckpt.adam.m[i]));
    }
    for (i, (name, _)) in ckpt.params.named_tensors().iter().enumerate() {
        directory.push((format!("adam.v.{name}"), &ckpt.adam.v[i]));
    }
    let mut offset = 0usize;
    for (name, t) in &directory {
        let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let _ = writeln!(manifest, "tensor {name} {shape} {offset}");
        offset += t.len() * 8;
    }
    let _ = writeln!(manifest, "{PAYLOAD_MARKER}");

    let mut out = manifest.into_bytes();
    out.reserve(offset);
    for (_, t) in &directory {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Manifest {
    keys: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>, usize)>,
    payload_start: usize,
}

fn parse_manifest(bytes: &[u8]) -> Result<Manifest, CheckpointError> {
    let corrupt = |d: &str| CheckpointError::Corrupt(d.to_string());
    let mut keys = BTreeMap::new();
    let mut tensors = Vec::new();
    let mut pos = 0usize;
    let mut first = true;
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| corrupt("no payload marker"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| corrupt("manifest is not UTF-8"))?;
        pos += nl + 1;
        if first {
            if line != CHECKPOINT_VERSION {
                return Err(CheckpointError::Version(line.to_string()));
            }
            first = false;
            continue;
        }
        if line == PAYLOAD_MARKER {
            break;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 3 {
                return Err(corrupt(&format!("bad tensor line `{line}`")));
            }
            let shape: Vec<usize> = parts[1]
                .split('x')
                .map(|d| d.parse().map_err(|_| corrupt(&format!("bad shape `{}`", parts[1]))))
                .collect::<Result<_, _>>()?;
            let offset: usize =
                parts[2].parse().map_err(|_| corrupt(&format!("bad offset `{}`", parts[2])))?;
            tensors.push((parts[0].to_string(), shape, offset));
        } else if let Some((k, v)) = line.split_once(" = ") {
            keys.insert(k.to_string(), v.to_string());
        } else {
            return Err(corrupt(&format!("unrecognized manifest line `{line}`")));
        }
    }
    Ok(Manifest { keys, tensors, payload_start: pos })
}

fn read_tensor(
    bytes: &[u8],
    payload_start: usize,
    shape: &[usize],
    offset: usize,
) -> Result<Tensor, CheckpointError> {
    let n: usize = shape.iter().product();
    let start = payload_start + offset;
    let end = start + n * 8;
    if end > bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "payload truncated: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(shape, data))
}

/// Restores a checkpoint from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let manifest = parse_manifest(bytes)?;
    let corrupt = |d: String| CheckpointError::Corrupt(d);
    let get = |k: &str| -> Result<&String, CheckpointError> {
        manifest.keys.get(k).ok_or_else(|| corrupt(format!("missing key `{k}`")))
    };
    let parse_num = |k: &str| -> Result<f64, CheckpointError> {
        get(k)?.parse().map_err(|_| corrupt(format!("bad number for `{k}`")))
    };
    let parse_usize = |k: &str| -> Result<usize, CheckpointError> {
        get(k)?.parse().map_err(|_| corrupt(format!("bad integer for `{k}`")))
    };
    let parse_bool = |k: &str| -> Result<bool, CheckpointError> {
        get(k)?.parse().map_err(|_| corrupt(format!("bad bool for `{k}`")))
    };

    let config = TrainConfig {
        history_slots: parse_usize("config.history_slots")?,
        ph_slots: parse_usize("config.ph_slots")?,
        batch_size: parse_usize("config.batch_size")?,
        lr: parse_num("config.lr")?,
        max_epochs: parse_usize("config.max_epochs")?,
        patience: parse_usize("config.patience")?,
        val_fraction: parse_num("config.val_fraction")?,
        hidden: parse_usize("config.hidden")?,
        dense1: parse_usize("config.dense1")?,
        dense2: parse_usize("config.dense2")?,
        dropout_rate: parse_num("config.dropout_rate")?,
        glucose_source: GlucoseSource::from_name(get("config.glucose_source")?)
            .ok_or_else(|| corrupt("bad glucose_source".into()))?,
        seed: get("config.seed")?
            .parse()
            .map_err(|_| corrupt("bad seed".into()))?,
    };
    let parse_list = |k: &str| -> Result<[f64; N_CHANNELS], CheckpointError> {
        let vals: Vec<f64> = get(k)?
            .split(',')
            .map(|s| s.parse().map_err(|_| corrupt(format!("bad float in `{k}`"))))
            .collect::<Result<_, _>>()?;
        vals.try_into().map_err(|_| corrupt(format!("`{k}` needs {N_CHANNELS} entries")))
    };
    let normalizer = Normalizer { mean: parse_list("norm.mean")?, std: parse_list("norm.std")? };
    let feature_params = FeatureParams {
        beta_inc: parse_num("feat.beta_inc")?,
        beta_dec: parse_num("feat.beta_dec")?,
        delay_slots: parse_usize("feat.delay_slots")?,
        peak_offset_slots: parse_usize("feat.peak_offset_slots")?,
        r_insulin: parse_num("feat.r_insulin")?,
        step_window_n: parse_usize("feat.step_window_n")?,
        compat: CompatMode {
            literal_decay: parse_bool("feat.literal_decay")?,
            most_recent_only: parse_bool("feat.most_recent_only")?,
        },
    };
    let history: Vec<(f64, f64)> = {
        let raw = get("history")?;
        if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(' ')
                .map(|pair| {
                    let (t, v) = pair
                        .split_once(':')
                        .ok_or_else(|| corrupt(format!("bad history entry `{pair}`")))?;
                    Ok((
                        t.parse().map_err(|_| corrupt("bad history float".into()))?,
                        v.parse().map_err(|_| corrupt("bad history float".into()))?,
                    ))
                })
                .collect::<Result<_, CheckpointError>>()?
        }
    };

    let mut by_name: BTreeMap<&str, (&[usize], usize)> = BTreeMap::new();
    for (name, shape, offset) in &manifest.tensors {
        by_name.insert(name.as_str(), (shape.as_slice(), *offset));
    }
    let load = |name: &str| -> Result<Tensor, CheckpointError> {
        let (shape, offset) =
            by_name.get(name).ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
        read_tensor(bytes, manifest.payload_start, shape, *offset)
    };

    let mut params = ModelParams::zeros(&config.net_config());
    let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    for (i, slot) in params.tensors_mut().into_iter().enumerate() {
        let t = load(&names[i])?;
        if t.shape != slot.shape {
            return Err(corrupt(format!(
                "tensor `{}` shape {:?} does not match config {:?}",
                names[i], t.shape, slot.shape
            )));
        }
        *slot = t;
    }
    let m: Vec<Tensor> =
        names.iter().map(|n| load(&format!("adam.m.{n}"))).collect::<Result<_, _>>()?;
    let v: Vec<Tensor> =
        names.iter().map(|n| load(&format!("adam.v.{n}"))).collect::<Result<_, _>>()?;
    let adam = AdamState {
        m,
        v,
        step: get("adam.step")?.parse().map_err(|_| corrupt("bad adam.step".into()))?,
    };

    Ok(Checkpoint {
        version: CHECKPOINT_VERSION.to_string(),
        config,
        params,
        adam,
        normalizer,
        feature_params,
        history,
    })
}
