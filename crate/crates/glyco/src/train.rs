//! Window construction, chronological splitting, normalization, the
//! training loop with early stopping, and prediction.

use rayon::prelude::*;
use thiserror::Error;

use crate::features::{ChannelBlock, FeatureParams, GlucoseSource};
use crate::ingest::{segment_contiguous, Timestamp};
use crate::nn::{
    adam_step, backward, init_params, nll_loss, stacked_forward, AdamState, Mode, ModelParams,
    NetConfig, NnError,
};

pub const N_CHANNELS: usize = 4;

/// Fixed chunk size for within-batch parallel gradient accumulation.
/// Chunk boundaries and the final reduction order are independent of the
/// thread count, so results are bit-stable everywhere.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub history_slots: usize,
    pub ph_slots: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub hidden: usize,
    pub dense1: usize,
    pub dense2: usize,
    pub dropout_rate: f64,
    pub glucose_source: GlucoseSource,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            history_slots: 24,
            ph_slots: 6,
            batch_size: 128,
            lr: 1e-3,
            max_epochs: 6000,
            patience: 128,
            val_fraction: 0.2,
            hidden: 128,
            dense1: 512,
            dense2: 128,
            dropout_rate: 0.2,
            glucose_source: GlucoseSource::Smoothed,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            input_channels: N_CHANNELS,
            hidden: self.hidden,
            num_lstm_layers: 2,
            dense1: self.dense1,
            dense2: self.dense2,
            dropout_rate: self.dropout_rate,
        }
    }
}

/// One supervised example: a history x 4 input block (unnormalized; the
/// trainer applies the fitted normalizer) and the glucose target
/// `ph_slots` ahead of the anchor.
#[derive(Debug, Clone)]
pub struct TrainingWindow {
    pub inputs: Vec<[f64; N_CHANNELS]>,
    pub target: f64,
    pub t_anchor: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("too few windows: {0}")]
    TooFewWindows(usize),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Builds all valid windows: the history span and the target slot must be
/// fully present, and no window may straddle a glucose gap.
pub fn make_windows(block: &ChannelBlock, cfg: &TrainConfig) -> Vec<TrainingWindow> {
    let glucose = block.glucose_series();
    let segments = segment_contiguous(&glucose, 0);
    let h = cfg.history_slots;
    let ph = cfg.ph_slots;
    let mut windows = Vec::new();
    for (off, len) in segments {
        if len < h + ph {
            continue;
        }
        for anchor in (off + h - 1)..=(off + len - 1 - ph) {
            let mut inputs = Vec::with_capacity(h);
            for t in (anchor + 1 - h)..=anchor {
                inputs.push([
                    block.glucose[t].expect("segment slots present"),
                    block.c_eff[t],
                    block.i_eff[t],
                    block.s_avg[t],
                ]);
            }
            let target = block.glucose[anchor + ph].expect("segment slots present");
            windows.push(TrainingWindow { inputs, target, t_anchor: anchor });
        }
    }
    windows
}

/// Chronological split by anchor: earliest (1 - val_fraction) for
/// training, the rest for validation. No shuffling across the boundary.
pub fn split_train_val(
    windows: Vec<TrainingWindow>,
    val_fraction: f64,
) -> Result<(Vec<TrainingWindow>, Vec<TrainingWindow>), TrainError> {
    assert!(val_fraction > 0.0 && val_fraction < 1.0);
    if windows.len() < 2 {
        return Err(TrainError::TooFewWindows(windows.len()));
    }
    let mut windows = windows;
    windows.sort_by_key(|w| w.t_anchor);
    let n_train = ((windows.len() as f64) * (1.0 - val_fraction)).floor() as usize;
    let n_train = n_train.clamp(1, windows.len() - 1);
    let val = windows.split_off(n_train);
    Ok((windows, val))
}

/// Per-channel mean/std fitted on training inputs; the target reuses the
/// glucose channel's statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
}

pub const STD_FLOOR: f64 = 1e-6;

pub fn fit_normalizer(train: &[TrainingWindow]) -> Normalizer {
    assert!(!train.is_empty());
    let mut mean = [0.0; N_CHANNELS];
    let mut count = 0usize;
    for w in train {
        for row in &w.inputs {
            for c in 0..N_CHANNELS {
                mean[c] += row[c];
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = [0.0; N_CHANNELS];
    for w in train {
        for row in &w.inputs {
            for c in 0..N_CHANNELS {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
    }
    let mut std = [0.0; N_CHANNELS];
    for c in 0..N_CHANNELS {
        std[c] = (var[c] / count as f64).sqrt().max(STD_FLOOR);
    }
    Normalizer { mean, std }
}

impl Normalizer {
    pub fn normalize_window(&self, w: &TrainingWindow) -> (Vec<Vec<f64>>, f64) {
        let inputs = w
            .inputs
            .iter()
            .map(|row| {
                (0..N_CHANNELS)
                    .map(|c| (row[c] - self.mean[c]) / self.std[c])
                    .collect()
            })
            .collect();
        let target = (w.target - self.mean[0]) / self.std[0];
        (inputs, target)
    }

    pub fn denormalize_mu(&self, mu: f64) -> f64 {
        mu * self.std[0] + self.mean[0]
    }

    pub fn denormalize_sigma2(&self, sigma2: f64) -> f64 {
        sigma2 * self.std[0] * self.std[0]
    }
}

/// Everything needed to reproduce and continue a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: String,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub normalizer: Normalizer,
    pub feature_params: FeatureParams,
    /// (train NLL, val NLL) per epoch.
    pub history: Vec<(f64, f64)>,
}

pub const CHECKPOINT_VERSION: &str = "glyco.ckpt.v1";

fn subseed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64-style mixing of (seed, a, b)
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add(b);
    z ^= z >> 30;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 27;
    z
}

fn shuffle_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn mean_val_nll(
    params: &ModelParams,
    samples: &[(Vec<Vec<f64>>, f64)],
) -> Result<f64, TrainError> {
    let losses: Result<Vec<f64>, NnError> = samples
        .par_iter()
        .map(|(w, y)| {
            let (mu, s2, _) = stacked_forward(params, w, Mode::Eval)?;
            nll_loss(mu, s2, *y)
        })
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean-NLL gradient over a batch. Samples are processed in fixed chunks
/// in parallel; the reduction order never depends on the thread count.
fn batch_gradient(
    params: &ModelParams,
    batch: &[(usize, &(Vec<Vec<f64>>, f64))],
    mask_seeds: &[u64],
) -> Result<(ModelParams, f64), NnError> {
    let chunks: Vec<(ModelParams, f64)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<(ModelParams, f64), NnError> {
            let mut acc = params.zeros_like();
            let mut loss = 0.0;
            for (pos, (w, y)) in chunk {
                let (mu, s2, cache) =
                    stacked_forward(params, w, Mode::Train { mask_seed: mask_seeds[*pos] })?;
                loss += nll_loss(mu, s2, *y)?;
                acc.add_scaled(&backward(params, &cache, *y), 1.0);
            }
            Ok((acc, loss))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for (g, l) in &chunks {
        grads.add_scaled(g, 1.0 / batch.len() as f64);
        loss += l;
    }
    Ok((grads, loss / batch.len() as f64))
}

/// Trains on pre-split windows and returns the checkpoint holding the
/// best-validation parameters. Stops after `patience` epochs without
/// validation improvement (patience 0: first non-improving epoch stops).
pub fn train(
    train_windows: &[TrainingWindow],
    val_windows: &[TrainingWindow],
    cfg: &TrainConfig,
    feature_params: &FeatureParams,
) -> Result<Checkpoint, TrainError> {
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(TrainError::TooFewWindows(train_windows.len() + val_windows.len()));
    }
    let normalizer = fit_normalizer(train_windows);
    let train_set: Vec<(Vec<Vec<f64>>, f64)> =
        train_windows.iter().map(|w| normalizer.normalize_window(w)).collect();
    let val_set: Vec<(Vec<Vec<f64>>, f64)> =
        val_windows.iter().map(|w| normalizer.normalize_window(w)).collect();

    let mut params = init_params(&cfg.net_config(), cfg.seed);
    let mut adam = AdamState::new(&params);
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut epochs_since_best = 0usize;
    let mut history = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let order = shuffle_indices(train_set.len(), subseed(cfg.seed, epoch as u64, 0));
        let mask_seeds: Vec<u64> = (0..train_set.len())
            .map(|i| subseed(cfg.seed, epoch as u64, 1 + i as u64))
            .collect();
        let mut train_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(usize, &(Vec<Vec<f64>>, f64))> =
                batch_ids.iter().map(|&i| (i, &train_set[i])).collect();
            let (grads, loss) = batch_gradient(&params, &batch, &mask_seeds)
                .map_err(|e| TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: e.to_string(),
                })?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: format!("non-finite batch loss {loss}"),
                });
            }
            adam_step(&mut params, &grads, &mut adam, cfg.lr);
            train_loss += loss;
            n_batches += 1;
        }
        train_loss /= n_batches as f64;
        let val_loss = mean_val_nll(&params, &val_set)?;
        history.push((train_loss, val_loss));

        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best > cfg.patience {
                break;
            }
        }
    }

    Ok(Checkpoint {
        version: CHECKPOINT_VERSION.to_string(),
        config: cfg.clone(),
        params: best_params,
        adam,
        normalizer,
        feature_params: feature_params.clone(),
        history,
    })
}

/// One denormalized forecast: anchor slot timestamp, mu in mg/dl, sigma2
/// in (mg/dl)^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub t_anchor: usize,
    pub anchor_ts: Timestamp,
    pub mu: f64,
    pub sigma2: f64,
}

/// Eval-mode forecasts at every anchor with a fully observed history.
/// Anchors are independent, so they evaluate in parallel; output order is
/// by anchor regardless.
pub fn predict(ckpt: &Checkpoint, block: &ChannelBlock) -> Result<Vec<Prediction>, NnError> {
    let h = ckpt.config.history_slots;
    if block.len() < h {
        return Ok(Vec::new());
    }
    let anchors: Vec<usize> = (h - 1..block.len())
        .filter(|&anchor| (anchor + 1 - h..=anchor).all(|t| block.glucose[t].is_some()))
        .collect();
    anchors
        .par_iter()
        .map(|&anchor| {
            let window = TrainingWindow {
                inputs: (anchor + 1 - h..=anchor)
                    .map(|t| {
                        [
                            block.glucose[t].unwrap(),
                            block.c_eff[t],
                            block.i_eff[t],
                            block.s_avg[t],
                        ]
                    })
                    .collect(),
                target: 0.0,
                t_anchor: anchor,
            };
            let (inputs, _) = ckpt.normalizer.normalize_window(&window);
            let (mu, sigma2, _) = stacked_forward(&ckpt.params, &inputs, Mode::Eval)?;
            Ok(Prediction {
                t_anchor: anchor,
                anchor_ts: Timestamp(block.start.0 + anchor as i64 * crate::ingest::STEP_MINUTES),
                mu: ckpt.normalizer.denormalize_mu(mu),
                sigma2: ckpt.normalizer.denormalize_sigma2(sigma2),
            })
        })
        .collect()
}
