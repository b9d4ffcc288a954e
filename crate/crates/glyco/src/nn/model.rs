//! Stacked-LSTM network with a Gaussian (mu, sigma^2) head.
//!
//! Two LSTM layers over the 4-channel input window, the first feeding
//! its full hidden sequence to the second. The final hidden state passes
//! through inverted dropout (train mode only), two ReLU dense layers,
//! and a 2-unit head: mu is affine, sigma^2 goes through exp so it stays
//! positive. Backprop is exact reverse-mode through the whole unrolled
//! graph.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value in tensor `{tensor}`")]
    NonFinite { tensor: String },
    #[error("sigma2 must be positive, got {0}")]
    BadVariance(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Network sizes. Defaults follow the reference architecture: 2 LSTM
/// layers of 128 units, dense 512 and 128, dropout 0.2.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub input_channels: usize,
    pub hidden: usize,
    pub num_lstm_layers: usize,
    pub dense1: usize,
    pub dense2: usize,
    pub dropout_rate: f64,
}

impl Default for NetConfig {
    fn default() -> NetConfig {
        NetConfig {
            input_channels: 4,
            hidden: 128,
            num_lstm_layers: 2,
            dense1: 512,
            dense2: 128,
            dropout_rate: 0.2,
        }
    }
}

/// One LSTM layer, concatenated-[h, x] weight convention: each gate has
/// W (hidden x (hidden+input)) and a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub w_i: Tensor,
    pub b_i: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl LstmLayerParams {
    fn zeros(hidden: usize, input: usize) -> LstmLayerParams {
        let w = || Tensor::zeros(&[hidden, hidden + input]);
        let b = || Tensor::zeros(&[hidden]);
        LstmLayerParams {
            w_f: w(),
            b_f: b(),
            w_i: w(),
            b_i: b(),
            w_c: w(),
            b_c: b(),
            w_o: w(),
            b_o: b(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_f.rows()
    }

    pub fn input(&self) -> usize {
        self.w_f.cols() - self.w_f.rows()
    }
}

/// All learnable tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    pub lstm_layers: Vec<LstmLayerParams>,
    pub dense1_w: Tensor,
    pub dense1_b: Tensor,
    pub dense2_w: Tensor,
    pub dense2_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &NetConfig) -> ModelParams {
        let mut lstm_layers = Vec::with_capacity(config.num_lstm_layers);
        let mut input = config.input_channels;
        for _ in 0..config.num_lstm_layers {
            lstm_layers.push(LstmLayerParams::zeros(config.hidden, input));
            input = config.hidden;
        }
        ModelParams {
            config: config.clone(),
            lstm_layers,
            dense1_w: Tensor::zeros(&[config.dense1, config.hidden]),
            dense1_b: Tensor::zeros(&[config.dense1]),
            dense2_w: Tensor::zeros(&[config.dense2, config.dense1]),
            dense2_b: Tensor::zeros(&[config.dense2]),
            head_w: Tensor::zeros(&[2, config.dense2]),
            head_b: Tensor::zeros(&[2]),
        }
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams::zeros(&self.config)
    }

    /// Stable (name, tensor) listing; checkpoint payload order and the
    /// Adam moment layout both follow it.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.lstm_layers.iter().enumerate() {
            out.push((format!("lstm{l}.w_f"), &layer.w_f));
            out.push((format!("lstm{l}.b_f"), &layer.b_f));
            out.push((format!("lstm{l}.w_i"), &layer.w_i));
            out.push((format!("lstm{l}.b_i"), &layer.b_i));
            out.push((format!("lstm{l}.w_c"), &layer.w_c));
            out.push((format!("lstm{l}.b_c"), &layer.b_c));
            out.push((format!("lstm{l}.w_o"), &layer.w_o));
            out.push((format!("lstm{l}.b_o"), &layer.b_o));
        }
        out.push(("dense1.w".into(), &self.dense1_w));
        out.push(("dense1.b".into(), &self.dense1_b));
        out.push(("dense2.w".into(), &self.dense2_w));
        out.push(("dense2.b".into(), &self.dense2_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.lstm_layers {
            out.push(&mut layer.w_f);
            out.push(&mut layer.b_f);
            out.push(&mut layer.w_i);
            out.push(&mut layer.b_i);
            out.push(&mut layer.w_c);
            out.push(&mut layer.b_c);
            out.push(&mut layer.w_o);
            out.push(&mut layer.b_o);
        }
        out.push(&mut self.dense1_w);
        out.push(&mut self.dense1_b);
        out.push(&mut self.dense2_w);
        out.push(&mut self.dense2_b);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// self += other * scale, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let theirs = other.named_tensors();
        for (mine, (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_scaled(t, scale);
        }
    }
}

/// Glorot-uniform weights, zero biases except the forget-gate bias at 1.0.
pub fn init_params(config: &NetConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(config);
    for t in params.tensors_mut() {
        if t.shape.len() == 2 {
            let (fan_out, fan_in) = (t.shape[0], t.shape[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut t.data {
                *v = rng.random_range(-a..a);
            }
        }
    }
    for layer in &mut params.lstm_layers {
        layer.b_f.data.fill(1.0);
    }
    params
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Everything the cell backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct CellCache {
    /// Concatenated [h_prev, x].
    pub z: Vec<f64>,
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// Single LSTM cell step (the six gate equations).
pub fn lstm_cell_forward(
    layer: &LstmLayerParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, CellCache), NnError> {
    let hidden = layer.hidden();
    if x.len() != layer.input() || h_prev.len() != hidden || c_prev.len() != hidden {
        return Err(NnError::Shape(format!(
            "cell expects input {} hidden {}, got x {} h {} c {}",
            layer.input(),
            hidden,
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut z = Vec::with_capacity(hidden + x.len());
    z.extend_from_slice(h_prev);
    z.extend_from_slice(x);

    let gate = |w: &Tensor, b: &Tensor| -> Vec<f64> {
        let mut a = w.matvec(&z);
        for (av, bv) in a.iter_mut().zip(&b.data) {
            *av += bv;
        }
        a
    };
    let f: Vec<f64> = gate(&layer.w_f, &layer.b_f).into_iter().map(sigmoid).collect();
    let i: Vec<f64> = gate(&layer.w_i, &layer.b_i).into_iter().map(sigmoid).collect();
    let g: Vec<f64> = gate(&layer.w_c, &layer.b_c).into_iter().map(f64::tanh).collect();
    let o: Vec<f64> = gate(&layer.w_o, &layer.b_o).into_iter().map(sigmoid).collect();

    let mut c = vec![0.0; hidden];
    let mut tanh_c = vec![0.0; hidden];
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        c[j] = f[j] * c_prev[j] + i[j] * g[j];
        tanh_c[j] = c[j].tanh();
        h[j] = tanh_c[j] * o[j];
    }
    if !h.iter().all(|v| v.is_finite()) || !c.iter().all(|v| v.is_finite()) {
        return Err(NnError::NonFinite { tensor: "lstm cell state".into() });
    }
    let cache = CellCache { z, f, i, g, o, c_prev: c_prev.to_vec(), c, tanh_c };
    Ok((h, cache.c.clone(), cache))
}

/// Forward mode: eval uses no dropout, train draws a mask from the seed
/// (inverted dropout, so eval needs no rescaling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { mask_seed: u64 },
}

/// Every intermediate the exact backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Cell caches, indexed [layer][step].
    pub cells: Vec<Vec<CellCache>>,
    /// Dropout scale per unit of the final hidden state (all 1.0 in eval).
    pub dropout_mask: Vec<f64>,
    /// Final hidden state after dropout.
    pub dropped: Vec<f64>,
    pub a1: Vec<f64>,
    pub d1: Vec<f64>,
    pub a2: Vec<f64>,
    pub d2: Vec<f64>,
    pub head: [f64; 2],
}

fn dense_forward(w: &Tensor, b: &Tensor, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = w.matvec(x);
    for (av, bv) in a.iter_mut().zip(&b.data) {
        *av += bv;
    }
    let act = a.iter().map(|v| v.max(0.0)).collect();
    (a, act)
}

/// Full forward pass over one input window (history x channels, row per
/// step). Returns (mu, sigma2, cache).
pub fn stacked_forward(
    params: &ModelParams,
    window: &[Vec<f64>],
    mode: Mode,
) -> Result<(f64, f64, ForwardCache), NnError> {
    assert!(!window.is_empty(), "stacked_forward: empty window");
    let hidden = params.config.hidden;
    let n_layers = params.lstm_layers.len();

    let mut cells: Vec<Vec<CellCache>> = vec![Vec::with_capacity(window.len()); n_layers];
    let mut inputs: Vec<Vec<f64>> = window.to_vec();
    for (l, layer) in params.lstm_layers.iter().enumerate() {
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut outputs = Vec::with_capacity(inputs.len());
        for x in &inputs {
            let (h_t, c_t, cache) = lstm_cell_forward(layer, x, &h, &c)?;
            cells[l].push(cache);
            h = h_t;
            c = c_t;
            outputs.push(h.clone());
        }
        inputs = outputs;
    }
    let h_final = inputs.last().unwrap().clone();

    let rate = params.config.dropout_rate;
    let dropout_mask: Vec<f64> = match mode {
        Mode::Eval => vec![1.0; hidden],
        Mode::Train { mask_seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let keep = 1.0 - rate;
            (0..hidden)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        }
    };
    let dropped: Vec<f64> = h_final.iter().zip(&dropout_mask).map(|(h, m)| h * m).collect();

    let (a1, d1) = dense_forward(&params.dense1_w, &params.dense1_b, &dropped);
    let (a2, d2) = dense_forward(&params.dense2_w, &params.dense2_b, &d1);
    let mut head = params.head_w.matvec(&d2);
    head[0] += params.head_b.data[0];
    head[1] += params.head_b.data[1];
    let mu = head[0];
    let sigma2 = head[1].exp();
    if !mu.is_finite() {
        return Err(NnError::NonFinite { tensor: "head mu".into() });
    }
    if !sigma2.is_finite() || sigma2 <= 0.0 {
        return Err(NnError::NonFinite { tensor: "head sigma2".into() });
    }
    let cache = ForwardCache {
        cells,
        dropout_mask,
        dropped,
        a1,
        d1,
        a2,
        d2,
        head: [head[0], head[1]],
    };
    Ok((mu, sigma2, cache))
}

/// Per-sample Gaussian negative log-likelihood.
pub fn nll_loss(mu: f64, sigma2: f64, y: f64) -> Result<f64, NnError> {
    if sigma2 <= 0.0 {
        return Err(NnError::BadVariance(sigma2));
    }
    let r = y - mu;
    Ok(0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() + r * r / (2.0 * sigma2))
}

fn cell_backward(
    layer: &LstmLayerParams,
    cache: &CellCache,
    dh: &[f64],
    dc_in: &[f64],
    grads: &mut LstmLayerParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hidden = layer.hidden();
    let mut da_f = vec![0.0; hidden];
    let mut da_i = vec![0.0; hidden];
    let mut da_g = vec![0.0; hidden];
    let mut da_o = vec![0.0; hidden];
    let mut dc_prev = vec![0.0; hidden];
    for j in 0..hidden {
        let do_j = dh[j] * cache.tanh_c[j];
        let dc_j = dc_in[j] + dh[j] * cache.o[j] * (1.0 - cache.tanh_c[j] * cache.tanh_c[j]);
        let df_j = dc_j * cache.c_prev[j];
        let di_j = dc_j * cache.g[j];
        let dg_j = dc_j * cache.i[j];
        dc_prev[j] = dc_j * cache.f[j];
        da_f[j] = df_j * cache.f[j] * (1.0 - cache.f[j]);
        da_i[j] = di_j * cache.i[j] * (1.0 - cache.i[j]);
        da_g[j] = dg_j * (1.0 - cache.g[j] * cache.g[j]);
        da_o[j] = do_j * cache.o[j] * (1.0 - cache.o[j]);
    }

    grads.w_f.add_outer(&da_f, &cache.z);
    grads.w_i.add_outer(&da_i, &cache.z);
    grads.w_c.add_outer(&da_g, &cache.z);
    grads.w_o.add_outer(&da_o, &cache.z);
    for j in 0..hidden {
        grads.b_f.data[j] += da_f[j];
        grads.b_i.data[j] += da_i[j];
        grads.b_c.data[j] += da_g[j];
        grads.b_o.data[j] += da_o[j];
    }

    let mut dz = layer.w_f.matvec_transpose(&da_f);
    for (d, v) in dz.iter_mut().zip(layer.w_i.matvec_transpose(&da_i)) {
        *d += v;
    }
    for (d, v) in dz.iter_mut().zip(layer.w_c.matvec_transpose(&da_g)) {
        *d += v;
    }
    for (d, v) in dz.iter_mut().zip(layer.w_o.matvec_transpose(&da_o)) {
        *d += v;
    }
    let dh_prev = dz[..hidden].to_vec();
    let dx = dz[hidden..].to_vec();
    (dh_prev, dc_prev, dx)
}

/// Exact gradient of the per-sample NLL with respect to every parameter
/// tensor, given the forward cache and the target.
pub fn backward(params: &ModelParams, cache: &ForwardCache, y: f64) -> ModelParams {
    let mut grads = params.zeros_like();
    let hidden = params.config.hidden;
    let steps = cache.cells[0].len();

    let mu = cache.head[0];
    let sigma2 = cache.head[1].exp();
    let residual = y - mu;
    // dL/d(head pre-activations): mu is affine, sigma2 = exp(a).
    let da_head = [-residual / sigma2, 0.5 - residual * residual / (2.0 * sigma2)];

    grads.head_w.add_outer(&da_head, &cache.d2);
    grads.head_b.data[0] += da_head[0];
    grads.head_b.data[1] += da_head[1];
    let dd2 = params.head_w.matvec_transpose(&da_head);

    let da2: Vec<f64> = dd2
        .iter()
        .zip(&cache.a2)
        .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 })
        .collect();
    grads.dense2_w.add_outer(&da2, &cache.d1);
    for (g, d) in grads.dense2_b.data.iter_mut().zip(&da2) {
        *g += d;
    }
    let dd1 = params.dense2_w.matvec_transpose(&da2);

    let da1: Vec<f64> = dd1
        .iter()
        .zip(&cache.a1)
        .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 })
        .collect();
    grads.dense1_w.add_outer(&da1, &cache.dropped);
    for (g, d) in grads.dense1_b.data.iter_mut().zip(&da1) {
        *g += d;
    }
    let d_dropped = params.dense1_w.matvec_transpose(&da1);

    // Through dropout into the top LSTM layer's final hidden state.
    let mut dh_top: Vec<Vec<f64>> = vec![vec![0.0; hidden]; steps];
    for (j, d) in dh_top[steps - 1].iter_mut().enumerate() {
        *d = d_dropped[j] * cache.dropout_mask[j];
    }

    for l in (0..params.lstm_layers.len()).rev() {
        let layer = &params.lstm_layers[l];
        let input_dim = layer.input();
        let mut dh_rec = vec![0.0; hidden];
        let mut dc_rec = vec![0.0; hidden];
        let mut dh_below: Vec<Vec<f64>> = vec![vec![0.0; input_dim]; steps];
        for t in (0..steps).rev() {
            let mut dh = dh_top[t].clone();
            for (a, b) in dh.iter_mut().zip(&dh_rec) {
                *a += b;
            }
            let (dh_prev, dc_prev, dx) =
                cell_backward(layer, &cache.cells[l][t], &dh, &dc_rec, &mut grads.lstm_layers[l]);
            dh_rec = dh_prev;
            dc_rec = dc_prev;
            dh_below[t] = dx;
        }
        dh_top = dh_below;
    }

    grads
}
