//! Toy decoder-only transformer with per-layer execution states.
//!
//! Architecture: pre-norm blocks (causal multi-head attention + GELU FFN),
//! learned positional embeddings, final layernorm, untied unembedding.
//! Every layer can run at full precision, at simulated 8- or 4-bit precision
//! (weights and matmul input activations quantize-dequantized), or be skipped
//! entirely with its output approximated as `scale_i * input`.

use crate::calibration::ScaleTable;
use crate::error::{DashError, Result};
use crate::numerics::{matmul, Matrix};
use crate::quant::{fake_quantize, fake_quantize_in_place};
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

// ── Execution states ───────────────────────────────────────────────────

/// Per-layer execution state. Codes mirror the cost ladder 0 < 1 < 2 < 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerState {
    /// Skip the layer; output approximated as scale * input.
    Skip,
    /// Execute with simulated 4-bit weights and activations.
    Int4,
    /// Execute with simulated 8-bit weights and activations.
    Int8,
    /// Full-precision execution.
    Full,
}

/// All states in ascending cost order.
pub const ALL_STATES: [LayerState; 4] = [
    LayerState::Skip,
    LayerState::Int4,
    LayerState::Int8,
    LayerState::Full,
];

impl LayerState {
    pub fn code(self) -> u8 {
        match self {
            LayerState::Skip => 0,
            LayerState::Int4 => 1,
            LayerState::Int8 => 2,
            LayerState::Full => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(LayerState::Skip),
            1 => Ok(LayerState::Int4),
            2 => Ok(LayerState::Int8),
            4 => Ok(LayerState::Full),
            other => Err(DashError::UnknownState(other)),
        }
    }

    /// Cost units charged by the accounting model.
    pub fn cost(self) -> u64 {
        self.code() as u64
    }

    /// Index into 4-wide candidate arrays (ascending cost order).
    pub fn slot(self) -> usize {
        match self {
            LayerState::Skip => 0,
            LayerState::Int4 => 1,
            LayerState::Int8 => 2,
            LayerState::Full => 3,
        }
    }
}

/// Path rendered as one state-code digit per layer, e.g. "420014".
pub fn path_to_string(path: &[LayerState]) -> String {
    path.iter()
        .map(|s| char::from(b'0' + s.code()))
        .collect()
}

pub fn path_from_string(s: &str) -> Result<Vec<LayerState>> {
    s.chars()
        .map(|c| {
            c.to_digit(10)
                .ok_or_else(|| DashError::InvalidArgument(format!("bad path char '{c}'")))
                .and_then(|d| LayerState::from_code(d as u8))
        })
        .collect()
}

/// Total path cost in cost units.
pub fn path_cost(path: &[LayerState]) -> u64 {
    path.iter().map(|s| s.cost()).sum()
}

/// Cost of the all-full path, 4 * L.
pub fn full_path_cost(n_layers: usize) -> u64 {
    4 * n_layers as u64
}

// ── Config ─────────────────────────────────────────────────────────────

/// Toy transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 3 {
            // First and last layers are never skippable, so at least one
            // decidable layer must exist.
            return Err(DashError::InvalidArgument(format!(
                "n_layers must be >= 3, got {}",
                self.n_layers
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(DashError::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(DashError::InvalidArgument(
                "d_ff, vocab_size and max_seq_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

// ── Parameters ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1: LayerNormParams,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNormParams,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub ln_f: LayerNormParams,
    pub w_unembed: Matrix,
}

impl ModelParams {
    /// Zero-valued parameters with the shapes `cfg` implies. Doubles as the
    /// gradient and optimizer-moment container.
    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            tok_emb: Matrix::zeros(cfg.vocab_size, d),
            pos_emb: Matrix::zeros(cfg.max_seq_len, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    ln1: LayerNormParams {
                        gamma: vec![0.0; d],
                        beta: vec![0.0; d],
                    },
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    ln2: LayerNormParams {
                        gamma: vec![0.0; d],
                        beta: vec![0.0; d],
                    },
                    w_in: Matrix::zeros(d, cfg.d_ff),
                    w_out: Matrix::zeros(cfg.d_ff, d),
                })
                .collect(),
            ln_f: LayerNormParams {
                gamma: vec![0.0; d],
                beta: vec![0.0; d],
            },
            w_unembed: Matrix::zeros(d, cfg.vocab_size),
        }
    }

    /// All parameter tensors in a fixed order, for optimizers and norms.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.tok_emb.data, &self.pos_emb.data];
        for l in &self.layers {
            out.push(&l.ln1.gamma);
            out.push(&l.ln1.beta);
            out.push(&l.wq.data);
            out.push(&l.wk.data);
            out.push(&l.wv.data);
            out.push(&l.wo.data);
            out.push(&l.ln2.gamma);
            out.push(&l.ln2.beta);
            out.push(&l.w_in.data);
            out.push(&l.w_out.data);
        }
        out.push(&self.ln_f.gamma);
        out.push(&self.ln_f.beta);
        out.push(&self.w_unembed.data);
        out
    }

    /// Mutable view in the same order as `tensors`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![&mut self.tok_emb.data, &mut self.pos_emb.data];
        for l in &mut self.layers {
            out.push(&mut l.ln1.gamma);
            out.push(&mut l.ln1.beta);
            out.push(&mut l.wq.data);
            out.push(&mut l.wk.data);
            out.push(&mut l.wv.data);
            out.push(&mut l.wo.data);
            out.push(&mut l.ln2.gamma);
            out.push(&mut l.ln2.beta);
            out.push(&mut l.w_in.data);
            out.push(&mut l.w_out.data);
        }
        out.push(&mut self.ln_f.gamma);
        out.push(&mut self.ln_f.beta);
        out.push(&mut self.w_unembed.data);
        out
    }
}

/// Quantized copies of the six weight matrices of one layer.
#[derive(Debug, Clone)]
pub struct QuantizedLayer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

fn quantize_matrix(m: &Matrix, bits: u8) -> Result<Matrix> {
    Ok(Matrix {
        rows: m.rows,
        cols: m.cols,
        data: fake_quantize(&m.data, bits)?,
    })
}

fn quantize_layer(layer: &LayerParams, bits: u8) -> Result<QuantizedLayer> {
    Ok(QuantizedLayer {
        wq: quantize_matrix(&layer.wq, bits)?,
        wk: quantize_matrix(&layer.wk, bits)?,
        wv: quantize_matrix(&layer.wv, bits)?,
        wo: quantize_matrix(&layer.wo, bits)?,
        w_in: quantize_matrix(&layer.w_in, bits)?,
        w_out: quantize_matrix(&layer.w_out, bits)?,
    })
}

// ── Model ──────────────────────────────────────────────────────────────

/// Immutable trained model plus pre-quantized weight variants.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    quant8: Vec<QuantizedLayer>,
    quant4: Vec<QuantizedLayer>,
}

/// Counts multiply-add FLOPs in matmuls of the layer body.
///
/// Quantized states count the same body FLOPs as full precision (the
/// arithmetic is simulated); the cost model, not the counter, orders them.
#[derive(Debug, Default, Clone, Copy)]
pub struct FlopCounter {
    pub flops: u64,
}

impl FlopCounter {
    #[inline]
    fn matmul(&mut self, m: usize, k: usize, n: usize) {
        self.flops += 2 * (m * k * n) as u64;
    }
}

/// Full residual-stream trace of a full-precision forward pass.
///
/// `boundaries[i]` is the hidden state entering layer i+1 (0-based), so
/// `boundaries[0]` is the embedding output and `boundaries[L]` the output of
/// the last layer before the final layernorm.
#[derive(Debug, Clone)]
pub struct ResidualTrace {
    pub boundaries: Vec<Matrix>,
}

impl ToyModel {
    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let quant8 = params
            .layers
            .iter()
            .map(|l| quantize_layer(l, 8))
            .collect::<Result<Vec<_>>>()?;
        let quant4 = params
            .layers
            .iter()
            .map(|l| quantize_layer(l, 4))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params,
            quant8,
            quant4,
        })
    }

    /// Skip preparing quantized weight copies. Only full-precision and skip
    /// states are usable; requesting an int state panics. Training loops use
    /// this to avoid re-quantizing after every update.
    pub fn from_params_unquantized(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params,
            quant8: Vec::new(),
            quant4: Vec::new(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Token + position embedding lookup.
    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(DashError::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(DashError::InvalidArgument(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        let d = self.config.d_model;
        let mut h = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok >= self.config.vocab_size {
                return Err(DashError::InvalidArgument(format!(
                    "token id {tok} out of vocab"
                )));
            }
            let row = h.row_mut(t);
            for (o, (&e, &p)) in row
                .iter_mut()
                .zip(self.params.tok_emb.row(tok).iter().zip(self.params.pos_emb.row(t)))
            {
                *o = e + p;
            }
        }
        Ok(h)
    }

    pub(crate) fn weights_for(&self, layer_idx0: usize, state: LayerState) -> LayerWeightsRef<'_> {
        let base = &self.params.layers[layer_idx0];
        if matches!(state, LayerState::Int8 | LayerState::Int4) {
            assert!(
                !self.quant8.is_empty(),
                "quantized state requested on a model built with from_params_unquantized"
            );
        }
        match state {
            LayerState::Int8 => {
                let q = &self.quant8[layer_idx0];
                LayerWeightsRef {
                    ln1: &base.ln1,
                    ln2: &base.ln2,
                    wq: &q.wq,
                    wk: &q.wk,
                    wv: &q.wv,
                    wo: &q.wo,
                    w_in: &q.w_in,
                    w_out: &q.w_out,
                    activation_bits: Some(8),
                }
            }
            LayerState::Int4 => {
                let q = &self.quant4[layer_idx0];
                LayerWeightsRef {
                    ln1: &base.ln1,
                    ln2: &base.ln2,
                    wq: &q.wq,
                    wk: &q.wk,
                    wv: &q.wv,
                    wo: &q.wo,
                    w_in: &q.w_in,
                    w_out: &q.w_out,
                    activation_bits: Some(4),
                }
            }
            _ => LayerWeightsRef {
                ln1: &base.ln1,
                ln2: &base.ln2,
                wq: &base.wq,
                wk: &base.wk,
                wv: &base.wv,
                wo: &base.wo,
                w_in: &base.w_in,
                w_out: &base.w_out,
                activation_bits: None,
            },
        }
    }

    /// Run one layer under an execution state. `layer_index` is 1-based.
    pub fn layer_forward(
        &self,
        h_in: &Matrix,
        layer_index: usize,
        state: LayerState,
        scales: &ScaleTable,
    ) -> Result<Matrix> {
        let mut fc = FlopCounter::default();
        self.layer_forward_counted(h_in, layer_index, state, scales, &mut fc)
    }

    /// As `layer_forward` but accumulates layer-body matmul FLOPs.
    pub fn layer_forward_counted(
        &self,
        h_in: &Matrix,
        layer_index: usize,
        state: LayerState,
        scales: &ScaleTable,
        flops: &mut FlopCounter,
    ) -> Result<Matrix> {
        let l = self.config.n_layers;
        if layer_index == 0 || layer_index > l {
            return Err(DashError::LayerIndexOutOfRange {
                index: layer_index,
                layers: l,
            });
        }
        if h_in.cols != self.config.d_model {
            return Err(DashError::DimensionMismatch(format!(
                "layer input width {} != d_model {}",
                h_in.cols, self.config.d_model
            )));
        }
        if state == LayerState::Skip {
            // Output approximated as scale * input; no layer arithmetic runs.
            let s = scales.scale(layer_index)?;
            let mut out = h_in.clone();
            for v in out.data.iter_mut() {
                *v *= s;
            }
            return Ok(out);
        }
        let w = self.weights_for(layer_index - 1, state);
        Ok(transformer_block(h_in, &w, self.config.n_heads, flops))
    }

    /// Compose all layers under `path`, then final layernorm and unembedding.
    pub fn forward_with_path(
        &self,
        tokens: &[usize],
        path: &[LayerState],
        scales: &ScaleTable,
    ) -> Result<Matrix> {
        let mut fc = FlopCounter::default();
        self.forward_with_path_counted(tokens, path, scales, &mut fc)
    }

    pub fn forward_with_path_counted(
        &self,
        tokens: &[usize],
        path: &[LayerState],
        scales: &ScaleTable,
        flops: &mut FlopCounter,
    ) -> Result<Matrix> {
        validate_path(path, self.config.n_layers)?;
        let mut h = self.embed(tokens)?;
        for (i, &state) in path.iter().enumerate() {
            h = self.layer_forward_counted(&h, i + 1, state, scales, flops)?;
        }
        Ok(self.head(&h, flops))
    }

    /// Straight-line full-precision forward with no state machinery.
    pub fn forward_plain(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut fc = FlopCounter::default();
        let mut h = self.embed(tokens)?;
        for layer in 0..self.config.n_layers {
            let w = self.weights_for(layer, LayerState::Full);
            h = transformer_block(&h, &w, self.config.n_heads, &mut fc);
        }
        Ok(self.head(&h, &mut fc))
    }

    /// Full-precision forward that records the residual stream at every
    /// layer boundary. Used by calibration and profiling.
    pub fn forward_trace_full(&self, tokens: &[usize]) -> Result<ResidualTrace> {
        let mut fc = FlopCounter::default();
        let mut boundaries = Vec::with_capacity(self.config.n_layers + 1);
        let mut h = self.embed(tokens)?;
        boundaries.push(h.clone());
        for layer in 0..self.config.n_layers {
            let w = self.weights_for(layer, LayerState::Full);
            h = transformer_block(&h, &w, self.config.n_heads, &mut fc);
            boundaries.push(h.clone());
        }
        Ok(ResidualTrace { boundaries })
    }

    /// Final layernorm + unembedding.
    fn head(&self, h: &Matrix, flops: &mut FlopCounter) -> Matrix {
        let normed = layernorm(h, &self.params.ln_f);
        flops.matmul(normed.rows, normed.cols, self.params.w_unembed.cols);
        matmul(&normed, &self.params.w_unembed)
    }

    /// Final layernorm + unembedding on an externally produced residual
    /// stream (layer-by-layer drivers end with this).
    pub fn head_forward(&self, h: &Matrix) -> Matrix {
        let mut fc = FlopCounter::default();
        self.head(h, &mut fc)
    }

    /// exp of mean next-token negative log-likelihood under `path`.
    pub fn perplexity(
        &self,
        path: &[LayerState],
        tokens: &[usize],
        scales: &ScaleTable,
    ) -> Result<f64> {
        let logits = self.forward_with_path(tokens, path, scales)?;
        perplexity_from_logits(&logits, tokens)
    }
}

/// exp of mean next-token negative log-likelihood given precomputed logits.
pub fn perplexity_from_logits(logits: &Matrix, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(DashError::InvalidArgument(
            "perplexity needs a sequence of length >= 2".into(),
        ));
    }
    if logits.rows < tokens.len() {
        return Err(DashError::DimensionMismatch(format!(
            "{} logit rows for {} tokens",
            logits.rows,
            tokens.len()
        )));
    }
    let mut nll = 0.0;
    for t in 0..tokens.len() - 1 {
        nll -= log_softmax_at(logits.row(t), tokens[t + 1]);
    }
    Ok((nll / (tokens.len() - 1) as f64).exp())
}

/// Check boundary rules: first and last layers always run at full precision.
pub fn validate_path(path: &[LayerState], n_layers: usize) -> Result<()> {
    if path.len() != n_layers {
        return Err(DashError::PathConstraint(format!(
            "path length {} != n_layers {}",
            path.len(),
            n_layers
        )));
    }
    if path[0] != LayerState::Full || path[n_layers - 1] != LayerState::Full {
        return Err(DashError::PathConstraint(format!(
            "first and last layers must be state 4, got path {}",
            path_to_string(path)
        )));
    }
    Ok(())
}

pub fn full_path(n_layers: usize) -> Vec<LayerState> {
    vec![LayerState::Full; n_layers]
}

// ── Block internals ────────────────────────────────────────────────────

pub(crate) struct LayerWeightsRef<'a> {
    pub(crate) ln1: &'a LayerNormParams,
    pub(crate) ln2: &'a LayerNormParams,
    pub(crate) wq: &'a Matrix,
    pub(crate) wk: &'a Matrix,
    pub(crate) wv: &'a Matrix,
    pub(crate) wo: &'a Matrix,
    pub(crate) w_in: &'a Matrix,
    pub(crate) w_out: &'a Matrix,
    /// When set, activations entering each weight matmul are fake-quantized.
    pub(crate) activation_bits: Option<u8>,
}

/// Per-row layernorm statistics kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    /// Normalized rows before gamma/beta.
    pub(crate) xhat: Matrix,
    /// 1 / sqrt(var + eps) per row.
    pub(crate) rstd: Vec<f64>,
}

/// Layernorm that also returns the cache backward needs. The plain
/// `layernorm` delegates here so both paths share one arithmetic order.
pub(crate) fn layernorm_cached(x: &Matrix, p: &LayerNormParams) -> (Matrix, LnCache) {
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut xhat = Matrix::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    let d = x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(inv);
        let orow = out.row_mut(r);
        let xrow = xhat.row_mut(r);
        for c in 0..x.cols {
            let xh = (row[c] - mean) * inv;
            xrow[c] = xh;
            orow[c] = xh * p.gamma[c] + p.beta[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

pub(crate) fn layernorm(x: &Matrix, p: &LayerNormParams) -> Matrix {
    layernorm_cached(x, p).0
}

pub(crate) fn maybe_quantize(x: Matrix, bits: Option<u8>) -> Matrix {
    match bits {
        None => x,
        Some(b) => {
            let mut q = x;
            // Per-tensor spec over the whole activation matrix.
            fake_quantize_in_place(&mut q.data, b).expect("bits validated at construction");
            q
        }
    }
}

/// Pre-norm block: h + Attn(LN1(h)) then + FFN(LN2(.)).
fn transformer_block(
    h: &Matrix,
    w: &LayerWeightsRef<'_>,
    n_heads: usize,
    flops: &mut FlopCounter,
) -> Matrix {
    let t = h.rows;
    let d = h.cols;
    let d_head = d / n_heads;

    // Attention sublayer.
    let x = maybe_quantize(layernorm(h, w.ln1), w.activation_bits);
    flops.matmul(t, d, d);
    let q = matmul(&x, w.wq);
    flops.matmul(t, d, d);
    let k = matmul(&x, w.wk);
    flops.matmul(t, d, d);
    let v = matmul(&x, w.wv);

    let mut ctx = Matrix::zeros(t, d);
    let scale = 1.0 / (d_head as f64).sqrt();
    for head in 0..n_heads {
        let off = head * d_head;
        for i in 0..t {
            // Causal scores for position i over j <= i.
            let qi = &q.row(i)[off..off + d_head];
            let mut scores = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let kj = &k.row(j)[off..off + d_head];
                scores.push(crate::numerics::dot(qi, kj) * scale);
            }
            flops.matmul(1, d_head, i + 1);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            let crow = &mut ctx.row_mut(i)[off..off + d_head];
            for (j, s) in scores.iter().enumerate() {
                let p = s / denom;
                let vj = &v.row(j)[off..off + d_head];
                for (c, &vv) in crow.iter_mut().zip(vj) {
                    *c += p * vv;
                }
            }
            flops.matmul(1, i + 1, d_head);
        }
    }

    let ctx = maybe_quantize(ctx, w.activation_bits);
    flops.matmul(t, d, d);
    let attn_out = matmul(&ctx, w.wo);
    let mut h1 = h.clone();
    for (o, a) in h1.data.iter_mut().zip(&attn_out.data) {
        *o += a;
    }

    // Feed-forward sublayer.
    let x2 = maybe_quantize(layernorm(&h1, w.ln2), w.activation_bits);
    flops.matmul(t, d, w.w_in.cols);
    let mut mid = matmul(&x2, w.w_in);
    for v in mid.data.iter_mut() {
        *v = crate::numerics::gelu(*v);
    }
    let mid = maybe_quantize(mid, w.activation_bits);
    flops.matmul(t, w.w_out.rows, d);
    let ffn_out = matmul(&mid, w.w_out);
    for (o, f) in h1.data.iter_mut().zip(&ffn_out.data) {
        *o += f;
    }
    h1
}

pub(crate) fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
