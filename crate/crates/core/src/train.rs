//! Hand-written backpropagation and Adam for the toy transformer.
//!
//! The cached forward pass mirrors the inference forward op-for-op (same
//! helpers, same accumulation order), so logits agree bitwise. Backward
//! supports any admissible path: skipped layers propagate `scale * grad`,
//! and quantized layers use a straight-through estimator — gradients flow
//! through the quantize-dequantize ops as identity while the matmul local
//! gradients use the quantized values that actually participated.

use crate::calibration::ScaleTable;
use crate::error::{DashError, Result};
use crate::model::{
    full_path, layernorm_cached, LayerNormParams, LayerState, LnCache, ModelConfig, ModelParams,
    ToyModel,
};
use crate::numerics::{gelu, gelu_grad, matmul, matmul_a_bt, matmul_at_b, Matrix};
use crate::task::{Episode, TaskKind, TaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ── Parameter initialization ───────────────────────────────────────────

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    use rand::Rng;
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Matrix::new(rows, cols, data).expect("init dims are positive")
}

/// Seeded uniform init: linear weights ~ U(+/- 1/sqrt(fan_in)), embeddings
/// ~ U(+/- 0.1), layernorms at identity.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let inv_d = 1.0 / (d as f64).sqrt();
    let inv_ff = 1.0 / (cfg.d_ff as f64).sqrt();
    let layers = (0..cfg.n_layers)
        .map(|_| crate::model::LayerParams {
            ln1: LayerNormParams::identity(d),
            wq: uniform_matrix(&mut rng, d, d, inv_d),
            wk: uniform_matrix(&mut rng, d, d, inv_d),
            wv: uniform_matrix(&mut rng, d, d, inv_d),
            wo: uniform_matrix(&mut rng, d, d, inv_d),
            ln2: LayerNormParams::identity(d),
            w_in: uniform_matrix(&mut rng, d, cfg.d_ff, inv_d),
            w_out: uniform_matrix(&mut rng, cfg.d_ff, d, inv_ff),
        })
        .collect();
    ModelParams {
        tok_emb: uniform_matrix(&mut rng, cfg.vocab_size, d, 0.1),
        pos_emb: uniform_matrix(&mut rng, cfg.max_seq_len, d, 0.1),
        layers,
        ln_f: LayerNormParams::identity(d),
        w_unembed: uniform_matrix(&mut rng, d, cfg.vocab_size, inv_d),
    }
}

// ── Cached forward ─────────────────────────────────────────────────────

pub(crate) enum LayerCache {
    Skip {
        scale: f64,
    },
    Exec {
        state: LayerState,
        ln1: LnCache,
        /// Post-LN1 activations as fed to the QKV matmuls (post-quant).
        x1: Matrix,
        q: Matrix,
        k: Matrix,
        v: Matrix,
        /// Per-head causal attention probabilities (upper triangle zero).
        probs: Vec<Matrix>,
        /// Context as fed to the output projection (post-quant).
        ctx: Matrix,
        ln2: LnCache,
        /// Post-LN2 activations as fed to W_in (post-quant).
        x2: Matrix,
        /// Pre-GELU activations.
        a: Matrix,
        /// Post-GELU activations as fed to W_out (post-quant).
        g: Matrix,
    },
}

pub(crate) struct ForwardCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    normed: Matrix,
    pub logits: Matrix,
}

/// Forward pass that records everything backward needs. Matches
/// `ToyModel::forward_with_path` bitwise.
pub(crate) fn forward_cached(
    model: &ToyModel,
    tokens: &[usize],
    path: &[LayerState],
    scales: &ScaleTable,
) -> Result<ForwardCache> {
    crate::model::validate_path(path, model.config.n_layers)?;
    let mut h = model.embed(tokens)?;
    let mut layers = Vec::with_capacity(path.len());
    for (i, &state) in path.iter().enumerate() {
        if state == LayerState::Skip {
            let s = scales.scale(i + 1)?;
            for v in h.data.iter_mut() {
                *v *= s;
            }
            layers.push(LayerCache::Skip { scale: s });
            continue;
        }
        let (h_out, cache) = block_forward_cached(model, &h, i, state);
        h = h_out;
        layers.push(cache);
    }
    let (normed, lnf) = layernorm_cached(&h, &model.params.ln_f);
    let logits = matmul(&normed, &model.params.w_unembed);
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        lnf,
        normed,
        logits,
    })
}

fn block_forward_cached(
    model: &ToyModel,
    h: &Matrix,
    layer_idx0: usize,
    state: LayerState,
) -> (Matrix, LayerCache) {
    let w = model.weights_for(layer_idx0, state);
    let n_heads = model.config.n_heads;
    let t = h.rows;
    let d = h.cols;
    let d_head = d / n_heads;

    let (x1_raw, ln1) = layernorm_cached(h, w.ln1);
    let x1 = crate::model::maybe_quantize(x1_raw, w.activation_bits);
    let q = matmul(&x1, w.wq);
    let k = matmul(&x1, w.wk);
    let v = matmul(&x1, w.wv);

    let mut ctx = Matrix::zeros(t, d);
    let mut probs = Vec::with_capacity(n_heads);
    let scale = 1.0 / (d_head as f64).sqrt();
    for head in 0..n_heads {
        let off = head * d_head;
        let mut pmat = Matrix::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[off..off + d_head];
            let mut scores = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let kj = &k.row(j)[off..off + d_head];
                scores.push(crate::numerics::dot(qi, kj) * scale);
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            let crow = &mut ctx.row_mut(i)[off..off + d_head];
            for (j, s) in scores.iter().enumerate() {
                let p = s / denom;
                pmat.row_mut(i)[j] = p;
                let vj = &v.row(j)[off..off + d_head];
                for (c, &vv) in crow.iter_mut().zip(vj) {
                    *c += p * vv;
                }
            }
        }
        probs.push(pmat);
    }

    let ctx = crate::model::maybe_quantize(ctx, w.activation_bits);
    let attn_out = matmul(&ctx, w.wo);
    let mut h1 = h.clone();
    for (o, a) in h1.data.iter_mut().zip(&attn_out.data) {
        *o += a;
    }

    let (x2_raw, ln2) = layernorm_cached(&h1, w.ln2);
    let x2 = crate::model::maybe_quantize(x2_raw, w.activation_bits);
    let a = matmul(&x2, w.w_in);
    let mut g_raw = a.clone();
    for v in g_raw.data.iter_mut() {
        *v = gelu(*v);
    }
    let g = crate::model::maybe_quantize(g_raw, w.activation_bits);
    let ffn_out = matmul(&g, w.w_out);
    let mut out = h1.clone();
    for (o, f) in out.data.iter_mut().zip(&ffn_out.data) {
        *o += f;
    }

    (
        out,
        LayerCache::Exec {
            state,
            ln1,
            x1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            x2,
            a,
            g,
        },
    )
}

// ── Backward ───────────────────────────────────────────────────────────

fn ln_backward(
    dy: &Matrix,
    cache: &LnCache,
    p: &LayerNormParams,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Matrix {
    let d = dy.cols as f64;
    let mut dx = Matrix::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xhat = cache.xhat.row(r);
        let rstd = cache.rstd[r];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..dy.cols {
            let dxhat = dyr[c] * p.gamma[c];
            m1 += dxhat;
            m2 += dxhat * xhat[c];
            dgamma[c] += dyr[c] * xhat[c];
            dbeta[c] += dyr[c];
        }
        m1 /= d;
        m2 /= d;
        let dxr = dx.row_mut(r);
        for c in 0..dy.cols {
            let dxhat = dyr[c] * p.gamma[c];
            dxr[c] = rstd * (dxhat - m1 - xhat[c] * m2);
        }
    }
    dx
}

/// Accumulate gradients for one sequence into `grads`. `dlogits` is the
/// gradient of the (already averaged) loss with respect to the logits.
pub(crate) fn backward(
    model: &ToyModel,
    cache: &ForwardCache,
    dlogits: &Matrix,
    grads: &mut ModelParams,
) {
    // Head: logits = LN_f(h_L) . W_u
    let d_normed = matmul_a_bt(dlogits, &model.params.w_unembed);
    add_into(&mut grads.w_unembed, &matmul_at_b(&cache.normed, dlogits));
    let mut dh = ln_backward(
        &d_normed,
        &cache.lnf,
        &model.params.ln_f,
        &mut grads.ln_f.gamma,
        &mut grads.ln_f.beta,
    );

    for (idx0, layer) in cache.layers.iter().enumerate().rev() {
        match layer {
            LayerCache::Skip { scale } => {
                for v in dh.data.iter_mut() {
                    *v *= scale;
                }
            }
            LayerCache::Exec { state, .. } => {
                dh = block_backward(model, layer, idx0, *state, &dh, grads);
            }
        }
    }

    // Embedding: h0[t] = tok_emb[tokens[t]] + pos_emb[t]
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let src = dh.row(t);
        for (g, &v) in grads.tok_emb.row_mut(tok).iter_mut().zip(src) {
            *g += v;
        }
        for (g, &v) in grads.pos_emb.row_mut(t).iter_mut().zip(src) {
            *g += v;
        }
    }
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

fn block_backward(
    model: &ToyModel,
    cache: &LayerCache,
    layer_idx0: usize,
    state: LayerState,
    d_out: &Matrix,
    grads: &mut ModelParams,
) -> Matrix {
    let LayerCache::Exec {
        ln1,
        x1,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        x2,
        a,
        g,
        ..
    } = cache
    else {
        unreachable!("block_backward called on a skip cache")
    };
    let w = model.weights_for(layer_idx0, state);
    let gl = &mut grads.layers[layer_idx0];
    let n_heads = model.config.n_heads;
    let d = model.config.d_model;
    let d_head = d / n_heads;
    let t = d_out.rows;

    // FFN sublayer: out = h1 + W_out . gelu(W_in . LN2(h1))
    let d_g = matmul_a_bt(d_out, w.w_out);
    add_into(&mut gl.w_out, &matmul_at_b(g, d_out));
    let mut d_a = d_g;
    for (dv, &av) in d_a.data.iter_mut().zip(&a.data) {
        *dv *= gelu_grad(av);
    }
    let d_x2 = matmul_a_bt(&d_a, w.w_in);
    add_into(&mut gl.w_in, &matmul_at_b(x2, &d_a));
    let mut d_h1 = d_out.clone();
    add_into(
        &mut d_h1,
        &ln_backward(&d_x2, ln2, w.ln2, &mut gl.ln2.gamma, &mut gl.ln2.beta),
    );

    // Attention sublayer: h1 = h + Wo . ctx
    let d_ctx = matmul_a_bt(&d_h1, w.wo);
    add_into(&mut gl.wo, &matmul_at_b(ctx, &d_h1));

    let mut d_q = Matrix::zeros(t, d);
    let mut d_k = Matrix::zeros(t, d);
    let mut d_v = Matrix::zeros(t, d);
    let scale = 1.0 / (d_head as f64).sqrt();
    for head in 0..n_heads {
        let off = head * d_head;
        let pmat = &probs[head];
        for i in 0..t {
            let dci = &d_ctx.row(i)[off..off + d_head];
            // dV and dProbs over the causal window.
            let mut d_probs = vec![0.0; i + 1];
            for j in 0..=i {
                let p = pmat.row(i)[j];
                let vj = &v.row(j)[off..off + d_head];
                d_probs[j] = crate::numerics::dot(dci, vj);
                let dvj = &mut d_v.row_mut(j)[off..off + d_head];
                for (dv, &c) in dvj.iter_mut().zip(dci) {
                    *dv += p * c;
                }
            }
            // Softmax Jacobian.
            let dot: f64 = (0..=i).map(|j| pmat.row(i)[j] * d_probs[j]).sum();
            for j in 0..=i {
                let d_score = pmat.row(i)[j] * (d_probs[j] - dot) * scale;
                let kj = &k.row(j)[off..off + d_head];
                let qi = &q.row(i)[off..off + d_head];
                {
                    let dqi = &mut d_q.row_mut(i)[off..off + d_head];
                    for (dq, &kv) in dqi.iter_mut().zip(kj) {
                        *dq += d_score * kv;
                    }
                }
                let dkj = &mut d_k.row_mut(j)[off..off + d_head];
                for (dk, &qv) in dkj.iter_mut().zip(qi) {
                    *dk += d_score * qv;
                }
            }
        }
    }

    let mut d_x1 = matmul_a_bt(&d_q, w.wq);
    add_into(&mut d_x1, &matmul_a_bt(&d_k, w.wk));
    add_into(&mut d_x1, &matmul_a_bt(&d_v, w.wv));
    add_into(&mut gl.wq, &matmul_at_b(x1, &d_q));
    add_into(&mut gl.wk, &matmul_at_b(x1, &d_k));
    add_into(&mut gl.wv, &matmul_at_b(x1, &d_v));

    let mut d_h = d_h1;
    let d_from_ln1 = ln_backward(&d_x1, ln1, w.ln1, &mut gl.ln1.gamma, &mut gl.ln1.beta);
    add_into(&mut d_h, &d_from_ln1);
    d_h
}

// ── Loss ───────────────────────────────────────────────────────────────

/// Summed cross-entropy over `(position, target)` pairs, with the matching
/// dlogits (softmax minus one-hot at each listed position, zero elsewhere).
pub fn ce_loss_and_dlogits(logits: &Matrix, targets: &[(usize, usize)]) -> (f64, Matrix) {
    let mut dlogits = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for &(pos, target) in targets {
        let row = logits.row(pos);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let lse = denom.ln() + max;
        loss += lse - row[target];
        let drow = dlogits.row_mut(pos);
        for (c, dv) in drow.iter_mut().enumerate() {
            *dv = (row[c] - max).exp() / denom;
        }
        drow[target] -= 1.0;
    }
    (loss, dlogits)
}

pub fn loss_targets(ep: &Episode, kind: TaskKind) -> Vec<(usize, usize)> {
    match kind {
        TaskKind::KeyValueLookup => {
            let mut t = vec![(ep.answer_pos, ep.gold)];
            t.extend_from_slice(&ep.aux);
            t
        }
        TaskKind::MarkovLm => (0..ep.tokens.len() - 1)
            .map(|t| (t, ep.tokens[t + 1]))
            .collect(),
    }
}

// ── Optimizer ──────────────────────────────────────────────────────────

pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: ModelParams::zeros_like(cfg),
            v: ModelParams::zeros_like(cfg),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut ps = params.tensors_mut();
        let gs = grads.tensors();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        for i in 0..ps.len() {
            let (p, g, m, v) = (&mut *ps[i], gs[i], &mut *ms[i], &mut *vs[i]);
            for c in 0..p.len() {
                m[c] = self.beta1 * m[c] + (1.0 - self.beta1) * g[c];
                v[c] = self.beta2 * v[c] + (1.0 - self.beta2) * g[c] * g[c];
                let mhat = m[c] / bc1;
                let vhat = v[c] / bc2;
                p[c] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale gradients down to `max_norm` if their global L2 norm exceeds it.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .tensors()
        .iter()
        .map(|t| t.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for t in grads.tensors_mut() {
            for v in t.iter_mut() {
                *v *= f;
            }
        }
    }
    norm
}

// ── Base-model training ────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// Task-defined validation metric: accuracy for classification; for LM the
/// captured fraction of the NLL gap between uniform guessing and the
/// generator's entropy rate (1.0 = perfectly fit).
pub fn validation_metric(model: &ToyModel, task: &TaskSpec, val: &[Episode]) -> Result<f64> {
    let scales = ScaleTable::identity(model.config.n_layers);
    let path = full_path(model.config.n_layers);
    match task.kind {
        TaskKind::KeyValueLookup => crate::task::accuracy(model, &path, val, &scales),
        TaskKind::MarkovLm => {
            let mut nll = 0.0;
            for ep in val {
                nll += model.perplexity(&path, &ep.tokens, &scales)?.ln();
            }
            nll /= val.len() as f64;
            let uniform = (model.config.vocab_size as f64).ln();
            let floor = crate::task::markov_entropy_nats();
            Ok((uniform - nll) / (uniform - floor))
        }
    }
}

/// Train the base model at full precision until the task floor is met.
/// Deterministic in (config.seed, task seeds); errors with diagnostics if
/// the floor is not reached within the step budget.
pub fn train_base_model(cfg: &ModelConfig, task: &TaskSpec) -> Result<(ToyModel, Vec<TrainLogRow>)> {
    cfg.validate()?;
    let mut params = init_params(cfg, cfg.seed);
    let mut adam = AdamState::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(task.train_seed);
    let val = task.validation_set();
    let path = full_path(cfg.n_layers);
    let scales = ScaleTable::identity(cfg.n_layers);
    let mut log = Vec::new();
    let mut best_metric = f64::NEG_INFINITY;

    for step in 1..=task.max_steps {
        let episodes: Vec<Episode> = (0..task.batch_size)
            .map(|_| task.sample_episode(&mut rng))
            .collect();
        let total_positions: usize = episodes
            .iter()
            .map(|ep| loss_targets(ep, task.kind).len())
            .sum();
        let inv = 1.0 / total_positions as f64;

        let mut grads = ModelParams::zeros_like(cfg);
        let mut loss_sum = 0.0;
        let model = ToyModel::from_params_unquantized(cfg.clone(), params.clone())?;
        for ep in &episodes {
            let cache = forward_cached(&model, &ep.tokens, &path, &scales)?;
            let targets = loss_targets(ep, task.kind);
            let (loss, mut dlogits) = ce_loss_and_dlogits(&cache.logits, &targets);
            loss_sum += loss * inv;
            for v in dlogits.data.iter_mut() {
                *v *= inv;
            }
            backward(&model, &cache, &dlogits, &mut grads);
        }
        if !loss_sum.is_finite() {
            return Err(DashError::Divergence(format!(
                "non-finite training loss at step {step}"
            )));
        }
        // Tame gradient spikes around circuit-formation transitions, which
        // otherwise knock Adam's moment estimates off a forming solution.
        clip_grad_norm(&mut grads, 1.0);
        adam.step(&mut params, &grads, task.learning_rate);

        if step % task.eval_every == 0 || step == task.max_steps {
            let eval_model = ToyModel::from_params_unquantized(cfg.clone(), params.clone())?;
            let metric = validation_metric(&eval_model, task, &val)?;
            best_metric = best_metric.max(metric);
            log.push(TrainLogRow {
                step,
                train_loss: loss_sum,
                val_metric: metric,
            });
            if metric >= task.accuracy_floor {
                return Ok((ToyModel::from_params(cfg.clone(), params)?, log));
            }
        }
    }
    let tail: Vec<String> = log
        .iter()
        .rev()
        .take(6)
        .rev()
        .map(|r| format!("step {} loss {:.4} val {:.4}", r.step, r.train_loss, r.val_metric))
        .collect();
    Err(DashError::NonConvergence(format!(
        "validation metric {best_metric:.4} below floor {:.4} after {} steps [{}]",
        task.accuracy_floor,
        task.max_steps,
        tail.join("; ")
    )))
}
