//! The motivating measurements behind dynamic skipping: per-layer
//! input/output cosine similarity, adjacent-boundary similarity, and the
//! naive static-skip degradation sweep.
//!
//! Hidden states are mean-pooled over sequence positions before the cosine
//! (one value per layer per sample); the full per-sample matrix is
//! retained for external analysis.

use crate::calibration::ScaleTable;
use crate::error::{DashError, Result};
use crate::model::{argmax, full_path, LayerState, ResidualTrace, ToyModel};
use crate::numerics::{cosine_similarity, Matrix};
use crate::task::{Episode, TaskKind};
use serde::Serialize;

// ── Similarity profiles ────────────────────────────────────────────────

/// Per-layer cosine-similarity measurements over a sample set.
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityProfile {
    /// per_sample[s][l]: similarity at layer axis position l for sample s.
    pub per_sample: Vec<Vec<f64>>,
    pub sample_ids: Vec<usize>,
    /// Mean over samples, one entry per layer.
    pub mean: Vec<f64>,
    /// Population standard deviation over samples.
    pub std: Vec<f64>,
}

impl SimilarityProfile {
    fn from_rows(per_sample: Vec<Vec<f64>>, sample_ids: Vec<usize>) -> Self {
        let layers = per_sample.first().map_or(0, |r| r.len());
        let n = per_sample.len() as f64;
        let mut mean = vec![0.0; layers];
        for row in &per_sample {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut std = vec![0.0; layers];
        for row in &per_sample {
            for ((s, &v), &m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
        }
        Self {
            per_sample,
            sample_ids,
            mean,
            std,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.mean.len()
    }

    /// CSV rows `layer,sample_id,similarity` (1-based layer axis).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,sample_id,similarity\n");
        for (row, &id) in self.per_sample.iter().zip(&self.sample_ids) {
            for (l, v) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", l + 1, id, v));
            }
        }
        out
    }
}

fn mean_pool(h: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; h.cols];
    for r in 0..h.rows {
        for (o, &v) in out.iter_mut().zip(h.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / h.rows as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    out
}

/// Per-boundary-pair similarities for one full-precision residual trace:
/// entry l is cos(pool(boundary l), pool(boundary l+1)) — the change layer
/// l+1 makes to the stream.
fn trace_similarities(trace: &ResidualTrace) -> Result<Vec<f64>> {
    let pooled: Vec<Vec<f64>> = trace.boundaries.iter().map(mean_pool).collect();
    let mut sims = Vec::with_capacity(pooled.len() - 1);
    for pair in pooled.windows(2) {
        sims.push(cosine_similarity(&pair[0], &pair[1])?);
    }
    Ok(sims)
}

/// Build a profile directly from residual traces (the testable core the
/// model-facing wrappers share).
pub fn profile_from_traces(traces: &[ResidualTrace]) -> Result<SimilarityProfile> {
    if traces.is_empty() {
        return Err(DashError::InvalidArgument(
            "similarity profile needs at least one sample".into(),
        ));
    }
    let mut rows = Vec::with_capacity(traces.len());
    for t in traces {
        rows.push(trace_similarities(t)?);
    }
    let ids = (0..traces.len()).collect();
    Ok(SimilarityProfile::from_rows(rows, ids))
}

/// Cosine similarity between each layer's input and output hidden states
/// (mean-pooled over tokens) on full-precision passes, one value per layer
/// per sample.
pub fn io_similarity_profile(
    model: &ToyModel,
    sequences: &[Vec<usize>],
) -> Result<SimilarityProfile> {
    let mut traces = Vec::with_capacity(sequences.len());
    for s in sequences {
        traces.push(model.forward_trace_full(s)?);
    }
    profile_from_traces(&traces)
}

/// Cosine similarity between the hidden states entering consecutive
/// layers. At residual-stream granularity the state entering layer i+1 is
/// exactly layer i's output, so the numbers coincide with the io profile;
/// the two views are kept as separate operations because they answer
/// different questions (within-layer change vs boundary drift).
pub fn adjacent_similarity_profile(
    model: &ToyModel,
    sequences: &[Vec<usize>],
) -> Result<SimilarityProfile> {
    io_similarity_profile(model, sequences)
}

// ── Static skip sweep ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub k: usize,
    pub accuracy: f64,
    /// The decidable layers skipped at this k, in skip order.
    pub skipped_layers: Vec<usize>,
}

/// CSV rows `k,accuracy`.
pub fn sweep_to_csv(curve: &[SweepPoint]) -> String {
    let mut out = String::from("k,accuracy\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.k, p.accuracy));
    }
    out
}

/// Decidable layers (2..=L-1) ordered by descending mean io-similarity —
/// the static heuristic's "most redundant first" ranking. Ties break
/// toward the earlier layer for determinism.
pub fn skip_order(profile: &SimilarityProfile, n_layers: usize) -> Result<Vec<usize>> {
    if profile.n_layers() != n_layers {
        return Err(DashError::DimensionMismatch(format!(
            "profile covers {} layers, model has {n_layers}",
            profile.n_layers()
        )));
    }
    let mut order: Vec<usize> = (2..n_layers).collect();
    order.sort_by(|&a, &b| {
        profile.mean[b - 1]
            .total_cmp(&profile.mean[a - 1])
            .then(a.cmp(&b))
    });
    Ok(order)
}

/// The paper's naive static baseline: skip the k most input-output-similar
/// decidable layers with **no** compensation (identity scales), for
/// k = 0..=max_skips, and record task accuracy at each k.
pub fn static_skip_sweep(
    model: &ToyModel,
    eval_set: &[Episode],
    kind: TaskKind,
    max_skips: usize,
) -> Result<Vec<SweepPoint>> {
    let l = model.config.n_layers;
    if max_skips > l - 2 {
        return Err(DashError::InvalidArgument(format!(
            "max_skips {max_skips} exceeds the {} decidable layers",
            l - 2
        )));
    }
    if eval_set.is_empty() {
        return Err(DashError::InvalidArgument("empty evaluation set".into()));
    }
    let sequences: Vec<Vec<usize>> = eval_set.iter().map(|e| e.tokens.clone()).collect();
    let profile = io_similarity_profile(model, &sequences)?;
    let order = skip_order(&profile, l)?;
    let identity = ScaleTable::identity(l);

    let mut curve = Vec::with_capacity(max_skips + 1);
    for k in 0..=max_skips {
        let mut path = full_path(l);
        for &layer in &order[..k] {
            path[layer - 1] = LayerState::Skip;
        }
        let accuracy = sweep_accuracy(model, &path, &identity, eval_set, kind)?;
        curve.push(SweepPoint {
            k,
            accuracy,
            skipped_layers: order[..k].to_vec(),
        });
    }
    Ok(curve)
}

fn sweep_accuracy(
    model: &ToyModel,
    path: &[LayerState],
    scales: &ScaleTable,
    eval_set: &[Episode],
    kind: TaskKind,
) -> Result<f64> {
    match kind {
        TaskKind::KeyValueLookup => {
            let mut correct = 0usize;
            for ep in eval_set {
                let logits = model.forward_with_path(&ep.tokens, path, scales)?;
                if argmax(logits.row(ep.answer_pos)) == ep.gold {
                    correct += 1;
                }
            }
            Ok(correct as f64 / eval_set.len() as f64)
        }
        TaskKind::MarkovLm => {
            // Captured log-likelihood fraction clamped to [0, 1] so the
            // curve shares the accuracy scale.
            let mut nll_sum = 0.0;
            for ep in eval_set {
                nll_sum += model.perplexity(path, &ep.tokens, scales)?.ln();
            }
            let ln_v = (crate::task::VOCAB_SIZE as f64).ln();
            let frac = (ln_v - nll_sum / eval_set.len() as f64)
                / (ln_v - crate::task::markov_entropy_nats());
            Ok(frac.clamp(0.0, 1.0))
        }
    }
}
