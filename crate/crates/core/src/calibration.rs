//! Offline calibration of per-layer skip-compensation scales.
//!
//! For each layer i the scale is the mean, over calibration tokens, of the
//! ratio ||Y_t|| / ||X_t|| between the layer's output and input token norms
//! under a full-precision pass:
//!
//!   scale_i = (sum_j sum_t ||Y_jt|| / ||X_jt||) / (sum_j |T_j|)
//!
//! A skipped layer then emits `scale_i * input`, preserving the typical
//! magnitude the next layer expects.

use crate::error::{DashError, Result};
use crate::model::ToyModel;
use crate::numerics::{l2_norm, Matrix};
use crate::task::{Episode, TaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CALIB_SEQUENCES: usize = 128;
pub const DEFAULT_CALIB_SEED: u64 = 1001;

/// Per-layer compensation scales plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTable {
    /// scales[i] compensates layer i+1 (1-based layers).
    pub scales: Vec<f64>,
    /// Number of calibration sequences the table was computed from.
    pub calib_sequences: usize,
    /// Tokens dropped because their input norm was exactly zero.
    pub skipped_tokens: usize,
    /// Hash of the model config the table belongs to.
    pub fingerprint: String,
}

impl ScaleTable {
    /// All-ones table (no compensation); the neutral element for tests and
    /// full-precision training.
    pub fn identity(n_layers: usize) -> Self {
        Self {
            scales: vec![1.0; n_layers],
            calib_sequences: 0,
            skipped_tokens: 0,
            fingerprint: String::new(),
        }
    }

    /// Compensation scale for a 1-based layer index.
    pub fn scale(&self, layer_index: usize) -> Result<f64> {
        if layer_index == 0 || layer_index > self.scales.len() {
            return Err(DashError::LayerIndexOutOfRange {
                index: layer_index,
                layers: self.scales.len(),
            });
        }
        Ok(self.scales[layer_index - 1])
    }

    pub fn n_layers(&self) -> usize {
        self.scales.len()
    }
}

/// Token-norm ratio accumulation for one layer on one sequence.
/// Returns (ratio sum, tokens counted, tokens skipped for zero input norm).
fn accumulate_layer_ratios(x: &Matrix, y: &Matrix) -> (f64, usize, usize) {
    let mut sum = 0.0;
    let mut counted = 0;
    let mut skipped = 0;
    for t in 0..x.rows {
        let nx = l2_norm(x.row(t));
        if nx == 0.0 {
            skipped += 1;
            continue;
        }
        sum += l2_norm(y.row(t)) / nx;
        counted += 1;
    }
    (sum, counted, skipped)
}

/// Deterministic calibration set drawn from the task distribution.
pub fn calibration_episodes(task: &TaskSpec, n: usize, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| task.sample_episode(&mut rng)).collect()
}

/// Run the full-precision model over the calibration set and average the
/// per-token output/input norm ratios of every layer.
pub fn compute_scale_table(model: &ToyModel, episodes: &[Episode]) -> Result<ScaleTable> {
    if episodes.is_empty() {
        return Err(DashError::Calibration(
            "calibration needs at least one sequence".into(),
        ));
    }
    let l = model.config.n_layers;
    let mut sums = vec![0.0; l];
    let mut counts = vec![0usize; l];
    let mut skipped_total = 0usize;
    for ep in episodes {
        let trace = model.forward_trace_full(&ep.tokens)?;
        for layer in 0..l {
            let (s, c, skipped) =
                accumulate_layer_ratios(&trace.boundaries[layer], &trace.boundaries[layer + 1]);
            sums[layer] += s;
            counts[layer] += c;
            skipped_total += skipped;
        }
    }
    let mut scales = Vec::with_capacity(l);
    for layer in 0..l {
        if counts[layer] == 0 {
            return Err(DashError::Calibration(format!(
                "all calibration tokens for layer {} had zero input norm",
                layer + 1
            )));
        }
        let s = sums[layer] / counts[layer] as f64;
        if !s.is_finite() || s <= 0.0 {
            return Err(DashError::Calibration(format!(
                "layer {} produced degenerate scale {s}",
                layer + 1
            )));
        }
        scales.push(s);
    }
    Ok(ScaleTable {
        scales,
        calib_sequences: episodes.len(),
        skipped_tokens: skipped_total,
        fingerprint: crate::checkpoint::config_hash(&model.config),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::init_params;

    fn tiny_model(seed: u64) -> ToyModel {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: crate::task::VOCAB_SIZE,
            max_seq_len: crate::task::LOOKUP_SEQ_LEN,
            seed,
        };
        ToyModel::from_params(cfg.clone(), init_params(&cfg, seed)).unwrap()
    }

    #[test]
    fn ratio_accumulation_hand_case() {
        // Token norms: x rows (1, 2), y rows (2, 2) -> ratios 2 and 1.
        let x = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let y = Matrix::new(2, 2, vec![2.0, 0.0, 2.0, 0.0]).unwrap();
        let (sum, counted, skipped) = accumulate_layer_ratios(&x, &y);
        assert_eq!(counted, 2);
        assert_eq!(skipped, 0);
        assert!((sum - 3.0).abs() < 1e-12); // mean over the two tokens = 1.5
    }

    #[test]
    fn zero_norm_tokens_are_skipped_not_poisoning() {
        let x = Matrix::new(2, 2, vec![0.0, 0.0, 0.0, 2.0]).unwrap();
        let y = Matrix::new(2, 2, vec![5.0, 0.0, 4.0, 0.0]).unwrap();
        let (sum, counted, skipped) = accumulate_layer_ratios(&x, &y);
        assert_eq!((counted, skipped), (1, 1));
        assert!((sum - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scale_table_is_deterministic_and_positive() {
        let model = tiny_model(3);
        let task = TaskSpec::lookup_default();
        let eps = calibration_episodes(&task, 16, DEFAULT_CALIB_SEED);
        let a = compute_scale_table(&model, &eps).unwrap();
        let b = compute_scale_table(&model, &eps).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_layers(), 3);
        assert_eq!(a.calib_sequences, 16);
        for &s in &a.scales {
            assert!(s.is_finite() && s > 0.0);
        }
        assert!(!a.fingerprint.is_empty());
    }

    #[test]
    fn scale_lookup_is_one_based_and_bounded() {
        let t = ScaleTable::identity(3);
        assert_eq!(t.scale(1).unwrap(), 1.0);
        assert_eq!(t.scale(3).unwrap(), 1.0);
        assert!(t.scale(0).is_err());
        assert!(t.scale(4).is_err());
    }

    #[test]
    fn all_zero_model_fails_calibration() {
        // Zero embeddings give a zero residual stream: every token has zero
        // input norm at layer 1, which must be a hard error.
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: crate::task::VOCAB_SIZE,
            max_seq_len: crate::task::LOOKUP_SEQ_LEN,
            seed: 0,
        };
        let mut params = init_params(&cfg, 0);
        for v in params.tok_emb.data.iter_mut() {
            *v = 0.0;
        }
        for v in params.pos_emb.data.iter_mut() {
            *v = 0.0;
        }
        let model = ToyModel::from_params(cfg, params).unwrap();
        let task = TaskSpec::lookup_default();
        let eps = calibration_episodes(&task, 4, 9);
        assert!(matches!(
            compute_scale_table(&model, &eps),
            Err(DashError::Calibration(_))
        ));
    }

    #[test]
    fn empty_calibration_set_is_error() {
        let model = tiny_model(3);
        assert!(compute_scale_table(&model, &[]).is_err());
    }
}
