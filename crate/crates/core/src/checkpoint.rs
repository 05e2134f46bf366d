//! Versioned, byte-stable persistence for everything a run produces:
//! model weights, calibration scale table, and scorer parameters, in one
//! human-readable JSON document tagged `dash-ckpt-v1`. Loading validates
//! the format tag, the config hash, parameter shapes, and section
//! fingerprints before anything touches the model.

use crate::calibration::ScaleTable;
use crate::error::{DashError, Result};
use crate::model::{ModelConfig, ModelParams, ToyModel};
use crate::policy::ScorerParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "dash-ckpt-v1";
pub const SCORER_FORMAT: &str = "scorer-v1";

/// Stable hex fingerprint of a model configuration (first 16 hex chars of
/// the SHA-256 of its canonical JSON form). Stamped into every output file
/// for provenance.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("model config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut hex = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerSection {
    pub format: String,
    pub params: ScorerParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub config_hash: String,
    pub seed: u64,
    pub params: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_table: Option<ScaleTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerSection>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, seed: u64, params: ModelParams) -> Self {
        let config_hash = config_hash(&config);
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config,
            config_hash,
            seed,
            params,
            scale_table: None,
            scorer: None,
        }
    }

    pub fn with_scale_table(mut self, table: ScaleTable) -> Self {
        self.scale_table = Some(table);
        self
    }

    pub fn with_scorer(mut self, params: ScorerParams) -> Self {
        self.scorer = Some(ScorerSection {
            format: SCORER_FORMAT.to_string(),
            params,
        });
        self
    }

    /// Serialize to the canonical document form. Field order is fixed by
    /// the struct definitions and floats round-trip exactly, so the same
    /// data always yields the same bytes.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| DashError::Checkpoint(format!("serialize: {e}")))
    }

    /// Parse and validate a checkpoint document.
    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| DashError::Checkpoint(format!("parse: {e}")))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        std::fs::write(path, json)
            .map_err(|e| DashError::Checkpoint(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DashError::Checkpoint(format!("read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(DashError::Checkpoint(format!(
                "unsupported format tag '{}', expected '{CHECKPOINT_FORMAT}'",
                self.format
            )));
        }
        self.config.validate()?;
        let expected = config_hash(&self.config);
        if self.config_hash != expected {
            return Err(DashError::Checkpoint(format!(
                "config hash mismatch: stored {} vs recomputed {expected}",
                self.config_hash
            )));
        }
        check_param_shapes(&self.config, &self.params)?;
        if let Some(table) = &self.scale_table {
            if table.scales.len() != self.config.n_layers {
                return Err(DashError::Checkpoint(format!(
                    "scale table has {} entries for {} layers",
                    table.scales.len(),
                    self.config.n_layers
                )));
            }
            if table.fingerprint != expected {
                return Err(DashError::Checkpoint(format!(
                    "scale table fingerprint {} does not match config hash {expected}",
                    table.fingerprint
                )));
            }
            if table.scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
                return Err(DashError::Checkpoint(
                    "scale table contains non-positive or non-finite entries".into(),
                ));
            }
        }
        if let Some(section) = &self.scorer {
            if section.format != SCORER_FORMAT {
                return Err(DashError::Checkpoint(format!(
                    "unsupported scorer format tag '{}', expected '{SCORER_FORMAT}'",
                    section.format
                )));
            }
            section.params.validate(&self.config)?;
        }
        Ok(())
    }

    /// Rebuild the runnable model (re-deriving the quantized weight
    /// variants from the stored full-precision parameters).
    pub fn into_model(self) -> Result<ToyModel> {
        ToyModel::from_params(self.config, self.params)
    }
}

/// Reject parameter tensors whose shapes disagree with the config; a model
/// built from them would index out of bounds or silently mis-multiply.
fn check_param_shapes(cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let reference = ModelParams::zeros_like(cfg);
    let same_matrix = |a: &crate::numerics::Matrix, b: &crate::numerics::Matrix| {
        a.rows == b.rows && a.cols == b.cols
    };
    let mut ok = params.layers.len() == cfg.n_layers
        && same_matrix(&params.tok_emb, &reference.tok_emb)
        && same_matrix(&params.pos_emb, &reference.pos_emb)
        && same_matrix(&params.w_unembed, &reference.w_unembed)
        && params.ln_f.gamma.len() == cfg.d_model
        && params.ln_f.beta.len() == cfg.d_model;
    if ok {
        for (layer, r) in params.layers.iter().zip(&reference.layers) {
            ok &= same_matrix(&layer.wq, &r.wq)
                && same_matrix(&layer.wk, &r.wk)
                && same_matrix(&layer.wv, &r.wv)
                && same_matrix(&layer.wo, &r.wo)
                && same_matrix(&layer.w_in, &r.w_in)
                && same_matrix(&layer.w_out, &r.w_out)
                && layer.ln1.gamma.len() == cfg.d_model
                && layer.ln1.beta.len() == cfg.d_model
                && layer.ln2.gamma.len() == cfg.d_model
                && layer.ln2.beta.len() == cfg.d_model;
        }
    }
    if !ok {
        return Err(DashError::Checkpoint(
            "parameter shapes do not match the stored config".into(),
        ));
    }
    Ok(())
}
