//! Model and training hyper-parameters, variants and presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaitsError};

/// Model family member. The ablation variants share the SAITS building
/// blocks and differ in how representations are wired together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two DMSA blocks joined by the learned weighted combination.
    Saits,
    /// `Saits` without diagonal attention masks.
    SaitsNoDiag,
    /// First DMSA block only.
    #[serde(rename = "saits_1block")]
    Saits1Block,
    /// Two blocks; the second block's representation is final.
    SaitsR2,
    /// Two blocks combined by a plain sum.
    SaitsResidual,
    /// Three blocks combined by a plain sum.
    #[serde(rename = "saits_3residual")]
    Saits3Residual,
    /// Three blocks with two cascaded weighted combinations.
    #[serde(rename = "saits_3cascade")]
    Saits3Cascade,
    /// Encoder-only Transformer trained with MIT + ORT.
    Transformer,
    /// Encoder-only Transformer trained with reconstruction only.
    TransformerOrtOnly,
    /// Encoder-only Transformer trained with masked imputation only.
    TransformerMitOnly,
}

/// Which loss terms drive training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Joint,
    OrtOnly,
    MitOnly,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Saits,
        Variant::SaitsNoDiag,
        Variant::Saits1Block,
        Variant::SaitsR2,
        Variant::SaitsResidual,
        Variant::Saits3Residual,
        Variant::Saits3Cascade,
        Variant::Transformer,
        Variant::TransformerOrtOnly,
        Variant::TransformerMitOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Saits => "saits",
            Variant::SaitsNoDiag => "saits_no_diag",
            Variant::Saits1Block => "saits_1block",
            Variant::SaitsR2 => "saits_r2",
            Variant::SaitsResidual => "saits_residual",
            Variant::Saits3Residual => "saits_3residual",
            Variant::Saits3Cascade => "saits_3cascade",
            Variant::Transformer => "transformer",
            Variant::TransformerOrtOnly => "transformer_ort_only",
            Variant::TransformerMitOnly => "transformer_mit_only",
        }
    }

    pub fn diagonal_mask(self) -> bool {
        !matches!(
            self,
            Variant::SaitsNoDiag
                | Variant::Transformer
                | Variant::TransformerOrtOnly
                | Variant::TransformerMitOnly
        )
    }

    pub fn objective(self) -> Objective {
        match self {
            Variant::TransformerOrtOnly => Objective::OrtOnly,
            Variant::TransformerMitOnly => Objective::MitOnly,
            _ => Objective::Joint,
        }
    }

    pub fn is_transformer(self) -> bool {
        matches!(
            self,
            Variant::Transformer | Variant::TransformerOrtOnly | Variant::TransformerMitOnly
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = SaitsError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        if key == "saits_base" {
            return Ok(Variant::Saits);
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| SaitsError::UnknownVariant(s.to_string()))
    }
}

/// Architecture and objective hyper-parameters of one model instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaitsConfig {
    /// Time steps per sample (T).
    pub n_steps: usize,
    /// Features per step (D).
    pub n_features: usize,
    /// Encoder layers per block (N).
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub dropout: f64,
    /// Weight of the masked-imputation loss (λ).
    pub mit_weight: f64,
    /// Fraction of observed values artificially masked per batch.
    pub mit_rate: f64,
    pub variant: Variant,
}

impl SaitsConfig {
    /// The fixed SAITS-base hyper-parameters.
    pub fn saits_base(n_steps: usize, n_features: usize) -> Self {
        Self {
            n_steps,
            n_features,
            n_layers: 2,
            d_model: 256,
            d_ffn: 128,
            n_heads: 4,
            d_k: 64,
            d_v: 64,
            dropout: 0.1,
            mit_weight: 1.0,
            mit_rate: 0.2,
            variant: Variant::Saits,
        }
    }

    /// Desk-scale configuration used by the examples and acceptance runs.
    pub fn tiny(n_steps: usize, n_features: usize) -> Self {
        Self {
            n_layers: 1,
            d_model: 32,
            d_ffn: 64,
            n_heads: 2,
            d_k: 16,
            d_v: 16,
            dropout: 0.0,
            ..Self::saits_base(n_steps, n_features)
        }
    }

    /// Smallest configuration used for finite-difference checks.
    pub fn gradcheck(n_steps: usize, n_features: usize) -> Self {
        Self {
            n_layers: 1,
            d_model: 8,
            d_ffn: 8,
            n_heads: 2,
            d_k: 4,
            d_v: 4,
            dropout: 0.0,
            ..Self::saits_base(n_steps, n_features)
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn diagonal_mask_enabled(&self) -> bool {
        self.variant.diagonal_mask()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_steps", self.n_steps),
            ("n_features", self.n_features),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(SaitsError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(SaitsError::Config(format!(
                "d_model must be even for the positional encoding, got {}",
                self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SaitsError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.mit_rate > 0.0 && self.mit_rate < 1.0) {
            return Err(SaitsError::Config(format!(
                "mit_rate must lie in (0, 1), got {}",
                self.mit_rate
            )));
        }
        if !(self.mit_weight >= 0.0 && self.mit_weight.is_finite()) {
            return Err(SaitsError::Config(format!(
                "mit_weight must be finite and non-negative, got {}",
                self.mit_weight
            )));
        }
        if self.diagonal_mask_enabled() && self.n_steps < 2 {
            return Err(SaitsError::DegenerateSequence(self.n_steps));
        }
        Ok(())
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without strict improvement of validation imputation MAE
    /// before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip. Off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            patience: 30,
            max_epochs: 10_000,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SaitsError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(SaitsError::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(SaitsError::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert_eq!("saits_base".parse::<Variant>().unwrap(), Variant::Saits);
        assert!("lstm".parse::<Variant>().is_err());
    }

    #[test]
    fn diag_mask_follows_variant() {
        assert!(Variant::Saits.diagonal_mask());
        assert!(Variant::Saits3Cascade.diagonal_mask());
        assert!(!Variant::SaitsNoDiag.diagonal_mask());
        assert!(!Variant::Transformer.diagonal_mask());
    }

    #[test]
    fn validation() {
        let base = SaitsConfig::saits_base(48, 37);
        assert!(base.validate().is_ok());
        assert!(SaitsConfig { d_model: 7, ..base.clone() }.validate().is_err());
        assert!(SaitsConfig { mit_rate: 1.0, ..base.clone() }.validate().is_err());
        assert!(SaitsConfig { dropout: 1.0, ..base.clone() }.validate().is_err());
        assert!(matches!(
            SaitsConfig { n_steps: 1, ..base.clone() }.validate(),
            Err(SaitsError::DegenerateSequence(1))
        ));
        let transformer = SaitsConfig { n_steps: 1, ..base }.with_variant(Variant::Transformer);
        assert!(transformer.validate().is_ok());
    }
}
