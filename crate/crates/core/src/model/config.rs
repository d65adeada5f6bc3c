use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_len, Activation};

/// One categorical input field of a behavior (item ID first, then side fields).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    /// Table rows, including the reserved padding (0) and unknown (1) rows.
    pub vocab: usize,
}

/// Architecture hyperparameters.
///
/// JSON keys follow the usual symbols: `L` sequence length, `D` behavior
/// width, `D_prime` channel-mixing latent width, `L_prime` latent-interest
/// count of the first layer's sequence mixer, `S` pyramid layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "L")]
    pub max_len: usize,
    #[serde(rename = "D")]
    pub width: usize,
    #[serde(rename = "D_prime")]
    pub feature_rank: usize,
    #[serde(rename = "L_prime")]
    pub behavior_rank: usize,
    #[serde(rename = "S")]
    pub layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    /// Factor mixer weights through the latent widths. When false both
    /// mixers use full-width (dense) hidden layers.
    pub low_rank: bool,
    pub cross_behavior: bool,
    pub cross_feature: bool,
    pub fusion: bool,
    pub pyramid: bool,
    pub ln_eps: f64,
    /// Standard deviation of the embedding initializer.
    pub embed_init_std: f64,
    /// Input fields; empty until bound to a dataset.
    pub fields: Vec<FieldSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_len: 50,
            width: 96,
            feature_rank: 24,
            behavior_rank: 12,
            layers: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            activation: Activation::Gelu,
            low_rank: true,
            cross_behavior: true,
            cross_feature: true,
            fusion: true,
            pyramid: true,
            ln_eps: 1e-5,
            embed_init_std: 0.1,
            fields: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// The small configuration used for end-to-end gradient checks:
    /// L=6, D=8, D'=4, S=2, 20 items plus one 5-value side field.
    pub fn tiny() -> Self {
        ModelConfig {
            max_len: 6,
            width: 8,
            feature_rank: 4,
            behavior_rank: 3,
            layers: 2,
            fields: vec![
                FieldSpec {
                    name: "item".into(),
                    vocab: 22,
                },
                FieldSpec {
                    name: "side".into(),
                    vocab: 7,
                },
            ],
            ..ModelConfig::default()
        }
    }

    /// Plain token-mixing MLP-Mixer: one layer, sequence mixer only.
    pub fn mixer_baseline(&self) -> Self {
        ModelConfig {
            layers: 1,
            cross_feature: false,
            fusion: false,
            pyramid: false,
            ..self.clone()
        }
    }

    pub fn with_fields(mut self, fields: Vec<FieldSpec>) -> Self {
        self.fields = fields;
        self
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    /// Per-field embedding width `d = D / F`.
    pub fn field_dim(&self) -> usize {
        self.width / self.fields.len().max(1)
    }

    /// Number of rankable items (item table rows minus the two reserved rows).
    pub fn num_items(&self) -> usize {
        self.fields.first().map_or(0, |f| f.vocab.saturating_sub(2))
    }

    /// Sequence length seen by each mixer layer.
    pub fn scale_lengths(&self) -> Vec<usize> {
        let mut lengths = Vec::with_capacity(self.layers);
        let mut len = self.max_len;
        for s in 0..self.layers {
            lengths.push(len);
            if self.pyramid && s + 1 < self.layers {
                len = conv_output_len(len, self.kernel, self.stride, self.padding).unwrap_or(0);
            }
        }
        lengths
    }

    /// Hidden width of the sequence mixer at a layer with sequence length `len`.
    ///
    /// `L_prime` applies at full length and shrinks in proportion to the
    /// layer length (rounded up).
    pub fn behavior_latent(&self, len: usize) -> usize {
        if self.low_rank {
            (self.behavior_rank * len).div_ceil(self.max_len).max(1)
        } else {
            len
        }
    }

    pub fn feature_latent(&self) -> usize {
        if self.low_rank {
            self.feature_rank
        } else {
            self.width
        }
    }

    /// Fusion gate is only built when both branches exist.
    pub fn uses_gate(&self) -> bool {
        self.cross_behavior && self.cross_feature && self.fusion
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate_hyper(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.max_len < 1 {
            return bad("L must be positive".into());
        }
        if self.width < 2 {
            return bad(format!("D ({}) must be >= 2", self.width));
        }
        if self.layers < 1 {
            return bad("S must be >= 1".into());
        }
        if self.low_rank {
            if self.feature_rank == 0 || self.feature_rank >= self.width {
                return bad(format!(
                    "D_prime ({}) must satisfy 0 < D_prime < D ({}) with low_rank enabled",
                    self.feature_rank, self.width
                ));
            }
            if self.behavior_rank == 0 || self.behavior_rank >= self.max_len {
                return bad(format!(
                    "L_prime ({}) must satisfy 0 < L_prime < L ({}) with low_rank enabled",
                    self.behavior_rank, self.max_len
                ));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel ({}) must be odd", self.kernel));
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad(format!("ln_eps ({}) must be positive", self.ln_eps));
        }
        if self.pyramid {
            let lengths = self.scale_lengths();
            for (s, &len) in lengths.iter().enumerate() {
                if len < self.kernel {
                    return bad(format!(
                        "layer {} sequence length {len} is below kernel {} (L={}, stride={}, padding={}, S={})",
                        s + 1,
                        self.kernel,
                        self.max_len,
                        self.stride,
                        self.padding,
                        self.layers
                    ));
                }
                if s > 0 && len >= lengths[s - 1] {
                    return bad(format!(
                        "period scaling must shorten the sequence: layer {} has length {len} after {}",
                        s + 1,
                        lengths[s - 1]
                    ));
                }
            }
        }
        if self.low_rank {
            for &len in &self.scale_lengths() {
                if self.behavior_latent(len) >= len {
                    return bad(format!(
                        "sequence-mixer latent width {} is not below layer length {len}; lower L_prime",
                        self.behavior_latent(len)
                    ));
                }
            }
        }
        Ok(())
    }

    /// Full validation, including the field layout.
    pub fn validate(&self) -> Result<()> {
        self.validate_hyper()?;
        if self.fields.is_empty() {
            return Err(Error::Config("model has no input fields".into()));
        }
        if !self.width.is_multiple_of(self.fields.len()) {
            return Err(Error::Config(format!(
                "D ({}) must be divisible by the number of fields ({})",
                self.width,
                self.fields.len()
            )));
        }
        if let Some(f) = self.fields.iter().find(|f| f.vocab < 3) {
            return Err(Error::Config(format!("field `{}` has an empty vocabulary", f.name)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_pyramid_lengths() {
        let cfg = ModelConfig {
            max_len: 48,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.scale_lengths(), vec![48, 24, 12]);
        assert_eq!(ModelConfig::default().scale_lengths(), vec![50, 25, 13]);
        let flat = ModelConfig {
            pyramid: false,
            ..cfg
        };
        assert_eq!(flat.scale_lengths(), vec![48, 48, 48]);
    }

    #[test]
    fn low_rank_widths_must_shrink() {
        let cfg = ModelConfig {
            width: 64,
            feature_rank: 64,
            ..ModelConfig::default()
        };
        let err = cfg.validate_hyper().unwrap_err().to_string();
        assert!(err.contains("D_prime"), "{err}");
        let dense = ModelConfig {
            low_rank: false,
            ..cfg
        };
        dense.validate_hyper().unwrap();
        assert_eq!(dense.feature_latent(), 64);
        assert_eq!(dense.behavior_latent(25), 25);
    }

    #[test]
    fn too_deep_pyramid_is_rejected() {
        let cfg = ModelConfig {
            max_len: 12,
            behavior_rank: 3,
            layers: 4,
            ..ModelConfig::default()
        };
        // 12 -> 6 -> 3 -> 2 < kernel 3
        let err = cfg.validate_hyper().unwrap_err().to_string();
        assert!(err.contains("below kernel"), "{err}");
    }

    #[test]
    fn tiny_config_is_valid() {
        let tiny = ModelConfig::tiny();
        tiny.validate().unwrap();
        assert_eq!(tiny.scale_lengths(), vec![6, 3]);
        assert_eq!(tiny.field_dim(), 4);
        assert_eq!(tiny.num_items(), 20);
        assert_eq!(tiny.behavior_latent(6), 3);
        assert_eq!(tiny.behavior_latent(3), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"L": 10, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let cfg: ModelConfig = serde_json::from_str(r#"{"D": 64, "D_prime": 16}"#).unwrap();
        assert_eq!((cfg.width, cfg.feature_rank, cfg.max_len), (64, 16, 50));
    }
}
