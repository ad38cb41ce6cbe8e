use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the delete gate acts on the post-gate encoder layers and on cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionMode {
    /// No gate: every token is processed by every layer.
    None,
    /// Gate values are added to attention logits; sequence length is unchanged.
    Soft,
    /// Tokens with `G <= k/2` are physically removed and the batch is repadded.
    Hard,
}

/// Sequence reducer placed after the gate layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Baseline {
    /// The learned delete gate.
    None,
    /// `round(rate · n)` uniformly chosen tokens deleted per sequence.
    Random { rate: f64 },
    /// Final `floor(rate · L)` characters of every word deleted.
    Fixed { rate: f64 },
    /// Gumbel-sigmoid boundary predictor with segment mean pooling.
    Bp {
        prior_p: f64,
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default = "default_prior_weight")]
        prior_weight: f64,
    },
    /// Strided 1-D convolution with kernel width equal to the stride.
    Cp { stride: usize },
}

fn default_tau() -> f64 {
    0.5
}

fn default_prior_weight() -> f64 {
    1.0
}

impl Baseline {
    pub fn is_gated(&self) -> bool {
        matches!(self, Baseline::None | Baseline::Random { .. } | Baseline::Fixed { .. })
    }
}

fn default_gate_floor() -> f64 {
    -30.0
}
fn default_gate_bias_init() -> f64 {
    -4.0
}
fn default_buckets() -> usize {
    32
}
fn default_max_distance() -> usize {
    128
}
fn default_eps() -> f64 {
    1e-6
}
fn default_mode() -> DeletionMode {
    DeletionMode::Soft
}
fn default_baseline() -> Baseline {
    Baseline::None
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// 1-based index of the encoder layer whose output feeds the gate.
    pub gate_layer: usize,
    /// Gate floor `k` (negative).
    #[serde(default = "default_gate_floor")]
    pub gate_floor: f64,
    pub vocab_size: usize,
    #[serde(default = "default_buckets")]
    pub n_buckets: usize,
    #[serde(default = "default_max_distance")]
    pub max_distance: usize,
    #[serde(default)]
    pub use_gumbel_noise: bool,
    #[serde(default = "default_mode")]
    pub deletion_mode: DeletionMode,
    #[serde(default = "default_baseline")]
    pub baseline: Baseline,
    #[serde(default = "default_gate_bias_init")]
    pub gate_bias_init: f64,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Small configuration used by the diagnostic tasks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            d_ff: 128,
            encoder_layers: 3,
            decoder_layers: 3,
            n_heads: 4,
            d_head: 16,
            gate_layer: 2,
            gate_floor: default_gate_floor(),
            vocab_size,
            n_buckets: default_buckets(),
            max_distance: default_max_distance(),
            use_gumbel_noise: false,
            deletion_mode: DeletionMode::Soft,
            baseline: Baseline::None,
            gate_bias_init: default_gate_bias_init(),
            norm_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 || self.decoder_layers == 0 {
            return bad("widths, vocabulary and decoder depth must be positive".into());
        }
        if self.n_heads * self.d_head != self.d_model {
            return bad(format!("n_heads·d_head = {} must equal d_model = {}", self.n_heads * self.d_head, self.d_model));
        }
        if !(self.gate_floor < 0.0 && self.gate_floor.is_finite()) {
            return bad(format!("gate floor k must be negative, got {}", self.gate_floor));
        }
        if self.gate_layer < 1 || self.gate_layer >= self.encoder_layers {
            return bad(format!(
                "gate layer must satisfy 1 <= l_G < L_E, got l_G={} with L_E={}",
                self.gate_layer, self.encoder_layers
            ));
        }
        if self.n_buckets < 4 || self.max_distance < self.n_buckets / 2 {
            return bad("need n_buckets >= 4 and max_distance >= n_buckets/2".into());
        }
        match self.baseline {
            Baseline::Random { rate } | Baseline::Fixed { rate } if !(0.0..=1.0).contains(&rate) => {
                bad(format!("deletion rate must be in [0,1], got {rate}"))
            }
            Baseline::Bp { prior_p, tau, .. } if !(prior_p > 0.0 && prior_p < 1.0 && tau > 0.0) => {
                bad(format!("boundary predictor needs prior_p in (0,1) and tau > 0, got {prior_p}, {tau}"))
            }
            Baseline::Cp { stride } if stride < 2 => bad(format!("conv pooling stride must be >= 2, got {stride}")),
            _ => Ok(()),
        }
    }
}
