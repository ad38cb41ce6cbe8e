//! T5-style byte-level encoder-decoder with the delete gate.

pub mod checkpoint;
mod config;
mod deletion;
mod gate;
mod params;
mod position;
mod transformer;

use std::fs;
use std::path::Path;

pub use config::{Baseline, DeletionMode, ModelConfig};
pub use deletion::{compact_rows, hard_delete, kept_indices, Compacted};
pub use gate::{delete_gate, gumbel_noise, sample_uniform_pairs, GateOutput};
pub use params::{init_params, BoundParams, ParamStore};
pub use position::{bucket_matrix, relative_position_bias, relative_position_bucket};
pub use transformer::{
    additive_mask, decoder_forward, encoder_forward, Batch, DecoderOutput, EncoderOutput, EncoderStats,
    ForwardOptions, MASK_VALUE,
};

use crate::numerics::{Float, Graph, Var};
use crate::{Error, Result};

/// One recorded forward pass.
pub struct Forward {
    pub enc: EncoderOutput,
    pub dec: DecoderOutput,
    /// Mean token cross-entropy over the batch targets.
    pub ce: Var,
}

/// Encoder, decoder and cross-entropy on a fresh set of bound parameters.
pub fn forward<T: Float>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    opts: &ForwardOptions,
) -> Result<Forward> {
    let enc = encoder_forward(g, p, cfg, batch, opts)?;
    let dec = decoder_forward(g, p, cfg, batch, &enc, opts.collect_scores)?;
    let ce = g.cross_entropy(dec.logits, &batch.dec_targets)?;
    Ok(Forward { enc, dec, ce })
}

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    /// Writes `model.bin` and `config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let named: Vec<(&str, _)> = self.params.names().iter().map(String::as_str).zip(self.params.tensors()).collect();
        checkpoint::save(&dir.join("model.bin"), &named)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    /// Reads a directory written by [`save`](Self::save); every expected tensor must be present with its shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        let mut params = init_params::<T>(&cfg, 0)?;
        let stored = checkpoint::load::<T>(&dir.join("model.bin"))?;
        params.load_from(stored)?;
        Ok(Self { cfg, params })
    }

    /// Inference pass with no tape reuse.
    pub fn run(&self, batch: &Batch, opts: &ForwardOptions) -> Result<(Graph<T>, Forward)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let f = forward(&mut g, &p, &self.cfg, batch, opts)?;
        Ok((g, f))
    }
}

impl<T: Float> ParamStore<T> {
    /// Replaces every parameter with the stored tensor of the same name.
    pub fn load_from(&mut self, stored: Vec<(String, crate::numerics::Tensor<T>)>) -> Result<()> {
        let mut seen = 0;
        for (name, t) in stored {
            let Some(slot) = self.get_mut(&name) else { continue };
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?} does not match {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            seen += 1;
        }
        if seen != self.len() {
            return Err(Error::Checkpoint(format!("checkpoint holds {seen} of {} parameters", self.len())));
        }
        Ok(())
    }
}
