use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Baseline, ModelConfig};
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::{Error, Result};

/// Named parameter tensors in a fixed registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Total scalar count of every parameter whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.names.iter().zip(&self.tensors).filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    /// Places every parameter on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams {
        let vars = self.tensors.iter().map(|t| graph.param(t.clone())).collect();
        BoundParams { vars, index: self.index.clone() }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters placed on a graph, addressable by name.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_var(&self, name: &str) -> Result<Var> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    /// Vars in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn linear<T: Float>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    Tensor::randn(&[fan_in, fan_out], (fan_in as f64).powf(-0.5), rng)
}

fn attention_block<T: Float>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for w in ["q", "k", "v", "o"] {
        p.insert(format!("{prefix}.{w}"), linear(rng, d, d));
    }
}

/// Parameter initialisation: fan-in scaled normals, unit norm gains, and a
/// delete gate that starts near "keep everything".
pub fn init_params<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let ones = || Tensor::<T>::full(&[d], T::one());
    let mut p = ParamStore::default();
    p.insert("shared.embed", Tensor::randn(&[cfg.vocab_size, d], 1.0, &mut rng));
    p.insert("encoder.rel_bias", Tensor::randn(&[cfg.n_buckets, cfg.n_heads], (d as f64).powf(-0.5), &mut rng));
    for l in 0..cfg.encoder_layers {
        let pre = format!("encoder.{l}");
        p.insert(format!("{pre}.attn_norm"), ones());
        attention_block(&mut p, &mut rng, &format!("{pre}.attn"), d);
        p.insert(format!("{pre}.ff_norm"), ones());
        p.insert(format!("{pre}.wi"), linear(&mut rng, d, cfg.d_ff));
        p.insert(format!("{pre}.wo"), linear(&mut rng, cfg.d_ff, d));
    }
    p.insert("encoder.final_norm", ones());
    p.insert("decoder.rel_bias", Tensor::randn(&[cfg.n_buckets, cfg.n_heads], (d as f64).powf(-0.5), &mut rng));
    for l in 0..cfg.decoder_layers {
        let pre = format!("decoder.{l}");
        p.insert(format!("{pre}.self_norm"), ones());
        attention_block(&mut p, &mut rng, &format!("{pre}.self"), d);
        p.insert(format!("{pre}.cross_norm"), ones());
        attention_block(&mut p, &mut rng, &format!("{pre}.cross"), d);
        p.insert(format!("{pre}.ff_norm"), ones());
        p.insert(format!("{pre}.wi"), linear(&mut rng, d, cfg.d_ff));
        p.insert(format!("{pre}.wo"), linear(&mut rng, cfg.d_ff, d));
    }
    p.insert("decoder.final_norm", ones());
    p.insert("lm_head", linear(&mut rng, d, cfg.vocab_size));
    match cfg.baseline {
        Baseline::None => {
            p.insert("gate.norm", ones());
            p.insert("gate.w", Tensor::zeros(&[d, 1]));
            p.insert("gate.b", Tensor::scalar(T::of(cfg.gate_bias_init)));
        }
        Baseline::Bp { .. } => {
            p.insert("bp.w1", linear(&mut rng, d, d));
            p.insert("bp.b1", Tensor::zeros(&[d]));
            p.insert("bp.w2", linear(&mut rng, d, 1));
            p.insert("bp.b2", Tensor::zeros(&[1]));
        }
        Baseline::Cp { stride } => {
            p.insert("cp.w", linear(&mut rng, stride * d, d));
            p.insert("cp.b", Tensor::zeros(&[d]));
        }
        Baseline::Random { .. } | Baseline::Fixed { .. } => {}
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_adds_two_d_plus_one_parameters() {
        let cfg = ModelConfig::tiny(300);
        let p = init_params::<f64>(&cfg, 0).unwrap();
        assert_eq!(p.count_prefix("gate."), 2 * cfg.d_model + 1);
        let mut plain = cfg.clone();
        plain.baseline = Baseline::Random { rate: 0.0 };
        let q = init_params::<f64>(&plain, 0).unwrap();
        assert_eq!(p.num_scalars() - q.num_scalars(), 2 * cfg.d_model + 1);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny(300);
        let a = init_params::<f32>(&cfg, 7).unwrap();
        let b = init_params::<f32>(&cfg, 7).unwrap();
        assert_eq!(a.tensors(), b.tensors());
    }
}
