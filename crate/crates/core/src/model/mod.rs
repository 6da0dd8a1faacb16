//! Encoder, Sequence Reconstructor and their parameters.

mod decoder;
mod encoder;
mod params;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use decoder::{greedy_unshuffle, pointer_scores, DecoderOut};
pub use encoder::{EncoderOut, PackedRows};
pub use params::{ParamStore, Parameter};

use crate::config::Config;
use crate::error::{Result, SlmError};
use crate::rng;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub max_sentences: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn from_config(c: &Config) -> Self {
        ModelConfig {
            vocab_size: c.vocab_size,
            hidden: c.hidden,
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            heads: c.heads,
            ffn: c.ffn,
            max_len: c.max_len,
            max_sentences: c.max_sentences,
            dropout: c.dropout,
            attn_dropout: c.attn_dropout,
            layer_norm_eps: c.layer_norm_eps,
            init_std: c.init_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(SlmError::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ffn == 0 {
            return Err(SlmError::Config("vocab_size, max_len and ffn must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub attn: AttnBlock,
    pub ln1: Norm,
    pub ffn: Ffn,
    pub ln2: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub self_attn: AttnBlock,
    pub ln1: Norm,
    pub cross_attn: AttnBlock,
    pub ln2: Norm,
    pub ffn: Ffn,
    pub ln3: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub token: usize,
    pub position: usize,
    pub sentence: usize,
    pub segment: usize,
    pub emb_ln: Norm,
    pub encoder: Vec<EncoderLayer>,
    pub mlm_bias: usize,
    pub decoder: Vec<DecoderLayer>,
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: R,
    std: f64,
}

/// Normal(0, std) truncated at two standard deviations.
pub(crate) fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break (z * std) as f32;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl<R: Rng> Builder<'_, R> {
    fn trunc_normal(&mut self, shape: &[usize]) -> Tensor<f32> {
        trunc_normal(shape, self.std, &mut self.rng)
    }

    fn weight(&mut self, name: String, shape: &[usize]) -> usize {
        let t = self.trunc_normal(shape);
        self.store.push(name, t, true)
    }

    fn linear(&mut self, name: &str, input: usize, output: usize, bias: bool) -> Linear {
        let w = self.weight(format!("{name}.weight"), &[input, output]);
        let b = bias.then(|| self.store.push(format!("{name}.bias"), Tensor::zeros(&[output]), false));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gamma: self
                .store
                .push(format!("{name}.gamma"), Tensor::filled(&[width], 1.0), false),
            beta: self.store.push(format!("{name}.beta"), Tensor::zeros(&[width]), false),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnBlock {
        AttnBlock {
            q: self.linear(&format!("{name}.q"), d, d, true),
            // a bias on keys shifts every score of a query equally and
            // cancels in the softmax
            k: self.linear(&format!("{name}.k"), d, d, false),
            v: self.linear(&format!("{name}.v"), d, d, true),
            o: self.linear(&format!("{name}.o"), d, d, true),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, inner: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, inner, true),
            down: self.linear(&format!("{name}.down"), inner, d, true),
        }
    }
}

fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: impl Rng) -> Layout {
    let d = cfg.hidden;
    let mut b = Builder {
        store,
        rng,
        std: cfg.init_std,
    };
    let token = b.weight("emb.token".into(), &[cfg.vocab_size, d]);
    let position = b.weight("emb.position".into(), &[cfg.max_len, d]);
    let sentence = b.weight("emb.sentence".into(), &[cfg.max_sentences + 1, d]);
    let segment = b.weight("emb.segment".into(), &[2, d]);
    let emb_ln = b.norm("emb.ln", d);
    let encoder = (0..cfg.enc_layers)
        .map(|l| EncoderLayer {
            attn: b.attn(&format!("enc.{l}.attn"), d),
            ln1: b.norm(&format!("enc.{l}.ln1"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, cfg.ffn),
            ln2: b.norm(&format!("enc.{l}.ln2"), d),
        })
        .collect();
    let mlm_bias = b.store.push("mlm.bias".into(), Tensor::zeros(&[cfg.vocab_size]), false);
    let decoder = (0..cfg.dec_layers)
        .map(|l| DecoderLayer {
            self_attn: b.attn(&format!("dec.{l}.self"), d),
            ln1: b.norm(&format!("dec.{l}.ln1"), d),
            cross_attn: b.attn(&format!("dec.{l}.cross"), d),
            ln2: b.norm(&format!("dec.{l}.ln2"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, cfg.ffn),
            ln3: b.norm(&format!("dec.{l}.ln3"), d),
        })
        .collect();
    Layout {
        token,
        position,
        sentence,
        segment,
        emb_ln,
        encoder,
        mlm_bias,
        decoder,
    }
}

/// Encoder plus reconstructor parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh weights drawn from the `INIT` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let layout = build(&config, &mut params, rng::stream(seed, rng::INIT, 0));
        Ok(Model { config, params, layout })
    }

    /// Rebuilds the architecture and takes every tensor from `params` by
    /// name. Missing or mis-shaped tensors are reported together.
    pub fn from_params(config: ModelConfig, mut loaded: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        let mut missing = Vec::new();
        for p in model.params.iter_mut() {
            match loaded.take(&p.name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t,
                Some(t) => {
                    return Err(SlmError::format(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => missing.push(p.name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(SlmError::MissingTensors(missing));
        }
        Ok(model)
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.cast())).collect()
    }

    /// Parameters of the reconstructor (names starting with `dec.`).
    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("dec.")
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !Self::is_decoder_param(&p.name))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn decoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| Self::is_decoder_param(&p.name))
            .map(|p| p.value.numel())
            .sum()
    }
}

/// A model whose parameters are bound into one graph.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub model: &'a Model,
    pub vars: &'a [Var],
}

impl<'a> Net<'a> {
    pub fn new(model: &'a Model, vars: &'a [Var]) -> Result<Self> {
        if vars.len() != model.params.len() {
            return Err(SlmError::contract(format!(
                "{} vars bound for {} parameters",
                vars.len(),
                model.params.len()
            )));
        }
        Ok(Net { model, vars })
    }

    pub(crate) fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub(crate) fn linear<T: Real>(&self, g: &mut Graph<T>, x: Var, l: Linear) -> Result<Var> {
        let y = g.matmul(x, self.var(l.w))?;
        match l.b {
            Some(b) => g.add_bias(y, self.var(b)),
            None => Ok(y),
        }
    }

    pub(crate) fn norm<T: Real>(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Result<Var> {
        g.layer_norm(x, self.var(n.gamma), self.var(n.beta), self.model.config.layer_norm_eps)
    }

    pub(crate) fn ffn<T: Real>(&self, g: &mut Graph<T>, x: Var, f: Ffn) -> Result<Var> {
        let h = self.linear(g, x, f.up)?;
        let h = g.gelu(h)?;
        self.linear(g, h, f.down)
    }

    pub(crate) fn layout(&self) -> &'a Layout {
        &self.model.layout
    }
}

#[cfg(test)]
mod tests;
