//! Compact causal transformer standing in for the language model.
//!
//! Layer recurrence is post-norm: `e' = LN(e + SA(e))`, then
//! `e'' = LN(e' + FFN(e'))`. Under the partially frozen regime the first
//! `l_frozen` layers are fully frozen and later layers train only `W_q`.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{AttentionBlock, FeedForward, LayerNorm, Linear};
use crate::nn::params::init_weight;
use crate::nn::{Activation, Adam, Graph, ParamId, ParamStore, Segment, Var};
use crate::tokens::{BackboneInput, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub l_frozen: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Zero means "size of the prompt vocabulary".
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 6,
            l_frozen: 4,
            hidden_dim: 128,
            n_heads: 4,
            ffn_dim: 256,
            vocab_size: 0,
            max_seq_len: 128,
            activation: Activation::Gelu,
            lr: 1e-4,
            epochs: 100,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_frozen > self.layers {
            return Err(Error::Config(format!(
                "l_frozen = {} exceeds layer count {}",
                self.l_frozen, self.layers
            )));
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.ffn_dim == 0 || self.max_seq_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("ffn_dim, max_seq_len and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneLayer {
    pub attn: AttentionBlock,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl BackboneLayer {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &Rc<Vec<Segment>>) -> Var {
        let e = self.attn.forward(g, store, x, segments);
        let f = self.ffn.forward(g, store, e);
        let r = g.add(e, f);
        self.ffn_norm.forward(g, store, r)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.attn.ids();
        v.extend(self.ffn.ids());
        v.extend(self.ffn_norm.ids());
        v
    }
}

/// Parameter handles of the backbone inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub vocab: Vocabulary,
    pub embed: ParamId,
    pub projector: Linear,
    pub layers: Vec<BackboneLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSequence {
    /// `(seq_len, hidden_dim)`.
    pub states: Array2<f64>,
}

impl Backbone {
    /// Registers all backbone parameters under `backbone.*`. Everything starts
    /// frozen except the projector; call [`pfa_partition`] to open `W_q`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: BackboneConfig,
        vocab: Vocabulary,
        token_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let vocab_size = if config.vocab_size == 0 { vocab.len() } else { config.vocab_size };
        if vocab_size < vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is smaller than the prompt vocabulary ({})",
                vocab.len()
            )));
        }
        let hd = config.hidden_dim;
        let embed = store.add("backbone.embed", init_weight(rng, 1, vocab_size * hd, 1.0).into_shape_with_order((vocab_size, hd)).expect("size"), false);
        let projector = Linear::new(store, rng, "backbone.proj", token_dim, hd, true, true);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let name = format!("backbone.layer{i}");
            let attn = AttentionBlock::new(store, rng, &format!("{name}.attn"), hd, config.n_heads, true, false);
            let up = Linear::new(store, rng, &format!("{name}.ffn.up"), hd, config.ffn_dim, true, false);
            let down = Linear::new(store, rng, &format!("{name}.ffn.down"), config.ffn_dim, hd, true, false);
            let ffn_norm = LayerNorm::new(store, &format!("{name}.ffn_ln"), hd, false);
            layers.push(BackboneLayer {
                attn,
                ffn: FeedForward {
                    up,
                    down,
                    act: config.activation,
                },
                ffn_norm,
            });
        }
        Ok(Backbone {
            config,
            vocab,
            embed,
            projector,
            layers,
        })
    }

    /// Runs every layer over a batch laid out as row segments.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &Rc<Vec<Segment>>) -> Var {
        self.layers.iter().fold(x, |h, layer| layer.forward(g, store, h, segments))
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn forward(&self, store: &ParamStore, input: &BackboneInput) -> Result<HiddenSequence> {
        Ok(HiddenSequence {
            states: self.forward_trace(store, input)?.pop().expect("input is always traced"),
        })
    }

    /// Hidden states after the input and after every sublayer norm
    /// (attention, then feed-forward) of every layer.
    pub fn forward_trace(&self, store: &ParamStore, input: &BackboneInput) -> Result<Vec<Array2<f64>>> {
        let (len, width) = input.embedded_sequence.dim();
        self.check_len(len)?;
        if width != self.config.hidden_dim {
            return Err(Error::invalid(format!("input width {width} != hidden_dim {}", self.config.hidden_dim)));
        }
        let segments = Rc::new(vec![Segment { start: 0, len }]);
        let mut g = Graph::new();
        let mut h = g.constant(input.embedded_sequence.clone());
        let mut trace = vec![input.embedded_sequence.clone()];
        for layer in &self.layers {
            let e = layer.attn.forward(&mut g, store, h, &segments);
            trace.push(g.value(e).clone());
            let f = layer.ffn.forward(&mut g, store, e);
            let r = g.add(e, f);
            h = layer.ffn_norm.forward(&mut g, store, r);
            trace.push(g.value(h).clone());
        }
        Ok(trace)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.embed];
        v.extend(self.projector.ids());
        for layer in &self.layers {
            v.extend(layer.ids());
        }
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PfaPartition {
    pub frozen: Vec<ParamId>,
    pub trainable: Vec<ParamId>,
}

/// Freezes every backbone parameter except the projector and the query
/// matrices of layers `l_frozen + 1 ..= L`, and records the new config.
pub fn pfa_partition(store: &mut ParamStore, backbone: &mut Backbone, l_frozen: usize) -> Result<PfaPartition> {
    if l_frozen > backbone.layers.len() {
        return Err(Error::invalid(format!(
            "l_frozen {l_frozen} exceeds {} layers",
            backbone.layers.len()
        )));
    }
    backbone.config.l_frozen = l_frozen;
    let mut open: Vec<ParamId> = backbone.projector.ids();
    open.extend(backbone.layers[l_frozen..].iter().map(|l| l.attn.w_q));
    let mut part = PfaPartition::default();
    for id in backbone.ids() {
        let t = open.contains(&id);
        store.set_trainable(id, t);
        if t {
            part.trainable.push(id);
        } else {
            part.frozen.push(id);
        }
    }
    Ok(part)
}

/// One optimizer update: the loss graph is built by `loss_fn`, gradients
/// flow through the whole graph, and only trainable parameters move.
pub fn finetune_step<F>(store: &mut ParamStore, adam: &mut Adam, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store);
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::TrainingFailure(format!("fine-tuning loss is {value}")));
    }
    let grads = g.backward(loss);
    if !grads.is_finite() {
        return Err(Error::TrainingFailure("non-finite gradient".into()));
    }
    let ids = store.trainable_ids();
    adam.step(store, &grads, &ids);
    Ok(value)
}
