//! Predictor `P` and test-data reconstructor `G` over backbone hidden states.
//!
//! Both heads run the same bidirectional attention trunk (the same parameter
//! ids in the store, so an update through one is seen by the other) followed
//! by their own private layers.

use std::rc::Rc;

use ndarray::{Array2, Array4, ArrayView4};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::masked_count;
use crate::nn::layers::{AttentionBlock, Linear};
use crate::nn::{Activation, Graph, Mat, ParamId, ParamStore, Segment, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    /// Attention blocks shared by `P` and `G`.
    pub trunk_layers: usize,
    pub n_heads: usize,
    pub fc_dim: usize,
    pub activation: Activation,
    /// Prior slots fed to the predictor.
    pub h: usize,
    /// Slots predicted.
    pub m: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            trunk_layers: 2,
            n_heads: 4,
            fc_dim: 256,
            activation: Activation::Gelu,
            h: 8,
            m: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SharedTrunk {
    pub blocks: Vec<AttentionBlock>,
}

impl SharedTrunk {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &Rc<Vec<Segment>>) -> Var {
        self.blocks.iter().fold(x, |h, b| b.forward(g, store, h, segments))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.ids()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct PredictorHead {
    pub attn: AttentionBlock,
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
    pub h: usize,
    pub m: usize,
    pub side: usize,
}

impl PredictorHead {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.attn.ids();
        v.extend(self.fc1.ids());
        v.extend(self.fc2.ids());
        v
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructorHead {
    pub attn: AttentionBlock,
    pub out: Linear,
}

impl ReconstructorHead {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.attn.ids();
        v.extend(self.out.ids());
        v
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub config: HeadsConfig,
    pub trunk: SharedTrunk,
    pub predictor: PredictorHead,
    pub reconstructor: ReconstructorHead,
}

impl Heads {
    /// Registers `heads.trunk*`, `heads.p.*` and `heads.g.*`, all trainable.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: HeadsConfig,
        hidden: usize,
        side: usize,
    ) -> Result<Self> {
        if config.h == 0 || config.m == 0 || config.fc_dim == 0 {
            return Err(Error::Config("h, m and fc_dim must be at least 1".into()));
        }
        if config.n_heads == 0 || !hidden.is_multiple_of(config.n_heads) {
            return Err(Error::Config(format!(
                "hidden width {hidden} is not divisible by {} head(s)",
                config.n_heads
            )));
        }
        let nh = config.n_heads;
        let blocks = (0..config.trunk_layers)
            .map(|i| AttentionBlock::new(store, rng, &format!("heads.trunk{i}"), hidden, nh, false, true))
            .collect();
        let p_attn = AttentionBlock::new(store, rng, "heads.p.attn", hidden, nh, false, true);
        let fc1 = Linear::new(store, rng, "heads.p.fc1", config.h * hidden, config.fc_dim, true, true);
        let fc2 = Linear::new(store, rng, "heads.p.fc2", config.fc_dim, config.m * side * side, true, true);
        let g_attn = AttentionBlock::new(store, rng, "heads.g.attn", hidden, nh, false, true);
        let out = Linear::new(store, rng, "heads.g.out", hidden, hidden, true, true);
        Ok(Heads {
            trunk: SharedTrunk { blocks },
            predictor: PredictorHead {
                attn: p_attn,
                fc1,
                fc2,
                activation: config.activation,
                h: config.h,
                m: config.m,
                side,
            },
            reconstructor: ReconstructorHead { attn: g_attn, out },
            config,
        })
    }

    /// `P(E)` for a batch: `(batch, m * side * side)` in `[-1, 1]`, read from
    /// the last `h` positions of every segment.
    pub fn predict_graph(&self, g: &mut Graph, store: &ParamStore, e: Var, segments: &Rc<Vec<Segment>>) -> Var {
        let p = &self.predictor;
        let hidden = g.value(e).ncols();
        let t = self.trunk.forward(g, store, e, segments);
        let a = p.attn.forward(g, store, t, segments);
        let mut index = Vec::with_capacity(segments.len() * p.h * hidden);
        for seg in segments.iter() {
            assert!(seg.len >= p.h, "segment shorter than h");
            for r in seg.start + seg.len - p.h..seg.start + seg.len {
                index.extend((0..hidden).map(|k| (r * hidden + k) as u32));
            }
        }
        let flat = g.gather(a, segments.len(), p.h * hidden, Rc::new(index));
        let z = p.fc1.forward(g, store, flat);
        let z = g.act(z, p.activation);
        let y = p.fc2.forward(g, store, z);
        g.act(y, Activation::Tanh)
    }

    /// `G(E_masked)`: same shape as the input rows.
    pub fn reconstruct_graph(&self, g: &mut Graph, store: &ParamStore, e: Var, segments: &Rc<Vec<Segment>>) -> Var {
        let t = self.trunk.forward(g, store, e, segments);
        let a = self.reconstructor.attn.forward(g, store, t, segments);
        self.reconstructor.out.forward(g, store, a)
    }

    /// Single-sequence prediction as `(m, 1, side, side)` frames.
    pub fn predict(&self, store: &ParamStore, e_seq: &Array2<f64>) -> Result<Array4<f32>> {
        let p = &self.predictor;
        if e_seq.nrows() < p.h {
            return Err(Error::invalid(format!("{} hidden states, need at least h = {}", e_seq.nrows(), p.h)));
        }
        let segments = Rc::new(vec![Segment { start: 0, len: e_seq.nrows() }]);
        let mut g = Graph::new();
        let e = g.constant(e_seq.clone());
        let y = self.predict_graph(&mut g, store, e, &segments);
        Ok(frames_from_row(g.value(y).row(0).to_vec(), p.m, p.side))
    }

    pub fn reconstruct(&self, store: &ParamStore, masked: &Array2<f64>) -> Array2<f64> {
        let segments = Rc::new(vec![Segment { start: 0, len: masked.nrows() }]);
        let mut g = Graph::new();
        let e = g.constant(masked.clone());
        let y = self.reconstruct_graph(&mut g, store, e, &segments);
        g.value(y).clone()
    }

    pub fn shared_ids(&self) -> Vec<ParamId> {
        self.trunk.ids()
    }

    /// Parameters updated by test-time adaptation: trunk plus `G`-private.
    pub fn adaptation_ids(&self) -> Vec<ParamId> {
        let mut v = self.trunk.ids();
        v.extend(self.reconstructor.ids());
        v
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.trunk.ids();
        v.extend(self.predictor.ids());
        v.extend(self.reconstructor.ids());
        v
    }
}

pub(crate) fn frames_from_row(row: Vec<f64>, m: usize, side: usize) -> Array4<f32> {
    Array4::from_shape_vec((m, 1, side, side), row.into_iter().map(|v| v as f32).collect()).expect("m * side^2 values")
}

/// Horizon-averaged, cell-averaged squared error between `(m, 1, side, side)` frames.
pub fn prediction_loss(x_hat: ArrayView4<'_, f32>, x: ArrayView4<'_, f32>) -> Result<f64> {
    if x_hat.dim() != x.dim() {
        return Err(Error::invalid(format!("shape {:?} vs {:?}", x_hat.dim(), x.dim())));
    }
    let n = x.len() as f64;
    Ok(x_hat.iter().zip(x.iter()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / n)
}

/// Graph form of [`prediction_loss`] averaged over a batch of flattened targets.
pub fn prediction_loss_graph(g: &mut Graph, pred: Var, target: Rc<Mat>) -> Var {
    let n = target.len() as f64;
    g.sq_err(pred, target, 1.0 / n)
}

/// Per-vector sum of squares averaged over the `n` embeddings.
pub fn reconstruction_loss_graph(g: &mut Graph, recon: Var, clean: Rc<Mat>) -> Var {
    let n = clean.nrows() as f64;
    g.sq_err(recon, clean, 1.0 / n)
}

pub fn reconstruction_loss(recon: &Array2<f64>, clean: &Array2<f64>) -> Result<f64> {
    if recon.dim() != clean.dim() {
        return Err(Error::invalid(format!("shape {:?} vs {:?}", recon.dim(), clean.dim())));
    }
    let n = clean.nrows() as f64;
    Ok(recon.iter().zip(clean.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// Binary keep-masks, one row per embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMask {
    /// `1.0` keeps an entry, `0.0` drops it.
    pub keep: Array2<f64>,
    pub ratio: f64,
}

impl EmbeddingMask {
    pub fn zeros_per_vector(&self) -> Vec<usize> {
        self.keep.rows().into_iter().map(|r| r.iter().filter(|&&v| v == 0.0).count()).collect()
    }
}

/// `e_i ⊙ m_i` with exactly `round(p * d)` (at least one) zeros per vector.
pub fn mask_embeddings<R: Rng + ?Sized>(e_seq: &Array2<f64>, p: f64, rng: &mut R) -> Result<(Array2<f64>, EmbeddingMask)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("mask ratio {p} outside (0, 1)")));
    }
    let (n, d) = e_seq.dim();
    let zeros = masked_count(p, d);
    let mut keep = Array2::ones((n, d));
    for i in 0..n {
        for k in sample(rng, d, zeros) {
            keep[[i, k]] = 0.0;
        }
    }
    let masked = e_seq * &keep;
    Ok((masked, EmbeddingMask { keep, ratio: p }))
}
