//! Backbone plus heads in one parameter store, with batched training samples.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{pfa_partition, Backbone, BackboneConfig, PfaPartition};
use crate::error::{Error, Result};
use crate::heads::{mask_embeddings, prediction_loss_graph, reconstruction_loss_graph, Heads, HeadsConfig};
use crate::nn::{Adam, Graph, Mat, ParamId, ParamStore, Segment, Var};
use crate::tokens::{assemble_graph, Vocabulary};

/// One prediction window: prompt ids, `h` prior tokens and the flattened
/// `(m, side, side)` target frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub region: usize,
    pub day: usize,
    /// 0-based first prior slot.
    pub start: usize,
    pub text_ids: Vec<u32>,
    pub tokens: Array2<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StModel {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub heads: Heads,
    pub side: usize,
    pub token_dim: usize,
    pub partition: PfaPartition,
}

impl StModel {
    /// Builds and partitions a fresh model; everything is drawn from `seed`.
    pub fn new(
        backbone: BackboneConfig,
        heads: HeadsConfig,
        vocab: Vocabulary,
        token_dim: usize,
        side: usize,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(backbone.seed);
        let mut store = ParamStore::new();
        let l_frozen = backbone.l_frozen;
        let hidden = backbone.hidden_dim;
        let mut bb = Backbone::new(&mut store, &mut rng, backbone, vocab, token_dim)?;
        let partition = pfa_partition(&mut store, &mut bb, l_frozen)?;
        let heads = Heads::new(&mut store, &mut rng, heads, hidden, side)?;
        Ok(StModel {
            store,
            backbone: bb,
            heads,
            side,
            token_dim,
            partition,
        })
    }

    pub fn h(&self) -> usize {
        self.heads.config.h
    }

    pub fn m(&self) -> usize {
        self.heads.config.m
    }

    pub fn target_len(&self) -> usize {
        self.m() * self.side * self.side
    }

    fn check(&self, batch: &[&Sample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for s in batch {
            if s.tokens.dim() != (self.h(), self.token_dim) {
                return Err(Error::invalid(format!(
                    "sample tokens {:?}, expected ({}, {})",
                    s.tokens.dim(),
                    self.h(),
                    self.token_dim
                )));
            }
            self.backbone.check_len(s.text_ids.len() + self.h())?;
        }
        Ok(())
    }

    /// Final backbone states `E` for a batch, one row segment per sample.
    pub fn hidden_graph(&self, g: &mut Graph, store: &ParamStore, batch: &[&Sample]) -> (Var, Rc<Vec<Segment>>) {
        let views: Vec<_> = batch.iter().map(|s| s.tokens.view()).collect();
        let tokens = g.constant(ndarray::concatenate(Axis(0), &views).expect("equal widths"));
        let ids: Vec<Vec<u32>> = batch.iter().map(|s| s.text_ids.clone()).collect();
        let x = assemble_graph(g, store, self.backbone.embed, &self.backbone.projector, &ids, tokens, self.h());
        let mut segments = Vec::with_capacity(batch.len());
        let mut start = 0;
        for s in batch {
            let len = s.text_ids.len() + self.h();
            segments.push(Segment { start, len });
            start += len;
        }
        let segments = Rc::new(segments);
        let e = self.backbone.forward_graph(g, store, x, &segments);
        (e, segments)
    }

    /// Backbone states as plain values (no gradient), for test-time use.
    pub fn hidden(&self, batch: &[&Sample]) -> Result<(Mat, Rc<Vec<Segment>>)> {
        self.check(batch)?;
        let mut g = Graph::new();
        let (e, segs) = self.hidden_graph(&mut g, &self.store, batch);
        Ok((g.value(e).clone(), segs))
    }

    /// Predictions `(batch, m * side * side)` from precomputed states.
    pub fn predict_from_hidden(&self, store: &ParamStore, e: &Mat, segments: &Rc<Vec<Segment>>) -> Mat {
        let mut g = Graph::new();
        let x = g.constant(e.clone());
        let y = self.heads.predict_graph(&mut g, store, x, segments);
        g.value(y).clone()
    }

    pub fn predict(&self, batch: &[&Sample]) -> Result<Mat> {
        let (e, segs) = self.hidden(batch)?;
        Ok(self.predict_from_hidden(&self.store, &e, &segs))
    }

    /// Eq. 2 loss node, plus the auxiliary reconstruction node when `aux`
    /// holds `(mask ratio, weight, rng)`. The reconstructor sees detached
    /// states, so its loss only reaches the heads.
    pub fn stage2_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Sample],
        aux: Option<(f64, f64, &mut R)>,
    ) -> Result<(Var, Option<Var>, Var)> {
        self.check(batch)?;
        let target: Vec<f64> = batch.iter().flat_map(|s| s.target.iter().copied()).collect();
        if target.len() != batch.len() * self.target_len() {
            return Err(Error::invalid("target length does not match m * side^2"));
        }
        let target = Rc::new(Array2::from_shape_vec((batch.len(), self.target_len()), target).expect("sized"));
        let (e, segments) = self.hidden_graph(g, store, batch);
        let pred = self.heads.predict_graph(g, store, e, &segments);
        let pred_loss = prediction_loss_graph(g, pred, target);
        let Some((p, weight, rng)) = aux else {
            return Ok((pred_loss, None, pred_loss));
        };
        let clean = g.value(e).clone();
        let (masked, _) = mask_embeddings(&clean, p, rng)?;
        let xm = g.constant(masked);
        let recon = self.heads.reconstruct_graph(g, store, xm, &segments);
        let recon_loss = reconstruction_loss_graph(g, recon, Rc::new(clean));
        let weighted = g.scale(recon_loss, weight);
        let total = g.add(pred_loss, weighted);
        Ok((pred_loss, Some(recon_loss), total))
    }

    /// One fine-tuning update on `batch`: gradients reach every node, only
    /// trainable parameters move. Returns the prediction loss and, with
    /// `aux`, the unweighted reconstruction loss.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        adam: &mut Adam,
        batch: &[&Sample],
        aux: Option<(f64, f64, &mut R)>,
    ) -> Result<(f64, Option<f64>)> {
        let mut g = Graph::new();
        let (pred, recon, total) = self.stage2_loss(&mut g, &self.store, batch, aux)?;
        let value = g.scalar(total);
        if !value.is_finite() {
            return Err(Error::TrainingFailure(format!("Stage-2 loss is {value}")));
        }
        let grads = g.backward(total);
        if !grads.is_finite() {
            return Err(Error::TrainingFailure("non-finite Stage-2 gradient".into()));
        }
        let ids = self.store.trainable_ids();
        adam.step(&mut self.store, &grads, &ids);
        Ok((g.scalar(pred), recon.map(|r| g.scalar(r))))
    }

    /// Parameters that must not move during Stage 2.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| !self.store.is_trainable(id)).collect()
    }

    /// Names of trunk parameters shared by both heads.
    pub fn shared_names(&self) -> Vec<String> {
        self.heads.shared_ids().iter().map(|&id| self.store.name(id).to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::default_channel_names;

    fn tiny() -> StModel {
        let bb = BackboneConfig {
            layers: 2,
            l_frozen: 1,
            hidden_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            ..Default::default()
        };
        let heads = HeadsConfig {
            n_heads: 2,
            fc_dim: 16,
            h: 3,
            m: 2,
            ..Default::default()
        };
        StModel::new(bb, heads, Vocabulary::for_data("synthetic", &default_channel_names(2)), 5, 3).unwrap()
    }

    fn sample(k: usize, text_len: usize) -> Sample {
        Sample {
            region: 0,
            day: k,
            start: 0,
            text_ids: (0..text_len as u32).map(|i| 1 + (i * 7 + k as u32) % 200).collect(),
            tokens: Array2::from_shape_fn((3, 5), |(t, c)| ((t * 5 + c + k) as f64 * 0.3).sin()),
            target: (0..18).map(|i| ((i + k) as f64 * 0.2).cos() * 0.5).collect(),
        }
    }

    #[test]
    fn batched_equals_individual() {
        let model = tiny();
        let (a, b) = (sample(0, 6), sample(1, 9));
        let both = model.predict(&[&a, &b]).unwrap();
        let one = model.predict(&[&a]).unwrap();
        let two = model.predict(&[&b]).unwrap();
        for k in 0..18 {
            assert!((both[[0, k]] - one[[0, k]]).abs() < 1e-12);
            assert!((both[[1, k]] - two[[0, k]]).abs() < 1e-12);
        }
    }

    #[test]
    fn training_reduces_loss_and_respects_freeze() {
        let mut model = tiny();
        let frozen: Vec<_> = model.frozen_ids().into_iter().map(|id| (id, model.store.get(id).clone())).collect();
        let samples: Vec<_> = (0..4).map(|k| sample(k, 6)).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut adam = Adam::new(3e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut losses = Vec::new();
        for _ in 0..60 {
            let (loss, recon) = model.train_step(&mut adam, &refs, Some((0.25, 1.0 / 16.0, &mut rng))).unwrap();
            assert!(recon.unwrap().is_finite());
            losses.push(loss);
        }
        assert!(losses[59] < 0.5 * losses[0], "{} -> {}", losses[0], losses[59]);
        for (id, v) in frozen {
            assert_eq!(model.store.get(id), &v);
        }
    }
}
