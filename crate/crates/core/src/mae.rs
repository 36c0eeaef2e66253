//! Convolutional masked autoencoder producing one embedding per time slot.
//!
//! Two instances make up the representation stage: one over all channels
//! (multifaceted embeddings) and one over the target channel alone (target
//! embeddings). Both are trained on masked inputs to reconstruct the
//! unmasked day.

use ndarray::{Array2, Array4, ArrayView4, ArrayView5, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::grid::Region;
use crate::masking::{apply_mask, draw_mask, MaskShape, MaskStrategy};
use crate::nn::layers::{conv_out, Conv2d, Linear, MapShape};
use crate::nn::{Activation, Adam, Graph, Mat, ParamStore, Var};
use crate::tokens::TokenSequence;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub channels_in: usize,
    pub side: usize,
    pub embed_dim: usize,
    /// Channel widths of the convolutions before the final `embed_dim`-wide one.
    pub conv_widths: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub p_s: f64,
    pub p_t: f64,
    /// Strategies cycled round-robin, one per batch.
    pub strategy_schedule: Vec<MaskStrategy>,
    pub seed: u64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            channels_in: 3,
            side: 10,
            embed_dim: 64,
            conv_widths: vec![32, 64],
            activation: Activation::Gelu,
            lr: 1e-4,
            epochs: 200,
            batch_size: 16,
            p_s: 0.25,
            p_t: 0.33,
            strategy_schedule: vec![MaskStrategy::Spatial, MaskStrategy::Temporal, MaskStrategy::Global],
            seed: 0,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.channels_in == 0 || self.side == 0 {
            return Err(Error::Config("embed_dim, channels_in and side must be at least 1".into()));
        }
        if self.conv_widths.contains(&0) {
            return Err(Error::Config("conv widths must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.strategy_schedule.is_empty() {
            return Err(Error::Config("strategy schedule is empty".into()));
        }
        for (name, r) in [("p_s", self.p_s), ("p_t", self.p_t)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{name} = {r} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Multifaceted,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    /// `(slots, embed_dim)`.
    pub vectors: Array2<f64>,
    pub source: EmbeddingSource,
    pub provenance: Option<(Region, usize)>,
}

#[derive(Clone, Debug)]
pub struct MaeModel {
    pub config: MaeConfig,
    pub store: ParamStore,
    enc_convs: Vec<Conv2d>,
    enc_proj: Linear,
    dec_proj: Linear,
    dec_convs: Vec<Conv2d>,
    /// Spatial size at each encoder level, input first.
    sizes: Vec<usize>,
}

/// `(slots, C, side, side)` to a `(slots*side*side, C)` feature map.
pub fn day_to_map(x: ArrayView4<'_, f32>) -> Mat {
    let (t, c, h, w) = x.dim();
    let mut m = Array2::zeros((t * h * w, c));
    for ((ti, ci, i, j), &v) in x.indexed_iter() {
        m[[(ti * h + i) * w + j, ci]] = v as f64;
    }
    m
}

pub fn map_to_day(m: &Mat, slots: usize, channels: usize, side: usize) -> Array4<f32> {
    Array4::from_shape_fn((slots, channels, side, side), |(t, c, i, j)| {
        m[[(t * side + i) * side + j, c]] as f32
    })
}

fn stack_days(days: &[Array4<f32>]) -> Mat {
    let maps: Vec<Mat> = days.iter().map(|d| day_to_map(d.view())).collect();
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("same channel count")
}

impl MaeModel {
    pub fn new(config: MaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut widths = vec![config.channels_in];
        widths.extend(&config.conv_widths);
        widths.push(config.embed_dim);
        let mut sizes = vec![config.side];
        let mut enc_convs = Vec::new();
        for (k, pair) in widths.windows(2).enumerate() {
            enc_convs.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("enc.conv{k}"),
                pair[0],
                pair[1],
                KERNEL,
                STRIDE,
                PAD,
                false,
            ));
            let last = *sizes.last().expect("non-empty");
            sizes.push(conv_out(last, KERNEL, STRIDE, PAD));
        }
        let bottom = *sizes.last().expect("non-empty");
        let flat = bottom * bottom * config.embed_dim;
        let enc_proj = Linear::new(&mut store, &mut rng, "enc.proj", flat, config.embed_dim, true, true);
        let dec_proj = Linear::new(&mut store, &mut rng, "dec.proj", config.embed_dim, flat, true, true);
        let mut dec_convs = Vec::new();
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        for (k, pair) in rev.windows(2).enumerate() {
            dec_convs.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("dec.deconv{k}"),
                pair[0],
                pair[1],
                KERNEL,
                STRIDE,
                PAD,
                true,
            ));
        }
        Ok(MaeModel {
            config,
            store,
            enc_convs,
            enc_proj,
            dec_proj,
            dec_convs,
            sizes,
        })
    }

    /// Rebuilds the layer wiring for `config` around an existing parameter store.
    pub fn from_store(config: MaeConfig, store: ParamStore) -> Result<Self> {
        let mut model = MaeModel::new(config)?;
        if model.store.len() != store.len()
            || model.store.iter().zip(store.iter()).any(|((_, a), (_, b))| a.name != b.name || a.value.dim() != b.value.dim())
        {
            return Err(Error::invalid("parameter store does not match the MAE layout"));
        }
        model.store = store;
        Ok(model)
    }

    /// Encoder over a `(images*side*side, C)` map; returns `(images, embed_dim)`.
    pub fn encode_graph(&self, g: &mut Graph, store: &ParamStore, x: Var, images: usize) -> Var {
        let mut shape = MapShape {
            batch: images,
            height: self.config.side,
            width: self.config.side,
            channels: self.config.channels_in,
        };
        let mut h = x;
        for conv in &self.enc_convs {
            let (y, s) = conv.forward(g, store, h, shape);
            h = g.act(y, self.config.activation);
            shape = s;
        }
        let flat = g.reshape(h, images, shape.height * shape.width * shape.channels);
        self.enc_proj.forward(g, store, flat)
    }

    /// Decoder from `(images, embed_dim)` back to an `(images*side*side, C)` map.
    pub fn decode_graph(&self, g: &mut Graph, store: &ParamStore, v: Var, images: usize) -> Var {
        let bottom = *self.sizes.last().expect("non-empty");
        let h = self.dec_proj.forward(g, store, v);
        let h = g.act(h, self.config.activation);
        let mut h = g.reshape(h, images * bottom * bottom, self.config.embed_dim);
        let mut shape = MapShape {
            batch: images,
            height: bottom,
            width: bottom,
            channels: self.config.embed_dim,
        };
        let last = self.dec_convs.len() - 1;
        for (k, conv) in self.dec_convs.iter().enumerate() {
            let target = self.sizes[self.sizes.len() - 2 - k];
            let (y, s) = conv.forward_transposed(g, store, h, shape, target, target);
            h = if k == last { y } else { g.act(y, self.config.activation) };
            shape = s;
        }
        h
    }

    fn check_day(&self, x: &ArrayView4<'_, f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.channels_in || h != self.config.side || w != self.config.side {
            return Err(Error::invalid(format!(
                "expected (T, {}, {s}, {s}), got {:?}",
                self.config.channels_in,
                x.dim(),
                s = self.config.side
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x_masked: ArrayView4<'_, f32>, source: EmbeddingSource) -> Result<EmbeddingSequence> {
        self.check_day(&x_masked)?;
        let slots = x_masked.dim().0;
        let mut g = Graph::new();
        let x = g.constant(day_to_map(x_masked));
        let v = self.encode_graph(&mut g, &self.store, x, slots);
        Ok(EmbeddingSequence {
            vectors: g.value(v).clone(),
            source,
            provenance: None,
        })
    }

    pub fn decode(&self, v: &EmbeddingSequence) -> Result<Array4<f32>> {
        if v.vectors.ncols() != self.config.embed_dim {
            return Err(Error::invalid(format!(
                "embedding width {} does not match embed_dim {}",
                v.vectors.ncols(),
                self.config.embed_dim
            )));
        }
        let slots = v.vectors.nrows();
        let mut g = Graph::new();
        let x = g.constant(v.vectors.clone());
        let y = self.decode_graph(&mut g, &self.store, x, slots);
        Ok(map_to_day(g.value(y), slots, self.config.channels_in, self.config.side))
    }

    /// Masked-reconstruction loss graph over a batch of days.
    pub fn loss_graph(&self, g: &mut Graph, store: &ParamStore, masked: &[Array4<f32>], clean: &[Array4<f32>]) -> Var {
        let images: usize = masked.iter().map(|d| d.dim().0).sum();
        let x = g.constant(stack_days(masked));
        let target = Rc::new(stack_days(clean));
        let v = self.encode_graph(g, store, x, images);
        let y = self.decode_graph(g, store, v, images);
        let n = target.len() as f64;
        g.sq_err(y, target, 1.0 / n)
    }
}

/// Slot-averaged reconstruction error: `(1/T) * sum_t mean((x_hat_t - x_t)^2)`.
pub fn mae_loss(x_hat: ArrayView4<'_, f32>, x: ArrayView4<'_, f32>) -> Result<f64> {
    if x_hat.dim() != x.dim() {
        return Err(Error::invalid(format!("shape {:?} vs {:?}", x_hat.dim(), x.dim())));
    }
    let slots = x.dim().0;
    let per_slot: f64 = x_hat
        .axis_iter(Axis(0))
        .zip(x.axis_iter(Axis(0)))
        .map(|(a, b)| {
            let n = a.len() as f64;
            a.iter().zip(b.iter()).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>() / n
        })
        .sum();
    Ok(per_slot / slots as f64)
}

/// [`mae_loss`] averaged over the day axis of `(N, T, C, side, side)` tensors.
pub fn mae_loss_days(x_hat: ArrayView5<'_, f32>, x: ArrayView5<'_, f32>) -> Result<f64> {
    if x_hat.dim() != x.dim() {
        return Err(Error::invalid(format!("shape {:?} vs {:?}", x_hat.dim(), x.dim())));
    }
    let days = x.dim().0;
    let mut total = 0.0;
    for (a, b) in x_hat.axis_iter(Axis(0)).zip(x.axis_iter(Axis(0))) {
        total += mae_loss(a, b)?;
    }
    Ok(total / days as f64)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MaeTrainReport {
    /// Evaluation loss before the first update.
    pub initial_loss: f64,
    /// Evaluation loss after each epoch, on a fixed set of masks.
    pub history: Vec<f64>,
    pub steps: usize,
}

fn eval_loss(model: &MaeModel, masked: &[Array4<f32>], clean: &[Array4<f32>], batch: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for (m, c) in masked.chunks(batch).zip(clean.chunks(batch)) {
        let mut g = Graph::new();
        let loss = model.loss_graph(&mut g, &model.store, m, c);
        total += g.scalar(loss) * m.len() as f64;
        count += m.len() as f64;
    }
    total / count
}

/// Trains with masks drawn per sample, one strategy per batch from the
/// round-robin schedule. On a non-finite loss the model is rolled back to
/// the last completed epoch and a training failure is returned.
pub fn train_mae(model: &mut MaeModel, days: &[Array4<f32>]) -> Result<MaeTrainReport> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if days.is_empty() {
        return Err(Error::invalid("no training days"));
    }
    for d in days {
        model.check_day(&d.view())?;
        if d.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-6) {
            return Err(Error::invalid("training data must be normalized to [-1, 1]"));
        }
    }
    let slots = days[0].dim().0;
    let shape = MaskShape::new(slots, cfg.channels_in, cfg.side);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    let eval_masked: Vec<Array4<f32>> = days
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let strategy = cfg.strategy_schedule[i % cfg.strategy_schedule.len()];
            let mask = draw_mask(strategy, shape, cfg.p_s, cfg.p_t, &mut eval_rng)?;
            apply_mask(d.view(), &mask)
        })
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(cfg.lr);
    let ids: Vec<_> = model.store.ids().collect();
    let mut report = MaeTrainReport {
        initial_loss: eval_loss(model, &eval_masked, days, cfg.batch_size),
        ..Default::default()
    };
    let mut last_good = model.store.clone();
    let mut order: Vec<usize> = (0..days.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let strategy = cfg.strategy_schedule[report.steps % cfg.strategy_schedule.len()];
            let clean: Vec<Array4<f32>> = chunk.iter().map(|&i| days[i].clone()).collect();
            let masked: Vec<Array4<f32>> = clean
                .iter()
                .map(|d| {
                    let mask = draw_mask(strategy, shape, cfg.p_s, cfg.p_t, &mut rng)?;
                    apply_mask(d.view(), &mask)
                })
                .collect::<Result<_>>()?;
            let mut g = Graph::new();
            let loss = model.loss_graph(&mut g, &model.store, &masked, &clean);
            let value = g.scalar(loss);
            if !value.is_finite() {
                model.store = last_good;
                return Err(Error::TrainingFailure(format!(
                    "MAE loss became non-finite at epoch {epoch}, step {}",
                    report.steps
                )));
            }
            let grads = g.backward(loss);
            adam.step(&mut model.store, &grads, &ids);
            report.steps += 1;
        }
        let l = eval_loss(model, &eval_masked, days, cfg.batch_size);
        if !l.is_finite() {
            model.store = last_good;
            return Err(Error::TrainingFailure(format!("MAE evaluation loss non-finite after epoch {epoch}")));
        }
        report.history.push(l);
        last_good = model.store.clone();
    }
    Ok(report)
}

/// `u_t = concat(v_t, v^k_t)` for every slot.
pub fn fuse_tokens(v: &EmbeddingSequence, vk: &EmbeddingSequence) -> Result<TokenSequence> {
    if v.source != EmbeddingSource::Multifaceted || vk.source != EmbeddingSource::Target {
        return Err(Error::invalid("fuse_tokens expects (multifaceted, target) embeddings"));
    }
    if v.vectors.nrows() != vk.vectors.nrows() {
        return Err(Error::invalid(format!(
            "slot counts differ: {} vs {}",
            v.vectors.nrows(),
            vk.vectors.nrows()
        )));
    }
    let tokens = ndarray::concatenate(Axis(1), &[v.vectors.view(), vk.vectors.view()]).expect("rows match");
    Ok(TokenSequence {
        tokens,
        provenance: v.provenance.or(vk.provenance),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;

    fn tiny(channels: usize, side: usize, d: usize) -> MaeConfig {
        MaeConfig {
            channels_in: channels,
            side,
            embed_dim: d,
            conv_widths: vec![4, 6],
            lr: 3e-3,
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        }
    }

    fn day(slots: usize, channels: usize, side: usize, phase: f32) -> Array4<f32> {
        Array4::from_shape_fn((slots, channels, side, side), |(t, c, i, j)| {
            (0.3 * t as f32 + 0.5 * c as f32 + 0.2 * i as f32 - 0.1 * j as f32 + phase).sin() * 0.8
        })
    }

    #[test]
    fn encode_decode_shapes() {
        let model = MaeModel::new(MaeConfig::default()).unwrap();
        let x = day(12, 3, 10, 0.0);
        let v = model.encode(x.view(), EmbeddingSource::Multifaceted).unwrap();
        assert_eq!(v.vectors.dim(), (12, 64));
        let y = model.decode(&v).unwrap();
        assert_eq!(y.dim(), (12, 3, 10, 10));
        assert!(y.iter().all(|v| v.is_finite()));
        let again = model.encode(x.view(), EmbeddingSource::Multifaceted).unwrap();
        assert_eq!(v, again);

        let target = MaeModel::new(MaeConfig {
            channels_in: 1,
            embed_dim: 32,
            ..Default::default()
        })
        .unwrap();
        let xk = day(12, 1, 10, 0.0);
        assert_eq!(target.encode(xk.view(), EmbeddingSource::Target).unwrap().vectors.dim(), (12, 32));
    }

    #[test]
    fn one_embedding_per_slot_for_any_day_length() {
        let model = MaeModel::new(tiny(2, 6, 5)).unwrap();
        for slots in [1, 6, 12, 24] {
            let v = model.encode(day(slots, 2, 6, 0.1).view(), EmbeddingSource::Multifaceted).unwrap();
            assert_eq!(v.vectors.nrows(), slots);
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let model = MaeModel::new(tiny(2, 6, 5)).unwrap();
        assert!(model.encode(day(4, 3, 6, 0.0).view(), EmbeddingSource::Multifaceted).is_err());
        let bad = EmbeddingSequence {
            vectors: Array2::zeros((4, 7)),
            source: EmbeddingSource::Multifaceted,
            provenance: None,
        };
        assert!(model.decode(&bad).is_err());
    }

    #[test]
    fn loss_examples() {
        let x = day(3, 2, 4, 0.0);
        assert_eq!(mae_loss(x.view(), x.view()).unwrap(), 0.0);
        let shifted = x.mapv(|v| v + 0.1);
        assert!((mae_loss(shifted.view(), x.view()).unwrap() - 0.01).abs() < 1e-6);
        let a = Array5::<f32>::zeros((1, 1, 1, 1, 1));
        let b = Array5::<f32>::from_elem((1, 1, 1, 1, 1), 2.0);
        assert_eq!(mae_loss_days(a.view(), b.view()).unwrap(), 4.0);
        assert!(mae_loss(x.view(), day(3, 1, 4, 0.0).view()).is_err());
    }

    #[test]
    fn masked_positions_do_not_affect_encoding() {
        let model = MaeModel::new(tiny(2, 6, 5)).unwrap();
        let x = day(4, 2, 6, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = draw_mask(MaskStrategy::Global, MaskShape::new(4, 2, 6), 0.3, 0.5, &mut rng).unwrap();
        let mut perturbed = x.clone();
        for &(t, c, i, j) in &mask.indices {
            perturbed[[t, c, i, j]] += 5.0;
        }
        let a = model.encode(apply_mask(x.view(), &mask).unwrap().view(), EmbeddingSource::Multifaceted).unwrap();
        let b = model
            .encode(apply_mask(perturbed.view(), &mask).unwrap().view(), EmbeddingSource::Multifaceted)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_keeps_history_flat() {
        let mut cfg = tiny(2, 6, 5);
        cfg.lr = 0.0;
        cfg.epochs = 3;
        let mut model = MaeModel::new(cfg).unwrap();
        let days: Vec<_> = (0..4).map(|k| day(4, 2, 6, k as f32 * 0.4)).collect();
        let report = train_mae(&mut model, &days).unwrap();
        assert!(report.history.iter().all(|&l| l == report.initial_loss));
    }

    #[test]
    fn overfits_a_single_day() {
        let mut cfg = tiny(1, 6, 8);
        cfg.epochs = 600;
        cfg.batch_size = 1;
        cfg.strategy_schedule = vec![MaskStrategy::Spatial];
        cfg.p_s = 0.02;
        let mut model = MaeModel::new(cfg).unwrap();
        let x = day(4, 1, 6, 0.3);
        let report = train_mae(&mut model, std::slice::from_ref(&x)).unwrap();
        let final_loss = *report.history.last().unwrap();
        let v = model.encode(x.view(), EmbeddingSource::Multifaceted).unwrap();
        let y = model.decode(&v).unwrap();
        let max_err = y.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(final_loss < 1e-3, "loss {final_loss}");
        assert!(max_err < 0.15, "max error {max_err}");
    }

    #[test]
    fn fuse_tokens_concatenates_per_slot() {
        let v = EmbeddingSequence {
            vectors: Array2::from_shape_fn((5, 64), |(t, k)| (t * 100 + k) as f64),
            source: EmbeddingSource::Multifaceted,
            provenance: None,
        };
        let vk = EmbeddingSequence {
            vectors: Array2::from_shape_fn((5, 32), |(t, k)| -((t * 100 + k) as f64)),
            source: EmbeddingSource::Target,
            provenance: None,
        };
        let u = fuse_tokens(&v, &vk).unwrap();
        assert_eq!(u.tokens.dim(), (5, 96));
        for t in 0..5 {
            assert_eq!(u.tokens.row(t).slice(ndarray::s![..64]), v.vectors.row(t));
            assert_eq!(u.tokens.row(t).slice(ndarray::s![64..]), vk.vectors.row(t));
        }
        let short = EmbeddingSequence {
            vectors: Array2::zeros((4, 32)),
            ..vk.clone()
        };
        assert!(fuse_tokens(&v, &short).is_err());
        assert!(fuse_tokens(&vk, &v).is_err());
    }
}
