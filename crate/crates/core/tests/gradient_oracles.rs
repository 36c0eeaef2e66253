//! Central finite differences against the tape gradients of the three
//! training objectives on models small enough to probe exhaustively.

use std::rc::Rc;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use urbanmind::backbone::BackboneConfig;
use urbanmind::heads::{mask_embeddings, reconstruction_loss_graph, HeadsConfig};
use urbanmind::mae::{MaeConfig, MaeModel};
use urbanmind::masking::{apply_mask, draw_mask, MaskShape, MaskStrategy};
use urbanmind::model::{Sample, StModel};
use urbanmind::nn::{Activation, Graph, ParamId, ParamStore, Var};
use urbanmind::tokens::Vocabulary;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;
const COORDS: usize = 24;
const MAX_PARAMS: usize = 2000;

/// Compares analytic and numeric derivatives at `COORDS` random coordinates
/// of the parameters in `ids`. `loss` builds the scalar on a fresh graph.
fn check<F>(store: &mut ParamStore, ids: &[ParamId], seed: u64, loss: F)
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store);
    let grads = g.backward(l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    while probed < COORDS {
        let id = ids[rng.random_range(0..ids.len())];
        let (rows, cols) = store.get(id).dim();
        let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let analytic = grads.get(id).map_or(0.0, |m| m[[r, c]]);
        let x0 = store.get(id)[[r, c]];
        let mut eval = |x: f64| {
            store.value_mut(id)[[r, c]] = x;
            let mut g = Graph::new();
            let l = loss(&mut g, store);
            g.scalar(l)
        };
        let numeric = (eval(x0 + EPS) - eval(x0 - EPS)) / (2.0 * EPS);
        store.value_mut(id)[[r, c]] = x0;
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-9 {
            // Both vanish: the coordinate does not reach the loss.
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        assert!(
            rel < TOL,
            "{}[{r},{c}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}",
            store.name(id)
        );
        worst = worst.max(rel);
        probed += 1;
    }
    eprintln!("worst relative error over {COORDS} coordinates: {worst:e}");
}

fn day(slots: usize, channels: usize, side: usize, phase: f64) -> Array4<f32> {
    Array4::from_shape_fn((slots, channels, side, side), |(t, c, i, j)| {
        ((t as f64 * 0.7 + c as f64 + i as f64 * 0.3 - j as f64 * 0.2 + phase).sin() * 0.8) as f32
    })
}

#[test]
fn autoencoder_reconstruction_loss_gradient() {
    let cfg = MaeConfig {
        channels_in: 2,
        side: 4,
        embed_dim: 6,
        conv_widths: vec![3],
        activation: Activation::Tanh,
        ..Default::default()
    };
    let mut model = MaeModel::new(cfg).unwrap();
    assert!(model.store.total_scalars() <= MAX_PARAMS, "{} params", model.store.total_scalars());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clean: Vec<_> = (0..2).map(|k| day(3, 2, 4, k as f64)).collect();
    let masked: Vec<_> = clean
        .iter()
        .zip([MaskStrategy::Spatial, MaskStrategy::Global])
        .map(|(x, s)| {
            let m = draw_mask(s, MaskShape::new(3, 2, 4), 0.25, 0.33, &mut rng).unwrap();
            apply_mask(x.view(), &m).unwrap()
        })
        .collect();
    let ids: Vec<ParamId> = model.store.ids().collect();
    let shadow = model.clone();
    check(&mut model.store, &ids, 11, |g, store| shadow.loss_graph(g, store, &masked, &clean));
}

fn tiny_model() -> StModel {
    let bb = BackboneConfig {
        layers: 1,
        l_frozen: 0,
        hidden_dim: 4,
        n_heads: 1,
        ffn_dim: 6,
        activation: Activation::Tanh,
        ..Default::default()
    };
    let heads = HeadsConfig {
        trunk_layers: 1,
        n_heads: 1,
        fc_dim: 5,
        activation: Activation::Tanh,
        h: 2,
        m: 1,
    };
    let vocab = Vocabulary::for_data("synthetic", &["speed".to_string()]);
    StModel::new(bb, heads, vocab, 3, 2).unwrap()
}

fn samples() -> Vec<Sample> {
    (0..2)
        .map(|k| Sample {
            region: 0,
            day: k,
            start: 0,
            text_ids: vec![1 + k as u32, 5, 9],
            tokens: Array2::from_shape_fn((2, 3), |(t, c)| ((t * 3 + c + k) as f64 * 0.9).cos()),
            target: (0..4).map(|i| ((i + 2 * k) as f64 * 0.5).sin() * 0.7).collect(),
        })
        .collect()
}

#[test]
fn prediction_loss_gradient() {
    let mut model = tiny_model();
    assert!(model.store.total_scalars() <= MAX_PARAMS, "{} params", model.store.total_scalars());
    let data = samples();
    let batch: Vec<&Sample> = data.iter().collect();
    let ids = model.store.trainable_ids();
    let shadow = model.clone();
    check(&mut model.store, &ids, 12, |g, store| {
        shadow.stage2_loss::<ChaCha8Rng>(g, store, &batch, None).unwrap().0
    });
}

#[test]
fn embedding_reconstruction_loss_gradient() {
    let mut model = tiny_model();
    let data = samples();
    let batch: Vec<&Sample> = data.iter().collect();
    let (e, segments) = model.hidden(&batch).unwrap();
    let (masked, _) = mask_embeddings(&e, 0.25, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let clean = Rc::new(e);
    let ids = model.heads.adaptation_ids();
    let shadow = model.clone();
    check(&mut model.store, &ids, 13, |g, store| {
        let x = g.constant(masked.clone());
        let r = shadow.heads.reconstruct_graph(g, store, x, &segments);
        reconstruction_loss_graph(g, r, clean.clone())
    });
}
