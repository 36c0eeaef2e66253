//! Channel-sensitive spatial, channel-sensitive temporal and global masking
//! over one day of dynamics shaped `(slots, channels, side, side)`.

use std::fmt;

use ndarray::{Array4, ArrayView4};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Spatial,
    Temporal,
    Global,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MaskStrategy::Spatial => "spatial",
            MaskStrategy::Temporal => "temporal",
            MaskStrategy::Global => "global",
        };
        f.write_str(s)
    }
}

/// `(slots, channels, side, side)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskShape {
    pub slots: usize,
    pub channels: usize,
    pub side: usize,
}

impl MaskShape {
    pub fn new(slots: usize, channels: usize, side: usize) -> Self {
        MaskShape { slots, channels, side }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.slots, self.channels, self.side, self.side)
    }

    fn cells(&self) -> usize {
        self.side * self.side
    }
}

/// Masked `(t, c, i, j)` positions plus how they were drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub indices: Vec<(usize, usize, usize, usize)>,
    pub p_s: Option<f64>,
    pub p_t: Option<f64>,
    pub shape: MaskShape,
}

/// Number of masked items for a ratio: nearest integer, at least one, at most `n`.
pub fn masked_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.max(1))
}

fn check_ratio(name: &str, ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {ratio} outside (0, 1)")))
    }
}

fn check_shape(shape: MaskShape) -> Result<()> {
    if shape.slots == 0 || shape.channels == 0 || shape.side == 0 {
        return Err(Error::invalid("mask shape has an empty dimension"));
    }
    Ok(())
}

/// For every slot, one uniformly chosen channel loses `round(p_s * side^2)` cells.
pub fn spatial_mask<R: Rng + ?Sized>(shape: MaskShape, p_s: f64, rng: &mut R) -> Result<MaskSpec> {
    check_ratio("p_s", p_s)?;
    check_shape(shape)?;
    let k = masked_count(p_s, shape.cells());
    let mut indices = Vec::with_capacity(shape.slots * k);
    for t in 0..shape.slots {
        let c = rng.random_range(0..shape.channels);
        let mut cells = sample(rng, shape.cells(), k).into_vec();
        cells.sort_unstable();
        indices.extend(cells.into_iter().map(|cell| (t, c, cell / shape.side, cell % shape.side)));
    }
    Ok(MaskSpec {
        strategy: MaskStrategy::Spatial,
        indices,
        p_s: Some(p_s),
        p_t: None,
        shape,
    })
}

/// `round(p_t * slots)` distinct slots each lose one whole uniformly chosen channel.
pub fn temporal_mask<R: Rng + ?Sized>(shape: MaskShape, p_t: f64, rng: &mut R) -> Result<MaskSpec> {
    check_ratio("p_t", p_t)?;
    check_shape(shape)?;
    let k = masked_count(p_t, shape.slots);
    let mut slots = sample(rng, shape.slots, k).into_vec();
    slots.sort_unstable();
    let mut indices = Vec::with_capacity(k * shape.cells());
    for t in slots {
        let c = rng.random_range(0..shape.channels);
        for i in 0..shape.side {
            for j in 0..shape.side {
                indices.push((t, c, i, j));
            }
        }
    }
    Ok(MaskSpec {
        strategy: MaskStrategy::Temporal,
        indices,
        p_s: None,
        p_t: Some(p_t),
        shape,
    })
}

/// `round(p_t * slots)` distinct slots each lose `round(p_s * C * side^2)`
/// `(c, i, j)` triples drawn across all channels.
pub fn global_mask<R: Rng + ?Sized>(shape: MaskShape, p_s: f64, p_t: f64, rng: &mut R) -> Result<MaskSpec> {
    check_ratio("p_s", p_s)?;
    check_ratio("p_t", p_t)?;
    check_shape(shape)?;
    let kt = masked_count(p_t, shape.slots);
    let per_slot = shape.channels * shape.cells();
    let ks = masked_count(p_s, per_slot);
    let mut slots = sample(rng, shape.slots, kt).into_vec();
    slots.sort_unstable();
    let mut indices = Vec::with_capacity(kt * ks);
    for t in slots {
        let mut picks = sample(rng, per_slot, ks).into_vec();
        picks.sort_unstable();
        for p in picks {
            let c = p / shape.cells();
            let cell = p % shape.cells();
            indices.push((t, c, cell / shape.side, cell % shape.side));
        }
    }
    Ok(MaskSpec {
        strategy: MaskStrategy::Global,
        indices,
        p_s: Some(p_s),
        p_t: Some(p_t),
        shape,
    })
}

/// Draws a mask of the requested strategy.
pub fn draw_mask<R: Rng + ?Sized>(
    strategy: MaskStrategy,
    shape: MaskShape,
    p_s: f64,
    p_t: f64,
    rng: &mut R,
) -> Result<MaskSpec> {
    match strategy {
        MaskStrategy::Spatial => spatial_mask(shape, p_s, rng),
        MaskStrategy::Temporal => temporal_mask(shape, p_t, rng),
        MaskStrategy::Global => global_mask(shape, p_s, p_t, rng),
    }
}

impl MaskSpec {
    pub fn empty(shape: MaskShape) -> Self {
        MaskSpec {
            strategy: MaskStrategy::Spatial,
            indices: Vec::new(),
            p_s: None,
            p_t: None,
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn in_bounds(&self) -> bool {
        let s = self.shape;
        self.indices
            .iter()
            .all(|&(t, c, i, j)| t < s.slots && c < s.channels && i < s.side && j < s.side)
    }
}

/// Returns a copy of `x` with every masked position set to exactly zero.
pub fn apply_mask(x: ArrayView4<'_, f32>, mask: &MaskSpec) -> Result<Array4<f32>> {
    if x.dim() != mask.shape.dims() {
        return Err(Error::invalid(format!(
            "mask shape {:?} does not match input {:?}",
            mask.shape.dims(),
            x.dim()
        )));
    }
    let mut out = x.to_owned();
    for &(t, c, i, j) in &mask.indices {
        out[[t, c, i, j]] = 0.0;
    }
    Ok(out)
}
