use std::f64::consts::PI;

use ndarray::Array5;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{default_channel_names, Region, UrbanDynamicsTensor};
use crate::error::{Error, Result};

/// Knobs of the synthetic urban dynamics model.
///
/// Channel 0 is a diurnal sinusoid whose amplitude is modulated over space,
/// plus a smooth spatial field. Channel `c >= 1` follows channel 0 delayed by
/// `c * lag` slots (blended with an independent pattern by `1 - coupling`).
/// Each day draws its own amplitude and phase jitter; every cell gets
/// Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub amplitude: f64,
    /// Phase offset in slots.
    pub phase: f64,
    pub spatial_strength: f64,
    pub coupling: f64,
    pub lag: usize,
    pub noise: f64,
    pub day_jitter: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            amplitude: 1.0,
            phase: 0.0,
            spatial_strength: 0.6,
            coupling: 1.0,
            lag: 1,
            noise: 0.05,
            day_jitter: 0.1,
        }
    }
}

/// Raw-unit scale and offset per channel: speed-like for channel 0,
/// count-like afterwards.
fn channel_affine(c: usize) -> (f64, f64) {
    if c == 0 {
        (25.0, 60.0)
    } else {
        (20.0, 40.0 + 10.0 * c as f64)
    }
}

fn spatial_field(i: f64, j: f64) -> f64 {
    0.5 * (0.3 * i + 0.2 * j).sin() + 0.02 * (i - j)
}

fn amplitude_field(i: f64, j: f64) -> f64 {
    1.0 + 0.4 * (0.25 * i - 0.3 * j).cos()
}

impl SyntheticParams {
    /// Dimensionless latent signal at (possibly fractional) slot `t` of a day
    /// with amplitude factor `amp` and extra phase `dphase`.
    fn latent(&self, slots: usize, t: f64, i: f64, j: f64, amp: f64, dphase: f64) -> f64 {
        let angle = 2.0 * PI * (t + self.phase + dphase) / slots as f64;
        self.amplitude * amp * amplitude_field(i, j) * angle.sin() + self.spatial_strength * spatial_field(i, j)
    }

    /// Noise- and jitter-free channel 0 value at absolute cell `(i, j)`.
    pub fn channel0_clean(&self, slots: usize, t: usize, i: usize, j: usize) -> f64 {
        let (scale, offset) = channel_affine(0);
        offset + scale * self.latent(slots, t as f64, i as f64, j as f64, 1.0, 0.0)
    }
}

/// Generates `(days, slots, channels, side, side)` raw dynamics for a region.
pub fn generate_synthetic(
    region: &Region,
    days: usize,
    slots: usize,
    channels: usize,
    seed: u64,
    params: &SyntheticParams,
) -> Result<UrbanDynamicsTensor> {
    if days == 0 || slots == 0 || channels == 0 || region.side == 0 {
        return Err(Error::invalid("days, slots, channels and side must be at least 1"));
    }
    // Day-level jitter and each channel's noise come from separate streams,
    // so channel `c` is the same whatever the total channel count.
    let mut day_rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter: Vec<(f64, f64)> = (0..days)
        .map(|_| {
            let z_amp: f64 = StandardNormal.sample(&mut day_rng);
            let z_phase: f64 = StandardNormal.sample(&mut day_rng);
            (1.0 + params.day_jitter * z_amp, 2.0 * params.day_jitter * z_phase)
        })
        .collect();
    let side = region.side;
    let mut values = Array5::<f32>::zeros((days, slots, channels, side, side));
    for c in 0..channels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64 + 1);
        let (scale, offset) = channel_affine(c);
        for (n, &(amp, dphase)) in jitter.iter().enumerate() {
            for t in 0..slots {
                for r in 0..side {
                    for q in 0..side {
                        let (i, j) = region.cell(r, q);
                        let (fi, fj) = (i as f64, j as f64);
                        let latent = if c == 0 {
                            params.latent(slots, t as f64, fi, fj, amp, dphase)
                        } else {
                            let lagged = params.latent(slots, t as f64 - (c * params.lag) as f64, fi, fj, amp, dphase);
                            let own = params.latent(slots, t as f64 + slots as f64 / 3.0 * c as f64, fj, fi, amp, dphase);
                            params.coupling * lagged + (1.0 - params.coupling) * own
                        };
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        values[[n, t, c, r, q]] = (offset + scale * (latent + params.noise * eps)) as f32;
                    }
                }
            }
        }
    }
    UrbanDynamicsTensor::new(values, default_channel_names(channels), *region, "synthetic")
}
