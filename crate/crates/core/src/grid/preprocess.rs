use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use super::UrbanDynamicsTensor;
use crate::error::{Error, Result};

/// Per-channel upper bound rule applied before normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ClipRule {
    /// Fixed cap, e.g. 140 for speed.
    Cap { value: f64 },
    /// Cap at the given percentile of the channel's own distribution.
    Percentile { q: f64 },
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPolicy {
    pub rules: Vec<ClipRule>,
}

pub const SPEED_CAP: f64 = 140.0;
pub const COUNT_PERCENTILE: f64 = 90.0;

impl ClipPolicy {
    /// Speed-type channels get the fixed cap; every other channel is
    /// treated as a count and capped at its 90th percentile.
    pub fn for_channels(names: &[String]) -> Self {
        let rules = names
            .iter()
            .map(|n| {
                if n.eq_ignore_ascii_case("speed") {
                    ClipRule::Cap { value: SPEED_CAP }
                } else {
                    ClipRule::Percentile {
                        q: COUNT_PERCENTILE,
                    }
                }
            })
            .collect();
        ClipPolicy { rules }
    }
}

/// Linear-interpolation percentile (rank `q/100 * (n-1)` over sorted values).
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let rank = (q / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Some(values[lo] + (values[hi] - values[lo]) * frac)
}

/// Resolves a policy to concrete per-channel caps over the pooled values of
/// every tensor given.
pub fn clip_thresholds(
    tensors: &[&UrbanDynamicsTensor],
    policy: &ClipPolicy,
) -> Result<Vec<Option<f64>>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::invalid("no tensors to clip"))?;
    let channels = first.shape().channels;
    if policy.rules.len() != channels {
        return Err(Error::invalid(format!(
            "{} clip rules for {channels} channels",
            policy.rules.len()
        )));
    }
    policy
        .rules
        .iter()
        .enumerate()
        .map(|(c, rule)| match *rule {
            ClipRule::Cap { value } => Ok(Some(value)),
            ClipRule::None => Ok(None),
            ClipRule::Percentile { q } => {
                let mut pooled: Vec<f64> = tensors
                    .iter()
                    .flat_map(|t| t.values().slice(s![.., .., c, .., ..]).iter().map(|&v| v as f64).collect::<Vec<_>>())
                    .collect();
                percentile(&mut pooled, q)
                    .map(Some)
                    .ok_or_else(|| Error::invalid(format!("channel {c} is empty")))
            }
        })
        .collect()
}

pub(crate) fn apply_caps(tensor: &mut UrbanDynamicsTensor, caps: &[Option<f64>]) {
    for (c, cap) in caps.iter().enumerate() {
        if let Some(cap) = cap {
            let cap = *cap as f32;
            tensor
                .values_mut()
                .slice_mut(s![.., .., c, .., ..])
                .mapv_inplace(|v| v.min(cap));
        }
    }
}

/// Clips outliers in a raw (not yet normalized) tensor. Values never increase.
pub fn clip_outliers(raw: &UrbanDynamicsTensor, policy: &ClipPolicy) -> Result<UrbanDynamicsTensor> {
    if raw.normalized {
        return Err(Error::invalid("clip_outliers expects raw, unnormalized data"));
    }
    if raw.values().is_empty() {
        return Err(Error::invalid("empty tensor"));
    }
    let caps = clip_thresholds(&[raw], policy)?;
    let mut out = raw.clone();
    apply_caps(&mut out, &caps);
    Ok(out)
}

/// Per-channel affine map of `[min, max]` onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationScaler {
    pub per_channel_min: Vec<f64>,
    pub per_channel_max: Vec<f64>,
    pub clip_policy: Option<ClipPolicy>,
}

impl NormalizationScaler {
    pub fn fit(tensors: &[&UrbanDynamicsTensor]) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::invalid("no tensors to fit"))?;
        let channels = first.shape().channels;
        let mut mins = vec![f64::INFINITY; channels];
        let mut maxs = vec![f64::NEG_INFINITY; channels];
        for t in tensors {
            if t.shape().channels != channels {
                return Err(Error::invalid("channel count differs between tensors"));
            }
            for (c, lane) in t.values().axis_iter(Axis(2)).enumerate() {
                for &v in lane.iter() {
                    mins[c] = mins[c].min(v as f64);
                    maxs[c] = maxs[c].max(v as f64);
                }
            }
        }
        for c in 0..channels {
            if !(maxs[c] > mins[c]) {
                return Err(Error::DegenerateScale {
                    channel: c,
                    value: mins[c],
                });
            }
        }
        Ok(NormalizationScaler {
            per_channel_min: mins,
            per_channel_max: maxs,
            clip_policy: None,
        })
    }

    pub fn normalize_value(&self, c: usize, x: f64) -> f64 {
        let (lo, hi) = (self.per_channel_min[c], self.per_channel_max[c]);
        2.0 * (x - lo) / (hi - lo) - 1.0
    }

    pub fn denormalize_value(&self, c: usize, y: f64) -> f64 {
        let (lo, hi) = (self.per_channel_min[c], self.per_channel_max[c]);
        (y + 1.0) * 0.5 * (hi - lo) + lo
    }

    /// Normalizes a raw tensor. Values outside the fitted range are clamped
    /// to `[-1, 1]` so the normalized invariant holds for unseen data.
    pub fn apply(&self, raw: &UrbanDynamicsTensor) -> Result<UrbanDynamicsTensor> {
        if raw.normalized {
            return Err(Error::invalid("tensor already normalized"));
        }
        if raw.shape().channels != self.per_channel_min.len() {
            return Err(Error::invalid("scaler channel count mismatch"));
        }
        let mut out = raw.clone();
        for c in 0..self.per_channel_min.len() {
            out.values_mut()
                .slice_mut(s![.., .., c, .., ..])
                .mapv_inplace(|v| self.normalize_value(c, v as f64).clamp(-1.0, 1.0) as f32);
        }
        out.normalized = true;
        out.scaler = Some(self.clone());
        Ok(out)
    }

    pub fn invert(&self, normalized: &UrbanDynamicsTensor) -> Result<UrbanDynamicsTensor> {
        if !normalized.normalized {
            return Err(Error::invalid("tensor is not normalized"));
        }
        let mut out = normalized.clone();
        for c in 0..self.per_channel_min.len() {
            out.values_mut()
                .slice_mut(s![.., .., c, .., ..])
                .mapv_inplace(|v| self.denormalize_value(c, v as f64) as f32);
        }
        out.normalized = false;
        out.scaler = None;
        Ok(out)
    }

    pub(crate) fn select(&self, channels: &[usize]) -> Self {
        NormalizationScaler {
            per_channel_min: channels.iter().map(|&c| self.per_channel_min[c]).collect(),
            per_channel_max: channels.iter().map(|&c| self.per_channel_max[c]).collect(),
            clip_policy: self.clip_policy.as_ref().map(|p| ClipPolicy {
                rules: channels.iter().map(|&c| p.rules[c]).collect(),
            }),
        }
    }
}

/// Fits a scaler on `raw` and returns the normalized tensor with it.
pub fn minmax_normalize(raw: &UrbanDynamicsTensor) -> Result<(UrbanDynamicsTensor, NormalizationScaler)> {
    let scaler = NormalizationScaler::fit(&[raw])?;
    let out = scaler.apply(raw)?;
    Ok((out, scaler))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Region;
    use ndarray::Array5;

    fn tensor(values: Vec<f32>, channels: usize, names: &[&str]) -> UrbanDynamicsTensor {
        let n = values.len() / channels;
        let arr = Array5::from_shape_vec((1, n, channels, 1, 1), values).unwrap();
        UrbanDynamicsTensor::new(
            arr,
            names.iter().map(|s| s.to_string()).collect(),
            Region::new((1, 1), 1),
            "t",
        )
        .unwrap()
    }

    #[test]
    fn speed_is_capped_at_140() {
        let t = tensor(vec![155.0, 20.0, 140.0, 3.0], 1, &["speed"]);
        let clipped = clip_outliers(&t, &ClipPolicy::for_channels(&t.channel_names)).unwrap();
        let v: Vec<f32> = clipped.values().iter().cloned().collect();
        assert_eq!(v, vec![140.0, 20.0, 140.0, 3.0]);
    }

    #[test]
    fn inflow_percentile_cap_matches_hand_oracle() {
        let t = tensor((0..100).map(|v| v as f32).collect(), 1, &["inflow"]);
        let clipped = clip_outliers(&t, &ClipPolicy::for_channels(&t.channel_names)).unwrap();
        // Sorted 0..99, rank 0.9 * 99 = 89.1 -> 89 + 0.1 * (90 - 89).
        let p90 = 89.1f32;
        for (orig, out) in t.values().iter().zip(clipped.values().iter()) {
            if *orig > p90 {
                assert!((out - p90).abs() < 1e-5);
            } else {
                assert_eq!(orig, out);
            }
            assert!(out <= orig);
        }
    }

    #[test]
    fn inflow_below_cap_unchanged_with_fixed_threshold() {
        let t = tensor(vec![1.0, 2.0, 3.0], 1, &["inflow"]);
        let policy = ClipPolicy {
            rules: vec![ClipRule::Cap { value: 10.0 }],
        };
        assert_eq!(clip_outliers(&t, &policy).unwrap().values(), t.values());
    }

    #[test]
    fn minmax_examples() {
        let t = tensor(vec![0.0, 70.0, 140.0, 35.0], 1, &["speed"]);
        let (n, scaler) = minmax_normalize(&t).unwrap();
        let v: Vec<f32> = n.values().iter().cloned().collect();
        assert_eq!(v, vec![-1.0, 0.0, 1.0, -0.5]);
        // Oracle: 2 (x - min) / (max - min) - 1.
        assert_eq!(scaler.normalize_value(0, 35.0), 2.0 * 35.0 / 140.0 - 1.0);
        assert!(n.normalized);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let t = tensor(vec![1.0, 3.0, 5.0, 3.0, 9.0, 3.0], 2, &["speed", "inflow"]);
        assert!(matches!(
            minmax_normalize(&t),
            Err(Error::DegenerateScale { channel: 1, .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn normalization_round_trip(lo in -500.0f64..500.0, span in 1e-3f64..1e3, frac in 0.0f64..1.0) {
            let scaler = NormalizationScaler { per_channel_min: vec![lo], per_channel_max: vec![lo + span], clip_policy: None };
            let x = lo + frac * span;
            let back = scaler.denormalize_value(0, scaler.normalize_value(0, x));
            proptest::prop_assert!((back - x).abs() < 1e-6);
            let y = scaler.normalize_value(0, x);
            proptest::prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&y));
        }
    }
}
