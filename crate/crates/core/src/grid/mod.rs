//! City grids, regions and the per-region urban dynamics tensor.

mod io;
mod preprocess;
mod split;
mod synthetic;

use ndarray::{s, Array4, Array5, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{import_stacked, load_dataset, load_stacked, save_dataset, save_stacked, META_FILE, VALUES_FILE};
pub(crate) use io::{read_f32, read_f32_bytes, write_f32};
pub(crate) use preprocess::apply_caps;
pub use preprocess::{
    clip_outliers, clip_thresholds, minmax_normalize, percentile, ClipPolicy, ClipRule,
    NormalizationScaler,
};
pub use split::{make_splits, SplitMode, SplitSpec};
pub use synthetic::{generate_synthetic, SyntheticParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityGrid {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub cell_size_km: f64,
}

impl CityGrid {
    pub fn new(name: impl Into<String>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("grid dimensions must be at least 1"));
        }
        Ok(CityGrid {
            name: name.into(),
            height,
            width,
            cell_size_km: 1.0,
        })
    }

    pub fn contains(&self, region: &Region) -> bool {
        let (i, j) = region.top_left;
        region.side >= 1
            && i >= 1
            && j >= 1
            && i + region.side - 1 <= self.height
            && j + region.side - 1 <= self.width
    }
}

/// An `side x side` block of cells anchored at a 1-based top-left cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub top_left: (usize, usize),
    pub side: usize,
}

impl Region {
    pub fn new(top_left: (usize, usize), side: usize) -> Self {
        Region { top_left, side }
    }

    /// Absolute 1-based cell coordinates of local cell `(r, c)`.
    pub fn cell(&self, r: usize, c: usize) -> (usize, usize) {
        (self.top_left.0 + r, self.top_left.1 + c)
    }
}

/// Every `side x side` window whose top-left advances by `stride` along both
/// axes, row-major.
pub fn partition_city(grid: &CityGrid, side: usize, stride: usize) -> Result<Vec<Region>> {
    if side == 0 || side > grid.height.min(grid.width) {
        return Err(Error::invalid(format!(
            "side {side} does not fit a {}x{} grid",
            grid.height, grid.width
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let mut regions = Vec::new();
    for i in (1..=grid.height - side + 1).step_by(stride) {
        for j in (1..=grid.width - side + 1).step_by(stride) {
            regions.push(Region::new((i, j), side));
        }
    }
    Ok(regions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorShape {
    pub days: usize,
    pub slots: usize,
    pub channels: usize,
    pub side: usize,
}

/// Urban dynamics of one region, indexed `[day, slot, channel, row, col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UrbanDynamicsTensor {
    values: Array5<f32>,
    pub channel_names: Vec<String>,
    pub region: Region,
    pub city: String,
    pub normalized: bool,
    pub scaler: Option<NormalizationScaler>,
}

impl UrbanDynamicsTensor {
    pub fn new(
        values: Array5<f32>,
        channel_names: Vec<String>,
        region: Region,
        city: impl Into<String>,
    ) -> Result<Self> {
        let (_, _, c, h, w) = values.dim();
        if h != region.side || w != region.side {
            return Err(Error::invalid(format!(
                "spatial extent {h}x{w} does not match region side {}",
                region.side
            )));
        }
        if channel_names.len() != c {
            return Err(Error::invalid(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor contains non-finite values"));
        }
        Ok(UrbanDynamicsTensor {
            values,
            channel_names,
            region,
            city: city.into(),
            normalized: false,
            scaler: None,
        })
    }

    pub fn shape(&self) -> TensorShape {
        let (days, slots, channels, side, _) = self.values.dim();
        TensorShape {
            days,
            slots,
            channels,
            side,
        }
    }

    pub fn values(&self) -> &Array5<f32> {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut Array5<f32> {
        &mut self.values
    }

    /// One day as `(slots, channels, side, side)`.
    pub fn day(&self, n: usize) -> ArrayView4<'_, f32> {
        self.values.slice(s![n, .., .., .., ..])
    }

    /// One day of a single channel as `(slots, 1, side, side)`.
    pub fn day_channel(&self, n: usize, c: usize) -> Array4<f32> {
        self.values
            .slice(s![n, .., c..c + 1, .., ..])
            .to_owned()
    }

    /// Keeps the listed channels, in order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let shape = self.shape();
        if channels.is_empty() || channels.iter().any(|&c| c >= shape.channels) {
            return Err(Error::invalid("channel selection out of range"));
        }
        let views: Vec<_> = channels
            .iter()
            .map(|&c| self.values.slice(s![.., .., c..c + 1, .., ..]))
            .collect();
        let values = ndarray::concatenate(ndarray::Axis(2), &views).expect("same shape");
        Ok(UrbanDynamicsTensor {
            values,
            channel_names: channels.iter().map(|&c| self.channel_names[c].clone()).collect(),
            region: self.region,
            city: self.city.clone(),
            normalized: self.normalized,
            scaler: self.scaler.as_ref().map(|s| s.select(channels)),
        })
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }
}

/// Default channel names: the three dynamics, then `dyn<c>`.
pub fn default_channel_names(channels: usize) -> Vec<String> {
    const KNOWN: [&str; 3] = ["speed", "inflow", "demand"];
    (0..channels)
        .map(|c| KNOWN.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("dyn{c}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(h: usize, w: usize, side: usize, stride: usize) -> usize {
        let grid = CityGrid::new("t", h, w).unwrap();
        partition_city(&grid, side, stride).unwrap().len()
    }

    #[test]
    fn shenzhen_and_xian_region_counts() {
        assert_eq!(count(40, 50, 10, 5), 63);
        assert_eq!(count(20, 20, 10, 10), 4);
        assert_eq!(count(10, 10, 10, 1), 1);
    }

    #[test]
    fn partition_is_row_major_and_fits() {
        let grid = CityGrid::new("t", 20, 20).unwrap();
        let regions = partition_city(&grid, 10, 10).unwrap();
        let anchors: Vec<_> = regions.iter().map(|r| r.top_left).collect();
        assert_eq!(anchors, vec![(1, 1), (1, 11), (11, 1), (11, 11)]);
        assert!(regions.iter().all(|r| grid.contains(r)));
    }

    #[test]
    fn oversized_side_is_rejected() {
        let grid = CityGrid::new("t", 8, 20).unwrap();
        assert!(matches!(partition_city(&grid, 10, 1), Err(Error::InvalidArgument(_))));
        assert!(partition_city(&grid, 4, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn region_count_matches_closed_form(h in 1usize..60, w in 1usize..60, side in 1usize..20, stride in 1usize..12) {
            let grid = CityGrid::new("p", h, w).unwrap();
            match partition_city(&grid, side, stride) {
                Ok(regions) => {
                    let expect = ((h - side) / stride + 1) * ((w - side) / stride + 1);
                    proptest::prop_assert_eq!(regions.len(), expect);
                    proptest::prop_assert!(regions.iter().all(|r| grid.contains(r)));
                }
                Err(_) => proptest::prop_assert!(side > h.min(w)),
            }
        }
    }
}
