//! On-disk dataset layout: a directory holding a JSON `meta` file and a
//! little-endian `values.f32` payload.

use std::fs;
use std::path::Path;

use ndarray::{s, Array5};
use serde::{Deserialize, Serialize};

use super::{NormalizationScaler, Region, UrbanDynamicsTensor};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta";
pub const VALUES_FILE: &str = "values.f32";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    city: String,
    region: Region,
    #[serde(rename = "N")]
    days: usize,
    #[serde(rename = "T")]
    slots: usize,
    #[serde(rename = "C")]
    channels: usize,
    channel_names: Vec<String>,
    normalized: bool,
    scaler: Option<NormalizationScaler>,
}

/// Several regions sharing one payload laid out `(C, N, T, R, side, side)`,
/// i.e. per-channel `(N, T, R, side, side)` blocks back to back.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackedMeta {
    city: String,
    layout: String,
    #[serde(rename = "N")]
    days: usize,
    #[serde(rename = "T")]
    slots: usize,
    #[serde(rename = "R")]
    n_regions: usize,
    #[serde(rename = "C")]
    channels: usize,
    side: usize,
    channel_names: Vec<String>,
    regions: Vec<Region>,
    normalized: bool,
    scaler: Option<NormalizationScaler>,
}

pub(crate) fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, format!("{} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(read_f32_bytes(&bytes))
}

pub(crate) fn read_f32_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn read_meta<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

fn write_meta<T: Serialize>(dir: &Path, meta: &T) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn save_dataset(tensor: &UrbanDynamicsTensor, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let shape = tensor.shape();
    let meta = DatasetMeta {
        city: tensor.city.clone(),
        region: tensor.region,
        days: shape.days,
        slots: shape.slots,
        channels: shape.channels,
        channel_names: tensor.channel_names.clone(),
        normalized: tensor.normalized,
        scaler: tensor.scaler.clone(),
    };
    write_meta(dir, &meta)?;
    write_f32(&dir.join(VALUES_FILE), tensor.values().iter().copied())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<UrbanDynamicsTensor> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = read_meta(dir)?;
    let values_path = dir.join(VALUES_FILE);
    let values = read_f32(&values_path)?;
    let side = meta.region.side;
    let expect = meta.days * meta.slots * meta.channels * side * side;
    if values.len() != expect {
        return Err(Error::format(
            &values_path,
            format!(
                "meta declares ({}, {}, {}, {side}, {side}) = {expect} values, payload has {}",
                meta.days,
                meta.slots,
                meta.channels,
                values.len()
            ),
        ));
    }
    let arr = Array5::from_shape_vec((meta.days, meta.slots, meta.channels, side, side), values)
        .expect("length checked");
    let mut t = UrbanDynamicsTensor::new(arr, meta.channel_names, meta.region, meta.city)
        .map_err(|e| Error::format(dir, e.to_string()))?;
    t.normalized = meta.normalized;
    t.scaler = meta.scaler;
    Ok(t)
}

/// Writes same-shaped region tensors as one stacked dataset.
pub fn save_stacked(tensors: &[UrbanDynamicsTensor], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let first = tensors.first().ok_or_else(|| Error::invalid("no tensors to save"))?;
    let shape = first.shape();
    if tensors.iter().any(|t| t.shape() != shape) {
        return Err(Error::invalid("stacked tensors must share one shape"));
    }
    let meta = StackedMeta {
        city: first.city.clone(),
        layout: "stacked".into(),
        days: shape.days,
        slots: shape.slots,
        n_regions: tensors.len(),
        channels: shape.channels,
        side: shape.side,
        channel_names: first.channel_names.clone(),
        regions: tensors.iter().map(|t| t.region).collect(),
        normalized: first.normalized,
        scaler: first.scaler.clone(),
    };
    write_meta(dir, &meta)?;
    let mut out = Vec::with_capacity(tensors.len() * first.values().len());
    for c in 0..shape.channels {
        for n in 0..shape.days {
            for t in 0..shape.slots {
                for tensor in tensors {
                    out.extend(tensor.values().slice(s![n, t, c, .., ..]).iter().copied());
                }
            }
        }
    }
    write_f32(&dir.join(VALUES_FILE), out.into_iter())
}

fn unstack(
    values: &[f32],
    days: usize,
    slots: usize,
    channels: usize,
    side: usize,
    regions: &[Region],
    names: &[String],
    city: &str,
) -> Result<Vec<UrbanDynamicsTensor>> {
    let r_count = regions.len();
    let cell = side * side;
    regions
        .iter()
        .enumerate()
        .map(|(r, region)| {
            let arr = Array5::from_shape_fn((days, slots, channels, side, side), |(n, t, c, i, j)| {
                values[((((c * days + n) * slots + t) * r_count + r) * cell) + i * side + j]
            });
            UrbanDynamicsTensor::new(arr, names.to_vec(), *region, city)
        })
        .collect()
}

/// Loads a stacked dataset as one tensor per region.
pub fn load_stacked(dir: impl AsRef<Path>) -> Result<Vec<UrbanDynamicsTensor>> {
    let dir = dir.as_ref();
    let meta: StackedMeta = read_meta(dir)?;
    if meta.layout != "stacked" {
        return Err(Error::format(dir.join(META_FILE), format!("unknown layout `{}`", meta.layout)));
    }
    if meta.regions.len() != meta.n_regions {
        return Err(Error::format(dir.join(META_FILE), "region list length differs from R"));
    }
    let values_path = dir.join(VALUES_FILE);
    let values = read_f32(&values_path)?;
    let expect = meta.channels * meta.days * meta.slots * meta.n_regions * meta.side * meta.side;
    if values.len() != expect {
        return Err(Error::format(
            &values_path,
            format!("expected {expect} values, payload has {}", values.len()),
        ));
    }
    let mut out = unstack(
        &values,
        meta.days,
        meta.slots,
        meta.channels,
        meta.side,
        &meta.regions,
        &meta.channel_names,
        &meta.city,
    )
    .map_err(|e| Error::format(dir, e.to_string()))?;
    for t in &mut out {
        t.normalized = meta.normalized;
        t.scaler = meta.scaler.clone();
    }
    Ok(out)
}

/// Imports pre-gridded raw per-channel files, each shaped
/// `(days, slots, regions, side, side)` in little-endian `f32`.
pub fn import_stacked(
    city: &str,
    channel_files: &[(String, std::path::PathBuf)],
    days: usize,
    slots: usize,
    regions: &[Region],
    side: usize,
) -> Result<Vec<UrbanDynamicsTensor>> {
    let mut values = Vec::new();
    for (_, path) in channel_files {
        let chunk = read_f32(path)?;
        let expect = days * slots * regions.len() * side * side;
        if chunk.len() != expect {
            return Err(Error::format(
                path,
                format!("expected {expect} values for ({days}, {slots}, {}, {side}, {side}), found {}", regions.len(), chunk.len()),
            ));
        }
        values.extend(chunk);
    }
    let names: Vec<String> = channel_files.iter().map(|(n, _)| n.clone()).collect();
    unstack(&values, days, slots, names.len(), side, regions, &names, city)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{generate_synthetic, partition_city, CityGrid, SyntheticParams};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = generate_synthetic(&Region::new((1, 11), 10), 3, 12, 3, 4, &SyntheticParams::default()).unwrap();
        save_dataset(&t, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn short_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let t = generate_synthetic(&Region::new((1, 1), 10), 30, 12, 3, 4, &SyntheticParams::default()).unwrap();
        save_dataset(&t, dir.path()).unwrap();
        let path = dir.path().join(VALUES_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn corrupt_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let t = generate_synthetic(&Region::new((1, 1), 2), 1, 2, 1, 4, &SyntheticParams::default()).unwrap();
        save_dataset(&t, dir.path()).unwrap();
        fs::write(dir.path().join(META_FILE), "{\"city\": ").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn shenzhen_shaped_stack_loads_as_63_regions() {
        let grid = CityGrid::new("Shenzhen", 40, 50).unwrap();
        let regions = partition_city(&grid, 10, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("speed.f32");
        let (days, slots) = (162, 12);
        let n = days * slots * regions.len() * 100;
        write_f32(&raw, (0..n).map(|i| (i % 9973) as f32)).unwrap();
        let tensors = import_stacked("Shenzhen", &[("speed".into(), raw)], days, slots, &regions, 10).unwrap();
        assert_eq!(tensors.len(), 63);
        assert_eq!(tensors[5].values().dim(), (162, 12, 1, 10, 10));
        // Element (n=1, t=2, r=5, i=3, j=4) of the (N, T, R, l, l) payload.
        let flat = (((12 + 2) * 63 + 5) * 100) + 34;
        assert_eq!(tensors[5].values()[[1, 2, 0, 3, 4]], (flat % 9973) as f32);

        let out = dir.path().join("stacked");
        save_stacked(&tensors, &out).unwrap();
        let back = load_stacked(&out).unwrap();
        assert_eq!(back.len(), 63);
        assert_eq!(back[62], tensors[62]);
    }
}
